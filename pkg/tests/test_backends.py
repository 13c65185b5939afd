"""The pure-Python fallback, exercised in fresh interpreters."""
import json

import pytest

from conftest import needs_native, run_python

PURE = {"EFFSTACK_BACKEND": "python"}

PURE_WORKLOADS = r"""
import json
from effstack import BACKEND, kernels, stacks
from effstack.bench import mt_oracle

out = {"backend": BACKEND, "kernels": kernels.kernel_switch.__module__}
for s in stacks.STRATEGIES:
    fs = stacks.default_frame_size(s)
    r = {}
    r["switch"] = kernels.kernel_switch(s, fs)[1]
    r["complex"] = list(kernels.kernel_complex(s, fs, 50)[1:])
    if s != "fixed":
        r["expand"] = kernels.kernel_expand(s, fs, 30)[1]
    r["mt"] = kernels.kernel_mt(s, fs, 2, 30, 3)[1] == mt_oracle(2, 30, 3)
    r["ad"] = round(kernels.kernel_ad(s, fs, 100)["derivative"], 6)
    r["read_file"] = kernels.demo_read_file(s, fs, b"file text")[1].decode()
    out[s] = r
f = stacks.new_frame("overcommit-user")
seq = []
for i in range(1, 9):
    f.write(f.initial_sp - i * stacks.PAGE_SIZE, b"x")
    seq.append(f.committed_bytes() // stacks.PAGE_SIZE)
out["doubling"] = seq
print(json.dumps(out))
"""


def test_forced_python_backend_runs_every_workload():
    r = run_python(PURE_WORKLOADS, PURE, timeout=300)
    assert r.returncode == 0, r.stderr
    out = json.loads(r.stdout)
    assert out["backend"] == "python"
    assert out["kernels"] == "effstack._pure.kernels"
    for s in ("fixed", "segmented", "overcommit-kernel", "overcommit-user"):
        got = out[s]
        assert got["complex"] == [50, 50 * 4950]
        assert got["mt"] is True
        assert got["ad"] == -4.0
        assert got["read_file"] == "file text"
        if s != "fixed":
            assert got["expand"] == 30
    assert out["doubling"] == [1, 2, 4, 4, 8, 8, 8, 8]


def test_pure_overflow_is_an_exception():
    code = ("from effstack.stacks import ShadowStack, StackOverflowError\n"
            "s = ShadowStack('overcommit-user', 8192)\n"
            "try:\n    s.reserve(1 << 20)\nexcept StackOverflowError as e:\n    print('caught', e)\n")
    r = run_python(code, PURE)
    assert r.returncode == 0 and r.stdout.startswith("caught stack overflow")


def test_pure_guard_write_is_fatal():
    code = ("from effstack import stacks\n"
            "f = stacks.new_frame('overcommit-user')\n"
            "f.write(f.base + 8, b'x')\n")
    r = run_python(code, PURE)
    assert r.returncode != 0
    assert "stack overflow" in r.stderr


def test_auto_falls_back_when_extension_missing():
    code = ("import sys\n"
            "sys.modules['effstack._native'] = None\n"
            "import effstack\n"
            "print(effstack.BACKEND)\n")
    r = run_python(code)
    assert r.stdout.strip() == "python"


def test_forcing_native_without_extension_fails():
    code = ("import sys\n"
            "sys.modules['effstack._native'] = None\n"
            "import effstack\n")
    r = run_python(code, {"EFFSTACK_BACKEND": "native"})
    assert r.returncode != 0 and "effstack._native" in r.stderr


def test_unknown_backend_rejected():
    r = run_python("import effstack", {"EFFSTACK_BACKEND": "fortran"})
    assert r.returncode != 0 and "EFFSTACK_BACKEND" in r.stderr


@needs_native
def test_default_is_native():
    r = run_python("import effstack; print(effstack.BACKEND)", {"EFFSTACK_BACKEND": "auto"})
    assert r.stdout.strip() == "native"


@pytest.mark.parametrize("strategy", ["fixed", "segmented", "overcommit-kernel", "overcommit-user"])
def test_backends_agree_on_fault_decisions(strategy):
    code = ("import json\n"
            "from effstack import stacks\n"
            "P = stacks.PAGE_SIZE\n"
            "base, guard, allowed = 1 << 20, P, 38 * P\n"
            "out = []\n"
            "for committed in (0, P, 3 * P, 20 * P, 38 * P):\n"
            "    for off in (0, 8, P, 2 * P + 5, 30 * P, 38 * P, 39 * P - 1, 39 * P, 40 * P):\n"
            f"        out.append(list(stacks.fault_decide(stacks.Kind[{strategy.upper().replace('-', '_')!r}], "
            "base, guard + allowed, allowed, guard, committed, base + off)))\n"
            "print(json.dumps(out))\n")
    native = run_python(code, {"EFFSTACK_BACKEND": "auto"})
    pure = run_python(code, PURE)
    assert native.returncode == 0 and pure.returncode == 0, native.stderr + pure.stderr
    assert json.loads(native.stdout) == json.loads(pure.stdout)
