"""Acceptance criteria, one test each.

Every test prints a single ``criterion N: PASS|FAIL ...`` line (also visible
without ``-s``). Run just this file with ``pytest tests/test_acceptance.py -v``;
criterion 10 is marked slow and takes a few minutes.
"""
import csv
import io
import random
import statistics
import subprocess
import sys
import time

import pytest

from effstack import STRATEGIES, stacks
from effstack.ad_demo import run_ad
from effstack.stacks import PAGE_SIZE as P
from effstack.stacks import ShadowStack

from conftest import native, needs_native, run_python

MT_ORACLE = 216540330000
AD_EXPECT = -4.0


@pytest.fixture
def report(capsys):
    def emit(label, ok, detail=""):
        with capsys.disabled():
            print(f"\ncriterion {label}: {'PASS' if ok else 'FAIL'} {detail}".rstrip(), flush=True)
        assert ok, f"criterion {label}: {detail}"
    return emit


def bench_cli(*argv, timeout=600):
    """Run effstack-bench in a child; returns (exit code, rows, stderr, seconds)."""
    t0 = time.monotonic()
    r = subprocess.run([sys.executable, "-m", "effstack.bench", *argv], capture_output=True, text=True,
                       timeout=timeout, check=False)
    rows = list(csv.DictReader(io.StringIO(r.stdout)))
    return r.returncode, rows, r.stderr, time.monotonic() - t0


def medians(rows):
    return {row["strategy"]: float(row["median_ns"]) for row in rows}


def test_1_multithread_oracle(report):
    details, ok = [], True
    for s in STRATEGIES:
        rc, rows, err, secs = bench_cli("mt", "--threads", "4", "--iters", "10000", "--strategy", s)
        got = int(rows[0]["output_value"]) if rows else None
        good = rc == 0 and got == MT_ORACLE and secs < 30
        ok &= good
        details.append(f"{s}={got} ({secs:.1f}s)")
    report("1", ok, "mt 4x10000 -> " + ", ".join(details))


def test_2_ad_oracle(report):
    rc, rows, err, _ = bench_cli("ad", "--iters", "100", "--strategy", "all", "--repeats", "5")
    outs = {row["strategy"]: float(row["output_value"]) for row in rows}
    cli_ok = rc == 0 and set(outs) == set(STRATEGIES) and all(abs(v - AD_EXPECT) <= 1e-4 for v in outs.values())

    rng = random.Random(20240)
    worst = 0.0
    h = 1e-6
    for _ in range(50):
        x, iters = rng.uniform(0.01, 0.99), rng.randint(0, 20)
        d = ad_point(iters, x)[1]
        fd = (ad_point(iters, x + h)[0] - ad_point(iters, x - h)[0]) / (2 * h)
        worst = max(worst, abs(d - fd) / max(abs(fd), 1.0))
    report("2", cli_ok and worst <= 1e-6,
           f"derivatives {sorted(set(f'{v:.6f}' for v in outs.values()))}; worst FD rel error {worst:.2e} over 50 pairs")


def ad_point(iters, x):
    if native is not None:
        r = native.kernel_ad("fixed", native.default_frame_size("fixed"), iters, x)
        return r["value"], r["derivative"]
    run = run_ad(iters, x, "fixed")
    return run.result.v, run.derivative


def test_3_commit_doubling(report):
    f = stacks.new_frame("overcommit-user")
    pages = f.allowed_size // P
    seen, waste_ok = [], True
    for i in range(1, pages + 1):
        f.write(f.initial_sp - i * P, b"\x01")
        c = f.committed_bytes()
        seen.append(c // P)
        waste_ok &= c <= 2 * i * P + P
    f.release()
    expect = [min(1 << (i - 1).bit_length(), pages) for i in range(1, pages + 1)]
    distinct = sorted(set(seen))
    report("3", seen == expect and waste_ok, f"cumulative pages {distinct}, clamp {pages}, waste bound held={waste_ok}")


@needs_native
def test_4_guard_page_safety(report):
    details, ok = [], True
    for s in ("overcommit-kernel", "overcommit-user"):
        r = run_python(f"import effstack._native as n; n.probe_overflow({s!r}, n.default_frame_size({s!r}))")
        good = (r.returncode == -6 and "stack overflow" in r.stderr and "canary intact" in r.stderr
                and "region registry" in r.stderr)
        ok &= good
        details.append(f"{s}: rc={r.returncode} diagnostic={'stack overflow' in r.stderr} "
                       f"canary={'intact' if 'canary intact' in r.stderr else 'NOT verified'}")
    report("4", ok, "; ".join(details))


@needs_native
def test_5_context_switch_fidelity(report):
    t0 = time.monotonic()
    r = native.probe_salt(10 ** 6)
    secs = time.monotonic() - t0
    ok = (r["roundtrips"] == 10 ** 6 and r["host_mismatch"] == 0 and r["coro_mismatch"] == 0
          and r["sp_changes"] == 0 and secs < 10)
    report("5", ok, f"{r['roundtrips']} round trips, register mismatches host={r['host_mismatch']} "
                    f"coroutine={r['coro_mismatch']}, sp changes={r['sp_changes']} ({secs:.2f}s)")


def test_6_hot_split(report):
    n = 10 ** 5
    t0 = time.monotonic()
    native_allocs = None
    if native is not None:
        native_allocs, _ = native.probe_hot_split("segmented", n, 4096)
    s = ShadowStack("segmented")
    crossing = s.available()
    for _ in range(n):
        s.reserve(crossing)
        s.release()
    py_allocs = s.frame.allocations
    s.close()
    secs = time.monotonic() - t0
    ok = py_allocs == 1 and native_allocs in (None, 1) and secs < 5
    report("6", ok, f"{n} boundary crossings: native allocations={native_allocs}, "
                    f"runtime allocations={py_allocs} ({secs:.2f}s)")


def test_7a_switch_ordering(report):
    rc, rows, err, _ = bench_cli("switch", "--strategy", "all")
    m = medians(rows)
    fixed, seg, kern, user = (m.get(s, float("nan")) for s in STRATEGIES)
    ok = rc == 0 and max(fixed, seg) <= 2 * min(fixed, seg) and max(fixed, seg) < kern < user
    report("7a", ok, f"switch medians ns fixed={fixed:.0f} segmented={seg:.0f} kernel={kern:.0f} user={user:.0f}")


def test_7b_expand_ordering(report):
    rc, rows, err, _ = bench_cli("expand", "--strategy", "all")
    m = medians(rows)
    seg, kern, user = (m.get(s, float("nan")) for s in STRATEGIES[1:])
    ok = rc == 0 and "fixed" not in m and kern < user < seg
    report("7b", ok, f"expand medians ns kernel={kern:.0f} user={user:.0f} segmented={seg:.0f} "
                     "(want kernel < user < segmented)")


def test_7c_complex_convergence(report):
    rc, rows, err, _ = bench_cli("complex", "--strategy", "all", "--iters", "10000")
    m = medians(rows)
    mean = statistics.mean(m.values()) if m else float("nan")
    spread = max(abs(v - mean) / mean for v in m.values()) if m else float("nan")
    ok = rc == 0 and len(m) == 4 and spread <= 0.15
    report("7c", ok, "complex 10000 medians ns " + " ".join(f"{k}={v:.0f}" for k, v in m.items())
           + f"; max deviation from mean {spread:.1%}")


def test_8_read_file_tutorial(report):
    from effstack import kernels

    text = b"The handler supplied this line.\n"
    got = {}
    for s in STRATEGIES:
        seen, body_got = kernels.demo_read_file(s, stacks.default_frame_size(s), text)
        got[s] = seen == b"example.txt" and body_got == text
    report("8", all(got.values()), "verbatim under " + ", ".join(f"{k}={v}" for k, v in got.items()))


def list_walk(masks, effect):
    for i in range(len(masks) - 1, -1, -1):
        if masks[i] >> effect & 1:
            return i
    return None


def random_nest(rng):
    masks = []
    for _ in range(rng.randint(1, 8)):
        if rng.random() < 0.2:
            masks.append(rng.getrandbits(64))
        else:
            masks.append(sum(1 << rng.randrange(8) for _ in range(rng.randint(0, 3))))
    return masks, rng.randrange(10) if rng.random() < 0.9 else rng.randrange(64)


def test_9_handler_lookup(report):
    from test_effects import python_locate

    rng = random.Random(9)
    trials = 10 ** 4
    t0 = time.monotonic()
    bad_native = 0
    if native is not None:
        for _ in range(trials):
            masks, e = random_nest(rng)
            bad_native += native.probe_locate(masks, e) != list_walk(masks, e)
    native_secs = time.monotonic() - t0
    py_trials, bad_py = 1000, 0
    for _ in range(py_trials):
        masks, e = random_nest(rng)
        bad_py += python_locate(masks, e) != list_walk(masks, e)
    ok = bad_native == 0 and bad_py == 0 and native_secs < 5
    report("9", ok, f"native {trials} trials, {bad_native} disagreements ({native_secs:.2f}s); "
                    f"runtime {py_trials} trials, {bad_py} disagreements")


@pytest.mark.slow
def test_10_stress_user_overcommit(report):
    rc, rows, err, secs = bench_cli("mt", "--strategy", "overcommit-user", "--repeats", "100", timeout=900)
    got = rows[0]["output_value"] if rows else None
    fatal = "fatal" in err or "region registry" in err
    ok = rc == 0 and got == str(MT_ORACLE) and rows[0]["repeats"] == "100" and not fatal and secs < 600
    detail = f"100 mt runs under overcommit-user: exit {rc}, output {got} ({secs:.0f}s)"
    if not ok:
        detail += "\n" + err[-4000:]
    report("10", ok, detail)
