"""Time the compiled kernels against the pure-Python fallback.

Each backend runs in its own interpreter with EFFSTACK_BACKEND set, since
the backend is chosen once at import.

    python benchmarks/compare_backends.py [--repeats N] [--strategy S]
"""
import argparse
import json
import os
import statistics
import subprocess
import sys

WORKER = r"""
import json, statistics, sys
from time import perf_counter_ns
from effstack import BACKEND, kernels
from effstack.stacks import default_frame_size

strategy, repeats = sys.argv[1], int(sys.argv[2])
fs = default_frame_size(strategy)

def timed(fn, *a):
    t0 = perf_counter_ns()
    fn(*a)
    return perf_counter_ns() - t0

cases = {
    "switch": lambda: kernels.kernel_switch(strategy, fs)[0],
    "complex(1000)": lambda: kernels.kernel_complex(strategy, fs, 1000)[0],
    "ad(20)": lambda: kernels.kernel_ad(strategy, fs, 20, 0.5)["duration_ns"],
    "run_async(100)": lambda: timed(kernels.run_async, strategy, fs, 100, 1),
}
if strategy != "fixed":
    cases["expand(100)"] = lambda: kernels.kernel_expand(strategy, fs, 100)[0]

out = {}
for name, fn in cases.items():
    fn()
    out[name] = statistics.median(fn() for _ in range(repeats))
print(json.dumps({"backend": BACKEND, "medians": out}))
"""


def measure(backend, strategy, repeats):
    env = dict(os.environ, EFFSTACK_BACKEND=backend, EFFSTACK_DEBUG="0")
    proc = subprocess.run([sys.executable, "-c", WORKER, strategy, str(repeats)],
                          env=env, capture_output=True, text=True, check=False)
    if proc.returncode != 0:
        raise SystemExit(f"{backend} worker failed:\n{proc.stderr}")
    return json.loads(proc.stdout.strip().splitlines()[-1])


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=11)
    ap.add_argument("--strategy", default="segmented")
    args = ap.parse_args(argv)

    native = measure("native", args.strategy, args.repeats)
    pure = measure("python", args.strategy, args.repeats)
    if native["backend"] != "native":
        print("compiled core not importable; only the fallback was measured", file=sys.stderr)

    print(f"strategy: {args.strategy}, repeats: {args.repeats}")
    print(f"{'workload':<16}{'native ns':>14}{'python ns':>14}{'ratio':>10}")
    for name, p in pure["medians"].items():
        n = native["medians"].get(name)
        ratio = f"{p / n:.1f}x" if n else "-"
        print(f"{name:<16}{n if n is not None else '-':>14}{p:>14}{ratio:>10}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
