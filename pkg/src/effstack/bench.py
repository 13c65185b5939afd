"""effstack-bench: median-of-repeats timings for the five workloads.

Every sample is checked against an independent oracle before it is counted;
a mismatch exits with status 1. ``expand`` under ``fixed`` is refused with
status 2 because the recursion does not fit a fixed frame.
"""
from __future__ import annotations

import argparse
import csv
import io
import os
import statistics
import subprocess
import sys
from dataclasses import dataclass, field

from . import kernels
from ._backend import NAME as BACKEND
from ._backend import impl
from .ad_demo import derivative_of
from .stacks import PAGE_SIZE, STRATEGIES, check_strategy, default_frame_size

BENCHMARKS = ("switch", "complex", "expand", "mt", "ad")
CSV_HEADER = ("benchmark", "strategy", "params", "repeats", "median_ns", "output_value")
MIN_REPEATS = 5
DEFAULT_REPEATS = 31
DEFAULT_WARMUP = 3
MT_REPEATS = 5
AD_TOLERANCE = 1e-4
EXIT_OK, EXIT_FAIL, EXIT_SKIP = 0, 1, 2

DEFAULT_ITERS = {"switch": 1, "complex": 10000, "expand": 1, "mt": 10000, "ad": 100}


class BenchSkip(Exception):
    """The combination is documented as not runnable."""


class OracleMismatch(AssertionError):
    pass


@dataclass
class BenchRecord:
    benchmark: str
    strategy: str
    params: dict
    repeats: int
    median_ns: float
    output_value: object = None
    samples: list = field(default_factory=list, repr=False)
    backend: str = BACKEND

    def param_string(self) -> str:
        return ";".join(f"{k}={v}" for k, v in self.params.items())

    def output_string(self) -> str:
        if self.output_value is None:
            return ""
        if isinstance(self.output_value, float):
            return f"{self.output_value:.6f}"
        return str(self.output_value)

    def row(self) -> tuple:
        med = int(self.median_ns) if float(self.median_ns).is_integer() else f"{self.median_ns:.1f}"
        return (self.benchmark, self.strategy, self.param_string(), self.repeats, med, self.output_string())


# oracles ----------------------------------------------------------------

def mt_oracle(threads: int, iterations: int, runs_per_thread: int = 1000) -> int:
    """Closed fold of the async workload, computed without coroutines."""
    total = 0
    for tid in range(1, threads + 1):
        r = tid
        for x in range(1, iterations + 1):
            r = (x + r) ^ 0xABCDEF
        total += r * runs_per_thread
    return total


def complex_oracle(iterations: int) -> tuple[int, int]:
    return iterations, iterations * sum(range(100))


def expand_commit_bounds(depth: int, frame: int = 1024 + 128) -> tuple[int, int]:
    """Committed bytes a user-overcommit frame may hold after the expand run."""
    deepest = (depth + 1) * frame
    rounded = -(-deepest // PAGE_SIZE) * PAGE_SIZE
    return depth * 1024, 2 * rounded + PAGE_SIZE


# runner -----------------------------------------------------------------

def _sample(name, strategy, p, runs_per_thread):
    fs = p["frame_size"]
    if name == "switch":
        ns, _, _ = kernels.kernel_switch(strategy, fs)
        return ns, None
    if name == "complex":
        ns, out, acc = kernels.kernel_complex(strategy, fs, p["iters"])
        want = complex_oracle(p["iters"])
        if (out, acc) != want:
            raise OracleMismatch(f"complex: got output {out}, accumulator {acc}; want {want}")
        return ns, out
    if name == "expand":
        ns, out, committed = kernels.kernel_expand(strategy, fs, p["depth"])
        if out != p["depth"]:
            raise OracleMismatch(f"expand: reached depth {out}, want {p['depth']}")
        if strategy == "overcommit-user" and p["depth"] > 0:
            lo, hi = expand_commit_bounds(p["depth"])
            if not lo <= committed <= hi:
                raise OracleMismatch(f"expand: committed {committed} bytes outside [{lo}, {hi}]")
        return ns, out
    if name == "mt":
        ns, out, _ = kernels.kernel_mt(strategy, fs, p["threads"], p["iters"], runs_per_thread)
        want = mt_oracle(p["threads"], p["iters"], runs_per_thread)
        if out != want:
            raise OracleMismatch(f"mt: got {out}, want {want}")
        return ns, out
    if name == "ad":
        res = kernels.kernel_ad(strategy, fs, p["iters"])
        d = res["derivative"]
        want = derivative_of(p["iters"], 0.5)
        if not abs(d - want) <= AD_TOLERANCE:
            raise OracleMismatch(f"ad: derivative {d:.6f}, want {want:.6f}")
        return res["duration_ns"], round(d, 6)
    raise ValueError(f"unknown benchmark {name!r}")


def prepare(name: str, strategy: str, *, iters: int | None = None, threads: int = 4, depth: int = 100,
            frame_size: int | None = None, runs_per_thread: int = 1000):
    """Validate a configuration; returns (params, sample) where sample() -> (ns, output)."""
    if name not in BENCHMARKS:
        raise ValueError(f"unknown benchmark {name!r}")
    check_strategy(strategy)
    if name == "expand" and strategy == "fixed":
        raise BenchSkip("expand is not run under the fixed strategy: the recursion outgrows a fixed frame")
    if frame_size is None:
        frame_size = default_frame_size(strategy)
    params = {}
    if name in ("complex", "mt", "ad"):
        params["iters"] = DEFAULT_ITERS[name] if iters is None else iters
    if name == "mt":
        params["threads"] = threads
        if runs_per_thread != 1000:
            params["runs_per_thread"] = runs_per_thread
    if name == "expand":
        params["depth"] = depth
    params["frame_size"] = frame_size
    return params, lambda: _sample(name, strategy, params, runs_per_thread)


def _defaults(name, repeats, warmup):
    if repeats is None:
        repeats = MT_REPEATS if name == "mt" else DEFAULT_REPEATS
    if warmup is None:
        warmup = 0 if name == "mt" else DEFAULT_WARMUP
    if repeats < MIN_REPEATS:
        raise ValueError(f"repeats must be at least {MIN_REPEATS}")
    return repeats, warmup


def _record(name, strategy, params, samples, outputs):
    if len(set(outputs)) != 1:
        raise OracleMismatch(f"{name}: output differs between repeats: {sorted(map(str, set(outputs)))}")
    return BenchRecord(name, strategy, params, len(samples), statistics.median(samples), outputs[0], samples)


def run_benchmark(name: str, strategy: str, *, iters: int | None = None, threads: int = 4, depth: int = 100,
                  frame_size: int | None = None, repeats: int | None = None, warmup: int | None = None,
                  runs_per_thread: int = 1000) -> BenchRecord:
    """Measure one benchmark under one strategy in this process."""
    repeats, warmup = _defaults(name, repeats, warmup)
    params, sample = prepare(name, strategy, iters=iters, threads=threads, depth=depth, frame_size=frame_size,
                             runs_per_thread=runs_per_thread)
    for _ in range(warmup):
        sample()
    samples, outputs = [], []
    for _ in range(repeats):
        ns, out = sample()
        samples.append(ns)
        outputs.append(out)
    return _record(name, strategy, params, samples, outputs)


# CLI --------------------------------------------------------------------

def _child_argv(args, strategy):
    argv = [sys.executable, "-m", "effstack.bench", args.benchmark, "--strategy", strategy, "--serve",
            "--threads", str(args.threads), "--depth", str(args.depth),
            "--runs-per-thread", str(args.runs_per_thread)]
    for flag, v in (("--iters", args.iters), ("--frame-size", args.frame_size)):
        if v is not None:
            argv += [flag, str(v)]
    if args.debug:
        argv.append("--debug")
    return argv


def _serve(args) -> int:
    """Child side of an interleaved run: one sample per request line."""
    out = sys.stdout
    try:
        params, sample = prepare(args.benchmark, args.strategy, iters=args.iters, threads=args.threads,
                                 depth=args.depth, frame_size=args.frame_size,
                                 runs_per_thread=args.runs_per_thread)
    except BenchSkip as e:
        out.write(f"SKIP {e}\n")
        out.flush()
        return EXIT_SKIP
    out.write("READY " + ";".join(f"{k}={v}" for k, v in params.items()) + "\n")
    out.flush()
    for line in sys.stdin:
        if line.strip() != "S":
            break
        try:
            ns, value = sample()
        except OracleMismatch as e:
            out.write(f"FAIL {e}\n")
            out.flush()
            return EXIT_FAIL
        v = "" if value is None else (f"{value:.6f}" if isinstance(value, float) else str(value))
        out.write(f"OK {ns} {v}\n")
        out.flush()
    return EXIT_OK


class _Child:
    def __init__(self, args, strategy):
        self.strategy = strategy
        env = dict(os.environ, EFFSTACK_STRATEGY=strategy)
        self.proc = subprocess.Popen(_child_argv(args, strategy), stdin=subprocess.PIPE, stdout=subprocess.PIPE,
                                     text=True, env=env, bufsize=1)
        self.samples, self.outputs = [], []
        self.params = None
        self.status = None
        self.message = ""
        head = self._line()
        if head.startswith("READY"):
            kv = head.split(" ", 1)[1] if " " in head else ""
            self.params = {k: int(v) for k, v in (p.split("=", 1) for p in kv.split(";") if p)}
        elif head.startswith("SKIP"):
            self.status, self.message = EXIT_SKIP, head[5:]
        else:
            self._died(head)

    def _line(self):
        return self.proc.stdout.readline().rstrip("\n")

    def _died(self, line):
        self.status = EXIT_FAIL
        rc = self.proc.wait()
        self.message = line[5:] if line.startswith("FAIL") else f"child exited with status {rc}"

    @property
    def active(self):
        return self.status is None

    def sample(self, keep: bool):
        try:
            self.proc.stdin.write("S\n")
            self.proc.stdin.flush()
        except BrokenPipeError:
            pass
        line = self._line()
        if not line.startswith("OK "):
            self._died(line)
            return
        _, ns, *rest = line.split(" ", 2)
        if keep:
            self.samples.append(int(ns))
            self.outputs.append(rest[0] if rest and rest[0] else None)

    def close(self):
        if self.proc.poll() is None:
            try:
                self.proc.stdin.write("Q\n")
                self.proc.stdin.close()
            except (BrokenPipeError, OSError):
                pass
            self.proc.wait()


def run_interleaved(args, strategies):
    """One fresh child per strategy; samples are taken round-robin so that
    slow drifts in machine speed land on every strategy alike."""
    repeats, warmup = _defaults(args.benchmark, args.repeats, args.warmup)
    children = [_Child(args, s) for s in strategies]
    try:
        for i in range(warmup + repeats):
            for c in children:
                if c.active:
                    c.sample(keep=i >= warmup)
    finally:
        for c in children:
            c.close()
    records, codes = [], []
    for c in children:
        if c.status == EXIT_SKIP:
            print(f"effstack-bench: skip {args.benchmark}/{c.strategy}: {c.message}", file=sys.stderr)
            codes.append(EXIT_SKIP)
            continue
        if c.status == EXIT_FAIL:
            print(f"effstack-bench: FAIL {args.benchmark}/{c.strategy}: {c.message}", file=sys.stderr)
            codes.append(EXIT_FAIL)
            continue
        try:
            records.append(_record(args.benchmark, c.strategy, c.params, c.samples, c.outputs))
            codes.append(EXIT_OK)
        except OracleMismatch as e:
            print(f"effstack-bench: FAIL {args.benchmark}/{c.strategy}: {e}", file=sys.stderr)
            codes.append(EXIT_FAIL)
    return records, codes


def format_records(records, fmt: str) -> str:
    buf = io.StringIO()
    if fmt == "csv":
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r in records:
            w.writerow(r.row())
        return buf.getvalue()
    rows = [CSV_HEADER] + [tuple(map(str, r.row())) for r in records]
    widths = [max(len(row[i]) for row in rows) for i in range(len(CSV_HEADER))]
    for j, row in enumerate(rows):
        buf.write("  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip() + "\n")
        if j == 0:
            buf.write("  ".join("-" * w for w in widths) + "\n")
    return buf.getvalue()


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="effstack-bench", description="Benchmark the stack strategies.")
    ap.add_argument("benchmark", choices=BENCHMARKS)
    ap.add_argument("--strategy", default=None,
                    help="one of %s, or 'all' (default: $EFFSTACK_STRATEGY, else all)" % ", ".join(STRATEGIES))
    ap.add_argument("--iters", type=int, default=None, help="iterations (complex 10000, mt 10000, ad 100)")
    ap.add_argument("--threads", type=int, default=4)
    ap.add_argument("--depth", type=int, default=100)
    ap.add_argument("--frame-size", type=int, default=None)
    ap.add_argument("--repeats", type=int, default=None, help=f"timed samples (default {DEFAULT_REPEATS}, mt {MT_REPEATS})")
    ap.add_argument("--warmup", type=int, default=None, help=f"discarded samples (default {DEFAULT_WARMUP}, mt 0)")
    ap.add_argument("--runs-per-thread", type=int, default=1000, help=argparse.SUPPRESS)
    ap.add_argument("--format", choices=("csv", "table"), default="csv")
    ap.add_argument("--no-isolate", action="store_true", help="measure every strategy in this process")
    ap.add_argument("--debug", action="store_true", help="keep debug fills and checks on while timing")
    ap.add_argument("--serve", action="store_true", help=argparse.SUPPRESS)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    if args.repeats is not None and args.repeats < MIN_REPEATS:
        ap.error(f"--repeats must be at least {MIN_REPEATS}")
    for flag in ("iters", "threads", "depth", "frame_size", "warmup"):
        v = getattr(args, flag)
        if v is not None and v < (1 if flag == "threads" else 0):
            ap.error(f"--{flag.replace('_', '-')} out of range")
    choice = args.strategy or os.environ.get("EFFSTACK_STRATEGY") or "all"
    if choice == "all":
        strategies = list(STRATEGIES)
    else:
        try:
            strategies = [check_strategy(choice)]
        except ValueError as e:
            ap.error(str(e))

    if not args.debug:
        impl.set_debug(False)
    if args.serve:
        args.strategy = strategies[0]
        return _serve(args)

    if len(strategies) > 1 and not args.no_isolate:
        records, codes = run_interleaved(args, strategies)
    else:
        records, codes = [], []
        for s in strategies:
            try:
                records.append(run_benchmark(args.benchmark, s, iters=args.iters, threads=args.threads,
                                             depth=args.depth, frame_size=args.frame_size, repeats=args.repeats,
                                             warmup=args.warmup, runs_per_thread=args.runs_per_thread))
                codes.append(EXIT_OK)
            except BenchSkip as e:
                print(f"effstack-bench: skip {args.benchmark}/{s}: {e}", file=sys.stderr)
                codes.append(EXIT_SKIP)
            except OracleMismatch as e:
                print(f"effstack-bench: FAIL {args.benchmark}/{s}: {e}", file=sys.stderr)
                codes.append(EXIT_FAIL)
    sys.stdout.write(format_records(records, args.format))
    sys.stdout.flush()
    if EXIT_FAIL in codes or any(c not in (EXIT_OK, EXIT_SKIP) for c in codes):
        return EXIT_FAIL
    if all(c == EXIT_SKIP for c in codes):
        return EXIT_SKIP
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
