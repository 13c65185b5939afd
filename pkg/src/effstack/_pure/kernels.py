"""The benchmark workloads written against the Python coroutine runtime.

Signatures and return shapes match the compiled kernels, so the harness can
call either.
"""
from __future__ import annotations

import threading
import time

from .. import effects as fx
from ..effects import Coroutine, EffectRegistry, define_effect, effect_set, perform

# each workload is its own program, so each gets its own id table
complex_yield = define_effect("complex_yield", 0, in_registry=EffectRegistry())
fill_stack = define_effect("fill_stack", 0, in_registry=EffectRegistry())
async_op = define_effect("async_op", 0, ("x",), in_registry=EffectRegistry())
read_file = define_effect("read_file", 0, ("filename",), reply=bytes, in_registry=EffectRegistry())

FILL_BUFFER = 1024
ASYNC_MIX = 0xABCDEF


def kernel_switch(strategy: str, frame_size: int):
    def body(_):
        fx.yield_(0)

    k = Coroutine(body, None, strategy=strategy, frame_size=frame_size)
    t0 = time.monotonic_ns()
    a = k.resume_handling_all()
    b = k.resume_handling_all()
    t1 = time.monotonic_ns()
    if a.effect != fx.YIELD or not b.is_return:
        raise fx.EffectError("switch kernel: unexpected requests")
    aux = k.committed_bytes()
    k.delete()
    return t1 - t0, 0, aux


_sync = threading.Lock()
_complex_global = 0


def _extra_work():
    global _complex_global
    s = 0
    for i in range(100):
        s += i
    _complex_global += s


def kernel_complex(strategy: str, frame_size: int, iterations: int):
    def body(n):
        for i in range(n):
            _cal = i * 2  # noqa: F841  mirrors the per-iteration work
            perform(complex_yield)
        return n

    handled = effect_set(complex_yield)
    k = Coroutine(body, iterations, strategy=strategy, frame_size=frame_size)
    before = _complex_global
    t0 = time.monotonic_ns()
    req = k.resume(None, handled)
    while not req.is_return:
        with _sync:
            _extra_work()
        req = k.resume(None, handled)
    t1 = time.monotonic_ns()
    out = req.payload
    aux = _complex_global - before
    k.delete()
    return t1 - t0, out, aux


def _fill_stack_rec(depth: int, max_depth: int):
    stack = fx.current_coroutine().stack
    stack.frame.write(stack.sp, bytes(FILL_BUFFER))
    if depth < max_depth:
        fx.stack_call(FILL_BUFFER + 128, _fill_stack_rec, depth + 1, max_depth)
    else:
        perform(fill_stack)


def kernel_expand(strategy: str, frame_size: int, depth: int):
    def body(max_depth):
        fx.stack_call(FILL_BUFFER + 128, _fill_stack_rec, 0, max_depth)

    k = Coroutine(body, depth, strategy=strategy, frame_size=frame_size)
    t0 = time.monotonic_ns()
    req = k.resume_handling_all()
    t1 = time.monotonic_ns()
    if not req.is_(fill_stack):
        raise fx.EffectError("expand kernel: expected fill_stack")
    aux = k.committed_bytes()
    k.delete()
    return t1 - t0, depth, aux


def concurrent_operation(x: int, y: int) -> int:
    return (x + y) ^ ASYNC_MIX


def run_async(strategy: str, frame_size: int, iterations: int, thread_id: int) -> int:
    def loop(n):
        for i in range(n, 0, -1):
            perform(async_op, i)
        return thread_id

    handled = effect_set(async_op)
    k = Coroutine(loop, iterations, strategy=strategy, frame_size=frame_size)
    xs = []
    req = k.resume(None, handled)
    while not req.is_return:
        xs.append(req.payload.x)
        req = k.resume(None, handled)
    # the handler nests one level per request; fold innermost first
    result = req.payload
    for x in reversed(xs):
        result = concurrent_operation(x, result)
    k.delete()
    return result


def kernel_mt(strategy: str, frame_size: int, threads: int, iterations: int, runs_per_thread: int = 1000):
    results = [0] * threads
    errors = []

    def work(i):
        try:
            local = 0
            for _ in range(runs_per_thread):
                local += run_async(strategy, frame_size, iterations, i + 1)
            results[i] = local
        except BaseException as e:  # reported after join
            errors.append(e)

    t0 = time.monotonic_ns()
    ts = [threading.Thread(target=work, args=(i,)) for i in range(threads)]
    for t in ts:
        t.start()
    for t in ts:
        t.join()
    t1 = time.monotonic_ns()
    if errors:
        raise errors[0]
    return t1 - t0, sum(results), 0


def kernel_ad(strategy: str, frame_size: int, iters: int, x0: float = 0.5):
    from ..ad_demo import run_ad

    t0 = time.monotonic_ns()
    run = run_ad(iters, x0, strategy, frame_size)
    t1 = time.monotonic_ns()
    return {"value": run.result.v, "derivative": run.derivative, "forward_effects": run.forward,
            "reverse_effects": run.reverse, "max_handle_depth": run.max_depth, "duration_ns": t1 - t0}


def demo_read_file(strategy: str, frame_size: int, reply: bytes):
    """The read_file tutorial: returns (filename the handler saw, text the body got)."""
    got = {}

    def body(_):
        got["text"] = perform(read_file, b"example.txt")

    k = Coroutine(body, None, strategy=strategy, frame_size=frame_size)
    req = k.resume(None, effect_set(read_file))
    if not req.is_(read_file):
        raise fx.EffectError("read_file: expected the read_file request")
    seen = req.payload.filename
    req = k.resume(reply, effect_set(read_file))
    if not req.is_return:
        raise fx.EffectError("read_file: expected return")
    k.delete()
    return seen, got["text"]
