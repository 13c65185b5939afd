"""Reverse-mode automatic differentiation from two layers of effect handlers.

The forward layer (ids 0-2) does arithmetic; the reverse layer (ids 3-5)
records operations and ``handle`` replays them backwards. Each handled
reverse operation allocates its adjoint on the handler's own frame, so the
recursion depth of ``handle`` is the stack pressure this demo exerts.
"""
from __future__ import annotations

import argparse
import enum
import struct
import sys
from dataclasses import dataclass, field
from typing import NamedTuple

from . import effects as fx
from .effects import Coroutine, CoroutineState, EffectRegistry, effect_set, perform
from .stacks import check_strategy, default_frame_size, default_strategy

effects = EffectRegistry()
e_ap0 = effects.define("e_ap0", 0, ("value",))
e_ap1 = effects.define("e_ap1", 1, ("op", "arg1"))
e_ap2 = effects.define("e_ap2", 2, ("op", "arg1", "arg2"))
r_ap0 = effects.define("r_ap0", 3, ("value",))
r_ap1 = effects.define("r_ap1", 4, ("op", "arg1"))
r_ap2 = effects.define("r_ap2", 5, ("op", "arg1", "arg2"))

E_SMOOTH = effect_set(e_ap0, e_ap1, e_ap2)
R_SMOOTH = effect_set(r_ap0, r_ap1, r_ap2)

# per handled operation: adjoint, payload copy, result value and spills
ADJOINT_FRAME = 256


class Op1(enum.IntEnum):
    NEGATE = 0


class Op2(enum.IntEnum):
    ADD = 0
    MULTIPLY = 1


class Cell:
    """A double stored in a coroutine frame."""

    __slots__ = ("stack", "addr")
    _fmt = struct.Struct("<d")

    def __init__(self, stack, addr, value=0.0):
        self.stack = stack
        self.addr = addr
        self.set(value)

    def get(self) -> float:
        return self._fmt.unpack(self.stack.frame.read(self.addr, 8))[0]

    def set(self, v: float) -> None:
        self.stack.frame.write(self.addr, self._fmt.pack(v))


class Prop(NamedTuple):
    v: float
    dv: Cell


def e_c(x):
    return perform(e_ap0, x)


def e_n(x):
    return perform(e_ap1, Op1.NEGATE, x)


def e_a(x, y):
    return perform(e_ap2, Op2.ADD, x, y)


def e_m(x, y):
    return perform(e_ap2, Op2.MULTIPLY, x, y)


def r_c(x) -> Prop:
    return perform(r_ap0, x)


def r_n(x: Prop) -> Prop:
    return perform(r_ap1, Op1.NEGATE, x)


def r_a(x: Prop, y: Prop) -> Prop:
    return perform(r_ap2, Op2.ADD, x, y)


def r_m(x: Prop, y: Prop) -> Prop:
    return perform(r_ap2, Op2.MULTIPLY, x, y)


@dataclass
class ADRun:
    """State shared by one run; owned by the driver, not the module."""
    iters: int
    x0: float
    strategy: str
    frame_size: int
    x: Prop | None = None
    result: Prop | None = None
    derivative: float = 0.0
    forward: int = 0
    reverse: int = 0
    depth: int = 0
    max_depth: int = 0
    dx_cell: Cell | None = field(default=None, repr=False)


def _example(run: ADRun):
    run.x = Prop(run.x0, run.dx_cell)
    acc = r_c(1.0)
    prev = r_c(1.0)
    for _ in range(run.iters):
        prev = r_m(prev, r_n(r_a(run.x, r_c(-1.0))))
        acc = r_a(acc, prev)
    run.result = acc


def _fresh(v) -> Prop:
    """A value with a zero adjoint allocated on the current frame."""
    stack = fx.current_coroutine().stack
    return Prop(v, Cell(stack, stack.sp))


def handle(run: ADRun, k: Coroutine, response: Prop | None) -> None:
    run.depth += 1
    run.max_depth = max(run.max_depth, run.depth)
    request = k.resume(response, R_SMOOTH)
    if k.state == CoroutineState.FINISHED:
        run.result.dv.set(1.0)
        run.depth -= 1
        return
    run.reverse += 1
    p = request.payload
    if request.is_(r_ap0):
        r = _fresh(e_c(p.value))
        fx.stack_call(ADJOINT_FRAME, handle, run, k, r)
    elif request.is_(r_ap1):
        v = e_n(p.arg1.v)
        r = _fresh(v)
        fx.stack_call(ADJOINT_FRAME, handle, run, k, r)
        dx = p.arg1.dv
        dx.set(e_a(dx.get(), e_n(r.dv.get())))
    elif request.is_(r_ap2):
        x, y = p.arg1, p.arg2
        v = e_a(x.v, y.v) if p.op == Op2.ADD else e_m(x.v, y.v)
        r = _fresh(v)
        fx.stack_call(ADJOINT_FRAME, handle, run, k, r)
        dv = r.dv.get()
        if p.op == Op2.ADD:
            x.dv.set(e_a(x.dv.get(), dv))
            y.dv.set(e_a(y.dv.get(), dv))
        else:
            x.dv.set(e_a(x.dv.get(), e_m(y.v, dv)))
            y.dv.set(e_a(y.dv.get(), e_m(x.v, dv)))
    else:
        raise fx.EffectError(f"unexpected request {request!r}")
    run.depth -= 1


def _handle_framed(run, k, response):
    # _fresh() writes at sp, so every handle level starts with its own frame.
    return fx.stack_call(ADJOINT_FRAME, handle, run, k, response)


def _reverse(run: ADRun):
    me = fx.current_coroutine()
    with me.stack.reserved(16) as addr:
        run.dx_cell = Cell(me.stack, addr)
        k = Coroutine(lambda _: _example(run), None, strategy=run.strategy, frame_size=run.frame_size)
        try:
            _handle_framed(run, k, None)
            run.derivative = run.x.dv.get()
        finally:
            k.delete()


def evaluate(k: Coroutine, run: ADRun | None = None) -> None:
    """Drive k, answering the forward effects numerically, until it returns."""
    request = k.resume(None, E_SMOOTH)
    while not request.is_return:
        p = request.payload
        if request.is_(e_ap0):
            value = p.value
        elif request.is_(e_ap1):
            value = -p.arg1
        elif request.is_(e_ap2):
            value = p.arg1 + p.arg2 if p.op == Op2.ADD else p.arg1 * p.arg2
        else:
            raise fx.EffectError(f"unexpected request {request!r}")
        if run is not None:
            run.forward += 1
        request = k.resume(value, E_SMOOTH)


def run_ad(iters: int = 100, x0: float = 0.5, strategy: str | None = None, frame_size: int | None = None) -> ADRun:
    """Run the demo on Python coroutines and return the finished run record."""
    strategy = check_strategy(strategy or default_strategy())
    if frame_size is None:
        frame_size = default_frame_size(strategy)
    run = ADRun(iters, x0, strategy, frame_size)
    need = 20 * iters + 1000
    old = sys.getrecursionlimit()
    if old < need:
        sys.setrecursionlimit(need)
    try:
        k = Coroutine(_reverse, run, strategy=strategy, frame_size=frame_size)
        try:
            evaluate(k, run)
        finally:
            k.delete()
    finally:
        sys.setrecursionlimit(old)
    return run


def value_of(iters: int, x0: float) -> float:
    """Closed form of the accumulated value, 1 + sum (1 - x)^i."""
    return 1.0 + sum((1.0 - x0) ** i for i in range(1, iters + 1))


def derivative_of(iters: int, x0: float) -> float:
    """Closed form of d/dx, -sum i (1 - x)^(i-1)."""
    return -sum(i * (1.0 - x0) ** (i - 1) for i in range(1, iters + 1))


def native_ad(iters: int = 100, x0: float = 0.5, strategy: str | None = None, frame_size: int | None = None):
    """Run the compiled version; returns its result dict or None without the core."""
    from ._backend import native_module

    mod = native_module()
    if mod is None:
        return None
    strategy = check_strategy(strategy or default_strategy())
    if frame_size is None:
        frame_size = mod.default_frame_size(strategy)
    return mod.kernel_ad(strategy, frame_size, iters, x0)


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="effstack-ad", description="Differentiate 1 + sum (1-x)^i with effect handlers.")
    ap.add_argument("--iters", type=int, default=100)
    ap.add_argument("--x", type=float, default=0.5)
    ap.add_argument("--strategy", default=None, help="stack strategy (default: $EFFSTACK_STRATEGY or fixed)")
    ap.add_argument("--frame-size", type=int, default=None)
    ap.add_argument("--python", action="store_true", help="use Python coroutines even if the compiled core is present")
    args = ap.parse_args(argv)
    if args.iters < 0:
        ap.error("--iters must be >= 0")
    try:
        strategy = check_strategy(args.strategy or default_strategy())
    except ValueError as e:
        ap.error(str(e))
    res = None if args.python else native_ad(args.iters, args.x, strategy, args.frame_size)
    d = res["derivative"] if res is not None else run_ad(args.iters, args.x, strategy, args.frame_size).derivative
    print(f"{d:.6f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
