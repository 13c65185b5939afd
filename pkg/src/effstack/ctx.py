"""Context switching.

Two layers live here. ``ResumeContext``/``context_switch`` are the
Python-level primitive that the effects runtime is built on (a greenlet per
context). The ``probe_*`` functions drive the assembly switch in the compiled
core and are what the register-preservation checks run against.
"""
from __future__ import annotations

from typing import Any, Callable

import greenlet

from ._backend import NATIVE, impl, native_module

MACHINE_WORD = (1 << 64) - 1


class ContextError(RuntimeError):
    pass


class ResumeContext:
    """A resumable point of execution; live while it holds saved state."""

    __slots__ = ("_g", "live", "initial_sp")

    def __init__(self, g=None, initial_sp=None):
        self._g = g
        self.live = g is not None
        self.initial_sp = initial_sp


def _check_debug():
    return impl.debug_enabled()


def context_bootstrap(entry: Callable[[Any], Any], argument: Any, initial_sp: int | None = None,
                      on_return: Callable[[Any], Any] | None = None) -> ResumeContext:
    """A context that starts entry(argument) when first switched to.

    If entry returns, on_return(value) runs in its place; it must switch
    away. The default treats a plain return as a protocol error.
    """
    if initial_sp is not None and initial_sp % 16 and _check_debug():
        raise ContextError(f"initial stack pointer {initial_sp:#x} is not 16-byte aligned")

    def trampoline(_payload):
        value = entry(argument)
        if on_return is None:
            raise ContextError("context entry returned without an exit")
        on_return(value)
        raise ContextError("exit hook returned")

    return ResumeContext(greenlet.greenlet(trampoline), initial_sp)


def context_switch(save_into: ResumeContext, restore_from: ResumeContext, payload: Any = 0) -> Any:
    """Save the current context into save_into and continue restore_from.

    Returns the payload of whichever switch later restores save_into.
    """
    if not restore_from.live:
        raise ContextError("switch to a stale context")
    target = restore_from._g
    restore_from.live = False
    save_into._g = greenlet.getcurrent()
    save_into.live = True
    return target.switch(payload)


# compiled-core probes ------------------------------------------------------

def _native():
    mod = native_module()
    if mod is None:
        raise ContextError("the compiled core is not available")
    return mod


def probe_salt(roundtrips: int) -> dict:
    """Round-trip the assembly switch with salted callee-saved registers."""
    return _native().probe_salt(roundtrips)


def probe_bootstrap(arg: int):
    """(rc, seen_arg, local_addr, frame_base, frame_top) for a fresh native context."""
    return _native().probe_bootstrap(arg)


def probe_bootstrap_misaligned() -> int:
    return _native().probe_bootstrap_misaligned()


def probe_double_switch() -> int:
    return _native().probe_double_switch()


def probe_pingpong(first: int, second: int):
    return _native().probe_pingpong(first & MACHINE_WORD, second & MACHINE_WORD)


def native_available() -> bool:
    return NATIVE
