"""Stack strategies and the frame-backed stack used by Python coroutines."""
from __future__ import annotations

import enum
import os
from contextlib import contextmanager
from dataclasses import dataclass

from ._backend import impl

STRATEGIES = ("fixed", "segmented", "overcommit-kernel", "overcommit-user")

PAGE_SIZE = impl.PAGE_SIZE
MIN_FRAME_SIZE = impl.MIN_FRAME_SIZE
SEG_MARGIN = impl.SEG_MARGIN
SYSCALL_SEGMENT_SIZE = impl.SYSCALL_SEGMENT_SIZE
SEGMENT_CANARY = impl.SEGMENT_CANARY
SEGMENT_HEADER_SIZE = impl.SEGMENT_HEADER_SIZE
REQUEST_SIZE = impl.REQUEST_SIZE
DEBUG_FILL = 0x13


class StackOverflowError(RuntimeError):
    """A reservation would run past the end of a coroutine's frame."""


class FaultAction(enum.IntEnum):
    COMMIT = impl.FAULT_COMMIT
    ALREADY_COMMITTED = impl.FAULT_ALREADY_COMMITTED
    OVERFLOW = impl.FAULT_OVERFLOW
    FOREIGN = impl.FAULT_FOREIGN


class Kind(enum.IntEnum):
    FIXED = 0
    SEGMENTED = 1
    OVERCOMMIT_KERNEL = 2
    OVERCOMMIT_USER = 3


def check_strategy(name: str) -> str:
    if name not in STRATEGIES:
        raise ValueError(f"unknown stack strategy {name!r} (expected one of {', '.join(STRATEGIES)})")
    return name


_default = None


def default_strategy() -> str:
    """Process default, taken from EFFSTACK_STRATEGY (fixed if unset)."""
    global _default
    if _default is None:
        _default = check_strategy(os.environ.get("EFFSTACK_STRATEGY", "fixed").strip() or "fixed")
    return _default


def set_default_strategy(name: str) -> None:
    global _default
    _default = check_strategy(name)


def default_frame_size(strategy: str | None = None) -> int:
    return impl.default_frame_size(check_strategy(strategy or default_strategy()))


def new_frame(strategy: str | None = None, size: int | None = None):
    """Allocate a raw frame from the active backend."""
    strategy = check_strategy(strategy or default_strategy())
    if size is None:
        size = impl.default_frame_size(strategy)
    return impl.NativeFrame(strategy, size)


def init_segment(frame_size: int) -> dict:
    return impl.init_segment(frame_size)


def fault_decide(kind, base, total, allowed, guard, committed, addr):
    """The commit decision made by the user-overcommit fault handler.

    Returns (FaultAction, commit_start, commit_len).
    """
    action, start, n = impl.fault_decide(int(kind), base, total, allowed, guard, committed, addr)
    return FaultAction(action), start, n


def registry_lookup(addr: int):
    return impl.registry_lookup(addr)


def registry_count() -> int:
    return impl.registry_count()


def handler_installed() -> bool:
    return impl.handler_installed()


@dataclass
class _Split:
    sp: int          # stack pointer to restore in the old segment
    size: int
    grew: bool


class ShadowStack:
    """A downward-growing stack pointer over one strategy frame.

    Python code cannot run on the frame itself, so coroutines reserve frame
    space explicitly: every reservation writes real bytes at the new stack
    pointer, which is what drives page faults, segment growth and overflow
    detection for the strategy underneath.
    """

    def __init__(self, strategy: str | None = None, size: int | None = None):
        self.frame = new_frame(strategy, size)
        self.strategy = self.frame.strategy
        self.kind = Kind(self.frame.kind)
        self.sp = self.frame.initial_sp
        self.used = 0
        self.max_used = 0
        self._splits: list[_Split] = []

    def _low(self) -> int:
        if self.kind == Kind.SEGMENTED:
            return self.frame.segment_low()
        return self.frame.base + self.frame.guard_size

    def available(self) -> int:
        return self.sp - self._low()

    def reserve(self, n: int, fill: bytes | None = None) -> int:
        """Move sp down by n (rounded to 16) and write the new space. Returns the new sp."""
        n = (n + 15) & ~15
        grew = False
        old = self.sp
        if self.kind == Kind.SEGMENTED:
            if self.available() < n + SEG_MARGIN:
                self.sp, _ = self.frame.grow(n + SEG_MARGIN)
                grew = True
        elif self.available() < n:
            raise StackOverflowError(
                f"stack overflow: need {n} bytes, {self.available()} left in {self.strategy} frame")
        self._splits.append(_Split(old, n, grew))
        self.sp -= n
        if n:
            self.frame.write(self.sp, fill if fill is not None and len(fill) == n else bytes(n))
        self.used += n
        self.max_used = max(self.max_used, self.used)
        return self.sp

    def release(self) -> None:
        """Undo the most recent reserve."""
        split = self._splits.pop()
        if split.grew and not self.frame.released:
            self.frame.shrink()
        self.sp = split.sp
        self.used -= split.size

    @contextmanager
    def reserved(self, n: int):
        addr = self.reserve(n)
        try:
            yield addr
        finally:
            self.release()

    def push_record(self, effect: int, token: int) -> int:
        rec = (effect & 0xFFFFFFFFFFFFFFFF).to_bytes(8, "little") + (token & 0xFFFFFFFFFFFFFFFF).to_bytes(8, "little")
        return self.reserve(REQUEST_SIZE, rec)

    def read_record(self, addr: int) -> tuple[int, int]:
        raw = self.frame.read(addr, REQUEST_SIZE)
        return int.from_bytes(raw[:8], "little"), int.from_bytes(raw[8:], "little")

    def committed_bytes(self) -> int:
        return self.frame.committed_bytes()

    def close(self) -> None:
        if not self.frame.released:
            self.frame.release()
