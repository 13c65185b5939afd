"""Coroutines and effect-handling primitives.

A coroutine body runs on its own greenlet and owns a strategy frame (a
:class:`~effstack.stacks.ShadowStack`). ``perform`` writes the two-word request
record into that frame before control leaves the coroutine, and
:func:`stack_call` reserves frame space for code that wants its stack usage to
be visible to the strategy.
"""
from __future__ import annotations

import enum
import itertools
import threading
from collections import namedtuple
from typing import Any, Callable, NamedTuple

import greenlet

from .stacks import ShadowStack, default_frame_size, default_strategy, check_strategy

RETURN = 64
YIELD = 65
ALL = (1 << 64) - 1
MAX_EFFECT_ID = 63


def HANDLES(effect) -> int:
    """Capability bit for one effect id (or declaration)."""
    eid = effect.id if isinstance(effect, EffectDecl) else int(effect)
    if not 0 <= eid <= MAX_EFFECT_ID:
        raise ValueError(f"effect id {eid} outside 0..63")
    return 1 << eid


def effect_set(*effects) -> int:
    mask = 0
    for e in effects:
        mask |= HANDLES(e)
    return mask


class CoroutineState(enum.IntEnum):
    SUSPENDED = 0
    RUNNING = 1
    FINISHED = 2


class EffectError(RuntimeError):
    pass


class CoroutineStateError(EffectError):
    """A primitive was used on a coroutine in the wrong state."""


class UnhandledEffectError(EffectError):
    def __init__(self, effect: int, name: str, chain: list):
        self.effect = effect
        self.effect_name = name
        self.chain = chain
        trace = " <- ".join(repr(c) for c in chain) or "<root>"
        super().__init__(f"unhandled effect {name} (id {effect}); chain: {trace}")


class StalePayloadError(EffectError):
    """A request payload was read after its coroutine was resumed again."""


class DuplicateEffectError(EffectError):
    pass


class CoroutineKilled(greenlet.GreenletExit):
    """Raised inside a suspended coroutine body when it is deleted."""


# ---------------------------------------------------------------- effects

class EffectDecl(NamedTuple):
    id: int
    name: str
    fields: tuple
    reply: Any
    payload_type: type

    def __call__(self, *args, **kw):
        return perform(self, *args, **kw)


class EffectRegistry:
    """Id allocation table; each id is declared once."""

    def __init__(self):
        self._by_id: dict[int, EffectDecl] = {}
        self._lock = threading.Lock()

    def define(self, name: str, id: int, fields=(), reply=None) -> EffectDecl:
        if not 0 <= id <= MAX_EFFECT_ID:
            raise ValueError(f"effect id {id} outside 0..63")
        fields = tuple(fields)
        with self._lock:
            old = self._by_id.get(id)
            if old is not None:
                if (old.name, old.fields, old.reply) != (name, fields, reply):
                    raise DuplicateEffectError(f"effect id {id} already declared as {old.name}")
                return old
            payload = namedtuple(f"{name}_payload", fields) if fields else _empty_payload
            decl = self._by_id[id] = EffectDecl(id, name, fields, reply, payload)
        return decl

    def name_of(self, id: int) -> str:
        if id == RETURN:
            return "return"
        if id == YIELD:
            return "yield"
        d = self._by_id.get(id)
        return d.name if d else f"effect#{id}"

    def __contains__(self, id):
        return id in self._by_id

    def __getitem__(self, id) -> EffectDecl:
        return self._by_id[id]


_empty_payload = namedtuple("empty_payload", ())
registry = EffectRegistry()


def define_effect(name: str, id: int, fields=(), reply=None, *, in_registry: EffectRegistry | None = None) -> EffectDecl:
    return (in_registry or registry).define(name, id, fields, reply)


# ---------------------------------------------------------------- request

class Request:
    """What a resume hands back: an effect tag and one payload word."""

    __slots__ = ("effect", "_payload", "_owner", "_epoch", "record", "_name")

    def __init__(self, effect: int, payload, owner=None, epoch=0, record=None, name=None):
        self.effect = effect
        self._name = name
        self._payload = payload
        self._owner = owner
        self._epoch = epoch
        self.record = record

    @property
    def payload(self):
        if self.effect != RETURN and self._owner is not None and self._owner._epoch != self._epoch:
            raise StalePayloadError(f"payload of {self.name} read after the coroutine was resumed again")
        return self._payload

    @property
    def name(self) -> str:
        return self._name or registry.name_of(self.effect)

    @property
    def is_return(self) -> bool:
        return self.effect == RETURN

    def is_(self, decl) -> bool:
        return self.effect == (decl.id if isinstance(decl, EffectDecl) else decl)

    def __repr__(self):
        return f"Request({self.name}, {self._payload!r})"


class _Raised:
    __slots__ = ("exc",)

    def __init__(self, exc):
        self.exc = exc


# -------------------------------------------------------------- coroutine

_tls = threading.local()
_ids = itertools.count(1)


def current_coroutine() -> "Coroutine | None":
    return getattr(_tls, "current", None)


def _main_greenlet():
    g = greenlet.getcurrent()
    while g.parent is not None:
        g = g.parent
    return g


class Coroutine:
    """A one-shot stackful coroutine bound to the creating thread."""

    def __init__(self, fn: Callable[[Any], Any], arg: Any = None, *, strategy: str | None = None,
                 frame_size: int | None = None):
        strategy = check_strategy(strategy or default_strategy())
        if frame_size is None:
            frame_size = default_frame_size(strategy)
        self.stack = ShadowStack(strategy, frame_size)
        self.id = next(_ids)
        self.strategy = strategy
        self.frame_size = frame_size
        self.fn = fn
        self.arg = arg
        self.state = CoroutineState.SUSPENDED
        self.parent: Coroutine | None = None
        self.handled = 0
        self.result = None
        self._thread = threading.get_ident()
        self._glet = greenlet.greenlet(self._run, parent=_main_greenlet())
        self._resumer = None
        self._leaf: Coroutine | None = None
        self._epoch = 0
        self._deleted = False

    def __repr__(self):
        return f"<Coroutine #{self.id} {self.state.name} {self.strategy}>"

    # body ---------------------------------------------------------------

    def _run(self, reply):
        try:
            out = self.fn(self.arg)
            req = Request(RETURN, out, self)
        except _Exit as e:
            req = Request(RETURN, e.value, self)
        except CoroutineKilled:
            self.state = CoroutineState.FINISHED
            return None
        except BaseException as e:  # surfaces from the matching resume
            self.state = CoroutineState.FINISHED
            greenlet.getcurrent().parent = self._resumer
            return _Raised(e)
        self.state = CoroutineState.FINISHED
        self.result = req._payload
        greenlet.getcurrent().parent = self._resumer
        return req

    # primitives ---------------------------------------------------------

    def _check_thread(self):
        if self._thread != threading.get_ident():
            raise CoroutineStateError(f"{self!r} belongs to another thread")

    def resume(self, reply: Any = None, handled: int = 0) -> Request:
        """Run until the coroutine performs, yields, exits or returns."""
        if self._deleted:
            raise CoroutineStateError(f"{self!r} was deleted")
        if self.state != CoroutineState.SUSPENDED:
            raise CoroutineStateError(f"cannot resume {self!r}")
        self._check_thread()
        caller = current_coroutine()
        self.parent = caller
        self.handled = handled
        self._resumer = greenlet.getcurrent()
        leaf = self._leaf or self
        self._leaf = None
        c = leaf
        while True:
            c._epoch += 1
            c.state = CoroutineState.RUNNING
            if c is self:
                break
            c = c.parent
        _tls.current = leaf
        try:
            out = leaf._glet.switch(reply)
        finally:
            _tls.current = caller
        if isinstance(out, _Raised):
            raise out.exc
        return out

    def resume_handling_all(self, reply: Any = None) -> Request:
        return self.resume(reply, ALL)

    def committed_bytes(self) -> int:
        return self.stack.committed_bytes()

    def delete(self) -> None:
        """Release the frame; a suspended body is unwound with CoroutineKilled."""
        if self._deleted:
            raise CoroutineStateError(f"{self!r} deleted twice")
        if self.state == CoroutineState.RUNNING:
            raise CoroutineStateError(f"cannot delete running {self!r}")
        self._check_thread()
        self._deleted = True
        g = self._glet
        if g and not g.dead:
            g.parent = greenlet.getcurrent()
            saved = current_coroutine()
            try:
                g.throw(CoroutineKilled)
            finally:
                _tls.current = saved
        self.state = CoroutineState.FINISHED
        self.stack.close()

    @property
    def deleted(self) -> bool:
        return self._deleted

    def __del__(self):
        try:
            if not self._deleted and self.state != CoroutineState.RUNNING:
                self.stack.close()
        except Exception:
            pass


class _Exit(BaseException):
    def __init__(self, value):
        self.value = value


def _chain_to(target: Coroutine) -> list[Coroutine]:
    cur = current_coroutine()
    if cur is None:
        raise CoroutineStateError("not inside a coroutine")
    chain = []
    c = cur
    while c is not None:
        chain.append(c)
        if c is target:
            return chain
        c = c.parent
    raise CoroutineStateError(f"{target!r} is not on the current coroutine chain")


def _transfer(target: Coroutine, effect: int, payload, finish: bool, name=None):
    chain = _chain_to(target)
    cur = chain[0]
    record = cur.stack.push_record(effect, id(payload) if effect != RETURN else 0)
    state = CoroutineState.FINISHED if finish else CoroutineState.SUSPENDED
    for c in chain:
        c.state = state
    try:
        req = Request(effect, payload, cur, cur._epoch, record, name)
        if not finish:
            target._leaf = cur
        return target._resumer.switch(req)
    finally:
        cur.stack.release()


def yield_to(target: Coroutine, payload: Any = None, effect: int = YIELD) -> Any:
    """Suspend the chain up to target and hand control to target's resumer."""
    return _transfer(target, effect, payload, finish=False)


def yield_(payload: Any = None) -> Any:
    cur = current_coroutine()
    if cur is None:
        raise CoroutineStateError("yield outside a coroutine")
    return yield_to(cur, payload)


def exit_(payload: Any = None, target: Coroutine | None = None):
    """Finish the current coroutine (or the chain up to target)."""
    cur = current_coroutine()
    if cur is None:
        raise CoroutineStateError("exit outside a coroutine")
    if target is None or target is cur:
        raise _Exit(payload)
    _chain_to(target)
    _transfer(target, RETURN, payload, finish=True)


class _DefaultHandler:
    def __repr__(self):
        return "DEFAULT_HANDLER"


DEFAULT_HANDLER = _DefaultHandler()


def locate_handler(effect) -> "Coroutine | _DefaultHandler":
    bit = HANDLES(effect)
    c = current_coroutine()
    while c is not None:
        if c.handled & bit:
            return c
        c = c.parent
    return DEFAULT_HANDLER


def _raise_unhandled(effect: int, payload, name: str | None = None) -> Any:
    chain = []
    c = current_coroutine()
    while c is not None:
        chain.append(c)
        c = c.parent
    raise UnhandledEffectError(effect, name or registry.name_of(effect), chain)


_default_handler: Callable[..., Any] = _raise_unhandled


def set_default_handler(fn: Callable[..., Any] | None) -> Callable[..., Any]:
    """Install the fallback for effects nobody handles; returns the old one.

    The hook is called as fn(effect_id, payload, name) and its return value
    becomes the reply of the perform.
    """
    global _default_handler
    old = _default_handler
    _default_handler = fn or _raise_unhandled
    return old


def _payload_for(effect, args, kw):
    if isinstance(effect, EffectDecl):
        return effect.id, effect.payload_type(*args, **kw), effect.name
    if kw or len(args) > 1:
        raise TypeError("raw effect ids take at most one payload argument")
    return int(effect), (args[0] if args else None), None


def perform(effect, *args, **kw) -> Any:
    """Raise an effect to the nearest handler and return its reply."""
    eid, payload, name = _payload_for(effect, args, kw)
    target = locate_handler(eid)
    if target is DEFAULT_HANDLER:
        return _default_handler(eid, payload, name)
    return _transfer(target, eid, payload, False, name)


def throw(effect, *args, **kw):
    """Like perform, but the chain up to the handler finishes."""
    eid, payload, name = _payload_for(effect, args, kw)
    target = locate_handler(eid)
    if target is DEFAULT_HANDLER:
        _default_handler(eid, payload, name)
        raise CoroutineStateError("default handler returned from a throw")
    _transfer(target, eid, payload, True, name)


def stack_call(need: int, fn: Callable, *args, **kw):
    """Call fn with need bytes reserved on the current coroutine's frame."""
    cur = current_coroutine()
    if cur is None:
        return fn(*args, **kw)
    with cur.stack.reserved(need):
        return fn(*args, **kw)


# aliases in the C-style vocabulary

def coroutine_new(fn, arg=None, *, strategy=None) -> Coroutine:
    return Coroutine(fn, arg, strategy=strategy)


def coroutine_new_sized(fn, arg, frame_size: int, *, strategy=None) -> Coroutine:
    return Coroutine(fn, arg, strategy=strategy, frame_size=frame_size)


def coroutine_delete(k: Coroutine) -> None:
    k.delete()


def resume(k: Coroutine, reply=None, handled: int = 0) -> Request:
    return k.resume(reply, handled)


def resume_handling_all(k: Coroutine, reply=None) -> Request:
    return k.resume(reply, ALL)
