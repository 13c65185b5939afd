import threading

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from effstack import effects as fx
from effstack import kernels
from effstack.effects import (
    ALL, DEFAULT_HANDLER, RETURN, YIELD, Coroutine, CoroutineState, CoroutineStateError, EffectRegistry,
    UnhandledEffectError, effect_set, perform,
)
from effstack.stacks import default_frame_size

from conftest import native, needs_native, run_python

fx_ = EffectRegistry()
ask = fx_.define("ask", 1, ("question",))
tell = fx_.define("tell", 2, ("value",))
boom = fx_.define("boom", 3)
ASK = effect_set(ask)


def small(fn, arg=None, strategy="fixed"):
    return Coroutine(fn, arg, strategy=strategy, frame_size=16 * 1024)


# registry ------------------------------------------------------------------

def test_effect_ids_are_unique_per_registry():
    reg = EffectRegistry()
    a = reg.define("a", 5, ("x",))
    assert reg.define("a", 5, ("x",)) is a
    with pytest.raises(fx.DuplicateEffectError):
        reg.define("b", 5)
    EffectRegistry().define("b", 5)  # separate programs may reuse ids


def test_effect_id_range():
    with pytest.raises(ValueError):
        fx_.define("too_big", 64)
    with pytest.raises(ValueError):
        fx.HANDLES(64)
    assert fx.HANDLES(63) == 1 << 63
    assert effect_set(ask, tell) == 0b110


# basic protocol ----------------------------------------------------------

def test_perform_and_reply(strategy):
    def body(_):
        a = perform(ask, "first")
        b = ask("second")
        return a + b

    k = Coroutine(body, strategy=strategy)
    r = k.resume(None, ASK)
    assert r.is_(ask) and r.payload.question == "first" and r.name == "ask"
    r = k.resume(10, ASK)
    assert r.payload.question == "second"
    r = k.resume(5, ASK)
    assert r.is_return and r.payload == 15
    assert k.state == CoroutineState.FINISHED
    k.delete()


def test_read_file_tutorial(strategy):
    # the reply is a C string on the native side, so no embedded NUL
    text = "Hello from the handler, caf\u00e9 \u2713\n".encode()
    seen, got = kernels.demo_read_file(strategy, default_frame_size(strategy), text)
    assert seen == b"example.txt"
    assert got == text


@settings(max_examples=30, deadline=None)
@given(st.lists(st.tuples(st.integers(), st.binary(max_size=64)), max_size=30),
       st.sampled_from(["fixed", "segmented", "overcommit-user"]))
def test_reply_fidelity(pairs, strategy):
    got = []

    def body(_):
        for q, _ in pairs:
            got.append(perform(ask, q))
        return len(got)

    k = Coroutine(body, strategy=strategy)
    r = k.resume(None, ASK)
    questions = []
    for _, reply in pairs:
        questions.append(r.payload.question)
        r = k.resume(reply, ASK)
    assert r.is_return and r.payload == len(pairs)
    assert questions == [q for q, _ in pairs]
    assert got == [a for _, a in pairs]
    k.delete()


def test_stale_payload_rejected():
    k = small(lambda _: (perform(ask, "a"), perform(ask, "b")))
    first = k.resume(None, ASK)
    assert first.payload.question == "a"
    k.resume(None, ASK)
    with pytest.raises(fx.StalePayloadError):
        first.payload
    k.delete()


def test_return_payload_survives():
    k = small(lambda _: "done")
    r = k.resume()
    assert r.payload == "done" and k.result == "done"
    k.delete()


def test_exception_in_body_surfaces_from_resume():
    def body(_):
        raise KeyError("inside")

    k = small(body)
    with pytest.raises(KeyError):
        k.resume()
    assert k.state == CoroutineState.FINISHED
    k.delete()


# states --------------------------------------------------------------------

def test_state_machine():
    states = []

    def body(_):
        states.append(k.state)
        fx.yield_("y")
        states.append(k.state)

    k = small(body)
    assert k.state == CoroutineState.SUSPENDED
    r = k.resume()
    assert r.effect == YIELD and r.payload == "y"
    assert k.state == CoroutineState.SUSPENDED
    assert k.resume().is_return
    assert states == [CoroutineState.RUNNING, CoroutineState.RUNNING]
    assert k.state == CoroutineState.FINISHED
    with pytest.raises(CoroutineStateError):
        k.resume()
    k.delete()
    with pytest.raises(CoroutineStateError):
        k.delete()


def test_running_coroutine_cannot_be_resumed_or_deleted():
    errors = []

    def body(_):
        for op in (lambda: k.resume(), lambda: k.delete()):
            try:
                op()
            except CoroutineStateError as e:
                errors.append(e)

    k = small(body)
    k.resume()
    assert len(errors) == 2
    k.delete()


@settings(max_examples=40, deadline=None)
@given(st.lists(st.sampled_from(["yield", "perform"]), max_size=15), st.integers(min_value=0, max_value=15))
def test_state_transitions_follow_the_protocol(ops, kill_after):
    trace = []

    def body(_):
        for op in ops:
            trace.append(k.state)
            if op == "yield":
                fx.yield_()
            else:
                perform(ask, None)
        return "end"

    k = small(body)
    steps = 0
    r = k.resume(None, ASK)
    while not r.is_return:
        assert k.state == CoroutineState.SUSPENDED
        steps += 1
        if steps > kill_after:
            k.delete()
            assert k.state == CoroutineState.FINISHED and k.deleted
            return
        r = k.resume(None, ASK)
    assert k.state == CoroutineState.FINISHED
    assert trace == [CoroutineState.RUNNING] * len(ops)
    assert steps == len(ops)
    k.delete()


def test_delete_unwinds_suspended_body():
    cleaned = []

    def body(_):
        try:
            fx.yield_()
        finally:
            cleaned.append(True)

    k = small(body)
    k.resume()
    k.delete()
    assert cleaned == [True]


def test_coroutine_is_bound_to_its_thread():
    k = small(lambda _: fx.yield_())
    errors = []

    def other():
        try:
            k.resume()
        except CoroutineStateError as e:
            errors.append(e)

    t = threading.Thread(target=other)
    t.start()
    t.join()
    assert errors
    k.resume()
    k.delete()


# handler lookup -----------------------------------------------------------

def test_nearest_handler_wins():
    def inner(_):
        return perform(ask, "q")

    def outer(_):
        k = small(inner)
        r = k.resume(None, ASK)
        assert r.is_(ask)
        r = k.resume("inner-handled", ASK)
        return r.payload

    k = small(outer)
    r = k.resume(None, ASK)
    assert r.is_return and r.payload == "inner-handled"
    k.delete()


def test_unhandled_effect_skips_to_outer_handler():
    def inner(_):
        return perform(tell, 3) * 2

    def outer(_):
        k = small(inner)
        r = k.resume(None, ASK)  # tell is not handled here
        return r.payload

    k = small(outer)
    r = k.resume(None, effect_set(tell))
    assert r.is_(tell) and r.payload.value == 3
    r = k.resume(21, effect_set(tell))
    assert r.payload == 42
    k.delete()


def list_walk(masks, effect):
    """Index of the innermost level whose set contains effect, else None."""
    for i in range(len(masks) - 1, -1, -1):
        if masks[i] >> effect & 1:
            return i
    return None


def python_locate(masks, effect):
    levels = []
    out = {}

    def level(i):
        levels.append(fx.current_coroutine())
        if i + 1 < len(masks):
            k = small(level, i + 1)
            assert k.resume(None, masks[i + 1]).is_return
            k.delete()
            return
        found = fx.locate_handler(effect)
        out["found"] = None if found is DEFAULT_HANDLER else levels.index(found)

    k = small(level, 0)
    assert k.resume(None, masks[0]).is_return
    k.delete()
    return out["found"]


masks_st = st.lists(st.integers(min_value=0, max_value=(1 << 64) - 1) | st.integers(min_value=0, max_value=15),
                    min_size=1, max_size=8)


@settings(max_examples=200, deadline=None)
@given(masks_st, st.integers(min_value=0, max_value=63))
def test_locate_matches_list_walk(masks, effect):
    assert python_locate(masks, effect) == list_walk(masks, effect)


@needs_native
@settings(max_examples=500, deadline=None)
@given(masks_st, st.integers(min_value=0, max_value=63))
def test_native_locate_matches_list_walk(masks, effect):
    assert native.probe_locate(masks, effect) == list_walk(masks, effect)


def test_locate_outside_coroutine_is_default():
    assert fx.locate_handler(ask) is DEFAULT_HANDLER


# default handler, yield_to, exit, throw --------------------------------

def test_unhandled_effect_error_names_effect_and_chain():
    k = small(lambda _: perform(boom))
    with pytest.raises(UnhandledEffectError) as ei:
        k.resume(None, ASK)
    assert ei.value.effect == 3 and ei.value.effect_name == "boom"
    assert ei.value.chain == [k]
    k.delete()


def test_custom_default_handler():
    old = fx.set_default_handler(lambda eid, payload, name: f"{name}:{eid}")
    try:
        k = small(lambda _: perform(boom))
        assert k.resume().payload == "boom:3"
        k.delete()
    finally:
        fx.set_default_handler(old)


def test_yield_to_ancestor():
    def inner(_):
        return fx.yield_to(outer_k, "to-outer")

    def outer(_):
        k = small(inner)
        r = k.resume(None, 0)
        return ("inner returned", r.payload)

    outer_k = small(outer)
    r = outer_k.resume()
    assert r.effect == YIELD and r.payload == "to-outer"
    r = outer_k.resume("back")
    assert r.is_return and r.payload == ("inner returned", "back")
    outer_k.delete()


def test_exit_finishes_with_value():
    def body(_):
        fx.exit_("early")
        return "late"

    k = small(body)
    r = k.resume()
    assert r.is_return and r.payload == "early"
    k.delete()


def test_throw_finishes_chain_up_to_handler():
    def inner(_):
        fx.throw(tell, "abort")
        return "unreachable"

    def outer(_):
        k = small(inner)
        k.resume(None, 0)
        return "unreachable"

    k = small(outer)
    r = k.resume(None, effect_set(tell))
    assert r.is_(tell) and r.payload.value == "abort"
    assert k.state == CoroutineState.FINISHED
    k.delete()


def test_resume_handling_all_catches_everything():
    k = small(lambda _: perform(boom))
    r = fx.resume_handling_all(k)
    assert r.is_(boom)
    assert fx.resume(k, None, ALL).effect == RETURN
    fx.coroutine_delete(k)


@needs_native
def test_native_unhandled_effect_aborts_with_diagnostic():
    r = run_python("import effstack._native as n; n.probe_unhandled(7)")
    assert r.returncode == -6
    assert "unhandled effect" in r.stderr and "id 7" in r.stderr
    assert "#1 <root>" in r.stderr


def test_frames_are_released(strategy):
    k = Coroutine(lambda _: fx.yield_(), strategy=strategy)
    k.resume()
    frame = k.stack.frame
    k.delete()
    assert frame.released
