import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from effstack import ctx
from effstack._backend import impl

from conftest import native, needs_native

EFF_ERR_ALIGN = -5
EFF_ERR_STALE = -7
word = st.integers(min_value=0, max_value=(1 << 64) - 1)


def test_bootstrap_runs_entry_with_argument():
    seen = []
    host = ctx.ResumeContext()

    def entry(arg):
        seen.append(arg)
        ctx.context_switch(ctx.ResumeContext(), host, "done")

    k = ctx.context_bootstrap(entry, 41)
    assert ctx.context_switch(host, k) == "done"
    assert seen == [41]


def test_switch_to_stale_context_raises():
    host = ctx.ResumeContext()
    k = ctx.context_bootstrap(lambda a: ctx.context_switch(ctx.ResumeContext(), host, a), 7)
    assert ctx.context_switch(host, k) == 7
    with pytest.raises(ctx.ContextError):
        ctx.context_switch(host, k)


def test_entry_returning_without_exit_is_an_error():
    k = ctx.context_bootstrap(lambda a: a, 1)
    with pytest.raises(ctx.ContextError):
        ctx.context_switch(ctx.ResumeContext(), k)


def test_on_return_hook_receives_value():
    host = ctx.ResumeContext()
    k = ctx.context_bootstrap(lambda a: a * 2, 21, on_return=lambda v: ctx.context_switch(ctx.ResumeContext(), host, v))
    assert ctx.context_switch(host, k) == 42


def test_misaligned_initial_sp_rejected_in_debug():
    if not impl.debug_enabled():
        pytest.skip("alignment is only checked in debug mode")
    with pytest.raises(ctx.ContextError):
        ctx.context_bootstrap(lambda a: None, None, initial_sp=0x1008)
    ctx.context_bootstrap(lambda a: None, None, initial_sp=0x1000)


@given(st.lists(st.integers(), min_size=1, max_size=20))
def test_payloads_round_trip_in_order(values):
    host = ctx.ResumeContext()
    me = ctx.ResumeContext()

    def entry(first):
        got = [first]
        while len(got) < len(values):
            got.append(ctx.context_switch(me, host, None))
        ctx.context_switch(me, host, got)

    # the first value travels as the bootstrap argument
    k = ctx.context_bootstrap(entry, values[0])
    out = ctx.context_switch(host, k)
    for v in values[1:]:
        out = ctx.context_switch(host, me, v)
    assert out == values


@needs_native
@settings(max_examples=20, deadline=None)
@given(st.integers(min_value=1, max_value=20000))
def test_register_salting(roundtrips):
    r = ctx.probe_salt(roundtrips)
    assert r["roundtrips"] == roundtrips
    assert r["host_mismatch"] == 0
    assert r["coro_mismatch"] == 0
    assert r["sp_changes"] == 0


@needs_native
@settings(max_examples=50, deadline=None)
@given(word, word)
def test_native_pingpong_payload_fidelity(first, second):
    # B switches back with 9 after receiving first, then receives second
    assert ctx.probe_pingpong(first, second) == (9, second)


@needs_native
@given(word)
def test_native_bootstrap(arg):
    rc, seen, local, base, top = ctx.probe_bootstrap(arg)
    assert rc == 0
    assert seen == arg
    assert base <= local < top


@needs_native
def test_native_bootstrap_misaligned_and_double_switch():
    was = native.debug_enabled()
    native.set_debug(True)
    try:
        assert ctx.probe_bootstrap_misaligned() == EFF_ERR_ALIGN
        assert ctx.probe_double_switch() == EFF_ERR_STALE
    finally:
        native.set_debug(was)
