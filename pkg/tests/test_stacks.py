import gc

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from effstack import effects as fx
from effstack import stacks
from effstack.stacks import PAGE_SIZE as P
from effstack.stacks import FaultAction, Kind, ShadowStack, StackOverflowError

from conftest import native, needs_native, run_python

KB = 1024


def pages_up(n):
    return -(-n // P) * P


def test_default_frame_sizes():
    assert stacks.default_frame_size("fixed") == 150 * KB
    assert stacks.default_frame_size("segmented") == 1024
    assert stacks.default_frame_size("overcommit-kernel") == 150 * KB
    assert stacks.default_frame_size("overcommit-user") == 150 * KB


def test_unknown_strategy_rejected():
    with pytest.raises(ValueError):
        stacks.check_strategy("heap")


def test_default_strategy_from_environment():
    code = "from effstack import stacks, Coroutine; print(stacks.default_strategy(), Coroutine(print).strategy)"
    r = run_python(code, {"EFFSTACK_STRATEGY": "overcommit-user"})
    assert r.stdout.split() == ["overcommit-user", "overcommit-user"]
    r = run_python(code, {"EFFSTACK_STRATEGY": "bogus"})
    assert r.returncode != 0 and "unknown stack strategy" in r.stderr


def test_set_default_strategy():
    old = stacks.default_strategy()
    try:
        stacks.set_default_strategy("segmented")
        assert fx.Coroutine(print).strategy == "segmented"
        with pytest.raises(ValueError):
            stacks.set_default_strategy("bogus")
    finally:
        stacks.set_default_strategy(old)


def test_fixed_frame_layout():
    f = stacks.new_frame("fixed")
    assert f.initial_sp == f.base + 150 * KB
    assert f.committed_bytes() == 150 * KB
    f.release()


def test_kernel_frame_layout():
    f = stacks.new_frame("overcommit-kernel")
    assert f.allowed_size == 152 * KB
    assert f.total_size == f.allowed_size + P
    assert f.guard_size == P
    assert f.initial_sp == f.base + f.total_size
    f.release()


def test_user_frame_commits_nothing_until_touched():
    f = stacks.new_frame("overcommit-user")
    assert f.committed_bytes() == 0
    f.write(f.initial_sp - 8, b"\x01" * 8)
    assert f.committed_bytes() == P
    assert f.read(f.initial_sp - 8, 8) == b"\x01" * 8
    f.release()


@pytest.mark.parametrize("strategy", ["fixed", "overcommit-kernel", "overcommit-user"])
def test_too_small_frame_rejected(strategy):
    with pytest.raises(Exception):
        fx.coroutine_new_sized(lambda _: None, None, 0, strategy=strategy)


def test_zero_segment_grows_on_first_use():
    k = fx.coroutine_new_sized(lambda _: fx.yield_(1), None, 0, strategy="segmented")
    assert k.stack.frame.size == 0
    assert k.resume_handling_all().effect == fx.YIELD
    assert k.stack.frame.allocations >= 1
    k.delete()


def test_frame_bounds_checked():
    f = stacks.new_frame("fixed", 4096)
    with pytest.raises(ValueError):
        f.write(f.base + f.size, b"x")
    with pytest.raises(ValueError):
        f.read(f.base - 1, 1)
    f.release()


# fault decisions -----------------------------------------------------------

BASE, GUARD, ALLOWED = 0x100000, P, 38 * P
TOTAL = GUARD + ALLOWED
TOP = BASE + TOTAL


def decide(committed, addr):
    return stacks.fault_decide(Kind.OVERCOMMIT_USER, BASE, TOTAL, ALLOWED, GUARD, committed, addr)


def test_fault_classes():
    assert decide(0, TOP - 8) == (FaultAction.COMMIT, TOP - P, P)
    assert decide(4 * P, TOP - 8)[0] == FaultAction.ALREADY_COMMITTED
    assert decide(0, BASE + 8)[0] == FaultAction.OVERFLOW
    assert decide(0, BASE - 8)[0] == FaultAction.FOREIGN
    assert decide(0, TOP)[0] == FaultAction.FOREIGN


def test_commit_clamped_at_allowed():
    action, start, length = decide(36 * P, TOP - 37 * P)
    assert action == FaultAction.COMMIT
    assert start == BASE + GUARD and length == 2 * P


@given(st.integers(min_value=0, max_value=ALLOWED - 1))
def test_single_fault_covers_address(depth):
    addr = TOP - 1 - depth
    committed = 0
    while True:
        action, start, length = decide(committed, addr)
        if action == FaultAction.ALREADY_COMMITTED:
            break
        assert action == FaultAction.COMMIT
        assert start == TOP - committed - length
        committed += length
    assert TOP - committed <= addr
    assert committed <= 2 * pages_up(depth + 1) + P


def test_doubling_sequence_on_real_frame():
    f = stacks.new_frame("overcommit-user")
    pages = f.allowed_size // P
    seen = []
    for i in range(1, pages + 1):
        f.write(f.initial_sp - i * P, b"x")
        seen.append(f.committed_bytes() // P)
    expect = [min(1 << (i - 1).bit_length(), pages) for i in range(1, pages + 1)]
    assert seen == expect
    assert seen[:9] == [1, 2, 4, 4, 8, 8, 8, 8, 16]
    f.release()


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(min_value=1, max_value=150 * KB), min_size=1, max_size=12))
def test_waste_bound_for_arbitrary_touches(depths):
    f = stacks.new_frame("overcommit-user")
    for d in depths:
        f.write(f.initial_sp - d, b"\x07")
    deepest = max(depths)
    assert f.committed_bytes() >= deepest
    assert f.committed_bytes() <= 2 * pages_up(deepest) + P
    f.release()


def test_registry_tracks_overcommit_regions():
    gc.collect()
    before = stacks.registry_count()
    f = stacks.new_frame("overcommit-user")
    assert stacks.registry_count() == before + 1
    assert stacks.handler_installed()
    assert stacks.registry_lookup(f.initial_sp - 1) is not None
    assert stacks.registry_lookup(f.base - P) is None
    f.release()
    assert stacks.registry_count() == before


# segmented --------------------------------------------------------------

def test_init_segment():
    seg = stacks.init_segment(1024)
    assert seg["size"] == 1024
    assert seg["prev"] == 0 and seg["next"] == 0
    assert seg["canary"] == 0x9999999999999999


def test_growth_links_and_release_retains():
    f = stacks.new_frame("segmented")
    head = f.current_segment
    f.grow(2000)
    chain = f.chain()
    assert len(chain) == 2 and chain[1][3]
    f.shrink()
    assert f.current_segment == head
    assert len(f.chain()) == 2  # retained for reuse
    f.grow(100)
    assert f.allocations == 1
    f.release()


def test_small_retained_segment_is_spliced():
    f = stacks.new_frame("segmented")
    f.grow(600)
    f.shrink()
    small = f.chain()[1][0]
    f.grow(4000)
    chain = f.chain()
    assert len(chain) == 3
    assert chain[1][1] >= 4000 and chain[1][3]
    assert chain[2][0] == small
    assert f.allocations == 2
    assert f.check_chain() == (True, 3)
    f.release()


@settings(max_examples=60, deadline=None)
@given(st.lists(st.one_of(st.integers(min_value=1, max_value=6000), st.none()), max_size=40))
def test_segment_chain_integrity(ops):
    f = stacks.new_frame("segmented")
    depth = 0
    for op in ops:
        if op is None:
            if depth:
                f.shrink()
                depth -= 1
        else:
            f.grow(op)
            depth += 1
        fwd = [a for a, _, _, _ in f.chain()]
        assert fwd == f.chain_backward()[::-1]
        assert all(c == stacks.SEGMENT_CANARY for _, _, c, _ in f.chain())
        assert [cur for _, _, _, cur in f.chain()].index(True) == depth
        assert f.check_chain()[0]
    f.release()


def test_hot_split_in_python_runtime():
    s = ShadowStack("segmented")
    crossing = s.available()
    for _ in range(10000):
        with s.reserved(crossing):
            pass
    assert s.frame.allocations == 1
    s.close()


@needs_native
def test_hot_split_native_probe():
    allocs, chain = native.probe_hot_split("segmented", 1000, 4096)
    assert (allocs, chain) == (1, 2)


# shadow stack ------------------------------------------------------------

def test_reserve_rounds_and_restores():
    s = ShadowStack("fixed", 8192)
    sp0 = s.sp
    a = s.reserve(10)
    assert sp0 - a == 16 and a % 16 == 0
    s.release()
    assert s.sp == sp0 and s.used == 0 and s.max_used == 16
    s.close()


@pytest.mark.parametrize("strategy", ["fixed", "overcommit-kernel", "overcommit-user"])
def test_overflow_raises(strategy):
    s = ShadowStack(strategy, 8192)
    with pytest.raises(StackOverflowError):
        s.reserve(s.available() + 16)
    s.close()


def test_segmented_reserve_grows_instead_of_overflowing():
    s = ShadowStack("segmented")
    s.reserve(5000)
    assert s.frame.allocations == 1
    s.release()
    s.close()


def test_request_record_written_to_frame(strategy):
    s = ShadowStack(strategy)
    addr = s.push_record(7, 0xDEADBEEF)
    assert s.read_record(addr) == (7, 0xDEADBEEF)
    s.release()
    s.close()
