import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from effstack import ad_demo
from effstack.effects import UnhandledEffectError
from effstack.ad_demo import E_SMOOTH, Coroutine, derivative_of, evaluate, run_ad, value_of

from conftest import native, needs_native, run_python

FD_STEP = 1e-6


def ad(iters, x, strategy="fixed"):
    """(value, derivative) from the fastest available implementation."""
    if native is not None:
        r = native.kernel_ad(strategy, native.default_frame_size(strategy), iters, x)
        return r["value"], r["derivative"]
    run = run_ad(iters, x, strategy)
    return run.result.v, run.derivative


def test_closed_forms_by_hand():
    assert value_of(0, 0.5) == 1.0
    assert derivative_of(1, 0.3) == -1.0
    assert value_of(2, 0.5) == 1.75
    assert derivative_of(2, 0.5) == -2.0


@pytest.mark.parametrize("iters,expect", [(0, 0.0), (1, -1.0)])
def test_small_cases(iters, expect, strategy):
    run = run_ad(iters, 0.5, strategy)
    assert run.derivative == expect


def test_python_run_matches_reference(strategy):
    run = run_ad(100, 0.5, strategy)
    assert abs(run.derivative - (-4.0)) <= 1e-4
    assert math.isclose(run.result.v, value_of(100, 0.5), rel_tol=1e-12)
    assert (run.forward, run.reverse, run.max_depth) == (1502, 502, 503)


@needs_native
def test_native_run_matches_reference(strategy):
    r = native.kernel_ad(strategy, native.default_frame_size(strategy), 100, 0.5)
    assert abs(r["derivative"] - (-4.0)) <= 1e-4
    assert (r["forward_effects"], r["reverse_effects"], r["max_handle_depth"]) == (1502, 502, 503)


@settings(max_examples=50, deadline=None)
@given(st.floats(min_value=0.01, max_value=0.99), st.integers(min_value=0, max_value=20))
def test_gradient_matches_central_differences(x, iters):
    _, d = ad(iters, x)
    hi, _ = ad(iters, x + FD_STEP)
    lo, _ = ad(iters, x - FD_STEP)
    fd = (hi - lo) / (2 * FD_STEP)
    assert abs(d - fd) <= 1e-6 * max(abs(fd), 1.0)


@settings(max_examples=10, deadline=None)
@given(st.floats(min_value=0.01, max_value=0.99), st.integers(min_value=1, max_value=20))
def test_python_and_closed_form_agree(x, iters):
    run = run_ad(iters, x, "segmented")
    assert math.isclose(run.derivative, derivative_of(iters, x), rel_tol=1e-12)


# forward layer alone ------------------------------------------------------

def expr():
    leaf = st.floats(min_value=-100, max_value=100, allow_nan=False).map(lambda v: ("c", v))
    return st.recursive(leaf, lambda sub: st.one_of(
        sub.map(lambda a: ("n", a)),
        st.tuples(st.sampled_from(["a", "m"]), sub, sub)), max_leaves=12)


def via_effects(e):
    tag = e[0]
    if tag == "c":
        return ad_demo.e_c(e[1])
    if tag == "n":
        return ad_demo.e_n(via_effects(e[1]))
    x, y = via_effects(e[1]), via_effects(e[2])
    return ad_demo.e_a(x, y) if tag == "a" else ad_demo.e_m(x, y)


def direct(e):
    tag = e[0]
    if tag == "c":
        return e[1]
    if tag == "n":
        return -direct(e[1])
    x, y = direct(e[1]), direct(e[2])
    return x + y if tag == "a" else x * y


@settings(max_examples=60, deadline=None)
@given(expr())
def test_forward_effects_match_arithmetic(e):
    out = {}
    k = Coroutine(lambda _: out.setdefault("v", via_effects(e)), None, strategy="fixed", frame_size=64 * 1024)
    evaluate(k)
    k.delete()
    assert out["v"] == direct(e)


def test_reverse_constant_has_zero_adjoint():
    run = ad_demo.ADRun(0, 0.5, "fixed", 150 * 1024)
    seen = {}

    def body(_):
        p = ad_demo.r_c(1.0)
        seen["v"], seen["dv"] = p.v, p.dv.get()
        run.result = p

    child = Coroutine(body, None, strategy="fixed")
    k = Coroutine(lambda _: ad_demo._handle_framed(run, child, None), None, strategy="fixed")
    evaluate(k)
    child.delete()
    k.delete()
    assert seen == {"v": 1.0, "dv": 0.0}
    assert run.reverse == 1


def test_evaluate_does_not_handle_reverse_effects():
    assert E_SMOOTH == 0b111
    k = Coroutine(lambda _: ad_demo.r_c(1.0), None, strategy="fixed")
    with pytest.raises(UnhandledEffectError):
        evaluate(k)
    k.delete()


@pytest.mark.parametrize("extra", [[], ["--python"]])
def test_cli_prints_six_decimals(extra):
    argv = ["--iters", "100", *extra]
    r = run_python(f"import sys; from effstack.ad_demo import main; sys.exit(main({argv!r}))")
    assert r.returncode == 0, r.stderr
    assert r.stdout.strip() == "-4.000000"
