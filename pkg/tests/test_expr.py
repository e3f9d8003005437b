import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from meancross import expr

VARS = ("x", "u")


def p(source):
    return expr.parse(source, VARS)


def test_parse_add():
    assert p("x + u") == ("add", ("var", "x"), ("var", "u"))


def test_parse_single_variable():
    assert p("u") == ("var", "u")


def test_syntax_error_offset():
    with pytest.raises(expr.ExprSyntaxError) as exc:
        p("x*u +")
    assert exc.value.offset == 6


def test_unknown_identifier():
    with pytest.raises(expr.UnknownIdentifierError):
        p("x + y")


def test_unknown_function():
    with pytest.raises(expr.UnknownIdentifierError):
        p("tan(x)")


def test_pow_right_associative():
    assert p("2^x^2") == p("2^(x^2)")
    assert p("2^x^2") != p("(2^x)^2")


@pytest.mark.parametrize("source", [
    "x + u", "x - u - 1", "x - (u - 1)", "x*u/2", "-x^2", "exp(x)*u",
    "1/(x + u)", "sqrt(x)*cos(u) - sin(x)/2", "0.5*x*x", "x**2 + 1e-3",
])
def test_round_trip_fixed_point(source):
    t1 = p(source)
    printed = expr.format_expr(t1)
    t2 = expr.parse(printed, VARS)
    assert t2 == t1
    assert expr.format_expr(t2) == printed


# random ASTs: printing then parsing reproduces the structure
_leaf = st.one_of(
    st.sampled_from([("var", "x"), ("var", "u")]),
    st.floats(min_value=0.0, max_value=9.0,
              allow_nan=False).map(lambda v: ("num", round(v, 3))),
)


def _tree(children):
    binop = st.sampled_from(["add", "sub", "mul", "div", "pow"])
    fn = st.sampled_from(list(expr.FUNCTIONS))
    return st.one_of(
        st.tuples(binop, children, children),
        st.tuples(st.just("neg"), children),
        st.tuples(st.just("call"), fn, children),
    )


@given(st.recursive(_leaf, _tree, max_leaves=12))
@settings(max_examples=200, deadline=None)
def test_print_parse_identity_on_asts(tree):
    printed = expr.format_expr(tree)
    assert expr.parse(printed, VARS) == tree


def test_differentiate_linear():
    assert expr.differentiate(p("x + u"), "x") == ("num", 1.0)


def test_differentiate_quadratic_second_order():
    assert expr.differentiate(p("x*x"), "x", order=2) == ("num", 2.0)


def test_differentiate_matches_finite_differences():
    tree = p("exp(x)*u")
    d = expr.differentiate(tree, "x")
    f = expr.compile_expr(tree, VARS)
    df = expr.compile_expr(d, VARS)
    step = 1e-5
    fd = (f(0.3 + step, 1.0) - f(0.3 - step, 1.0)) / (2 * step)
    assert abs(df(0.3, 1.0) - fd) / abs(fd) < 1e-8


@given(st.recursive(st.sampled_from([("var", "x"), ("var", "u"), ("num", 0.5),
                                     ("num", 2.0)]),
                    lambda c: st.one_of(
                        st.tuples(st.sampled_from(["add", "sub", "mul"]), c, c),
                        st.tuples(st.just("call"), st.sampled_from(["exp", "sin", "cos"]), c)),
                    max_leaves=8))
@settings(max_examples=100, deadline=None)
def test_derivative_against_central_differences(tree):
    d = expr.differentiate(tree, "x")
    f = expr.compile_expr(tree, VARS)
    df = expr.compile_expr(d, VARS)
    x0, u0 = 0.4, 0.7
    step = 1e-6
    val = df(x0, u0)
    fd = (f(x0 + step, u0) - f(x0 - step, u0)) / (2 * step)
    assert math.isfinite(val)
    assert abs(val - fd) <= 1e-6 * max(1.0, abs(fd))


def test_evaluate_division_by_zero_names_subexpression():
    with pytest.raises(expr.DomainEvalError) as exc:
        expr.evaluate(p("1/x"), {"x": 0.0})
    assert "1 / x" in str(exc.value)


def test_evaluate_log_domain():
    with pytest.raises(expr.DomainEvalError):
        expr.evaluate(p("log(x)"), {"x": -1.0, "u": 0.0})


def test_compiled_vectorized():
    f = expr.compile_expr(p("x + u"), VARS)
    out = f(np.array([1.0, 2.0]), np.array([1.0, 1.0]))
    assert np.array_equal(out, [2.0, 3.0])


def test_simplify_cancellation():
    assert expr.simplify(p("x - x")) == ("num", 0.0)
    assert expr.simplify(p("0*u + x*1")) == ("var", "x")
