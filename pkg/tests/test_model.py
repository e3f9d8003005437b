import numpy as np
import pytest

from meancross import ControlDomain, load_problem, parse_coefficient
from meancross.model import ProblemValidationError, _scalar_problem

from conftest import NONLINEAR_PROBLEM


def test_example1_coefficients(example1):
    x = np.array([[1.0]])
    u = np.array([1.0])
    assert example1.b(x, u)[0, 0] == 2.0          # b = x + u
    assert example1.sigma(x, u)[0, 0, 0] == 0.0
    assert example1.f(x, np.array([2.0]))[0] == 2.0
    assert example1.phi(x)[0] == 1.0
    assert example1.g(x)[0] == 0.0
    assert example1.alpha == 1.0 and example1.T == 1.0
    assert example1.x0[0] == 0.0
    assert np.array_equal(example1.U.points, [[1.0], [2.0]])


def test_example2_coefficients(example2):
    x = np.array([[0.5]])
    assert example2.b(x, np.array([2.0]))[0, 0] == 1.0
    assert example2.sigma(x, np.array([2.0]))[0, 0, 0] == 2.0   # sigma = u
    assert example2.x0[0] == 0.5
    # the crossing-rate integrand collapses to the constant 1
    assert example2.l.sources() == "1"


def test_registry_rate_integrand(example1):
    # l = phi_x' b + 1/2 sigma' phi_xx sigma = x + u here
    x = np.array([[0.3]])
    assert example1.l(x, np.array([2.0]))[0] == pytest.approx(2.3)


def test_derivative_bundle_matches_finite_differences(example1, example2,
                                                      lq_linear, nonlinear):
    rng = np.random.default_rng(0)
    step = 1e-5
    for spec in (example1, example2, lq_linear, nonlinear):
        xs = rng.uniform(0.2, 1.5, size=(100, 1))
        us = rng.uniform(0.5, 2.0, size=(100, 1))
        for coef, first, second in ((spec.b, spec.b_x, spec.b_xx),
                                    (spec.sigma, spec.sigma_x, spec.sigma_xx),
                                    (spec.f, spec.f_x, spec.f_xx),
                                    (spec.phi, spec.phi_x, spec.phi_xx)):
            up = coef(xs + step, us if coef.control_vars else None)
            dn = coef(xs - step, us if coef.control_vars else None)
            fd1 = (up - dn) / (2 * step)
            sym1 = first(xs, us if coef.control_vars else None)[..., 0]
            scale = np.maximum(1.0, np.abs(fd1))
            assert np.all(np.abs(sym1 - fd1) / scale < 1e-6)
            mid = coef(xs, us if coef.control_vars else None)
            fd2 = (up - 2 * mid + dn) / step ** 2
            sym2 = second(xs, us if coef.control_vars else None)[..., 0, 0]
            scale = np.maximum(1.0, np.abs(fd2))
            assert np.all(np.abs(sym2 - fd2) / scale < 1e-4)


def test_trivial_threshold_rejected():
    U = ControlDomain("finite", 1, points=np.array([[1.0]]))
    with pytest.raises(ProblemValidationError, match="trivial"):
        _scalar_problem("bad", T=1.0, alpha=0.0, x0=0.0, seed=None, control=U,
                        b="x", sigma="0", f="0", g="0", phi="x")


def test_unknown_registry_name():
    with pytest.raises(ProblemValidationError, match="unknown problem"):
        load_problem("nosuch")


def test_problem_file_round_trip(nonlinear):
    assert nonlinear.alpha == 5.0
    assert nonlinear.seed == 42
    assert nonlinear.phi_xx.sources() == [["2"]]
    x = np.array([[1.0]])
    u = np.array([2.0])
    # l = 2x(x+u) + 0.09 u^2
    assert nonlinear.l(x, u)[0] == pytest.approx(2 * (1 + 2) + 0.09 * 4)


def test_problem_file_unknown_key(tmp_path):
    path = tmp_path / "bad.ini"
    path.write_text(NONLINEAR_PROBLEM + "stray = 1\n")
    with pytest.raises(ProblemValidationError, match="unknown keys"):
        load_problem(path)


def test_problem_file_rejects_multidimensional(tmp_path):
    text = NONLINEAR_PROBLEM.replace("[problem]", "[problem]\nm = 2")
    path = tmp_path / "multi.ini"
    path.write_text(text)
    with pytest.raises(ProblemValidationError, match="registry-only"):
        load_problem(path)


def test_control_domain_box_order():
    with pytest.raises(ProblemValidationError, match="lower <= upper"):
        ControlDomain("box", 1, lower=np.array([2.0]), upper=np.array([1.0]))


def test_control_domain_lattice_inside():
    box = ControlDomain("box", 1, lower=np.array([0.0]), upper=np.array([1.0]))
    pts = box.evaluation_points(per_axis=32)
    assert len(pts) == 32
    assert all(box.contains(p) for p in pts)


def test_control_domain_duplicate_points():
    with pytest.raises(ProblemValidationError, match="duplicate"):
        ControlDomain("finite", 1, points=np.array([[1.0], [1.0]]))


def test_parse_coefficient_shapes():
    coef = parse_coefficient("x + u", "scalar", (("x",), ("u",)))
    assert coef.shape == ()
    vec = parse_coefficient("x", ("vector", 1), (("x",), ("u",)))
    assert vec.shape == (1,)
    mat = parse_coefficient([["u", "0"]], ("matrix", 1, 2), (("x",), ("u",)))
    assert mat.shape == (1, 2)
    with pytest.raises(ProblemValidationError, match="arity"):
        parse_coefficient(["x", "u"], ("vector", 3), (("x",), ("u",)))


def test_spec_is_immutable(example1):
    with pytest.raises(Exception):
        example1.alpha = 2.0
    assert not example1.x0.flags.writeable
