from __future__ import annotations

import pytest

from meancross import load_problem
from meancross.model import ProblemSpec

NONLINEAR_PROBLEM = """\
[problem]
T = 1.0
alpha = 5.0
x0 = 0.0
seed = 42

[coefficients]
b = x + u
sigma = 0.3*u
f = u
g = 0
phi = x*x

[control]
kind = finite
points = 1, 2
"""


@pytest.fixture(scope="session")
def example1() -> ProblemSpec:
    return load_problem("example1")


@pytest.fixture(scope="session")
def example2() -> ProblemSpec:
    return load_problem("example2")


@pytest.fixture(scope="session")
def lq_linear() -> ProblemSpec:
    return load_problem("lq-linear")


@pytest.fixture(scope="session")
def nonlinear(tmp_path_factory) -> ProblemSpec:
    path = tmp_path_factory.mktemp("problems") / "nonlinear.ini"
    path.write_text(NONLINEAR_PROBLEM)
    return load_problem(path)
