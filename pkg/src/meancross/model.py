"""Control-problem definition.

A problem bundles the drift b(x,u), diffusion sigma(x,u), running cost
f(x,u), terminal cost g(x), the constraint functional phi(x) whose mean
defines the terminal rule, the threshold alpha, and the control domain.
All first and second state-derivatives are materialized symbolically at
load time: the adjoint drivers consume phi_xx and sigma_xx, where
finite-difference noise would contaminate Monte Carlo estimates.

Problems come from the built-in registry (`example1`, `example2`,
`lq-linear`) or from an INI-style problem file with sections [problem],
[coefficients], and [control] (see `load_problem`). Multi-dimensional
problems are registry-only; the file path is restricted to m = d = k = 1.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import expr
from .expr import ExprError

__all__ = [
    "Coefficient",
    "ControlDomain",
    "ProblemSpec",
    "ProblemValidationError",
    "parse_coefficient",
    "load_problem",
    "REGISTRY",
]


class ProblemValidationError(ValueError):
    """Problem definition violates a structural requirement."""


# --------------------------------------------------------------------------
# Shaped coefficients
# --------------------------------------------------------------------------

def _state_names(m: int) -> tuple[str, ...]:
    return ("x",) if m == 1 else tuple(f"x{i + 1}" for i in range(m))


def _control_names(k: int) -> tuple[str, ...]:
    return ("u",) if k == 1 else tuple(f"u{i + 1}" for i in range(k))


@dataclass(frozen=True)
class Coefficient:
    """Scalar-, vector-, or matrix-valued expression over (x, u).

    `entries` is a flat tuple of ASTs in row-major order matching `shape`
    (() scalar, (m,) vector, (m, d) matrix, and higher ranks for the
    derivative bundles).  Evaluation broadcasts over leading axes of the
    state/control arrays, returning shape (..., *shape).
    """

    entries: tuple
    shape: tuple[int, ...]
    state_vars: tuple[str, ...]
    control_vars: tuple[str, ...]
    _fns: tuple = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        names = self.state_vars + self.control_vars
        fns = tuple(expr.compile_expr(e, names) for e in self.entries)
        object.__setattr__(self, "_fns", fns)

    # -- construction ------------------------------------------------------

    @classmethod
    def from_sources(cls, sources, shape, state_vars, control_vars) -> "Coefficient":
        """Parse nested source strings (nesting must match `shape`)."""
        flat: list[tuple] = []
        names = tuple(state_vars) + tuple(control_vars)

        def walk(node, dims):
            if not dims:
                if not isinstance(node, str):
                    raise ProblemValidationError(
                        f"arity mismatch: expected expression string, got {type(node).__name__}")
                flat.append(expr.parse(node, names))
                return
            if isinstance(node, str) or len(node) != dims[0]:
                raise ProblemValidationError(
                    f"arity mismatch: expected {dims[0]} entries at this level")
            for sub in node:
                walk(sub, dims[1:])

        walk(sources, tuple(shape))
        return cls(tuple(flat), tuple(shape), tuple(state_vars), tuple(control_vars))

    # -- calculus ----------------------------------------------------------

    def diff_state(self) -> "Coefficient":
        """Gradient in x: appends one axis of length m (row-major with the
        derivative index innermost)."""
        m = len(self.state_vars)
        new = tuple(expr.differentiate(e, v)
                    for e in self.entries for v in self.state_vars)
        return Coefficient(new, self.shape + (m,), self.state_vars, self.control_vars)

    # -- evaluation ---------------------------------------------------------

    def __call__(self, x, u=None) -> np.ndarray:
        """Evaluate at states x (..., m) and controls u (..., k) or (k,).

        Fast path without domain diagnostics; non-finite screening is the
        caller's job (the simulator flags such paths as invalid).
        """
        x = np.asarray(x, dtype=float)
        cols = [x[..., i] for i in range(len(self.state_vars))]
        if self.control_vars:
            if u is None:
                raise ProblemValidationError("control value required")
            u = np.asarray(u, dtype=float)
            cols += [u[..., i] for i in range(len(self.control_vars))]
        base = np.broadcast(*cols) if len(cols) > 1 else None
        lead = base.shape if base is not None else cols[0].shape
        out = np.empty(lead + self.shape, dtype=float)
        flat = out.reshape(lead + (-1,)) if self.shape else out[..., None]
        for j, fn in enumerate(self._fns):
            flat[..., j] = fn(*cols)
        return out

    def eval_checked(self, x, u=None) -> np.ndarray:
        """Tree-walking evaluation that raises DomainEvalError naming the
        offending subexpression (the public eval_coefficient contract)."""
        x = np.asarray(x, dtype=float)
        env = {name: x[..., i] for i, name in enumerate(self.state_vars)}
        if self.control_vars:
            if u is None:
                raise ProblemValidationError("control value required")
            u = np.asarray(u, dtype=float)
            env.update({name: u[..., i] for i, name in enumerate(self.control_vars)})
        lead = np.broadcast(*env.values()).shape if len(env) > 1 else x[..., 0].shape
        out = np.empty(lead + self.shape, dtype=float)
        flat = out.reshape(lead + (-1,)) if self.shape else out[..., None]
        for j, e in enumerate(self.entries):
            flat[..., j] = expr.evaluate(e, env)
        return out

    def is_zero(self) -> bool:
        """True when every entry simplifies to the literal 0."""
        return all(expr.simplify(e) == ("num", 0.0) for e in self.entries)

    def depends_on_state(self) -> bool:
        svars = set(self.state_vars)
        return any(expr.free_variables(e) & svars for e in self.entries)

    def sources(self):
        """Nested printed expressions matching `shape`."""
        flat = [expr.format_expr(e) for e in self.entries]

        def build(dims, offset, stride):
            if not dims:
                return flat[offset]
            inner = stride // dims[0]
            return [build(dims[1:], offset + i * inner, inner) for i in range(dims[0])]

        total = 1
        for s in self.shape:
            total *= s
        return build(self.shape, 0, total)


def parse_coefficient(source, arity, variables) -> Coefficient:
    """Parse `source` into a shaped coefficient.

    arity: "scalar" | ("vector", m) | ("matrix", m, d).  `variables` is
    the pair (state_vars, control_vars); scalar-only callers may pass a
    flat name sequence, which is treated as states followed by nothing.
    """
    if isinstance(variables, tuple) and len(variables) == 2 \
            and not isinstance(variables[0], str):
        state_vars, control_vars = variables
    else:
        state_vars, control_vars = tuple(variables), ()
    if arity == "scalar":
        shape: tuple[int, ...] = ()
    elif arity[0] == "vector":
        shape = (arity[1],)
    elif arity[0] == "matrix":
        shape = (arity[1], arity[2])
    else:
        raise ProblemValidationError(f"unknown arity {arity!r}")
    if isinstance(source, str) and shape and all(s == 1 for s in shape):
        # allow a bare string for 1-vector / 1x1-matrix shapes
        for _ in shape:
            source = [source]
    return Coefficient.from_sources(source, shape, state_vars, control_vars)


# --------------------------------------------------------------------------
# Control domain
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class ControlDomain:
    """Finite set of control points, or an axis-aligned box."""

    kind: str  # "finite" | "box"
    dimension: int
    points: np.ndarray | None = None       # (n_points, k), finite kind
    lower: np.ndarray | None = None        # (k,), box kind
    upper: np.ndarray | None = None

    def __post_init__(self):
        if self.kind == "finite":
            pts = np.atleast_2d(np.asarray(self.points, dtype=float))
            if pts.shape[0] < 1 or pts.shape[1] != self.dimension:
                raise ProblemValidationError("finite control domain needs >= 1 point of dimension k")
            if len({tuple(p) for p in pts}) != pts.shape[0]:
                raise ProblemValidationError("finite control domain has duplicate points")
            object.__setattr__(self, "points", pts)
            pts.setflags(write=False)
        elif self.kind == "box":
            lo = np.asarray(self.lower, dtype=float).reshape(self.dimension)
            hi = np.asarray(self.upper, dtype=float).reshape(self.dimension)
            if np.any(lo > hi):
                raise ProblemValidationError("box control domain needs lower <= upper componentwise")
            object.__setattr__(self, "lower", lo)
            object.__setattr__(self, "upper", hi)
            lo.setflags(write=False)
            hi.setflags(write=False)
        else:
            raise ProblemValidationError(f"unknown control domain kind {self.kind!r}")

    def contains(self, u, tol: float = 1e-12) -> bool:
        u = np.asarray(u, dtype=float).reshape(self.dimension)
        if self.kind == "finite":
            return bool(np.any(np.all(np.abs(self.points - u) <= tol, axis=1)))
        return bool(np.all(u >= self.lower - tol) and np.all(u <= self.upper + tol))

    def evaluation_points(self, per_axis: int = 32) -> np.ndarray:
        """Control values scanned by optimality checks: all points for a
        finite domain, a regular lattice for a box."""
        if self.kind == "finite":
            return self.points
        axes = [np.linspace(self.lower[i], self.upper[i], per_axis)
                for i in range(self.dimension)]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)


# --------------------------------------------------------------------------
# Problem spec
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class ProblemSpec:
    """Immutable control problem with symbolic derivative bundle."""

    name: str
    m: int
    d: int
    k: int
    x0: np.ndarray
    T: float
    alpha: float
    U: ControlDomain
    b: Coefficient          # (m,)
    sigma: Coefficient      # (m, d)
    f: Coefficient          # ()
    g: Coefficient          # (), x only
    phi: Coefficient        # (), x only
    seed: int | None = None

    # derivative bundle, filled in __post_init__
    b_x: Coefficient = field(init=False, repr=False)
    b_xx: Coefficient = field(init=False, repr=False)
    sigma_x: Coefficient = field(init=False, repr=False)
    sigma_xx: Coefficient = field(init=False, repr=False)
    f_x: Coefficient = field(init=False, repr=False)
    f_xx: Coefficient = field(init=False, repr=False)
    g_x: Coefficient = field(init=False, repr=False)
    g_xx: Coefficient = field(init=False, repr=False)
    phi_x: Coefficient = field(init=False, repr=False)
    phi_xx: Coefficient = field(init=False, repr=False)
    l: Coefficient = field(init=False, repr=False)
    l_x: Coefficient = field(init=False, repr=False)
    l_xx: Coefficient = field(init=False, repr=False)

    def __post_init__(self):
        x0 = np.asarray(self.x0, dtype=float).reshape(self.m)
        x0.setflags(write=False)
        object.__setattr__(self, "x0", x0)
        if self.T <= 0:
            raise ProblemValidationError("horizon T must be positive")
        for name, coef, shape in (("b", self.b, (self.m,)),
                                  ("sigma", self.sigma, (self.m, self.d)),
                                  ("f", self.f, ()),
                                  ("g", self.g, ()),
                                  ("phi", self.phi, ())):
            if coef.shape != shape:
                raise ProblemValidationError(f"{name} has shape {coef.shape}, expected {shape}")
        for name in ("g", "phi"):
            coef = getattr(self, name)
            if any(expr.free_variables(e) & set(coef.control_vars) for e in coef.entries):
                raise ProblemValidationError(f"{name} must depend on x only")

        for base in ("b", "sigma", "f", "g", "phi"):
            first = getattr(self, base).diff_state()
            object.__setattr__(self, f"{base}_x", first)
            object.__setattr__(self, f"{base}_xx", first.diff_state())
        object.__setattr__(self, "l", self._build_rate_integrand())
        object.__setattr__(self, "l_x", self.l.diff_state())
        object.__setattr__(self, "l_xx", self.l_x.diff_state())

        self._validate_threshold()
        self._validate_finite_derivatives()

    def _build_rate_integrand(self) -> Coefficient:
        """l(x,u) = phi_x . b + (1/2) sum_j sigma_j' phi_xx sigma_j, built
        symbolically so its own derivatives stay exact."""
        m, d = self.m, self.d
        phi_x = self.phi_x.entries                  # (m,)
        phi_xx = self.phi_xx.entries                # (m, m) row-major
        b = self.b.entries                          # (m,)
        sig = self.sigma.entries                    # (m, d) row-major

        def add(a, b_):
            return ("add", a, b_)

        def mul(a, b_):
            return ("mul", a, b_)

        total = ("num", 0.0)
        for i in range(m):
            total = add(total, mul(phi_x[i], b[i]))
        for j in range(d):
            for i in range(m):
                for r in range(m):
                    term = mul(sig[i * d + j], mul(phi_xx[i * m + r], sig[r * d + j]))
                    total = add(total, mul(("num", 0.5), term))
        return Coefficient((expr.simplify(total),), (), self.b.state_vars,
                           self.b.control_vars)

    def _validate_threshold(self):
        phi0 = float(self.phi(self.x0[None, :])[0])
        if not self.alpha > phi0:
            raise ProblemValidationError(
                f"threshold alpha={self.alpha} must exceed phi(x0)={phi0}: "
                "the terminal time would be 0 and the problem trivial")

    def _validate_finite_derivatives(self):
        us = self.U.evaluation_points(per_axis=5)
        x = np.broadcast_to(self.x0, (len(us), self.m))
        for name in ("b_x", "b_xx", "sigma_x", "sigma_xx", "f_x", "f_xx",
                     "g_x", "g_xx", "phi_x", "phi_xx", "l_x", "l_xx"):
            vals = getattr(self, name)(x, us)
            if not np.all(np.isfinite(vals)):
                raise ProblemValidationError(f"derivative {name} not finite at (x0, U samples)")

    # -- structural queries used by solver backends -------------------------

    def sigma_is_zero(self) -> bool:
        return self.sigma.is_zero()

    def ode_backend_valid(self) -> bool:
        """Backward ODE adjoints are exact when the problem is noiseless, or
        when sigma_x vanishes and the linearized dynamics are state-free
        (b_xx = sigma_xx = 0), so expectations commute with the drivers."""
        if self.sigma_is_zero():
            return True
        return (self.sigma_x.is_zero() and self.b_xx.is_zero()
                and self.sigma_xx.is_zero())

    @property
    def state_vars(self) -> tuple[str, ...]:
        return self.b.state_vars

    @property
    def control_vars(self) -> tuple[str, ...]:
        return self.b.control_vars


# --------------------------------------------------------------------------
# Registry and problem files
# --------------------------------------------------------------------------

def _scalar_problem(name, *, T, alpha, x0, seed, control, b, sigma, f, g, phi):
    sv, cv = _state_names(1), _control_names(1)
    mk = lambda src, shape: Coefficient.from_sources(src, shape, sv, cv)  # noqa: E731
    mkx = lambda src: Coefficient.from_sources(src, (), sv, ())  # noqa: E731
    return ProblemSpec(
        name=name, m=1, d=1, k=1,
        x0=np.array([x0]), T=T, alpha=alpha, U=control, seed=seed,
        b=mk([b], (1,)), sigma=mk([[sigma]], (1, 1)),
        f=mk(f, ()), g=mkx(g), phi=mkx(phi),
    )


def _make_example1():
    U = ControlDomain("finite", 1, points=np.array([[1.0], [2.0]]))
    return _scalar_problem("example1", T=1.0, alpha=1.0, x0=0.0, seed=None,
                           control=U, b="x + u", sigma="0", f="u", g="0", phi="x")


def _make_example2():
    U = ControlDomain("finite", 1, points=np.array([[1.0], [2.0]]))
    return _scalar_problem("example2", T=1.0, alpha=1.0, x0=0.5, seed=None,
                           control=U, b="1", sigma="u", f="u", g="0", phi="x")


def _make_lq_linear():
    # b = a x + c u with a=0.5, c=1; constant diffusion; quadratic costs.
    U = ControlDomain("box", 1, lower=np.array([0.0]), upper=np.array([1.0]))
    return _scalar_problem("lq-linear", T=1.0, alpha=1.0, x0=0.0, seed=None,
                           control=U, b="0.5*x + u", sigma="0.2",
                           f="0.5*x*x", g="0.5*x*x", phi="x")


REGISTRY = {
    "example1": _make_example1,
    "example2": _make_example2,
    "lq-linear": _make_lq_linear,
}

_PROBLEM_KEYS = {"m", "d", "k", "t", "alpha", "x0", "seed"}
_COEFF_KEYS = {"b", "sigma", "f", "g", "phi"}
_CONTROL_KEYS = {"kind", "points", "lower", "upper"}


def load_problem(source: str | Path) -> ProblemSpec:
    """Load a registry problem by name or parse an INI problem file."""
    if isinstance(source, str) and source in REGISTRY:
        return REGISTRY[source]()
    path = Path(source)
    if not path.exists():
        raise ProblemValidationError(
            f"unknown problem {source!r}: not a registry name "
            f"({', '.join(sorted(REGISTRY))}) and no such file")
    return _load_problem_file(path)


def _load_problem_file(path: Path) -> ProblemSpec:
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    cp.optionxform = str.lower  # type: ignore[assignment]
    try:
        cp.read_string(path.read_text(), source=str(path))
    except configparser.Error as e:
        raise ProblemValidationError(f"malformed problem file: {e}") from e

    for section, allowed in (("problem", _PROBLEM_KEYS),
                             ("coefficients", _COEFF_KEYS),
                             ("control", _CONTROL_KEYS)):
        if section not in cp:
            raise ProblemValidationError(f"problem file missing [{section}] section")
        unknown = set(cp[section]) - allowed
        if unknown:
            raise ProblemValidationError(
                f"unknown keys in [{section}]: {', '.join(sorted(unknown))}")

    prob = cp["problem"]
    m = prob.getint("m", fallback=1)
    d = prob.getint("d", fallback=1)
    k = prob.getint("k", fallback=1)
    if (m, d, k) != (1, 1, 1):
        raise ProblemValidationError(
            "problem files support m = d = k = 1 only; "
            "multi-dimensional problems are registry-only")
    for key in ("t", "alpha", "x0"):
        if key not in prob:
            raise ProblemValidationError(f"[problem] missing key {key!r}")
    T = prob.getfloat("t")
    alpha = prob.getfloat("alpha")
    x0 = prob.getfloat("x0")
    seed = prob.getint("seed", fallback=None)

    coef = cp["coefficients"]
    for key in _COEFF_KEYS:
        if key not in coef:
            raise ProblemValidationError(f"[coefficients] missing key {key!r}")

    ctrl = cp["control"]
    kind = ctrl.get("kind", fallback=None)
    if kind == "finite":
        if "points" not in ctrl:
            raise ProblemValidationError("[control] finite kind needs 'points'")
        pts = [[float(v)] for v in ctrl["points"].split(",")]
        U = ControlDomain("finite", 1, points=np.array(pts))
    elif kind == "box":
        if "lower" not in ctrl or "upper" not in ctrl:
            raise ProblemValidationError("[control] box kind needs 'lower' and 'upper'")
        U = ControlDomain("box", 1, lower=np.array([ctrl.getfloat("lower")]),
                          upper=np.array([ctrl.getfloat("upper")]))
    else:
        raise ProblemValidationError("[control] kind must be 'finite' or 'box'")

    try:
        return _scalar_problem(path.stem, T=T, alpha=alpha, x0=x0, seed=seed,
                               control=U, b=coef["b"], sigma=coef["sigma"],
                               f=coef["f"], g=coef["g"], phi=coef["phi"])
    except ExprError as e:
        raise ProblemValidationError(f"bad coefficient expression: {e}") from e
