"""Backward adjoint systems along a candidate optimal pair.

Four linear backward systems are solved on [0, tau], where tau is the
estimated terminal time of the candidate control:

  cost, first order:        -dp = [b_x' p + sum_j sigma_x^j' K_j + f_x] dt - K dW,
                            p(tau) = g_x(X(tau))
  cost, second order:       -dP = [b_x' P + P b_x + sum_j sigma_x^j' P sigma_x^j
                                   + sum_j (sigma_x^j' Q_j + Q_j sigma_x^j)
                                   + Hxx(p, K)] dt - Q dW,
                            P(tau) = g_xx(X(tau))
  constraint, first/second: same drivers with f replaced by the crossing-rate
                            integrand l, and zero terminal data.

Two backends:

  ode         backward Euler on the path-averaged equations with K = Q = 0.
              Exact when sigma is identically zero (single deterministic
              path), or when sigma_x = 0 and b_xx = sigma_xx = 0 so that
              taking expectations commutes with every driver term.
  regression  least-squares Monte Carlo: per-step backward projection of
              the discrete system on a monomial basis in the state, with
              K and Q recovered from the increment regression (projection
              of value x dW / dt).  Normal equations carry a 1e-10 ridge.

The Hamiltonians are H = f + <p, b> + sum_j <K_j, sigma^j> on the cost
side and H0 = l + <p0, b> + sum_j <K0_j, sigma^j> on the constraint side.
Hxx denotes the x-Hessian at fixed (u, p, K).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from itertools import combinations_with_replacement

import numpy as np

from .model import ProblemSpec
from .simulate import ControlProcess, PathEnsemble

__all__ = [
    "AdjointSolution",
    "SecondOrderAdjoint",
    "AdjointBundle",
    "HamiltonianEval",
    "BackendError",
    "solve_first_adjoint",
    "solve_second_adjoint",
    "solve_all_adjoints",
    "hamiltonian",
    "k_tau",
    "r_tau",
]

RIDGE = 1e-10


class BackendError(RuntimeError):
    pass


# --------------------------------------------------------------------------
# Solution containers
# --------------------------------------------------------------------------

def _interp_nodes(times: np.ndarray, t: float) -> tuple[int, int, float]:
    t = min(max(t, times[0]), times[-1])
    hi = int(np.searchsorted(times, t, side="left"))
    hi = min(max(hi, 1), len(times) - 1)
    lo = hi - 1
    span = times[hi] - times[lo]
    w = 0.0 if span == 0 else (t - times[lo]) / span
    return lo, hi, float(w)


@dataclass(frozen=True)
class AdjointSolution:
    """First-order pair (p, K) on the restricted grid; `p`/`K` are path
    means, with pathwise values retained by the regression backend."""

    times: np.ndarray
    p: np.ndarray                 # (n, m)
    K: np.ndarray                 # (n, m, d)
    which: str                    # "cost" | "constraint"
    backend: str                  # "ode" | "regression"
    p_paths: np.ndarray | None = None   # (M, n, m)
    K_paths: np.ndarray | None = None   # (M, n, m, d)

    def at(self, t: float) -> tuple[np.ndarray, np.ndarray]:
        lo, hi, w = _interp_nodes(self.times, t)
        return ((1 - w) * self.p[lo] + w * self.p[hi],
                (1 - w) * self.K[lo] + w * self.K[hi])

    def paths_at(self, t: float, n_paths: int) -> tuple[np.ndarray, np.ndarray]:
        lo, hi, w = _interp_nodes(self.times, t)
        if self.p_paths is not None:
            p = (1 - w) * self.p_paths[:, lo] + w * self.p_paths[:, hi]
            K = (1 - w) * self.K_paths[:, lo] + w * self.K_paths[:, hi]
            return p, K
        p, K = self.at(t)
        return (np.broadcast_to(p, (n_paths,) + p.shape),
                np.broadcast_to(K, (n_paths,) + K.shape))


@dataclass(frozen=True)
class SecondOrderAdjoint:
    """Second-order pair (P, Q); same conventions as AdjointSolution."""

    times: np.ndarray
    P: np.ndarray                 # (n, m, m)
    Q: np.ndarray                 # (n, d, m, m)
    which: str
    backend: str
    P_paths: np.ndarray | None = None   # (M, n, m, m)

    def at(self, t: float) -> np.ndarray:
        lo, hi, w = _interp_nodes(self.times, t)
        return (1 - w) * self.P[lo] + w * self.P[hi]

    def paths_at(self, t: float, n_paths: int) -> np.ndarray:
        lo, hi, w = _interp_nodes(self.times, t)
        if self.P_paths is not None:
            return (1 - w) * self.P_paths[:, lo] + w * self.P_paths[:, hi]
        P = self.at(t)
        return np.broadcast_to(P, (n_paths,) + P.shape)

    def symmetry_defect(self) -> float:
        return float(np.abs(self.P - np.swapaxes(self.P, -1, -2)).max())


@dataclass(frozen=True)
class AdjointBundle:
    cost_first: AdjointSolution
    cost_second: SecondOrderAdjoint
    constraint_first: AdjointSolution
    constraint_second: SecondOrderAdjoint
    tau: float


# --------------------------------------------------------------------------
# Shared machinery
# --------------------------------------------------------------------------

def _restricted_times(ensemble: PathEnsemble, tau: float) -> tuple[np.ndarray, np.ndarray]:
    """Grid nodes below tau plus tau itself; returns (times, node indices)
    where the final entry's index is the node at or before tau."""
    grid = ensemble.grid
    tau = min(max(tau, 0.0), grid.T)
    j = int(math.floor(tau / grid.dt + 1e-12))
    j = min(j, grid.n_steps)
    nodes = np.arange(j + 1)
    times = grid.times[nodes].copy()
    if tau - times[-1] > 1e-12 * max(1.0, grid.T):
        times = np.append(times, tau)
        nodes = np.append(nodes, j)      # partial step reuses node j data
    return times, nodes


def _states_on(ensemble: PathEnsemble, times: np.ndarray) -> np.ndarray:
    """Pathwise states at the restricted nodes (tau node interpolated)."""
    out = np.empty((ensemble.n_paths, len(times), ensemble.states.shape[2]))
    for i, t in enumerate(times):
        out[:, i, :] = ensemble.state_at(float(t))
    return out


def _controls_on(control: ControlProcess, times: np.ndarray) -> np.ndarray:
    u_eff = control.effective_values()
    idx = np.minimum((times / control.grid.dt + 1e-12).astype(int),
                     control.grid.n_steps - 1)
    return u_eff[idx]


def _monomial_powers(m: int, degree: int) -> list[tuple[int, ...]]:
    powers = [(0,) * m]
    for deg in range(1, degree + 1):
        for combo in combinations_with_replacement(range(m), deg):
            p = [0] * m
            for c in combo:
                p[c] += 1
            powers.append(tuple(p))
    return powers


def _basis_matrix(x: np.ndarray, powers) -> np.ndarray:
    cols = [np.prod([x[:, j] ** pj for j, pj in enumerate(pw) if pj], axis=0)
            if any(pw) else np.ones(x.shape[0]) for pw in powers]
    return np.stack(cols, axis=1)


def _project(basis: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Ridge-regularized least-squares fit evaluated on the sample points.

    targets: (M, q) columns fitted independently; returns fitted (M, q).
    """
    gram = basis.T @ basis
    gram[np.diag_indices_from(gram)] += RIDGE
    coef = np.linalg.solve(gram, basis.T @ targets)
    return basis @ coef


def _terminal_first(spec, which, x_tau):
    if which == "cost":
        return spec.g_x(x_tau)
    return np.zeros((x_tau.shape[0], spec.m))


def _terminal_second(spec, which, x_tau):
    if which == "constraint":
        return np.zeros((x_tau.shape[0], spec.m, spec.m))
    return spec.g_xx(x_tau)


def _driver_x(spec, which):
    return spec.f_x if which == "cost" else spec.l_x


def _driver_xx(spec, which):
    return spec.f_xx if which == "cost" else spec.l_xx


def _check_which(which):
    if which not in ("cost", "constraint"):
        raise ValueError(f"which must be 'cost' or 'constraint', got {which!r}")


def _resolve_backend(spec, backend):
    if backend == "auto":
        return "ode" if spec.ode_backend_valid() else "regression"
    if backend == "ode" and not spec.ode_backend_valid():
        raise BackendError(
            "ode backend requires sigma = 0, or sigma_x = 0 with "
            "state-independent linearization (b_xx = sigma_xx = 0)")
    if backend not in ("ode", "regression"):
        raise ValueError(f"unknown backend {backend!r}")
    return backend


# --------------------------------------------------------------------------
# First order
# --------------------------------------------------------------------------

def solve_first_adjoint(spec: ProblemSpec, ensemble: PathEnsemble,
                        control: ControlProcess, tau: float,
                        which: str = "cost", backend: str = "auto",
                        basis_degree: int = 3) -> AdjointSolution:
    """Solve the first-order backward system on [0, tau]."""
    _check_which(which)
    backend = _resolve_backend(spec, backend)
    times, nodes = _restricted_times(ensemble, tau)
    xs = _states_on(ensemble, times)          # (M, n, m)
    us = _controls_on(control, times)         # (n, k)
    n = len(times)
    m, d = spec.m, spec.d
    M = ensemble.n_paths

    terminal = _terminal_first(spec, which, xs[:, -1, :])     # (M, m)
    fx = _driver_x(spec, which)

    if backend == "ode":
        p = np.empty((n, m))
        p[-1] = terminal.mean(axis=0)
        for i in range(n - 2, -1, -1):
            dt_i = times[i + 1] - times[i]
            bx = spec.b_x(xs[:, i, :], us[i]).mean(axis=0)    # (m, m)
            drv = fx(xs[:, i, :], us[i]).mean(axis=0)         # (m,)
            p[i] = p[i + 1] + dt_i * (bx.T @ p[i + 1] + drv)
        K = np.zeros((n, m, d))
        return AdjointSolution(times=times, p=p, K=K, which=which, backend="ode")

    # regression backend: pathwise backward projection
    powers = _monomial_powers(m, basis_degree)
    p_paths = np.empty((M, n, m))
    K_paths = np.zeros((M, n, m, d))
    p_paths[:, -1, :] = terminal
    for i in range(n - 2, -1, -1):
        dt_i = float(times[i + 1] - times[i])
        x_i = xs[:, i, :]
        basis = _basis_matrix(x_i, powers)
        p_next = p_paths[:, i + 1, :]
        psi = _project(basis, p_next)                          # E_i[p_{i+1}]
        # K from the increment regression; a trailing partial step borrows
        # the full-step increment (first-order effect on one node only)
        dW = ensemble.increments[:, min(nodes[i], ensemble.grid.n_steps - 1), :]
        dt_K = ensemble.grid.dt
        targets = (p_next[:, :, None] * dW[:, None, :]).reshape(M, m * d) / dt_K
        K_i = _project(basis, targets).reshape(M, m, d)
        K_paths[:, i, :, :] = K_i
        bx = spec.b_x(x_i, us[i])                              # (M, m, m)
        sx = spec.sigma_x(x_i, us[i])                          # (M, m, d, m)
        drv = (np.einsum("pml,pm->pl", bx, psi)
               + np.einsum("pmjl,pmj->pl", sx, K_i)
               + fx(x_i, us[i]))
        p_paths[:, i, :] = psi + dt_i * drv
    return AdjointSolution(times=times, p=p_paths.mean(axis=0),
                           K=K_paths.mean(axis=0), which=which,
                           backend="regression", p_paths=p_paths, K_paths=K_paths)


# --------------------------------------------------------------------------
# Second order
# --------------------------------------------------------------------------

def _hxx_values(spec, which, x, u, p, K):
    """x-Hessian of the Hamiltonian at fixed (u, p, K): driver_xx plus the
    second-derivative couplings of the dynamics, pathwise (M, m, m)."""
    out = _driver_xx(spec, which)(x, u).copy()
    if not spec.b_xx.is_zero():
        out += np.einsum("pa,palr->plr", p, spec.b_xx(x, u))
    if not spec.sigma_xx.is_zero():
        out += np.einsum("paj,pajlr->plr", K, spec.sigma_xx(x, u))
    return out


def solve_second_adjoint(spec: ProblemSpec, ensemble: PathEnsemble,
                         control: ControlProcess, tau: float,
                         first: AdjointSolution, which: str = "cost",
                         backend: str = "auto",
                         basis_degree: int = 3) -> SecondOrderAdjoint:
    """Solve the second-order backward matrix system on [0, tau]; the
    supplied first-order solution feeds the Hessian driver."""
    _check_which(which)
    if first.which != which:
        raise ValueError(f"first-order solution is for {first.which!r}, not {which!r}")
    backend = _resolve_backend(spec, backend)
    times, nodes = _restricted_times(ensemble, tau)
    xs = _states_on(ensemble, times)
    us = _controls_on(control, times)
    n = len(times)
    m, d = spec.m, spec.d
    M = ensemble.n_paths

    terminal = _terminal_second(spec, which, xs[:, -1, :])    # (M, m, m)

    if backend == "ode":
        P = np.empty((n, m, m))
        P[-1] = terminal.mean(axis=0)
        for i in range(n - 2, -1, -1):
            dt_i = times[i + 1] - times[i]
            x_i, u_i = xs[:, i, :], us[i]
            bx = spec.b_x(x_i, u_i).mean(axis=0)
            sx = spec.sigma_x(x_i, u_i).mean(axis=0)          # (m, d, m)
            p_mean, K_mean = first.at(times[i + 1])
            hxx = _hxx_values(spec, which, x_i, u_i,
                              np.broadcast_to(p_mean, (M, m)),
                              np.broadcast_to(K_mean, (M, m, d))).mean(axis=0)
            Pn = P[i + 1]
            drift = bx.T @ Pn + Pn @ bx + hxx
            for j in range(d):
                sj = sx[:, j, :]                              # (m, m) rows d/dx
                drift = drift + sj.T @ Pn @ sj
            P[i] = Pn + dt_i * drift
        Q = np.zeros((n, d, m, m))
        return SecondOrderAdjoint(times=times, P=P, Q=Q, which=which, backend="ode")

    powers = _monomial_powers(m, basis_degree)
    P_paths = np.empty((M, n, m, m))
    P_paths[:, -1] = terminal
    Q = np.zeros((n, d, m, m))
    for i in range(n - 2, -1, -1):
        dt_i = float(times[i + 1] - times[i])
        x_i, u_i = xs[:, i, :], us[i]
        basis = _basis_matrix(x_i, powers)
        P_next = P_paths[:, i + 1].reshape(M, m * m)
        psi = _project(basis, P_next).reshape(M, m, m)
        dW = ensemble.increments[:, min(nodes[i], ensemble.grid.n_steps - 1), :]
        q_targets = (P_next[:, None, :] * dW[:, :, None]).reshape(M, d * m * m)
        Q_i = _project(basis, q_targets).reshape(M, d, m, m) / ensemble.grid.dt
        Q[i] = Q_i.mean(axis=0)
        if first.p_paths is not None:
            p_i, K_i = first.p_paths[:, i + 1], first.K_paths[:, i + 1]
        else:
            p_mean, K_mean = first.at(times[i + 1])
            p_i = np.broadcast_to(p_mean, (M, m))
            K_i = np.broadcast_to(K_mean, (M, m, d))
        hxx = _hxx_values(spec, which, x_i, u_i, p_i, K_i)
        bx = spec.b_x(x_i, u_i)                               # (M, m, m)
        sx = spec.sigma_x(x_i, u_i)                           # (M, m, d, m)
        drift = (np.einsum("pml,pmr->plr", bx, psi)
                 + np.einsum("plm,pmr->plr", psi, bx)
                 + np.einsum("pmjl,pmn,pnjr->plr", sx, psi, sx)
                 + np.einsum("pmjl,pjmr->plr", sx, Q_i)
                 + np.einsum("pjlm,pmjr->plr", Q_i, sx)
                 + hxx)
        P_paths[:, i] = psi + dt_i * drift
    return SecondOrderAdjoint(times=times, P=P_paths.mean(axis=0), Q=Q,
                              which=which, backend="regression", P_paths=P_paths)


def solve_all_adjoints(spec, ensemble, control, tau, backend="auto",
                       basis_degree: int = 3) -> AdjointBundle:
    """All four systems along one candidate pair."""
    kw = dict(backend=backend, basis_degree=basis_degree)
    cp = solve_first_adjoint(spec, ensemble, control, tau, "cost", **kw)
    cP = solve_second_adjoint(spec, ensemble, control, tau, cp, "cost", **kw)
    kp = solve_first_adjoint(spec, ensemble, control, tau, "constraint", **kw)
    kP = solve_second_adjoint(spec, ensemble, control, tau, kp, "constraint", **kw)
    return AdjointBundle(cost_first=cp, cost_second=cP,
                         constraint_first=kp, constraint_second=kP, tau=tau)


# --------------------------------------------------------------------------
# Hamiltonians and the tau-sensitivity kernels
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class HamiltonianEval:
    """H decomposed as running + <p, b> + sum_j <K_j, sigma^j>; the value
    is the literal sum of the three parts."""

    value: np.ndarray
    running: np.ndarray
    drift_pairing: np.ndarray
    noise_pairing: np.ndarray


def hamiltonian(spec: ProblemSpec, x, u, p, K, which: str = "cost") -> HamiltonianEval:
    """Evaluate H (which='cost', running term f) or H0 (which='constraint',
    running term l) at state x, control u, costate (p, K).  Vectorizes over
    a leading path axis."""
    _check_which(which)
    x = np.atleast_2d(np.asarray(x, dtype=float))
    u = np.asarray(u, dtype=float)
    p = np.asarray(p, dtype=float)
    K = np.asarray(K, dtype=float)
    if p.ndim == 1:
        p = np.broadcast_to(p, (x.shape[0], spec.m))
    if K.ndim == 2:
        K = np.broadcast_to(K, (x.shape[0], spec.m, spec.d))
    running_fn = spec.f if which == "cost" else spec.l
    running = running_fn(x, u)
    drift = np.einsum("pm,pm->p", p, spec.b(x, u))
    noise = np.einsum("pmj,pmj->p", K, spec.sigma(x, u))
    return HamiltonianEval(value=running + drift + noise, running=running,
                           drift_pairing=drift, noise_pairing=noise)


def k_tau(spec: ProblemSpec, x, u_bar, u, p0, K0, P0) -> np.ndarray:
    """Sensitivity kernel of the terminal time to a spike at the state x:

        k = H0(x, u) - H0(x, u_bar)
            + 1/2 tr[(sigma(x,u) - sigma(x,u_bar))' P0 (sigma(x,u) - sigma(x,u_bar))]

    evaluated pathwise; callers average for E[k].  Exactly zero when
    u equals u_bar.
    """
    h_spike = hamiltonian(spec, x, u, p0, K0, which="constraint")
    h_base = hamiltonian(spec, x, u_bar, p0, K0, which="constraint")
    x2 = np.atleast_2d(np.asarray(x, dtype=float))
    dsig = spec.sigma(x2, u) - spec.sigma(x2, u_bar)          # (M, m, d)
    P0 = np.asarray(P0, dtype=float)
    if P0.ndim == 2:
        P0 = np.broadcast_to(P0, (x2.shape[0], spec.m, spec.m))
    quad = 0.5 * np.einsum("pmj,pmn,pnj->p", dsig, P0, dsig)
    return h_spike.value - h_base.value + quad


def r_tau(spec: ProblemSpec, x_tau, u_tau, y1=None, y2=None) -> float:
    """Terminal-shift correction

        R = E[ f(X(tau), u(tau)) + g_x(X(tau))' B + 1/2 tr(g_xx(X(tau)) A) ]

    with B = b + b_x (y1+y2) + 1/2 b_xx y1 y1 and A = sum_j sigma^j sigma^j'
    + sum_j (sigma_x^j y1)(sigma_x^j y1)'.  The default y1 = y2 = 0 is the
    vanishing-spike-width limit, where B = b and A is the diffusion
    quadratic variation; pass the variational responses to evaluate the
    finite-width form.
    """
    x = np.atleast_2d(np.asarray(x_tau, dtype=float))
    M, m = x.shape
    y1 = np.zeros((M, m)) if y1 is None else np.atleast_2d(np.asarray(y1, dtype=float))
    y2 = np.zeros((M, m)) if y2 is None else np.atleast_2d(np.asarray(y2, dtype=float))
    x_shift = x + y1 + y2

    b = spec.b(x, u_tau)
    B = b.copy()
    if not np.all(y1 == 0.0) or not np.all(y2 == 0.0):
        B += np.einsum("pml,pl->pm", spec.b_x(x, u_tau), y1 + y2)
        if not spec.b_xx.is_zero():
            B += 0.5 * np.einsum("pmlr,pl,pr->pm", spec.b_xx(x, u_tau), y1, y1)
    sig = spec.sigma(x, u_tau)
    A = np.einsum("pmj,pnj->pmn", sig, sig)
    if not spec.sigma_x.is_zero() and not np.all(y1 == 0.0):
        sy = np.einsum("pmjl,pl->pmj", spec.sigma_x(x, u_tau), y1)
        A += np.einsum("pmj,pnj->pmn", sy, sy)

    total = spec.f(x_shift, u_tau)
    total += np.einsum("pm,pm->p", spec.g_x(x_shift), B)
    total += 0.5 * np.einsum("pmn,pmn->p", spec.g_xx(x_shift), A)
    return float(total.mean())
