"""Optimality-condition scan and the brute-force cost oracle.

For a candidate pair (control, trajectory) with terminal time tau, the
first-order necessary condition states that for every admissible control
value u and every time point:

    H(X(t), u, p(t), K(t)) - H(X(t), u_bar(t), p(t), K(t))
      + k(t)/h(tau) * R(tau)
      + 1/2 tr[(sigma(X,u) - sigma(X,u_bar))' P(t) (sigma(X,u) - sigma(X,u_bar))]
      >= 0

with the terminal-shift term k/h * R dropped when the mean curve never
reaches the threshold, and with both variants (with and without the
shift term) reported when the crossing happens exactly at the horizon,
where the theory only pins down one of the two alternatives.

The scan evaluates the left-hand side on a (tau, u) grid, pathwise, and
reports the worst value, its location, the noise-aware verdict, and the
fraction of paths violating the bound (the inequality is an a.s.
statement; a mean-only check would be weaker).  A scan can falsify the
condition, not prove it; reports say so.

`brute_force_search` is the independent oracle: exhaustive cost
evaluation over all piecewise-constant controls on a coarse interval
grid under common random numbers.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from itertools import product

import numpy as np

from .adjoint import AdjointBundle, hamiltonian, k_tau, r_tau
from .model import ProblemSpec
from .rng import normal_increments
from .simulate import ControlProcess, PathEnsemble, TimeGrid, simulate_ensemble
from .terminal import (CASE_AT_HORIZON, CASE_INTERIOR, CASE_NO_CROSSING,
                       H_MIN, ConstraintRate, TerminalError,
                       TerminalTimeEstimate, hitting_time, mean_constraint_curve)

__all__ = [
    "SMPReport",
    "BruteForceResult",
    "cost_functional",
    "check_smp",
    "brute_force_search",
]

MAX_BRUTE_CONTROLS = 2 ** 20
VIOLATION_FRACTION_LIMIT = 1e-3

TRACE_NOTE = ("diffusion difference uses the scanned control value u in both "
              "factors of the quadratic trace term")
SCAN_NOTE = ("grid scan over (tau, u) is a falsification device, not a proof "
             "of the inequality for all admissible controls")


@dataclass(frozen=True)
class SMPReport:
    case: str
    tau: float
    variant: str                  # "with-shift" | "without-shift"
    taus: np.ndarray              # scanned tau grid
    us: np.ndarray                # scanned control points (n_u, k)
    lhs: np.ndarray               # (n_tau, n_u) mean left-hand side
    se: np.ndarray                # (n_tau, n_u)
    violation_fraction: np.ndarray  # (n_tau, n_u) pathwise frac below -tol
    min_lhs: float
    argmin_tau: float
    argmin_u: np.ndarray
    tol: float
    verdict: bool
    worst_violation_fraction: float
    notes: tuple


@dataclass(frozen=True)
class BruteForceResult:
    n_intervals: int
    controls: list                # tuples of per-interval control tuples
    costs: np.ndarray
    cost_se: np.ndarray
    taus: np.ndarray
    best_index: int
    best_control: tuple
    best_cost: float
    candidate_cost: float | None
    margin: float | None          # candidate_cost - best_cost


def cost_functional(spec: ProblemSpec, control: ControlProcess,
                    ensemble: PathEnsemble, tau: float) -> tuple[float, float]:
    """Monte Carlo cost: running integral up to tau plus terminal cost.

    The running part is a left-rule sum over full steps with an exact
    partial final step; the terminal state at tau is interpolated.
    """
    grid = ensemble.grid
    dt = grid.dt
    tau = min(max(tau, 0.0), grid.T)
    j = min(int(math.floor(tau / dt + 1e-12)), grid.n_steps)
    u_eff = control.effective_values()
    total = np.zeros(ensemble.n_paths)
    if j > 0:
        f_vals = spec.f(ensemble.states[:, :j, :], u_eff[None, :j, :])
        total += f_vals.sum(axis=1) * dt
    rem = tau - j * dt
    if rem > 1e-14 and j < grid.n_steps:
        total += spec.f(ensemble.states[:, j, :], u_eff[j]) * rem
    total += spec.g(ensemble.state_at(tau))
    J = float(total.mean())
    if ensemble.deterministic:
        return J, 0.0
    if ensemble.n_paths == 1:
        return J, float("nan")
    return J, float(total.std(ddof=1) / math.sqrt(ensemble.n_paths))


def _variant_list(case: str) -> list[str]:
    if case == CASE_INTERIOR:
        return ["with-shift"]
    if case == CASE_AT_HORIZON:
        return ["with-shift", "without-shift"]
    return ["without-shift"]


def check_smp(spec: ProblemSpec, ensemble: PathEnsemble, control: ControlProcess,
              estimate: TerminalTimeEstimate, adjoints: AdjointBundle,
              rate: ConstraintRate, tau_grid_size: int = 64,
              tol_base: float = 1e-6, lattice: int = 32,
              h_min: float = H_MIN) -> list[SMPReport]:
    """Scan the necessary-condition left-hand side on a (tau, u) grid.

    Returns one report per inequality variant required by the case tag.
    The pass band is tol = tol_base + 3 * SE(LHS) at the minimizing cell.
    """
    tau_bar = estimate.tau
    case = estimate.case
    taus = np.linspace(0.0, tau_bar, tau_grid_size)
    us = spec.U.evaluation_points(per_axis=lattice)
    M = ensemble.n_paths
    variants = _variant_list(case)

    h_tau = rate.at(tau_bar)
    R = None
    if "with-shift" in variants:
        if abs(h_tau) < h_min:
            raise TerminalError(
                f"crossing rate h(tau)={h_tau:.3g} below h_min={h_min:g}; "
                "the terminal-shift term divides by it")
        u_at_tau = control.value_at_step(int(tau_bar / ensemble.grid.dt))
        R = r_tau(spec, ensemble.state_at(tau_bar), u_at_tau)

    n_t, n_u = len(taus), len(us)
    mean = {v: np.empty((n_t, n_u)) for v in variants}
    se = {v: np.empty((n_t, n_u)) for v in variants}
    frac = {v: np.empty((n_t, n_u)) for v in variants}

    for it, t in enumerate(taus):
        x = ensemble.state_at(float(t))
        u_bar = control.value_at_step(int(t / ensemble.grid.dt))
        p, K = adjoints.cost_first.paths_at(float(t), M)
        P = adjoints.cost_second.paths_at(float(t), M)
        p0, K0 = adjoints.constraint_first.paths_at(float(t), M)
        P0 = adjoints.constraint_second.paths_at(float(t), M)
        h_base = hamiltonian(spec, x, u_bar, p, K, which="cost")
        for iu, u in enumerate(us):
            h_u = hamiltonian(spec, x, u, p, K, which="cost")
            dsig = spec.sigma(x, u) - spec.sigma(x, u_bar)
            quad = 0.5 * np.einsum("pmj,pmn,pnj->p", dsig, P, dsig)
            base_lhs = h_u.value - h_base.value + quad
            rows = {}
            if "with-shift" in variants:
                k = k_tau(spec, x, u_bar, u, p0, K0, P0)
                rows["with-shift"] = base_lhs + (k / h_tau) * R
            if "without-shift" in variants:
                rows["without-shift"] = base_lhs
            for v, vals in rows.items():
                mu = float(vals.mean())
                s = 0.0 if (ensemble.deterministic or M == 1) \
                    else float(vals.std(ddof=1) / math.sqrt(M))
                mean[v][it, iu] = mu
                se[v][it, iu] = s
                tol_cell = tol_base + 3.0 * s
                frac[v][it, iu] = float((vals < -tol_cell).mean())

    reports = []
    notes = (TRACE_NOTE, SCAN_NOTE) if case != CASE_INTERIOR else (SCAN_NOTE,)
    for v in variants:
        flat = int(np.argmin(mean[v]))
        it, iu = np.unravel_index(flat, mean[v].shape)
        tol = tol_base + 3.0 * float(se[v][it, iu])
        min_lhs = float(mean[v][it, iu])
        worst_frac = float(frac[v].max())
        verdict = (min_lhs >= -tol) and (worst_frac <= VIOLATION_FRACTION_LIMIT)
        reports.append(SMPReport(
            case=case, tau=tau_bar, variant=v, taus=taus, us=us,
            lhs=mean[v], se=se[v], violation_fraction=frac[v],
            min_lhs=min_lhs, argmin_tau=float(taus[it]), argmin_u=us[iu],
            tol=tol, verdict=verdict, worst_violation_fraction=worst_frac,
            notes=notes))
    return reports


def brute_force_search(spec: ProblemSpec, n_intervals: int, grid: TimeGrid,
                       n_paths: int, seed: int, workers: int = 1,
                       lattice: int = 5,
                       candidate: ControlProcess | None = None) -> BruteForceResult:
    """Exhaustive cost minimization over piecewise-constant controls.

    All |U|^n_intervals controls (box domains are discretized to
    `lattice` points per axis) are costed under common random numbers;
    each control is stopped at its own mean-crossing time.  Ties resolve
    to the earliest control in enumeration order.
    """
    points = [tuple(p) for p in spec.U.evaluation_points(per_axis=lattice)]
    n_controls = len(points) ** n_intervals
    if n_controls > MAX_BRUTE_CONTROLS:
        raise ValueError(
            f"{len(points)}^{n_intervals} = {n_controls} controls exceeds "
            f"the enumeration budget {MAX_BRUTE_CONTROLS}")
    controls = list(product(points, repeat=n_intervals))
    increments = normal_increments(seed, n_paths, grid.n_steps, spec.d) \
        * math.sqrt(grid.dt)

    def evaluate(ctrl_values) -> tuple[float, float, float]:
        ctrl = ControlProcess.from_intervals(grid, np.array(ctrl_values), spec.U)
        ens = simulate_ensemble(spec, ctrl, grid, n_paths, seed,
                                increments=increments)
        curve = mean_constraint_curve(spec, ens)
        est = hitting_time(curve, spec.alpha, spec.T)
        J, J_se = cost_functional(spec, ctrl, ens, est.tau)
        return J, J_se, est.tau

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(evaluate, controls))
    else:
        rows = [evaluate(c) for c in controls]

    costs = np.array([r[0] for r in rows])
    cost_se = np.array([r[1] for r in rows])
    taus = np.array([r[2] for r in rows])
    best = int(np.argmin(costs))

    candidate_cost = margin = None
    if candidate is not None:
        ens = simulate_ensemble(spec, candidate, grid, n_paths, seed,
                                increments=increments)
        est = hitting_time(mean_constraint_curve(spec, ens), spec.alpha, spec.T)
        candidate_cost = cost_functional(spec, candidate, ens, est.tau)[0]
        margin = candidate_cost - float(costs[best])

    return BruteForceResult(
        n_intervals=n_intervals, controls=controls, costs=costs,
        cost_se=cost_se, taus=taus, best_index=best,
        best_control=controls[best], best_cost=float(costs[best]),
        candidate_cost=candidate_cost, margin=margin)
