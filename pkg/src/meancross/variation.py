"""Spike-variation responses and the terminal-time rate.

Given a base ensemble under the candidate control and a spiked control
(override value u on [tau, tau+eps]), the first- and second-order state
responses solve, pathwise along the base trajectories and with the same
Brownian increments,

  y1' = b_x y1 + (b(X,u_sp) - b(X,u))          (+ diffusion analogues dW)
  y2' = b_x y2 + 1/2 b_xx y1 y1 + (b_x(X,u_sp) - b_x(X,u)) y1   (+ dW terms)

so X_spiked ~ X + y1 + y2 with L2 error o(eps).  `moment_check` verifies
the scaling of that expansion on an eps ladder; `tau_rate_empirical`
measures (tau_base - tau_spiked)/eps by re-solving the crossing under
common random numbers, and `tau_rate_theoretical` evaluates the adjoint
formula E[k(tau)] / h(tau_base) for the same limit.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .adjoint import AdjointSolution, SecondOrderAdjoint, k_tau
from .model import ProblemSpec
from .simulate import (ControlProcess, PathEnsemble, TimeGrid,
                       simulate_ensemble, with_spike)
from .terminal import (CASE_NO_CROSSING, H_MIN, TerminalError,
                       constraint_rate, hitting_time, mean_constraint_curve)

__all__ = [
    "VariationalPair",
    "RateEstimate",
    "solve_variational",
    "moment_check",
    "tau_rate_empirical",
    "tau_rate_theoretical",
]


@dataclass(frozen=True)
class VariationalPair:
    """First/second-order responses on the full grid, pathwise."""

    times: np.ndarray
    y1: np.ndarray            # (M, N+1, m)
    y2: np.ndarray            # (M, N+1, m)
    spike_control: ControlProcess

    def at(self, t: float) -> tuple[np.ndarray, np.ndarray]:
        idx = int(round(t / (self.times[1] - self.times[0])))
        idx = min(max(idx, 0), len(self.times) - 1)
        return self.y1[:, idx, :], self.y2[:, idx, :]


@dataclass(frozen=True)
class RateEstimate:
    """Empirical terminal-time slopes on an eps ladder plus the adjoint
    prediction.  `branches` records, per eps, whether the spiked curve
    still crossed before the horizon ("rate") or not ("zero")."""

    tau_base: float
    case: str
    epsilons: tuple
    tau_eps: tuple
    slopes: tuple
    branches: tuple
    extrapolated: float        # Richardson limit of the slopes
    lemma2_gap: float          # max |tau_base - tau_eps|, -> 0 with eps
    h_at_tau: float
    theoretical: float | None = None
    theoretical_zero_adjoint: float | None = None

    def with_theory(self, full: float, zero: float) -> "RateEstimate":
        return replace(self, theoretical=full, theoretical_zero_adjoint=zero)


def solve_variational(spec: ProblemSpec, ensemble: PathEnsemble,
                      spike_control: ControlProcess) -> VariationalPair:
    """Integrate both response equations forward along the base paths."""
    base = ensemble.control
    if spike_control.grid != ensemble.grid:
        raise ValueError("spike control lives on a different grid")
    grid = ensemble.grid
    M, m, d = ensemble.n_paths, spec.m, spec.d
    N = grid.n_steps
    dt = grid.dt
    u_base = base.effective_values()
    u_spike = spike_control.effective_values()
    diff_steps = np.flatnonzero(np.any(u_base != u_spike, axis=1))
    first_active = int(diff_steps[0]) if diff_steps.size else N

    y1 = np.zeros((M, N + 1, m))
    y2 = np.zeros((M, N + 1, m))
    have_bx = not spec.b_x.is_zero()
    have_sx = not spec.sigma_x.is_zero()
    have_bxx = not spec.b_xx.is_zero()
    have_sxx = not spec.sigma_xx.is_zero()

    a1 = np.zeros((M, m))
    a2 = np.zeros((M, m))
    for i in range(first_active, N):
        x = ensemble.states[:, i, :]
        dW = ensemble.increments[:, i, :]
        ub, us = u_base[i], u_spike[i]
        spiked_step = bool(np.any(ub != us))

        d1 = np.zeros((M, m))
        d2 = np.zeros((M, m))
        if have_bx:
            bx = spec.b_x(x, ub)
            d1 += np.einsum("pml,pl->pm", bx, a1)
            d2 += np.einsum("pml,pl->pm", bx, a2)
        if have_bxx:
            d2 += 0.5 * np.einsum("pmlr,pl,pr->pm", spec.b_xx(x, ub), a1, a1)
        if spiked_step:
            d1 += spec.b(x, us) - spec.b(x, ub)
            if have_bx:
                dbx = spec.b_x(x, us) - spec.b_x(x, ub)
                d2 += np.einsum("pml,pl->pm", dbx, a1)

        s1 = np.zeros((M, m))
        s2 = np.zeros((M, m))
        if have_sx:
            sx = spec.sigma_x(x, ub)
            s1 += np.einsum("pmjl,pl,pj->pm", sx, a1, dW)
            s2 += np.einsum("pmjl,pl,pj->pm", sx, a2, dW)
        if have_sxx:
            s2 += 0.5 * np.einsum("pmjlr,pl,pr,pj->pm", spec.sigma_xx(x, ub), a1, a1, dW)
        if spiked_step:
            dsig = spec.sigma(x, us) - spec.sigma(x, ub)
            s1 += np.einsum("pmj,pj->pm", dsig, dW)
            if have_sx:
                dsx = spec.sigma_x(x, us) - spec.sigma_x(x, ub)
                s2 += np.einsum("pmjl,pl,pj->pm", dsx, a1, dW)

        a1 = a1 + d1 * dt + s1
        a2 = a2 + d2 * dt + s2
        y1[:, i + 1, :] = a1
        y2[:, i + 1, :] = a2
    return VariationalPair(times=grid.times, y1=y1, y2=y2,
                           spike_control=spike_control)


def moment_check(spec: ProblemSpec, base_control: ControlProcess,
                 u, tau: float, eps_ladder, grid: TimeGrid, n_paths: int,
                 seed: int, workers: int = 1) -> list[dict]:
    """Normalized moment ratios of the expansion error and responses.

    Per eps: eps^-2 sup_t E|X_sp - X - y1 - y2|^2, eps^-1 sup E|y1|^2,
    eps^-2 sup E|y2|^2, eps^-2 sup E|y1|^4, eps^-4 sup E|y2|^4, all under
    common random numbers.  Bounded ratios down the ladder are the
    expected behaviour; blow-up flags a broken expansion.
    """
    eps_ladder = list(eps_ladder)
    if any(e2 >= e1 for e1, e2 in zip(eps_ladder, eps_ladder[1:])):
        raise ValueError("eps ladder must be strictly decreasing")
    base = simulate_ensemble(spec, base_control, grid, n_paths, seed)

    def one(eps: float) -> dict:
        spiked_control = with_spike(base_control, u, tau, eps)
        spiked = simulate_ensemble(spec, spiked_control, grid, n_paths, seed,
                                   increments=base.increments)
        pair = solve_variational(spec, base, spiked_control)
        resid = spiked.states - base.states - pair.y1 - pair.y2
        sq = lambda v: np.square(v).sum(axis=2)        # |.|^2 over components
        sup_mean = lambda v: float(v.mean(axis=0).max())
        e_res2 = sup_mean(sq(resid))
        e_y12 = sup_mean(sq(pair.y1))
        e_y22 = sup_mean(sq(pair.y2))
        e_y14 = sup_mean(sq(pair.y1) ** 2)
        e_y24 = sup_mean(sq(pair.y2) ** 2)
        return {
            "eps": eps,
            "resid2_over_eps2": e_res2 / eps ** 2,
            "y1_2_over_eps": e_y12 / eps,
            "y2_2_over_eps2": e_y22 / eps ** 2,
            "y1_4_over_eps2": e_y14 / eps ** 2,
            "y2_4_over_eps4": e_y24 / eps ** 4,
        }

    if workers > 1 and len(eps_ladder) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(one, eps_ladder))
    return [one(e) for e in eps_ladder]


def tau_rate_empirical(spec: ProblemSpec, base_control: ControlProcess,
                       u, tau_spike: float, eps_ladder, grid: TimeGrid,
                       n_paths: int, seed: int, workers: int = 1,
                       h_min: float = H_MIN) -> RateEstimate:
    """Slopes (tau_base - tau_eps)/eps down the ladder, Richardson limit.

    The no-crossing regime short-circuits: every spiked terminal time
    equals the horizon, and the rate is identically zero.
    """
    eps_ladder = list(eps_ladder)
    base = simulate_ensemble(spec, base_control, grid, n_paths, seed)
    curve = mean_constraint_curve(spec, base)
    est = hitting_time(curve, spec.alpha, spec.T)
    rate = constraint_rate(spec, base)
    h_tau = rate.at(est.tau)

    if est.case == CASE_NO_CROSSING:
        return RateEstimate(tau_base=est.tau, case=est.case, epsilons=(),
                            tau_eps=(), slopes=(), branches=(),
                            extrapolated=0.0, lemma2_gap=0.0, h_at_tau=h_tau)

    if abs(h_tau) < h_min:
        raise TerminalError(
            f"crossing rate h(tau)={h_tau:.3g} below h_min={h_min:g}; "
            "terminal-time slopes are unreliable")

    def one(eps: float):
        spiked_control = with_spike(base_control, u, tau_spike, eps)
        spiked = simulate_ensemble(spec, spiked_control, grid, n_paths, seed,
                                   increments=base.increments)
        s_est = hitting_time(mean_constraint_curve(spec, spiked),
                             spec.alpha, spec.T)
        branch = "zero" if s_est.case == CASE_NO_CROSSING else "rate"
        slope = (est.tau - s_est.tau) / eps
        return s_est.tau, slope, branch

    if workers > 1 and len(eps_ladder) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(one, eps_ladder))
    else:
        rows = [one(e) for e in eps_ladder]

    tau_eps = tuple(r[0] for r in rows)
    slopes = tuple(r[1] for r in rows)
    branches = tuple(r[2] for r in rows)
    rate_mask = [b == "rate" for b in branches]
    kept = [(e, s) for e, s, keep in zip(eps_ladder, slopes, rate_mask) if keep]
    if not kept:
        extrapolated = 0.0
    elif len(kept) == 1:
        extrapolated = kept[0][1]
    else:
        es = np.array([e for e, _ in kept])
        ss = np.array([s for _, s in kept])
        extrapolated = float(np.polyfit(es, ss, 1)[1])   # intercept at eps -> 0
    gap = max((abs(est.tau - te) for te in tau_eps), default=0.0)
    return RateEstimate(tau_base=est.tau, case=est.case,
                        epsilons=tuple(eps_ladder), tau_eps=tau_eps,
                        slopes=slopes, branches=branches,
                        extrapolated=extrapolated, lemma2_gap=gap,
                        h_at_tau=h_tau)


def tau_rate_theoretical(spec: ProblemSpec, ensemble: PathEnsemble,
                         constraint_first: AdjointSolution,
                         constraint_second: SecondOrderAdjoint,
                         tau_spike: float, u, h_at_tau_base: float,
                         h_min: float = H_MIN,
                         zero_adjoint: bool = False) -> float:
    """Adjoint prediction E[k(tau_spike)] / h(tau_base).

    With zero_adjoint=True the costates are replaced by zero, reducing k
    to the bare running-term difference l(x,u) - l(x,u_base); the two
    variants coincide at tau_spike = tau_base, where p0 vanishes, and are
    reported side by side.
    """
    if abs(h_at_tau_base) < h_min:
        raise TerminalError(
            f"crossing rate h(tau)={h_at_tau_base:.3g} below h_min={h_min:g}")
    x = ensemble.state_at(tau_spike)
    M = ensemble.n_paths
    u_bar = ensemble.control.value_at_step(
        int(tau_spike / ensemble.grid.dt))
    if zero_adjoint:
        p0 = np.zeros((M, spec.m))
        K0 = np.zeros((M, spec.m, spec.d))
        P0 = np.zeros((M, spec.m, spec.m))
    else:
        p0, K0 = constraint_first.paths_at(tau_spike, M)
        P0 = constraint_second.paths_at(tau_spike, M)
    k = k_tau(spec, x, u_bar, np.asarray(u, dtype=float), p0, K0, P0)
    return float(k.mean()) / h_at_tau_base
