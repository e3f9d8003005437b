"""Mean-constraint curve, crossing rate, and the varying terminal time.

The terminal time is tau = inf{ t : E[phi(X(t))] >= alpha } capped at T.
It is deterministic (defined through an expectation), so the estimators
here work on the ensemble mean curve.  By Ito's formula the curve obeys

    E[phi(X(s))] = phi(x0) + integral_0^s h(t) dt,
    h(t) = E[ phi_x(X)' b(X,u) + 1/2 sum_j sigma_j' phi_xx(X) sigma_j ],

which is recomputed alongside the direct sample mean as a consistency
check (`lemma1_mean` in the curve, integrated with the trapezoid rule).

Three regimes are distinguished and tagged on the estimate:
  interior    - the curve crosses alpha strictly before T,
  at-horizon  - the first crossing falls within one grid step of T,
  no-crossing - the curve stays below alpha - delta everywhere (tau = T).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .model import ProblemSpec
from .simulate import ControlProcess, PathEnsemble

__all__ = [
    "CASE_INTERIOR",
    "CASE_AT_HORIZON",
    "CASE_NO_CROSSING",
    "ConstraintRate",
    "MeanCurve",
    "TerminalTimeEstimate",
    "TerminalError",
    "constraint_rate",
    "mean_constraint_curve",
    "hitting_time",
    "classify_case",
    "H_MIN",
]

CASE_INTERIOR = "interior"
CASE_AT_HORIZON = "at-horizon"
CASE_NO_CROSSING = "no-crossing"

# below this |h|, quantities divided by the crossing rate are unreliable
H_MIN = 1e-6


class TerminalError(RuntimeError):
    pass


@dataclass(frozen=True)
class ConstraintRate:
    """Per-node estimate of the crossing rate h(t)."""

    times: np.ndarray
    values: np.ndarray
    se: np.ndarray

    def at(self, t: float) -> float:
        return float(np.interp(t, self.times, self.values))


@dataclass(frozen=True)
class MeanCurve:
    """Direct mean of phi(X(t)) and its integral-identity twin."""

    times: np.ndarray
    mean: np.ndarray
    se: np.ndarray
    lemma1_mean: np.ndarray
    lemma1_se: np.ndarray

    def at(self, t: float) -> float:
        return float(np.interp(t, self.times, self.mean))

    def combined_se(self) -> np.ndarray:
        return np.sqrt(self.se ** 2 + self.lemma1_se ** 2)


@dataclass(frozen=True)
class TerminalTimeEstimate:
    tau: float
    case: str
    se: float                   # crossing standard error, time units
    curve_value: float          # mean curve at tau
    margin: float               # |curve(T) - alpha|
    se_at_horizon: float        # SE entering the boundary decision
    graze: bool = False         # curve touched alpha within delta, no strict crossing


def _valid_states(ensemble: PathEnsemble) -> np.ndarray:
    if ensemble.invalid.any():
        return ensemble.states[~ensemble.invalid]
    return ensemble.states


def _node_controls(control: ControlProcess) -> np.ndarray:
    """Control value attached to each node; the last node inherits the
    final interval's value."""
    u_eff = control.effective_values()
    return np.concatenate([u_eff, u_eff[-1:]], axis=0)


def _mean_se(values: np.ndarray, deterministic: bool):
    """Mean/SE over the path axis of (M, N+1) samples."""
    n = values.shape[0]
    mean = values.mean(axis=0)
    if deterministic:
        se = np.zeros_like(mean)
    elif n == 1:
        se = np.full_like(mean, np.nan)
    else:
        se = values.std(axis=0, ddof=1) / math.sqrt(n)
    return mean, se


def constraint_rate(spec: ProblemSpec, ensemble: PathEnsemble,
                    control: ControlProcess | None = None) -> ConstraintRate:
    """Monte Carlo estimate of h(t) = E[l(X(t), u(t))] at every node."""
    control = control or ensemble.control
    states = _valid_states(ensemble)
    u_nodes = _node_controls(control)                    # (N+1, k)
    vals = spec.l(states, u_nodes[None, :, :])           # (M, N+1)
    if not np.all(np.isfinite(vals)):
        raise TerminalError("constraint-rate integrand not finite on the ensemble")
    mean, se = _mean_se(vals, ensemble.deterministic)
    return ConstraintRate(times=ensemble.times, values=mean, se=se)


def mean_constraint_curve(spec: ProblemSpec, ensemble: PathEnsemble) -> MeanCurve:
    """Direct sample-mean curve of phi(X(t)), with the integral identity
    phi(x0) + cumulative-trapezoid of h computed alongside."""
    states = _valid_states(ensemble)
    phi_vals = spec.phi(states)                          # (M, N+1)
    mean, se = _mean_se(phi_vals, ensemble.deterministic)

    u_nodes = _node_controls(ensemble.control)
    l_vals = spec.l(states, u_nodes[None, :, :])
    dt = ensemble.grid.dt
    cum = np.cumsum(l_vals, axis=1)
    cum = dt * (cum - 0.5 * (l_vals + l_vals[:, :1]))    # trapezoid from 0 to t_i
    phi0 = float(spec.phi(spec.x0[None, :])[0])
    lemma1 = phi0 + cum
    l1_mean, l1_se = _mean_se(lemma1, ensemble.deterministic)
    return MeanCurve(times=ensemble.times, mean=mean, se=se,
                     lemma1_mean=l1_mean, lemma1_se=l1_se)


def hitting_time(curve: MeanCurve, alpha: float, T: float) -> TerminalTimeEstimate:
    """First time the mean curve reaches alpha, capped at T.

    The crossing is located by scanning nodes and interpolating linearly
    within the bracketing step (the curve is C1: it integrates h).  The
    boundary band delta = max(3 SE(T), 1e-9 |alpha|, one-step curve
    variation at T) absorbs sampling noise and discretization bias when
    deciding between a crossing at the horizon and no crossing at all.
    """
    c, se, times = curve.mean, curve.se, curve.times
    if not np.all(np.isfinite(c)):
        raise TerminalError("mean curve contains non-finite values")
    dt = times[1] - times[0]
    se_T = 0.0 if math.isnan(se[-1]) else float(se[-1])
    delta = max(3.0 * se_T, 1e-9 * abs(alpha), abs(float(c[-1] - c[-2])))
    margin = abs(float(c[-1]) - alpha)

    above = np.flatnonzero(c >= alpha)
    if above.size:
        i = int(above[0])
        if i == 0:
            tau, slope = float(times[0]), math.inf
        else:
            rise = float(c[i] - c[i - 1])
            frac = (alpha - float(c[i - 1])) / rise if rise > 0 else 1.0
            tau = float(times[i - 1]) + frac * dt
            slope = rise / dt
        se_vals = [v for v in (se[max(i - 1, 0)], se[i]) if not math.isnan(v)]
        se_tau = (max(se_vals) / abs(slope)) if (se_vals and slope) else 0.0
        case = CASE_AT_HORIZON if tau >= T - dt else CASE_INTERIOR
        return TerminalTimeEstimate(tau=tau, case=case, se=float(se_tau),
                                    curve_value=curve.at(tau), margin=margin,
                                    se_at_horizon=se_T)

    touch = np.flatnonzero(c >= alpha - delta)
    if touch.size:
        i = int(touch[0])
        tau = float(times[i])
        if tau >= T - dt:
            return TerminalTimeEstimate(tau=T, case=CASE_AT_HORIZON, se=se_T,
                                        curve_value=float(c[-1]), margin=margin,
                                        se_at_horizon=se_T)
        # tangential touch in the interior: first-touch time, flagged
        return TerminalTimeEstimate(tau=tau, case=CASE_INTERIOR, se=se_T,
                                    curve_value=float(c[i]), margin=margin,
                                    se_at_horizon=se_T, graze=True)

    return TerminalTimeEstimate(tau=float(T), case=CASE_NO_CROSSING, se=0.0,
                                curve_value=float(c[-1]), margin=margin,
                                se_at_horizon=se_T)


def classify_case(estimate: TerminalTimeEstimate,
                  rate: ConstraintRate | None = None,
                  h_min: float = H_MIN) -> dict:
    """Deterministic case tag plus the numbers the decision rested on.

    When the constraint rate is supplied, a vanishing |h(tau)| is an
    error: every tau-sensitivity quantity downstream divides by it.
    """
    diag = {
        "case": estimate.case,
        "tau": estimate.tau,
        "margin": estimate.margin,
        "se_at_horizon": estimate.se_at_horizon,
        "graze": estimate.graze,
    }
    if rate is not None:
        h_tau = rate.at(estimate.tau)
        diag["h_at_tau"] = h_tau
        if estimate.case != CASE_NO_CROSSING and abs(h_tau) < h_min:
            raise TerminalError(
                f"crossing rate h(tau)={h_tau:.3g} is numerically zero "
                f"(|h| < {h_min:g}): the terminal-time sensitivity divides by it")
    return diag
