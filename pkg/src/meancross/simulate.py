"""Forward simulation of the controlled state equation.

Euler-Maruyama on a uniform grid:

    X_{i+1} = X_i + b(X_i, u_i) dt + sigma(X_i, u_i) dW_i

with Brownian increments drawn from counter-based streams keyed by
(seed, path, step).  A spiked control and its base control simulated
under the same seed therefore share increments exactly (common random
numbers), so path differences are attributable to the control alone.

Noiseless problems (sigma identically zero) with a single path take a
pure-float inner loop; everything else is vectorized over paths, with
optional thread workers over disjoint path blocks.  Results are
bit-identical for any worker count.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from . import expr
from .model import Coefficient, ControlDomain, ProblemSpec
from .rng import normal_increments

__all__ = [
    "TimeGrid",
    "Spike",
    "ControlProcess",
    "PathEnsemble",
    "SimulationError",
    "with_spike",
    "simulate_ensemble",
    "estimate_expectation",
    "write_ensemble_csv",
]

MAX_INVALID_FRACTION = 1e-3


class SimulationError(RuntimeError):
    pass


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid 0 = t_0 < ... < t_N = T."""

    T: float
    n_steps: int

    def __post_init__(self):
        if self.n_steps < 2:
            raise ValueError("time grid needs at least 2 steps")
        if self.T <= 0:
            raise ValueError("horizon must be positive")

    @property
    def dt(self) -> float:
        return self.T / self.n_steps

    @property
    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.T, self.n_steps + 1)

    def index_of(self, t: float, tol: float = 1e-9) -> int:
        idx = round(t / self.dt)
        if not (0 <= idx <= self.n_steps) or abs(idx * self.dt - t) > tol * max(1.0, self.T):
            raise ValueError(f"t={t} is not a grid node")
        return idx


@dataclass(frozen=True)
class Spike:
    """Control override on [tau, tau + eps], snapped to whole grid steps."""

    u: np.ndarray
    tau: float                 # snapped start (a grid node)
    eps: float                 # snapped width (whole steps, clamped at T)
    tau_requested: float
    eps_requested: float
    start: int                 # first overridden step
    stop: int                  # one past the last overridden step

    @property
    def snapped(self) -> bool:
        return (self.tau != self.tau_requested) or (self.eps != self.eps_requested)


@dataclass(frozen=True)
class ControlProcess:
    """Piecewise-constant control on a grid, plus an optional spike."""

    grid: TimeGrid
    base: np.ndarray                  # (N, k)
    domain: ControlDomain
    spike: Spike | None = None

    def __post_init__(self):
        base = np.asarray(self.base, dtype=float)
        if base.ndim == 1:
            base = base[:, None]
        if base.shape[0] != self.grid.n_steps:
            raise ValueError("base control must give one value per grid step")
        base = np.ascontiguousarray(base)
        base.setflags(write=False)
        object.__setattr__(self, "base", base)
        for row in {tuple(v) for v in np.unique(base, axis=0)}:
            if not self.domain.contains(np.array(row)):
                raise ValueError(f"base control value {row} outside the control domain")

    @classmethod
    def constant(cls, grid: TimeGrid, u, domain: ControlDomain) -> "ControlProcess":
        u = np.atleast_1d(np.asarray(u, dtype=float))
        return cls(grid, np.tile(u, (grid.n_steps, 1)), domain)

    @classmethod
    def from_intervals(cls, grid: TimeGrid, values, domain: ControlDomain) -> "ControlProcess":
        """Piecewise-constant control on len(values) equal subintervals;
        the grid step count must be a multiple of the interval count."""
        values = np.atleast_2d(np.asarray(values, dtype=float).reshape(len(values), -1))
        n_int = values.shape[0]
        if grid.n_steps % n_int:
            raise ValueError(f"grid with {grid.n_steps} steps cannot hold "
                             f"{n_int} equal control intervals")
        rep = grid.n_steps // n_int
        return cls(grid, np.repeat(values, rep, axis=0), domain)

    def effective_values(self) -> np.ndarray:
        """Per-step control after applying the spike window, shape (N, k)."""
        if self.spike is None:
            return self.base
        out = self.base.copy()
        out[self.spike.start:self.spike.stop] = self.spike.u
        out.setflags(write=False)
        return out

    def value_at_step(self, i: int) -> np.ndarray:
        i = min(max(i, 0), self.grid.n_steps - 1)
        return self.effective_values()[i]


def with_spike(control: ControlProcess, u, tau: float, eps: float) -> ControlProcess:
    """Overlay the spike value `u` on [tau, tau + eps] (clamped at T).

    The window is snapped to whole grid steps, tau to the nearest node;
    the snap is recorded on the returned process for reporting.
    """
    grid = control.grid
    u = np.atleast_1d(np.asarray(u, dtype=float))
    if not control.domain.contains(u):
        raise ValueError(f"spike value {u.tolist()} outside the control domain")
    if not 0 <= tau < grid.T:
        raise ValueError(f"spike start tau={tau} must lie in [0, T)")
    if eps <= 0:
        raise ValueError("spike width eps must be positive")
    start = int(round(tau / grid.dt))
    start = min(start, grid.n_steps - 1)
    width = max(1, int(round(eps / grid.dt)))
    stop = min(start + width, grid.n_steps)
    spike = Spike(u=u, tau=start * grid.dt, eps=(stop - start) * grid.dt,
                  tau_requested=tau, eps_requested=eps, start=start, stop=stop)
    return replace(control, spike=spike)


@dataclass(frozen=True)
class PathEnsemble:
    """Simulated trajectories with their driving noise."""

    grid: TimeGrid
    n_paths: int
    states: np.ndarray        # (M, N+1, m)
    increments: np.ndarray    # (M, N, d), Brownian increments (already * sqrt(dt))
    seed: int
    control: ControlProcess
    deterministic: bool       # sigma identically zero
    invalid: np.ndarray       # (M,) bool, paths that hit a coefficient domain error

    @property
    def times(self) -> np.ndarray:
        return self.grid.times

    def state_at(self, t: float) -> np.ndarray:
        """Pathwise state at time t, linearly interpolated between nodes."""
        pos = t / self.grid.dt
        lo = min(int(math.floor(pos + 1e-12)), self.grid.n_steps)
        hi = min(lo + 1, self.grid.n_steps)
        w = pos - lo
        if w <= 1e-12 or lo == hi:
            return self.states[:, lo, :]
        return (1.0 - w) * self.states[:, lo, :] + w * self.states[:, hi, :]


# --------------------------------------------------------------------------
# Simulation
# --------------------------------------------------------------------------

def _euler_block(spec, u_eff, dt, states, increments, lo, hi):
    """Euler recursion for the path block [lo, hi); writes states in place."""
    n_steps = u_eff.shape[0]
    x = states[lo:hi, 0, :].copy()
    dW = increments[lo:hi]
    bad = np.zeros(hi - lo, dtype=bool)
    for i in range(n_steps):
        u = u_eff[i]
        drift = spec.b(x, u)
        sig = spec.sigma(x, u)
        x = x + drift * dt + np.einsum("pmd,pd->pm", sig, dW[:, i, :])
        vals_bad = ~np.isfinite(x).all(axis=1)
        if vals_bad.any():
            newly = vals_bad & ~bad
            bad |= vals_bad
            x[newly] = np.nan
        states[lo:hi, i + 1, :] = x
    return bad


def _euler_scalar(spec, u_eff, dt, states, increments):
    """Single-path noiseless fast loop (m = d = k = 1)."""
    b_fn = expr.compile_expr(spec.b.entries[0],
                             spec.state_vars + spec.control_vars, scalar=True)
    x = float(states[0, 0, 0])
    out = states[0, :, 0]
    try:
        for i in range(u_eff.shape[0]):
            x = x + b_fn(x, u_eff[i, 0]) * dt
            out[i + 1] = x
    except (ValueError, OverflowError, ZeroDivisionError):
        out[i + 1:] = np.nan
        return np.array([True])
    if not math.isfinite(x):
        return np.array([True])
    return np.zeros(1, dtype=bool)


def simulate_ensemble(spec: ProblemSpec, control: ControlProcess, grid: TimeGrid,
                      n_paths: int, seed: int, workers: int = 1,
                      increments: np.ndarray | None = None) -> PathEnsemble:
    """Simulate `n_paths` trajectories of the state equation under `control`.

    Deterministic in (seed, grid, n_paths, control); `workers` splits the
    path range across threads without changing any output bit.  Passing
    `increments` (from an ensemble with the same seed/grid/shape) skips
    regeneration; the values are identical either way.
    """
    if n_paths < 1:
        raise ValueError("need at least one path")
    if control.grid != grid:
        raise ValueError("control is defined on a different grid")
    m, d = spec.m, spec.d
    N = grid.n_steps
    dt = grid.dt
    if increments is None:
        increments = normal_increments(seed, n_paths, N, d) * math.sqrt(dt)
    elif increments.shape != (n_paths, N, d):
        raise ValueError("supplied increments have the wrong shape")
    increments.setflags(write=False)

    u_eff = control.effective_values()
    states = np.empty((n_paths, N + 1, m), dtype=np.float64)
    states[:, 0, :] = spec.x0
    deterministic = spec.sigma_is_zero()

    if deterministic and n_paths == 1 and m == 1 and spec.k == 1:
        invalid = _euler_scalar(spec, u_eff, dt, states, increments)
    elif workers <= 1 or n_paths < 2 * workers:
        invalid = _euler_block(spec, u_eff, dt, states, increments, 0, n_paths)
    else:
        bounds = np.linspace(0, n_paths, workers + 1).astype(int)
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(_euler_block, spec, u_eff, dt, states,
                                   increments, bounds[j], bounds[j + 1])
                       for j in range(workers)]
            invalid = np.concatenate([f.result() for f in futures])

    frac = invalid.mean()
    if frac > MAX_INVALID_FRACTION:
        raise SimulationError(
            f"{frac:.2%} of paths hit a coefficient domain error "
            f"(limit {MAX_INVALID_FRACTION:.2%})")
    states.setflags(write=False)
    return PathEnsemble(grid=grid, n_paths=n_paths, states=states,
                        increments=increments, seed=seed, control=control,
                        deterministic=deterministic, invalid=invalid)


def estimate_expectation(ensemble: PathEnsemble, functional: Coefficient,
                         t: float) -> tuple[float, float]:
    """Sample mean and standard error of functional(X(t)) at a grid node.

    With a single path the standard error is undefined and reported NaN.
    """
    idx = ensemble.grid.index_of(t)
    vals = functional(ensemble.states[:, idx, :])
    mean = float(vals.mean())
    if ensemble.n_paths == 1:
        return mean, float("nan")
    se = float(vals.std(ddof=1) / math.sqrt(ensemble.n_paths))
    return mean, se


def write_ensemble_csv(ensemble: PathEnsemble, path, max_paths: int | None = None):
    """Dump trajectories as (path, step, t, x_1..x_m) rows, header mandatory."""
    m = ensemble.states.shape[2]
    times = ensemble.times
    n_dump = ensemble.n_paths if max_paths is None else min(max_paths, ensemble.n_paths)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["path", "step", "t"] + [f"x_{j + 1}" for j in range(m)])
        for p in range(n_dump):
            for i, t in enumerate(times):
                writer.writerow([p, i, format(t, ".17g")]
                                + [format(v, ".17g") for v in ensemble.states[p, i]])
