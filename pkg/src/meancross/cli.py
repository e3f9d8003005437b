"""Command-line pipelines.

Subcommands: simulate, tau, cost, adjoint, variation, rate, check-smp,
brute-force, reproduce.  Every run writes machine-first JSON plus CSV
side files and PNG figures into --out.  All randomness flows from the
single --seed; reruns with identical configuration are byte-identical
in the JSON artifacts regardless of --workers.

Exit status: 0 when every verdict in the run passes, 1 when a verdict
fails, 2 on usage or configuration errors.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import figures, report
from .adjoint import BackendError, solve_all_adjoints
from .model import ProblemValidationError, load_problem
from .simulate import (ControlProcess, SimulationError, TimeGrid,
                       simulate_ensemble, with_spike, write_ensemble_csv)
from .smp import brute_force_search, check_smp, cost_functional
from .terminal import (TerminalError, classify_case, constraint_rate,
                       hitting_time, mean_constraint_curve)
from .variation import moment_check, tau_rate_empirical, tau_rate_theoretical

__all__ = ["main"]

USAGE_ERROR = 2


class ConfigError(ValueError):
    pass


# --------------------------------------------------------------------------
# Argument plumbing
# --------------------------------------------------------------------------

def _add_common(sp):
    sp.add_argument("--problem", required=True,
                    help="registry name (example1, example2, lq-linear) or problem file")
    sp.add_argument("--grid-n", type=int, default=2000, help="time steps")
    sp.add_argument("--paths", type=int, default=10000, help="Monte Carlo paths")
    sp.add_argument("--seed", type=int, default=None,
                    help="master seed (required unless the problem file sets one)")
    sp.add_argument("--backend", choices=["auto", "ode", "regression"],
                    default="auto", help="adjoint solver backend")
    sp.add_argument("--eps-ladder", default="0.02,0.01,0.005",
                    help="comma list of decreasing spike widths")
    sp.add_argument("--tau-grid", type=int, default=64,
                    help="tau points scanned by the optimality check")
    sp.add_argument("--spike-u", type=float, default=None,
                    help="spike control value (default: second domain point)")
    sp.add_argument("--spike-tau", type=float, default=0.3, help="spike start time")
    sp.add_argument("--out", default="out", help="output directory")
    sp.add_argument("--workers", type=int, default=1,
                    help="thread workers; must not change any result")
    sp.add_argument("--no-figures", action="store_true",
                    help="skip PNG rendering")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="meancross",
        description="Optimal control with a mean-crossing terminal time: "
                    "simulation, adjoints, and spike-variation optimality checks.")
    subs = ap.add_subparsers(dest="command", required=True)
    specs = {
        "simulate": "simulate the state ensemble and dump trajectories",
        "tau": "estimate the mean-crossing terminal time and verify the rate identity",
        "cost": "evaluate the cost functional of the base control",
        "adjoint": "solve the four backward adjoint systems",
        "variation": "spike-response moment-scaling ladder",
        "rate": "terminal-time sensitivity: empirical ladder vs adjoint formula",
        "check-smp": "scan the optimality inequality over (tau, u)",
        "brute-force": "exhaustive piecewise-constant control search",
        "reproduce": "full pipeline with per-problem defaults",
    }
    for name, help_text in specs.items():
        sp = subs.add_parser(name, help=help_text)
        _add_common(sp)
        if name == "simulate":
            sp.add_argument("--dump-paths", type=int, default=20,
                            help="paths written to ensemble.csv")
        if name == "brute-force":
            sp.add_argument("--intervals", type=int, default=8,
                            help="piecewise-constant control intervals")
            sp.add_argument("--lattice", type=int, default=5,
                            help="points per axis for box domains")
    return ap


def _parse_ladder(text: str) -> list[float]:
    try:
        ladder = [float(v) for v in text.split(",") if v.strip()]
    except ValueError as e:
        raise ConfigError(f"bad --eps-ladder: {e}") from None
    if not ladder or any(e <= 0 for e in ladder):
        raise ConfigError("--eps-ladder needs positive entries")
    return ladder


class Run:
    """Resolved configuration plus the artifacts directory."""

    def __init__(self, args):
        self.args = args
        self.spec = load_problem(args.problem)
        seed = args.seed if args.seed is not None else self.spec.seed
        if seed is None:
            raise ConfigError("--seed is required (no wall-clock default)")
        self.seed = int(seed)
        if args.grid_n < 2 or args.paths < 1 or args.tau_grid < 2 \
                or args.workers < 1:
            raise ConfigError("numeric parameters must be positive")
        self.grid = TimeGrid(self.spec.T, args.grid_n)
        self.out = Path(args.out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.figures = not args.no_figures
        self.workers = args.workers
        self.backend = args.backend
        self.ladder = _parse_ladder(args.eps_ladder)

    def config_echo(self, **extra) -> dict:
        # workers and output paths are excluded: they must not alter reports
        cfg = {
            "problem": self.args.problem,
            "grid_n": self.args.grid_n,
            "paths": self.args.paths,
            "seed": self.seed,
            "backend": self.backend,
        }
        cfg.update(extra)
        return cfg

    def base_control(self) -> ControlProcess:
        u0 = self.spec.U.evaluation_points(per_axis=2)[0]
        return ControlProcess.constant(self.grid, u0, self.spec.U)

    def spike_value(self) -> np.ndarray:
        if self.args.spike_u is not None:
            return np.array([self.args.spike_u])
        pts = self.spec.U.evaluation_points(per_axis=2)
        return pts[min(1, len(pts) - 1)]

    def ensemble(self, control=None, n_paths=None):
        control = control or self.base_control()
        n = n_paths or self.args.paths
        return simulate_ensemble(self.spec, control, self.grid, n, self.seed,
                                 workers=self.workers)


# --------------------------------------------------------------------------
# Subcommand bodies (each returns the exit status)
# --------------------------------------------------------------------------

def cmd_simulate(run: Run) -> int:
    ens = run.ensemble()
    curve = mean_constraint_curve(run.spec, ens)
    write_ensemble_csv(ens, run.out / "ensemble.csv", max_paths=run.args.dump_paths)
    payload = {
        "config": run.config_echo(dump_paths=run.args.dump_paths),
        "terminal_mean": float(curve.mean[-1]),
        "terminal_se": float(curve.se[-1]),
        "invalid_paths": int(ens.invalid.sum()),
        "deterministic": ens.deterministic,
    }
    report.write_json(run.out / "simulate.json", payload)
    if run.figures:
        figures.ensemble_figure(ens, run.out / "ensemble.png",
                                max_paths=run.args.dump_paths)
    return 0


def _tau_artifacts(run: Run, ens):
    curve = mean_constraint_curve(run.spec, ens)
    est = hitting_time(curve, run.spec.alpha, run.spec.T)
    rate = constraint_rate(run.spec, ens)
    return curve, est, rate


def cmd_tau(run: Run) -> int:
    ens = run.ensemble()
    curve, est, rate = _tau_artifacts(run, ens)
    diag = classify_case(est, rate)
    dev = np.abs(curve.mean - curve.lemma1_mean)
    # noise band plus a trapezoid-vs-chain discretization allowance
    # (the only band left on noiseless problems, where SE is zero)
    disc = run.grid.dt * np.concatenate(
        [[0.0], np.cumsum(np.abs(np.diff(rate.values)))])
    band = 3.0 * curve.combined_se() + disc
    identity_ok = bool(np.all(dev[1:] <= band[1:] + 1e-12))
    report.write_csv(run.out / "curve.csv", ["t", "mean", "se", "lemma1_mean"],
                     zip(curve.times, curve.mean, curve.se, curve.lemma1_mean))
    payload = {
        "config": run.config_echo(),
        "tau": est.tau,
        "case": est.case,
        "se": est.se,
        "margin": est.margin,
        "graze": est.graze,
        "h_at_tau": diag["h_at_tau"],
        "rate_identity_ok": identity_ok,
        "rate_identity_max_dev": float(dev.max()),
    }
    report.write_json(run.out / "tau.json", payload)
    if run.figures:
        figures.curve_figure(curve, run.spec.alpha, est, run.out / "curve.png")
    return 0 if identity_ok else 1


def cmd_cost(run: Run) -> int:
    ens = run.ensemble()
    _, est, _ = _tau_artifacts(run, ens)
    J, se = cost_functional(run.spec, ens.control, ens, est.tau)
    payload = {
        "config": run.config_echo(),
        "tau": est.tau,
        "case": est.case,
        "J": J,
        "se": se,
    }
    report.write_json(run.out / "cost.json", payload)
    return 0


def _dump_adjoints(run: Run, bundle):
    m, d = run.spec.m, run.spec.d
    p_cols = [f"p_{i + 1}" for i in range(m)]
    k_cols = [f"K_{i + 1}{j + 1}" for i in range(m) for j in range(d)]
    for tag, first, second in (("cost", bundle.cost_first, bundle.cost_second),
                               ("constraint", bundle.constraint_first,
                                bundle.constraint_second)):
        rows = (list(t) for t in zip(
            first.times, *[first.p[:, i] for i in range(m)],
            *[first.K[:, i, j] for i in range(m) for j in range(d)]))
        report.write_csv(run.out / f"adjoint_{tag}_first.csv",
                         ["t"] + p_cols + k_cols, rows)
        P_cols = [f"P_{i + 1}{j + 1}" for i in range(m) for j in range(m)]
        rows = (list(t) for t in zip(
            second.times, *[second.P[:, i, j] for i in range(m) for j in range(m)]))
        report.write_csv(run.out / f"adjoint_{tag}_second.csv", ["t"] + P_cols, rows)


def cmd_adjoint(run: Run) -> int:
    ens = run.ensemble()
    _, est, _ = _tau_artifacts(run, ens)
    bundle = solve_all_adjoints(run.spec, ens, ens.control, est.tau,
                                backend=run.backend)
    _dump_adjoints(run, bundle)
    payload = {
        "config": run.config_echo(),
        "tau": est.tau,
        "backend": bundle.cost_first.backend,
        "terminal": {
            "cost_p": bundle.cost_first.p[-1].tolist(),
            "constraint_p": bundle.constraint_first.p[-1].tolist(),
            "cost_P": bundle.cost_second.P[-1].tolist(),
            "constraint_P": bundle.constraint_second.P[-1].tolist(),
        },
        "P_symmetry_defect": bundle.cost_second.symmetry_defect(),
    }
    report.write_json(run.out / "adjoint.json", payload)
    if run.figures:
        figures.adjoint_figure(bundle, run.out / "adjoint.png")
    return 0


def cmd_variation(run: Run) -> int:
    control = run.base_control()
    rows = moment_check(run.spec, control, run.spike_value(), run.args.spike_tau,
                        run.ladder, run.grid, run.args.paths, run.seed,
                        workers=run.workers)
    keys = ["resid2_over_eps2", "y1_2_over_eps", "y2_2_over_eps2",
            "y1_4_over_eps2", "y2_4_over_eps4"]
    bounded = all(
        rows[i + 1][k] <= 1.5 * max(rows[i][k], 1e-8)
        for i in range(len(rows) - 1) for k in keys)
    report.write_csv(run.out / "moments.csv", ["eps"] + keys,
                     ([r["eps"]] + [r[k] for k in keys] for r in rows))
    payload = {
        "config": run.config_echo(spike_tau=run.args.spike_tau,
                                  spike_u=run.spike_value().tolist(),
                                  eps_ladder=run.ladder),
        "rows": rows,
        "ratios_bounded": bounded,
    }
    report.write_json(run.out / "moments.json", payload)
    if run.figures:
        figures.moments_figure(rows, run.out / "moments.png")
    return 0 if bounded else 1


def _rate_estimate(run: Run, control):
    spike_u = run.spike_value()
    est = tau_rate_empirical(run.spec, control, spike_u, run.args.spike_tau,
                             run.ladder, run.grid, run.args.paths, run.seed,
                             workers=run.workers)
    ens = run.ensemble(control)
    if est.case == "no-crossing":
        # the spiked curve never reaches the threshold either: zero rate
        return est.with_theory(0.0, 0.0), ens
    bundle = solve_all_adjoints(run.spec, ens, control, est.tau_base,
                                backend=run.backend)
    theory = tau_rate_theoretical(
        run.spec, ens, bundle.constraint_first, bundle.constraint_second,
        run.args.spike_tau, spike_u, est.h_at_tau)
    theory_zero = tau_rate_theoretical(
        run.spec, ens, bundle.constraint_first, bundle.constraint_second,
        run.args.spike_tau, spike_u, est.h_at_tau, zero_adjoint=True)
    return est.with_theory(theory, theory_zero), ens


def _slope_se(run: Run, ens, est) -> float:
    """Conservative slope noise: hitting-time SEs propagated through the
    smallest ladder width (common random numbers make the truth tighter)."""
    if not est.epsilons or ens.deterministic:
        return 0.0
    curve = mean_constraint_curve(run.spec, ens)
    se_tau = hitting_time(curve, run.spec.alpha, run.spec.T).se
    if math.isnan(se_tau):
        return 0.0
    return math.sqrt(2.0) * se_tau / min(est.epsilons)


def cmd_rate(run: Run) -> int:
    control = run.base_control()
    est, ens = _rate_estimate(run, control)
    tol = max(2e-3, 3.0 * _slope_se(run, ens, est))
    abs_diff = abs(est.extrapolated - est.theoretical)
    ok = abs_diff <= tol
    report.write_csv(run.out / "rate.csv", ["epsilon", "tau_eps", "slope", "branch"],
                     zip(est.epsilons, est.tau_eps, est.slopes, est.branches))
    payload = {
        "config": run.config_echo(spike_tau=run.args.spike_tau,
                                  spike_u=run.spike_value().tolist(),
                                  eps_ladder=run.ladder),
        "tau_base": est.tau_base,
        "case": est.case,
        "empirical_limit": est.extrapolated,
        "theoretical": est.theoretical,
        "theoretical_zero_adjoint": est.theoretical_zero_adjoint,
        "abs_diff": abs_diff,
        "tolerance": tol,
        "lemma2_gap": est.lemma2_gap,
        "branches": list(est.branches),
        "agreement_ok": ok,
    }
    report.write_json(run.out / "rate.json", payload)
    if run.figures:
        figures.rate_figure(est, run.out / "rate.png")
    return 0 if ok else 1


def cmd_check_smp(run: Run) -> int:
    ens = run.ensemble()
    _, est, rate = _tau_artifacts(run, ens)
    bundle = solve_all_adjoints(run.spec, ens, ens.control, est.tau,
                                backend=run.backend)
    reports = check_smp(run.spec, ens, ens.control, est, bundle, rate,
                        tau_grid_size=run.args.tau_grid)
    rows = []
    for rep in reports:
        for it, t in enumerate(rep.taus):
            for iu in range(rep.us.shape[0]):
                rows.append([rep.variant, float(t)]
                            + [float(v) for v in np.atleast_1d(rep.us[iu])]
                            + [float(rep.lhs[it, iu]), float(rep.se[it, iu])])
    u_cols = [f"u_{i + 1}" for i in range(run.spec.k)]
    report.write_csv(run.out / "smp_lhs.csv",
                     ["variant", "tau"] + u_cols + ["lhs", "se"], rows)
    payload = {
        "config": run.config_echo(tau_grid=run.args.tau_grid),
        "case": reports[0].case,
        "tau": reports[0].tau,
        "variants": [{
            "variant": rep.variant,
            "min_lhs": rep.min_lhs,
            "argmin_tau": rep.argmin_tau,
            "argmin_u": rep.argmin_u.tolist(),
            "tol": rep.tol,
            "worst_violation_fraction": rep.worst_violation_fraction,
            "verdict": rep.verdict,
        } for rep in reports],
        "verdict": all(rep.verdict for rep in reports),
        "notes": list(reports[0].notes),
    }
    report.write_json(run.out / "smp.json", payload)
    if run.figures:
        figures.smp_figure(reports, run.out / "smp.png")
    return 0 if payload["verdict"] else 1


def cmd_brute_force(run: Run) -> int:
    candidate = run.base_control()
    result = brute_force_search(run.spec, run.args.intervals, run.grid,
                                run.args.paths, run.seed, workers=run.workers,
                                lattice=run.args.lattice, candidate=candidate)
    best_se = float(result.cost_se[result.best_index])
    noise = 0.0 if math.isnan(best_se) else 3.0 * best_se
    candidate_ok = result.margin is not None and result.margin <= noise + 1e-12
    report.write_csv(run.out / "brute_force.csv",
                     ["control", "J", "se", "tau"],
                     (["|".join(",".join(f"{v:g}" for v in iv) for iv in ctrl),
                       float(J), float(se), float(tau)]
                      for ctrl, J, se, tau in zip(result.controls, result.costs,
                                                  result.cost_se, result.taus)))
    payload = {
        "config": run.config_echo(intervals=run.args.intervals),
        "n_controls": len(result.controls),
        "best_control": [list(iv) for iv in result.best_control],
        "best_J": result.best_cost,
        "best_tau": float(result.taus[result.best_index]),
        "candidate_J": result.candidate_cost,
        "margin": result.margin,
        "candidate_not_beaten": candidate_ok,
    }
    report.write_json(run.out / "brute_force.json", payload)
    if run.figures:
        figures.brute_force_figure(result, run.out / "brute_force.png")
    return 0 if candidate_ok else 1


# --------------------------------------------------------------------------
# reproduce: full pipeline with per-problem defaults
# --------------------------------------------------------------------------

REPRODUCE_DEFAULTS = {
    "example1": dict(tau_grid_n=100000, tau_paths=1,
                     smp_grid_n=10000, smp_paths=1,
                     rate_grid_n=2000, rate_paths=1,
                     rate_ladder=[0.02, 0.01, 0.005], spike_tau=0.3,
                     brute_grid_n=1000, brute_paths=1, brute_intervals=10),
    "example2": dict(tau_grid_n=200, tau_paths=100000,
                     smp_grid_n=200, smp_paths=100000,
                     rate_grid_n=200, rate_paths=20000,
                     rate_ladder=[0.1, 0.05, 0.025], spike_tau=0.2,
                     brute_grid_n=200, brute_paths=10000, brute_intervals=8),
    "lq-linear": dict(tau_grid_n=200, tau_paths=20000,
                      smp_grid_n=200, smp_paths=20000,
                      rate_grid_n=200, rate_paths=20000,
                      rate_ladder=[0.1, 0.05, 0.025], spike_tau=0.2,
                      brute_grid_n=200, brute_paths=2000, brute_intervals=4),
}


def cmd_reproduce(run: Run) -> int:
    args = run.args
    name = args.problem
    defaults = REPRODUCE_DEFAULTS.get(
        name, dict(tau_grid_n=args.grid_n, tau_paths=args.paths,
                   smp_grid_n=args.grid_n, smp_paths=args.paths,
                   rate_grid_n=args.grid_n, rate_paths=args.paths,
                   rate_ladder=run.ladder, spike_tau=args.spike_tau,
                   brute_grid_n=args.grid_n, brute_paths=args.paths,
                   brute_intervals=8))

    def sub(command: str, **over):
        ns = argparse.Namespace(**vars(args))
        ns.command = command
        for key, val in over.items():
            setattr(ns, key, val)
        return Run(ns)

    def read_back(name: str) -> dict:
        return json.loads((run.out / name).read_text())

    summary = {"config": run.config_echo(), "steps": {}}
    status = 0

    r = sub("tau", grid_n=defaults["tau_grid_n"], paths=defaults["tau_paths"])
    status = max(status, cmd_tau(r))
    tau_payload = read_back("tau.json")
    summary["steps"]["tau"] = {k: tau_payload[k] for k in
                               ("tau", "case", "rate_identity_ok")}

    r = sub("check-smp", grid_n=defaults["smp_grid_n"], paths=defaults["smp_paths"])
    status = max(status, cmd_check_smp(r))
    smp_payload = read_back("smp.json")
    summary["steps"]["check_smp"] = {k: smp_payload[k] for k in ("case", "verdict")}
    summary["steps"]["check_smp"]["min_lhs"] = min(
        v["min_lhs"] for v in smp_payload["variants"])

    r = sub("rate", grid_n=defaults["rate_grid_n"], paths=defaults["rate_paths"],
            eps_ladder=",".join(str(e) for e in defaults["rate_ladder"]),
            spike_tau=defaults["spike_tau"])
    status = max(status, cmd_rate(r))
    rate_payload = read_back("rate.json")
    summary["steps"]["rate"] = {k: rate_payload[k] for k in
                                ("empirical_limit", "theoretical", "agreement_ok")}

    r = sub("brute-force", grid_n=defaults["brute_grid_n"],
            paths=defaults["brute_paths"],
            intervals=defaults["brute_intervals"], lattice=2)
    status = max(status, cmd_brute_force(r))
    bf_payload = read_back("brute_force.json")
    summary["steps"]["brute_force"] = {k: bf_payload[k] for k in
                                       ("best_J", "candidate_not_beaten")}

    summary["verdict"] = status == 0
    report.write_json(run.out / "reproduce.json", summary)
    return status


# --------------------------------------------------------------------------

COMMANDS = {
    "simulate": cmd_simulate,
    "tau": cmd_tau,
    "cost": cmd_cost,
    "adjoint": cmd_adjoint,
    "variation": cmd_variation,
    "rate": cmd_rate,
    "check-smp": cmd_check_smp,
    "brute-force": cmd_brute_force,
    "reproduce": cmd_reproduce,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        run = Run(args)
        return COMMANDS[args.command](run)
    except (ConfigError, ProblemValidationError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return USAGE_ERROR
    except (TerminalError, SimulationError, BackendError) as e:
        print(f"run failed: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
