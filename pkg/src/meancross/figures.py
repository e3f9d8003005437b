"""Matplotlib renderings of the report artifacts.

Every CLI subcommand that writes a CSV also renders a PNG next to it.
Figures are presentation-only: the JSON/CSV artifacts are the record,
and nothing here feeds back into the numerics.
"""

from __future__ import annotations

import math

import matplotlib
import numpy as np

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

__all__ = [
    "curve_figure",
    "ensemble_figure",
    "adjoint_figure",
    "moments_figure",
    "rate_figure",
    "smp_figure",
    "brute_force_figure",
]

_DPI = 130


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=_DPI)
    plt.close(fig)


def curve_figure(curve, alpha, estimate, path):
    fig, ax = plt.subplots(figsize=(6.4, 4.0))
    ax.plot(curve.times, curve.mean, label="mean of phi(X)", color="C0")
    band = 3 * np.nan_to_num(curve.se)
    if band.max() > 0:
        ax.fill_between(curve.times, curve.mean - band, curve.mean + band,
                        alpha=0.25, color="C0", label="+-3 SE")
    ax.plot(curve.times, curve.lemma1_mean, "--", color="C1",
            label="rate-integral identity")
    ax.axhline(alpha, color="k", lw=0.8, label=f"threshold {alpha:g}")
    ax.axvline(estimate.tau, color="C3", lw=0.8,
               label=f"tau = {estimate.tau:.4f} ({estimate.case})")
    ax.set_xlabel("t")
    ax.set_ylabel("E[phi(X(t))]")
    ax.legend(fontsize=8, loc="best")
    _save(fig, path)


def ensemble_figure(ensemble, path, max_paths=20):
    fig, ax = plt.subplots(figsize=(6.4, 4.0))
    n = min(max_paths, ensemble.n_paths)
    for p in range(n):
        ax.plot(ensemble.times, ensemble.states[p, :, 0], lw=0.6, alpha=0.6)
    mean = ensemble.states[:, :, 0].mean(axis=0)
    ax.plot(ensemble.times, mean, color="k", lw=1.6, label="ensemble mean")
    ax.set_xlabel("t")
    ax.set_ylabel("x")
    ax.set_title(f"{n} of {ensemble.n_paths} paths")
    ax.legend(fontsize=8)
    _save(fig, path)


def adjoint_figure(bundle, path):
    fig, axes = plt.subplots(1, 2, figsize=(9.2, 3.8))
    for sol, name, color in ((bundle.cost_first, "cost p", "C0"),
                             (bundle.constraint_first, "constraint p0", "C1")):
        axes[0].plot(sol.times, sol.p[:, 0], color=color, label=name)
    axes[0].set_xlabel("t")
    axes[0].set_title("first-order adjoints")
    axes[0].legend(fontsize=8)
    for sol, name, color in ((bundle.cost_second, "cost P", "C0"),
                             (bundle.constraint_second, "constraint P0", "C1")):
        axes[1].plot(sol.times, sol.P[:, 0, 0], color=color, label=name)
    axes[1].set_xlabel("t")
    axes[1].set_title("second-order adjoints")
    axes[1].legend(fontsize=8)
    _save(fig, path)


def moments_figure(rows, path):
    keys = ["resid2_over_eps2", "y1_2_over_eps", "y2_2_over_eps2",
            "y1_4_over_eps2", "y2_4_over_eps4"]
    eps = [r["eps"] for r in rows]
    fig, ax = plt.subplots(figsize=(6.4, 4.0))
    for key in keys:
        vals = [max(r[key], 1e-16) for r in rows]
        ax.loglog(eps, vals, "o-", label=key)
    ax.set_xlabel("eps")
    ax.set_ylabel("normalized moment ratio")
    ax.legend(fontsize=7)
    ax.set_title("expansion-error scaling (flat = bounded)")
    _save(fig, path)


def rate_figure(est, path):
    fig, ax = plt.subplots(figsize=(6.4, 4.0))
    if est.epsilons:
        ax.plot(est.epsilons, est.slopes, "o", color="C0", label="slope per eps")
        xs = np.linspace(0, max(est.epsilons), 50)
        if len(est.epsilons) > 1:
            coef = np.polyfit(est.epsilons, est.slopes, 1)
            ax.plot(xs, np.polyval(coef, xs), "-", color="C0", alpha=0.6)
    ax.axhline(est.extrapolated, color="C0", ls=":",
               label=f"extrapolated {est.extrapolated:.5f}")
    if est.theoretical is not None and math.isfinite(est.theoretical):
        ax.axhline(est.theoretical, color="C3", ls="--",
                   label=f"adjoint formula {est.theoretical:.5f}")
    ax.set_xlabel("eps")
    ax.set_ylabel("(tau_base - tau_eps) / eps")
    ax.legend(fontsize=8)
    _save(fig, path)


def smp_figure(reports, path):
    fig, axes = plt.subplots(1, len(reports), figsize=(5.2 * len(reports), 3.8),
                             squeeze=False)
    for ax, rep in zip(axes[0], reports):
        for iu in range(rep.us.shape[0]):
            label = "u = " + ", ".join(f"{v:g}" for v in np.atleast_1d(rep.us[iu]))
            if rep.us.shape[0] > 6 and iu % max(1, rep.us.shape[0] // 6):
                label = None
            ax.plot(rep.taus, rep.lhs[:, iu], label=label)
        ax.axhline(0.0, color="k", lw=0.8)
        ax.set_xlabel("tau")
        ax.set_ylabel("inequality left-hand side")
        ax.set_title(f"{rep.variant} ({'pass' if rep.verdict else 'FAIL'})")
        ax.legend(fontsize=7)
    _save(fig, path)


def brute_force_figure(result, path):
    fig, ax = plt.subplots(figsize=(6.4, 4.0))
    order = np.argsort(result.costs)
    ax.plot(result.costs[order], ".", ms=3, label="costs (sorted)")
    ax.axhline(result.best_cost, color="C3", lw=0.8,
               label=f"best J = {result.best_cost:.5f}")
    if result.candidate_cost is not None:
        ax.axhline(result.candidate_cost, color="C2", ls="--", lw=0.8,
                   label=f"candidate J = {result.candidate_cost:.5f}")
    ax.set_xlabel("control rank")
    ax.set_ylabel("J")
    ax.set_title(f"{len(result.controls)} controls on {result.n_intervals} intervals")
    ax.legend(fontsize=8)
    _save(fig, path)
