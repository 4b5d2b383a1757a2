"""Figure rendering for calibration, audits, and sweep results.

Figures are written next to the delimited outputs so a run directory is
self-contained: metric-versus-budget curves for sweeps, the aggregate
spectrum for calibrations, and the output histograms for audits.
"""

from __future__ import annotations

import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

__all__ = [
    "render_sweep_figures",
    "render_spectrum_figure",
    "render_audit_figure",
]


def render_sweep_figures(result, outdir):
    """One metric-vs-epsilon curve per mechanism, with std bands."""
    os.makedirs(outdir, exist_ok=True)
    cells = result.summary_cells()
    metrics = sorted({r.metric for r in result.rows if not r.error})
    paths = []
    for metric in metrics:
        fig, ax = plt.subplots(figsize=(7, 4.5))
        for mech in result.config.mechanisms:
            eps, means, stds = [], [], []
            for e in result.config.epsilons:
                rows = [
                    r
                    for r in result.rows
                    if r.mechanism == mech and r.epsilon == e and r.metric == metric
                ]
                if not rows:
                    continue
                cell = cells[(mech, e)]
                eps.append(e)
                means.append(cell["mean"])
                stds.append(cell["std"])
            if not eps:
                continue
            eps, means, stds = map(np.asarray, (eps, means, stds))
            ax.plot(eps, means, marker="o", label=mech)
            ax.fill_between(eps, means - stds, means + stds, alpha=0.2)
        ax.set_xlabel("privacy budget epsilon")
        ax.set_ylabel(metric)
        if metric == "rmse":
            ax.set_yscale("log")
        ax.legend()
        ax.grid(True, alpha=0.3)
        fig.tight_layout()
        path = os.path.join(outdir, f"{metric}_vs_epsilon.png")
        fig.savefig(path, dpi=130)
        plt.close(fig)
        paths.append(path)
    return paths


def render_spectrum_figure(singular_values, rank, path):
    """Bar plot of the aggregate's singular values with the rank cut."""
    s = np.asarray(singular_values, dtype=np.float64)
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.bar(np.arange(1, s.size + 1), s, color="steelblue")
    ax.axvline(rank + 0.5, color="crimson", linestyle="--", label=f"rank = {rank}")
    ax.set_xlabel("coordinate")
    ax.set_ylabel("singular value")
    ax.set_yscale("log")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)
    return path


def render_audit_figure(audit_result, epsilon, path):
    """Histograms of both inputs plus the per-bin empirical loss."""
    centers = 0.5 * (audit_result.bin_edges[:-1] + audit_result.bin_edges[1:])
    width = np.diff(audit_result.bin_edges)
    smooth_a = audit_result.counts_a + 1.0
    smooth_b = audit_result.counts_b + 1.0
    loss = np.abs(np.log(smooth_a) - np.log(smooth_b))
    fig, (ax1, ax2) = plt.subplots(2, 1, figsize=(7, 6), sharex=True)
    ax1.bar(centers, audit_result.counts_a, width=width, alpha=0.5, label="input z")
    ax1.bar(centers, audit_result.counts_b, width=width, alpha=0.5, label="input z'")
    ax1.set_ylabel("count")
    ax1.legend()
    ax2.plot(centers, loss, color="black")
    ax2.axhline(epsilon, color="crimson", linestyle="--", label=f"epsilon = {epsilon:g}")
    ax2.set_xlabel("output statistic")
    ax2.set_ylabel("empirical loss")
    ax2.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)
    return path
