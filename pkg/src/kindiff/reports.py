"""Figure rendering for the report-producing CLI paths.

Every diagnostic subcommand writes its delimited output (CSV/JSON) and a
matplotlib rendering of the same content next to it.  Figures carry no
timestamps or software metadata so reruns are reproducible.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

_SAVEKW = {"dpi": 130, "metadata": {"Software": None}}


def render_kernel_report(report: dict, path) -> None:
    """Bar chart of the per-moment z-scores against the |z| = 3 band."""
    rows = report["results"]
    labels, zs = [], []
    for row in rows:
        for key in ("z_mean_r", "z_circvar_r", "z_mean_v", "z_var_v"):
            labels.append(f"t={row['t']}\n{key[2:]}")
            zs.append(row[key])
    fig, ax = plt.subplots(figsize=(max(6, 0.6 * len(labels)), 3.2))
    colors = ["tab:blue" if abs(z) < 3 else "tab:red" for z in zs]
    ax.bar(range(len(zs)), zs, color=colors)
    ax.axhline(3.0, color="k", lw=0.8, ls="--")
    ax.axhline(-3.0, color="k", lw=0.8, ls="--")
    ax.set_xticks(range(len(labels)))
    ax.set_xticklabels(labels, fontsize=7)
    ax.set_ylabel("z-score")
    ax.set_title("simulated moments vs closed-form kernel")
    fig.tight_layout()
    fig.savefig(path, **_SAVEKW)
    plt.close(fig)


def render_score_report(report: dict, path) -> None:
    """Histogram of relative errors for both finite-difference checks."""
    fig, axes = plt.subplots(1, 2, figsize=(8, 3.2))
    for ax, key, tol in [(axes[0], "kinetic_rel_errors", report["kinetic_tol"]),
                         (axes[1], "wn_rel_errors", report["wn_tol"])]:
        errs = np.asarray(report[key])
        errs = np.maximum(errs, 1e-18)
        ax.hist(np.log10(errs), bins=40, color="tab:blue")
        ax.axvline(np.log10(tol), color="tab:red", ls="--", label=f"tol {tol:g}")
        ax.set_xlabel("log10 relative error")
        ax.legend(fontsize=8)
    axes[0].set_title("score target vs FD of log-density")
    axes[1].set_title("wrapped-normal score vs FD")
    fig.tight_layout()
    fig.savefig(path, **_SAVEKW)
    plt.close(fig)


def render_frechet_report(entries: list[dict], k: int, mean_free: bool, path) -> None:
    """Histograms of the mean shifts with the 2*pi/K comb overlaid."""
    fig, axes = plt.subplots(1, len(entries), figsize=(4 * len(entries), 3.2),
                             squeeze=False)
    quantum = 2 * np.pi / k
    for ax, entry in zip(axes[0], entries):
        shifts = np.asarray(entry["shifts"])
        ax.hist(shifts, bins=61, range=(-np.pi, np.pi), color="tab:blue")
        for m in range(-k // 2, k // 2 + 1):
            ax.axvline(m * quantum, color="tab:red", lw=0.5, alpha=0.5)
        ax.set_title(f"sigma2={entry['sigma2']:g}  preserved={entry['preserved_frac']:.2f}")
        ax.set_xlabel("Frechet-mean shift [rad]")
    fig.suptitle(f"K={k}, mean-free={mean_free}")
    fig.tight_layout()
    fig.savefig(path, **_SAVEKW)
    plt.close(fig)


def render_metrics(metrics: list[dict], path) -> None:
    """Loss curves and the validation metric over training steps."""
    if not metrics:
        return
    steps = [m["step"] for m in metrics]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.2))
    for key in ("loss_total", "loss_v", "loss_l", "loss_a"):
        vals = [m[key] for m in metrics]
        if any(v != 0 for v in vals):
            ax1.plot(steps, vals, label=key)
    ax1.set_yscale("log")
    ax1.set_xlabel("step")
    ax1.legend(fontsize=8)
    ax1.set_title("training loss")
    val = [(m["step"], m["val_metric"]) for m in metrics
           if isinstance(m["val_metric"], float) and np.isfinite(m["val_metric"])]
    if val:
        ax2.plot(*zip(*val), marker="o", ms=3)
    ax2.set_ylim(-0.02, 1.02)
    ax2.set_xlabel("step")
    ax2.set_title("validation match rate")
    fig.tight_layout()
    fig.savefig(path, **_SAVEKW)
    plt.close(fig)


def render_match_report(rmses: list[float], site_tol: float, path) -> None:
    """Distribution of per-structure RMSE against the match tolerance."""
    fig, ax = plt.subplots(figsize=(5, 3.2))
    finite = [r for r in rmses if np.isfinite(r)]
    if finite:
        ax.hist(finite, bins=40, color="tab:blue")
    ax.axvline(site_tol, color="tab:red", ls="--", label=f"site_tol {site_tol:g}")
    ax.set_xlabel("torus RMSE (fractional units)")
    ax.legend(fontsize=8)
    ax.set_title("structure match errors")
    fig.tight_layout()
    fig.savefig(path, **_SAVEKW)
    plt.close(fig)
