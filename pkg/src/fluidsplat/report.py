"""Figure rendering for CLI reports (written next to the CSV outputs)."""

from __future__ import annotations

from pathlib import Path

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np


def save_simulation_figure(times, dye_inside, dye_outside, body_z, path):
    """Dye mass split over time and, when present, the body altitude."""
    has_body = body_z is not None
    fig, axes = plt.subplots(1, 2 if has_body else 1, figsize=(9 if has_body else 5, 3.4))
    axes = np.atleast_1d(axes)
    ax = axes[0]
    if dye_inside is not None:
        ax.plot(times, dye_inside, label="dye in region", color="tab:blue")
        ax.plot(times, dye_outside, label="dye outside", color="tab:orange")
        ax.set_ylabel("dye mass")
        ax.legend(fontsize=8)
    ax.set_xlabel("step")
    ax.set_title("transported dye")
    if has_body:
        ax2 = axes[1]
        ax2.plot(times, body_z, color="tab:green")
        ax2.axhline(body_z[0], color="gray", lw=0.8, ls="--")
        ax2.set_xlabel("step")
        ax2.set_ylabel("body z")
        ax2.set_title("body altitude")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def save_train_figure(log, path):
    """Loss curves from a TrainLog."""
    iters = log.column("iter")
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.4))
    axes[0].plot(iters, log.column("loss_vis"), lw=0.8, label="visual")
    axes[0].set_yscale("log")
    axes[0].set_xlabel("iteration")
    axes[0].set_ylabel("visual loss")
    axes[0].set_title("image reconstruction")
    phys = np.array([v if v else np.nan for v in log.column("loss_phys")], dtype=float)
    axes[1].plot(iters, phys, lw=0.8, color="tab:red")
    axes[1].set_xlabel("iteration")
    axes[1].set_ylabel("physics loss")
    axes[1].set_title("physics objective")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def save_sweep_figure(rows, path):
    """Held-out SSIM against the physics objective, colored by weight."""
    ok = [r for r in rows if r.error is None]
    fig, ax = plt.subplots(figsize=(5, 3.6))
    if ok:
        lam = np.array([max(r.lambda_phys, 1e-6) for r in ok])
        sc = ax.scatter([r.neg_phys for r in ok], [r.final_ssim for r in ok],
                        c=np.log10(lam), cmap="viridis", s=42)
        for r in ok:
            ax.annotate(f"{r.lambda_phys:g}", (r.neg_phys, r.final_ssim),
                        fontsize=7, xytext=(3, 3), textcoords="offset points")
        fig.colorbar(sc, ax=ax, label="log10 physics weight")
    ax.set_xlabel("physics objective (higher is better)")
    ax.set_ylabel("held-out SSIM")
    ax.set_title("physics weight sweep")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def save_gradcheck_figure(report, path):
    """Analytic vs numeric scatter plus the relative-error distribution."""
    rows = [r for r in report.rows if np.isfinite(r[4])]
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.6))
    if rows:
        a = np.array([r[2] for r in rows])
        n = np.array([r[3] for r in rows])
        axes[0].scatter(n, a, s=6, alpha=0.6)
        lim = max(np.abs(a).max(), np.abs(n).max(), 1e-12)
        axes[0].plot([-lim, lim], [-lim, lim], "k--", lw=0.6)
        rel = np.array([max(r[4], 1e-17) for r in rows])
        axes[1].hist(np.log10(rel), bins=40, color="tab:purple")
        axes[1].axvline(np.log10(max(report.max_rel, 1e-17)), color="red", lw=0.8)
    axes[0].set_xlabel("finite difference")
    axes[0].set_ylabel("adjoint")
    axes[0].set_title("gradient agreement")
    axes[1].set_xlabel("log10 relative error")
    axes[1].set_title("error distribution")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
