"""Figure rendering for the CLI report paths (written next to the CSVs)."""

from __future__ import annotations

from pathlib import Path

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .calibration import CalibrationResult
from .optimizer import DesignResult, SiteSpec
from .simulation import SimResult


def save_trajectory_figure(result: SimResult, path: str | Path,
                           labels: list[str] | None = None):
    """Temperature trajectories on top, applied user flows below."""
    sel = labels if labels is not None else list(result.labels)
    fig, (ax_t, ax_m) = plt.subplots(
        2, 1, sharex=True, figsize=(8, 6),
        gridspec_kw={"height_ratios": [2, 1]})
    hours = result.times / 3600.0
    for lab in sel:
        ax_t.plot(hours, result.series(lab), lw=0.9, label=lab)
    ax_t.set_ylabel("temperature")
    if len(sel) <= 16:
        ax_t.legend(fontsize=7, ncol=2)
    for i, u in enumerate(result.user_ids):
        ax_m.step(hours[:-1], result.user_flows[:, i], where="post",
                  lw=0.9, label=f"user {u}")
    ax_m.set_ylabel("valve flow [kg/s]")
    ax_m.set_xlabel("time [h]")
    ax_m.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_layout_figure(result: DesignResult, site: SiteSpec,
                       path: str | Path):
    """Designed network layout: pipes as lines, width by flow."""
    fig, ax = plt.subplots(figsize=(6, 6))
    positions = {"plant": site.plant}
    for i, p in enumerate(site.users, start=1):
        positions[f"user:{i}"] = p
    for cid, cand in result.tree.candidates.items():
        positions[f"split:{cid}"] = cand.position
    max_flow = max((p.flow for p in result.pipes), default=1.0)
    for pipe in result.pipes:
        a, b = positions[pipe.parent], positions[pipe.child]
        ax.plot([a[0], b[0]], [a[1], b[1]], "-", color="tab:red",
                lw=0.5 + 2.5 * pipe.flow / max_flow, alpha=0.8, zorder=1)
    ax.scatter(*site.plant, marker="s", s=90, color="k", zorder=3,
               label="plant")
    ux = [p[0] for p in site.users]
    uy = [p[1] for p in site.users]
    ax.scatter(ux, uy, marker="o", s=50, color="tab:blue", zorder=3,
               label="users")
    for i, p in enumerate(site.users, start=1):
        ax.annotate(str(i), p, textcoords="offset points", xytext=(4, 4),
                    fontsize=8)
    sx = [c.position[0] for c in result.tree.candidates.values()]
    sy = [c.position[1] for c in result.tree.candidates.values()]
    if sx:
        ax.scatter(sx, sy, marker="^", s=40, color="tab:green", zorder=3,
                   label="splits")
    ax.set_title(f"{result.objective}-minimized: "
                 f"{result.true_cost / 1e3:.1f} kW, "
                 f"{result.total_length:.0f} m")
    ax.set_aspect("equal")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_calibration_figure(result: CalibrationResult, path: str | Path):
    """Best-so-far objective over evaluations."""
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(np.arange(1, len(result.history) + 1), result.history, lw=1.2)
    ax.set_xlabel("objective evaluation")
    ax.set_ylabel("best summed RMSE")
    ax.set_yscale("log")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
