"""Report figures for an evaluated run."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .metrics import MetricsReport  # noqa: E402


def _save(fig, path: Path) -> Path:
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def plot_hand_eye(report: MetricsReport, path) -> Path:
    fig, ax1 = plt.subplots(figsize=(6, 3.2))
    ax1.plot(report.frames, report.w_err, color="tab:blue", label="rotation")
    ax1.set_xlabel("frame")
    ax1.set_ylabel("rotation error [rad]", color="tab:blue")
    ax2 = ax1.twinx()
    ax2.plot(report.frames, report.b_err * 1e3, color="tab:red", label="translation")
    ax2.set_ylabel("translation error [mm]", color="tab:red")
    ax1.set_title("Hand-eye error")
    return _save(fig, Path(path))


def plot_reprojection(report: MetricsReport, path) -> Path:
    fig, ax = plt.subplots(figsize=(6, 3.2))
    ax.plot(report.frames, report.reproj_mean, label="deformable tracker")
    ax.plot(report.frames, report.baseline_mean, "--", label="nearest-neighbor baseline")
    ax.set_xlabel("frame")
    ax.set_ylabel("mean reprojection error [px]")
    ax.legend(frameon=False)
    return _save(fig, Path(path))


def plot_iou(report: MetricsReport, path) -> Path:
    fig, ax = plt.subplots(figsize=(6, 3.2))
    ax.plot(report.frames, report.iou)
    ax.set_ylim(0.0, 1.02)
    ax.set_xlabel("frame")
    ax.set_ylabel("tool mask IoU")
    return _save(fig, Path(path))


def plot_costs(report: MetricsReport, path) -> Path:
    fig, ax = plt.subplots(figsize=(6, 3.2))
    ok = np.isfinite(report.cost_initial)
    ax.semilogy(report.frames[ok], report.cost_initial[ok], "o-", ms=3, label="before")
    ax.semilogy(report.frames[ok], report.cost_final[ok], "o-", ms=3, label="after")
    ax.set_xlabel("frame")
    ax.set_ylabel("deformation energy")
    ax.legend(frameon=False)
    return _save(fig, Path(path))


def write_figures(report: MetricsReport, out_dir) -> list[Path]:
    out = Path(out_dir)
    return [plot_hand_eye(report, out / "hand_eye_error.png"),
            plot_reprojection(report, out / "reprojection_error.png"),
            plot_iou(report, out / "mask_iou.png"),
            plot_costs(report, out / "solver_cost.png")]
