"""Evaluation against simulator ground truth."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .dataset import Dataset
from .errors import DatasetError, MissingGroundTruth
from .geometry import AxisAngleTranslation
from .kinematics import HandEyeState, render_tool_mask


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    """Intersection over union; two empty masks count as identical."""
    a = np.asarray(a, bool)
    b = np.asarray(b, bool)
    union = np.count_nonzero(a | b)
    if union == 0:
        return 1.0
    return np.count_nonzero(a & b) / union


def reprojection_errors(pred_px, gt_px) -> np.ndarray:
    return np.linalg.norm(np.asarray(pred_px, float) - np.asarray(gt_px, float), axis=-1)


def _valid_depth_at(depth, u, v, window=3):
    r = window // 2
    patch = depth[max(v - r, 0):v + r + 1, max(u - r, 0):u + r + 1]
    vals = patch[np.isfinite(patch)]
    return float(np.median(vals)) if vals.size else np.nan


def nearest_neighbor_baseline(ds: Dataset, first_pixels, frames: int) -> np.ndarray:
    """Pixels ``(frames, P, 2)`` from matching each point's first-frame 3D position
    to the nearest observed 3D point in every later frame."""
    k = ds.k
    first_pixels = np.asarray(first_pixels, float).reshape(-1, 2)
    d0 = ds.depth(0)
    anchors = []
    for u, v in first_pixels:
        z = _valid_depth_at(d0, int(round(u)), int(round(v)))
        anchors.append([(u - k.cx) / k.fx * z, (v - k.cy) / k.fy * z, z])
    anchors = np.array(anchors)
    out = np.full((frames, len(anchors), 2), np.nan)
    ok = np.isfinite(anchors).all(axis=1)
    for f in range(frames):
        depth = ds.depth(f)
        vs, us = np.nonzero(np.isfinite(depth))
        z = depth[vs, us]
        pts = np.column_stack([(us - k.cx) / k.fx * z, (vs - k.cy) / k.fy * z, z])
        if len(pts) == 0 or not ok.any():
            continue
        _, idx = cKDTree(pts).query(anchors[ok])
        out[f, ok] = np.column_stack([us[idx], vs[idx]])
    return out


@dataclass
class MetricsReport:
    frames: np.ndarray
    w_err: np.ndarray
    b_err: np.ndarray
    iou: np.ndarray
    reproj_mean: np.ndarray
    baseline_mean: np.ndarray
    cost_initial: np.ndarray
    cost_final: np.ndarray
    reproj: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    baseline: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))

    FIELDS = ("frame", "w_err_rad", "b_err_m", "iou", "reproj_px", "baseline_px",
              "cost_initial", "cost_final")

    def rows(self) -> list[list]:
        cols = [self.frames, self.w_err, self.b_err, self.iou, self.reproj_mean, self.baseline_mean,
                self.cost_initial, self.cost_final]
        return [[int(c[i]) if j == 0 else float(c[i]) for j, c in enumerate(cols)]
                for i in range(len(self.frames))]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(self.FIELDS)
            for row in self.rows():
                writer.writerow([row[0]] + [repr(v) for v in row[1:]])

    def summary(self) -> dict:
        def m(a):
            a = np.asarray(a, float)
            return float(np.nanmean(a)) if np.isfinite(a).any() else None
        return {"frames": int(len(self.frames)), "final_w_err_rad": float(self.w_err[-1]),
                "final_b_err_m": float(self.b_err[-1]), "mean_iou": m(self.iou),
                "mean_reproj_px": m(self.reproj_mean), "mean_baseline_px": m(self.baseline_mean)}


def read_frames_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def eval_metrics(run_dir, dataset) -> MetricsReport:
    """Compare a run directory with the dataset's ground truth."""
    ds = dataset if isinstance(dataset, Dataset) else Dataset(dataset)
    if not ds.has_ground_truth():
        raise MissingGroundTruth(f"{ds.root}: evaluation needs ground truth")
    gt = ds.ground_truth()
    run_dir = Path(run_dir)
    for name in ("frames.csv", "tracked.json"):
        if not (run_dir / name).exists():
            raise DatasetError(f"{run_dir}: {name} missing, not a run directory")
    rows = read_frames_csv(run_dir / "frames.csv")
    n = len(rows)
    w_true = np.asarray(gt["true_error"]["w"], float)
    b_true = np.asarray(gt["true_error"]["b"], float)
    he_true = HandEyeState(ds.nominal, AxisAngleTranslation(w_true, b_true))

    w_est = np.array([[float(r[f"w_{a}"]) for a in "xyz"] for r in rows])
    b_est = np.array([[float(r[f"b_{a}"]) for a in "xyz"] for r in rows])
    ious = []
    for f in range(n):
        theta = ds.joints(f)
        est = HandEyeState(ds.nominal, AxisAngleTranslation(w_est[f], b_est[f]))
        ious.append(mask_iou(render_tool_mask(ds.chain, theta, est, ds.k),
                             render_tool_mask(ds.chain, theta, he_true, ds.k)))

    tracked = json.loads((run_dir / "tracked.json").read_text())
    pred = np.array([[[np.nan if v is None else v for v in p] for p in fr] for fr in tracked["pixels"]],
                    dtype=float)
    gt_px = np.asarray(gt["tracked_pixels"], float)[:n]
    if pred.size:
        reproj = reprojection_errors(pred.reshape(n, -1, 2), gt_px)
        base_px = nearest_neighbor_baseline(ds, gt["tracked_first_pixels"], n)
        baseline = reprojection_errors(base_px, gt_px)
    else:
        reproj = np.full((n, 0), np.nan)
        baseline = np.full((n, 0), np.nan)

    def mean_rows(a):
        out = np.full(len(a), np.nan)
        for i, r in enumerate(a):
            if np.isfinite(r).any():
                out[i] = np.nanmean(r)
        return out

    return MetricsReport(
        frames=np.arange(n),
        w_err=np.linalg.norm(w_est - w_true, axis=1),
        b_err=np.linalg.norm(b_est - b_true, axis=1),
        iou=np.array(ious),
        reproj_mean=mean_rows(reproj),
        baseline_mean=mean_rows(baseline),
        cost_initial=np.array([float(r["cost_initial"]) for r in rows]),
        cost_final=np.array([float(r["cost_final"]) for r in rows]),
        reproj=reproj,
        baseline=baseline,
    )


def surface_rms(points, sheet, frame, k=None) -> float:
    """RMS distance along the viewing ray from points to the true sheet surface."""
    pts = np.asarray(points, float).reshape(-1, 3)
    rays = pts / pts[:, 2:3]
    depth, _, _ = sheet.intersect(rays, frame)
    ok = np.isfinite(depth)
    if not ok.any():
        return float("nan")
    # scale the depth gap to a Euclidean distance along the ray
    gap = (pts[ok, 2] - depth[ok]) * np.linalg.norm(rays[ok], axis=1)
    return float(np.sqrt(np.mean(gap ** 2)))
