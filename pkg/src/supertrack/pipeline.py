"""Frame loop tying the tool tracker, depth preprocessing, the deformation
solver and surfel fusion together."""

from __future__ import annotations

import csv
import json
import logging
import time
from collections import deque
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .dataset import Dataset
from .errors import EmptyCluster, EmptyFrame, NonFiniteSystem, SolverDiverged
from .geometry import AxisAngleTranslation, CameraIntrinsics
from .kinematics import HandEyeState, dilate_mask, render_tool_mask
from .solver import FrameObservation, SolverConfig, format_solver_log, lm_optimize
from .surfels import (
    EDGraph,
    FusionConfig,
    SurfelMap,
    commit_deformation,
    export_ply,
    fuse_frame,
    project_to_pixels,
    sample_ed_nodes,
)
from .tool_tracker import FilterConfig, ToolTracker

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PreprocessConfig:
    median_window: int = 4
    sigma_s: float = 3.0
    sigma_r: float = 0.005
    mask_dilation: int = 9
    # raw frames are masked with a thin margin before the temporal median
    premask_dilation: int = 1


@dataclass(frozen=True)
class PipelineConfig:
    filter: FilterConfig = field(default_factory=FilterConfig)
    solver: SolverConfig = field(default_factory=SolverConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    keyframe_every: int = 10
    cluster_radius_px: float = 2.0
    freeze_phases: tuple[int, ...] = (2, 3, 4)
    seed: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> PipelineConfig:
        d = dict(d)
        kwargs = {}
        if "filter" in d:
            kwargs["filter"] = FilterConfig.from_dict(d.pop("filter"))
        if "solver" in d:
            kwargs["solver"] = SolverConfig.from_dict(d.pop("solver"))
        if "fusion" in d:
            kwargs["fusion"] = FusionConfig(**d.pop("fusion"))
        if "preprocess" in d:
            kwargs["preprocess"] = PreprocessConfig(**d.pop("preprocess"))
        if "freeze_phases" in d:
            d["freeze_phases"] = tuple(d["freeze_phases"])
        return cls(**kwargs, **d)

    def to_dict(self) -> dict:
        return {"filter": self.filter.to_dict(), "solver": self.solver.to_dict(),
                "fusion": dict(self.fusion.__dict__), "preprocess": dict(self.preprocess.__dict__),
                "keyframe_every": self.keyframe_every, "cluster_radius_px": self.cluster_radius_px,
                "freeze_phases": list(self.freeze_phases), "seed": self.seed}


def load_config(path) -> PipelineConfig:
    if path is None:
        return PipelineConfig()
    return PipelineConfig.from_dict(json.loads(Path(path).read_text()))


# --------------------------------------------------------------------------
# preprocessing


def bilateral_filter(depth: np.ndarray, sigma_s: float = 3.0, sigma_r: float = 0.005,
                     radius: int | None = None) -> np.ndarray:
    """Edge-preserving smoothing that ignores and preserves NaN pixels."""
    r = int(np.ceil(2 * sigma_s)) if radius is None else radius
    h, w = depth.shape
    valid = np.isfinite(depth)
    pad = np.pad(np.where(valid, depth, 0.0), r)
    pad_ok = np.pad(valid, r)
    center = np.where(valid, depth, 0.0)
    num = np.zeros((h, w))
    den = np.zeros((h, w))
    for dy in range(-r, r + 1):
        for dx in range(-r, r + 1):
            ws = np.exp(-(dx * dx + dy * dy) / (2 * sigma_s * sigma_s))
            nb = pad[r + dy:r + dy + h, r + dx:r + dx + w]
            ok = pad_ok[r + dy:r + dy + h, r + dx:r + dx + w]
            wt = ws * np.exp(-(nb - center) ** 2 / (2 * sigma_r * sigma_r)) * ok
            num += wt * nb
            den += wt
    return np.where(valid, num / np.where(den > 0, den, 1.0), np.nan)


def temporal_median(frames) -> np.ndarray:
    stack = np.stack(list(frames))
    valid = np.isfinite(stack)
    out = np.full(stack.shape[1:], np.nan)
    any_ok = valid.any(axis=0)
    if any_ok.any():
        # sort with NaN last, then pick the middle of the valid entries
        srt = np.sort(stack[:, any_ok], axis=0)
        cnt = valid[:, any_ok].sum(axis=0)
        lo = np.take_along_axis(srt, ((cnt - 1) // 2)[None], axis=0)[0]
        hi = np.take_along_axis(srt, (cnt // 2)[None], axis=0)[0]
        out[any_ok] = 0.5 * (lo + hi)
    return out


def preprocess_depth(frames, mask, cfg: PreprocessConfig = PreprocessConfig()) -> np.ndarray:
    """Temporal median over the given window, bilateral smoothing, then tool masking.

    ``frames`` holds up to ``cfg.median_window`` depth maps, oldest first.
    ``mask`` (undilated) is dilated by ``cfg.mask_dilation`` pixels; masked
    pixels become NaN.
    """
    frames = list(frames)[-cfg.median_window:]
    if not frames:
        raise ValueError("at least one depth frame is required")
    med = frames[0].copy() if len(frames) == 1 else temporal_median(frames)
    out = bilateral_filter(med, cfg.sigma_s, cfg.sigma_r)
    if mask is not None:
        out[dilate_mask(np.asarray(mask, bool), cfg.mask_dilation)] = np.nan
    return out


# --------------------------------------------------------------------------
# tracked points


@dataclass
class TrackedPoint:
    surfel_ids: np.ndarray
    position: np.ndarray
    normal: np.ndarray
    frozen: bool = False


def make_tracked_point(smap: SurfelMap, k: CameraIntrinsics, pixel, radius_px: float = 2.0) -> TrackedPoint:
    """Cluster the front-most surfels projecting within ``radius_px`` of ``pixel``."""
    if len(smap) == 0:
        raise EmptyCluster("map is empty")
    z = np.where(smap.positions[:, 2] > 1e-9, smap.positions[:, 2], 1.0)
    u = k.fx * smap.positions[:, 0] / z + k.cx
    v = k.fy * smap.positions[:, 1] / z + k.cy
    near = (np.hypot(u - pixel[0], v - pixel[1]) <= radius_px) & (smap.positions[:, 2] > 1e-9)
    if not near.any():
        raise EmptyCluster(f"no surfel near pixel {tuple(pixel)}")
    zmin = smap.positions[near, 2].min()
    near &= smap.positions[:, 2] < zmin + 0.005
    tp = TrackedPoint(smap.ids[near].copy(), np.zeros(3), np.zeros(3))
    return update_tracked_point(tp, smap)


def update_tracked_point(tp: TrackedPoint, smap: SurfelMap) -> TrackedPoint:
    """Recompute the cluster average; frozen points are returned unchanged."""
    if tp.frozen:
        return tp
    sel = np.isin(smap.ids, tp.surfel_ids)
    if not sel.any():
        raise EmptyCluster("all cluster surfels were removed")
    p = smap.positions[sel].mean(axis=0)
    n = smap.normals[sel].sum(axis=0)
    norm = np.linalg.norm(n)
    if norm < 1e-12:
        raise EmptyCluster("cluster normals cancel out")
    return TrackedPoint(tp.surfel_ids, p, n / norm, False)


def track_point_query(tp: TrackedPoint, d: float) -> tuple[np.ndarray, np.ndarray]:
    """Target ``p_g + d n_g`` and a rotation whose z (approach) axis is ``-n_g``."""
    if len(tp.surfel_ids) == 0:
        raise EmptyCluster("tracked point has no surfels")
    n = tp.normal / np.linalg.norm(tp.normal)
    z = -n
    helper = np.array([1.0, 0.0, 0.0]) if abs(z[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    x = np.cross(helper, z)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    return tp.position + d * n, np.column_stack([x, y, z])


# --------------------------------------------------------------------------
# frame loop


FRAME_FIELDS = ["frame", "w_x", "w_y", "w_z", "b_x", "b_y", "b_z", "n_surfels", "n_nodes",
                "cost_initial", "cost_final", "lm_iters", "lm_max_step", "solver_status", "phase"]


@dataclass
class RunResult:
    rows: list[dict]
    tracked_pixels: np.ndarray      # (frames, points, 2), NaN when unavailable
    tracked_positions: np.ndarray   # (frames, points, 3)
    smap: SurfelMap
    graph: EDGraph
    timings: list[dict]


class Pipeline:
    """Stateful per-frame processor over one dataset."""

    def __init__(self, ds: Dataset, cfg: PipelineConfig, use_tracker: bool = True,
                 fixed_hand_eye: AxisAngleTranslation | None = None, particle_dump=None):
        self.ds = ds
        self.cfg = cfg
        self.k = ds.k
        self.use_tracker = use_tracker
        self.tracker = ToolTracker(ds.chain, ds.k, ds.nominal, cfg.filter, seed=cfg.seed,
                                   dump_path=particle_dump) if use_tracker else None
        self.fixed_hand_eye = fixed_hand_eye if fixed_hand_eye is not None else AxisAngleTranslation()
        self.rng = np.random.default_rng(cfg.seed + 1)
        self.history: deque = deque(maxlen=cfg.preprocess.median_window)
        self.smap = SurfelMap()
        self.graph = EDGraph()
        self.tracked: list[TrackedPoint | None] = []
        self.solver_log: list[str] = []

    def hand_eye_estimate(self) -> AxisAngleTranslation:
        return self.tracker.estimate if self.tracker is not None else self.fixed_hand_eye

    def step(self, f: int) -> tuple[dict, dict]:
        ds, cfg = self.ds, self.cfg
        timing = {"frame": f}
        t0 = time.perf_counter()
        feats = ds.features(f)
        theta = ds.joints(f)
        if self.tracker is not None:
            est = self.tracker.step(theta, feats.markers, feats.lines)
        else:
            est = self.fixed_hand_eye
        mask = render_tool_mask(ds.chain, theta, HandEyeState(ds.nominal, est), self.k)
        t1 = time.perf_counter()
        timing["tool"] = t1 - t0

        # each raw frame loses its own tool pixels before the temporal median;
        # the thin margin keeps the bilateral window of unmasked pixels clear of
        # the jittering mask boundary
        raw = ds.depth(f)
        raw[dilate_mask(mask, cfg.preprocess.premask_dilation)] = np.nan
        self.history.append(raw)
        depth = preprocess_depth(self.history, mask, cfg.preprocess)
        t2 = time.perf_counter()
        timing["preprocess"] = t2 - t1

        status = "skipped"
        cost0 = cost1 = float("nan")
        iters = 0
        max_step = 0.0
        if len(self.smap) and len(self.graph) >= self.graph.k + 1:
            obs = FrameObservation(depth, self.k, feats.pairs)
            try:
                res = lm_optimize(self.smap, self.graph, obs, cfg.solver)
                self.graph = res.graph
                cost0, cost1, iters, status = res.initial_cost, res.final_cost, res.iterations, res.reason
                max_step = res.max_step
                self.solver_log.append(format_solver_log(f, res))
            except (SolverDiverged, NonFiniteSystem) as exc:
                log.warning("frame %d: deformation skipped (%s)", f, exc)
                self.graph.reset_params()
                status = "diverged"
            self.smap, self.graph = commit_deformation(self.smap, self.graph)
        t3 = time.perf_counter()
        timing["solve"] = t3 - t2

        first_new = self.smap.next_id
        try:
            self.smap = fuse_frame(self.smap, depth, ds.color(f), None, self.k, f, cfg.fusion)
        except EmptyFrame:
            log.warning("frame %d: nothing to fuse", f)
        new = self.smap.ids >= first_new
        if new.any():
            self.graph = sample_ed_nodes(self.smap, self.graph, cfg.fusion.node_spacing, self.rng,
                                         candidates=new, k=self.graph.k, k_edge=self.graph.k_edge)
        t4 = time.perf_counter()
        timing["fuse"] = t4 - t3

        self._update_tracked(f, feats.phase)
        w, b = (float(v) for v in est.w), (float(v) for v in est.b)
        row = {"frame": f, **dict(zip(("w_x", "w_y", "w_z"), w)), **dict(zip(("b_x", "b_y", "b_z"), b)),
               "n_surfels": len(self.smap),
               "n_nodes": len(self.graph), "cost_initial": cost0, "cost_final": cost1,
               "lm_iters": iters, "lm_max_step": max_step, "solver_status": status, "phase": feats.phase}
        timing["total"] = time.perf_counter() - t0
        return row, timing

    def _update_tracked(self, f: int, phase: int) -> None:
        if f == 0 or not self.tracked:
            self.tracked = []
            for px in self.ds.track_pixels:
                try:
                    self.tracked.append(make_tracked_point(self.smap, self.k, px, self.cfg.cluster_radius_px))
                except EmptyCluster:
                    log.warning("tracked pixel %s has no surfels", tuple(px))
                    self.tracked.append(None)
            return
        freeze = phase in self.cfg.freeze_phases
        for i, tp in enumerate(self.tracked):
            if tp is None:
                continue
            tp.frozen = freeze
            try:
                self.tracked[i] = update_tracked_point(tp, self.smap)
            except EmptyCluster:
                log.warning("frame %d: tracked point %d lost its surfels", f, i)

    def tracked_state(self) -> tuple[np.ndarray, np.ndarray]:
        pos = np.array([tp.position if tp is not None else np.full(3, np.nan) for tp in self.tracked])
        pos = pos.reshape(-1, 3)
        with np.errstate(invalid="ignore", divide="ignore"):
            px = np.column_stack([self.k.fx * pos[:, 0] / pos[:, 2] + self.k.cx,
                                  self.k.fy * pos[:, 1] / pos[:, 2] + self.k.cy])
        return pos, px


def run_pipeline(dataset, cfg: PipelineConfig = PipelineConfig(), out_dir=None, frames: int | None = None,
                 use_tracker: bool = True, fixed_hand_eye=None, keyframes: bool = True) -> RunResult:
    """Process a dataset frame by frame and optionally write outputs to ``out_dir``.

    Outputs: ``frames.csv`` (one row per frame), ``tracked.json``,
    ``solver_log.txt``, ``timings.csv``, ``particles.jsonl`` and
    ``map_%06d.ply`` every ``cfg.keyframe_every`` frames.
    """
    ds = dataset if isinstance(dataset, Dataset) else Dataset(dataset)
    ds.validate()
    n = ds.n_frames if frames is None else min(frames, ds.n_frames)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    dump = out / "particles.jsonl" if (out is not None and use_tracker) else None
    pipe = Pipeline(ds, cfg, use_tracker, fixed_hand_eye, dump)
    rows, timings, tr_px, tr_pos = [], [], [], []
    for f in range(n):
        row, timing = pipe.step(f)
        rows.append(row)
        timings.append(timing)
        pos, px = pipe.tracked_state()
        tr_pos.append(pos)
        tr_px.append(px)
        if out is not None and keyframes and f % cfg.keyframe_every == 0:
            export_ply(pipe.smap, out / f"map_{f:06d}.ply")
        log.info("frame %d: %d surfels, %d nodes, solver %s", f, len(pipe.smap), len(pipe.graph),
                 row["solver_status"])
    result = RunResult(rows, np.array(tr_px), np.array(tr_pos), pipe.smap, pipe.graph, timings)
    if out is not None:
        write_run_outputs(out, result, pipe, cfg)
    return result


def write_run_outputs(out: Path, result: RunResult, pipe: Pipeline, cfg: PipelineConfig) -> None:
    with open(out / "frames.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=FRAME_FIELDS)
        writer.writeheader()
        for row in result.rows:
            writer.writerow({k: (repr(float(v)) if isinstance(v, (float, np.floating)) else v)
                             for k, v in row.items()})
    with open(out / "timings.csv", "w", newline="") as fh:
        keys = ["frame", "tool", "preprocess", "solve", "fuse", "total"]
        writer = csv.DictWriter(fh, fieldnames=keys)
        writer.writeheader()
        for t in result.timings:
            writer.writerow({k: t.get(k, "") for k in keys})
    (out / "solver_log.txt").write_text("# frame iter cost mu accepted\n" + "".join(pipe.solver_log))
    (out / "tracked.json").write_text(json.dumps({
        "pixels": np.where(np.isfinite(result.tracked_pixels), result.tracked_pixels, None).tolist(),
        "positions": np.where(np.isfinite(result.tracked_positions), result.tracked_positions, None).tolist(),
    }))
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2))


def with_seed(cfg: PipelineConfig, seed: int) -> PipelineConfig:
    return replace(cfg, seed=seed)
