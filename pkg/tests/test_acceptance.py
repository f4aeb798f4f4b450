"""Acceptance criteria, one PASS/FAIL line each.

Run under pytest (``pytest tests/test_acceptance.py -v``) or directly with
``python tests/test_acceptance.py``. The end-to-end checks render 640x480
sequences and take a few minutes in total.
"""

from __future__ import annotations

import json
import subprocess
import sys
import tempfile
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).resolve().parent))

from conftest import CONFIGS, ROOT, dense_warp, random_graph, synthetic_filter  # noqa: E402
from supertrack.dataset import Dataset  # noqa: E402
from supertrack.geometry import AxisAngleTranslation  # noqa: E402
from supertrack.kinematics import HandEyeState, render_tool_depth, render_tool_mask  # noqa: E402
from supertrack.metrics import eval_metrics, mask_iou  # noqa: E402
from supertrack.pipeline import load_config, run_pipeline, with_seed  # noqa: E402
from supertrack.sim import (  # noqa: E402
    DeformingSheet,
    default_chain,
    default_intrinsics,
    default_nominal_hand_eye,
    default_true_error,
    emit_tool_features,
    joint_trajectory,
    make_sequence,
    scenario,
)
from supertrack.solver import (  # noqa: E402
    FrameObservation,
    assemble_jacobian,
    data_associations,
    lm_optimize,
    pcg_solve,
    residuals_arap,
    residuals_corr,
    residuals_data,
    residuals_rot,
    warp_with_params,
)
from supertrack.surfels import (  # noqa: E402
    EDGraph,
    Surfel,
    SurfelMap,
    commit_deformation,
    fuse_frame,
    sample_ed_nodes,
    skinning,
    warp_normal,
    warp_point,
)
from supertrack.tool_tracker import ToolTracker, with_particles  # noqa: E402

pytestmark = pytest.mark.slow


@dataclass
class Outcome:
    name: str
    ok: bool
    detail: str

    @property
    def line(self) -> str:
        return f"{'PASS' if self.ok else 'FAIL'} {self.name}: {self.detail}"


# ---- 1. hand-eye recovery ----------------------------------------------------------------

def _track(cfg, seed, frames, sigma_px=1.0, dropout=0.1, masks_at=()):
    """Run the filter on simulated detections; returns final errors, IoUs and runtime."""
    k, chain, nominal, truth = default_intrinsics(), default_chain(), default_nominal_hand_eye(), default_true_error()
    theta = joint_trajectory(frames)
    tracker = ToolTracker(chain, k, nominal, cfg, seed=seed)
    rng = np.random.default_rng(seed + 1000)
    ious = []
    t0 = time.perf_counter()
    for f in range(frames):
        m, l = emit_tool_features(chain, theta[f], truth, k, sigma_px, dropout, rng, nominal)
        est = tracker.step(theta[f], m, l)
        if f in masks_at:
            ious.append(mask_iou(render_tool_mask(chain, theta[f], HandEyeState(nominal, est), k),
                                 render_tool_mask(chain, theta[f], HandEyeState(nominal, truth), k)))
    elapsed = time.perf_counter() - t0
    return np.linalg.norm(est.w - truth.w), np.linalg.norm(est.b - truth.b), ious, elapsed


def check_hand_eye_recovery() -> Outcome:
    truth = default_true_error()
    assert np.linalg.norm(truth.w) <= 0.05 and np.linalg.norm(truth.b) <= 0.005
    runs = [_track(synthetic_filter(), seed, 100) for seed in range(5)]
    w_err = float(np.median([r[0] for r in runs]))
    b_err = float(np.median([r[1] for r in runs]))
    slowest = max(r[3] for r in runs)
    ok = w_err < 0.01 and b_err < 1e-3 and slowest < 60.0
    return Outcome("hand-eye recovery", ok,
                   f"median final error {w_err:.4f} rad / {b_err * 1e3:.3f} mm over 5 seeds "
                   f"(limits 0.01 rad / 1 mm); slowest 100-frame run {slowest:.1f} s (limit 60 s)")


# ---- 2. mask IoU ---------------------------------------------------------------------------

def check_mask_iou() -> Outcome:
    frames = range(50)
    base = synthetic_filter()
    mean_iou = {}
    for n in (100, 500, 5000):
        per_seed = [np.mean(_track(with_particles(base, n), seed, 50, masks_at=frames)[2]) for seed in range(5)]
        mean_iou[n] = float(np.mean(per_seed))
    ok = mean_iou[500] >= 0.80 and mean_iou[5000] >= mean_iou[100]
    return Outcome("mask IoU", ok,
                   f"mean IoU over 50 frames and 5 seeds: N=100 {mean_iou[100]:.3f}, N=500 {mean_iou[500]:.3f}, "
                   f"N=5000 {mean_iou[5000]:.3f} (need N=500 >= 0.80 and N=5000 >= N=100)")


# ---- 3. deformable tracking -------------------------------------------------------------------

def check_deformable_tracking(workdir: Path) -> Outcome:
    cfg = scenario("bump", frames=50, width=640, height=480)
    assert cfg.sheet.bumps[0].amplitude == 0.01 and cfg.tracked_points == 20
    data = make_sequence(cfg, 0, workdir / "bump")
    t0 = time.perf_counter()
    res = run_pipeline(data, with_seed(load_config(CONFIGS / "synthetic.json"), 0), workdir / "bump_run")
    elapsed = time.perf_counter() - t0
    report = eval_metrics(workdir / "bump_run", data)
    reproj = float(np.nanmean(report.reproj_mean))
    baseline = float(np.nanmean(report.baseline_mean))
    ok = len(res.rows) == 50 and len(report.frames) == 50 and reproj < 3.0 and reproj < baseline
    return Outcome("deformable tracking", ok,
                   f"mean reprojection error of 20 points {reproj:.2f} px vs nearest-neighbour baseline "
                   f"{baseline:.2f} px (need < 3 px and below baseline); {len(report.frames)} metric rows; "
                   f"run took {elapsed:.0f} s")


# ---- 4. solver property suite ---------------------------------------------------------------------

def _fd_jacobian(fun, x, h=1e-6):
    cols = []
    for c in range(len(x)):
        e = np.zeros_like(x)
        e[c] = h
        cols.append((fun(x + e) - fun(x - e)) / (2 * h))
    return np.column_stack(cols)


def _rel_err(block, fun, x):
    jac, _ = assemble_jacobian([block], len(x))
    fd = _fd_jacobian(fun, x)
    return np.linalg.norm(jac.toarray() - fd) / max(np.linalg.norm(fd), 1e-300)


def _jacobian_errors(rng) -> dict:
    k = default_intrinsics()
    depth = np.full((k.height, k.width), 0.5)
    worst = {"data": 0.0, "arap": 0.0, "rot": 0.0, "corr": 0.0}
    for _ in range(10):
        g = random_graph(rng, spread=0.05)
        g.nodes[:, 2] += 0.5
        g.rebuild_edges()
        x = g.params()
        worst["rot"] = max(worst["rot"], _rel_err(residuals_rot(g), lambda y: residuals_rot(g.with_params(y)).flat, x))
        worst["arap"] = max(worst["arap"],
                            _rel_err(residuals_arap(g), lambda y: residuals_arap(g.with_params(y)).flat, x))

        p = np.column_stack([rng.uniform(-0.04, 0.04, (40, 2)), 0.5 + rng.uniform(-1e-3, 1e-3, 40)])
        n = rng.normal(size=(40, 3))
        n /= np.linalg.norm(n, axis=1, keepdims=True)
        idx, w = skinning(p, g)
        tgt = p + rng.normal(scale=0.005, size=p.shape)
        worst["corr"] = max(worst["corr"], _rel_err(
            residuals_corr(p, idx, w, g, tgt),
            lambda y: residuals_corr(p, idx, w, g.with_params(y), tgt, want_jac=False).flat, x))

        warped, nf = warp_with_params(p, n, idx, w, g)
        sel, obs = data_associations(warped, depth, k, 0.015)
        block = residuals_data(p, n, idx, w, g, depth, k, normals_fixed=nf, robust_percentile=None)

        # association and normals are held at the linearization point
        def data_fun(y, sel=sel, obs=obs, nf=nf, idx=idx, w=w, p=p, g=g):
            pos, _ = warp_with_params(p[sel], None, idx[sel], w[sel], g.with_params(y))
            return np.einsum("mi,mi->m", nf[sel], pos - obs)

        worst["data"] = max(worst["data"], _rel_err(block, data_fun, x))
    return worst


def _lm_runs() -> list:
    """LM on a rigid shift and on bump deformations of a rendered sheet."""
    from dataclasses import replace

    from supertrack.sim import BumpSpec, SheetConfig

    k = default_intrinsics(320, 240)
    runs = []
    base = SheetConfig()
    d0, x0, y0 = DeformingSheet(base).render(k, 0)
    smap = fuse_frame(SurfelMap(), d0, None, None, k, 0)
    graph = sample_ed_nodes(smap, None, 0.007, np.random.default_rng(0))
    shift = np.array([0.003, -0.002, 0.0033])
    moved, _, _ = DeformingSheet(replace(base, center=tuple(np.array(base.center) + shift))).render(k, 0)
    runs.append(lm_optimize(smap, graph, FrameObservation(moved, k)))
    bumped = DeformingSheet(replace(base, bumps=[BumpSpec()]))
    for frame in (5, 10, 15):
        runs.append(lm_optimize(smap, graph, FrameObservation(bumped.render(k, frame)[0], k)))
    return runs


def check_solver_suite() -> Outcome:
    rng = np.random.default_rng(42)
    jac = _jacobian_errors(rng)
    jac_ok = all(v < 1e-4 for v in jac.values())

    runs = _lm_runs()
    mono_ok = all(all(b <= a for a, b in zip(r.accepted_costs, r.accepted_costs[1:])) for r in runs)
    mono_ok &= all(r.final_cost < r.initial_cost for r in runs)

    pcg_worst = 0.0
    for _ in range(20):
        n = int(rng.integers(2, 201))
        m = rng.normal(size=(n, n))
        a = m @ m.T / n + np.eye(n)
        b = rng.normal(size=n)
        x = pcg_solve(a, b, iters=4 * n, tol=1e-15)
        pcg_worst = max(pcg_worst, float(np.max(np.abs(x - np.linalg.solve(a, b)))))
    pcg_ok = pcg_worst < 1e-8

    zero_ok = True
    for _ in range(10):
        g = EDGraph.from_nodes(rng.normal(scale=0.05, size=(20, 3)))
        g.trans[:] = rng.normal(scale=0.01, size=3)
        zero_ok &= residuals_arap(g).energy() == 0.0
        q = rng.normal(size=(20, 4))
        g.quats = q / np.linalg.norm(q, axis=1, keepdims=True)
        zero_ok &= bool(np.all(np.abs(residuals_rot(g).values) <= 1e-13))
    g = EDGraph.from_nodes(rng.normal(size=(20, 3)))
    zero_ok &= residuals_rot(g).energy() == 0.0

    ok = jac_ok and mono_ok and pcg_ok and zero_ok
    jac_txt = ", ".join(f"{k} {v:.1e}" for k, v in jac.items())
    return Outcome("solver property suite", ok,
                   f"(a) worst Jacobian rel. error {jac_txt} (limit 1e-4); "
                   f"(b) accepted costs monotone in {len(runs)} LM runs: {mono_ok}; "
                   f"(c) PCG vs direct worst {pcg_worst:.1e} on 20 SPD systems (limit 1e-8); "
                   f"(d) ARAP/rotation zeros: {zero_ok}")


# ---- 5. warp equivalence ----------------------------------------------------------------------------

def check_warp_equivalence() -> Outcome:
    rng = np.random.default_rng(7)
    worst_p = worst_n = 0.0
    for _ in range(10):
        g = random_graph(rng, n_nodes=int(rng.integers(5, 30)))
        for _ in range(1000):
            n = rng.normal(size=3)
            s = Surfel(rng.uniform(-0.05, 0.05, 3), n / np.linalg.norm(n))
            ref_p, ref_n = dense_warp(s.p, s.n, g)
            worst_p = max(worst_p, float(np.max(np.abs(warp_point(s, g) - ref_p))))
            worst_n = max(worst_n, float(np.max(np.abs(warp_normal(s, g) - ref_n))))
    ok = worst_p < 1e-12 and worst_n < 1e-12
    return Outcome("warp equivalence", ok,
                   f"worst deviation from the dense reference over 10 graphs x 1000 surfels: "
                   f"position {worst_p:.1e} m, normal {worst_n:.1e} (limit 1e-12)")


# ---- 6. rigid static scene ------------------------------------------------------------------------------

def _scene_rms(points, sheet, chain, theta, k) -> tuple[float, float]:
    """RMS distance along the viewing ray to the nearest true surface, and to the sheet alone."""
    rays = points / points[:, 2:3]
    scale = np.linalg.norm(rays, axis=1)
    d_sheet, _, _ = sheet.intersect(rays, 0)
    gap_sheet = np.abs(points[:, 2] - d_sheet) * scale
    tool = render_tool_depth(chain, theta, HandEyeState(default_nominal_hand_eye(), AxisAngleTranslation()), k)
    u = np.clip(np.rint(k.fx * rays[:, 0] + k.cx).astype(int), 0, k.width - 1)
    v = np.clip(np.rint(k.fy * rays[:, 1] + k.cy).astype(int), 0, k.height - 1)
    gap_tool = np.abs(points[:, 2] - tool[v, u]) * scale
    gap = np.fmin(gap_sheet, gap_tool)
    return float(np.sqrt(np.nanmean(gap ** 2))), float(np.sqrt(np.nanmean(gap_sheet ** 2)))


def check_rigid_scene(workdir: Path) -> Outcome:
    cfg = scenario("static", frames=15)
    data = make_sequence(cfg, 0, workdir / "static")
    res = run_pipeline(data, with_seed(load_config(CONFIGS / "synthetic.json"), 0), None)
    counts = np.array([r["n_surfels"] for r in res.rows])
    after = counts[9:]
    drift = float(np.max(np.abs(after - after[0])) / after[0])
    ds = Dataset(data)
    rms, rms_sheet = _scene_rms(res.smap.positions, DeformingSheet(cfg.sheet), ds.chain, ds.joints(0), ds.k)
    solved = res.rows[1:]
    iters_ok = all(r["lm_iters"] <= 1 for r in solved)
    step = max(r["lm_max_step"] for r in solved)
    param_dev = float(np.max(np.abs(res.graph.params() - res.graph.identity_params(len(res.graph)))))
    ok = drift <= 0.01 and rms < 5e-4 and iters_ok and step < 1e-6 and param_dev < 1e-6
    return Outcome("rigid-scene sanity", ok,
                   f"surfel count drift after 10 frames {drift * 100:.2f}% (limit 1%); map RMS to the true "
                   f"scene surface {rms * 1e3:.4f} mm (limit 0.5 mm; sheet only {rms_sheet * 1e3:.4f} mm); "
                   f"LM iterations <= 1: {iters_ok}; max step {step:.1e}; parameter deviation {param_dev:.1e} "
                   f"(limit 1e-6)")


# ---- 7. end-to-end determinism ------------------------------------------------------------------------------

def _cli(*args, cwd):
    subprocess.run([sys.executable, "-m", "supertrack", *args], cwd=cwd, check=True,
                   capture_output=True, text=True)


def check_determinism(workdir: Path) -> Outcome:
    scen = workdir / "scenario.json"
    scen.write_text(json.dumps({"name": "bump", "frames": 6, "width": 160, "height": 120, "tracked_points": 5}))
    outputs = []
    for i in range(2):
        run = workdir / f"det{i}"
        _cli("simulate", "--config", str(scen), "--seed", "3", "--out", str(run / "data"), cwd=ROOT)
        _cli("run", "--data", str(run / "data"), "--config", str(CONFIGS / "synthetic.json"), "--seed", "3",
             "--out", str(run / "run"), cwd=ROOT)
        _cli("eval", "--data", str(run / "data"), "--run", str(run / "run"), "--out", str(run / "eval"), cwd=ROOT)
        outputs.append((run / "eval/metrics.csv").read_bytes())
    ok = outputs[0] == outputs[1] and len(outputs[0]) > 0
    return Outcome("end-to-end determinism", ok,
                   f"metrics.csv from two simulate/run/eval executions identical: {outputs[0] == outputs[1]} "
                   f"({len(outputs[0])} bytes)")


# ---- pytest entry points ---------------------------------------------------------------------------------------

@pytest.fixture
def report(capsys):
    def emit(outcome: Outcome):
        with capsys.disabled():
            print("\n" + outcome.line)
        assert outcome.ok, outcome.line
    return emit


def test_hand_eye_recovery(report):
    report(check_hand_eye_recovery())


def test_mask_iou(report):
    report(check_mask_iou())


def test_deformable_tracking(report, tmp_path):
    report(check_deformable_tracking(tmp_path))


def test_solver_property_suite(report):
    report(check_solver_suite())


def test_warp_equivalence(report):
    report(check_warp_equivalence())


def test_rigid_scene_sanity(report, tmp_path):
    report(check_rigid_scene(tmp_path))


def test_end_to_end_determinism(report, tmp_path):
    report(check_determinism(tmp_path))


if __name__ == "__main__":
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        checks = [check_hand_eye_recovery, check_mask_iou, lambda: check_deformable_tracking(tmp),
                  check_solver_suite, check_warp_equivalence, lambda: check_rigid_scene(tmp),
                  lambda: check_determinism(tmp)]
        results = [c() for c in checks]
        for r in results:
            print(r.line)
        sys.exit(0 if all(r.ok for r in results) else 1)
