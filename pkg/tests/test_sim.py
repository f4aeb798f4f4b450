import json
from dataclasses import replace

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from supertrack.dataset import Dataset
from supertrack.errors import BehindCamera
from supertrack.geometry import AxisAngleTranslation, CameraIntrinsics
from supertrack.kinematics import HandEyeState, ImageLine, project_cylinder, project_marker
from supertrack.sim import (
    BumpSpec,
    DeformingSheet,
    GraspSpec,
    SheetConfig,
    add_depth_noise,
    default_chain,
    default_intrinsics,
    default_nominal_hand_eye,
    default_true_error,
    emit_correspondences,
    emit_tool_features,
    joint_trajectory,
    make_sequence,
    scenario,
)

K = default_intrinsics(160, 120)


def _rays(k):
    v, u = np.mgrid[0:k.height, 0:k.width]
    return np.stack([(u - k.cx) / k.fx, (v - k.cy) / k.fy, np.ones(u.shape)], axis=-1)


# ---- rendering --------------------------------------------------------------------

def test_fronto_parallel_plane_depth():
    sheet = DeformingSheet(SheetConfig(center=(0, 0, 0.5), tilt=(0, 0), size=(2.0, 2.0)))
    depth, _, _ = sheet.render(K, 0)
    assert np.all(np.isfinite(depth))
    assert np.max(np.abs(depth - 0.5)) < 1e-9


def test_tilted_plane_matches_ray_plane_intersection():
    center = np.array([0.0, 0.0, 0.5])
    sheet = DeformingSheet(SheetConfig(center=tuple(center), tilt=(np.pi / 4, 0), size=(0.5, 0.5)))
    depth, _, _ = sheet.render(K, 0)
    n = Rotation.from_rotvec([np.pi / 4, 0, 0]).apply([0.0, 0.0, 1.0])
    rays = _rays(K)
    ref = (center @ n) / (rays @ n)
    hit = np.isfinite(depth)
    assert hit.mean() > 0.5
    assert np.max(np.abs(depth[hit] - ref[hit])) < 1e-9


def test_sheet_outside_view_is_nan():
    sheet = DeformingSheet(SheetConfig(center=(0, 0, 0.5), tilt=(0, 0), size=(0.01, 0.01)))
    depth, x, y = sheet.render(K, 0)
    assert np.isnan(depth[0, 0]) and np.isnan(x[0, 0]) and np.isnan(y[0, 0])
    assert np.isfinite(depth[60, 80])


def test_depth_noise_statistics():
    rng = np.random.default_rng(3)
    depth = np.full((400, 250), 0.5)
    noisy = add_depth_noise(depth, 0.001, 0.0, rng)
    assert abs(np.std(noisy - depth) - 0.001) < 1e-4
    assert abs(np.mean(noisy - depth)) < 1e-5


def test_speckle_drops_pixels():
    noisy = add_depth_noise(np.full((200, 200), 0.5), 0.0, 0.1, np.random.default_rng(0))
    assert abs(np.isnan(noisy).mean() - 0.1) < 0.01


def test_static_sheet_is_frame_invariant():
    sheet = DeformingSheet(SheetConfig())
    d0, _, _ = sheet.render(K, 0)
    d7, _, _ = sheet.render(K, 7)
    assert np.array_equal(d0, d7, equal_nan=True)


def test_bump_rises_toward_camera():
    sheet = DeformingSheet(SheetConfig(center=(0, 0, 0.2), tilt=(0, 0), bumps=[BumpSpec(lateral_ratio=0.0)]))
    # full envelope at half a period: 1 s at 0.5 Hz, i.e. frame 30
    p = sheet.surface(0.0, 0.0, 30)
    assert np.allclose(p, [0, 0, 0.2 - 0.01])


def test_surface_normal_matches_finite_differences():
    sheet = DeformingSheet(SheetConfig(bumps=[BumpSpec()]))
    x, y, f, h = 0.01, -0.005, 12, 1e-6
    px = (sheet.surface(x + h, y, f) - sheet.surface(x - h, y, f)) / (2 * h)
    py = (sheet.surface(x, y + h, f) - sheet.surface(x, y - h, f)) / (2 * h)
    ax, ay = sheet.tangents(x, y, f)
    assert np.allclose(ax, px, atol=1e-8) and np.allclose(ay, py, atol=1e-8)
    n = np.cross(px, py)
    n /= np.linalg.norm(n)
    assert np.allclose(np.abs(sheet.normal(x, y, f) @ n), 1.0)


# ---- tool features -------------------------------------------------------------------

def test_noise_free_features_equal_projections():
    chain = default_chain()
    k = default_intrinsics()
    err = default_true_error()
    he = HandEyeState(default_nominal_hand_eye(), err)
    for theta in joint_trajectory(10)[::3]:
        markers, lines = emit_tool_features(chain, theta, err, k, 0.0, 0.0, np.random.default_rng(0))
        ref = []
        for m in chain.markers:
            try:
                uv = project_marker(chain, theta, he, m.marker_id, k)
            except BehindCamera:
                continue
            if 0 <= uv[0] < k.width and 0 <= uv[1] < k.height:
                ref.append(uv)
        assert np.allclose(markers, np.array(ref).reshape(-1, 2), atol=1e-12)
        ref_lines = [ImageLine.canonical(ln.rho, ln.phi) for ln in project_cylinder(chain, theta, he, None, k)]
        assert len(lines) == 2
        for a, b in zip(lines, ref_lines):
            assert np.isclose(a.rho, b.rho) and np.isclose(a.phi, b.phi)


def test_full_dropout_gives_no_features():
    markers, lines = emit_tool_features(default_chain(), joint_trajectory(1)[0], default_true_error(),
                                        default_intrinsics(), 1.0, 1.0, np.random.default_rng(0))
    assert markers.shape == (0, 2) and lines == []


def test_marker_noise_has_requested_spread():
    chain = default_chain()
    k = default_intrinsics()
    theta = joint_trajectory(1)[0]
    err = default_true_error()
    clean, _ = emit_tool_features(chain, theta, err, k, 0.0, 0.0, np.random.default_rng(0))
    rng = np.random.default_rng(5)
    diffs = []
    for _ in range(400):
        noisy, _ = emit_tool_features(chain, theta, err, k, 1.0, 0.0, rng)
        if noisy.shape == clean.shape:
            diffs.append(noisy - clean)
    std = np.std(np.concatenate(diffs))
    assert abs(std - 1.0) < 0.05


# ---- correspondences ------------------------------------------------------------------

def test_static_correspondences_are_identity():
    sheet = DeformingSheet(SheetConfig())
    pairs = emit_correspondences(sheet, 0, 1, K, 200, 0.0, np.random.default_rng(0))
    assert len(pairs) == 200
    assert np.allclose(pairs[:, :2], pairs[:, 2:], atol=1e-6)


def test_zero_count_gives_empty_pairs():
    pairs = emit_correspondences(DeformingSheet(SheetConfig()), 0, 1, K, 0, 0.0, np.random.default_rng(0))
    assert pairs.shape == (0, 4)


def test_bump_correspondences_match_analytic_motion():
    k = default_intrinsics(320, 240)
    c = np.array([0.0, 0.0, 0.2])
    bump = BumpSpec(sigma=0.015, amplitude=0.005, frequency=0.5, lateral_ratio=0.0)
    sheet = DeformingSheet(SheetConfig(center=tuple(c), tilt=(0, 0), size=(0.2, 0.2), bumps=[bump]), fps=30)
    pairs = emit_correspondences(sheet, 0, 30, k, 300, 0.0, np.random.default_rng(2))
    assert len(pairs) > 250
    # frame 0 is the flat plane z = 0.2; frame 30 has the full 5 mm bump along -z
    u, v = pairs[:, 0], pairs[:, 1]
    x = (u - k.cx) / k.fx * c[2]
    y = (v - k.cy) / k.fy * c[2]
    h = 0.005 * np.exp(-(x**2 + y**2) / (2 * 0.015**2))
    z = c[2] - h
    ref = np.column_stack([k.fx * x / z + k.cx, k.fy * y / z + k.cy])
    assert np.max(np.abs(pairs[:, 2:] - ref)) < 1e-6


# ---- grasp schedule -------------------------------------------------------------------

def test_grasp_phases_and_pull():
    g = GraspSpec(phase_frames=(10, 10, 15, 15, 10))
    assert [g.phase_at(f) for f in (0, 9, 10, 19, 20, 34, 35, 49, 50, 59, 200)] == [1, 1, 2, 2, 3, 3, 4, 4, 5, 5, 5]
    assert g.pull(0) == g.pull(15) == g.pull(20) == g.pull(55) == 0.0
    assert np.isclose(g.pull(35), 0.015)
    assert 0.0 < g.pull(27) < 0.015
    assert g.pull(30) > g.pull(25)


def test_scenario_presets():
    assert scenario("bump").sheet.bumps
    s = scenario("static")
    assert s.static_tool and s.depth_sigma == 0.0 and s.true_w == (0.0, 0.0, 0.0)
    gs = scenario("grasp-stretch")
    assert gs.frames == sum(gs.sheet.grasp.phase_frames)
    assert scenario("bump", frames=3).frames == 3
    with pytest.raises(ValueError):
        scenario("nope")


def test_joint_trajectory_static():
    t = joint_trajectory(5, static=True)
    assert np.all(t == t[0])
    assert joint_trajectory(5).shape == (5, 5)


# ---- dataset writing -------------------------------------------------------------------

def _small(name="bump", frames=3, **kw):
    return scenario(name, width=160, height=120, frames=frames, tracked_points=5, **kw)


def test_make_sequence_is_byte_identical(tmp_path):
    cfg = _small()
    a = make_sequence(cfg, 7, tmp_path / "a")
    b = make_sequence(cfg, 7, tmp_path / "b")
    files_a = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
    files_b = sorted(p.relative_to(b) for p in b.rglob("*") if p.is_file())
    assert files_a == files_b
    for rel in files_a:
        assert (a / rel).read_bytes() == (b / rel).read_bytes(), rel
    c = make_sequence(cfg, 8, tmp_path / "c")
    assert (c / "depth/000001.raw").read_bytes() != (a / "depth/000001.raw").read_bytes()


def test_make_sequence_layout(tmp_path):
    out = make_sequence(_small(frames=4), 1, tmp_path / "d")
    assert len(list((out / "depth").glob("*.raw"))) == 4
    ds = Dataset(out)
    ds.validate()
    assert ds.n_frames == 4 and ds.k.width == 160
    assert ds.depth(0).shape == (120, 160)
    truth = ds.ground_truth()
    assert np.allclose(truth["true_error"]["w"], default_true_error().w)
    assert len(truth["tracked_pixels"]) == 4 and len(truth["tracked_pixels"][0]) == 5
    assert ds.features(0).pairs.shape == (0, 4)
    assert len(ds.features(1).pairs) > 0
    assert ds.color(0).shape == (120, 160, 3)
    assert json.loads((out / "manifest.json").read_text())["seed"] == 1


def test_grasp_sequence_records_phases(tmp_path):
    sheet = SheetConfig(grasp=GraspSpec(phase_frames=(1, 1, 2, 2, 1)))
    cfg = replace(_small("grasp-stretch", frames=7), sheet=sheet)
    ds = Dataset(make_sequence(cfg, 0, tmp_path / "g"))
    assert [ds.features(f).phase for f in range(7)] == [1, 2, 3, 3, 4, 4, 5]
    assert ds.ground_truth()["phases"] == [1, 2, 3, 3, 4, 4, 5]


def test_true_error_is_applied(tmp_path):
    cfg = _small(frames=1, marker_sigma_px=0.0, dropout=0.0)
    ds = Dataset(make_sequence(cfg, 0, tmp_path / "t"))
    err = AxisAngleTranslation(cfg.true_w, cfg.true_b)
    ref, _ = emit_tool_features(ds.chain, ds.joints(0), err, ds.k, 0.0, 0.0, np.random.default_rng(0))
    assert np.allclose(ds.features(0).markers, ref)
    assert isinstance(ds.k, CameraIntrinsics)
