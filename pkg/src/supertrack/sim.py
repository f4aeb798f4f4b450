"""Synthetic ground truth: a deforming tissue sheet, a moving instrument and
noisy feature emission.

The sheet is a parametric surface ``P(X, Y, t)`` over material coordinates
``(X, Y)``. Depth rendering solves the per-pixel ray/surface intersection with
Newton's method, which also yields the material coordinate seen by every
pixel; texture and ground-truth correspondences come from that.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .dataset import FrameFeatures, write_depth, write_features, write_ppm
from .errors import DatasetError
from .geometry import (
    AxisAngleTranslation,
    CameraIntrinsics,
    RigidTransform,
    pixel_grid,
    project_point,
    rotation_from_axis_angle,
)
from .kinematics import (
    PRISMATIC,
    REVOLUTE,
    HandEyeState,
    ImageLine,
    Joint,
    KinematicChain,
    LinkPoint,
    Shaft,
    cylinder_lines,
    dilate_mask,
    marker_points_base,
    render_tool_depth,
    shaft_axis_base,
)

log = logging.getLogger(__name__)


# --------------------------------------------------------------------------
# instrument


def default_intrinsics(width: int = 640, height: int = 480) -> CameraIntrinsics:
    f = 600.0 * width / 640.0
    return CameraIntrinsics(f, f, (width - 1) / 2.0, (height - 1) / 2.0, width, height)


def default_chain() -> KinematicChain:
    """A five-joint instrument arm: yaw, pitch, insertion, roll, wrist pitch.

    The base frame sits at the remote center of motion; the shaft lies along the
    insertion axis and ends at the wrist.
    """
    eye = RigidTransform.identity()
    x, y, z = np.eye(3)
    joints = (
        Joint(eye, REVOLUTE, y),
        Joint(eye, REVOLUTE, x),
        Joint(eye, PRISMATIC, z),
        Joint(eye, REVOLUTE, z),
        Joint(eye, REVOLUTE, x),
    )
    r = 0.0042
    points = (
        LinkPoint(4, [r, 0.0, -0.006], 0, 0.0015),
        LinkPoint(4, [0.0, -r, -0.014], 1, 0.0015),
        LinkPoint(4, [-r, 0.0, -0.024], 2, 0.0015),
        LinkPoint(4, [0.0, r, -0.034], 3, 0.0015),
        LinkPoint(5, [0.0035, 0.0, 0.006], 4, 0.0025),
        LinkPoint(5, [-0.003, 0.003, 0.012], 5, 0.0025),
        LinkPoint(5, [0.0, 0.0, 0.004], None, 0.0035),
    )
    shaft = Shaft(4, [0.0, 0.0, 0.0], [0.0, 0.0, 1.0], r, -0.3, 0.0)
    return KinematicChain(joints, points, shaft)


def default_nominal_hand_eye() -> RigidTransform:
    """Base frame at the remote center, pointing the shaft into the workspace."""
    rcm = np.array([0.0, -0.06, 0.0])
    target = np.array([0.0, 0.022, 0.07])
    ez = (target - rcm) / np.linalg.norm(target - rcm)
    ex = np.array([1.0, 0.0, 0.0])
    ey = np.cross(ez, ex)
    return RigidTransform(np.column_stack([ex, ey, ez]), rcm)


def default_true_error() -> AxisAngleTranslation:
    return AxisAngleTranslation([0.02, -0.03, 0.025], [0.002, -0.003, 0.0015])


def joint_trajectory(n_frames: int, fps: float = 30.0, static: bool = False) -> np.ndarray:
    """Scripted joint values ``(n_frames, 5)`` sweeping the tool across the view."""
    t = np.arange(n_frames) / fps
    if static:
        t = np.zeros(n_frames)
    yaw = 0.3 * np.sin(2 * np.pi * 0.23 * t)
    pitch = 0.2 * np.sin(2 * np.pi * 0.31 * t + 0.7)
    insertion = 0.092 + 0.01 * np.sin(2 * np.pi * 0.19 * t + 1.3)
    roll = 0.5 * np.sin(2 * np.pi * 0.13 * t)
    wrist = 0.35 * np.sin(2 * np.pi * 0.27 * t + 0.4)
    return np.stack([yaw, pitch, insertion, roll, wrist], axis=1)


def emit_tool_features(chain: KinematicChain, theta, true_error: AxisAngleTranslation,
                       k: CameraIntrinsics, sigma_px: float, p_dropout: float,
                       rng: np.random.Generator, nominal: RigidTransform | None = None,
                       sigma_phi: float | None = None):
    """Noisy marker pixels and shaft lines as a detector would report them.

    Markers outside the image or behind the camera are not reported. Line angle
    noise defaults to ``sigma_px / 200`` rad.
    """
    nominal = nominal if nominal is not None else default_nominal_hand_eye()
    cam = HandEyeState(nominal, true_error).transform()
    pts = cam.apply(marker_points_base(chain, theta))
    markers = []
    for p in pts:
        keep = rng.random() >= p_dropout
        noise = rng.standard_normal(2) * sigma_px
        if p[2] <= 1e-9 or not keep:
            continue
        uv = project_point(k, p) + noise
        if 0 <= uv[0] < k.width and 0 <= uv[1] < k.height:
            markers.append(uv)
    markers = np.array(markers).reshape(-1, 2)
    lines = []
    if chain.shaft is not None:
        a0, d0 = shaft_axis_base(chain, theta)
        rho, phi = cylinder_lines(k, cam.apply(a0), cam.rotation @ d0, chain.shaft.radius)
        s_phi = sigma_px / 200.0 if sigma_phi is None else sigma_phi
        for r, ph in zip(rho, phi):
            keep = rng.random() >= p_dropout
            n_r, n_p = rng.standard_normal(2) * (sigma_px, s_phi)
            if keep and np.isfinite(r):
                lines.append(ImageLine.canonical(r + n_r, ph + n_p))
    return markers, lines


# --------------------------------------------------------------------------
# deforming sheet


@dataclass
class BumpSpec:
    """Gaussian bump rising toward the camera with a sinusoidal envelope.

    ``lateral_ratio`` adds an in-plane radial push proportional to the height,
    so surface points also slide sideways as the bump grows.
    """

    center: tuple[float, float] = (0.0, 0.0)
    sigma: float = 0.015
    amplitude: float = 0.01
    frequency: float = 0.5
    lateral_ratio: float = 0.3

    def envelope(self, t):
        return 0.5 * (1.0 - np.cos(2.0 * np.pi * self.frequency * np.asarray(t, float)))


GRASP_PHASES = ("align", "approach", "stretch", "release", "resume")


@dataclass
class GraspSpec:
    """Pinch-pull displacement replaying the five-step grasp schedule.

    The tissue under ``center`` is pulled along the sheet normal while the
    gripper travels from the approach offset ``d_low`` to the stretch offset
    ``d_high``, and is placed back during the release phase.
    """

    center: tuple[float, float] = (0.005, 0.0)
    sigma: float = 0.015
    d_low: float = 0.005
    d_high: float = 0.02
    phase_frames: tuple[int, int, int, int, int] = (10, 10, 15, 15, 10)
    lateral_ratio: float = 0.0

    def phase_at(self, frame: int) -> int:
        """1-based phase index; frames past the schedule stay in the last phase."""
        edges = np.cumsum(self.phase_frames)
        return int(min(np.searchsorted(edges, frame, side="right"), 4)) + 1

    def pull(self, frame) -> float:
        edges = np.concatenate([[0], np.cumsum(self.phase_frames)])
        stretch = self.d_high - self.d_low
        phase = self.phase_at(frame)
        if phase == 3:
            return stretch * _smoothstep((frame - edges[2]) / max(self.phase_frames[2], 1))
        if phase == 4:
            return stretch * (1.0 - _smoothstep((frame - edges[3]) / max(self.phase_frames[3], 1)))
        return 0.0


def _smoothstep(x):
    x = np.clip(x, 0.0, 1.0)
    return x * x * (3.0 - 2.0 * x)


@dataclass
class SheetConfig:
    center: tuple[float, float, float] = (0.0, 0.004, 0.13)
    tilt: tuple[float, float] = (0.25, -0.1)
    size: tuple[float, float] = (0.08, 0.06)
    bumps: list[BumpSpec] = field(default_factory=list)
    grasp: GraspSpec | None = None

    @classmethod
    def from_dict(cls, d: dict) -> SheetConfig:
        d = dict(d)
        bumps = [BumpSpec(**{**b, "center": tuple(b.get("center", (0.0, 0.0)))})
                 for b in d.pop("bumps", [])]
        g = d.pop("grasp", None)
        grasp = None
        if g is not None:
            g = dict(g)
            g["center"] = tuple(g.get("center", (0.0, 0.0)))
            if "phase_frames" in g:
                g["phase_frames"] = tuple(g["phase_frames"])
            grasp = GraspSpec(**g)
        for key in ("center", "tilt", "size"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(bumps=bumps, grasp=grasp, **d)

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))


class DeformingSheet:
    """Parametric surface ``P(X, Y, t) = c + X e1 + Y e2 + u_x e1 + u_y e2 + h e3``.

    ``e3`` is the rest normal, pointing toward the camera. Times are in frames;
    ``fps`` converts them to seconds for the bump envelopes.
    """

    def __init__(self, cfg: SheetConfig, fps: float = 30.0):
        self.cfg = cfg
        self.fps = fps
        rx, ry = cfg.tilt
        rot = rotation_from_axis_angle([rx, 0.0, 0.0]) @ rotation_from_axis_angle([0.0, ry, 0.0])
        self.e1 = rot @ np.array([1.0, 0.0, 0.0])
        self.e2 = rot @ np.array([0.0, 1.0, 0.0])
        self.e3 = rot @ np.array([0.0, 0.0, -1.0])
        self.origin = np.asarray(cfg.center, dtype=float)
        self.half = np.asarray(cfg.size, dtype=float) / 2.0

    def _gaussian_terms(self, x, y, center, sigma, amp, lateral):
        """Displacement ``(ux, uy, h)`` of one Gaussian family and its X/Y partials."""
        dx = x - center[0]
        dy = y - center[1]
        g = np.exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma))
        gx = -g * dx / sigma ** 2
        gy = -g * dy / sigma ** 2
        h = amp * g
        lat = lateral * amp / sigma
        ux, uy = lat * g * dx, lat * g * dy
        d_x = (lat * (gx * dx + g), lat * gx * dy, amp * gx)
        d_y = (lat * gy * dx, lat * (gy * dy + g), amp * gy)
        return (ux, uy, h), d_x, d_y

    def _displacement(self, x, y, frame):
        zero = np.zeros_like(x)
        disp = [zero.copy(), zero.copy(), zero.copy()]
        ddx = [zero.copy(), zero.copy(), zero.copy()]
        ddy = [zero.copy(), zero.copy(), zero.copy()]
        terms = [(b.center, b.sigma, b.amplitude * float(b.envelope(frame / self.fps)), b.lateral_ratio)
                 for b in self.cfg.bumps]
        if self.cfg.grasp is not None:
            gr = self.cfg.grasp
            terms.append((gr.center, gr.sigma, gr.pull(frame), gr.lateral_ratio))
        for center, sigma, amp, lateral in terms:
            if amp == 0.0:
                continue
            u, dxs, dys = self._gaussian_terms(x, y, center, sigma, amp, lateral)
            for i in range(3):
                disp[i] += u[i]
                ddx[i] += dxs[i]
                ddy[i] += dys[i]
        return disp, ddx, ddy

    def surface(self, x, y, frame) -> np.ndarray:
        """Camera-frame points ``(..., 3)`` for material coordinates at ``frame``."""
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        (ux, uy, h), _, _ = self._displacement(x, y, frame)
        return (self.origin + (x + ux)[..., None] * self.e1 + (y + uy)[..., None] * self.e2
                + h[..., None] * self.e3)

    def tangents(self, x, y, frame) -> tuple[np.ndarray, np.ndarray]:
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        _, (uxx, uyx, hx), (uxy, uyy, hy) = self._displacement(x, y, frame)
        px = (1 + uxx)[..., None] * self.e1 + uyx[..., None] * self.e2 + hx[..., None] * self.e3
        py = uxy[..., None] * self.e1 + (1 + uyy)[..., None] * self.e2 + hy[..., None] * self.e3
        return px, py

    def normal(self, x, y, frame) -> np.ndarray:
        px, py = self.tangents(x, y, frame)
        n = np.cross(px, py)
        n /= np.linalg.norm(n, axis=-1, keepdims=True)
        # orient toward the camera side, like the rest normal
        flip = np.sum(n * self.e3, axis=-1) < 0
        return np.where(flip[..., None], -n, n)

    def intersect(self, rays, frame, iters: int = 20, margin: float = 0.03):
        """Ray/surface intersection for rays ``(N, 3)`` with unit z component.

        Returns ``(depth, X, Y)``; depth is NaN where the ray misses the sheet or
        Newton's method does not converge. Only rays that hit the rest plane
        within ``margin`` of the sheet are iterated.
        """
        rays = np.asarray(rays, dtype=float).reshape(-1, 3)
        n = len(rays)
        depth = np.full(n, np.nan)
        xs = np.full(n, np.nan)
        ys = np.full(n, np.nan)
        denom = rays @ self.e3
        with np.errstate(divide="ignore", invalid="ignore"):
            s0 = (self.origin @ self.e3) / denom
        rel = s0[:, None] * rays - self.origin
        x0 = rel @ self.e1
        y0 = rel @ self.e2
        cand = np.nonzero(np.isfinite(s0) & (s0 > 0) & (np.abs(x0) <= self.half[0] + margin)
                          & (np.abs(y0) <= self.half[1] + margin))[0]
        r = rays[cand]
        x, y, s = x0[cand], y0[cand], s0[cand]
        active = np.arange(len(cand))
        for _ in range(iters):
            if len(active) == 0:
                break
            ra = r[active]
            f = self.surface(x[active], y[active], frame) - s[active, None] * ra
            px, py = self.tangents(x[active], y[active], frame)
            # Cramer's rule on [px py -r] step = f
            c = -ra
            det = np.einsum("ni,ni->n", px, np.cross(py, c))
            det = np.where(np.abs(det) > 1e-300, det, np.nan)
            dx = np.einsum("ni,ni->n", f, np.cross(py, c)) / det
            dy = np.einsum("ni,ni->n", px, np.cross(f, c)) / det
            ds = np.einsum("ni,ni->n", px, np.cross(py, f)) / det
            x[active] -= dx
            y[active] -= dy
            s[active] -= ds
            moving = ~(np.abs(dx) + np.abs(dy) + np.abs(ds) < 1e-14)
            active = active[moving & np.isfinite(ds)]
        f = self.surface(x, y, frame) - s[:, None] * r
        good = (np.linalg.norm(f, axis=1) < 1e-10) & (np.abs(x) <= self.half[0]) \
            & (np.abs(y) <= self.half[1]) & (s > 0)
        depth[cand] = np.where(good, s, np.nan)
        xs[cand] = np.where(good, x, np.nan)
        ys[cand] = np.where(good, y, np.nan)
        return depth, xs, ys

    def render(self, k: CameraIntrinsics, frame):
        """Depth and material coordinate images of shape ``(H, W)``."""
        u, v = pixel_grid(k)
        rays = np.stack([(u - k.cx) / k.fx, (v - k.cy) / k.fy, np.ones_like(u)], axis=-1)
        d, x, y = self.intersect(rays.reshape(-1, 3), frame)
        shape = u.shape
        return d.reshape(shape), x.reshape(shape), y.reshape(shape)


def texture(x, y) -> np.ndarray:
    """Procedural tissue-like color for material coordinates; NaN maps to black."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    a = 2 * np.pi / 0.013
    b = 2 * np.pi / 0.021
    pattern = 0.5 + 0.25 * np.sin(a * x + 0.6 * np.sin(b * y)) + 0.25 * np.sin(b * y + 0.8 * np.cos(a * x * 0.7))
    rgb = np.stack([0.55 + 0.4 * pattern, 0.2 + 0.3 * pattern, 0.25 + 0.2 * (1 - pattern)], axis=-1)
    rgb = np.clip(rgb, 0.0, 1.0)
    return np.where(np.isfinite(rgb), rgb, 0.0)


def render_depth(surface: DeformingSheet, k: CameraIntrinsics, frame, sigma_d: float = 0.0,
                 speckle: float = 0.0, rng: np.random.Generator | None = None) -> np.ndarray:
    """Sheet depth image with NaN background, optional Gaussian noise and speckle dropout."""
    depth, _, _ = surface.render(k, frame)
    return add_depth_noise(depth, sigma_d, speckle, rng)


def add_depth_noise(depth, sigma_d: float, speckle: float, rng) -> np.ndarray:
    depth = depth.copy()
    if sigma_d > 0 or speckle > 0:
        rng = rng if rng is not None else np.random.default_rng()
        noise = rng.standard_normal(depth.shape) * sigma_d
        drop = rng.random(depth.shape) < speckle
        depth = np.where(drop, np.nan, depth + noise)
    return depth


def emit_correspondences(surface: DeformingSheet, frame_prev, frame, k: CameraIntrinsics,
                         count: int, sigma_px: float, rng: np.random.Generator,
                         visible_prev: np.ndarray | None = None,
                         depth_now: np.ndarray | None = None, prev_maps=None) -> np.ndarray:
    """Ground-truth tracked pixel pairs ``(m_u, m_v, c_u, c_v)`` between two frames.

    Points are drawn from pixels that show the sheet at ``frame_prev`` (restricted
    to ``visible_prev`` when given) and followed through the material
    parameterization. Pairs whose target is off-image or hidden at ``frame``
    (compared against ``depth_now`` when given) are dropped. ``prev_maps`` may
    carry an already rendered ``(depth, X, Y)`` triple for ``frame_prev``.
    """
    if count <= 0:
        return np.zeros((0, 4))
    d_prev, x_prev, y_prev = prev_maps if prev_maps is not None else surface.render(k, frame_prev)
    ok = np.isfinite(d_prev)
    if visible_prev is not None:
        ok &= visible_prev
    vs, us = np.nonzero(ok)
    if len(us) == 0:
        return np.zeros((0, 4))
    pick = rng.choice(len(us), size=min(count, len(us)), replace=False)
    pick.sort()
    us, vs = us[pick], vs[pick]
    p_now = surface.surface(x_prev[vs, us], y_prev[vs, us], frame)
    keep = p_now[:, 2] > 1e-6
    uv = np.full((len(us), 2), np.nan)
    uv[keep] = project_point(k, p_now[keep])
    inside = keep & (uv[:, 0] > -0.5) & (uv[:, 0] < k.width - 0.5) & (uv[:, 1] > -0.5) \
        & (uv[:, 1] < k.height - 0.5)
    if depth_now is not None:
        ci = np.rint(np.where(inside, uv[:, 0], 0)).astype(int)
        ri = np.rint(np.where(inside, uv[:, 1], 0)).astype(int)
        dn = depth_now[ri, ci]
        inside &= np.isfinite(dn) & (np.abs(dn - p_now[:, 2]) < 0.002)
    pairs = np.column_stack([us, vs, uv])[inside].astype(float)
    noise = rng.standard_normal(pairs.shape) * sigma_px
    return pairs + noise


# --------------------------------------------------------------------------
# scenarios and dataset writing


@dataclass
class ScenarioConfig:
    name: str = "bump"
    frames: int = 50
    fps: float = 30.0
    width: int = 640
    height: int = 480
    sheet: SheetConfig = field(default_factory=lambda: SheetConfig(bumps=[BumpSpec()]))
    tool: bool = True
    static_tool: bool = False
    true_w: tuple[float, float, float] = tuple(default_true_error().w)
    true_b: tuple[float, float, float] = tuple(default_true_error().b)
    depth_sigma: float = 0.0005
    speckle: float = 0.002
    marker_sigma_px: float = 1.0
    dropout: float = 0.1
    corr_count: int = 500
    corr_sigma_px: float = 0.3
    tracked_points: int = 20

    @classmethod
    def from_dict(cls, d: dict) -> ScenarioConfig:
        d = dict(d)
        if "sheet" in d:
            d["sheet"] = SheetConfig.from_dict(d["sheet"])
        for key in ("true_w", "true_b"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["sheet"] = self.sheet.to_dict()
        return json.loads(json.dumps(out))


def scenario(name: str, **overrides) -> ScenarioConfig:
    """Named presets: ``bump``, ``static`` and ``grasp-stretch``."""
    if name == "bump":
        cfg = ScenarioConfig(name="bump", sheet=SheetConfig(bumps=[BumpSpec()]))
    elif name == "static":
        cfg = ScenarioConfig(name="static", sheet=SheetConfig(), static_tool=True, depth_sigma=0.0,
                             speckle=0.0, marker_sigma_px=0.0, dropout=0.0, corr_sigma_px=0.0,
                             true_w=(0.0, 0.0, 0.0), true_b=(0.0, 0.0, 0.0))
    elif name == "grasp-stretch":
        grasp = GraspSpec()
        cfg = ScenarioConfig(name="grasp-stretch", frames=int(sum(grasp.phase_frames)),
                             sheet=SheetConfig(grasp=grasp))
    else:
        raise ValueError(f"unknown scenario {name!r}")
    for key, val in overrides.items():
        setattr(cfg, key, val)
    return cfg


def _choose_tracked_pixels(depth_sheet, visible, tool, count, rng, margin=40, tool_margin=40):
    """Spread ``count`` pixels over the visible sheet with a farthest-point pass.

    Pixels within ``tool_margin`` of the tool silhouette are avoided so that
    the points are fused at the first frame despite mask dilation.
    """
    ok = visible & np.isfinite(depth_sheet) & ~dilate_mask(tool, tool_margin)
    ok[:margin] = ok[-margin:] = False
    ok[:, :margin] = ok[:, -margin:] = False
    vs, us = np.nonzero(ok)
    if len(us) < count:
        raise DatasetError("not enough visible sheet pixels for the tracked points")
    pool = rng.choice(len(us), size=min(4000, len(us)), replace=False)
    pts = np.column_stack([us[pool], vs[pool]]).astype(float)
    chosen = [int(rng.integers(len(pts)))]
    dist = np.linalg.norm(pts - pts[chosen[0]], axis=1)
    while len(chosen) < count:
        nxt = int(np.argmax(dist))
        chosen.append(nxt)
        dist = np.minimum(dist, np.linalg.norm(pts - pts[nxt], axis=1))
    return pts[chosen]


def make_sequence(cfg: ScenarioConfig, rng_seed: int, out_dir) -> Path:
    """Render a scenario into a dataset directory; byte-identical for a fixed seed."""
    out = Path(out_dir)
    for sub in ("depth", "color", "features", "joints"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    seeds = np.random.SeedSequence(rng_seed).spawn(4)
    rng_tool, rng_depth, rng_corr, rng_track = (np.random.default_rng(s) for s in seeds)

    k = default_intrinsics(cfg.width, cfg.height)
    chain = default_chain()
    nominal = default_nominal_hand_eye()
    true_error = AxisAngleTranslation(cfg.true_w, cfg.true_b)
    he_true = HandEyeState(nominal, true_error)
    sheet = DeformingSheet(cfg.sheet, cfg.fps)
    thetas = joint_trajectory(cfg.frames, cfg.fps, static=cfg.static_tool)

    tracked_material = None
    tracked_first_px = None
    tracked_positions = []
    tracked_pixels = []
    phases = []
    prev_visible = None
    prev_maps = None
    for f in range(cfg.frames):
        d_sheet, x_mat, y_mat = sheet.render(k, f)
        d_tool = render_tool_depth(chain, thetas[f], he_true, k) if cfg.tool else np.full(d_sheet.shape, np.inf)
        tool_front = np.isfinite(d_tool) & ~(d_sheet < d_tool)
        depth = np.where(tool_front, d_tool, d_sheet)
        depth = np.where(np.isfinite(depth), depth, np.nan)
        visible = np.isfinite(d_sheet) & ~tool_front

        if f == 0:
            # margins are 40 px at 640 wide and scale with the image
            margin = max(1, round(40 * cfg.width / 640))
            tracked_first_px = _choose_tracked_pixels(d_sheet, visible, tool_front, cfg.tracked_points,
                                                      rng_track, margin, margin)
            ui = tracked_first_px[:, 0].astype(int)
            vi = tracked_first_px[:, 1].astype(int)
            tracked_material = np.column_stack([x_mat[vi, ui], y_mat[vi, ui]])
        pos = sheet.surface(tracked_material[:, 0], tracked_material[:, 1], f)
        tracked_positions.append(pos)
        tracked_pixels.append(project_point(k, pos))

        noisy = add_depth_noise(depth, cfg.depth_sigma, cfg.speckle, rng_depth)
        write_depth(out / "depth" / f"{f:06d}.raw", noisy)

        rgb = texture(x_mat, y_mat)
        rgb = np.where(tool_front[..., None], 0.6, rgb)
        write_ppm(out / "color" / f"{f:06d}.ppm", rgb)

        if cfg.tool:
            markers, lines = emit_tool_features(chain, thetas[f], true_error, k, cfg.marker_sigma_px,
                                                cfg.dropout, rng_tool, nominal)
        else:
            markers, lines = np.zeros((0, 2)), []
        if f > 0:
            pairs = emit_correspondences(sheet, f - 1, f, k, cfg.corr_count, cfg.corr_sigma_px, rng_corr,
                                         visible_prev=prev_visible, depth_now=np.where(visible, d_sheet, np.nan),
                                         prev_maps=prev_maps)
        else:
            pairs = np.zeros((0, 4))
        phase = cfg.sheet.grasp.phase_at(f) if cfg.sheet.grasp is not None else 0
        phases.append(phase)
        write_features(out / "features" / f"{f:06d}.json", FrameFeatures(markers, lines, pairs, phase), f)
        (out / "joints" / f"{f:06d}.txt").write_text(" ".join(repr(float(t)) for t in thetas[f]) + "\n")
        prev_visible = visible
        prev_maps = (d_sheet, x_mat, y_mat)

    chain.save(out / "chain.json")
    manifest = {
        "version": 1,
        "frames": cfg.frames,
        "fps": cfg.fps,
        "intrinsics": k.to_dict(),
        "depth": "depth/%06d.raw",
        "color": "color/%06d.ppm",
        "features": "features/%06d.json",
        "joints": "joints/%06d.txt",
        "chain": "chain.json",
        "nominal_hand_eye": nominal.matrix().ravel().tolist(),
        "ground_truth": "ground_truth.json",
        "track_pixels": tracked_first_px.tolist(),
        "seed": int(rng_seed),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
    truth = {
        "true_error": {"w": list(cfg.true_w), "b": list(cfg.true_b)},
        "scenario": cfg.to_dict(),
        "tracked_material": tracked_material.tolist(),
        "tracked_first_pixels": tracked_first_px.tolist(),
        "tracked_positions": np.array(tracked_positions).tolist(),
        "tracked_pixels": np.array(tracked_pixels).tolist(),
        "phases": phases,
    }
    (out / "ground_truth.json").write_text(json.dumps(truth))
    log.info("wrote %d frames to %s", cfg.frames, out)
    return out
