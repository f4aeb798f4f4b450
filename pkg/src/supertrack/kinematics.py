"""Instrument kinematic chain, hand-eye composition and image-feature projection."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import BehindCamera, CameraInsideCylinder, DimensionMismatch
from .geometry import (
    AxisAngleTranslation,
    CameraIntrinsics,
    RigidTransform,
    pixel_grid,
    project_point,
    rotation_from_axis_angle,
    se3_from_axis_angle,
)

REVOLUTE = "revolute"
PRISMATIC = "prismatic"


@dataclass(frozen=True)
class Joint:
    home: RigidTransform
    kind: str
    axis: np.ndarray

    def __post_init__(self):
        if self.kind not in (REVOLUTE, PRISMATIC):
            raise ValueError(f"unknown joint type {self.kind!r}")
        axis = np.asarray(self.axis, dtype=float).reshape(3)
        if abs(np.linalg.norm(axis) - 1.0) > 1e-9:
            raise ValueError("joint axis must be a unit vector")
        object.__setattr__(self, "axis", axis)

    def motion(self, theta: float) -> RigidTransform:
        if self.kind == REVOLUTE:
            return RigidTransform(rotation_from_axis_angle(self.axis * theta), np.zeros(3))
        return RigidTransform(np.eye(3), self.axis * theta)


@dataclass(frozen=True)
class LinkPoint:
    """A point rigidly attached to a link; ``marker_id`` is None for geometry-only points."""

    link: int
    p: np.ndarray
    marker_id: int | None = None
    radius: float = 0.002

    def __post_init__(self):
        object.__setattr__(self, "p", np.asarray(self.p, dtype=float).reshape(3))


@dataclass(frozen=True)
class Shaft:
    link: int
    axis_point: np.ndarray
    axis_dir: np.ndarray
    radius: float
    # extent along axis_dir measured from axis_point, in meters
    s_min: float = -0.3
    s_max: float = 0.0

    def __post_init__(self):
        d = np.asarray(self.axis_dir, dtype=float).reshape(3)
        if abs(np.linalg.norm(d) - 1.0) > 1e-9:
            raise ValueError("shaft axis must be a unit vector")
        if self.radius <= 0:
            raise ValueError("shaft radius must be positive")
        object.__setattr__(self, "axis_point", np.asarray(self.axis_point, dtype=float).reshape(3))
        object.__setattr__(self, "axis_dir", d)


@dataclass(frozen=True)
class KinematicChain:
    joints: tuple[Joint, ...]
    link_points: tuple[LinkPoint, ...] = ()
    shaft: Shaft | None = None

    def __post_init__(self):
        object.__setattr__(self, "joints", tuple(self.joints))
        object.__setattr__(self, "link_points", tuple(self.link_points))
        n = len(self.joints)
        for lp in self.link_points:
            if not 0 <= lp.link <= n:
                raise ValueError(f"link point attached to missing link {lp.link}")
        if self.shaft is not None and not 0 <= self.shaft.link <= n:
            raise ValueError("shaft attached to missing link")

    @property
    def markers(self) -> list[LinkPoint]:
        pts = [lp for lp in self.link_points if lp.marker_id is not None]
        return sorted(pts, key=lambda lp: lp.marker_id)

    @property
    def n_markers(self) -> int:
        return len(self.markers)

    def marker(self, marker_id: int) -> LinkPoint:
        for lp in self.link_points:
            if lp.marker_id == marker_id:
                return lp
        raise KeyError(f"no marker with id {marker_id}")

    # ---- JSON description ------------------------------------------------

    def to_dict(self) -> dict:
        d = {
            "joints": [{"type": j.kind, "axis": j.axis.tolist(),
                        "home": j.home.matrix().ravel().tolist()} for j in self.joints],
            "link_points": [{"link": lp.link, "p": lp.p.tolist(), "marker_id": lp.marker_id,
                             "radius": lp.radius} for lp in self.link_points],
        }
        if self.shaft is not None:
            s = self.shaft
            d["shaft"] = {"link": s.link, "axis_point": s.axis_point.tolist(),
                          "axis_dir": s.axis_dir.tolist(), "radius": s.radius,
                          "s_min": s.s_min, "s_max": s.s_max}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> KinematicChain:
        joints = [Joint(RigidTransform.from_matrix(np.reshape(j["home"], (4, 4))), j["type"],
                        np.asarray(j["axis"], dtype=float)) for j in d["joints"]]
        points = [LinkPoint(int(lp["link"]), lp["p"], lp.get("marker_id"),
                            float(lp.get("radius", 0.002))) for lp in d.get("link_points", [])]
        shaft = None
        if d.get("shaft"):
            s = d["shaft"]
            shaft = Shaft(int(s["link"]), s["axis_point"], s["axis_dir"], float(s["radius"]),
                          float(s.get("s_min", -0.3)), float(s.get("s_max", 0.0)))
        return cls(tuple(joints), tuple(points), shaft)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def load(cls, path) -> KinematicChain:
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class HandEyeState:
    nominal: RigidTransform = field(default_factory=RigidTransform)
    error: AxisAngleTranslation = field(default_factory=AxisAngleTranslation)

    def transform(self) -> RigidTransform:
        return self.nominal @ se3_from_axis_angle(self.error)


@dataclass(frozen=True)
class ImageLine:
    """Image line ``rho = u cos(phi) + v sin(phi)`` with ``phi`` in ``[0, pi)``."""

    rho: float
    phi: float

    @classmethod
    def canonical(cls, rho: float, phi: float) -> ImageLine:
        rho, phi = canonicalize_line(rho, phi)
        return cls(float(rho), float(phi))

    def residual(self, u, v):
        return np.asarray(u) * np.cos(self.phi) + np.asarray(v) * np.sin(self.phi) - self.rho


def canonicalize_line(rho, phi):
    """Map ``(rho, phi)`` to the equivalent line with ``phi`` in ``[0, pi)``."""
    rho = np.asarray(rho, dtype=float)
    phi = np.asarray(phi, dtype=float)
    turns = np.floor(phi / np.pi)
    phi_c = phi - turns * np.pi
    sign = np.where(np.mod(turns, 2) == 0, 1.0, -1.0)
    # floating wrap can land exactly on pi
    wrap = phi_c >= np.pi
    phi_c = np.where(wrap, phi_c - np.pi, phi_c)
    sign = np.where(wrap, -sign, sign)
    return rho * sign, phi_c


def line_differences(rho1, phi1, rho2, phi2):
    """Absolute ``(dphi, drho)`` between lines under ``(rho, phi) ~ (-rho, phi + pi)``.

    Of the two equivalent pairings, the one with the smaller angular difference
    is returned. Inputs broadcast.
    """
    dphi = np.abs(np.asarray(phi1) - np.asarray(phi2))
    direct_rho = np.abs(np.asarray(rho1) - np.asarray(rho2))
    flipped_rho = np.abs(np.asarray(rho1) + np.asarray(rho2))
    flip = dphi > np.pi / 2
    return np.where(flip, np.pi - dphi, dphi), np.where(flip, flipped_rho, direct_rho)


# --------------------------------------------------------------------------
# chain evaluation


def forward_kinematics(chain: KinematicChain, theta) -> list[RigidTransform]:
    """Base-frame pose of every link; entry ``j-1`` is link ``j``."""
    theta = np.asarray(theta, dtype=float).ravel()
    if theta.size != len(chain.joints):
        raise DimensionMismatch(f"expected {len(chain.joints)} joint values, got {theta.size}")
    if not np.all(np.isfinite(theta)):
        raise ValueError("joint values must be finite")
    poses = []
    pose = RigidTransform.identity()
    for joint, th in zip(chain.joints, theta):
        pose = pose @ joint.home @ joint.motion(th)
        poses.append(pose)
    return poses


def link_pose(poses: list[RigidTransform], link: int) -> RigidTransform:
    return RigidTransform.identity() if link == 0 else poses[link - 1]


def point_to_camera(chain: KinematicChain, theta, he: HandEyeState, link_point: LinkPoint) -> np.ndarray:
    poses = forward_kinematics(chain, theta)
    p_base = link_pose(poses, link_point.link).apply(link_point.p)
    return he.transform().apply(p_base)


def marker_points_base(chain: KinematicChain, theta) -> np.ndarray:
    """Marker positions in the (uncorrected) robot base frame, ordered by id."""
    poses = forward_kinematics(chain, theta)
    pts = [link_pose(poses, m.link).apply(m.p) for m in chain.markers]
    return np.array(pts).reshape(-1, 3)


def project_marker(chain: KinematicChain, theta, he: HandEyeState, marker_id: int,
                   k: CameraIntrinsics) -> np.ndarray:
    p = point_to_camera(chain, theta, he, chain.marker(marker_id))
    if p[2] <= 1e-9:
        raise BehindCamera(f"marker {marker_id} is behind the camera")
    return project_point(k, p)


def shaft_axis_base(chain: KinematicChain, theta) -> tuple[np.ndarray, np.ndarray]:
    """Shaft axis point and direction in the base frame."""
    shaft = chain.shaft
    if shaft is None:
        raise ValueError("chain has no shaft")
    pose = link_pose(forward_kinematics(chain, theta), shaft.link)
    return pose.apply(shaft.axis_point), pose.rotation @ shaft.axis_dir


def cylinder_lines(k: CameraIntrinsics, axis_point, axis_dir, radius):
    """Silhouette lines of an infinite cylinder given in the camera frame.

    Works on batches: ``axis_point``/``axis_dir`` of shape ``(..., 3)``.
    Returns ``(rho, phi)`` arrays of shape ``(..., 2)``; entries are NaN where the
    camera center lies inside the cylinder.
    """
    a_pt = np.asarray(axis_point, dtype=float)
    a = np.asarray(axis_dir, dtype=float)
    a = a / np.linalg.norm(a, axis=-1, keepdims=True)
    perp = a_pt - np.sum(a_pt * a, axis=-1, keepdims=True) * a
    d = np.linalg.norm(perp, axis=-1, keepdims=True)
    inside = (d <= radius)[..., 0]
    d = np.where(d > radius, d, np.nan)
    e1 = perp / d
    e2 = np.cross(a, e1)
    c = radius / d
    s = np.sqrt(1.0 - c * c)
    # tangent planes through the camera center: n = c e1 +/- s e2
    normals = np.stack([c * e1 + s * e2, c * e1 - s * e2], axis=-2)
    nx, ny, nz = normals[..., 0], normals[..., 1], normals[..., 2]
    au = nx / k.fx
    av = ny / k.fy
    rhs = nx * k.cx / k.fx + ny * k.cy / k.fy - nz
    norm = np.hypot(au, av)
    phi = np.arctan2(av, au)
    rho = rhs / norm
    rho, phi = canonicalize_line(rho, phi)
    rho = np.where(inside[..., None], np.nan, rho)
    phi = np.where(inside[..., None], np.nan, phi)
    return rho, phi


def project_cylinder(chain: KinematicChain, theta, he: HandEyeState, shaft: Shaft | None,
                     k: CameraIntrinsics) -> tuple[ImageLine, ImageLine]:
    """Images of the two silhouette tangent planes of the shaft cylinder."""
    shaft = shaft if shaft is not None else chain.shaft
    pose = he.transform() @ link_pose(forward_kinematics(chain, theta), shaft.link)
    rho, phi = cylinder_lines(k, pose.apply(shaft.axis_point), pose.rotation @ shaft.axis_dir,
                              shaft.radius)
    if np.any(np.isnan(rho)):
        raise CameraInsideCylinder("camera center lies inside the shaft cylinder")
    return ImageLine(float(rho[0]), float(phi[0])), ImageLine(float(rho[1]), float(phi[1]))


# --------------------------------------------------------------------------
# rasterization of the tool primitives


def _ray_capped_cylinder(rays, center, axis, radius, s_min, s_max):
    """Smallest positive ray parameter hitting a capped cylinder (inf if none)."""
    oc = -center
    rd = rays @ axis
    od = oc @ axis
    rperp = rays - rd[..., None] * axis
    operp = oc - od * axis
    a = np.sum(rperp * rperp, axis=-1)
    b = 2.0 * (rperp @ operp)
    c = operp @ operp - radius * radius
    t_hit = np.full(rays.shape[:-1], np.inf)
    disc = b * b - 4 * a * c
    ok = (disc >= 0) & (a > 1e-15)
    sq = np.sqrt(np.where(ok, disc, 0.0))
    safe_a = np.where(ok, a, 1.0)
    for t in ((-b - sq) / (2 * safe_a), (-b + sq) / (2 * safe_a)):
        s = od + t * rd
        good = ok & (t > 1e-9) & (s >= s_min) & (s <= s_max)
        t_hit = np.where(good & (t < t_hit), t, t_hit)
    for s_cap in (s_min, s_max):
        safe_rd = np.where(np.abs(rd) > 1e-15, rd, 1.0)
        t = (s_cap - od) / safe_rd
        hit = center + s_cap * axis
        pts = t[..., None] * rays
        r2 = np.sum((pts - hit) ** 2, axis=-1) - ((pts - hit) @ axis) ** 2
        good = (np.abs(rd) > 1e-15) & (t > 1e-9) & (r2 <= radius * radius)
        t_hit = np.where(good & (t < t_hit), t, t_hit)
    return t_hit


def _ray_sphere(rays, center, radius):
    a = np.sum(rays * rays, axis=-1)
    b = -2.0 * (rays @ center)
    c = center @ center - radius * radius
    disc = b * b - 4 * a * c
    ok = disc >= 0
    sq = np.sqrt(np.where(ok, disc, 0.0))
    t_hit = np.full(rays.shape[:-1], np.inf)
    for t in ((-b - sq) / (2 * a), (-b + sq) / (2 * a)):
        good = ok & (t > 1e-9)
        t_hit = np.where(good & (t < t_hit), t, t_hit)
    return t_hit


def render_tool_depth(chain: KinematicChain, theta, he: HandEyeState, k: CameraIntrinsics) -> np.ndarray:
    """Per-pixel z-depth of the tool primitives (``inf`` where the ray misses)."""
    u, v = pixel_grid(k)
    rays = np.stack([(u - k.cx) / k.fx, (v - k.cy) / k.fy, np.ones_like(u)], axis=-1)
    poses = forward_kinematics(chain, theta)
    cam = he.transform()
    t_best = np.full(u.shape, np.inf)
    if chain.shaft is not None:
        s = chain.shaft
        pose = cam @ link_pose(poses, s.link)
        t_best = np.minimum(t_best, _ray_capped_cylinder(
            rays, pose.apply(s.axis_point), pose.rotation @ s.axis_dir, s.radius, s.s_min, s.s_max))
    for lp in chain.link_points:
        c = (cam @ link_pose(poses, lp.link)).apply(lp.p)
        t_best = np.minimum(t_best, _ray_sphere(rays, c, lp.radius))
    # rays have unit z, so the ray parameter is the z-depth
    return t_best


def dilate_mask(mask: np.ndarray, pixels: int) -> np.ndarray:
    if pixels <= 0:
        return mask.copy()
    return ndimage.binary_dilation(mask, structure=np.ones((2 * pixels + 1, 2 * pixels + 1), bool))


def render_tool_mask(chain: KinematicChain, theta, he: HandEyeState, k: CameraIntrinsics,
                     dilation_px: int = 0) -> np.ndarray:
    mask = np.isfinite(render_tool_depth(chain, theta, he, k))
    return dilate_mask(mask, dilation_px)
