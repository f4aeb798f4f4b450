"""Rigid transforms, quaternions, the pinhole camera and skinning weights.

Conventions used everywhere in the package:

* ``RigidTransform`` maps a point ``p`` in the source frame to ``R @ p + t``.
* Axis-angle vectors are in radians, translations in meters.
* Quaternions are scalar-first, ``(w, x, y, z)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import InsufficientNodes, InvalidDepth, NonPositiveDepth

_SMALL_ANGLE = 1e-8


@dataclass(frozen=True)
class RigidTransform:
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=float).reshape(3, 3))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=float).reshape(3))

    @classmethod
    def identity(cls) -> RigidTransform:
        return cls()

    @classmethod
    def from_matrix(cls, m) -> RigidTransform:
        m = np.asarray(m, dtype=float)
        if m.shape != (4, 4):
            raise ValueError(f"expected a 4x4 matrix, got {m.shape}")
        return cls(m[:3, :3], m[:3, 3])

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def compose(self, other: RigidTransform) -> RigidTransform:
        """Return ``self ∘ other`` (``other`` is applied first)."""
        return RigidTransform(self.rotation @ other.rotation,
                              self.rotation @ other.translation + self.translation)

    __matmul__ = compose

    def inverse(self) -> RigidTransform:
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)

    def apply(self, points) -> np.ndarray:
        """Transform one point ``(3,)`` or a batch ``(..., 3)``."""
        points = np.asarray(points, dtype=float)
        return points @ self.rotation.T + self.translation


@dataclass(frozen=True)
class AxisAngleTranslation:
    w: np.ndarray = field(default_factory=lambda: np.zeros(3))
    b: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "w", np.asarray(self.w, dtype=float).reshape(3))
        object.__setattr__(self, "b", np.asarray(self.b, dtype=float).reshape(3))

    @classmethod
    def from_vector(cls, v) -> AxisAngleTranslation:
        v = np.asarray(v, dtype=float)
        return cls(v[:3], v[3:6])

    def vector(self) -> np.ndarray:
        return np.concatenate([self.w, self.b])


@dataclass(frozen=True)
class QuatTranslation:
    q: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    b: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "q", np.asarray(self.q, dtype=float).reshape(4))
        object.__setattr__(self, "b", np.asarray(self.b, dtype=float).reshape(3))

    def normalized(self) -> QuatTranslation:
        return QuatTranslation(self.q / np.linalg.norm(self.q), self.b)

    def to_rigid(self) -> RigidTransform:
        return RigidTransform(quat_to_matrix(self.q / np.linalg.norm(self.q)), self.b)


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int = 640
    height: int = 480

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")

    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height}

    @classmethod
    def from_dict(cls, d: dict) -> CameraIntrinsics:
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                   int(d["width"]), int(d["height"]))


# --------------------------------------------------------------------------
# rotations


def skew(v) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def rotation_from_axis_angle(w) -> np.ndarray:
    """Exponential map of a batch of axis-angle vectors, shape ``(..., 3)``."""
    w = np.asarray(w, dtype=float)
    theta = np.linalg.norm(w, axis=-1)[..., None, None]
    k = np.zeros(w.shape[:-1] + (3, 3))
    k[..., 0, 1] = -w[..., 2]
    k[..., 0, 2] = w[..., 1]
    k[..., 1, 0] = w[..., 2]
    k[..., 1, 2] = -w[..., 0]
    k[..., 2, 0] = -w[..., 1]
    k[..., 2, 1] = w[..., 0]
    small = theta < _SMALL_ANGLE
    safe = np.where(small, 1.0, theta)
    # Taylor terms below the threshold keep the map smooth at zero
    a = np.where(small, 1.0 - theta**2 / 6.0, np.sin(safe) / safe)
    b = np.where(small, 0.5 - theta**2 / 24.0, (1.0 - np.cos(safe)) / safe**2)
    return np.eye(3) + a * k + b * (k @ k)


def axis_angle_from_rotation(r) -> np.ndarray:
    r = np.asarray(r, dtype=float)
    cos = np.clip((np.trace(r) - 1.0) / 2.0, -1.0, 1.0)
    theta = np.arccos(cos)
    if theta < _SMALL_ANGLE:
        return np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]]) / 2.0
    if np.pi - theta < 1e-6:
        # near a half turn the antisymmetric part vanishes; use the diagonal
        axis = np.sqrt(np.maximum((np.diag(r) + 1.0) / 2.0, 0.0))
        i = int(np.argmax(axis))
        axis[:] = (r[i] + r[:, i]) / 2.0
        axis[i] = np.sqrt(max((r[i, i] + 1.0) / 2.0, 0.0))
        axis /= np.linalg.norm(axis)
        return axis * theta
    v = np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
    return v * theta / (2.0 * np.sin(theta))


def se3_from_axis_angle(p: AxisAngleTranslation) -> RigidTransform:
    return RigidTransform(rotation_from_axis_angle(p.w), p.b)


def quat_to_matrix(q) -> np.ndarray:
    """Rotation matrix of a (possibly unnormalized) scalar-first quaternion.

    Uses the standard ``1 - 2(y^2 + z^2)`` form, so the result is only a proper
    rotation when ``|q| = 1``. Accepts ``(..., 4)``.
    """
    q = np.asarray(q, dtype=float)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    r = np.empty(q.shape[:-1] + (3, 3))
    r[..., 0, 0] = 1 - 2 * (y * y + z * z)
    r[..., 0, 1] = 2 * (x * y - w * z)
    r[..., 0, 2] = 2 * (x * z + w * y)
    r[..., 1, 0] = 2 * (x * y + w * z)
    r[..., 1, 1] = 1 - 2 * (x * x + z * z)
    r[..., 1, 2] = 2 * (y * z - w * x)
    r[..., 2, 0] = 2 * (x * z - w * y)
    r[..., 2, 1] = 2 * (y * z + w * x)
    r[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return r


def quat_to_matrix_jacobian(q) -> np.ndarray:
    """Partial derivatives of :func:`quat_to_matrix`, shape ``(..., 4, 3, 3)``."""
    q = np.asarray(q, dtype=float)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    zero = np.zeros_like(w)
    dw = np.stack([
        np.stack([zero, -z, y], -1),
        np.stack([z, zero, -x], -1),
        np.stack([-y, x, zero], -1)], -2)
    dx = np.stack([
        np.stack([zero, y, z], -1),
        np.stack([y, -2 * x, -w], -1),
        np.stack([z, w, -2 * x], -1)], -2)
    dy = np.stack([
        np.stack([-2 * y, x, w], -1),
        np.stack([x, zero, z], -1),
        np.stack([-w, z, -2 * y], -1)], -2)
    dz = np.stack([
        np.stack([-2 * z, -w, x], -1),
        np.stack([w, -2 * z, y], -1),
        np.stack([x, y, zero], -1)], -2)
    return 2.0 * np.stack([dw, dx, dy, dz], -3)


def quat_from_matrix(r) -> np.ndarray:
    r = np.asarray(r, dtype=float)
    tr = np.trace(r)
    if tr > 0:
        s = np.sqrt(tr + 1.0) * 2
        q = [0.25 * s, (r[2, 1] - r[1, 2]) / s, (r[0, 2] - r[2, 0]) / s, (r[1, 0] - r[0, 1]) / s]
    elif r[0, 0] > r[1, 1] and r[0, 0] > r[2, 2]:
        s = np.sqrt(1.0 + r[0, 0] - r[1, 1] - r[2, 2]) * 2
        q = [(r[2, 1] - r[1, 2]) / s, 0.25 * s, (r[0, 1] + r[1, 0]) / s, (r[0, 2] + r[2, 0]) / s]
    elif r[1, 1] > r[2, 2]:
        s = np.sqrt(1.0 + r[1, 1] - r[0, 0] - r[2, 2]) * 2
        q = [(r[0, 2] - r[2, 0]) / s, (r[0, 1] + r[1, 0]) / s, 0.25 * s, (r[1, 2] + r[2, 1]) / s]
    else:
        s = np.sqrt(1.0 + r[2, 2] - r[0, 0] - r[1, 1]) * 2
        q = [(r[1, 0] - r[0, 1]) / s, (r[0, 2] + r[2, 0]) / s, (r[1, 2] + r[2, 1]) / s, 0.25 * s]
    q = np.array(q)
    return q if q[0] >= 0 else -q


# --------------------------------------------------------------------------
# camera


def project_point(k: CameraIntrinsics, p) -> np.ndarray:
    """Pinhole projection of camera-frame points ``(..., 3)`` to pixels ``(..., 2)``."""
    p = np.asarray(p, dtype=float)
    z = p[..., 2]
    if np.any(z <= 1e-9):
        raise NonPositiveDepth("point at or behind the camera plane")
    return np.stack([k.fx * p[..., 0] / z + k.cx, k.fy * p[..., 1] / z + k.cy], axis=-1)


def unproject(k: CameraIntrinsics, u, v, d) -> np.ndarray:
    """Back-project pixel(s) at depth ``d`` into the camera frame."""
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    d = np.asarray(d, dtype=float)
    if np.any(~np.isfinite(d)) or np.any(d <= 0):
        raise InvalidDepth("depth must be positive and finite")
    return np.stack([(u - k.cx) / k.fx * d, (v - k.cy) / k.fy * d, d * np.ones_like(u)], axis=-1)


def pixel_grid(k: CameraIntrinsics) -> tuple[np.ndarray, np.ndarray]:
    """Integer pixel coordinate images ``(u, v)`` of shape ``(height, width)``."""
    v, u = np.mgrid[0:k.height, 0:k.width]
    return u.astype(float), v.astype(float)


def backproject_depth(k: CameraIntrinsics, depth: np.ndarray) -> np.ndarray:
    """Point image ``(H, W, 3)``; invalid depth produces NaN points."""
    u, v = pixel_grid(k)
    return np.stack([(u - k.cx) / k.fx * depth, (v - k.cy) / k.fy * depth, depth], axis=-1)


# --------------------------------------------------------------------------
# skinning


def _weights_from_distances(dist: np.ndarray, d_max: np.ndarray) -> np.ndarray:
    w = np.clip(1.0 - dist / d_max[..., None], 0.0, None) ** 2
    total = w.sum(axis=-1, keepdims=True)
    k = dist.shape[-1]
    # all-zero rows only happen for exact ties with the (k+1)-th node
    uniform = np.full_like(w, 1.0 / k)
    return np.where(total > 0, w / np.where(total > 0, total, 1.0), uniform)


def knn_weights(p, nodes, k: int = 4) -> tuple[np.ndarray, np.ndarray]:
    """Indices of the ``k`` nearest nodes to ``p`` and their normalized weights.

    Weights follow ``(1 - d / d_max)^2`` where ``d_max`` is the distance to the
    (k+1)-th nearest node. With exactly ``k`` nodes, ``d_max`` falls back to
    twice the largest of the ``k`` distances.
    """
    idx, w = knn_weights_batch(np.asarray(p, dtype=float)[None], nodes, k)
    return idx[0], w[0]


def knn_weights_batch(points, nodes, k: int = 4, tree: cKDTree | None = None):
    """Vectorized :func:`knn_weights` for ``points`` of shape ``(M, 3)``."""
    nodes = np.asarray(nodes, dtype=float).reshape(-1, 3)
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    n = len(nodes)
    if k < 1 or n < k:
        raise InsufficientNodes(f"need at least {k} nodes, have {n}")
    if tree is None:
        tree = cKDTree(nodes)
    kq = min(k + 1, n)
    dist, idx = tree.query(points, k=kq)
    dist = dist.reshape(len(points), kq)
    idx = idx.reshape(len(points), kq)
    if kq > k:
        d_max = dist[:, k]
    else:
        d_max = 2.0 * dist[:, k - 1]
    d_max = np.where(d_max > 0, d_max, 1.0)
    return idx[:, :k], _weights_from_distances(dist[:, :k], d_max)
