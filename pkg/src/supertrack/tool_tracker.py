"""Particle filter over the six-parameter hand-eye error.

Each particle holds ``[w, b]``: an axis-angle rotation (rad) and a translation
(m) that correct the nominal base-to-camera transform. Detected marker pixels
and shaft edge lines are greedily associated with each particle's projected
model features; the association scores form the observation likelihoods.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.special import logsumexp

from .errors import DegenerateWeights
from .geometry import AxisAngleTranslation, CameraIntrinsics, rotation_from_axis_angle
from .kinematics import (
    HandEyeState,
    ImageLine,
    KinematicChain,
    cylinder_lines,
    line_differences,
    marker_points_base,
    shaft_axis_base,
)

log = logging.getLogger(__name__)

# initial rotation variance (rad^2) and translation variance (mm^2, converted below)
_SIGMA0_ROT = 0.025
_SIGMA0_TRANS_MM2 = 0.1


def default_sigma0() -> np.ndarray:
    return np.array([_SIGMA0_ROT] * 3 + [_SIGMA0_TRANS_MM2 * 1e-6] * 3)


@dataclass(frozen=True)
class FilterConfig:
    n_particles: int = 500
    # diagonals of the 6x6 covariances, [w (rad^2), b (m^2)]
    sigma0: np.ndarray = field(default_factory=default_sigma0)
    sigma_motion: np.ndarray = field(default_factory=lambda: 0.1 * default_sigma0())
    gamma_m: float = 0.01
    gamma_phi: float = 10.0
    gamma_rho: float = 0.05
    cm_max: float = float(np.exp(-50 * 0.01))
    cl_max: float = float(np.exp(-0.15 * 10.0 - 75 * 0.05))
    n_eff_threshold: float = 200.0

    def __post_init__(self):
        s0 = np.asarray(self.sigma0, dtype=float).reshape(6)
        sm = np.asarray(self.sigma_motion, dtype=float).reshape(6)
        object.__setattr__(self, "sigma0", s0)
        object.__setattr__(self, "sigma_motion", sm)
        if np.any(s0 < 0) or np.any(sm < 0):
            raise ValueError("variances must be non-negative")
        if not (0 < self.cm_max <= 1 and 0 < self.cl_max <= 1):
            raise ValueError("association floors must lie in (0, 1]")
        if self.n_eff_threshold > self.n_particles:
            raise ValueError("N_eff threshold cannot exceed the particle count")

    @classmethod
    def from_dict(cls, d: dict) -> FilterConfig:
        """Build a config; the floors follow the gains unless given explicitly."""
        d = dict(d)
        if "sigma0" in d:
            d["sigma0"] = np.asarray(d["sigma0"], dtype=float)
        if "sigma_motion" in d:
            d["sigma_motion"] = np.asarray(d["sigma_motion"], dtype=float)
        elif "sigma0" in d:
            d["sigma_motion"] = 0.1 * d["sigma0"]
        gm = d.get("gamma_m", cls.gamma_m)
        gphi = d.get("gamma_phi", cls.gamma_phi)
        grho = d.get("gamma_rho", cls.gamma_rho)
        d.setdefault("cm_max", float(np.exp(-50 * gm)))
        d.setdefault("cl_max", float(np.exp(-0.15 * gphi - 75 * grho)))
        if "n_eff_threshold" not in d and "n_particles" in d:
            d["n_eff_threshold"] = 0.4 * d["n_particles"]
        return cls(**d)

    def to_dict(self) -> dict:
        return {"n_particles": self.n_particles, "sigma0": self.sigma0.tolist(),
                "sigma_motion": self.sigma_motion.tolist(), "gamma_m": self.gamma_m,
                "gamma_phi": self.gamma_phi, "gamma_rho": self.gamma_rho,
                "cm_max": self.cm_max, "cl_max": self.cl_max,
                "n_eff_threshold": self.n_eff_threshold}


@dataclass
class ParticleSet:
    states: np.ndarray   # (N, 6): w then b
    weights: np.ndarray  # (N,)

    def __len__(self):
        return len(self.weights)

    def copy(self) -> ParticleSet:
        return ParticleSet(self.states.copy(), self.weights.copy())

    def n_eff(self) -> float:
        return float(1.0 / np.sum(self.weights ** 2))

    def mean(self) -> AxisAngleTranslation:
        return AxisAngleTranslation.from_vector(self.weights @ self.states)


@dataclass(frozen=True)
class AssociationList:
    pairs: list[tuple[int, int]]
    scores: list[float]

    def __len__(self):
        return len(self.pairs)


# --------------------------------------------------------------------------
# motion model


def init_particles(cfg: FilterConfig, rng_seed=None) -> ParticleSet:
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    n = cfg.n_particles
    states = rng.standard_normal((n, 6)) * np.sqrt(cfg.sigma0)
    return ParticleSet(states, np.full(n, 1.0 / n))


def predict(ps: ParticleSet, cfg: FilterConfig, rng: np.random.Generator) -> ParticleSet:
    noise = rng.standard_normal(ps.states.shape) * np.sqrt(cfg.sigma_motion)
    return ParticleSet(ps.states + noise, ps.weights.copy())


def stratified_resample(weights: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Indices drawn with one uniform sample per equal-probability stratum."""
    n = len(weights)
    positions = (np.arange(n) + rng.random(n)) / n
    cumulative = np.cumsum(weights)
    cumulative[-1] = 1.0
    return np.searchsorted(cumulative, positions, side="right").clip(0, n - 1)


# --------------------------------------------------------------------------
# greedy association


def greedy_associate(scores: np.ndarray, floor: float):
    """Greedy one-to-one matching on a batch of similarity matrices.

    ``scores`` has shape ``(P, D, M)`` (detections x model features). Pairs are
    taken in descending similarity; matching stops once the best remaining
    similarity is not strictly above ``floor``.

    Returns ``(det, model, score, valid)``, each ``(P, min(D, M))``.
    """
    scores = np.array(scores, dtype=float)
    p, d, m = scores.shape
    steps = min(d, m)
    det = np.zeros((p, steps), int)
    mod = np.zeros((p, steps), int)
    val = np.zeros((p, steps))
    valid = np.zeros((p, steps), bool)
    if steps == 0:
        return det, mod, val, valid
    scores = np.where(np.isfinite(scores), scores, -np.inf)
    rows = np.arange(p)
    active = np.ones(p, bool)
    for s in range(steps):
        flat = scores.reshape(p, -1)
        best = np.argmax(flat, axis=1)
        best_val = flat[rows, best]
        active &= best_val > floor
        di, mi = np.divmod(best, m)
        det[:, s], mod[:, s], val[:, s], valid[:, s] = di, mi, best_val, active
        scores[rows, di, :] = -np.inf
        scores[rows, :, mi] = -np.inf
    return det, mod, np.where(valid, val, 0.0), valid


def _as_list(det, mod, val, valid) -> AssociationList:
    keep = valid[0]
    return AssociationList([(int(a), int(b)) for a, b in zip(det[0][keep], mod[0][keep])],
                           [float(x) for x in val[0][keep]])


def marker_scores(detections, projections, gamma_m: float) -> np.ndarray:
    """``exp(-gamma_m |m - m_hat|^2)`` for ``detections (D,2)`` and ``projections (..., M, 2)``."""
    det = np.asarray(detections, dtype=float).reshape(-1, 2)
    proj = np.asarray(projections, dtype=float)
    diff = det[:, None, :] - proj[..., None, :, :]
    return np.exp(-gamma_m * np.sum(diff * diff, axis=-1))


def line_scores(det_rho, det_phi, rho, phi, gamma_phi: float, gamma_rho: float) -> np.ndarray:
    dphi, drho = line_differences(np.asarray(det_rho)[:, None], np.asarray(det_phi)[:, None],
                                  np.asarray(rho)[..., None, :], np.asarray(phi)[..., None, :])
    return np.exp(-gamma_phi * dphi - gamma_rho * drho)


def associate_markers(detections, projections, gamma_m: float, cm_max: float) -> AssociationList:
    det = np.asarray(detections, dtype=float).reshape(-1, 2)
    proj = np.asarray(projections, dtype=float).reshape(-1, 2)
    scores = marker_scores(det, proj, gamma_m)[None] if len(det) and len(proj) else np.zeros((1, len(det), len(proj)))
    return _as_list(*greedy_associate(scores, cm_max))


def associate_lines(detections, projections, gamma_phi: float, gamma_rho: float,
                    cl_max: float) -> AssociationList:
    dr = np.array([ln.rho for ln in detections], dtype=float)
    dp = np.array([ln.phi for ln in detections], dtype=float)
    pr = np.array([ln.rho for ln in projections], dtype=float)
    pp = np.array([ln.phi for ln in projections], dtype=float)
    if len(dr) and len(pr):
        scores = line_scores(dr, dp, pr, pp, gamma_phi, gamma_rho)[None]
    else:
        scores = np.zeros((1, len(dr), len(pr)))
    return _as_list(*greedy_associate(scores, cl_max))


# --------------------------------------------------------------------------
# projections of the model features for a batch of particles


def particle_transforms(states: np.ndarray, nominal) -> tuple[np.ndarray, np.ndarray]:
    """Camera-from-base rotation ``(P,3,3)`` and translation ``(P,3)`` per particle."""
    r_err = rotation_from_axis_angle(states[:, :3])
    rot = nominal.rotation @ r_err
    trans = states[:, 3:] @ nominal.rotation.T + nominal.translation
    return rot, trans


def project_markers_batch(states, chain: KinematicChain, theta, nominal, k: CameraIntrinsics):
    """Projected marker pixels ``(P, M, 2)``; markers behind the camera are NaN."""
    pts = marker_points_base(chain, theta)
    rot, trans = particle_transforms(states, nominal)
    pc = np.einsum("pij,mj->pmi", rot, pts) + trans[:, None, :]
    z = pc[..., 2]
    front = z > 1e-9
    zs = np.where(front, z, 1.0)
    uv = np.stack([k.fx * pc[..., 0] / zs + k.cx, k.fy * pc[..., 1] / zs + k.cy], axis=-1)
    return np.where(front[..., None], uv, np.nan)


def project_lines_batch(states, chain: KinematicChain, theta, nominal, k: CameraIntrinsics):
    """Projected shaft silhouette lines ``(rho, phi)``, each ``(P, 2)``."""
    a0, d0 = shaft_axis_base(chain, theta)
    rot, trans = particle_transforms(states, nominal)
    a_c = rot @ a0 + trans
    d_c = rot @ d0
    return cylinder_lines(k, a_c, d_c, chain.shaft.radius)


def marker_likelihoods(states, detections, chain, theta, k, nominal, cfg: FilterConfig) -> np.ndarray:
    n_m = chain.n_markers
    det = np.asarray(detections, dtype=float).reshape(-1, 2)
    if len(det) == 0 or n_m == 0:
        return np.full(len(states), n_m * cfg.cm_max)
    proj = project_markers_batch(states, chain, theta, nominal, k)
    scores = marker_scores(det, proj, cfg.gamma_m)
    _, _, val, valid = greedy_associate(scores, cfg.cm_max)
    return (n_m - valid.sum(axis=1)) * cfg.cm_max + val.sum(axis=1)


def line_likelihoods(states, detections, chain, theta, k, nominal, cfg: FilterConfig) -> np.ndarray:
    if len(detections) == 0 or chain.shaft is None:
        return np.full(len(states), 2 * cfg.cl_max)
    dr = np.array([ln.rho for ln in detections], dtype=float)
    dp = np.array([ln.phi for ln in detections], dtype=float)
    rho, phi = project_lines_batch(states, chain, theta, nominal, k)
    scores = line_scores(dr, dp, rho, phi, cfg.gamma_phi, cfg.gamma_rho)
    _, _, val, valid = greedy_associate(scores, cfg.cl_max)
    return (2 - valid.sum(axis=1)) * cfg.cl_max + val.sum(axis=1)


def marker_likelihood(particle, detections, chain, theta, k, cfg: FilterConfig,
                      nominal=None) -> float:
    """Marker observation likelihood of one particle (state vector or AxisAngleTranslation)."""
    state = _state_vector(particle)
    nominal = nominal if nominal is not None else HandEyeState().nominal
    return float(marker_likelihoods(state[None], detections, chain, theta, k, nominal, cfg)[0])


def line_likelihood(particle, detections, chain, theta, k, cfg: FilterConfig,
                    nominal=None) -> float:
    state = _state_vector(particle)
    nominal = nominal if nominal is not None else HandEyeState().nominal
    return float(line_likelihoods(state[None], detections, chain, theta, k, nominal, cfg)[0])


def _state_vector(particle) -> np.ndarray:
    if isinstance(particle, AxisAngleTranslation):
        return particle.vector()
    return np.asarray(particle, dtype=float).reshape(6)


# --------------------------------------------------------------------------
# measurement update


def update(ps: ParticleSet, detections_markers, detections_lines, chain: KinematicChain, theta,
           k: CameraIntrinsics, cfg: FilterConfig, rng: np.random.Generator, nominal=None):
    """Weight particles by both observation models and resample when degenerate.

    The two synchronous observations are combined as a product of likelihoods.
    Returns the new set and the weighted-mean estimate (taken before any
    resampling). Raises :class:`DegenerateWeights` when every particle's
    likelihood vanishes; the caller keeps the prior set in that case.
    """
    nominal = nominal if nominal is not None else HandEyeState().nominal
    lm = marker_likelihoods(ps.states, detections_markers, chain, theta, k, nominal, cfg)
    ll = line_likelihoods(ps.states, detections_lines, chain, theta, k, nominal, cfg)
    with np.errstate(divide="ignore"):
        logw = np.log(ps.weights) + np.log(lm) + np.log(ll)
    total = logsumexp(logw)
    if not np.isfinite(total):
        raise DegenerateWeights("all particle likelihoods underflowed")
    weights = np.exp(logw - total)
    weights /= weights.sum()
    estimate = AxisAngleTranslation.from_vector(weights @ ps.states)
    out = ParticleSet(ps.states.copy(), weights)
    if out.n_eff() < cfg.n_eff_threshold:
        idx = stratified_resample(weights, rng)
        out = ParticleSet(ps.states[idx].copy(), np.full(len(weights), 1.0 / len(weights)))
    return out, estimate


class ToolTracker:
    """Stateful wrapper running predict/update over a frame sequence."""

    def __init__(self, chain: KinematicChain, k: CameraIntrinsics, nominal, cfg: FilterConfig,
                 seed=None, dump_path=None):
        self.chain = chain
        self.k = k
        self.nominal = nominal
        self.cfg = cfg
        self.rng = np.random.default_rng(seed)
        self.particles = init_particles(cfg, self.rng)
        self.estimate = self.particles.mean()
        self.frame = 0
        self.dump_path = Path(dump_path) if dump_path else None
        if self.dump_path is not None:
            self.dump_path.write_text("")

    def step(self, theta, markers, lines) -> AxisAngleTranslation:
        if self.frame > 0:
            self.particles = predict(self.particles, self.cfg, self.rng)
        try:
            self.particles, self.estimate = update(self.particles, markers, lines, self.chain, theta,
                                                   self.k, self.cfg, self.rng, self.nominal)
        except DegenerateWeights:
            log.warning("frame %d: degenerate particle weights, keeping prior", self.frame)
            self.estimate = self.particles.mean()
        if self.dump_path is not None:
            dump_particles(self.dump_path, self.frame, self.particles)
        self.frame += 1
        return self.estimate

    def hand_eye(self) -> HandEyeState:
        return HandEyeState(self.nominal, self.estimate)


def dump_particles(path, frame: int, ps: ParticleSet) -> None:
    """Append one JSON line with the particle states and weights of a frame."""
    with open(path, "a") as fh:
        fh.write(json.dumps({"frame": frame, "states": ps.states.tolist(),
                             "weights": ps.weights.tolist()}) + "\n")


def load_particle_dump(path) -> list[dict]:
    rows = []
    for line in Path(path).read_text().splitlines():
        if line.strip():
            row = json.loads(line)
            row["states"] = np.asarray(row["states"])
            row["weights"] = np.asarray(row["weights"])
            rows.append(row)
    return rows


def with_particles(cfg: FilterConfig, n: int) -> FilterConfig:
    """Copy of ``cfg`` with ``n`` particles and the threshold scaled to match."""
    return replace(cfg, n_particles=n, n_eff_threshold=cfg.n_eff_threshold * n / cfg.n_particles)
