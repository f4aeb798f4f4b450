"""Per-frame estimation of the deformation graph parameters.

The energy has four terms: point-to-plane data residuals against the current
depth map, an as-rigid-as-possible regularizer over graph edges, a soft unit
quaternion constraint and 3D feature correspondences. Every term supplies an
analytic Jacobian with respect to the stacked parameter vector
``[q_g, b_g, q_1, b_1, ..., q_n, b_n]``. Quaternions enter the warp without
normalization; the unit-norm term keeps them close to rotations.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import NonFiniteSystem, NoAssociations, SolverDiverged
from .geometry import CameraIntrinsics, quat_to_matrix, quat_to_matrix_jacobian
from .surfels import EDGraph, SurfelMap, project_to_pixels, skinning

log = logging.getLogger(__name__)

KINDS = ("data", "arap", "rot", "corr")


@dataclass(frozen=True)
class SolverConfig:
    lambda_a: float = 10.0
    lambda_r: float = 100.0
    lambda_c: float = 10.0
    mu0: float = 1e-4
    mu_up: float = 10.0
    mu_down: float = 0.5
    mu_max: float = 1e12
    max_lm_iters: int = 10
    pcg_iters: int = 10
    pcg_tol: float = 1e-12
    rel_tol: float = 1e-6
    grad_tol: float = 1e-14
    # data-term bookkeeping
    max_data: int = 8000
    assoc_dist: float = 0.015
    robust_percentile: float = 95.0
    robust_weight: float = 0.1

    def __post_init__(self):
        for name in ("lambda_a", "lambda_r", "lambda_c", "mu0", "mu_up", "max_lm_iters", "pcg_iters"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not 0 < self.mu_down < 1:
            raise ValueError("mu_down must lie in (0, 1)")

    @classmethod
    def from_dict(cls, d: dict) -> SolverConfig:
        return cls(**d)

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class ResidualBlock:
    """All residuals of one energy term with their sparse Jacobian.

    ``values`` is ``(R,)`` for scalar terms or ``(R, 3)`` for vector terms; the
    Jacobian is stored in COO form over the flattened residuals. ``weight`` is
    the square root of the term weight, already applied to values and Jacobian.
    """

    kind: str
    indices: np.ndarray
    values: np.ndarray
    weight: float
    rows: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    cols: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    jac: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def flat(self) -> np.ndarray:
        return np.asarray(self.values, dtype=float).ravel()

    def energy(self) -> float:
        return float(self.flat @ self.flat)


@dataclass
class FrameObservation:
    """Inputs of one solve: the preprocessed, tool-masked depth and feature pairs."""

    depth: np.ndarray
    k: CameraIntrinsics
    pairs: np.ndarray = field(default_factory=lambda: np.zeros((0, 4)))


def _node_cols(j: np.ndarray) -> np.ndarray:
    """Parameter columns ``(..., 7)`` of nodes ``j``: four for q then three for b."""
    return 7 + 7 * j[..., None] + np.arange(7)


def _warp_parts(points, idx, weights, graph: EDGraph):
    rots = quat_to_matrix(graph.quats)
    rg = quat_to_matrix(graph.global_q)
    g = graph.nodes[idx]
    d = points[:, None, :] - g
    local = np.einsum("mkij,mkj->mki", rots[idx], d) + g + graph.trans[idx]
    s = np.einsum("mk,mki->mi", weights, local)
    return rots, rg, d, s


def _warp_jacobians(idx, weights, graph: EDGraph, rg, d, s):
    """Jacobian of ``T(p)`` for each point: columns ``(M, 7 + 7k)`` and values ``(M, 3, 7 + 7k)``."""
    m, kk = idx.shape
    drg = quat_to_matrix_jacobian(graph.global_q)            # (4, 3, 3)
    drj = quat_to_matrix_jacobian(graph.quats)[idx]          # (M, k, 4, 3, 3)
    j_qg = np.einsum("cij,mj->mic", drg, s)                  # (M, 3, 4)
    j_bg = np.broadcast_to(np.eye(3), (m, 3, 3))
    inner = np.einsum("mkcij,mkj->mkic", drj, d)             # (M, k, 3, 4)
    j_qj = np.einsum("ab,mkbc,mk->mkac", rg, inner, weights)  # (M, k, 3, 4)
    j_bj = weights[:, :, None, None] * rg                    # (M, k, 3, 3)
    node_block = np.concatenate([j_qj, j_bj], axis=3)       # (M, k, 3, 7)
    vals = np.concatenate([j_qg, j_bg, node_block.transpose(0, 2, 1, 3).reshape(m, 3, 7 * kk)], axis=2)
    cols = np.concatenate([np.broadcast_to(np.arange(7), (m, 7)), _node_cols(idx).reshape(m, 7 * kk)],
                          axis=1)
    return cols, vals


def warp_with_params(points, normals, idx, weights, graph: EDGraph):
    """Positions and (unnormalized-quaternion) normals warped by the raw parameters."""
    rots, rg, _, s = _warp_parts(points, idx, weights, graph)
    pos = s @ rg.T + graph.global_b
    if normals is None:
        return pos, None
    n = np.einsum("mk,mkij,mj->mi", weights, rots[idx], normals) @ rg.T
    norm = np.linalg.norm(n, axis=1, keepdims=True)
    return pos, n / np.where(norm < 1e-12, 1.0, norm)


# --------------------------------------------------------------------------
# residual terms


def data_associations(warped, depth, k: CameraIntrinsics, gate: float):
    """Projective association: surfel indices with a valid depth pixel and the observed points."""
    u, v, inside = project_to_pixels(k, warped)
    d = np.where(inside, depth[v, u], np.nan)
    ok = inside & np.isfinite(d) & (d > 0)
    obs = np.stack([(u - k.cx) / k.fx * d, (v - k.cy) / k.fy * d, d], axis=1)
    ok &= np.linalg.norm(np.where(ok[:, None], obs - warped, 0.0), axis=1) < gate
    sel = np.nonzero(ok)[0]
    return sel, obs[sel]


def residuals_data(points, normals, idx, weights, graph: EDGraph, depth, k: CameraIntrinsics,
                   normals_fixed=None, gate: float = 0.015, robust_percentile: float | None = 95.0,
                   robust_weight: float = 0.1, want_jac: bool = True) -> ResidualBlock:
    """Point-to-plane residuals ``n^T (T(p) - o)`` for projectively associated surfels.

    ``normals_fixed`` defaults to the surfel normals warped by the current
    parameters; they are treated as constants in the Jacobian. Residuals above
    the given percentile of magnitudes get their squared contribution scaled by
    ``robust_weight``. Raises :class:`NoAssociations` when nothing associates.
    """
    warped, wn = warp_with_params(points, normals if normals_fixed is None else None, idx, weights, graph)
    nf = wn if normals_fixed is None else np.asarray(normals_fixed, dtype=float)
    sel, obs = data_associations(warped, depth, k, gate)
    if len(sel) == 0:
        raise NoAssociations("no surfel associates with a valid depth pixel")
    n_hat = nf[sel]
    r = np.einsum("mi,mi->m", n_hat, warped[sel] - obs)
    w = np.ones(len(sel))
    if robust_percentile is not None and len(sel) > 1:
        cut = np.percentile(np.abs(r), robust_percentile)
        w = np.where(np.abs(r) > cut, np.sqrt(robust_weight), 1.0)
    block = ResidualBlock("data", sel, r * w, 1.0)
    if want_jac:
        _, rg, d, s = _warp_parts(points[sel], idx[sel], weights[sel], graph)
        cols, vals = _warp_jacobians(idx[sel], weights[sel], graph, rg, d, s)
        jrow = np.einsum("mi,mic->mc", n_hat, vals) * w[:, None]
        block.rows = np.repeat(np.arange(len(sel)), cols.shape[1])
        block.cols = cols.ravel()
        block.jac = jrow.ravel()
    return block


def residuals_arap(graph: EDGraph, lambda_a: float = 10.0, want_jac: bool = True) -> ResidualBlock:
    """Edge residuals ``sqrt(lambda_a) [R_k (g_i - g_k) + b_k + g_k - g_i - b_i]``."""
    edges = graph.edge_list()
    wt = np.sqrt(lambda_a)
    if len(edges) == 0:
        return ResidualBlock("arap", edges, np.zeros((0, 3)), wt)
    i, kk = edges[:, 0], edges[:, 1]
    g = graph.nodes
    rk = quat_to_matrix(graph.quats[kk])
    dg = g[i] - g[kk]
    # grouped so identity rotations and common translations give exact zeros
    r = wt * ((np.einsum("eab,eb->ea", rk, dg) - dg) + (graph.trans[kk] - graph.trans[i]))
    block = ResidualBlock("arap", edges, r, wt)
    if want_jac:
        e = len(edges)
        drk = quat_to_matrix_jacobian(graph.quats[kk])                  # (E, 4, 3, 3)
        j_q = wt * np.einsum("ecab,eb->eac", drk, dg)                   # (E, 3, 4)
        eye = np.broadcast_to(np.eye(3) * wt, (e, 3, 3))
        vals = np.concatenate([j_q, eye, -eye], axis=2)                 # (E, 3, 10)
        ck = _node_cols(kk)
        ci = _node_cols(i)[:, 4:]
        cols = np.concatenate([ck, ci], axis=1)                         # (E, 10)
        block.rows = np.repeat(np.arange(3 * e), 10)
        block.cols = np.repeat(cols[:, None, :], 3, axis=1).ravel()
        block.jac = vals.ravel()
    return block


def residuals_rot(graph: EDGraph, lambda_r: float = 100.0, want_jac: bool = True) -> ResidualBlock:
    """Per-node ``sqrt(lambda_r) (1 - q^T q)``."""
    wt = np.sqrt(lambda_r)
    q = graph.quats
    r = wt * (1.0 - np.einsum("ni,ni->n", q, q))
    block = ResidualBlock("rot", np.arange(len(q)), r, wt)
    if want_jac:
        n = len(q)
        block.rows = np.repeat(np.arange(n), 4)
        block.cols = _node_cols(np.arange(n))[:, :4].ravel()
        block.jac = (-2.0 * wt * q).ravel()
    return block


def resolve_model_pixels(smap: SurfelMap, k: CameraIntrinsics, pixels) -> np.ndarray:
    """Index of the surfel rendered nearest to the camera at each pixel, or -1."""
    pixels = np.asarray(pixels, dtype=float).reshape(-1, 2)
    if len(smap) == 0:
        return np.full(len(pixels), -1, dtype=np.int64)
    u, v, inside = project_to_pixels(k, smap.positions)
    index = np.full((k.height, k.width), -1, dtype=np.int64)
    sel = np.nonzero(inside)[0]
    # write farthest first so the nearest surfel wins
    sel = sel[np.argsort(-smap.positions[sel, 2], kind="stable")]
    index[v[sel], u[sel]] = sel
    pu = np.rint(pixels[:, 0]).astype(np.int64)
    pv = np.rint(pixels[:, 1]).astype(np.int64)
    ok = (pu >= 0) & (pu < k.width) & (pv >= 0) & (pv < k.height)
    out = np.full(len(pixels), -1, dtype=np.int64)
    out[ok] = index[pv[ok], pu[ok]]
    return out


def model_points_at_pixels(smap: SurfelMap, k: CameraIntrinsics, pixels, surfels) -> np.ndarray:
    """Subpixel model points: each pixel ray intersected with its surfel's tangent plane.

    Falls back to the surfel center when the ray is nearly parallel to the disk
    or the hit lies outside twice the surfel radius.
    """
    pixels = np.asarray(pixels, dtype=float).reshape(-1, 2)
    p = smap.positions[surfels]
    n = smap.normals[surfels]
    rays = np.column_stack([(pixels[:, 0] - k.cx) / k.fx, (pixels[:, 1] - k.cy) / k.fy, np.ones(len(pixels))])
    denom = np.einsum("mi,mi->m", n, rays)
    safe = np.abs(denom) > 1e-6
    t = np.einsum("mi,mi->m", n, p) / np.where(safe, denom, 1.0)
    hit = t[:, None] * rays
    ok = safe & (np.linalg.norm(hit - p, axis=1) <= 2.0 * smap.radii[surfels])
    return np.where(ok[:, None], hit, p)


def observed_feature_points(depth, k: CameraIntrinsics, pixels):
    """``D(c) K^-1 [c, 1]`` for observed pixels; NaN rows where depth is invalid."""
    pixels = np.asarray(pixels, dtype=float).reshape(-1, 2)
    pu = np.rint(pixels[:, 0]).astype(np.int64)
    pv = np.rint(pixels[:, 1]).astype(np.int64)
    ok = (pu >= 0) & (pu < k.width) & (pv >= 0) & (pv < k.height)
    d = np.full(len(pixels), np.nan)
    d[ok] = depth[pv[ok], pu[ok]]
    d = np.where(d > 0, d, np.nan)
    return np.stack([(pixels[:, 0] - k.cx) / k.fx * d, (pixels[:, 1] - k.cy) / k.fy * d, d], axis=1)


def residuals_corr(points, idx, weights, graph: EDGraph, targets, lambda_c: float = 10.0,
                   want_jac: bool = True) -> ResidualBlock:
    """Feature residuals ``sqrt(lambda_c) (T(p_m) - o_c)``.

    ``points`` are the matched model surfels (with skinning ``idx``/``weights``)
    and ``targets`` the observed 3D points. Pairs with non-finite targets are
    dropped.
    """
    wt = np.sqrt(lambda_c)
    targets = np.asarray(targets, dtype=float).reshape(-1, 3)
    keep = np.nonzero(np.isfinite(targets).all(axis=1))[0]
    if len(keep) < len(targets):
        log.debug("dropped %d correspondences without valid depth", len(targets) - len(keep))
    if len(keep) == 0:
        return ResidualBlock("corr", keep, np.zeros((0, 3)), wt)
    p, ix, w = points[keep], idx[keep], weights[keep]
    _, rg, d, s = _warp_parts(p, ix, w, graph)
    r = wt * (s @ rg.T + graph.global_b - targets[keep])
    block = ResidualBlock("corr", keep, r, wt)
    if want_jac:
        cols, vals = _warp_jacobians(ix, w, graph, rg, d, s)
        m, nc = cols.shape
        block.rows = np.repeat(np.arange(3 * m), nc)
        block.cols = np.repeat(cols[:, None, :], 3, axis=1).ravel()
        block.jac = (wt * vals).ravel()
    return block


# --------------------------------------------------------------------------
# linear algebra


def assemble_jacobian(blocks, n_params: int) -> tuple[sp.csr_matrix, np.ndarray]:
    rows, cols, vals, fs = [], [], [], []
    offset = 0
    for b in blocks:
        f = b.flat
        rows.append(b.rows + offset)
        cols.append(b.cols)
        vals.append(b.jac)
        fs.append(f)
        offset += len(f)
    f = np.concatenate(fs) if fs else np.zeros(0)
    if offset == 0:
        return sp.csr_matrix((0, n_params)), f
    jac = sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                        shape=(offset, n_params)).tocsr()
    return jac, f


def assemble_normal_equations(blocks, x) -> tuple[sp.csr_matrix, np.ndarray]:
    """``(J^T J, J^T f)`` for the stacked residual blocks at parameters ``x``."""
    jac, f = assemble_jacobian(blocks, len(x))
    jt = jac.T.tocsr()
    return (jt @ jac).tocsr(), jt @ f


def pcg_solve(a, rhs, iters: int = 10, tol: float = 1e-12, x0=None) -> np.ndarray:
    """Jacobi-preconditioned conjugate gradient; returns the lowest-residual iterate.

    Stops after ``iters`` iterations or when ``||r|| / ||rhs|| < tol``.
    """
    rhs = np.asarray(rhs, dtype=float)
    diag = a.diagonal() if hasattr(a, "diagonal") else np.diag(a)
    diag = np.asarray(diag, dtype=float)
    if not (np.all(np.isfinite(diag)) and np.all(np.isfinite(rhs))):
        raise NonFiniteSystem("non-finite entries in the linear system")
    inv = np.where(diag > 0, 1.0 / np.where(diag > 0, diag, 1.0), 1.0)
    x = np.zeros_like(rhs) if x0 is None else np.asarray(x0, dtype=float).copy()
    r = rhs - a @ x
    bnorm = np.linalg.norm(rhs)
    if bnorm == 0.0:
        return np.zeros_like(rhs)
    best, best_res = x.copy(), np.linalg.norm(r)
    z = inv * r
    p = z.copy()
    rz = r @ z
    for _ in range(iters):
        if best_res / bnorm < tol:
            break
        ap = a @ p
        pap = p @ ap
        if not np.isfinite(pap):
            raise NonFiniteSystem("non-finite curvature in CG")
        if pap <= 0:
            break
        alpha = rz / pap
        x = x + alpha * p
        r = r - alpha * ap
        res = np.linalg.norm(r)
        if res < best_res:
            best, best_res = x.copy(), res
        z = inv * r
        rz_new = r @ z
        p = z + (rz_new / rz) * p
        rz = rz_new
    return best


# --------------------------------------------------------------------------
# LM loop


@dataclass
class LMResult:
    graph: EDGraph
    initial_cost: float
    final_cost: float
    iterations: int
    accepted_costs: list[float]
    log: list[dict]
    reason: str
    max_step: float = 0.0


class FrameProblem:
    """Energy of one frame as a function of the parameter vector.

    Skinning is computed once from the committed geometry. Association, fixed
    normals and robust weights are re-derived at every evaluation point, so the
    cost compared during step acceptance is always the true energy there.
    """

    def __init__(self, smap: SurfelMap, graph: EDGraph, obs: FrameObservation, cfg: SolverConfig):
        self.graph = graph
        self.obs = obs
        self.cfg = cfg
        n = len(smap)
        if n > cfg.max_data:
            sub = np.linspace(0, n - 1, cfg.max_data).astype(np.int64)
        else:
            sub = np.arange(n)
        self.points = smap.positions[sub]
        self.normals = smap.normals[sub]
        self.idx, self.weights = skinning(self.points, graph)
        pairs = np.asarray(obs.pairs, dtype=float).reshape(-1, 4)
        m = resolve_model_pixels(smap, obs.k, pairs[:, :2]) if len(pairs) else np.zeros(0, np.int64)
        targets = observed_feature_points(obs.depth, obs.k, pairs[:, 2:]) if len(pairs) else np.zeros((0, 3))
        good = m >= 0
        self.corr_points = model_points_at_pixels(smap, obs.k, pairs[good, :2], m[good]) if len(pairs) \
            else np.zeros((0, 3))
        self.corr_targets = targets[good]
        if len(self.corr_points):
            self.corr_idx, self.corr_w = skinning(self.corr_points, graph)
        else:
            self.corr_idx = np.zeros((0, graph.k), np.int64)
            self.corr_w = np.zeros((0, graph.k))

    def blocks(self, x, want_jac: bool = True) -> list[ResidualBlock]:
        cfg = self.cfg
        g = self.graph.with_params(x)
        out = []
        try:
            out.append(residuals_data(self.points, self.normals, self.idx, self.weights, g, self.obs.depth,
                                      self.obs.k, gate=cfg.assoc_dist,
                                      robust_percentile=cfg.robust_percentile,
                                      robust_weight=cfg.robust_weight, want_jac=want_jac))
        except NoAssociations:
            log.debug("data term empty")
        out.append(residuals_arap(g, cfg.lambda_a, want_jac))
        out.append(residuals_rot(g, cfg.lambda_r, want_jac))
        if len(self.corr_points):
            out.append(residuals_corr(self.corr_points, self.corr_idx, self.corr_w, g, self.corr_targets,
                                      cfg.lambda_c, want_jac))
        return out


def total_energy(blocks) -> float:
    return float(sum(b.energy() for b in blocks))


def lm_optimize(smap: SurfelMap, graph: EDGraph, obs: FrameObservation,
                cfg: SolverConfig = SolverConfig()) -> LMResult:
    """Damped Gauss-Newton on the frame energy starting from the graph's parameters.

    A step is accepted only when it lowers the energy. Raises
    :class:`SolverDiverged` once the damping exceeds ``cfg.mu_max``.
    """
    problem = FrameProblem(smap, graph, obs, cfg)
    x = graph.params()
    blocks = problem.blocks(x)
    cost = total_energy(blocks)
    initial = cost
    history = [{"iter": 0, "cost": cost, "mu": cfg.mu0, "accepted": True}]
    accepted = [cost]
    mu = cfg.mu0
    reason = "max_iters"
    iters = 0
    max_step = 0.0
    a, grad = assemble_normal_equations(blocks, x)
    if cost <= 1e-24 or np.max(np.abs(grad), initial=0.0) < cfg.grad_tol:
        reason = "converged_at_start"
    else:
        eye = sp.identity(len(x), format="csr")
        while iters < cfg.max_lm_iters:
            iters += 1
            delta = pcg_solve(a + mu * eye, -grad, cfg.pcg_iters, cfg.pcg_tol)
            x_new = x + delta
            new_blocks = problem.blocks(x_new, want_jac=False)
            new_cost = total_energy(new_blocks)
            ok = bool(np.isfinite(new_cost) and new_cost < cost)
            history.append({"iter": iters, "cost": new_cost, "mu": mu, "accepted": ok})
            if ok:
                rel = (cost - new_cost) / max(cost, 1e-300)
                x, cost = x_new, new_cost
                accepted.append(cost)
                max_step = max(max_step, float(np.max(np.abs(delta))))
                mu *= cfg.mu_down
                if rel < cfg.rel_tol:
                    reason = "rel_tol"
                    break
                blocks = problem.blocks(x)
                a, grad = assemble_normal_equations(blocks, x)
                if np.max(np.abs(grad)) < cfg.grad_tol:
                    reason = "grad_tol"
                    break
            else:
                mu *= cfg.mu_up
                if mu > cfg.mu_max:
                    raise SolverDiverged(f"damping exceeded {cfg.mu_max:g}")
    out = graph.with_params(x)
    return LMResult(out, initial, cost, iters, accepted, history, reason, max_step)


def format_solver_log(frame: int, result: LMResult) -> str:
    lines = [f"{frame} {h['iter']} {h['cost']:.12e} {h['mu']:.3e} {int(h['accepted'])}" for h in result.log]
    return "\n".join(lines) + "\n"
