"""Surfel map, embedded deformation graph, warp field and depth fusion."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .errors import EmptyFrame, InsufficientNodes, ZeroNormal
from .geometry import CameraIntrinsics, backproject_depth, knn_weights, knn_weights_batch, quat_to_matrix

log = logging.getLogger(__name__)

IDENTITY_QUAT = np.array([1.0, 0.0, 0.0, 0.0])


@dataclass(frozen=True)
class Surfel:
    p: np.ndarray
    n: np.ndarray
    c: np.ndarray = field(default_factory=lambda: np.full(3, 0.5))
    r: float = 0.001
    conf: float = 1.0
    t: int = 0

    def __post_init__(self):
        for name in ("p", "n", "c"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float).reshape(3))


@dataclass
class SurfelMap:
    """Structure-of-arrays surfel storage with persistent integer ids."""

    positions: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    normals: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    colors: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    radii: np.ndarray = field(default_factory=lambda: np.zeros(0))
    confidence: np.ndarray = field(default_factory=lambda: np.zeros(0))
    timestamps: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    ids: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    next_id: int = 0

    def __len__(self):
        return len(self.radii)

    def copy(self) -> SurfelMap:
        return SurfelMap(self.positions.copy(), self.normals.copy(), self.colors.copy(),
                         self.radii.copy(), self.confidence.copy(), self.timestamps.copy(),
                         self.ids.copy(), self.next_id)

    def subset(self, keep) -> SurfelMap:
        return SurfelMap(self.positions[keep], self.normals[keep], self.colors[keep],
                         self.radii[keep], self.confidence[keep], self.timestamps[keep],
                         self.ids[keep], self.next_id)

    def surfel(self, i: int) -> Surfel:
        return Surfel(self.positions[i], self.normals[i], self.colors[i], float(self.radii[i]),
                      float(self.confidence[i]), int(self.timestamps[i]))

    def append(self, positions, normals, colors, radii, confidence, timestamp: int) -> SurfelMap:
        n = len(radii)
        ids = np.arange(self.next_id, self.next_id + n, dtype=np.int64)
        return SurfelMap(
            np.concatenate([self.positions, positions]), np.concatenate([self.normals, normals]),
            np.concatenate([self.colors, colors]), np.concatenate([self.radii, radii]),
            np.concatenate([self.confidence, confidence]),
            np.concatenate([self.timestamps, np.full(n, timestamp, dtype=np.int64)]),
            np.concatenate([self.ids, ids]), self.next_id + n)

    @classmethod
    def from_surfels(cls, surfels) -> SurfelMap:
        surfels = list(surfels)
        m = cls()
        if not surfels:
            return m
        m = m.append(np.array([s.p for s in surfels]), np.array([s.n for s in surfels]),
                     np.array([s.c for s in surfels]), np.array([s.r for s in surfels], float),
                     np.array([s.conf for s in surfels], float), 0)
        m.timestamps = np.array([s.t for s in surfels], dtype=np.int64)
        return m


@dataclass
class EDGraph:
    """Embedded deformation graph.

    ``quats``/``trans`` hold the current frame's per-node deformation;
    ``global_q``/``global_b`` the shared rigid motion. ``edges`` lists, per node,
    the indices of its ``k_edge`` nearest neighbours.
    """

    nodes: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    quats: np.ndarray = field(default_factory=lambda: np.zeros((0, 4)))
    trans: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    edges: np.ndarray = field(default_factory=lambda: np.zeros((0, 0), dtype=np.int64))
    global_q: np.ndarray = field(default_factory=lambda: IDENTITY_QUAT.copy())
    global_b: np.ndarray = field(default_factory=lambda: np.zeros(3))
    k: int = 4
    k_edge: int = 6

    def __len__(self):
        return len(self.nodes)

    @classmethod
    def from_nodes(cls, nodes, k: int = 4, k_edge: int = 6) -> EDGraph:
        nodes = np.asarray(nodes, dtype=float).reshape(-1, 3)
        n = len(nodes)
        g = cls(nodes.copy(), np.tile(IDENTITY_QUAT, (n, 1)), np.zeros((n, 3)),
                np.zeros((n, 0), dtype=np.int64), IDENTITY_QUAT.copy(), np.zeros(3), k, k_edge)
        g.rebuild_edges()
        return g

    def copy(self) -> EDGraph:
        return EDGraph(self.nodes.copy(), self.quats.copy(), self.trans.copy(), self.edges.copy(),
                       self.global_q.copy(), self.global_b.copy(), self.k, self.k_edge)

    @property
    def n_params(self) -> int:
        return 7 * (len(self.nodes) + 1)

    def rebuild_edges(self) -> None:
        n = len(self.nodes)
        kk = min(self.k_edge, n - 1)
        if kk <= 0:
            self.edges = np.zeros((n, 0), dtype=np.int64)
            return
        _, idx = cKDTree(self.nodes).query(self.nodes, k=kk + 1)
        idx = idx.reshape(n, kk + 1)
        # drop self; with duplicate positions self may not come first
        out = np.empty((n, kk), dtype=np.int64)
        for i in range(n):
            row = idx[i][idx[i] != i]
            out[i] = row[:kk]
        self.edges = out

    def edge_list(self) -> np.ndarray:
        """Directed edges ``(i, j)`` as an ``(E, 2)`` array."""
        n, kk = self.edges.shape
        return np.column_stack([np.repeat(np.arange(n), kk), self.edges.ravel()])

    def params(self) -> np.ndarray:
        blocks = [np.concatenate([self.global_q, self.global_b])]
        blocks.append(np.concatenate([self.quats, self.trans], axis=1).ravel())
        return np.concatenate(blocks)

    def set_params(self, x) -> None:
        x = np.asarray(x, dtype=float)
        if x.size != self.n_params:
            raise ValueError(f"expected {self.n_params} parameters, got {x.size}")
        self.global_q = x[0:4].copy()
        self.global_b = x[4:7].copy()
        body = x[7:].reshape(-1, 7)
        self.quats = body[:, :4].copy()
        self.trans = body[:, 4:].copy()

    def with_params(self, x) -> EDGraph:
        g = self.copy()
        g.set_params(x)
        return g

    def reset_params(self) -> None:
        self.quats = np.tile(IDENTITY_QUAT, (len(self.nodes), 1))
        self.trans = np.zeros((len(self.nodes), 3))
        self.global_q = IDENTITY_QUAT.copy()
        self.global_b = np.zeros(3)

    def is_identity(self, tol: float = 0.0) -> bool:
        return bool(np.all(np.abs(self.params() - EDGraph.identity_params(len(self.nodes))) <= tol))

    @staticmethod
    def identity_params(n: int) -> np.ndarray:
        x = np.zeros(7 * (n + 1))
        x[0] = 1.0
        x[7::7] = 1.0
        return x

    def add_nodes(self, new_nodes) -> EDGraph:
        new_nodes = np.asarray(new_nodes, dtype=float).reshape(-1, 3)
        g = self.copy()
        m = len(new_nodes)
        g.nodes = np.concatenate([g.nodes, new_nodes])
        g.quats = np.concatenate([g.quats, np.tile(IDENTITY_QUAT, (m, 1))])
        g.trans = np.concatenate([g.trans, np.zeros((m, 3))])
        g.rebuild_edges()
        return g


# --------------------------------------------------------------------------
# warp field


def node_rotations(graph: EDGraph, normalize: bool) -> tuple[np.ndarray, np.ndarray]:
    q = graph.quats
    qg = graph.global_q
    if normalize:
        q = q / np.linalg.norm(q, axis=1, keepdims=True)
        qg = qg / np.linalg.norm(qg)
    return quat_to_matrix(q), quat_to_matrix(qg)


def skinning(points, graph: EDGraph) -> tuple[np.ndarray, np.ndarray]:
    """KNN node indices and weights ``(M, k)`` for every point."""
    if len(graph.nodes) < graph.k:
        raise InsufficientNodes(f"graph has {len(graph.nodes)} nodes, needs {graph.k}")
    return knn_weights_batch(points, graph.nodes, graph.k)


def warp_positions(points, idx, weights, graph: EDGraph, normalize: bool = True) -> np.ndarray:
    """Warp ``(M, 3)`` points with precomputed skinning ``idx``/``weights``."""
    rots, rg = node_rotations(graph, normalize)
    g = graph.nodes[idx]                        # (M, k, 3)
    local = np.einsum("mkij,mkj->mki", rots[idx], points[:, None, :] - g) + g + graph.trans[idx]
    blended = np.einsum("mk,mki->mi", weights, local)
    return blended @ rg.T + graph.global_b


def warp_normals(normals, idx, weights, graph: EDGraph, normalize: bool = True,
                 renormalize: bool = True) -> np.ndarray:
    rots, rg = node_rotations(graph, normalize)
    blended = np.einsum("mk,mkij,mj->mi", weights, rots[idx], normals)
    out = blended @ rg.T
    if renormalize:
        norm = np.linalg.norm(out, axis=1, keepdims=True)
        out = out / np.where(norm < 1e-9, 1.0, norm)
    return out


def warp_point(s: Surfel, graph: EDGraph) -> np.ndarray:
    idx, w = knn_weights(s.p, graph.nodes, graph.k)
    return warp_positions(s.p[None], idx[None], w[None], graph)[0]


def warp_normal(s: Surfel, graph: EDGraph) -> np.ndarray:
    idx, w = knn_weights(s.p, graph.nodes, graph.k)
    n = warp_normals(s.n[None], idx[None], w[None], graph, renormalize=False)[0]
    norm = np.linalg.norm(n)
    if norm < 1e-9:
        raise ZeroNormal("blended normal vanished")
    return n / norm


def commit_deformation(smap: SurfelMap, graph: EDGraph, skin=None) -> tuple[SurfelMap, EDGraph]:
    """Fold the current deformation into surfels and node positions, then reset it.

    Quaternions are normalized before conversion. Surfels whose blended normal
    degenerates keep their previous normal.
    """
    out = smap.copy()
    if len(smap) and len(graph.nodes) >= graph.k:
        idx, w = skin if skin is not None else skinning(smap.positions, graph)
        out.positions = warp_positions(smap.positions, idx, w, graph)
        raw = warp_normals(smap.normals, idx, w, graph, renormalize=False)
        norm = np.linalg.norm(raw, axis=1, keepdims=True)
        bad = norm[:, 0] < 1e-9
        if np.any(bad):
            log.warning("%d surfels with degenerate blended normals left unwarped", int(bad.sum()))
        out.normals = np.where(bad[:, None], smap.normals, raw / np.where(bad[:, None], 1.0, norm))
    g = graph.copy()
    _, rg = node_rotations(graph, True)
    # each node moves by its own translation, then the global transform
    g.nodes = (graph.nodes + graph.trans) @ rg.T + graph.global_b
    g.reset_params()
    if len(g.nodes) > 1:
        g.rebuild_edges()
    return out, g


# --------------------------------------------------------------------------
# surfel attributes


def surfel_radius(d, f: float, n_z, return_flag: bool = False):
    """Disk radius ``sqrt(2) d / (f |n_z|)``; ``|n_z|`` is clamped to at least 0.1."""
    nz = np.abs(np.asarray(n_z, dtype=float))
    grazing = nz < 0.1
    r = np.sqrt(2.0) * np.asarray(d, dtype=float) / (f * np.maximum(nz, 0.1))
    if np.ndim(r) == 0:
        r, grazing = float(r), bool(grazing)
    return (r, grazing) if return_flag else r


def surfel_confidence(d_c):
    """Confidence ``exp(-d_c^2 / 0.72)`` for normalized radial pixel distance ``d_c``."""
    return np.exp(-np.asarray(d_c, dtype=float) ** 2 / 0.72)


def normalized_center_distance(k: CameraIntrinsics, u, v):
    corner = np.hypot(max(k.cx, k.width - 1 - k.cx), max(k.cy, k.height - 1 - k.cy))
    return np.hypot(np.asarray(u) - k.cx, np.asarray(v) - k.cy) / corner


def normals_from_depth(k: CameraIntrinsics, depth: np.ndarray, max_jump: float = 0.005) -> np.ndarray:
    """Per-pixel normals from central differences of the back-projected depth.

    Neighbours that are invalid or farther than ``max_jump`` in depth fall back
    to one-sided differences. Normals point toward the camera. Pixels without
    any usable neighbour in one direction get the reversed viewing ray.
    """
    pts = backproject_depth(k, depth)
    valid = np.isfinite(depth) & (depth > 0)

    def shifted(arr, du, dv, fill):
        out = np.full_like(arr, fill)
        h, w = arr.shape[:2]
        ys = slice(max(dv, 0), h + min(dv, 0))
        yd = slice(max(-dv, 0), h + min(-dv, 0))
        xs = slice(max(du, 0), w + min(du, 0))
        xd = slice(max(-du, 0), w + min(-du, 0))
        out[yd, xd] = arr[ys, xs]
        return out

    def tangent(du, dv):
        fwd = shifted(pts, du, dv, np.nan)
        bwd = shifted(pts, -du, -dv, np.nan)
        fwd_ok = shifted(valid, du, dv, False) & (np.abs(fwd[..., 2] - depth) < max_jump)
        bwd_ok = shifted(valid, -du, -dv, False) & (np.abs(bwd[..., 2] - depth) < max_jump)
        t = np.where((fwd_ok & bwd_ok)[..., None], fwd - bwd,
                     np.where(fwd_ok[..., None], fwd - pts,
                              np.where(bwd_ok[..., None], pts - bwd, np.nan)))
        return t, fwd_ok | bwd_ok

    tu, ok_u = tangent(1, 0)
    tv, ok_v = tangent(0, 1)
    n = np.cross(tu, tv)
    norm = np.linalg.norm(n, axis=-1, keepdims=True)
    good = ok_u & ok_v & (norm[..., 0] > 1e-15)
    n = np.where(good[..., None], n / np.where(good[..., None], norm, 1.0), 0.0)
    ray = pts / np.linalg.norm(np.where(valid[..., None], pts, 1.0), axis=-1, keepdims=True)
    n = np.where(good[..., None], n, -ray)
    flip = np.sum(n * pts, axis=-1) > 0
    n = np.where(flip[..., None], -n, n)
    return np.where(valid[..., None], n, np.nan)


# --------------------------------------------------------------------------
# fusion


@dataclass(frozen=True)
class FusionConfig:
    depth_tol: float = 0.005
    normal_angle_deg: float = 30.0
    t_stale: int = 30
    conf_stable: float = 10.0
    node_spacing: float = 0.007
    max_normal_jump: float = 0.005


def observed_surfels(depth, color, mask, k: CameraIntrinsics, cfg: FusionConfig):
    """Surfel attributes for every valid, unmasked pixel.

    Returns ``(valid, positions, normals, colors, radii, confidence)`` where the
    arrays are per valid pixel in row-major order.
    """
    valid = np.isfinite(depth) & (depth > 0)
    if mask is not None:
        valid &= ~np.asarray(mask, bool)
    pts = backproject_depth(k, depth)
    nrm = normals_from_depth(k, depth, cfg.max_normal_jump)
    v, u = np.nonzero(valid)
    p = pts[v, u]
    n = nrm[v, u]
    c = np.asarray(color, dtype=float)[v, u] if color is not None else np.full((len(u), 3), 0.5)
    r = surfel_radius(depth[v, u], k.fx, n[:, 2])
    conf = surfel_confidence(normalized_center_distance(k, u, v))
    return valid, p, n, c, np.atleast_1d(r), np.atleast_1d(conf)


def project_to_pixels(k: CameraIntrinsics, points):
    """Rounded pixel coordinates and an in-image flag for camera-frame points."""
    z = points[:, 2]
    front = z > 1e-9
    zs = np.where(front, z, 1.0)
    u = np.rint(k.fx * points[:, 0] / zs + k.cx)
    v = np.rint(k.fy * points[:, 1] / zs + k.cy)
    inside = front & (u >= 0) & (u < k.width) & (v >= 0) & (v < k.height)
    return np.where(inside, u, 0).astype(np.int64), np.where(inside, v, 0).astype(np.int64), inside


def fuse_frame(smap: SurfelMap, depth, color, mask, k: CameraIntrinsics, frame_idx: int,
               cfg: FusionConfig = FusionConfig()) -> SurfelMap:
    """Merge one preprocessed depth frame into the map.

    Each map surfel is projected to the pixel it lands on; when depth and normal
    agree with the observation there, the two are merged by confidence-weighted
    averaging. At most one map surfel merges per pixel (the most confident).
    Unmatched pixels become new surfels; stale low-confidence surfels are dropped.
    """
    valid, p, n, c, r, conf = observed_surfels(depth, color, mask, k, cfg)
    if not valid.any():
        raise EmptyFrame("no valid unmasked pixels")
    h, w = valid.shape
    pix_index = np.full(valid.shape, -1, dtype=np.int64)
    pix_index[valid] = np.arange(int(valid.sum()))

    out = smap.copy()
    merged_obs = np.zeros(len(r), bool)
    if len(smap):
        u, v, inside = project_to_pixels(k, smap.positions)
        obs = np.where(inside, pix_index[v, u], -1)
        cand = obs >= 0
        si = np.nonzero(cand)[0]
        oi = obs[cand]
        dz = np.abs(smap.positions[si, 2] - p[oi, 2])
        cosang = np.sum(smap.normals[si] * n[oi], axis=1)
        ok = (dz < cfg.depth_tol) & (cosang > np.cos(np.radians(cfg.normal_angle_deg)))
        si, oi = si[ok], oi[ok]
        if len(si):
            # one surfel per pixel: highest confidence, then smallest depth gap
            order = np.lexsort((dz[ok], -smap.confidence[si], oi))
            si, oi = si[order], oi[order]
            first = np.ones(len(oi), bool)
            first[1:] = oi[1:] != oi[:-1]
            si, oi = si[first], oi[first]
            cs = smap.confidence[si][:, None]
            co = conf[oi][:, None]
            tot = cs + co
            out.positions[si] = (cs * smap.positions[si] + co * p[oi]) / tot
            nn = cs * smap.normals[si] + co * n[oi]
            out.normals[si] = nn / np.linalg.norm(nn, axis=1, keepdims=True)
            out.colors[si] = (cs * smap.colors[si] + co * c[oi]) / tot
            out.radii[si] = np.minimum(smap.radii[si], r[oi])
            out.confidence[si] = tot[:, 0]
            out.timestamps[si] = frame_idx
            merged_obs[oi] = True
    new = ~merged_obs
    out = out.append(p[new], n[new], c[new], r[new], conf[new], frame_idx)
    stale = ((frame_idx - out.timestamps) > cfg.t_stale) & (out.confidence < cfg.conf_stable)
    if np.any(stale):
        out = out.subset(~stale)
    return out


def new_surfel_mask(smap: SurfelMap, first_new_id: int) -> np.ndarray:
    return smap.ids >= first_new_id


# --------------------------------------------------------------------------
# node sampling


def sample_ed_nodes(smap: SurfelMap, graph: EDGraph | None, node_spacing: float,
                    rng: np.random.Generator, candidates=None, k: int = 4,
                    k_edge: int = 6) -> EDGraph:
    """Add nodes so that every candidate surfel lies within ``node_spacing`` of one.

    Uncovered candidates (all surfels by default) are visited in random order and
    promoted to nodes when still uncovered. Returns the original graph object when
    nothing needs to be added.
    """
    if graph is None:
        graph = EDGraph(k=k, k_edge=k_edge)
    pts = smap.positions if candidates is None else smap.positions[candidates]
    if len(pts) == 0:
        return graph
    existing = graph.nodes
    uncovered = _uncovered(pts, existing, node_spacing)
    if not uncovered.any():
        return graph
    pts = pts[uncovered]
    # a coarse voxel pass keeps the sequential pass short
    cell = node_spacing / 2.0
    keys = np.floor(pts / cell).astype(np.int64)
    perm = rng.permutation(len(pts))
    _, first = np.unique(keys[perm], axis=0, return_index=True)
    order = perm[np.sort(first)]
    added = _poisson_select(pts[order], existing, node_spacing)
    nodes = list(added)
    while True:
        allnodes = np.concatenate([existing, np.array(nodes).reshape(-1, 3)])
        left = _uncovered(pts, allnodes, node_spacing)
        if not left.any():
            break
        rest = pts[left][rng.permutation(int(left.sum()))]
        nodes.extend(_poisson_select(rest, allnodes, node_spacing))
    return graph.add_nodes(np.array(nodes).reshape(-1, 3))


def _uncovered(points, nodes, spacing) -> np.ndarray:
    if len(nodes) == 0:
        return np.ones(len(points), bool)
    d, _ = cKDTree(nodes).query(points, k=1)
    return d > spacing


def _poisson_select(points, existing, spacing) -> list[np.ndarray]:
    """Sequentially accept points farther than ``spacing`` from every accepted node."""
    cell = spacing
    grid: dict[tuple, list[np.ndarray]] = {}
    for q in existing:
        grid.setdefault(tuple(np.floor(q / cell).astype(int)), []).append(q)
    accepted = []
    s2 = spacing * spacing
    offsets = [(a, b, c) for a in (-1, 0, 1) for b in (-1, 0, 1) for c in (-1, 0, 1)]
    for p in points:
        key = np.floor(p / cell).astype(int)
        ok = True
        for off in offsets:
            for q in grid.get((key[0] + off[0], key[1] + off[1], key[2] + off[2]), ()):
                d = p - q
                if d @ d <= s2:
                    ok = False
                    break
            if not ok:
                break
        if ok:
            accepted.append(p)
            grid.setdefault(tuple(key), []).append(p)
    return accepted


# --------------------------------------------------------------------------
# PLY io

_PLY_FIELDS = ("x", "y", "z", "nx", "ny", "nz", "red", "green", "blue",
               "radius", "confidence", "timestamp", "id")


def export_ply(smap: SurfelMap, path) -> None:
    """Write the map as ASCII PLY with 13 per-vertex properties."""
    header = ["ply", "format ascii 1.0", f"element vertex {len(smap)}"]
    header += [f"property double {name}" for name in _PLY_FIELDS[:11]]
    header += ["property int timestamp", "property int id", "end_header"]
    data = np.column_stack([smap.positions, smap.normals, smap.colors, smap.radii,
                            smap.confidence])
    with open(path, "w") as fh:
        fh.write("\n".join(header) + "\n")
        if len(smap):
            body = np.column_stack([data, smap.timestamps, smap.ids])
            fmt = ["%.17g"] * 11 + ["%d", "%d"]
            np.savetxt(fh, body, fmt=fmt)


def import_ply(path) -> SurfelMap:
    text = Path(path).read_text()
    head, _, body = text.partition("end_header\n")
    n = 0
    props = []
    for line in head.splitlines():
        parts = line.split()
        if parts[:2] == ["element", "vertex"]:
            n = int(parts[2])
        elif parts and parts[0] == "property":
            props.append(parts[-1])
    if tuple(props) != _PLY_FIELDS:
        raise ValueError(f"unexpected PLY properties {props}")
    if n == 0:
        return SurfelMap()
    rows = [line.split() for line in body.splitlines() if line.strip()]
    if len(rows) != n:
        raise ValueError(f"PLY declares {n} vertices but holds {len(rows)}")
    vals = np.array([[float(x) for x in r[:11]] for r in rows])
    ints = np.array([[int(x) for x in r[11:13]] for r in rows], dtype=np.int64)
    return SurfelMap(vals[:, 0:3], vals[:, 3:6], vals[:, 6:9], vals[:, 9], vals[:, 10],
                     ints[:, 0], ints[:, 1], int(ints[:, 1].max()) + 1)
