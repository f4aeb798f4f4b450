"""Shared fixtures and independent reference implementations for the tests."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from supertrack.surfels import EDGraph
from supertrack.tool_tracker import FilterConfig

ROOT = Path(__file__).resolve().parents[1]
CONFIGS = ROOT / "configs"


def synthetic_filter() -> FilterConfig:
    """Filter preset used for simulated data (see configs/synthetic.json)."""
    return FilterConfig.from_dict(json.loads((CONFIGS / "synthetic.json").read_text())["filter"])


def random_graph(rng, n_nodes=12, scale=0.05, k=4, k_edge=6, spread=0.1) -> EDGraph:
    """Graph with random node positions and random, unnormalized parameters."""
    g = EDGraph.from_nodes(rng.uniform(-scale, scale, (n_nodes, 3)), k=k, k_edge=k_edge)
    # quaternion entries get the full spread, translations a tenth of it
    per_block = np.r_[np.ones(4), 0.1 * np.ones(3)]
    x = g.params() + spread * rng.standard_normal(g.n_params) * np.tile(per_block, n_nodes + 1)
    g.set_params(x)
    return g


def rot_from_quat(q) -> np.ndarray:
    """Rotation of a scalar-first quaternion via scipy (normalizes internally)."""
    q = np.asarray(q, float)
    return Rotation.from_quat([q[1], q[2], q[3], q[0]]).as_matrix()


def dense_knn(p, nodes, k):
    """Brute-force k nearest nodes and ``(1 - d/d_max)^2`` weights."""
    d = np.sqrt(((nodes - p) ** 2).sum(axis=1))
    order = np.argsort(d, kind="stable")
    near = order[:k]
    d_max = d[order[k]] if len(nodes) > k else 2.0 * d[order[k - 1]]
    w = np.array([max(1.0 - d[i] / d_max, 0.0) ** 2 for i in near])
    return near, w / w.sum()


def dense_warp(p, n, graph: EDGraph):
    """Straight per-point evaluation of the warp with normalized quaternions."""
    idx, w = dense_knn(p, graph.nodes, graph.k)
    rg = rot_from_quat(graph.global_q)
    pos = np.zeros(3)
    nrm = np.zeros(3)
    for i, a in zip(idx, w):
        r = rot_from_quat(graph.quats[i])
        g = graph.nodes[i]
        pos += a * (r @ (p - g) + g + graph.trans[i])
        nrm += a * (r @ n)
    pos = rg @ pos + graph.global_b
    nrm = rg @ nrm
    return pos, nrm / np.linalg.norm(nrm)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
