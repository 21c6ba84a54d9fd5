"""Directed-graph DeltaCon similarity.

For a directed weighted adjacency A with degree matrix D (in-degree plus
out-degree, counting edges), the node-affinity matrix is

    S(A) = (I + eps^2 D - eps A)^{-1}

and two graphs over the same nodes compare as 1 / (1 + ||S(A1) - S(A2)||_F).
Direct neighbors contribute most to S, then neighbors of neighbors, and so
on, so the score is 1 exactly for identical affinity structure and decays
smoothly toward 0 as neighborhoods diverge.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .graphs import SpatialGraph


@dataclass
class DeltaConConfig:
    """Epsilon policy and neighbor count for similarity runs.

    With `epsilon=None` the attenuation factor is degree-derived:
    1 / (1 + max total degree over both graphs), which keeps the linear
    system diagonally dominant and the metric symmetric in its arguments.
    """

    epsilon: float | None = None
    k: int = 8


@dataclass
class DeltaConReport:
    slide_id: str
    score: float


def degree_pair(graph: SpatialGraph) -> tuple[np.ndarray, np.ndarray]:
    """Diagonals of the in/out degree matrices, counting nonzero edges."""
    nz = graph.adjacency != 0.0
    d_out = nz.sum(axis=1).astype(np.float64)
    d_in = nz.sum(axis=0).astype(np.float64)
    return d_in, d_out


def total_degree(graph: SpatialGraph) -> np.ndarray:
    d_in, d_out = degree_pair(graph)
    return d_in + d_out


def resolve_epsilon(cfg: DeltaConConfig, *graphs: SpatialGraph) -> float:
    """Resolve the attenuation factor shared by all graphs under comparison."""
    dmax = max(float(total_degree(g).max()) for g in graphs)
    eps = float(cfg.epsilon) if cfg.epsilon is not None else 1.0 / (1.0 + dmax)
    if eps <= 0.0 or eps * dmax >= 1.0:
        raise ValueError(f"epsilon {eps} violates 0 < eps and eps * max_degree < 1 (max degree {dmax})")
    return eps


def deltacon_s(graph: SpatialGraph, epsilon: float) -> np.ndarray:
    """Node-affinity matrix S = (I + eps^2 D - eps A)^{-1} via dense LU solve."""
    n = graph.n
    d = total_degree(graph)
    system = np.eye(n) + (epsilon * epsilon) * np.diag(d) - epsilon * graph.adjacency
    try:
        s = np.linalg.solve(system, np.eye(n))
    except np.linalg.LinAlgError as exc:  # cannot occur under the epsilon bound
        raise ArithmeticError(f"singular affinity system: {exc}") from exc
    residual = float(np.max(np.abs(system @ s - np.eye(n))))
    if residual >= 1e-8:
        raise ArithmeticError(f"affinity solve residual {residual:.3e} exceeds 1e-8")
    return s


def deltacon(
    a1: SpatialGraph,
    a2: SpatialGraph,
    cfg: DeltaConConfig | None = None,
    slide_id: str = "",
) -> DeltaConReport:
    """Similarity in (0, 1] between two directed graphs on the same nodes."""
    if a1.n != a2.n:
        raise ValueError(f"graph size mismatch: {a1.n} vs {a2.n}")
    cfg = cfg or DeltaConConfig()
    eps = resolve_epsilon(cfg, a1, a2)
    s1 = deltacon_s(a1, eps)
    s2 = deltacon_s(a2, eps)
    score = 1.0 / (1.0 + float(np.linalg.norm(s1 - s2, "fro")))
    return DeltaConReport(slide_id=slide_id, score=score)
