"""Tile graphs: Gaussian-kernel k-NN adjacencies and their perturbations.

A slide's tiles induce two kinds of directed graphs. The spatial graph
links each tile to its k nearest neighbors in grid coordinates; the
embedding graph applies the same construction to any per-tile
representation (raw features or learned embeddings). Edge weights are
Gaussian-kernel affinities exp(-distance / 2), so weights live in [0, 1]
and identical points get weight 1.

Row p of an adjacency holds the outgoing edges of tile p. Keeping the
k largest kernel entries per row is not a symmetric operation, so these
graphs are directed.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError


@dataclass
class TileSet:
    """Per-slide tile coordinates (n, 2) and feature matrix (n, d)."""

    slide_id: str
    coords: np.ndarray
    features: np.ndarray

    def __post_init__(self):
        self.coords = np.ascontiguousarray(self.coords, dtype=np.float64)
        self.features = np.ascontiguousarray(self.features, dtype=np.float64)
        n = self.coords.shape[0]
        if n < 2:
            raise DataError(f"slide {self.slide_id!r}: needs at least 2 tiles, got {n}")
        if self.coords.ndim != 2 or self.coords.shape[1] != 2:
            raise DataError(f"slide {self.slide_id!r}: coords must be (n, 2)")
        if self.features.shape[0] != n:
            raise DataError(f"slide {self.slide_id!r}: {n} coords but {self.features.shape[0]} feature rows")
        if not np.isfinite(self.features).all() or not np.isfinite(self.coords).all():
            raise DataError(f"slide {self.slide_id!r}: non-finite values")
        if len(np.unique(self.coords, axis=0)) != n:
            raise DataError(f"slide {self.slide_id!r}: duplicate tile coordinates")

    @property
    def n_tiles(self) -> int:
        return self.coords.shape[0]


@dataclass
class SpatialGraph:
    """Weighted directed adjacency (n, n) with zero diagonal.

    Constructed by `knn_adjacency`, every row has exactly k nonzero
    entries equal to the kernel affinity of the kept pairs. Perturbed
    graphs (shuffled or rewired) reuse the container without that
    guarantee.
    """

    adjacency: np.ndarray
    k: int

    @property
    def n(self) -> int:
        return self.adjacency.shape[0]


def gaussian_kernel(points: np.ndarray) -> np.ndarray:
    """Pairwise affinities exp(-||p_i - p_j|| / 2) with the diagonal forced to 0."""
    pts = np.ascontiguousarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[0] < 2:
        raise ValueError("need at least 2 points in a 2-D array")
    if not np.isfinite(pts).all():
        raise ValueError("non-finite points")
    sq = np.sum(pts * pts, axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (pts @ pts.T)
    np.maximum(d2, 0.0, out=d2)
    kernel = np.exp(-np.sqrt(d2) / 2.0)
    np.fill_diagonal(kernel, 0.0)
    return kernel


def knn_adjacency(kernel: np.ndarray, k: int) -> SpatialGraph:
    """Keep the k largest off-diagonal kernel entries of each row.

    Ties are broken toward the lowest column index. The result is
    directed: q being among p's nearest neighbors does not make p one
    of q's.
    """
    n = kernel.shape[0]
    if kernel.shape != (n, n):
        raise ValueError("kernel must be square")
    if not (1 <= k <= n - 1):
        raise ValueError(f"k={k} out of range for n={n} (need 1 <= k <= n-1)")
    adjacency = np.zeros_like(kernel)
    for p in range(n):
        row = kernel[p].copy()
        row[p] = -np.inf
        # stable sort on descending values; equal affinities keep index order
        order = np.argsort(-row, kind="stable")
        keep = order[:k]
        adjacency[p, keep] = kernel[p, keep]
    return SpatialGraph(adjacency=adjacency, k=k)


def spatial_adjacency(tiles: TileSet, k: int) -> SpatialGraph:
    """Spatial graph of a slide: k-NN on tile grid coordinates."""
    return knn_adjacency(gaussian_kernel(tiles.coords), k)


def embedding_adjacency(reps: np.ndarray, k: int) -> SpatialGraph:
    """Graph built from affinity between per-tile representations."""
    return knn_adjacency(gaussian_kernel(reps), k)


def shuffle_offdiagonal(graph: SpatialGraph, seed: int) -> SpatialGraph:
    """Uniformly permute the n(n-1) off-diagonal entries, diagonal stays zero.

    The multiset of off-diagonal values is preserved exactly; only their
    positions move. Deterministic for a given seed.
    """
    a = graph.adjacency
    n = a.shape[0]
    if n < 2:
        raise ValueError("need n >= 2")
    mask = ~np.eye(n, dtype=bool)
    values = a[mask]
    rng = np.random.Generator(np.random.PCG64(int(seed)))
    shuffled = values[rng.permutation(values.size)]
    out = np.zeros_like(a)
    out[mask] = shuffled
    return SpatialGraph(adjacency=out, k=graph.k)


def rewire_edges(graph: SpatialGraph, fraction: float, seed: int) -> SpatialGraph:
    """Move a fraction of edges to uniformly chosen absent slots.

    Each selected edge keeps its weight but lands on an off-diagonal
    position that held no edge, so graphs drift away from the original
    as the fraction grows. Used to probe how the similarity metric
    degrades with structural damage.
    """
    if not 0.0 <= fraction <= 1.0:
        raise ValueError("fraction must be in [0, 1]")
    a = graph.adjacency.copy()
    n = a.shape[0]
    rng = np.random.Generator(np.random.PCG64(int(seed)))
    edges = np.argwhere(a != 0.0)
    n_move = int(round(fraction * len(edges)))
    if n_move == 0:
        return SpatialGraph(adjacency=a, k=graph.k)
    chosen = rng.choice(len(edges), size=n_move, replace=False)
    for idx in chosen:
        p, q = edges[idx]
        weight = a[p, q]
        a[p, q] = 0.0
        free = np.argwhere((a == 0.0) & ~np.eye(n, dtype=bool))
        slot = free[rng.integers(len(free))]
        a[slot[0], slot[1]] = weight
    return SpatialGraph(adjacency=a, k=graph.k)


def mean_neighbor_distance(reps: np.ndarray, spatial: SpatialGraph) -> np.ndarray:
    """Per-tile mean distance to its spatial neighbors in representation space.

    Rows of `reps` are unit-normalized first so the comparison between
    representation spaces of different dimension is fair. Entry p is the
    mean Euclidean distance from tile p's unit representation to those of
    the tiles it points to in the spatial graph.
    """
    r = np.ascontiguousarray(reps, dtype=np.float64)
    if r.shape[0] != spatial.n:
        raise ValueError("representation rows must match graph size")
    norms = np.linalg.norm(r, axis=1)
    if np.any(norms == 0.0):
        raise ValueError("zero-norm representation row")
    unit = r / norms[:, None]
    out = np.zeros(spatial.n)
    for p in range(spatial.n):
        nbrs = np.flatnonzero(spatial.adjacency[p])
        if nbrs.size:
            out[p] = float(np.mean(np.linalg.norm(unit[nbrs] - unit[p], axis=1)))
    return out


def joint_normalize(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Scale two heatmap vectors by their shared maximum into [0, 1]."""
    top = max(float(np.max(a)), float(np.max(b)))
    if top <= 0.0:
        return a.copy(), b.copy()
    return a / top, b / top


def write_heatmap_csv(path: str | Path, tiles: TileSet, values: np.ndarray) -> None:
    """Export a per-tile heatmap vector as tile_id, x, y, value rows."""
    if len(values) != tiles.n_tiles:
        raise ValueError("heatmap length must match tile count")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["tile_id", "x", "y", "value"])
        for i in range(tiles.n_tiles):
            w.writerow(
                [i, repr(float(tiles.coords[i, 0])), repr(float(tiles.coords[i, 1])), repr(float(values[i]))]
            )
