"""Context-independent MIL heads: a bag of tile embeddings to one risk scalar.

Four aggregation families are covered: plain mean pooling, tanh-attention
pooling, extreme-score selection, and gated per-tile additive scoring.
Every head first reorders tiles into a canonical lexicographic row order,
which fixes the floating-point reduction order; shuffling the input rows
therefore leaves the risk bit-identical.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import DiffNode, ParamStore

HEAD_VARIANTS = ("meanpool", "abmil", "chowder", "additive")


def canonical_order(values: np.ndarray) -> np.ndarray:
    """Lexicographic row order (first column most significant)."""
    return np.lexsort(values.T[::-1])


def canonicalize_rows(z: DiffNode) -> DiffNode:
    if z.shape[0] == 0:
        raise ValueError("empty bag")
    return ad.gather_rows(z, canonical_order(z.value))


class MeanPoolHead:
    """Linear risk on the bag mean."""

    variant = "meanpool"

    def __init__(self, store: ParamStore, in_dim: int):
        self.w = store.param("head.weight", in_dim, 1)
        self.b = store.param("head.bias", 1, 1, init="zeros")

    def forward(self, z: DiffNode) -> DiffNode:
        zc = canonicalize_rows(z)
        return ad.add(ad.matmul(ad.row_mean(zc), self.w), self.b)

    def tile_values(self, z: DiffNode) -> np.ndarray:
        n = z.shape[0]
        return np.full(n, 1.0 / n)


class AbmilHead:
    """Attention pooling: softmax over tanh-projected tile logits."""

    variant = "abmil"

    def __init__(self, store: ParamStore, in_dim: int, attn_dim: int = 64):
        self.v = store.param("head.attn_proj", in_dim, attn_dim)
        self.w = store.param("head.attn_score", attn_dim, 1)
        self.out_w = store.param("head.out_weight", in_dim, 1)
        self.out_b = store.param("head.out_bias", 1, 1, init="zeros")

    def _attention(self, zc: DiffNode) -> DiffNode:
        logits = ad.matmul(ad.tanh(ad.matmul(zc, self.v)), self.w)
        return ad.softmax_col(logits)

    def forward(self, z: DiffNode) -> DiffNode:
        zc = canonicalize_rows(z)
        attn = self._attention(zc)
        bag = ad.matmul(ad.transpose(attn), zc)
        return ad.add(ad.matmul(bag, self.out_w), self.out_b)

    def tile_values(self, z: DiffNode) -> np.ndarray:
        """Attention weights in the original tile order."""
        order = canonical_order(z.value)
        attn = self._attention(ad.gather_rows(z, order)).value[:, 0]
        out = np.zeros_like(attn)
        out[order] = attn
        return out


class ChowderHead:
    """Extreme-score head: keep the r highest and r lowest tile scores.

    Tile scores come from one shared bias-free linear map; the selected
    scores, sorted descending, feed a small MLP.
    """

    variant = "chowder"

    def __init__(self, store: ParamStore, in_dim: int, r: int = 5, hidden_dim: int = 128):
        self.r = r
        self.score_w = store.param("head.score", in_dim, 1)
        self.w1 = store.param("head.mlp1_weight", 2 * r, hidden_dim)
        self.b1 = store.param("head.mlp1_bias", 1, hidden_dim, init="zeros")
        self.w2 = store.param("head.mlp2_weight", hidden_dim, 1)
        self.b2 = store.param("head.mlp2_bias", 1, 1, init="zeros")

    def _scores(self, zc: DiffNode) -> DiffNode:
        return ad.matmul(zc, self.score_w)

    def forward(self, z: DiffNode) -> DiffNode:
        n = z.shape[0]
        if 2 * self.r > n:
            raise ValueError(f"bag of {n} tiles too small for 2r={2 * self.r} selected scores")
        zc = canonicalize_rows(z)
        scores = self._scores(zc)
        order = np.argsort(-scores.value[:, 0], kind="stable")
        picked = np.concatenate([order[: self.r], order[n - self.r :]])
        selected = ad.transpose(ad.gather_rows(scores, picked))
        hidden = ad.relu(ad.add(ad.matmul(selected, self.w1), self.b1))
        return ad.add(ad.matmul(hidden, self.w2), self.b2)

    def tile_values(self, z: DiffNode) -> np.ndarray:
        """Per-tile scores in the original tile order."""
        order = canonical_order(z.value)
        scores = self._scores(ad.gather_rows(z, order)).value[:, 0]
        out = np.zeros_like(scores)
        out[order] = scores
        return out


class AdditiveHead:
    """Per-tile additive risk with a sigmoid gate.

    Each tile contributes gate(tile) * value(tile); the risk is the sum of
    contributions, so contributions are directly interpretable. The gate
    depends only on its own tile, so zeroing a tile's features removes
    exactly that tile's contribution when the value map is linear.
    """

    variant = "additive"

    def __init__(self, store: ParamStore, in_dim: int, attn_dim: int = 64, hidden_dim: int = 128):
        self.gate_v = store.param("head.gate_proj", in_dim, attn_dim)
        self.gate_w = store.param("head.gate_score", attn_dim, 1)
        self.w1 = store.param("head.value1_weight", in_dim, hidden_dim)
        self.b1 = store.param("head.value1_bias", 1, hidden_dim, init="zeros")
        self.w2 = store.param("head.value2_weight", hidden_dim, 1)
        self.b2 = store.param("head.value2_bias", 1, 1, init="zeros")

    def _contributions(self, zc: DiffNode) -> DiffNode:
        gates = ad.sigmoid(ad.matmul(ad.tanh(ad.matmul(zc, self.gate_v)), self.gate_w))
        hidden = ad.relu(ad.add_bias(ad.matmul(zc, self.w1), self.b1))
        values = ad.add_bias(ad.matmul(hidden, self.w2), self.b2)
        return ad.hadamard(gates, values)

    def forward(self, z: DiffNode) -> DiffNode:
        zc = canonicalize_rows(z)
        return ad.sum_all(self._contributions(zc))

    def tile_values(self, z: DiffNode) -> np.ndarray:
        """Per-tile contributions (they sum to the risk) in original order."""
        order = canonical_order(z.value)
        contrib = self._contributions(ad.gather_rows(z, order)).value[:, 0]
        out = np.zeros_like(contrib)
        out[order] = contrib
        return out


def build_head(
    variant: str,
    store: ParamStore,
    in_dim: int,
    attn_dim: int = 64,
    hidden_dim: int = 128,
    chowder_r: int = 5,
):
    if variant == "meanpool":
        return MeanPoolHead(store, in_dim)
    if variant == "abmil":
        return AbmilHead(store, in_dim, attn_dim)
    if variant == "chowder":
        return ChowderHead(store, in_dim, chowder_r, hidden_dim)
    if variant == "additive":
        return AdditiveHead(store, in_dim, attn_dim, hidden_dim)
    raise ValueError(f"unknown head variant {variant!r}; expected one of {HEAD_VARIANTS}")
