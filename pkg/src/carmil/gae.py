"""Spatial graph autoencoder: stacked graph-convolution layers.

One layer computes A' ReLU(X) W for a fixed propagation matrix A' and a
learnable weight W. The encoder stacks l_E layers to produce per-tile
embeddings Z; the decoder stacks l_D layers on Z and reconstructs the
adjacency as sigmoid(U U^T), which is symmetric with entries in (0, 1).
The decoder only exists to shape Z during training; inference needs just
the encoder.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import DiffNode, ParamStore
from .graphs import SpatialGraph


@dataclass
class GcnLayer:
    weight: DiffNode


@dataclass
class SpatialEncoder:
    layers: list[GcnLayer]

    @property
    def out_dim(self) -> int:
        return self.layers[-1].weight.shape[1]


@dataclass
class SpatialDecoder:
    layers: list[GcnLayer]


def preprocess_adjacency(graph: SpatialGraph) -> np.ndarray:
    """Self-loops plus row normalization: rows of (A + I) scaled to sum 1.

    Keeps feature magnitudes stable across stacked layers while preserving
    the directed neighbor structure. Row sums are at least 1 thanks to the
    self-loop, so the division is always safe.
    """
    a = graph.adjacency + np.eye(graph.n)
    return a / a.sum(axis=1, keepdims=True)


def gcn_forward(x: DiffNode, a_pre: np.ndarray, layer: GcnLayer) -> DiffNode:
    """One propagation step: a_pre @ relu(x) @ W."""
    prop = ad.constant(a_pre)
    return ad.matmul(ad.matmul(prop, ad.relu(x)), layer.weight)


def encode(x: DiffNode, a_pre: np.ndarray, encoder: SpatialEncoder) -> DiffNode:
    """Compose the encoder layers over a shared propagation matrix."""
    z = x
    for layer in encoder.layers:
        z = gcn_forward(z, a_pre, layer)
    return z


def decode(z: DiffNode, a_pre: np.ndarray, decoder: SpatialDecoder) -> DiffNode:
    """Reconstruct the adjacency: sigmoid(U U^T) after the decoder stack."""
    u = z
    for layer in decoder.layers:
        u = gcn_forward(u, a_pre, layer)
    return ad.sigmoid(ad.matmul(u, ad.transpose(u)))


def build_encoder(store: ParamStore, in_dim: int, embed_dim: int, n_layers: int) -> SpatialEncoder:
    """Encoder weights: in_dim -> embed_dim, then embed_dim -> embed_dim."""
    if n_layers < 1:
        raise ValueError("encoder needs at least one layer")
    layers = []
    dim = in_dim
    for i in range(n_layers):
        layers.append(GcnLayer(store.param(f"encoder.{i}.weight", dim, embed_dim)))
        dim = embed_dim
    return SpatialEncoder(layers)


def build_decoder(store: ParamStore, embed_dim: int, n_layers: int) -> SpatialDecoder:
    """Decoder weights, all square at the embedding width."""
    if n_layers < 1:
        raise ValueError("decoder needs at least one layer")
    layers = [
        GcnLayer(store.param(f"decoder.{i}.weight", embed_dim, embed_dim))
        for i in range(n_layers)
    ]
    return SpatialDecoder(layers)
