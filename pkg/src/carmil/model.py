"""Full pipeline model: spatial encoder, spatial decoder, MIL head.

The encoder/decoder pair is optional; without it the head consumes raw
tile features, which is the classical context-free pipeline. Checkpoints
are JSON keyed by parameter name and round-trip bit-exactly (floats are
written with shortest-repr decimal text).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import gae
from .autodiff import DiffNode, ParamStore
from .errors import ConfigError
from .gae import SpatialDecoder, SpatialEncoder
from .graphs import SpatialGraph, TileSet
from .mil import HEAD_VARIANTS, build_head


@dataclass
class ModelConfig:
    feature_dim: int
    embed_dim: int | None = None  # defaults to feature_dim
    encoder_layers: int = 1
    decoder_layers: int = 1
    head: str = "meanpool"
    use_encoder: bool = True
    attn_dim: int = 64
    hidden_dim: int = 128
    chowder_r: int = 5

    def __post_init__(self):
        if self.embed_dim is None:
            self.embed_dim = self.feature_dim
        if self.head not in HEAD_VARIANTS:
            raise ConfigError(f"unknown head {self.head!r}; expected one of {HEAD_VARIANTS}")
        if self.feature_dim < 1 or self.embed_dim < 1:
            raise ConfigError("dimensions must be positive")


class CarmilModel:
    """Learnable weights for the encoder, decoder, and head of one pipeline."""

    def __init__(self, config: ModelConfig, seed: int):
        self.config = config
        self.seed = int(seed)
        self.store = ParamStore(self.seed)
        self.encoder: SpatialEncoder | None = None
        self.decoder: SpatialDecoder | None = None
        head_in = config.feature_dim
        if config.use_encoder:
            self.encoder = gae.build_encoder(
                self.store, config.feature_dim, config.embed_dim, config.encoder_layers
            )
            self.decoder = gae.build_decoder(self.store, config.embed_dim, config.decoder_layers)
            head_in = config.embed_dim
        self.head = build_head(
            config.head, self.store, head_in,
            attn_dim=config.attn_dim, hidden_dim=config.hidden_dim, chowder_r=config.chowder_r,
        )

    # -- forward pieces -------------------------------------------------

    def embed(self, x: DiffNode, a_pre: np.ndarray) -> DiffNode:
        """Per-tile embeddings Z, or the features themselves without an encoder."""
        if self.encoder is None:
            return x
        return gae.encode(x, a_pre, self.encoder)

    def reconstruct(self, z: DiffNode, a_pre: np.ndarray) -> DiffNode:
        if self.decoder is None:
            raise ValueError("model has no decoder")
        return gae.decode(z, a_pre, self.decoder)

    def risk(self, z: DiffNode) -> DiffNode:
        return self.head.forward(z)

    # -- inference helpers ----------------------------------------------

    def risk_value(self, tiles: TileSet, graph: SpatialGraph) -> float:
        a_pre = gae.preprocess_adjacency(graph)
        z = self.embed(ad.constant(tiles.features), a_pre)
        return float(self.risk(z).value[0, 0])

    def embed_value(self, tiles: TileSet, graph: SpatialGraph) -> np.ndarray:
        a_pre = gae.preprocess_adjacency(graph)
        return self.embed(ad.constant(tiles.features), a_pre).value

    def tile_values(self, tiles: TileSet, graph: SpatialGraph) -> np.ndarray:
        """Per-tile attention / contribution / score vector for interpretability."""
        a_pre = gae.preprocess_adjacency(graph)
        z = self.embed(ad.constant(tiles.features), a_pre)
        return self.head.tile_values(z)

    # -- checkpoints ------------------------------------------------------

    def save(self, path: str | Path) -> None:
        payload = {
            "format": "carmil-checkpoint-v1",
            "seed": self.seed,
            "config": asdict(self.config),
            "params": {
                name: {"shape": list(p.shape), "data": p.value.reshape(-1).tolist()}
                for name, p in self.store.items()
            },
        }
        Path(path).write_text(json.dumps(payload, indent=1, sort_keys=True))

    @classmethod
    def load(cls, path: str | Path) -> "CarmilModel":
        payload = json.loads(Path(path).read_text())
        if payload.get("format") != "carmil-checkpoint-v1":
            raise ConfigError(f"{path}: not a model checkpoint")
        model = cls(ModelConfig(**payload["config"]), payload["seed"])
        state = {
            name: np.array(entry["data"], dtype=np.float64).reshape(entry["shape"])
            for name, entry in payload["params"].items()
        }
        model.store.load_state_dict(state)
        return model
