"""Post-encoder connectors: pixel-unshuffle MLP and query resampler."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import rng
from .compressor import pixel_unshuffle
from .encoder import ModelConfig, TokenSequence, random_attention
from .errors import ConfigError, GeometryError
from .numerics import DTYPE, AttentionWeights, attention, gelu, linear

MLP, RESAMPLER = "mlp", "resampler"


@dataclass(frozen=True)
class ConnectorSpec:
    kind: str = MLP
    ratio: int = 4
    out_dim: int = 256
    queries: int = 64
    hidden: Optional[int] = None  # mlp only; defaults to out_dim

    def __post_init__(self) -> None:
        if self.kind not in (MLP, RESAMPLER):
            raise ConfigError(f"connector kind must be 'mlp' or 'resampler', got {self.kind!r}")
        if self.ratio not in (4, 16):
            raise ConfigError(f"connector ratio must be 4 or 16, got {self.ratio}")
        if self.out_dim < 1:
            raise ConfigError("out_dim must be positive")
        if self.kind == RESAMPLER and self.queries < 1:
            raise ConfigError("resampler needs at least one query")
        if self.hidden is not None and self.hidden < 1:
            raise ConfigError("hidden must be positive")

    @property
    def window(self) -> int:
        return math.isqrt(self.ratio)

    @property
    def mlp_hidden(self) -> int:
        return self.hidden if self.hidden is not None else self.out_dim

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "ratio": self.ratio,
            "out_dim": self.out_dim,
            "queries": self.queries,
            "hidden": self.hidden,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ConnectorSpec":
        return cls(**d)


@dataclass
class MlpConnectorWeights:
    w1: np.ndarray  # (hidden, ratio*d)
    b1: np.ndarray
    w2: np.ndarray  # (out_dim, hidden)
    b2: np.ndarray


@dataclass
class ResamplerWeights:
    queries: np.ndarray  # (n_queries, d)
    attn: AttentionWeights
    proj_w: np.ndarray  # (out_dim, d)
    proj_b: np.ndarray


def random_connector(spec: ConnectorSpec, cfg: ModelConfig, seed: int, dtype=DTYPE):
    d = cfg.d_model
    g = rng.gaussian
    if spec.kind == MLP:
        h = spec.mlp_hidden
        return MlpConnectorWeights(
            w1=g(seed, "connector.w1", (h, spec.ratio * d), dtype=dtype),
            b1=g(seed, "connector.b1", h, dtype=dtype),
            w2=g(seed, "connector.w2", (spec.out_dim, h), dtype=dtype),
            b2=g(seed, "connector.b2", spec.out_dim, dtype=dtype),
        )
    return ResamplerWeights(
        queries=g(seed, "connector.queries", (spec.queries, d), scale=1.0, dtype=dtype),
        attn=random_attention(seed, "connector.attn", d, dtype),
        proj_w=g(seed, "connector.proj_w", (spec.out_dim, d), dtype=dtype),
        proj_b=g(seed, "connector.proj_b", spec.out_dim, dtype=dtype),
    )


def mlp_connector(x: TokenSequence, spec: ConnectorSpec, w: MlpConnectorWeights) -> np.ndarray:
    """Per-view pixel-unshuffle by ``sqrt(ratio)`` then a GELU MLP; row-major order kept."""
    s = spec.window
    folded = []
    for i, (r, c) in enumerate(x.grids):
        if r % s or c % s:
            raise GeometryError(f"view {i} grid {r}x{c} is not divisible by {s}x{s}")
        folded.append(pixel_unshuffle(x.view_grid(i), s).reshape(-1, spec.ratio * x.width))
    z = np.concatenate(folded, axis=0)
    return linear(gelu(linear(z, w.w1, w.b1)), w.w2, w.b2)


def resampler(x: TokenSequence, spec: ConnectorSpec, w: ResamplerWeights, heads: int) -> np.ndarray:
    """Learnable queries cross-attend over every visual token, then project to ``out_dim``."""
    attended = attention(w.queries.astype(x.tokens.dtype), x.tokens, w.attn, heads)
    return linear(attended, w.proj_w, w.proj_b)


def apply_connector(x: TokenSequence, spec: ConnectorSpec, weights, heads: int) -> np.ndarray:
    if spec.kind == MLP:
        return mlp_connector(x, spec, weights)
    return resampler(x, spec, weights, heads)


def output_tokens(n_tokens: int, spec: ConnectorSpec) -> int:
    return n_tokens // spec.ratio if spec.kind == MLP else spec.queries
