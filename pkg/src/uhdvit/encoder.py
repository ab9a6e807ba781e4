"""Pre-norm ViT forward stack over concatenated views.

Views attend only within themselves (block-diagonal mask).  An optional
compressor runs between layer ``k`` and ``k + 1`` and shrinks every view grid
from (r, c) to (r/2, c/2); the remaining layers see the reduced sequence.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, fields
from typing import TYPE_CHECKING, Optional, Sequence

import numpy as np

from . import rng
from .errors import ConfigError, DimensionError, GeometryError
from .numerics import DTYPE, LN_EPS, AttentionMask, AttentionWeights, gelu, layer_norm, linear, masked_mha

if TYPE_CHECKING:
    from .compressor import Compressor
    from .slicing import SlicePlan


@dataclass(frozen=True)
class ModelConfig:
    d_model: int
    n_layers: int
    n_heads: int
    d_mlp: int
    patch_px: int
    view_px: int
    insertion_depth: int
    ln_eps: float = LN_EPS

    def __post_init__(self) -> None:
        if min(self.d_model, self.n_layers, self.n_heads, self.d_mlp, self.patch_px, self.view_px) < 1:
            raise ConfigError(f"model dims must be positive: {self}")
        if not 1 <= self.insertion_depth < self.n_layers:
            raise ConfigError(
                f"insertion_depth must satisfy 1 <= k < L, got k={self.insertion_depth}, L={self.n_layers}"
            )
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.view_px % self.patch_px or (self.view_px // self.patch_px) % 2:
            raise ConfigError(
                f"view_px/patch_px must be an even integer, got {self.view_px}/{self.patch_px}"
            )
        if self.ln_eps <= 0:
            raise ConfigError("ln_eps must be positive")

    @property
    def tokens_per_side(self) -> int:
        return self.view_px // self.patch_px

    @property
    def tokens_per_view(self) -> int:
        return self.tokens_per_side**2

    @property
    def patch_dim(self) -> int:
        return self.patch_px * self.patch_px * 3

    def replace(self, **changes) -> "ModelConfig":
        return ModelConfig(**{**asdict(self), **changes})

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config fields: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        return cls.from_dict(json.loads(text))


PRESETS = {
    "toy": ModelConfig(
        d_model=32, n_layers=4, n_heads=4, d_mlp=128, patch_px=16, view_px=64, insertion_depth=2
    ),
    # SigLIP 2 So400m geometry at 448px views.
    "siglip2": ModelConfig(
        d_model=1152, n_layers=27, n_heads=16, d_mlp=4304, patch_px=14, view_px=448, insertion_depth=6
    ),
}


@dataclass
class LayerWeights:
    attn: AttentionWeights
    ln1_g: np.ndarray
    ln1_b: np.ndarray
    f1: np.ndarray  # (d_mlp, d)
    b1: np.ndarray
    f2: np.ndarray  # (d, d_mlp)
    b2: np.ndarray
    ln2_g: np.ndarray
    ln2_b: np.ndarray

    def validate(self, cfg: ModelConfig) -> None:
        d, m = cfg.d_model, cfg.d_mlp
        expected = {
            "f1": (m, d), "b1": (m,), "f2": (d, m), "b2": (d,),
            "ln1_g": (d,), "ln1_b": (d,), "ln2_g": (d,), "ln2_b": (d,),
        }
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise ConfigError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")
        for t in self.attn.tensors():
            if t.shape[0] != d:
                raise ConfigError(f"attention tensor of shape {t.shape} does not match d={d}")

    def ffn(self, x: np.ndarray, eps: float = LN_EPS) -> np.ndarray:
        """``F2 gelu(F1 LN2(x) + b1) + b2``, without residual."""
        h = gelu(linear(layer_norm(x, self.ln2_g, self.ln2_b, eps), self.f1, self.b1))
        return linear(h, self.f2, self.b2)

    def astype(self, dtype) -> "LayerWeights":
        return LayerWeights(
            self.attn.astype(dtype),
            *(getattr(self, n).astype(dtype) for n in _LAYER_ARRAYS),
        )

    @classmethod
    def zeros(cls, cfg: ModelConfig, dtype=DTYPE) -> "LayerWeights":
        d, m = cfg.d_model, cfg.d_mlp
        z = np.zeros
        return cls(
            AttentionWeights.zeros(d, dtype), z(d, dtype), z(d, dtype),
            z((m, d), dtype), z(m, dtype), z((d, m), dtype), z(d, dtype), z(d, dtype), z(d, dtype),
        )


_LAYER_ARRAYS = ("ln1_g", "ln1_b", "f1", "b1", "f2", "b2", "ln2_g", "ln2_b")
_ATTN_ARRAYS = ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")


@dataclass
class StemWeights:
    patch_w: np.ndarray  # (d, patch_px*patch_px*3)
    patch_b: np.ndarray
    pos: np.ndarray  # (tokens_per_view, d), row-major over the view grid


def random_attention(seed: int, prefix: str, d: int, dtype=DTYPE) -> AttentionWeights:
    g = rng.gaussian
    return AttentionWeights(
        *(g(seed, f"{prefix}.{n}", (d, d) if n.startswith("w") else (d,), dtype=dtype) for n in _ATTN_ARRAYS)
    )


def random_layer(cfg: ModelConfig, seed: int, index: int, dtype=DTYPE) -> LayerWeights:
    d, m = cfg.d_model, cfg.d_mlp
    p = f"layers.{index}"
    g = rng.gaussian
    return LayerWeights(
        attn=random_attention(seed, f"{p}.attn", d, dtype),
        ln1_g=(1.0 + g(seed, f"{p}.ln1_g", d, dtype=np.float64)).astype(dtype),
        ln1_b=g(seed, f"{p}.ln1_b", d, dtype=dtype),
        f1=g(seed, f"{p}.f1", (m, d), dtype=dtype),
        b1=g(seed, f"{p}.b1", m, dtype=dtype),
        f2=g(seed, f"{p}.f2", (d, m), dtype=dtype),
        b2=g(seed, f"{p}.b2", d, dtype=dtype),
        ln2_g=(1.0 + g(seed, f"{p}.ln2_g", d, dtype=np.float64)).astype(dtype),
        ln2_b=g(seed, f"{p}.ln2_b", d, dtype=dtype),
    )


def random_layers(cfg: ModelConfig, seed: int, dtype=DTYPE) -> list[LayerWeights]:
    return [random_layer(cfg, seed, i, dtype) for i in range(cfg.n_layers)]


def random_stem(cfg: ModelConfig, seed: int, dtype=DTYPE) -> StemWeights:
    d = cfg.d_model
    return StemWeights(
        patch_w=rng.gaussian(seed, "stem.patch_w", (d, cfg.patch_dim), dtype=dtype),
        patch_b=rng.gaussian(seed, "stem.patch_b", d, dtype=dtype),
        pos=rng.gaussian(seed, "stem.pos", (cfg.tokens_per_view, d), dtype=dtype),
    )


@dataclass
class TokenSequence:
    """Concatenated views; view ``i`` owns a contiguous row-major block of ``rows*cols`` tokens."""

    tokens: np.ndarray
    grids: tuple[tuple[int, int], ...]

    def __post_init__(self) -> None:
        self.grids = tuple((int(r), int(c)) for r, c in self.grids)
        if self.tokens.ndim != 2:
            raise DimensionError(f"tokens must be 2-D, got shape {self.tokens.shape}")
        if not self.grids:
            raise DimensionError("a token sequence needs at least one view")
        n = sum(r * c for r, c in self.grids)
        if n != self.tokens.shape[0]:
            raise DimensionError(f"grids cover {n} tokens but sequence has {self.tokens.shape[0]}")

    def __len__(self) -> int:
        return self.tokens.shape[0]

    @property
    def width(self) -> int:
        return self.tokens.shape[1]

    @property
    def boundaries(self) -> list[tuple[int, int]]:
        out, pos = [], 0
        for r, c in self.grids:
            out.append((pos, pos + r * c))
            pos += r * c
        return out

    def view(self, i: int) -> np.ndarray:
        start, stop = self.boundaries[i]
        return self.tokens[start:stop]

    def view_grid(self, i: int) -> np.ndarray:
        r, c = self.grids[i]
        return self.view(i).reshape(r, c, self.width)

    def split(self) -> list["TokenSequence"]:
        return [TokenSequence(self.view(i), (g,)) for i, g in enumerate(self.grids)]

    @classmethod
    def concat(cls, parts: Sequence["TokenSequence"]) -> "TokenSequence":
        return cls(
            np.concatenate([p.tokens for p in parts], axis=0),
            tuple(g for p in parts for g in p.grids),
        )

    def block_mask(self) -> AttentionMask:
        return AttentionMask.block_diagonal(self.boundaries)


def synthetic_pixels(plan: "SlicePlan", cfg: ModelConfig, seed: int, dtype=DTYPE) -> list[np.ndarray]:
    """Seeded stand-in patch vectors, one (tokens, patch_dim) array per view."""
    return [
        rng.gaussian(seed, f"pixels.{i}", (v.n_tokens, cfg.patch_dim), scale=1.0, dtype=dtype)
        for i, v in enumerate(plan.views)
    ]


def patch_embed(
    grids: "SlicePlan | Sequence[tuple[int, int]]",
    stem: StemWeights,
    pixels: Sequence[np.ndarray],
) -> TokenSequence:
    """Linear patch projection plus the shared positional table, view by view.

    Views smaller than the positional table take its top-left crop.
    """
    if hasattr(grids, "token_grids"):
        grids = grids.token_grids
    grids = [tuple(g) for g in grids]
    if len(pixels) != len(grids):
        raise ConfigError(f"{len(pixels)} pixel blocks for {len(grids)} views")
    d = stem.patch_w.shape[0]
    side = int(round(np.sqrt(stem.pos.shape[0])))
    if side * side != stem.pos.shape[0]:
        raise ConfigError("positional table must cover a square grid")
    pos_grid = stem.pos.reshape(side, side, d)
    blocks = []
    for (r, c), px in zip(grids, pixels):
        if px.shape != (r * c, stem.patch_w.shape[1]):
            raise ConfigError(f"pixel block {px.shape} does not match view {r}x{c}")
        if r > side or c > side:
            raise ConfigError(f"view {r}x{c} exceeds positional table {side}x{side}")
        pos = pos_grid[:r, :c].reshape(r * c, d)
        blocks.append(linear(px, stem.patch_w, stem.patch_b) + pos.astype(px.dtype))
    return TokenSequence(np.concatenate(blocks, axis=0), tuple(grids))


def layer_forward(
    x: TokenSequence,
    w: LayerWeights,
    mask: AttentionMask,
    n_heads: int,
    eps: float = LN_EPS,
) -> TokenSequence:
    t = x.tokens
    y = t + masked_mha(layer_norm(t, w.ln1_g, w.ln1_b, eps), w.attn, n_heads, mask)
    out = y + w.ffn(y, eps)
    return TokenSequence(out, x.grids)


def encode(
    x: TokenSequence,
    cfg: ModelConfig,
    layers: Sequence[LayerWeights],
    compressor: Optional["Compressor"] = None,
    *,
    threads: int = 1,
) -> TokenSequence:
    """Run the stack; with a compressor, output length is exactly ``len(x) // 4``.

    ``threads > 1`` encodes views concurrently.  Views never interact, so the
    result is bitwise identical to the joint single-threaded pass.
    """
    if len(layers) != cfg.n_layers:
        raise ConfigError(f"expected {cfg.n_layers} layers, got {len(layers)}")
    if compressor is not None:
        for r, c in x.grids:
            if r % 2 or c % 2:
                raise GeometryError(f"view grid {r}x{c} is odd at insertion depth {cfg.insertion_depth}")
    if threads > 1 and len(x.grids) > 1:
        parts = x.split()
        comps = [None if compressor is None else compressor.for_view(i) for i in range(len(parts))]
        with ThreadPoolExecutor(max_workers=min(threads, len(parts))) as pool:
            done = list(pool.map(lambda pc: encode(pc[0], cfg, layers, pc[1]), zip(parts, comps)))
        return TokenSequence.concat(done)

    k = cfg.insertion_depth if compressor is not None else cfg.n_layers
    mask = x.block_mask()
    for w in layers[:k]:
        x = layer_forward(x, w, mask, cfg.n_heads, cfg.ln_eps)
    if compressor is None:
        return x
    x = compressor(x)
    mask = x.block_mask()
    for w in layers[k:]:
        x = layer_forward(x, w, mask, cfg.n_heads, cfg.ln_eps)
    return x
