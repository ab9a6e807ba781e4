"""Intra-encoder 4x token compressor and its ablation variants.

Every variant works on one view grid at a time and only ever mixes the four
tokens of a non-overlapping 2x2 window.  Window members are ordered row-major
inside the window: top-left, top-right, bottom-left, bottom-right.

The main variant (``win_attn_reused_mlp``) is

    y = x + WinAttn(LN1(x))
    out = AvgPool2x2(y) + W2 gelu(W1 LN2(PixelUnshuffle(y)) + b_W1) + b_W2

with every parameter derived from the preceding encoder layer (:func:`reuse_init`).
"""

from __future__ import annotations

import dataclasses
import enum
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import rng
from .encoder import LayerWeights, ModelConfig, TokenSequence, random_attention
from .errors import ConfigError, DimensionError, GeometryError
from .numerics import (
    DTYPE,
    LN_EPS,
    AttentionMask,
    AttentionWeights,
    attention,
    gelu,
    layer_norm,
    linear,
    masked_mha,
)


class Variant(str, enum.Enum):
    AVG_POOL = "avg_pool"
    PIXEL_UNSHUFFLE_MLP = "pixel_unshuffle_mlp"
    REUSED_MLP = "reused_mlp"
    CROSS_ATTN_TOPLEFT = "cross_attn_topleft"
    CROSS_ATTN_MEAN = "cross_attn_mean"
    WIN_ATTN_MLP = "win_attn_mlp"
    WIN_ATTN_REUSED_MLP = "win_attn_reused_mlp"

    @property
    def has_window_attention(self) -> bool:
        return self in (Variant.WIN_ATTN_MLP, Variant.WIN_ATTN_REUSED_MLP)

    @property
    def has_fuse_mlp(self) -> bool:
        return self in _MLP_VARIANTS

    @property
    def reuses_mlp(self) -> bool:
        return self in (Variant.REUSED_MLP, Variant.WIN_ATTN_REUSED_MLP)

    @property
    def is_cross_attention(self) -> bool:
        return self in (Variant.CROSS_ATTN_TOPLEFT, Variant.CROSS_ATTN_MEAN)


_MLP_VARIANTS = (
    Variant.PIXEL_UNSHUFFLE_MLP,
    Variant.REUSED_MLP,
    Variant.WIN_ATTN_MLP,
    Variant.WIN_ATTN_REUSED_MLP,
)
VARIANTS = tuple(Variant)


def parse_variant(name: "str | Variant") -> Variant:
    try:
        return Variant(name)
    except ValueError:
        raise ConfigError(
            f"unknown variant {name!r}; expected one of {[v.value for v in Variant]}"
        ) from None


@dataclass
class CompressorWeights:
    """Parameters of one compressor.  Unused groups stay ``None``.

    ``w1`` is (hidden, 4d), ``w2`` is (d, hidden); ``ln2_*`` act on the 4d
    concatenation.  Reuse-initialized weights have ``hidden = 4 * d_mlp``.
    For the cross-attention variants ``ln1_*`` normalizes queries and keys.
    """

    win_attn: Optional[AttentionWeights] = None
    ln1_g: Optional[np.ndarray] = None
    ln1_b: Optional[np.ndarray] = None
    cross_attn: Optional[AttentionWeights] = None
    w1: Optional[np.ndarray] = None
    b1: Optional[np.ndarray] = None
    w2: Optional[np.ndarray] = None
    b2: Optional[np.ndarray] = None
    ln2_g: Optional[np.ndarray] = None
    ln2_b: Optional[np.ndarray] = None

    @property
    def hidden(self) -> Optional[int]:
        return None if self.w1 is None else self.w1.shape[0]


# ---------------------------------------------------------------- geometry


def _require_even(r: int, c: int, s: int = 2) -> None:
    if r % s or c % s:
        raise GeometryError(f"grid {r}x{c} is not divisible into {s}x{s} windows")


def pixel_unshuffle(x: np.ndarray, s: int = 2) -> np.ndarray:
    """(r, c, d) -> (r/s, c/s, s*s*d); window members concatenated row-major."""
    if x.ndim != 3:
        raise DimensionError(f"expected a (rows, cols, d) grid, got shape {x.shape}")
    r, c, d = x.shape
    _require_even(r, c, s)
    return x.reshape(r // s, s, c // s, s, d).transpose(0, 2, 1, 3, 4).reshape(r // s, c // s, s * s * d)


def pixel_shuffle(z: np.ndarray, s: int = 2) -> np.ndarray:
    """Inverse of :func:`pixel_unshuffle`."""
    if z.ndim != 3:
        raise DimensionError(f"expected a (rows, cols, channels) grid, got shape {z.shape}")
    r, c, ch = z.shape
    if ch % (s * s):
        raise GeometryError(f"channel dim {ch} is not divisible by {s * s}")
    d = ch // (s * s)
    return z.reshape(r, c, s, s, d).transpose(0, 2, 1, 3, 4).reshape(r * s, c * s, d)


def window_members(x: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    r, c, _ = x.shape
    _require_even(r, c)
    return x[0::2, 0::2], x[0::2, 1::2], x[1::2, 0::2], x[1::2, 1::2]


def avg_pool_2x2(x: np.ndarray) -> np.ndarray:
    tl, tr, bl, br = window_members(x)
    return (tl + tr + bl + br) * x.dtype.type(0.25)


def window_mask(r: int, c: int) -> AttentionMask:
    return AttentionMask.windowed([(0, r * c)], [(r, c)])


def window_attention(
    x: np.ndarray,
    attn: AttentionWeights,
    ln_g: np.ndarray,
    ln_b: np.ndarray,
    heads: int,
    eps: float = LN_EPS,
) -> np.ndarray:
    """``x + MHA(LN1(x))`` with each token seeing only its own 2x2 window."""
    r, c, d = x.shape
    _require_even(r, c)
    flat = x.reshape(r * c, d)
    out = flat + masked_mha(layer_norm(flat, ln_g, ln_b, eps), attn, heads, window_mask(r, c))
    return out.reshape(r, c, d)


def fuse_project(zn: np.ndarray, w: CompressorWeights, act: Callable = gelu) -> np.ndarray:
    """Post-normalization half of the fused MLP: ``W2 act(W1 zn + b1) + b2``."""
    return linear(act(linear(zn, w.w1, w.b1)), w.w2, w.b2)


def fuse_mlp(z: np.ndarray, w: CompressorWeights, eps: float = LN_EPS) -> np.ndarray:
    """(n, 4d) -> (n, d).  The average-pool residual is added by the caller."""
    if w.w1 is None or z.shape[-1] != w.w1.shape[1]:
        raise DimensionError(f"fuse input width {z.shape[-1]} does not match W1")
    return fuse_project(layer_norm(z, w.ln2_g, w.ln2_b, eps), w)


def cross_attn_merge(
    x: np.ndarray,
    attn: AttentionWeights,
    ln_g: np.ndarray,
    ln_b: np.ndarray,
    heads: int,
    query_mode: str,
    eps: float = LN_EPS,
) -> np.ndarray:
    """One query per window attends over that window's four tokens.

    ``query_mode`` is ``"top-left"`` or ``"mean"``; output = query + attention
    output (pre-norm on both query and keys).
    """
    r, c, d = x.shape
    _require_even(r, c)
    if query_mode == "top-left":
        query = x[0::2, 0::2]
    elif query_mode == "mean":
        query = avg_pool_2x2(x)
    else:
        raise ConfigError(f"unknown query mode {query_mode!r}")
    n_win = (r // 2) * (c // 2)
    q = np.ascontiguousarray(query).reshape(n_win, d)
    members = pixel_unshuffle(x).reshape(n_win * 4, d)
    allowed = np.arange(n_win)[:, None] == (np.arange(n_win * 4) // 4)[None, :]
    out = q + attention(
        layer_norm(q, ln_g, ln_b, eps), layer_norm(members, ln_g, ln_b, eps), attn, heads, allowed
    )
    return out.reshape(r // 2, c // 2, d)


def compress_view(
    x: np.ndarray, variant: Variant, w: CompressorWeights, heads: int, eps: float = LN_EPS
) -> np.ndarray:
    """(r, c, d) -> (r/2, c/2, d) for a single view grid."""
    r, c, d = x.shape
    _require_even(r, c)
    if variant is Variant.AVG_POOL:
        return avg_pool_2x2(x)
    if variant.is_cross_attention:
        mode = "top-left" if variant is Variant.CROSS_ATTN_TOPLEFT else "mean"
        return cross_attn_merge(x, w.cross_attn, w.ln1_g, w.ln1_b, heads, mode, eps)
    y = window_attention(x, w.win_attn, w.ln1_g, w.ln1_b, heads, eps) if variant.has_window_attention else x
    z = pixel_unshuffle(y)
    fused = fuse_mlp(z.reshape(-1, 4 * d), w, eps).reshape(r // 2, c // 2, d)
    return avg_pool_2x2(y) + fused


def apply_compressor(
    x: TokenSequence,
    variant: Variant,
    w: CompressorWeights,
    heads: int,
    eps: float = LN_EPS,
    *,
    skip_views: tuple[int, ...] = (),
) -> TokenSequence:
    """Compress every view independently; views in ``skip_views`` pass through unchanged."""
    variant = parse_variant(variant)
    for r, c in x.grids:
        _require_even(r, c)
    out, grids = [], []
    for i, (r, c) in enumerate(x.grids):
        if i in skip_views:
            out.append(x.view(i))
            grids.append((r, c))
            continue
        y = compress_view(x.view_grid(i), variant, w, heads, eps)
        out.append(y.reshape(-1, x.width))
        grids.append((r // 2, c // 2))
    return TokenSequence(np.concatenate(out, axis=0), tuple(grids))


@dataclass(frozen=True)
class Compressor:
    """A configured compressor, callable on a :class:`TokenSequence`."""

    variant: Variant
    weights: CompressorWeights
    heads: int
    eps: float = LN_EPS
    compress_thumbnail: bool = True

    def __call__(self, x: TokenSequence) -> TokenSequence:
        skip = () if self.compress_thumbnail else (0,)
        return apply_compressor(x, self.variant, self.weights, self.heads, self.eps, skip_views=skip)

    def for_view(self, index: int) -> Optional["Compressor"]:
        """Compressor to apply when view ``index`` is encoded on its own."""
        if index == 0 and not self.compress_thumbnail:
            return None
        return dataclasses.replace(self, compress_thumbnail=True)


# ---------------------------------------------------------- initialization


def reuse_init(src: LayerWeights) -> CompressorWeights:
    """Derive every compressor parameter from the preceding encoder layer.

    Window attention and LN1 are copied.  ``W1 = BlockDiag(F1, F1, F1, F1)``,
    ``W2 = 1/4 [F2 | F2 | F2 | F2]``, ``b_W1 = [b1, b1, b1, b1]``, ``b_W2 = b2``
    (not scaled), and LN2's affine is tiled over the 4d concatenation.  At this
    point the fused MLP averages four copies of the layer's FFN, one per member.
    """
    m, d = src.f1.shape
    dt = src.f1.dtype
    w1 = np.zeros((4 * m, 4 * d), dtype=dt)
    for i in range(4):
        w1[i * m : (i + 1) * m, i * d : (i + 1) * d] = src.f1
    w2 = np.tile(src.f2 * dt.type(0.25), (1, 4))
    return CompressorWeights(
        win_attn=src.attn.copy(),
        ln1_g=src.ln1_g.copy(),
        ln1_b=src.ln1_b.copy(),
        w1=w1,
        b1=np.tile(src.b1, 4),
        w2=w2,
        b2=src.b2.copy(),
        ln2_g=np.tile(src.ln2_g, 4),
        ln2_b=np.tile(src.ln2_b, 4),
    )


def random_fuse_mlp(cfg: ModelConfig, seed: int, dtype=DTYPE) -> CompressorWeights:
    """Seeded fuse MLP on 4d inputs with hidden width ``d_mlp``; LN2 starts at identity."""
    d, m = cfg.d_model, cfg.d_mlp
    g = rng.gaussian
    return CompressorWeights(
        w1=g(seed, "compressor.w1", (m, 4 * d), dtype=dtype),
        b1=g(seed, "compressor.b1", m, dtype=dtype),
        w2=g(seed, "compressor.w2", (d, m), dtype=dtype),
        b2=g(seed, "compressor.b2", d, dtype=dtype),
        ln2_g=np.ones(4 * d, dtype=dtype),
        ln2_b=np.zeros(4 * d, dtype=dtype),
    )


def build_compressor_weights(
    variant: "Variant | str", src: LayerWeights, cfg: ModelConfig, seed: int
) -> CompressorWeights:
    """Weights for ``variant`` given layer ``k``'s weights ``src``.

    Window attention is always copied from ``src``; the fuse MLP is either
    reuse-initialized or seeded at random; cross-attention is seeded at random.
    """
    variant = parse_variant(variant)
    dt = src.f1.dtype
    if variant is Variant.AVG_POOL:
        return CompressorWeights()
    if variant.is_cross_attention:
        d = cfg.d_model
        return CompressorWeights(
            cross_attn=random_attention(seed, "compressor.cross_attn", d, dt),
            ln1_g=np.ones(d, dtype=dt),
            ln1_b=np.zeros(d, dtype=dt),
        )
    w = reuse_init(src) if variant.reuses_mlp else random_fuse_mlp(cfg, seed, dt)
    if not variant.has_window_attention:
        w.win_attn = w.ln1_g = w.ln1_b = None
    elif not variant.reuses_mlp:
        w.win_attn, w.ln1_g, w.ln1_b = src.attn.copy(), src.ln1_g.copy(), src.ln1_b.copy()
    return w


def build_compressor(
    variant: "Variant | str",
    layers: list[LayerWeights],
    cfg: ModelConfig,
    seed: int,
    compress_thumbnail: bool = True,
) -> Compressor:
    variant = parse_variant(variant)
    src = layers[cfg.insertion_depth - 1]
    return Compressor(
        variant,
        build_compressor_weights(variant, src, cfg, seed),
        cfg.n_heads,
        cfg.ln_eps,
        compress_thumbnail,
    )
