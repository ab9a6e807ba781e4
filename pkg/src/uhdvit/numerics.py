"""Dense-tensor substrate: matmul, normalization, activations, masked attention.

Tensors are plain row-major ``numpy.ndarray`` objects.  Working precision is
float32; every routine preserves the dtype of its inputs so the same code runs
in float64 for tight equivalence checks.

Reductions that feed the bitwise-reproducibility guarantees (matmul inner
products, row sums) accumulate sequentially along the reduced axis.  Each
output element therefore depends only on its own operands, which is what
makes joint-vs-separate view encoding and window locality hold bit for bit.
"""

from __future__ import annotations

import contextlib
import contextvars
import math
from dataclasses import dataclass, field
from typing import Iterator, Optional, Sequence

import numpy as np
from scipy.special import erf

from .errors import ConfigError, DegenerateMaskError, DimensionError, NumericsError

DTYPE = np.float32
LN_EPS = 1e-6
# Additive score penalty for masked keys; probabilities are zeroed explicitly afterwards.
MASK_PENALTY = -1e30

_mac_log: contextvars.ContextVar[Optional["MacCounter"]] = contextvars.ContextVar(
    "uhdvit_mac_log", default=None
)


@dataclass
class MacCounter:
    """Multiply-accumulate tally recorded by :func:`matmul` inside :func:`count_macs`."""

    macs: int = 0
    calls: int = 0


@contextlib.contextmanager
def count_macs() -> Iterator[MacCounter]:
    counter = MacCounter()
    token = _mac_log.set(counter)
    try:
        yield counter
    finally:
        _mac_log.reset(token)


def _checked(out: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(out)):
        raise NumericsError(f"{op} produced non-finite values")
    return out


def _float_dtype(*arrays: np.ndarray) -> np.dtype:
    dt = np.result_type(*arrays)
    if dt not in (np.float32, np.float64):
        dt = np.dtype(DTYPE)
    return dt


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with one fixed accumulation order.

    ``out[i, j]`` is accumulated as ``((a[i,0]*b[0,j] + a[i,1]*b[1,j]) + ...)``,
    independently of every other output element and of the operand shapes.
    """
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    m, k = a.shape
    k2, p = b.shape
    if k != k2:
        raise DimensionError(f"inner dimensions differ: {a.shape} x {b.shape}")
    dt = _float_dtype(a, b)
    a = a.astype(dt, copy=False)
    b = b.astype(dt, copy=False)
    out = np.zeros((m, p), dtype=dt)
    for j in range(k):
        out += a[:, j : j + 1] * b[j]
    counter = _mac_log.get()
    if counter is not None:
        counter.macs += m * k * p
        counter.calls += 1
    return _checked(out, "matmul")


def linear(x: np.ndarray, w: np.ndarray, b: Optional[np.ndarray] = None) -> np.ndarray:
    """``x @ w.T + b`` with ``w`` stored as (out_features, in_features)."""
    out = matmul(x, w.T)
    if b is not None:
        out = out + b.astype(out.dtype, copy=False)
    return out


def row_sum(x: np.ndarray) -> np.ndarray:
    """Sum over the last axis, left to right, with shape ``x.shape[:-1] + (1,)``."""
    acc = x[..., 0:1].copy()
    for j in range(1, x.shape[-1]):
        acc += x[..., j : j + 1]
    return acc


def layer_norm(
    x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, eps: float = LN_EPS
) -> np.ndarray:
    if eps <= 0:
        raise ConfigError("layer_norm eps must be positive")
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(f"affine params {gamma.shape}/{beta.shape} do not match width {d}")
    dt = x.dtype
    inv_d = dt.type(1.0 / d)
    centered = x - row_sum(x) * inv_d
    var = row_sum(centered * centered) * inv_d
    normed = centered / np.sqrt(var + dt.type(eps))
    return _checked(normed * gamma.astype(dt) + beta.astype(dt), "layer_norm")


def softmax_rows(x: np.ndarray, mask: Optional[np.ndarray] = None) -> np.ndarray:
    """Softmax over the last axis; ``mask`` is boolean with True marking admissible entries.

    Masked entries come out as exact zeros.
    """
    dt = x.dtype
    if mask is None:
        scores = x
    else:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        if not np.all(mask.any(axis=-1)):
            raise DegenerateMaskError("softmax row with every entry masked")
        scores = np.where(mask, x, dt.type(MASK_PENALTY))
    shifted = scores - scores.max(axis=-1, keepdims=True)
    e = np.exp(np.ascontiguousarray(shifted))
    if mask is not None:
        e = np.where(mask, e, dt.type(0.0))
    return _checked(e / row_sum(e), "softmax_rows")


def gelu(x: np.ndarray) -> np.ndarray:
    """Exact GELU, ``x * Phi(x)`` with the Gaussian CDF written through erf."""
    dt = x.dtype if x.dtype in (np.float32, np.float64) else np.dtype(DTYPE)
    x = x.astype(dt, copy=False)
    half = dt.type(0.5)
    return _checked(half * x * (dt.type(1.0) + erf(x * dt.type(1.0 / math.sqrt(2.0)))), "gelu")


def identity(x: np.ndarray) -> np.ndarray:
    return x


@dataclass
class AttentionWeights:
    """Q/K/V/O projections, each (d_out, d_in) with a bias of length d_out."""

    wq: np.ndarray
    bq: np.ndarray
    wk: np.ndarray
    bk: np.ndarray
    wv: np.ndarray
    bv: np.ndarray
    wo: np.ndarray
    bo: np.ndarray

    @property
    def d_model(self) -> int:
        return self.wq.shape[0]

    def copy(self) -> "AttentionWeights":
        return AttentionWeights(*(t.copy() for t in self.tensors()))

    def tensors(self) -> tuple[np.ndarray, ...]:
        return (self.wq, self.bq, self.wk, self.bk, self.wv, self.bv, self.wo, self.bo)

    def astype(self, dtype) -> "AttentionWeights":
        return AttentionWeights(*(t.astype(dtype) for t in self.tensors()))

    @classmethod
    def zeros(cls, d: int, dtype=DTYPE) -> "AttentionWeights":
        m, v = np.zeros((d, d), dtype), np.zeros(d, dtype)
        return cls(m, v, m.copy(), v.copy(), m.copy(), v.copy(), m.copy(), v.copy())


DENSE, BLOCK_DIAGONAL, WINDOWED_2X2 = "dense", "block-diagonal", "windowed-2x2"


@dataclass(frozen=True)
class AttentionMask:
    """Structured self-attention mask over a concatenation of views.

    ``blocks`` are half-open token ranges; ``grids`` gives (rows, cols) per block
    and is only consulted by the windowed kind.
    """

    kind: str
    blocks: tuple[tuple[int, int], ...]
    grids: tuple[tuple[int, int], ...] = field(default=())

    def __post_init__(self) -> None:
        if self.kind not in (DENSE, BLOCK_DIAGONAL, WINDOWED_2X2):
            raise ConfigError(f"unknown mask kind {self.kind!r}")
        pos = 0
        for start, stop in self.blocks:
            if start != pos or stop <= start:
                raise ConfigError(f"mask blocks must be contiguous, sorted and non-empty: {self.blocks}")
            pos = stop
        if not self.blocks:
            raise ConfigError("mask needs at least one block")
        if self.kind == DENSE and len(self.blocks) != 1:
            raise ConfigError("dense mask has exactly one block")
        if self.kind == WINDOWED_2X2:
            if len(self.grids) != len(self.blocks):
                raise ConfigError("windowed mask needs one grid per block")
            for (start, stop), (r, c) in zip(self.blocks, self.grids):
                if r % 2 or c % 2:
                    raise ConfigError(f"windowed mask needs even grid dims, got {r}x{c}")
                if r * c != stop - start:
                    raise ConfigError(f"grid {r}x{c} does not match block length {stop - start}")

    @property
    def n_tokens(self) -> int:
        return self.blocks[-1][1]

    @classmethod
    def dense(cls, n: int) -> "AttentionMask":
        return cls(DENSE, ((0, n),))

    @classmethod
    def block_diagonal(cls, blocks: Sequence[tuple[int, int]]) -> "AttentionMask":
        blocks = tuple((int(a), int(b)) for a, b in blocks)
        if len(blocks) == 1:
            return cls(DENSE, blocks)
        return cls(BLOCK_DIAGONAL, blocks)

    @classmethod
    def windowed(
        cls, blocks: Sequence[tuple[int, int]], grids: Sequence[tuple[int, int]]
    ) -> "AttentionMask":
        return cls(
            WINDOWED_2X2,
            tuple((int(a), int(b)) for a, b in blocks),
            tuple((int(r), int(c)) for r, c in grids),
        )

    def group_ids(self) -> np.ndarray:
        """Integer label per token; tokens may attend to each other iff labels match."""
        ids = np.empty(self.n_tokens, dtype=np.int64)
        next_id = 0
        for bi, (start, stop) in enumerate(self.blocks):
            if self.kind == WINDOWED_2X2:
                r, c = self.grids[bi]
                rows, cols = np.divmod(np.arange(stop - start), c)
                ids[start:stop] = next_id + (rows // 2) * (c // 2) + cols // 2
                next_id += (r // 2) * (c // 2)
            else:
                ids[start:stop] = next_id
                next_id += 1
        return ids

    def to_bool(self, n: Optional[int] = None) -> np.ndarray:
        if n is not None and n != self.n_tokens:
            raise DimensionError(f"mask covers {self.n_tokens} tokens, sequence has {n}")
        ids = self.group_ids()
        return ids[:, None] == ids[None, :]


def attention(
    xq: np.ndarray,
    xkv: np.ndarray,
    w: AttentionWeights,
    heads: int,
    allowed: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Multi-head attention of ``xq`` rows over ``xkv`` rows, output-projected.

    ``allowed`` is an optional (n_q, n_kv) boolean pattern.
    """
    d = w.d_model
    if heads < 1 or d % heads:
        raise ConfigError(f"d_model={d} is not divisible by heads={heads}")
    if xq.shape[-1] != d or xkv.shape[-1] != d:
        raise DimensionError(f"attention width {d} does not match inputs {xq.shape}, {xkv.shape}")
    dh = d // heads
    q = linear(xq, w.wq, w.bq)
    k = linear(xkv, w.wk, w.bk)
    v = linear(xkv, w.wv, w.bv)
    scale = q.dtype.type(1.0 / math.sqrt(dh))
    outs = []
    for h in range(heads):
        sl = slice(h * dh, (h + 1) * dh)
        scores = matmul(q[:, sl], k[:, sl].T) * scale
        probs = softmax_rows(scores, allowed)
        outs.append(matmul(probs, v[:, sl]))
    return linear(np.concatenate(outs, axis=1), w.wo, w.bo)


def masked_mha(
    x: np.ndarray, w: AttentionWeights, heads: int, mask: AttentionMask
) -> np.ndarray:
    """Self-attention over ``x`` restricted by a structured mask (no residual)."""
    return attention(x, x, w, heads, mask.to_bool(x.shape[0]))
