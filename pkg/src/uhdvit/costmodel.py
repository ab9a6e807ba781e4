"""Analytic FLOPs accounting for encoder layers, compressors, connectors and pipelines.

All counts are exact Python integers, so identities such as the affine
dependence on insertion depth hold with zero residual.

Counting rules (``FlopsConvention``):

* every multiply-accumulate of a matmul costs ``mac_factor`` FLOPs;
* ``include_bias`` adds one FLOP per output element of each biased linear map;
* ``include_norm_softmax`` adds the element-wise terms: LayerNorm
  (5 per element), softmax (4 per score), GELU (8 per element), 2x2 average
  pooling (4 per output element) and residual adds (1 per element).

Window attention is costed in its efficient form (4 keys per query), not as a
masked dense product.  Multi-view inputs pay the quadratic term per view.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from typing import Optional, Sequence, Union

import numpy as np

from .compressor import Variant, parse_variant
from .connector import MLP, ConnectorSpec
from .encoder import ModelConfig
from .errors import BudgetError, ConfigError
from .slicing import ImageSpec, SlicePlan, build_plan, global_plan

LN_PER_ELEM = 5
SOFTMAX_PER_SCORE = 4
GELU_PER_ELEM = 8
POOL_PER_OUTPUT = 4
RESIDUAL_PER_ELEM = 1
GIGA = 1e9


@dataclass(frozen=True)
class FlopsConvention:
    mac_factor: int = 2
    include_norm_softmax: bool = False
    include_bias: bool = False

    def __post_init__(self) -> None:
        if self.mac_factor not in (1, 2):
            raise ConfigError(f"mac_factor must be 1 or 2, got {self.mac_factor}")

    def to_dict(self) -> dict:
        return asdict(self)


DEFAULT_CONVENTION = FlopsConvention()


@dataclass(frozen=True)
class FlopsBreakdown:
    attn_proj: int = 0
    attn_matmul: int = 0
    ffn: int = 0
    compressor: int = 0
    connector: int = 0

    @property
    def total(self) -> int:
        return self.attn_proj + self.attn_matmul + self.ffn + self.compressor + self.connector

    def __add__(self, other: "FlopsBreakdown") -> "FlopsBreakdown":
        return FlopsBreakdown(
            self.attn_proj + other.attn_proj,
            self.attn_matmul + other.attn_matmul,
            self.ffn + other.ffn,
            self.compressor + other.compressor,
            self.connector + other.connector,
        )

    def scaled(self, n: int) -> "FlopsBreakdown":
        return FlopsBreakdown(*(n * v for v in asdict(self).values()))

    def to_dict(self) -> dict:
        return {**asdict(self), "total": self.total}


# ---------------------------------------------------------------- building blocks


def _attention_cost(
    n_q: int, n_kv: int, keys_per_query: int, d: int, heads: int, conv: FlopsConvention
) -> tuple[int, int]:
    """(projection, score+mix) FLOPs; norms on inputs and residual go with projection."""
    proj = conv.mac_factor * (2 * n_q * d * d + 2 * n_kv * d * d)
    mix = conv.mac_factor * 2 * n_q * keys_per_query * d
    if conv.include_bias:
        proj += 2 * n_q * d + 2 * n_kv * d
    if conv.include_norm_softmax:
        proj += LN_PER_ELEM * n_kv * d + RESIDUAL_PER_ELEM * n_q * d
        if n_q != n_kv:
            proj += LN_PER_ELEM * n_q * d
        mix += SOFTMAX_PER_SCORE * heads * n_q * keys_per_query
    return proj, mix


def _mlp_cost(n: int, d_in: int, hidden: int, d_out: int, conv: FlopsConvention, norm: bool = True) -> int:
    flops = conv.mac_factor * (n * d_in * hidden + n * hidden * d_out)
    if conv.include_bias:
        flops += n * (hidden + d_out)
    if conv.include_norm_softmax:
        flops += GELU_PER_ELEM * n * hidden + (LN_PER_ELEM * n * d_in if norm else 0)
    return flops


def flops_layer(n_tokens: int, cfg: ModelConfig, conv: FlopsConvention = DEFAULT_CONVENTION) -> FlopsBreakdown:
    """One pre-norm encoder block over a single view of ``n_tokens`` tokens."""
    if n_tokens < 1:
        raise ConfigError("n_tokens must be >= 1")
    d = cfg.d_model
    proj, mix = _attention_cost(n_tokens, n_tokens, n_tokens, d, cfg.n_heads, conv)
    ffn = _mlp_cost(n_tokens, d, cfg.d_mlp, d, conv)
    if conv.include_norm_softmax:
        ffn += RESIDUAL_PER_ELEM * n_tokens * d
    return FlopsBreakdown(attn_proj=proj, attn_matmul=mix, ffn=ffn)


def fuse_hidden(variant: Variant, cfg: ModelConfig) -> int:
    return 4 * cfg.d_mlp if variant.reuses_mlp else cfg.d_mlp


def flops_compressor(
    n_tokens: int,
    variant: "Variant | str",
    cfg: ModelConfig,
    conv: FlopsConvention = DEFAULT_CONVENTION,
) -> int:
    variant = parse_variant(variant)
    if n_tokens % 4:
        raise BudgetError(f"compressor input of {n_tokens} tokens is not divisible by 4")
    d, n_out = cfg.d_model, n_tokens // 4
    pool = POOL_PER_OUTPUT * n_out * d if conv.include_norm_softmax else 0
    if variant is Variant.AVG_POOL:
        return pool
    if variant.is_cross_attention:
        proj, mix = _attention_cost(n_out, n_tokens, 4, d, cfg.n_heads, conv)
        return proj + mix + (pool if variant is Variant.CROSS_ATTN_MEAN else 0)
    flops = _mlp_cost(n_out, 4 * d, fuse_hidden(variant, cfg), d, conv) + pool
    if conv.include_norm_softmax:
        flops += RESIDUAL_PER_ELEM * n_out * d
    if variant.has_window_attention:
        proj, mix = _attention_cost(n_tokens, n_tokens, 4, d, cfg.n_heads, conv)
        flops += proj + mix
    return flops


def flops_connector(
    view_tokens: Sequence[int],
    spec: ConnectorSpec,
    d: int,
    conv: FlopsConvention = DEFAULT_CONVENTION,
    heads: int = 1,
) -> int:
    """Connector cost given the per-view token counts leaving the encoder."""
    mac = conv.mac_factor
    if spec.kind == MLP:
        total = 0
        for n in view_tokens:
            if n % spec.ratio:
                raise BudgetError(f"view of {n} tokens is not divisible by connector ratio {spec.ratio}")
            total += _mlp_cost(n // spec.ratio, spec.ratio * d, spec.mlp_hidden, spec.out_dim, conv, norm=False)
        return total
    q, n = spec.queries, sum(view_tokens)
    flops = mac * (2 * q * d * d + 2 * n * d * d + 2 * q * n * d + q * d * spec.out_dim)
    if conv.include_bias:
        flops += 2 * q * d + 2 * n * d + q * spec.out_dim
    if conv.include_norm_softmax:
        flops += SOFTMAX_PER_SCORE * heads * q * n
    return flops


def baseline_connector(spec: Optional[ConnectorSpec]) -> Optional[ConnectorSpec]:
    """Post-encoder-only baseline: the MLP connector absorbs the whole 16x."""
    if spec is None or spec.kind != MLP:
        return spec
    return replace(spec, ratio=16)


# ---------------------------------------------------------------- pipelines

Tokens = Union[int, SlicePlan, Sequence[int]]


def _view_tokens(tokens: Tokens) -> list[int]:
    if isinstance(tokens, SlicePlan):
        return tokens.view_tokens
    if isinstance(tokens, int):
        return [tokens]
    return [int(n) for n in tokens]


def flops_pipeline(
    tokens: Tokens,
    cfg: ModelConfig,
    variant: "Variant | str | None" = None,
    k: Optional[int] = None,
    connector: Optional[ConnectorSpec] = None,
    conv: FlopsConvention = DEFAULT_CONVENTION,
) -> FlopsBreakdown:
    """Encoder (+compressor) (+connector) cost summed over views.

    With a variant: ``k * layer(N) + compressor(N) + (L - k) * layer(N/4)`` per
    view; without: ``L * layer(N)``.
    """
    views = _view_tokens(tokens)
    L = cfg.n_layers
    out = FlopsBreakdown()
    post = []
    if variant is None:
        for n in views:
            out = out + flops_layer(n, cfg, conv).scaled(L)
            post.append(n)
    else:
        variant = parse_variant(variant)
        k = cfg.insertion_depth if k is None else k
        if not 1 <= k < L:
            raise ConfigError(f"insertion depth must satisfy 1 <= k < L, got k={k}, L={L}")
        for n in views:
            out = out + flops_layer(n, cfg, conv).scaled(k)
            out = out + FlopsBreakdown(compressor=flops_compressor(n, variant, cfg, conv))
            out = out + flops_layer(n // 4, cfg, conv).scaled(L - k)
            post.append(n // 4)
    if connector is not None:
        out = out + FlopsBreakdown(
            connector=flops_connector(post, connector, cfg.d_model, conv, cfg.n_heads)
        )
    return out


@dataclass
class PipelineReport:
    convention: FlopsConvention
    config: ModelConfig
    variant: Optional[str]
    k: Optional[int]
    view_tokens: list[int]
    breakdown: FlopsBreakdown
    baseline: FlopsBreakdown

    @property
    def total_gflops(self) -> float:
        return self.breakdown.total / GIGA

    @property
    def baseline_gflops(self) -> float:
        return self.baseline.total / GIGA

    @property
    def reduction_pct(self) -> float:
        return 100.0 * (1.0 - self.breakdown.total / self.baseline.total)

    def to_dict(self) -> dict:
        return {
            "convention": self.convention.to_dict(),
            "config": self.config.to_dict(),
            "variant": self.variant,
            "k": self.k,
            "view_tokens": self.view_tokens,
            "breakdown": self.breakdown.to_dict(),
            "baseline_breakdown": self.baseline.to_dict(),
            "total_gflops": round(self.total_gflops, 6),
            "baseline_gflops": round(self.baseline_gflops, 6),
            "reduction_pct": round(self.reduction_pct, 6),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_text(self) -> str:
        c = self.convention
        lines = [
            f"convention  mac_factor={c.mac_factor} norm_softmax={c.include_norm_softmax} bias={c.include_bias}",
            f"variant     {self.variant or '-'}   k={self.k if self.k is not None else '-'}   "
            f"views={len(self.view_tokens)} tokens={sum(self.view_tokens)}",
            f"{'component':<12}{'pipeline GFLOPs':>18}{'baseline GFLOPs':>18}",
        ]
        a, b = self.breakdown.to_dict(), self.baseline.to_dict()
        for key in a:
            lines.append(f"{key:<12}{a[key] / GIGA:>18.3f}{b[key] / GIGA:>18.3f}")
        lines.append(f"reduction   {self.reduction_pct:.2f}%")
        return "\n".join(lines)


def pipeline_report(
    tokens: Tokens,
    cfg: ModelConfig,
    variant: "Variant | str | None",
    k: Optional[int] = None,
    connector: Optional[ConnectorSpec] = None,
    conv: FlopsConvention = DEFAULT_CONVENTION,
) -> PipelineReport:
    views = _view_tokens(tokens)
    k_eff = None
    if variant is not None:
        variant = parse_variant(variant)
        k_eff = cfg.insertion_depth if k is None else k
    return PipelineReport(
        convention=conv,
        config=cfg,
        variant=None if variant is None else variant.value,
        k=k_eff,
        view_tokens=views,
        breakdown=flops_pipeline(views, cfg, variant, k_eff, connector, conv),
        baseline=flops_pipeline(views, cfg, None, None, baseline_connector(connector), conv),
    )


@dataclass
class KSweep:
    ks: list[int]
    totals: list[int]
    slope: float
    intercept: float
    residual_rel: float
    layer_slope: int  # flops_layer(N).total - flops_layer(N/4).total, per view, summed

    def to_dict(self) -> dict:
        return {
            "ks": self.ks,
            "totals": self.totals,
            "totals_gflops": [round(t / GIGA, 6) for t in self.totals],
            "slope_gflops": self.slope / GIGA,
            "expected_slope_gflops": self.layer_slope / GIGA,
            "intercept_gflops": self.intercept / GIGA,
            "affinity_residual_rel": self.residual_rel,
        }


def sweep_k(
    tokens: Tokens,
    cfg: ModelConfig,
    variant: "Variant | str",
    ks: Sequence[int] = (3, 6, 9, 15),
    connector: Optional[ConnectorSpec] = None,
    conv: FlopsConvention = DEFAULT_CONVENTION,
) -> KSweep:
    views = _view_tokens(tokens)
    ks = [int(k) for k in ks]
    totals = [flops_pipeline(views, cfg, variant, k, connector, conv).total for k in ks]
    if len(ks) >= 2:
        slope, intercept = np.polyfit(np.asarray(ks, float), np.asarray(totals, float), 1)
    else:
        slope, intercept = 0.0, float(totals[0])
    fitted = slope * np.asarray(ks, float) + intercept
    residual = float(np.max(np.abs(fitted - np.asarray(totals, float))) / max(abs(t) for t in totals))
    layer_slope = sum(flops_layer(n, cfg, conv).total - flops_layer(n // 4, cfg, conv).total for n in views)
    return KSweep(ks, totals, float(slope), float(intercept), residual, layer_slope)


@dataclass
class GeSeComparison:
    ge_plan: SlicePlan
    se_plan: SlicePlan
    ge: FlopsBreakdown
    se: FlopsBreakdown
    conv: FlopsConvention = field(default=DEFAULT_CONVENTION)

    @property
    def ge_quadratic_share(self) -> float:
        return self.ge.attn_matmul / self.ge.total

    @property
    def se_quadratic_share(self) -> float:
        return self.se.attn_matmul / self.se.total

    def to_dict(self) -> dict:
        return {
            "convention": self.conv.to_dict(),
            "ge": {"view_tokens": self.ge_plan.view_tokens, "breakdown": self.ge.to_dict(),
                   "quadratic_share": self.ge_quadratic_share},
            "se": {"view_tokens": self.se_plan.view_tokens, "breakdown": self.se.to_dict(),
                   "quadratic_share": self.se_quadratic_share},
        }


def compare_ge_se(
    image: ImageSpec,
    budget_px: int,
    max_slices: int,
    cfg: ModelConfig,
    conv: FlopsConvention = DEFAULT_CONVENTION,
) -> GeSeComparison:
    """Baseline encoder cost: one dense global view vs thumbnail plus slices."""
    ge_plan = global_plan(image, budget_px, cfg.patch_px)
    se_plan = build_plan(image, max_slices, cfg.view_px, cfg.patch_px)
    return GeSeComparison(
        ge_plan,
        se_plan,
        flops_pipeline(ge_plan, cfg, conv=conv),
        flops_pipeline(se_plan, cfg, conv=conv),
        conv,
    )
