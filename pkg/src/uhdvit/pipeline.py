"""End-to-end run: stem, encoder with compressor, connector."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .compressor import Compressor, Variant, build_compressor, parse_variant
from .connector import ConnectorSpec, apply_connector, random_connector
from .encoder import ModelConfig, encode, patch_embed, random_layers, random_stem, synthetic_pixels
from .numerics import DTYPE
from .rng import fnv1a64
from .slicing import SlicePlan
from .weights_io import ModelWeights


def checksum(arr: np.ndarray) -> str:
    """First 8 hex digits of FNV-1a 64 over the little-endian bytes."""
    le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
    return f"{fnv1a64(np.ascontiguousarray(le).tobytes()):016x}"[:8]


def build_weights(
    cfg: ModelConfig,
    variant: "Variant | str | None",
    connector: Optional[ConnectorSpec],
    seed: int,
    dtype=DTYPE,
) -> ModelWeights:
    layers = random_layers(cfg, seed, dtype)
    comp = None
    if variant is not None:
        comp = build_compressor(variant, layers, cfg, seed).weights
    conn = None if connector is None else random_connector(connector, cfg, seed, dtype)
    return ModelWeights(random_stem(cfg, seed, dtype), layers, comp, conn)


@dataclass
class PipelineRun:
    stage_tokens: dict[str, int]
    view_grids: dict[str, list[tuple[int, int]]]
    output: np.ndarray
    checksum: str

    def to_dict(self) -> dict:
        return {
            # Lists, not maps, so stage order survives sorted-key serialization.
            "stage_tokens": [{"stage": k, "tokens": n} for k, n in self.stage_tokens.items()],
            "view_grids": [{"stage": k, "grids": [list(g) for g in v]} for k, v in self.view_grids.items()],
            "output_shape": list(self.output.shape),
            "checksum": self.checksum,
        }


def run_pipeline(
    cfg: ModelConfig,
    plan: SlicePlan,
    variant: "Variant | str | None",
    connector: Optional[ConnectorSpec],
    weights: ModelWeights,
    seed: int,
    dtype=DTYPE,
    threads: int = 1,
    compress_thumbnail: bool = True,
) -> PipelineRun:
    pixels = synthetic_pixels(plan, cfg, seed, dtype)
    x = patch_embed(plan, weights.stem, pixels)
    comp = None
    if variant is not None:
        comp = Compressor(parse_variant(variant), weights.compressor, cfg.n_heads, cfg.ln_eps, compress_thumbnail)
    y = encode(x, cfg, weights.layers, comp, threads=threads)
    stages = {"patches": len(x), "encoder": len(y)}
    grids = {"patches": list(x.grids), "encoder": list(y.grids)}
    out = y.tokens
    if connector is not None:
        out = apply_connector(y, connector, weights.connector, cfg.n_heads)
        stages["connector"] = out.shape[0]
    return PipelineRun(stages, grids, out, checksum(out))
