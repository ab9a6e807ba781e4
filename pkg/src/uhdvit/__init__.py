"""Intra-ViT token compression for slice-based high-resolution encoding.

Numerics, slicing policy, a seeded ViT encoder, the 2x2 window compressor and
its reuse initialization, post-encoder connectors and an analytic cost model.
"""

from .compressor import VARIANTS, Compressor, Variant, build_compressor, reuse_init
from .connector import ConnectorSpec
from .costmodel import FlopsConvention, flops_layer, flops_pipeline, pipeline_report, sweep_k
from .encoder import PRESETS, ModelConfig, TokenSequence, encode
from .errors import (
    BudgetError,
    ConfigError,
    DegenerateMaskError,
    DimensionError,
    GeometryError,
    NumericsError,
    UHDError,
)
from .pipeline import checksum, run_pipeline
from .slicing import ImageSpec, SliceGrid, SlicePlan, build_plan, select_grid

__version__ = "0.1.0"

__all__ = [
    "VARIANTS", "Compressor", "Variant", "build_compressor", "reuse_init",
    "ConnectorSpec", "FlopsConvention", "flops_layer", "flops_pipeline", "pipeline_report", "sweep_k",
    "PRESETS", "ModelConfig", "TokenSequence", "encode",
    "BudgetError", "ConfigError", "DegenerateMaskError", "DimensionError", "GeometryError",
    "NumericsError", "UHDError",
    "checksum", "run_pipeline", "ImageSpec", "SliceGrid", "SlicePlan", "build_plan", "select_grid",
]
