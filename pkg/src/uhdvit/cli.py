"""Command-line entry point.

Subcommands: ``plan``, ``encode``, ``check-init``, ``flops``, ``ablate``.
Exit codes: 0 success, 1 check failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import costmodel
from .compressor import VARIANTS, Variant, build_compressor, parse_variant
from .connector import ConnectorSpec, output_tokens
from .costmodel import FlopsConvention
from .encoder import PRESETS, ModelConfig, random_layer
from .errors import ConfigError, UHDError
from .pipeline import build_weights, run_pipeline
from .slicing import ImageSpec, build_plan
from .verify import check_reuse_init, check_window_locality
from .weights_io import load_model, save_model

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2

COMMAND_DEFAULTS = {
    "encode": {"preset": "toy", "width": 64, "height": 64, "max_slices": 1},
    "check-init": {"preset": "toy"},
    "ablate": {"preset": "toy", "width": 64, "height": 64, "max_slices": 1},
    "flops": {"preset": "siglip2", "width": 448, "height": 448, "max_slices": 1},
}


@dataclass
class RunConfig:
    model: ModelConfig
    width: int = 448
    height: int = 448
    max_slices: int = 9
    variant: Variant = Variant.WIN_ATTN_REUSED_MLP
    connector: ConnectorSpec = field(default_factory=ConnectorSpec)
    convention: FlopsConvention = field(default_factory=FlopsConvention)
    seed: int = 42
    output: Optional[str] = None

    def __post_init__(self) -> None:
        if self.seed < 0 or self.seed >= 1 << 64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        if self.max_slices < 1:
            raise ConfigError("max_slices must be >= 1")
        ImageSpec(self.width, self.height)

    def to_dict(self) -> dict:
        return {
            "model": self.model.to_dict(),
            "width": self.width,
            "height": self.height,
            "max_slices": self.max_slices,
            "variant": self.variant.value,
            "connector": self.connector.to_dict(),
            "convention": self.convention.to_dict(),
            "seed": self.seed,
            "output": self.output,
        }


def _read_config_file(path: str) -> dict:
    try:
        with open(path) as f:
            return json.load(f)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Defaults < command defaults < config file < flags."""
    file_cfg = _read_config_file(args.config) if getattr(args, "config", None) else {}
    defaults = COMMAND_DEFAULTS.get(args.command, {})

    def pick(name, fallback=None):
        flag = getattr(args, name, None)
        if flag is not None:
            return flag
        if name in file_cfg:
            return file_cfg[name]
        return defaults.get(name, fallback)

    preset = pick("preset", "toy")
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    model = PRESETS[preset]
    if "model" in file_cfg:
        model = ModelConfig.from_dict({**model.to_dict(), **file_cfg["model"]})
    overrides = {
        k: getattr(args, k) for k in ("view_px", "patch_px", "insertion_depth") if getattr(args, k, None) is not None
    }
    if getattr(args, "k", None) is not None:
        overrides["insertion_depth"] = args.k
    if overrides:
        model = model.replace(**overrides)

    conn = ConnectorSpec.from_dict(file_cfg["connector"]) if "connector" in file_cfg else ConnectorSpec()
    conn_over = {
        k: v
        for k, v in (("kind", getattr(args, "connector", None)), ("ratio", getattr(args, "ratio", None)),
                     ("queries", getattr(args, "queries", None)), ("out_dim", getattr(args, "out_dim", None)))
        if v is not None
    }
    if conn_over:
        conn = replace(conn, **conn_over)

    conv = FlopsConvention(**file_cfg["convention"]) if "convention" in file_cfg else FlopsConvention()
    conv_over = {
        k: v
        for k, v in (("mac_factor", getattr(args, "mac_factor", None)),
                     ("include_norm_softmax", getattr(args, "include_norm_softmax", None)),
                     ("include_bias", getattr(args, "include_bias", None)))
        if v is not None
    }
    if conv_over:
        conv = replace(conv, **conv_over)

    return RunConfig(
        model=model,
        width=pick("width", 448),
        height=pick("height", 448),
        max_slices=pick("max_slices", 9),
        variant=parse_variant(pick("variant", Variant.WIN_ATTN_REUSED_MLP.value)),
        connector=conn,
        convention=conv,
        seed=pick("seed", 42),
        output=pick("output"),
    )


def _threads(args) -> int:
    value = os.environ.get("UHD_THREADS")
    cap = None
    if value:
        try:
            cap = max(1, int(value))
        except ValueError:
            raise ConfigError(f"UHD_THREADS must be an integer, got {value!r}") from None
    requested = args.threads if getattr(args, "threads", None) is not None else (cap or 1)
    return min(requested, cap) if cap else requested


def _dtype(args):
    return np.float64 if getattr(args, "f64", False) else np.float32


def _emit(args, rc: Optional[RunConfig], payload: dict, text: str) -> None:
    blob = json.dumps(payload, indent=2, sort_keys=True)
    print(blob if args.json else text)
    out = rc.output if rc is not None else getattr(args, "output", None)
    if out:
        with open(out, "w") as f:
            f.write(blob + "\n")


# ------------------------------------------------------------------ commands


def cmd_plan(args) -> int:
    image = ImageSpec(args.width, args.height)
    plan = build_plan(image, args.max_slices, args.view_px, args.patch_px)
    lines = [
        f"image {image.width}x{image.height}  max_slices={args.max_slices}",
        f"grid {plan.grid.rows}x{plan.grid.cols}  views={len(plan.views)}  total_tokens={plan.total_tokens}",
    ]
    for i, v in enumerate(plan.views):
        lines.append(f"  [{i}] {v.role:<9} rect={list(v.src_rect)} tokens={v.token_rows}x{v.token_cols}")
    _emit(args, None, plan.to_dict(), "\n".join(lines))
    return EXIT_OK


def _plan_for(rc: RunConfig):
    return build_plan(ImageSpec(rc.width, rc.height), rc.max_slices, rc.model.view_px, rc.model.patch_px)


def cmd_encode(args) -> int:
    rc = resolve_config(args)
    dtype = _dtype(args)
    stage = "plan"
    try:
        plan = _plan_for(rc)
        stage = "weights"
        if args.weights:
            weights = load_model(args.weights)
            weights = _cast_weights(weights, dtype)
        else:
            weights = build_weights(rc.model, rc.variant, rc.connector, rc.seed, dtype)
        if args.save_weights:
            save_model(args.save_weights, weights)
        stage = "pipeline"
        run = run_pipeline(
            rc.model, plan, rc.variant, rc.connector, weights, rc.seed, dtype, _threads(args),
            compress_thumbnail=not args.skip_thumbnail,
        )
    except UHDError as exc:
        raise type(exc)(f"[{stage}] {exc}") from exc
    payload = {"config": rc.to_dict(), "dtype": np.dtype(dtype).name, **run.to_dict()}
    counts = " -> ".join(str(n) for n in run.stage_tokens.values())
    text = (
        f"variant {rc.variant.value}  views={len(plan.views)}  grid {plan.grid.rows}x{plan.grid.cols}\n"
        f"tokens  {counts}  ({' -> '.join(run.stage_tokens)})\n"
        f"checksum {run.checksum}"
    )
    _emit(args, rc, payload, text)
    return EXIT_OK


def _cast_weights(weights, dtype):
    if dtype == np.float32:
        return weights
    from .weights_io import ModelWeights

    return ModelWeights.from_tensors({k: v.astype(dtype) for k, v in weights.to_tensors().items()})


def cmd_check_init(args) -> int:
    rc = resolve_config(args)
    dtype = _dtype(args)
    cfg = rc.model
    src = random_layer(cfg, rc.seed, cfg.insertion_depth - 1, dtype)
    strict = args.strict_surrogate == "on"
    result = check_reuse_init(src, args.trials, rc.seed, cfg.ln_eps, strict=strict)
    payload = result.to_dict()
    lines = [
        f"mode {payload['mode']}  dtype {result.dtype}  trials {result.trials}",
        f"max rel err {result.max_rel_err:.3e}  (tolerance {result.tolerance:.0e})",
    ]
    if not strict:
        lines.append(f"surrogate vs production LN2 divergence {result.surrogate_vs_production:.3e} (informational)")
        _emit(args, rc, payload, "\n".join(lines))
        return EXIT_OK
    if result.passed:
        lines.append("PASS")
        _emit(args, rc, payload, "\n".join(lines))
        return EXIT_OK
    payload["worst_window"] = result.worst_window.tolist()
    lines.append(f"FAIL  worst trial {result.worst_trial}")
    lines.append(np.array2string(result.worst_window, precision=6))
    _emit(args, rc, payload, "\n".join(lines))
    return EXIT_FAIL


def _flops_tokens(args, rc: RunConfig):
    if args.tokens is not None:
        return [args.tokens]
    if args.image:
        return _plan_for(rc).view_tokens
    return [rc.model.tokens_per_view]


def cmd_flops(args) -> int:
    rc = resolve_config(args)
    cfg, conv = rc.model, rc.convention
    connector = None if args.no_connector else rc.connector
    tokens = _flops_tokens(args, rc)
    if args.sweep:
        ks = [int(k) for k in args.sweep.split(",")]
        sweep = costmodel.sweep_k(tokens, cfg, rc.variant, ks, connector, conv)
        payload = {"convention": conv.to_dict(), "config": cfg.to_dict(), "variant": rc.variant.value,
                   "view_tokens": tokens, **sweep.to_dict()}
        lines = [f"{'k':>4}{'GFLOPs':>14}"]
        lines += [f"{k:>4}{t / costmodel.GIGA:>14.3f}" for k, t in zip(sweep.ks, sweep.totals)]
        lines.append(
            f"slope {sweep.slope / costmodel.GIGA:.4f} GFLOPs/layer "
            f"(layer(N)-layer(N/4) = {sweep.layer_slope / costmodel.GIGA:.4f}), "
            f"affinity residual {sweep.residual_rel:.2e}"
        )
        _emit(args, rc, payload, "\n".join(lines))
        return EXIT_OK
    if args.deltas:
        payload, text = _delta_table(tokens, cfg, connector, conv)
        _emit(args, rc, payload, text)
        return EXIT_OK
    if args.ge_budget is not None:
        cmp = costmodel.compare_ge_se(ImageSpec(rc.width, rc.height), args.ge_budget, rc.max_slices, cfg, conv)
        text = (
            f"GE views={cmp.ge_plan.view_tokens} total={cmp.ge.total / costmodel.GIGA:.3f}G "
            f"quadratic share {cmp.ge_quadratic_share:.3f}\n"
            f"SE views={cmp.se_plan.view_tokens} total={cmp.se.total / costmodel.GIGA:.3f}G "
            f"quadratic share {cmp.se_quadratic_share:.3f}"
        )
        _emit(args, rc, cmp.to_dict(), text)
        return EXIT_OK
    report = costmodel.pipeline_report(tokens, cfg, rc.variant, cfg.insertion_depth, connector, conv)
    _emit(args, rc, report.to_dict(), report.to_text())
    return EXIT_OK


def _delta_table(tokens, cfg, connector, conv):
    totals = {
        v.value: costmodel.flops_pipeline(tokens, cfg, v, None, connector, conv).total for v in VARIANTS
    }
    win = Variant.WIN_ATTN_MLP.value
    win_re = Variant.WIN_ATTN_REUSED_MLP.value
    pu, re = Variant.PIXEL_UNSHUFFLE_MLP.value, Variant.REUSED_MLP.value
    deltas = {
        "window_attention_over_random_mlp": totals[win] - totals[pu],
        "window_attention_over_reused_mlp": totals[win_re] - totals[re],
        "reuse_over_random_without_window": totals[re] - totals[pu],
        "reuse_over_random_with_window": totals[win_re] - totals[win],
    }
    payload = {"totals": totals, "deltas": deltas,
               "window_delta_equal": deltas["window_attention_over_random_mlp"] == deltas["window_attention_over_reused_mlp"],
               "reuse_delta_equal": deltas["reuse_over_random_without_window"] == deltas["reuse_over_random_with_window"]}
    lines = [f"{'variant':<22}{'GFLOPs':>12}"]
    lines += [f"{k:<22}{v / costmodel.GIGA:>12.3f}" for k, v in totals.items()]
    lines += [f"{k:<36}{v / costmodel.GIGA:>12.3f}" for k, v in deltas.items()]
    return payload, "\n".join(lines)


def cmd_ablate(args) -> int:
    rc = resolve_config(args)
    dtype = _dtype(args)
    cfg = rc.model
    plan = _plan_for(rc)
    base = build_weights(cfg, None, rc.connector, rc.seed, dtype)
    rows, failed = [], False
    for v in VARIANTS:
        row = {"variant": v.value}
        try:
            comp = build_compressor(v, base.layers, cfg, rc.seed)
            weights = replace(base, compressor=comp.weights)
            run = run_pipeline(cfg, plan, v, rc.connector, weights, rc.seed, dtype, _threads(args))
            side = cfg.tokens_per_side
            loc = check_window_locality(v, comp.weights, cfg.n_heads, (side, side), cfg.d_model, rc.seed, dtype, cfg.ln_eps)
            expected = output_tokens(plan.total_tokens // 4, rc.connector)
            row.update(
                gflops=costmodel.flops_pipeline(plan, cfg, v, None, rc.connector, rc.convention).total / costmodel.GIGA,
                final_tokens=run.output.shape[0],
                expected_tokens=expected,
                checksum=run.checksum,
                locality="pass" if loc.passed else "fail",
            )
            ok = loc.passed and run.output.shape[0] == expected
        except UHDError as exc:
            row["error"] = str(exc)
            ok = False
        row["ok"] = ok
        failed |= not ok
        rows.append(row)
    payload = {"config": rc.to_dict(), "rows": rows}
    lines = [f"{'variant':<22}{'GFLOPs':>12}{'tokens':>8}{'checksum':>10}{'locality':>10}"]
    for r in rows:
        if "error" in r:
            lines.append(f"{r['variant']:<22}  ERROR {r['error']}")
        else:
            lines.append(
                f"{r['variant']:<22}{r['gflops']:>12.6f}{r['final_tokens']:>8}{r['checksum']:>10}{r['locality']:>10}"
            )
    _emit(args, rc, payload, "\n".join(lines))
    return EXIT_FAIL if failed else EXIT_OK


# ------------------------------------------------------------------ parser


def _positive(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return value


def _u64(text: str) -> int:
    value = int(text)
    if not 0 <= value < 1 << 64:
        raise argparse.ArgumentTypeError("seed must fit in an unsigned 64-bit integer")
    return value


def _global_flags(p: argparse.ArgumentParser, suppress: bool) -> None:
    kw = {"default": argparse.SUPPRESS} if suppress else {}
    p.add_argument("--config", metavar="PATH", help="JSON run config; flags override it", **kw)
    p.add_argument("--seed", type=_u64, help="weight / input seed (default 42)", **kw)
    p.add_argument("--json", action="store_true", help="print the JSON report", **kw)
    p.add_argument("--f64", action="store_true", help="run numerics in float64", **kw)


def _model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--preset", choices=sorted(PRESETS))
    p.add_argument("--width", type=_positive)
    p.add_argument("--height", type=_positive)
    p.add_argument("--max-slices", type=_positive)
    p.add_argument("--view-px", type=_positive)
    p.add_argument("--patch-px", type=_positive)
    p.add_argument("--insertion-depth", type=_positive)
    p.add_argument("--variant", choices=[v.value for v in VARIANTS])
    p.add_argument("--connector", choices=["mlp", "resampler"])
    p.add_argument("--ratio", type=int, choices=[4, 16])
    p.add_argument("--queries", type=_positive)
    p.add_argument("--out-dim", type=_positive)
    p.add_argument("--output", metavar="PATH", help="also write the JSON report here")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="uhdvit", description=__doc__.splitlines()[0])
    _global_flags(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("plan", help="slice plan for an image size")
    _global_flags(p, suppress=True)
    p.add_argument("width", type=_positive)
    p.add_argument("height", type=_positive)
    p.add_argument("--max-slices", type=_positive, default=9)
    p.add_argument("--view-px", type=_positive, default=448)
    p.add_argument("--patch-px", type=_positive, default=14)
    p.add_argument("--output", metavar="PATH")
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("encode", help="run the seeded pipeline and print token counts and checksum")
    _global_flags(p, suppress=True)
    _model_flags(p)
    p.add_argument("--threads", type=_positive)
    p.add_argument("--weights", metavar="PATH", help="load a UHDW weight file instead of seeding")
    p.add_argument("--save-weights", metavar="PATH")
    p.add_argument("--skip-thumbnail", action="store_true", help="let the thumbnail bypass the compressor")
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("check-init", help="verify the reuse initialization against the FFN branch average")
    _global_flags(p, suppress=True)
    _model_flags(p)
    p.add_argument("--trials", type=_positive, default=100)
    p.add_argument("--strict-surrogate", choices=["on", "off"], default="on")
    p.set_defaults(func=cmd_check_init)

    p = sub.add_parser("flops", help="analytic cost report, k sweep or variant deltas")
    _global_flags(p, suppress=True)
    _model_flags(p)
    p.add_argument("--k", type=_positive, help="insertion depth")
    p.add_argument("--sweep", metavar="K1,K2,...", help="sweep insertion depths")
    p.add_argument("--deltas", action="store_true", help="variant cross-difference table")
    p.add_argument("--tokens", type=_positive, help="tokens of a single view (default: one full view)")
    p.add_argument("--image", action="store_true", help="cost the whole slice plan of --width/--height")
    p.add_argument("--ge-budget", type=_positive, metavar="PX", help="compare global vs slice encoding")
    p.add_argument("--no-connector", action="store_true")
    p.add_argument("--mac-factor", type=int, choices=[1, 2])
    p.add_argument("--include-norm-softmax", action="store_true", default=None)
    p.add_argument("--include-bias", action="store_true", default=None)
    p.set_defaults(func=cmd_flops)

    p = sub.add_parser("ablate", help="all compressor variants: FLOPs, checksum, locality")
    _global_flags(p, suppress=True)
    _model_flags(p)
    p.add_argument("--threads", type=_positive)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    for name in ("config", "seed", "json", "f64"):
        if not hasattr(args, name):
            setattr(args, name, None if name in ("config", "seed") else False)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"uhdvit {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except UHDError as exc:
        print(f"uhdvit {args.command}: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
