import json

import pytest

from uhdvit.compressor import VARIANTS, Variant
from uhdvit.connector import ConnectorSpec
from uhdvit.costmodel import (
    FlopsConvention,
    baseline_connector,
    compare_ge_se,
    flops_compressor,
    flops_layer,
    flops_pipeline,
    pipeline_report,
    sweep_k,
)
from uhdvit.encoder import PRESETS, TokenSequence, layer_forward, random_layers
from uhdvit.errors import ConfigError
from uhdvit.numerics import count_macs
from uhdvit.rng import gaussian
from uhdvit.slicing import ImageSpec, build_plan

SIG = PRESETS["siglip2"]
TOY = PRESETS["toy"]
N = 1024


def test_layer_closed_form():
    f = flops_layer(N, SIG)
    d, m = 1152, 4304
    assert f.attn_proj == 2 * 4 * N * d * d
    assert f.attn_matmul == 2 * 2 * N * N * d
    assert f.ffn == 2 * 2 * N * d * m
    assert round(f.attn_proj / 1e9, 2) == 10.87
    assert round(f.attn_matmul / 1e9, 2) == 4.83
    assert round(f.ffn / 1e9, 2) == 20.31


def test_layer_single_token():
    assert flops_layer(1, SIG).attn_matmul == 2 * 2 * 1152


def test_layer_homogeneity():
    a, b = flops_layer(512, SIG), flops_layer(1024, SIG)
    assert b.attn_proj == 2 * a.attn_proj and b.ffn == 2 * a.ffn
    assert b.attn_matmul == 4 * a.attn_matmul


def test_layer_matches_counted_macs():
    # The analytic count with mac_factor=1 is exactly what a forward pass multiplies.
    x = TokenSequence(gaussian(0, "x", (16, 32), scale=1.0), ((4, 4),))
    (w,) = random_layers(TOY, 1)[:1]
    with count_macs() as c:
        layer_forward(x, w, x.block_mask(), TOY.n_heads)
    assert c.macs == flops_layer(16, TOY, FlopsConvention(mac_factor=1)).total


def test_compressor_costs():
    assert flops_compressor(N, Variant.AVG_POOL, SIG) == 0
    assert flops_compressor(N, Variant.AVG_POOL, SIG, FlopsConvention(include_norm_softmax=True)) > 0
    d, m, n = 1152, 4304, N // 4
    assert flops_compressor(N, Variant.PIXEL_UNSHUFFLE_MLP, SIG) == 2 * (n * 4 * d * m + n * m * d)
    assert flops_compressor(N, Variant.REUSED_MLP, SIG) == 2 * (n * 4 * d * 4 * m + n * 4 * m * d)
    assert flops_compressor(N, Variant.AVG_POOL, SIG) < min(
        flops_compressor(N, v, SIG) for v in VARIANTS if v is not Variant.AVG_POOL
    )


@pytest.mark.parametrize("conv", [FlopsConvention(), FlopsConvention(1, True, True), FlopsConvention(2, True, False)])
def test_cross_differences(conv):
    c = {v: flops_pipeline(N, SIG, v, conv=conv).total for v in VARIANTS}
    V = Variant
    assert c[V.WIN_ATTN_REUSED_MLP] - c[V.WIN_ATTN_MLP] == c[V.REUSED_MLP] - c[V.PIXEL_UNSHUFFLE_MLP]
    assert c[V.WIN_ATTN_MLP] - c[V.PIXEL_UNSHUFFLE_MLP] == c[V.WIN_ATTN_REUSED_MLP] - c[V.REUSED_MLP]
    assert c[V.REUSED_MLP] > c[V.PIXEL_UNSHUFFLE_MLP]


def test_reference_deltas_are_self_consistent():
    # Reference ablation totals (GFLOPs): random, reused, win+random, win+reused.
    rnd, reu, win, win_reu = 1401.2, 1490.2, 1484.1, 1573.1
    assert round(win - rnd, 1) == round(win_reu - reu, 1) == 82.9
    assert round(reu - rnd, 1) == round(win_reu - win, 1) == 89.0
    totals = [1245.1, 1573.1, 1901.1, 2557.0]
    slopes = [(totals[1] - totals[0]) / 3, (totals[2] - totals[1]) / 3, (totals[3] - totals[2]) / 6]
    assert all(abs(s - 109.3) < 0.05 for s in slopes)
    assert abs((1 - 1573.1 / 3555.1) * 100 - 55.75) < 0.01


def test_pipeline_formula():
    v, k = Variant.WIN_ATTN_REUSED_MLP, 6
    tot = flops_pipeline(N, SIG, v, k).total
    expect = 6 * flops_layer(N, SIG).total + flops_compressor(N, v, SIG) + 21 * flops_layer(N // 4, SIG).total
    assert tot == expect
    assert flops_pipeline(N, SIG).total == 27 * flops_layer(N, SIG).total


def test_pipeline_limit_k_to_L():
    v = Variant.WIN_ATTN_MLP
    near = flops_pipeline(N, SIG, v, 26).total
    expect = flops_pipeline(N, SIG).total + flops_compressor(N, v, SIG) - flops_layer(N, SIG).total + flops_layer(N // 4, SIG).total
    assert near == expect


def test_pipeline_k_bounds():
    with pytest.raises(ConfigError):
        flops_pipeline(N, SIG, Variant.AVG_POOL, 27)
    with pytest.raises(ConfigError):
        flops_pipeline(N, SIG, Variant.AVG_POOL, 0)


def test_reduction_band():
    r = pipeline_report(N, SIG, Variant.WIN_ATTN_REUSED_MLP, 6)
    assert 51 <= r.reduction_pct <= 61
    assert 0.39 <= r.breakdown.total / r.baseline.total <= 0.49
    blob = json.loads(r.to_json())
    assert blob["reduction_pct"] == pytest.approx(r.reduction_pct)
    assert "reduction" in r.to_text()


def test_breakdown_consistency():
    b = flops_pipeline(build_plan(ImageSpec(1344, 448), 9), SIG, Variant.WIN_ATTN_MLP, connector=ConnectorSpec())
    d = b.to_dict()
    assert d["total"] == sum(v for k, v in d.items() if k != "total")


def test_monotonicity():
    v = Variant.WIN_ATTN_REUSED_MLP
    ks = [flops_pipeline(N, SIG, v, k).total for k in range(1, 27)]
    assert all(a < b for a, b in zip(ks, ks[1:]))
    assert flops_pipeline(2048, SIG, v).total > flops_pipeline(1024, SIG, v).total
    assert flops_pipeline(N, SIG.replace(d_mlp=4400), v).total > flops_pipeline(N, SIG, v).total
    assert flops_pipeline(N, SIG.replace(n_layers=28), v).total > flops_pipeline(N, SIG, v).total


def test_sweep_affine():
    s = sweep_k(N, SIG, Variant.WIN_ATTN_REUSED_MLP, (3, 6, 9, 15))
    assert s.residual_rel < 1e-9
    assert s.layer_slope == flops_layer(N, SIG).total - flops_layer(N // 4, SIG).total
    assert abs(s.slope - s.layer_slope) / s.layer_slope < 1e-9
    diffs = [b - a for a, b in zip(s.totals, s.totals[1:])]
    assert diffs[0] == diffs[1] == 3 * s.layer_slope and diffs[2] == 6 * s.layer_slope


def test_baseline_connector():
    assert baseline_connector(ConnectorSpec()).ratio == 16
    assert baseline_connector(None) is None


def test_ge_vs_se_four_slices():
    image = ImageSpec(896, 896)
    cmp = compare_ge_se(image, 4 * 448 * 448, 4, SIG)
    assert cmp.se_plan.grid.count == 4 and len(cmp.se_plan.views) == 5
    assert cmp.ge_plan.total_tokens == 4 * 1024
    assert cmp.ge.attn_matmul * 5 == cmp.se.attn_matmul * 16
    assert cmp.se_quadratic_share < cmp.ge_quadratic_share


def test_ge_single_view_equals_se_minus_thumbnail():
    cmp = compare_ge_se(ImageSpec(448, 448), 448 * 448, 1, SIG)
    assert 2 * cmp.ge.total == cmp.se.total


def test_convention_validation():
    with pytest.raises(ConfigError):
        FlopsConvention(mac_factor=3)
