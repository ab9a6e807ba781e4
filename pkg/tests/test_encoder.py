import numpy as np
import pytest

from uhdvit.compressor import Variant, avg_pool_2x2, build_compressor
from uhdvit.encoder import (
    PRESETS,
    LayerWeights,
    ModelConfig,
    StemWeights,
    TokenSequence,
    encode,
    layer_forward,
    patch_embed,
    random_layers,
    random_stem,
)
from uhdvit.errors import ConfigError, DimensionError, GeometryError
from uhdvit.numerics import layer_norm, linear
from uhdvit.rng import gaussian
from uhdvit.slicing import ImageSpec, build_plan

TOY = PRESETS["toy"]


def test_presets():
    assert TOY.tokens_per_view == 16
    s = PRESETS["siglip2"]
    assert (s.d_model, s.n_layers, s.d_mlp, s.tokens_per_view, s.insertion_depth) == (1152, 27, 4304, 1024, 6)


@pytest.mark.parametrize(
    "over",
    [{"insertion_depth": 0}, {"insertion_depth": 4}, {"n_heads": 5}, {"view_px": 48}, {"view_px": 60}],
)
def test_config_validation(over):
    with pytest.raises(ConfigError):
        TOY.replace(**over)


def test_config_roundtrip_and_unknown_keys():
    assert ModelConfig.from_dict(TOY.to_dict()) == TOY
    with pytest.raises(ConfigError):
        ModelConfig.from_dict({**TOY.to_dict(), "bogus": 1})


def test_token_sequence_bookkeeping():
    x = TokenSequence(np.zeros((20, 3), np.float32), ((2, 2), (4, 4)))
    assert x.boundaries == [(0, 4), (4, 20)]
    assert x.view_grid(1).shape == (4, 4, 3)
    assert TokenSequence.concat(x.split()).tokens.tobytes() == x.tokens.tobytes()
    with pytest.raises(DimensionError):
        TokenSequence(np.zeros((5, 3), np.float32), ((2, 2),))


def test_patch_embed_zero():
    cfg = TOY
    stem = StemWeights(
        np.zeros((cfg.d_model, cfg.patch_dim), np.float32),
        np.zeros(cfg.d_model, np.float32),
        np.zeros((cfg.tokens_per_view, cfg.d_model), np.float32),
    )
    out = patch_embed([(4, 4)], stem, [np.zeros((16, cfg.patch_dim), np.float32)])
    assert np.all(out.tokens == 0)


def test_patch_embed_identity():
    cfg = ModelConfig(d_model=12, n_layers=2, n_heads=2, d_mlp=8, patch_px=2, view_px=8, insertion_depth=1)
    assert cfg.patch_dim == 12
    stem = StemWeights(np.eye(12, dtype=np.float32), np.zeros(12, np.float32), np.zeros((16, 12), np.float32))
    px = gaussian(0, "px", (16, 12), scale=1.0)
    assert np.array_equal(patch_embed([(4, 4)], stem, [px]).tokens, px)


def test_patch_embed_identical_views():
    stem = random_stem(TOY, 1)
    px = gaussian(0, "px", (16, TOY.patch_dim), scale=1.0)
    out = patch_embed([(4, 4), (4, 4)], stem, [px, px])
    assert out.view(0).tobytes() == out.view(1).tobytes()


def test_patch_embed_shape_mismatch():
    with pytest.raises(ConfigError):
        patch_embed([(4, 4)], random_stem(TOY, 1), [np.zeros((15, TOY.patch_dim), np.float32)])


def test_zero_layer_is_identity():
    x = TokenSequence(gaussian(0, "x", (16, 32), scale=1.0), ((4, 4),))
    out = layer_forward(x, LayerWeights.zeros(TOY), x.block_mask(), 4)
    assert np.array_equal(out.tokens, x.tokens)


def test_single_token_attention_ignores_qk():
    cfg = TOY
    (w,) = random_layers(cfg.replace(n_layers=2, insertion_depth=1), 3, np.float64)[:1]
    x = gaussian(0, "x", (1, 32), scale=1.0, dtype=np.float64)
    seq = TokenSequence(x, ((1, 1),))
    out = layer_forward(seq, w, seq.block_mask(), 4).tokens
    a = w.attn
    y = x + linear(linear(layer_norm(x, w.ln1_g, w.ln1_b), a.wv, a.bv), a.wo, a.bo)
    expected = y + w.ffn(y)
    np.testing.assert_allclose(out, expected, rtol=1e-12, atol=1e-12)


def _toy_input(plan, seed=0):
    return TokenSequence(gaussian(seed, "x", (plan.total_tokens, TOY.d_model), scale=1.0), plan.token_grids)


def test_encode_without_compressor():
    plan = build_plan(ImageSpec(64, 64), 1, 64, 16)
    x = _toy_input(plan)
    y = encode(x, TOY, random_layers(TOY, 1))
    assert len(y) == len(x) and y.grids == x.grids


def test_encode_with_compressor_siglip_geometry():
    # Only geometry at full size: 2 views of 32x32 tokens with a narrow stand-in model.
    cfg = ModelConfig(d_model=8, n_layers=2, n_heads=2, d_mlp=8, patch_px=14, view_px=448, insertion_depth=1)
    plan = build_plan(ImageSpec(448, 448), 1)
    x = TokenSequence(gaussian(0, "x", (2048, 8), scale=1.0), plan.token_grids)
    layers = random_layers(cfg, 1)
    y = encode(x, cfg, layers, build_compressor(Variant.AVG_POOL, layers, cfg, 1))
    assert len(y) == 512 and y.grids == ((16, 16), (16, 16))


def test_encode_zero_layers_avg_pool():
    cfg = TOY.replace(n_layers=2, insertion_depth=1)
    layers = [LayerWeights.zeros(TOY) for _ in range(2)]
    x = TokenSequence(gaussian(0, "x", (16, 32), scale=1.0), ((4, 4),))
    comp = build_compressor(Variant.AVG_POOL, layers, cfg, 0)
    y = encode(x, cfg, layers, comp)
    assert np.array_equal(y.tokens, avg_pool_2x2(x.view_grid(0)).reshape(4, 32))


def test_encode_odd_grid_raises():
    cfg = TOY
    layers = random_layers(cfg, 1)
    x = TokenSequence(gaussian(0, "x", (9, 32), scale=1.0), ((3, 3),))
    with pytest.raises(GeometryError):
        encode(x, cfg, layers, build_compressor(Variant.AVG_POOL, layers, cfg, 1))


def test_encode_skip_thumbnail():
    plan = build_plan(ImageSpec(64, 64), 1, 64, 16)
    layers = random_layers(TOY, 1)
    comp = build_compressor(Variant.WIN_ATTN_REUSED_MLP, layers, TOY, 1, compress_thumbnail=False)
    x = _toy_input(plan)
    y = encode(x, TOY, layers, comp)
    assert y.grids == ((4, 4), (2, 2))
    assert encode(x, TOY, layers, comp, threads=2).tokens.tobytes() == y.tokens.tobytes()


def test_encode_layer_count_checked():
    x = TokenSequence(np.zeros((16, 32), np.float32), ((4, 4),))
    with pytest.raises(ConfigError):
        encode(x, TOY, random_layers(TOY, 1)[:3])
