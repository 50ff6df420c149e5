import math

import numpy as np
import pytest

from swinmamba import tensor as T
from swinmamba.network import (PRESETS, ModelConfig, SWinMambaBlock, build_model, model_forward, param_count,
                               segmentation_loss, upsample2)
from swinmamba.swtoken import X_EXTEND, Y_EXTEND
from swinmamba.tensor import Tensor

SMALL = dict(stages=2, base_channels=4, L=3, s=4, input_size=16)


def small(preset="full", **kw):
    return build_model(ModelConfig.from_preset(preset, **{**SMALL, **kw}))


def mixer_count(dim, n, expand=2, width=4):
    di, r = expand * dim, math.ceil(dim / 16)
    return (dim * 2 * di + width * di + di + di * (r + 2 * n) + r * di + di + di * n + di + di * dim)


def conv_count(cin, cout, k):
    return cout * cin * k * k + cout


def hand_count(cfg: ModelConfig) -> int:
    ch = cfg.channels
    total = conv_count(1, ch(0), 3) + conv_count(ch(0), 1, 1)
    for i in range(cfg.stages):
        if i:
            total += conv_count(ch(i - 1), ch(i), 3)
        total += conv_count(ch(i), ch(i), 3)
        if cfg.use_bam:
            total += 2 * ch(i)  # LayerNorm
            total += 2 * mixer_count(ch(i), cfg.state_dim)
            if cfg.use_swtoken:
                total += cfg.L * ch(i) * cfg.s * cfg.s + cfg.L
            if cfg.use_freq:
                total += 2 * mixer_count(2 * ch(i), cfg.state_dim) + 2 * 2 * ch(i)  # BAM pair, LayerNorm
            if cfg.use_sffu:
                total += 2 * ch(i) * (ch(i) // cfg.reduction) + 2 * cfg.sa_kernel ** 2
    for i in range(cfg.stages - 1):
        total += conv_count(ch(i + 1) + ch(i), ch(i), 3)
    return total


# ---------------------------------------------------------------- config

def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(input_size=60)
    with pytest.raises(ValueError):
        ModelConfig(use_bam=False)
    with pytest.raises(ValueError):
        ModelConfig(use_freq=False)
    with pytest.raises(ValueError):
        ModelConfig(base_channels=2)
    with pytest.raises(ValueError):
        ModelConfig.from_preset("m9")
    with pytest.raises(ValueError):
        ModelConfig.from_dict({"depth": 3})


def test_config_dict_round_trip():
    cfg = ModelConfig.from_preset("m2", **SMALL)
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg


def test_stage_extents_and_channels():
    model = build_model(ModelConfig())
    assert model.stage_extents() == [64, 32, 16, 8]
    assert [model.config.channels(i) for i in range(4)] == [16, 32, 64, 128]


def test_orientation_alternates_per_stage():
    model = small(stages=2)
    assert model.layers["enc0.block"].tok_cfg.orientation == X_EXTEND
    assert model.layers["enc1.block"].tok_cfg.orientation == Y_EXTEND


# ---------------------------------------------------------------- parameters

@pytest.mark.parametrize("preset", sorted(PRESETS))
def test_param_count_matches_hand_sum(preset):
    cfg = ModelConfig.from_preset(preset)
    assert param_count(build_model(cfg)) == hand_count(cfg)


def test_param_count_strictly_increases_along_the_ablation():
    counts = [param_count(build_model(ModelConfig.from_preset(p))) for p in ("baseline", "m1", "m2", "m3", "full")]
    assert all(a < b for a, b in zip(counts, counts[1:]))


def test_baseline_has_no_sequence_parameters():
    names = build_model(ModelConfig.from_preset("baseline")).params
    assert not any(".block." in k for k in names)
    m1 = build_model(ModelConfig.from_preset("m1")).params
    assert any(".bam." in k for k in m1) and not any(".tok." in k for k in m1)


def test_build_is_deterministic():
    a, b = small(), small()
    for k in a.params:
        np.testing.assert_array_equal(a.params[k].data, b.params[k].data)
    c = small(seed=1)
    assert any(not np.array_equal(a.params[k].data, c.params[k].data) for k in a.params)


# ---------------------------------------------------------------- forward

@pytest.mark.parametrize("preset", sorted(PRESETS))
def test_forward_preserves_image_shape(preset, rng):
    model = small(preset)
    img = rng.uniform(size=(1, 16, 16))
    out = model_forward(model, img)
    assert out.shape == (1, 16, 16)
    np.testing.assert_array_equal(model_forward(model, img).data, out.data)


def test_forward_accepts_any_divisible_extent(rng):
    model = small()
    assert model(Tensor(rng.uniform(size=(1, 8, 24)))).shape == (1, 8, 24)
    with pytest.raises(ValueError):
        model(Tensor(np.zeros((1, 12, 16))))
    with pytest.raises(ValueError):
        model(Tensor(np.zeros((2, 16, 16))))


def test_zero_head_gives_zero_logits(rng):
    model = small()
    model.params["head.w"].data[:] = 0
    model.params["head.b"].data[:] = 0
    assert np.all(model(Tensor(rng.uniform(size=(1, 16, 16)))).data == 0)


def test_block_input_shapes(rng):
    model = small()
    img = Tensor(rng.uniform(size=(1, 16, 16)))
    assert model.block_input(img, 0).shape == (4, 16, 16)
    assert model.block_input(img, 1).shape == (8, 8, 8)
    with pytest.raises(ValueError):
        model.block_input(img, 2)


def test_upsample2_repeats_pixels():
    x = Tensor(np.arange(4.0).reshape(1, 2, 2))
    np.testing.assert_array_equal(upsample2(x).data[0], [[0, 0, 1, 1], [0, 0, 1, 1], [2, 2, 3, 3], [2, 2, 3, 3]])


def test_straight_string_block_sees_only_its_footprint(rng):
    # zero offsets: the cell at (8, 8) reads rows 8-alpha*c .. 8+alpha*c+s-1, columns 8..8+s-1
    cfg = ModelConfig.from_preset("m2", **SMALL)
    block = SWinMambaBlock(2, 0, cfg, rng)
    block.tokenizer.params["off.w"].data[:] = 0
    F = rng.normal(size=(2, 16, 16))
    base = block(Tensor(F)).data[:, 8:12, 8:12]
    rows = range(8 - 2, 8 + 2 + 4)
    for i in range(16):
        for j in range(16):
            moved = F.copy()
            moved[0, i, j] += 1.0  # a shift shared by all channels would vanish in the LayerNorm
            out = block(Tensor(moved)).data[:, 8:12, 8:12]
            inside = i in rows and 8 <= j < 12
            assert np.array_equal(out, base) != inside, (i, j)


def test_gradient_reaches_offset_predictor(rng):
    model = small()
    loss = segmentation_loss(model(Tensor(rng.uniform(size=(1, 16, 16)))), rng.integers(0, 2, (1, 16, 16)))
    loss.backward()
    for stage in (0, 1):
        assert np.abs(model.params[f"enc{stage}.block.tok.off.w"].grad).max() > 0
    model.zero_grad()
    assert all(p.grad is None or not np.any(p.grad) for p in model.params.values())


# ---------------------------------------------------------------- loss

def test_loss_closed_forms():
    n = 16
    z = Tensor(np.zeros((1, 4, 4)))
    assert segmentation_loss(z, np.zeros((1, 4, 4))).item() == pytest.approx(math.log(2) + 1 - 1 / (n / 2 + 1))
    ones = segmentation_loss(z, np.ones((1, 4, 4))).item()
    assert ones == pytest.approx(math.log(2) + 1 - (n + 1) / (n / 2 + n + 1))


def test_loss_is_small_for_confident_correct_logits():
    mask = np.zeros((1, 4, 4))
    mask[0, 1:3, 1:3] = 1
    loss = segmentation_loss(Tensor((2 * mask - 1) * 30), mask).item()
    assert 0 <= loss < 1e-10


def test_loss_rejects_bad_masks():
    z = Tensor(np.zeros((1, 4, 4)))
    with pytest.raises(ValueError):
        segmentation_loss(z, np.full((1, 4, 4), 0.5))
    with pytest.raises(ValueError):
        segmentation_loss(z, np.zeros((1, 4, 2)))


def test_nonfinite_input_names_the_layer():
    model = small()
    img = np.zeros((1, 16, 16))
    img[0, 3, 3] = np.inf
    with pytest.raises(T.NonFiniteError, match="layer"):
        model(Tensor(img))
