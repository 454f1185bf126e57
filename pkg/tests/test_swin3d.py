import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from conftest import micro_encoder_config
from neuroseg3d.swin3d import (
    ConfigError,
    EncoderConfig,
    ShapeError,
    build_encoder,
    compute_attention_mask,
    count_parameters,
    window_partition,
    window_reverse,
)

LEVEL3_BLOCK_PARAMS = 471_228


class TestEncoderConfig:
    def test_variants(self):
        assert EncoderConfig.variant("tiny").depths == (2, 2, 2, 2)
        assert EncoderConfig.variant("small").depths == (2, 2, 6, 2)
        assert EncoderConfig.variant("big").depths == (2, 2, 18, 2)

    def test_level_dims(self):
        cfg = EncoderConfig.variant("tiny")
        assert cfg.level_dims == (48, 96, 192, 384)
        assert cfg.bottleneck_dim == 768

    def test_invalid_lengths(self):
        with pytest.raises(ConfigError):
            EncoderConfig(depths=(2, 2, 2), heads=(3, 6, 12, 24))
        with pytest.raises(ConfigError):
            EncoderConfig(depths=(2, 2, 2, 2), heads=(3, 6))

    def test_unknown_variant(self):
        with pytest.raises(ConfigError):
            EncoderConfig.variant("huge")

    def test_head_divisibility(self):
        with pytest.raises(ConfigError):
            EncoderConfig(embed_dim=8, heads=(3, 6, 12, 24))


class TestWindows:
    def test_partition_counts(self):
        x = torch.randn(1, 4, 4, 4, 5)
        windows = window_partition(x, (2, 2, 2))
        assert windows.shape == (8, 8, 5)

    def test_window_equal_to_grid(self):
        x = torch.randn(2, 4, 4, 4, 3)
        windows = window_partition(x, (4, 4, 4))
        assert windows.shape == (2, 64, 3)

    def test_round_trip_on_14_cube(self):
        x = torch.randn(1, 14, 14, 14, 6)
        back = window_reverse(window_partition(x, (7, 7, 7)), (7, 7, 7), (14, 14, 14))
        assert torch.equal(back, x)

    def test_non_multiple_raises(self):
        with pytest.raises(ShapeError):
            window_partition(torch.randn(1, 5, 4, 4, 2), (2, 2, 2))

    @settings(max_examples=20, deadline=None)
    @given(
        mult=st.tuples(st.integers(1, 3), st.integers(1, 3), st.integers(1, 3)),
        window=st.tuples(st.integers(1, 4), st.integers(1, 4), st.integers(1, 4)),
        seed=st.integers(0, 100),
    )
    def test_round_trip_property(self, mult, window, seed):
        g = torch.Generator().manual_seed(seed)
        dims = tuple(m * w for m, w in zip(mult, window))
        x = torch.randn(2, *dims, 3, generator=g)
        back = window_reverse(window_partition(x, window), window, dims)
        assert torch.equal(back, x)


def _region_ids_1d(length, window, shift):
    """Oracle: region id per position from the three-slice decomposition."""
    ids = np.zeros(length, dtype=int)
    if shift == 0:
        return ids
    ids[: length - window] = 0
    ids[length - window : length - shift] = 1
    ids[length - shift :] = 2
    return ids


class TestAttentionMask:
    def test_zero_shift_is_all_zero(self):
        mask = compute_attention_mask((4, 4, 4), (2, 2, 2), (0, 0, 0))
        assert mask.shape == (8, 8, 8)
        assert mask.abs().max() == 0.0

    def test_1d_analogue_matches_region_oracle(self):
        mask = compute_attention_mask((4, 1, 1), (2, 1, 1), (1, 0, 0))
        ids = _region_ids_1d(4, 2, 1)
        # window 0 covers positions (0, 1); window 1 covers (2, 3)
        for w, positions in enumerate([(0, 1), (2, 3)]):
            for a, pa in enumerate(positions):
                for b, pb in enumerate(positions):
                    expected = 0.0 if ids[pa] == ids[pb] else -100.0
                    assert mask[w, a, b].item() == expected
        assert mask[1].abs().sum() > 0  # the seam window does mask pairs

    def test_masked_entries_have_negligible_softmax_weight(self):
        mask = compute_attention_mask((4, 4, 2), (2, 2, 2), (1, 1, 1))
        logits = torch.zeros_like(mask) + mask
        weights = logits.softmax(dim=-1)
        assert torch.allclose(weights.sum(-1), torch.ones_like(weights.sum(-1)), atol=1e-6)
        assert weights[mask != 0].max() < 1e-6

    def test_invalid_shift(self):
        with pytest.raises(ShapeError):
            compute_attention_mask((4, 4, 4), (2, 2, 2), (2, 0, 0))


class TestParameterCounts:
    def test_level3_block_cost(self):
        base = build_encoder(EncoderConfig(depths=(2, 2, 2, 2), in_channels=1))
        plus_one = build_encoder(EncoderConfig(depths=(2, 2, 3, 2), in_channels=1))
        assert count_parameters(plus_one) - count_parameters(base) == LEVEL3_BLOCK_PARAMS

    def test_variant_deltas(self):
        counts = {
            name: count_parameters(build_encoder(EncoderConfig.variant(name, in_channels=1)))
            for name in ("tiny", "small", "big")
        }
        assert counts["small"] - counts["tiny"] == 4 * LEVEL3_BLOCK_PARAMS == 1_884_912
        assert counts["big"] - counts["small"] == 12 * LEVEL3_BLOCK_PARAMS == 5_654_736
        assert (counts["big"] - counts["small"]) % (counts["small"] - counts["tiny"]) == 0
        assert (counts["big"] - counts["small"]) // (counts["small"] - counts["tiny"]) == 3

    def test_deltas_independent_of_input_channels(self):
        tiny2 = count_parameters(build_encoder(EncoderConfig.variant("tiny", in_channels=2)))
        small2 = count_parameters(build_encoder(EncoderConfig.variant("small", in_channels=2)))
        assert small2 - tiny2 == 1_884_912


class TestForward:
    def test_micro_level_shapes(self):
        cfg = micro_encoder_config(in_channels=2)
        encoder = build_encoder(cfg)
        levels, bottleneck = encoder(torch.randn(2, 2, 16, 16, 16))
        dims = [8, 16, 32, 64]
        spatial = [8, 4, 2, 1]
        for lvl, d, s in zip(levels, dims, spatial):
            assert lvl.shape == (2, d, s, s, s)
        assert bottleneck.shape == (2, 128, 1, 1, 1)

    def test_batch_dimension_preserved(self):
        encoder = build_encoder(micro_encoder_config())
        for b in (1, 3):
            levels, bottleneck = encoder(torch.randn(b, 1, 16, 16, 16))
            assert all(lvl.shape[0] == b for lvl in levels)
            assert bottleneck.shape[0] == b

    def test_indivisible_input_raises(self):
        encoder = build_encoder(micro_encoder_config())
        with pytest.raises(ShapeError, match="divisible"):
            encoder(torch.randn(1, 1, 17, 16, 16))

    def test_non_cubic_input(self):
        encoder = build_encoder(micro_encoder_config())
        levels, bottleneck = encoder(torch.randn(1, 1, 16, 32, 16))
        assert levels[0].shape == (1, 8, 8, 16, 8)

    def test_shifted_blocks_change_with_depth2(self):
        # depth 2 exercises the shifted branch; output must stay finite
        cfg = EncoderConfig(
            in_channels=1, embed_dim=8, depths=(2, 1, 1, 1), heads=(2, 2, 4, 8),
            window=(2, 2, 2), variant_name="tiny",
        )
        encoder = build_encoder(cfg)
        levels, bottleneck = encoder(torch.randn(1, 1, 16, 16, 16))
        assert torch.isfinite(bottleneck).all()

    def test_window7_padding_path(self):
        # grid 8 is not a multiple of window 7: pad-and-mask path
        cfg = EncoderConfig(
            in_channels=1, embed_dim=8, depths=(2, 1, 1, 1), heads=(2, 2, 4, 8),
            window=(7, 7, 7), variant_name="tiny",
        )
        encoder = build_encoder(cfg)
        levels, _ = encoder(torch.randn(1, 1, 16, 16, 16))
        assert levels[0].shape == (1, 8, 8, 8, 8)
        assert torch.isfinite(levels[0]).all()
