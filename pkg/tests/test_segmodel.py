import numpy as np
import pytest
import torch
import torch.nn as nn

from conftest import micro_encoder_config
from neuroseg3d.metrics import dice
from neuroseg3d.segmodel import (
    SegConfig,
    SegModel,
    build_seg_model,
    sliding_window_infer,
    soft_dice_loss,
)
from neuroseg3d.swin3d import ConfigError
from neuroseg3d.volumes import ValidationError


def micro_seg_model(in_channels=1, out_channels=1, dropout=0.0):
    torch.manual_seed(0)
    return build_seg_model(
        micro_encoder_config(in_channels=in_channels),
        SegConfig(out_channels=out_channels, dropout_rate=dropout),
    )


class _ConstantModel(nn.Module):
    """Stub emitting a constant probability; counts forward calls."""

    def __init__(self, value=0.25, channels=1):
        super().__init__()
        self.value = value
        self.out_channels = channels
        self.calls = 0

    def forward(self, x):
        self.calls += 1
        b, _, d, h, w = x.shape
        return torch.full((b, self.out_channels, d, h, w), self.value)


class TestSegModel:
    def test_output_shape_and_range_multiclass(self):
        model = micro_seg_model(in_channels=2, out_channels=3)
        out = model(torch.randn(1, 2, 16, 16, 16))
        assert out.shape == (1, 3, 16, 16, 16)
        assert out.min() > 0.0 and out.max() < 1.0

    def test_output_shape_single_class(self):
        model = micro_seg_model(in_channels=1, out_channels=1)
        out = model(torch.randn(2, 1, 16, 16, 16))
        assert out.shape == (2, 1, 16, 16, 16)

    def test_decoder_feature_length_validated(self):
        with pytest.raises(ConfigError):
            SegModel(
                __import__("neuroseg3d.swin3d", fromlist=["build_encoder"]).build_encoder(
                    micro_encoder_config()
                ),
                SegConfig(out_channels=1, decoder_features=(8, 16)),
            )

    def test_dropout_validated(self):
        with pytest.raises(ConfigError):
            SegConfig(dropout_rate=1.0)

    def test_frozen_encoder_step_only_moves_decoder(self):
        model = micro_seg_model(out_channels=1)
        model.encoder.requires_grad_(False)
        enc_before = {n: p.clone() for n, p in model.encoder.named_parameters()}
        dec_before = {n: p.clone() for n, p in model.stage1.named_parameters()}
        x = torch.randn(1, 1, 16, 16, 16)
        y = (torch.rand(1, 1, 16, 16, 16) < 0.3).float()
        out_before = model(x).detach()

        opt = torch.optim.SGD([p for p in model.parameters() if p.requires_grad], lr=0.5)
        loss = soft_dice_loss(model(x), y)
        loss.backward()
        opt.step()

        for n, p in model.encoder.named_parameters():
            assert torch.equal(p, enc_before[n])
        assert any(not torch.equal(p, dec_before[n]) for n, p in model.stage1.named_parameters())
        assert not torch.equal(model(x).detach(), out_before)


class TestSoftDiceLoss:
    def test_perfect_prediction(self):
        t = (torch.rand(1, 8, 8, 8) < 0.4).float()
        assert soft_dice_loss(t, t).item() == pytest.approx(0.0, abs=1e-4)

    def test_total_mismatch(self):
        t = (torch.rand(1, 8, 8, 8) < 0.5).float()
        assert soft_dice_loss(1.0 - t, t).item() == pytest.approx(1.0, abs=1e-4)

    def test_half_constant_formula(self):
        # pred 0.5 everywhere, target half ones: sums p=4, t=4, pt=2
        target = torch.zeros(1, 2, 2, 2)
        target[0, 0] = 1.0
        pred = torch.full((1, 2, 2, 2), 0.5)
        expected = 1.0 - (2 * 2.0 + 1e-5) / (4.0 + 4.0 + 1e-5)
        assert soft_dice_loss(pred, target).item() == pytest.approx(expected, abs=1e-6)
        assert expected == pytest.approx(0.5, abs=1e-5)

    def test_range(self):
        g = torch.Generator().manual_seed(0)
        for _ in range(10):
            p = torch.rand(2, 3, 4, 4, 4, generator=g)
            t = (torch.rand(2, 3, 4, 4, 4, generator=g) < 0.5).float()
            val = soft_dice_loss(p, t).item()
            assert 0.0 <= val <= 1.0

    def test_complement_symmetry_on_balanced_masks(self):
        # with |P| = |G| = half the volume, complementing both sides keeps
        # the loss identical up to eps
        g = torch.Generator().manual_seed(7)
        t = torch.zeros(1, 2, 2, 2)
        t[0, 0] = 1.0
        for _ in range(5):
            p = torch.zeros(8)
            p[torch.randperm(8, generator=g)[:4]] = 1.0
            p = p.view(1, 2, 2, 2)
            a = soft_dice_loss(p, t).item()
            b = soft_dice_loss(1 - p, 1 - t).item()
            assert a == pytest.approx(b, abs=1e-5)

    def test_shape_mismatch(self):
        with pytest.raises(ValidationError):
            soft_dice_loss(torch.rand(1, 4, 4, 4), torch.rand(1, 4, 4, 5))


class TestSlidingWindow:
    def test_single_window_equals_direct_forward(self):
        model = micro_seg_model()
        vol = np.random.default_rng(0).normal(size=(1, 16, 16, 16)).astype(np.float32)
        probs = sliding_window_infer(model, vol, roi=(16, 16, 16), overlap=0.5)
        model.eval()
        with torch.no_grad():
            direct = model(torch.from_numpy(vol)[None])[0].numpy()
        assert probs.shape == (1, 16, 16, 16)
        assert np.allclose(probs, direct, atol=1e-6)

    def test_window_count_128_roi_96_overlap_half(self):
        stub = _ConstantModel()
        vol = np.zeros((1, 128, 128, 128), dtype=np.float32)
        sliding_window_infer(stub, vol, roi=(96, 96, 96), overlap=0.5)
        assert stub.calls == 8  # 2 start positions per axis: {0, 32}

    def test_constant_model_average_is_constant(self):
        stub = _ConstantModel(value=0.625)
        vol = np.zeros((1, 40, 40, 40), dtype=np.float32)
        probs = sliding_window_infer(stub, vol, roi=(16, 16, 16), overlap=0.25)
        assert probs.shape == (1, 40, 40, 40)
        assert np.allclose(probs, 0.625, atol=1e-7)

    def test_volume_smaller_than_roi_padded_and_cropped(self):
        stub = _ConstantModel(value=0.5, channels=2)
        vol = np.zeros((1, 10, 12, 9), dtype=np.float32)
        probs = sliding_window_infer(stub, vol, roi=(16, 16, 16), overlap=0.0)
        assert probs.shape == (2, 10, 12, 9)

    def test_overlap_validation(self):
        with pytest.raises(ValidationError):
            sliding_window_infer(_ConstantModel(), np.zeros((1, 8, 8, 8), np.float32),
                                 roi=(8, 8, 8), overlap=1.0)

    def test_training_mode_restored(self):
        model = micro_seg_model(dropout=0.1)
        model.train()
        sliding_window_infer(model, np.zeros((1, 16, 16, 16), np.float32), roi=(16, 16, 16))
        assert model.training


class TestCrossModuleConsistency:
    def test_thresholded_perfect_prediction_gives_dice_one(self):
        rng = np.random.default_rng(1)
        gt = (rng.random((8, 8, 8)) < 0.3).astype(np.uint8)
        probs = gt.astype(np.float32)  # a perfect probabilistic prediction
        assert dice((probs >= 0.5).astype(np.uint8), gt) == 1.0
