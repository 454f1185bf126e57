import json
import zipfile

import numpy as np
import pytest
import torch

from conftest import micro_encoder_config
from neuroseg3d.segmodel import SegConfig, build_seg_model
from neuroseg3d.sslheads import SSLModel
from neuroseg3d.swin3d import EncoderConfig, build_encoder
from neuroseg3d.transfer import (
    CheckpointError,
    expand_input_channels,
    load_checkpoint,
    restore_model,
    restrict_input_channels,
    save_checkpoint,
    transfer_encoder,
    transfer_matching,
)
from neuroseg3d.volumes import ValidationError


def micro_ssl_model(in_channels=2, seed=0):
    torch.manual_seed(seed)
    return SSLModel(build_encoder(micro_encoder_config(in_channels=in_channels)))


class TestCheckpointRoundTrip:
    def test_bit_exact(self, tmp_path):
        model = micro_ssl_model()
        path = tmp_path / "m.ckpt"
        save_checkpoint(model, {"config": {"note": "x"}, "step": 12, "seed": 3}, path)
        ckpt = load_checkpoint(path)
        assert ckpt.step == 12 and ckpt.seed == 3 and ckpt.format_version == 1
        for name, p in model.named_parameters():
            assert np.array_equal(ckpt.weights[name], p.detach().numpy())

    def test_restore_into_fresh_model(self, tmp_path):
        model = micro_ssl_model(seed=0)
        path = tmp_path / "m.ckpt"
        save_checkpoint(model, {}, path)
        other = micro_ssl_model(seed=99)
        restore_model(other, load_checkpoint(path))
        for (_, a), (_, b) in zip(model.named_parameters(), other.named_parameters()):
            assert torch.equal(a, b)

    def test_identical_state_gives_identical_bytes(self, tmp_path):
        model = micro_ssl_model()
        save_checkpoint(model, {"step": 1}, tmp_path / "a.ckpt")
        save_checkpoint(model, {"step": 1}, tmp_path / "b.ckpt")
        assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()

    def test_truncated_archive(self, tmp_path):
        model = micro_ssl_model()
        path = tmp_path / "m.ckpt"
        save_checkpoint(model, {}, path)
        raw = path.read_bytes()
        path.write_bytes(raw[: len(raw) // 3])
        with pytest.raises(CheckpointError, match="corrupt"):
            load_checkpoint(path)

    def test_unknown_version(self, tmp_path):
        model = micro_ssl_model()
        path = tmp_path / "m.ckpt"
        save_checkpoint(model, {}, path)
        with zipfile.ZipFile(path) as zf:
            manifest = json.loads(zf.read("manifest.json"))
            blob = zf.read("weights.bin")
        manifest["format_version"] = 99
        with zipfile.ZipFile(path, "w") as zf:
            zf.writestr("manifest.json", json.dumps(manifest))
            zf.writestr("weights.bin", blob)
        with pytest.raises(CheckpointError, match="version"):
            load_checkpoint(path)

    def test_missing_tensor_names_offender(self, tmp_path):
        model = micro_ssl_model()
        path = tmp_path / "m.ckpt"
        save_checkpoint(model, {}, path)
        ckpt = load_checkpoint(path)
        del ckpt.weights["heads.rotation_head.bias"]
        with pytest.raises(CheckpointError, match="heads.rotation_head.bias"):
            restore_model(model, ckpt)

    def test_shape_mismatch_names_offender(self, tmp_path):
        model = micro_ssl_model()
        path = tmp_path / "m.ckpt"
        save_checkpoint(model, {}, path)
        ckpt = load_checkpoint(path)
        ckpt.weights["heads.rotation_head.bias"] = np.zeros(7, dtype=np.float32)
        with pytest.raises(CheckpointError, match="heads.rotation_head.bias"):
            restore_model(model, ckpt)

    def test_not_a_checkpoint(self, tmp_path):
        path = tmp_path / "x.ckpt"
        path.write_bytes(b"not a zip at all")
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "nope.ckpt")


class TestTransferEncoder:
    def test_encoder_copied_heads_fresh(self, tmp_path):
        source = micro_ssl_model(seed=1)
        path = tmp_path / "s.ckpt"
        save_checkpoint(source, {}, path)
        ckpt = load_checkpoint(path)

        torch.manual_seed(50)
        target = build_seg_model(micro_encoder_config(in_channels=2), SegConfig(out_channels=1))
        decoder_before = {n: p.clone() for n, p in target.named_parameters()
                          if not n.startswith("encoder.")}
        report = transfer_encoder(ckpt, target, strict_encoder=True)

        for name, p in target.encoder.named_parameters():
            assert np.array_equal(p.detach().numpy(), ckpt.weights[f"encoder.{name}"])
        for name, p in target.named_parameters():
            if not name.startswith("encoder."):
                assert torch.equal(p, decoder_before[name])
        assert set(report.skipped) == {n for n in ckpt.weights if not n.startswith("encoder.")}
        assert len(report.loaded) == sum(1 for _ in target.encoder.named_parameters())

    def test_variant_mismatch_strict_raises(self, tmp_path):
        tiny = SSLModel(build_encoder(EncoderConfig.variant("tiny", in_channels=1, embed_dim=16,
                                                            heads=(1, 2, 4, 8), window=(2, 2, 2))))
        path = tmp_path / "tiny.ckpt"
        save_checkpoint(tiny, {}, path)
        big = SSLModel(build_encoder(EncoderConfig.variant("big", in_channels=1, embed_dim=16,
                                                           heads=(1, 2, 4, 8), window=(2, 2, 2))))
        with pytest.raises(CheckpointError):
            transfer_encoder(load_checkpoint(path), big, strict_encoder=True)

    def test_non_strict_collects_missing(self, tmp_path):
        tiny = SSLModel(build_encoder(EncoderConfig.variant("tiny", in_channels=1, embed_dim=16,
                                                            heads=(1, 2, 4, 8), window=(2, 2, 2))))
        path = tmp_path / "tiny.ckpt"
        save_checkpoint(tiny, {}, path)
        big = SSLModel(build_encoder(EncoderConfig.variant("big", in_channels=1, embed_dim=16,
                                                           heads=(1, 2, 4, 8), window=(2, 2, 2))))
        report = transfer_encoder(load_checkpoint(path), big, strict_encoder=False)
        assert report.missing  # the extra level-3 blocks have no source tensors
        assert report.loaded

    def test_transfer_matching_heads(self, tmp_path):
        source = micro_ssl_model(seed=2)
        path = tmp_path / "s.ckpt"
        save_checkpoint(source, {}, path)
        target = micro_ssl_model(seed=77)
        report = transfer_matching(load_checkpoint(path), target)
        assert not report.skipped
        for (_, a), (_, b) in zip(source.named_parameters(), target.named_parameters()):
            assert torch.equal(a, b)


class TestChannelExpansion:
    def test_zero_fed_new_channels_preserve_outputs(self):
        model = micro_ssl_model(in_channels=2)
        x2 = torch.randn(1, 2, 16, 16, 16)
        model.eval()
        with torch.no_grad():
            before = model(x2)
        expand_input_channels(model, 4, init_seed=7)
        x4 = torch.cat([x2, torch.zeros(1, 2, 16, 16, 16)], dim=1)
        with torch.no_grad():
            after = model(x4)
        assert torch.allclose(before.reconstruction, after.reconstruction, atol=1e-6)
        assert torch.allclose(before.rotation_logits, after.rotation_logits, atol=1e-6)
        assert torch.allclose(before.embedding, after.embedding, atol=1e-6)

    def test_old_slices_bit_equal(self):
        model = micro_ssl_model(in_channels=2)
        old = model.encoder.patch_embed.proj.weight.detach().clone()
        old_bias = model.encoder.patch_embed.proj.bias.detach().clone()
        expand_input_channels(model, 5, init_seed=0)
        new = model.encoder.patch_embed.proj.weight.detach()
        assert torch.equal(new[:, :2], old)
        assert torch.equal(model.encoder.patch_embed.proj.bias.detach(), old_bias)
        assert model.encoder.config.in_channels == 5

    def test_new_slice_kaiming_statistics(self):
        # enough new weights (>= 1e4) for a stable std estimate
        torch.manual_seed(0)
        model = SSLModel(build_encoder(EncoderConfig(
            in_channels=2, embed_dim=48, depths=(1, 1, 1, 1), heads=(2, 2, 4, 8),
            window=(2, 2, 2), variant_name="tiny",
        )))
        expand_input_channels(model, 32, init_seed=123)
        new_slice = model.encoder.patch_embed.proj.weight.detach()[:, 2:]
        assert new_slice.numel() >= 10_000
        fan_in = 30 * 8
        expected_std = (2.0 / fan_in) ** 0.5
        assert abs(new_slice.std().item() - expected_std) / expected_std < 0.10
        assert abs(new_slice.mean().item()) < 0.1 * expected_std

    def test_expansion_deterministic_per_seed(self):
        a = micro_ssl_model(in_channels=2)
        b = micro_ssl_model(in_channels=2)
        expand_input_channels(a, 4, init_seed=5)
        expand_input_channels(b, 4, init_seed=5)
        assert torch.equal(a.encoder.patch_embed.proj.weight, b.encoder.patch_embed.proj.weight)

    def test_shrinking_rejected(self):
        model = micro_ssl_model(in_channels=2)
        with pytest.raises(ValidationError):
            expand_input_channels(model, 2)


class TestChannelRestriction:
    def test_keep_first_equals_zeroed_original(self):
        model = micro_ssl_model(in_channels=2)
        x = torch.randn(1, 1, 16, 16, 16)
        model.eval()
        with torch.no_grad():
            original = model(torch.cat([x, torch.zeros_like(x)], dim=1))
        restrict_input_channels(model, [0])
        with torch.no_grad():
            restricted = model(x)
        assert torch.allclose(original.reconstruction, restricted.reconstruction, atol=1e-6)
        assert torch.allclose(original.embedding, restricted.embedding, atol=1e-6)
        assert model.encoder.config.in_channels == 1

    def test_keep_all_is_identity(self):
        model = micro_ssl_model(in_channels=2)
        x = torch.randn(1, 2, 16, 16, 16)
        model.eval()
        with torch.no_grad():
            before = model(x)
        restrict_input_channels(model, [0, 1])
        with torch.no_grad():
            after = model(x)
        assert torch.allclose(before.reconstruction, after.reconstruction, atol=1e-6)

    def test_validation_errors(self):
        model = micro_ssl_model(in_channels=2)
        with pytest.raises(ValidationError):
            restrict_input_channels(model, [])
        with pytest.raises(ValidationError):
            restrict_input_channels(model, [0, 2])
        with pytest.raises(ValidationError):
            restrict_input_channels(model, [0, 0])

    def test_duplicate_modality_routing_needs_no_surgery(self):
        # feeding one modality into both channels of an unmodified 2-channel
        # model is a pure data-pipeline choice
        model = micro_ssl_model(in_channels=2)
        t1w = torch.randn(1, 1, 16, 16, 16)
        out = model(torch.cat([t1w, t1w], dim=1))
        assert out.reconstruction.shape == (1, 2, 16, 16, 16)
