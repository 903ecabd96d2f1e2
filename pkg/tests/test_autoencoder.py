import numpy as np
import pytest
import torch

from yoda.autoencoder import (
    ShapeError,
    TemporalAutoencoder,
    crop_frame,
    pad_frame,
    to_frame_tensor,
)
from yoda.config import AutoencoderConfig

TINY = AutoencoderConfig(widths=(8, 8, 12, 12, 16), cond_widths=(4, 4, 8, 8, 8))
TINY_INTRA = AutoencoderConfig(widths=(8, 8, 12, 12, 16), cond_widths=(4, 4, 8, 8, 8),
                               temporal_scales=0)


def build(cfg, seed=0):
    torch.manual_seed(seed)
    return TemporalAutoencoder(cfg).eval()


def rand_frame(h, w, seed=0):
    return np.random.default_rng(seed).random((h, w, 3)).astype(np.float32)


class TestExtractor:
    def test_pyramid_ladder_64(self):
        model = build(TINY)
        conds = model.extract_conditions(rand_frame(64, 64))
        assert len(conds) == 5
        assert [tuple(c.shape[-2:]) for c in conds] == [
            (64, 64), (32, 32), (16, 16), (8, 8), (4, 4)]

    def test_pyramid_ladder_256(self):
        model = build(TINY)
        conds = model.extract_conditions(rand_frame(256, 256))
        assert tuple(conds[-1].shape[-2:]) == (16, 16)

    def test_default_channel_widths(self):
        torch.manual_seed(0)
        model = TemporalAutoencoder().eval()
        conds = model.extract_conditions(rand_frame(64, 64))
        assert [c.shape[1] for c in conds] == [16, 32, 64, 96, 128]

    def test_zero_weights_zero_pyramid(self):
        model = build(TINY)
        with torch.no_grad():
            for p in model.extractor.parameters():
                p.zero_()
        conds = model.extract_conditions(np.zeros((64, 64, 3), dtype=np.float32))
        assert all(float(c.abs().max()) == 0.0 for c in conds)

    def test_single_reference_only(self):
        # the extractor consumes exactly one frame; no hidden state survives
        model = build(TINY)
        a = model.extract_conditions(rand_frame(64, 64, seed=1))
        model.extract_conditions(rand_frame(64, 64, seed=2))
        b = model.extract_conditions(rand_frame(64, 64, seed=1))
        assert all(torch.equal(x, y) for x, y in zip(a, b))


class TestEncodeDecode:
    @pytest.mark.parametrize("size", [64, 128, 256])
    def test_latent_shape(self, size):
        model = build(TINY)
        frame = rand_frame(size, size)
        conds = model.extract_conditions(frame)
        latent = model.encode_frame(frame, conds)
        assert tuple(latent.shape) == (1, 32, size // 32, size // 32)
        # latent element count is H*W/32: half of an H*W/16 layout
        assert latent.numel() == size * size // 32

    def test_rectangular_frame(self):
        model = build(TINY)
        frame = rand_frame(64, 128)
        conds = model.extract_conditions(frame)
        latent = model.encode_frame(frame, conds)
        assert tuple(latent.shape[-2:]) == (2, 4)
        recon = model.decode_frame(latent, conds)
        assert recon.shape == (64, 128, 3)

    def test_intra_variant(self):
        model = build(TINY_INTRA)
        latent = model.encode_frame(rand_frame(64, 64))
        recon = model.decode_frame(latent)
        assert recon.shape == (64, 64, 3)
        assert recon.min() >= 0.0 and recon.max() <= 1.0

    def test_conditional_requires_pyramid(self):
        model = build(TINY)
        with pytest.raises(ShapeError):
            model.encode_frame(rand_frame(64, 64), None)

    def test_intra_rejects_pyramid(self):
        model = build(TINY_INTRA)
        cond_model = build(TINY)
        conds = cond_model.extract_conditions(rand_frame(64, 64))
        with pytest.raises(ShapeError):
            model.encode_frame(rand_frame(64, 64), conds)

    def test_resolution_mismatch_rejected(self):
        model = build(TINY)
        conds = model.extract_conditions(rand_frame(64, 64))
        with pytest.raises(ShapeError):
            model.encode_frame(rand_frame(128, 128), conds)

    def test_non_multiple_rejected(self):
        model = build(TINY_INTRA)
        with pytest.raises(ShapeError):
            model.encode(torch.zeros(1, 3, 48, 48))

    def test_deterministic_across_runs(self):
        frame = rand_frame(64, 64, seed=7)
        lat = []
        for _ in range(2):
            model = build(TINY, seed=123)
            conds = model.extract_conditions(frame)
            lat.append(model.encode_frame(frame, conds))
        assert torch.equal(lat[0], lat[1])

    def test_zero_latent_gives_output_bias(self):
        model = build(TINY_INTRA)
        with torch.no_grad():
            for p in model.parameters():
                p.zero_()
            model.decoder.out.bias.fill_(0.25)
        recon = model.decode_frame(torch.zeros(1, 32, 2, 2))
        assert np.allclose(recon, 0.25)
        with torch.no_grad():
            model.decoder.out.bias.fill_(1.7)  # clamps at 1
        recon = model.decode_frame(torch.zeros(1, 32, 2, 2))
        assert np.allclose(recon, 1.0)

    def test_temporal_sensitivity(self):
        # gradient of the latent w.r.t. the reference frame is nonzero
        model = build(TINY)
        frame = to_frame_tensor(rand_frame(64, 64, seed=3))
        ref = to_frame_tensor(rand_frame(64, 64, seed=4)).requires_grad_(True)
        latent = model.encode(frame, model.extract(ref))
        latent.sum().backward()
        assert float(ref.grad.abs().sum()) > 0

    def test_no_kl_or_sampling_path(self):
        # encoding twice gives the identical latent: no stochastic branch
        model = build(TINY_INTRA)
        frame = rand_frame(64, 64, seed=9)
        assert torch.equal(model.encode_frame(frame), model.encode_frame(frame))


class TestPadding:
    def test_pad_and_crop_roundtrip(self):
        frame = rand_frame(70, 100)
        padded, size = pad_frame(frame)
        assert padded.shape == (128, 128, 3)
        assert size == (70, 100)
        assert np.array_equal(crop_frame(padded, size), frame)

    def test_already_aligned(self):
        frame = rand_frame(64, 64)
        padded, size = pad_frame(frame)
        assert padded is frame and size == (64, 64)

    def test_replicate_edges(self):
        frame = np.ones((65, 64, 3), dtype=np.float32)
        frame[-1] = 0.5
        padded, _ = pad_frame(frame)
        assert np.all(padded[65:] == 0.5)
