"""Frame pipelines: autoencoder + latent codec + denoiser wired per frame type.

``FramePipeline`` owns the per-frame inference logic. Its encoder runs the
complete decoder path internally (entropy decode values, feature decode,
one-step denoise, frame decode), so the temporal state held by the encoder is
bit-identical to what the decoder will compute; that is the no-drift
invariant. The temporal feature cache is taken before the denoiser by default
(``pre_denoise``), with the post-denoiser variant behind a config switch.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .autoencoder import TemporalAutoencoder, from_frame_tensor, to_frame_tensor
from .config import (
    PipelineConfig,
    lambda_index_of,
    load_checkpoint,
    save_checkpoint,
)
from .denoiser import LatentDenoiser
from .latent_codec import LatentCodec


@dataclass
class FrameState:
    """Decoded state carried from frame to frame inside one GOP."""

    recon: torch.Tensor | None = None  # (1, 3, H, W) in [0, 1]
    feature: torch.Tensor | None = None  # cached codec feature


@dataclass
class FrameStats:
    payload_bytes: int = 0
    estimated_bits: float = 0.0
    overflow_count: int = 0
    breakdown: dict = field(default_factory=dict)


class FramePipeline(torch.nn.Module):
    def __init__(self, cfg: PipelineConfig | None = None):
        super().__init__()
        self.cfg = cfg or PipelineConfig()
        self.autoencoder = TemporalAutoencoder(self.cfg.autoencoder)
        self.codec = LatentCodec(self.cfg.latent_codec)
        self.denoiser = LatentDenoiser(self.cfg.denoiser)

    @property
    def is_intra(self) -> bool:
        return self.cfg.intra

    def _conds(self, state: FrameState):
        if self.is_intra or self.autoencoder.cfg.temporal_scales == 0:
            return None
        if state.recon is None:
            raise ValueError("predicted pipeline requires a previous reconstruction")
        return self.autoencoder.extract(state.recon)

    def _context(self, state: FrameState, feature_hw):
        if state.feature is None or not self.codec.cfg.temporal_context:
            return self.codec.zero_context(1, feature_hw)
        return self.codec.refine_features(state.feature)

    def _denoise(self, noisy_latent: torch.Tensor) -> torch.Tensor:
        if not self.cfg.use_denoiser:
            return noisy_latent
        return self.denoiser.one_step_denoise(noisy_latent, self.cfg.t_star)

    def _finish_frame(self, coded_feature, noisy_latent, conds):
        latent_hat = self._denoise(noisy_latent)
        recon = torch.clamp(self.autoencoder.decode(latent_hat, conds), 0.0, 1.0)
        if self.cfg.latent_codec.cache_stage == "post_denoise":
            cache = self.codec.channel_expand(latent_hat)
        else:
            cache = coded_feature
        return recon, cache

    @torch.no_grad()
    def code_frame(self, frame: np.ndarray, state: FrameState, coder=None):
        """Encode one padded frame; returns (payloads, new_state, stats).

        ``state`` holds the previous reconstruction/feature (empty at GOP
        starts). The returned state's reconstruction is the decoder-identical
        one, produced by running the full decode path.
        """
        self.eval()
        x = to_frame_tensor(frame)
        conds = self._conds(state)
        latent = self.autoencoder.encode(x, conds)
        feature = self.codec.channel_expand(latent)
        ctx = self._context(state, feature.shape[-2:])
        coded = self.codec.code_frame(feature, ctx, coder=coder)
        recon, cache = self._finish_frame(coded.recon_feature, coded.noisy_latent, conds)
        stats = FrameStats(
            payload_bytes=sum(len(p) for p in coded.payloads),
            estimated_bits=coded.bits_estimate.bits,
            overflow_count=coded.overflow_count,
            breakdown=dict(coded.bits_breakdown),
        )
        return coded.payloads, FrameState(recon=recon, feature=cache), stats

    @torch.no_grad()
    def decode_frame(self, payloads, state: FrameState, latent_hw, coder=None):
        """Decode one frame's payloads; returns (new_state,). Mirrors
        ``code_frame`` exactly."""
        self.eval()
        conds = self._conds(state)
        ctx = self._context(state, (latent_hw[0], latent_hw[1]))
        feature, noisy_latent = self.codec.decode_frame(payloads, ctx, latent_hw, coder=coder)
        recon, cache = self._finish_frame(feature, noisy_latent, conds)
        return FrameState(recon=recon, feature=cache)

    def recon_to_frame(self, state: FrameState) -> np.ndarray:
        return from_frame_tensor(state.recon)


class VideoCodec:
    """The I-frame and P-frame pipelines plus rate-point identity."""

    def __init__(self, intra: FramePipeline, predicted: FramePipeline,
                 lambda_rate: float = 4.0):
        self.intra = intra
        self.predicted = predicted
        self.lambda_rate = float(lambda_rate)

    @property
    def lambda_index(self) -> int:
        return lambda_index_of(self.lambda_rate)

    def save(self, path, extra: dict | None = None) -> None:
        import dataclasses

        save_checkpoint(
            path,
            {
                "intra": dataclasses.asdict(self.intra.cfg),
                "predicted": dataclasses.asdict(self.predicted.cfg),
                "lambda_rate": self.lambda_rate,
            },
            {
                "intra": self.intra.state_dict(),
                "predicted": self.predicted.state_dict(),
            },
            extra=extra,
        )

    @classmethod
    def load(cls, path) -> "VideoCodec":
        payload = load_checkpoint(path)
        cfg = payload["config"]
        intra = FramePipeline(PipelineConfig(**cfg["intra"]))
        predicted = FramePipeline(PipelineConfig(**cfg["predicted"]))
        intra.load_state_dict(payload["state"]["intra"])
        predicted.load_state_dict(payload["state"]["predicted"])
        codec = cls(intra, predicted, lambda_rate=cfg["lambda_rate"])
        codec.extra = payload.get("extra", {})
        return codec


def build_codec(i_cfg: PipelineConfig | None = None, p_cfg: PipelineConfig | None = None,
                lambda_rate: float = 4.0, seed: int = 0) -> VideoCodec:
    """Fresh codec with deterministic initialization."""
    torch.manual_seed(seed)
    intra = FramePipeline(i_cfg or PipelineConfig(intra=True))
    predicted = FramePipeline(p_cfg or PipelineConfig(intra=False))
    if not intra.is_intra or predicted.is_intra:
        raise ValueError("intra/predicted pipeline configs are swapped")
    return VideoCodec(intra, predicted, lambda_rate=lambda_rate)
