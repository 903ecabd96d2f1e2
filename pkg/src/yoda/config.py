"""Model / run configuration dataclasses and the versioned checkpoint format."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import torch

CHECKPOINT_FORMAT_VERSION = 1

# Rate weights trained as separate models, indexed by the bitstream header.
LAMBDA_RATE_VALUES = (1.0, 2.0, 4.0, 8.0)


def lambda_index_of(lambda_rate: float) -> int:
    try:
        return LAMBDA_RATE_VALUES.index(float(lambda_rate))
    except ValueError:
        raise ValueError(
            f"lambda_rate {lambda_rate} not one of {LAMBDA_RATE_VALUES}"
        ) from None


@dataclass
class AutoencoderConfig:
    latent_channels: int = 32
    widths: tuple = (32, 48, 64, 96, 128)
    cond_widths: tuple = (16, 32, 64, 96, 128)
    temporal_scales: int = 5  # 0..5; 0 is the frame-independent variant


@dataclass
class LatentCodecConfig:
    latent_channels: int = 32
    feature_channels: int = 256
    code_channels: int = 128
    hyper_channels: int = 64
    temporal_context: bool = True  # False for the intra variant
    cache_stage: str = "pre_denoise"  # "pre_denoise" | "post_denoise"


@dataclass
class DenoiserConfig:
    latent_channels: int = 32
    width: int = 128
    depth: int = 4
    heads: int = 4
    lora_rank: int = 8
    sigma_data: float = 0.5


@dataclass
class PipelineConfig:
    """One frame pipeline (intra or predicted): autoencoder + codec + denoiser."""

    intra: bool = False
    autoencoder: AutoencoderConfig = field(default_factory=AutoencoderConfig)
    latent_codec: LatentCodecConfig = field(default_factory=LatentCodecConfig)
    denoiser: DenoiserConfig = field(default_factory=DenoiserConfig)
    use_denoiser: bool = True
    t_star: float = 0.25  # inference noise level, selected on validation data

    def __post_init__(self):
        if isinstance(self.autoencoder, dict):
            self.autoencoder = AutoencoderConfig(**self.autoencoder)
        if isinstance(self.latent_codec, dict):
            self.latent_codec = LatentCodecConfig(**self.latent_codec)
        if isinstance(self.denoiser, dict):
            self.denoiser = DenoiserConfig(**self.denoiser)
        if isinstance(self.autoencoder.widths, list):
            self.autoencoder.widths = tuple(self.autoencoder.widths)
        if isinstance(self.autoencoder.cond_widths, list):
            self.autoencoder.cond_widths = tuple(self.autoencoder.cond_widths)
        if self.intra:
            self.autoencoder.temporal_scales = 0
            self.latent_codec.temporal_context = False


@dataclass
class LossWeights:
    lambda1: float = 1.0  # pixel MSE
    lambda2: float = 1.0  # perceptual plugin, first term
    lambda3: float = 1.0  # perceptual plugin, second term
    lambda_adv: float = 0.1
    lambda_rate: float = 4.0

    def __post_init__(self):
        for name in ("lambda1", "lambda2", "lambda3", "lambda_adv", "lambda_rate"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")


@dataclass
class StageSchedule:
    stage: int = 1  # 1, 2 or 3
    steps: int = 2000
    lr_start: float = 1e-4
    lr_end: float = 5e-6
    window_start: int = 2
    window_end: int = 7
    window_increment_steps: int = 500
    batch_size: int = 4
    rate_free_steps: int = 0  # no rate pressure: lets the transform escape
    #                               the quantizer dead zone before pruning
    rate_warmup_steps: int = 0  # linear ramp of the rate weight after that
    grad_clip: float = 1.0  # max gradient norm (0 disables)

    def window_at(self, step: int) -> int:
        if self.stage != 2:
            return self.window_end
        grown = self.window_start + step // self.window_increment_steps
        return min(self.window_end, grown)

    def rate_scale_at(self, step: int) -> float:
        if step < self.rate_free_steps:
            return 0.0
        if self.rate_warmup_steps <= 0:
            return 1.0
        return min(1.0, (step - self.rate_free_steps + 1) / self.rate_warmup_steps)

    def lr_at(self, step: int) -> float:
        if self.stage == 3:
            return self.lr_end
        if self.stage == 1:
            return self.lr_start
        # stage 2: hold at the initial rate, then cosine to the end rate
        import math

        hold = int(0.4 * self.steps)
        if step < hold:
            return self.lr_start
        progress = min(1.0, (step - hold) / max(1, self.steps - hold - 1))
        return self.lr_end + 0.5 * (self.lr_start - self.lr_end) * (
            1 + math.cos(math.pi * progress)
        )

    def anchor_scale_at(self, step: int) -> float:
        """The latent anchor is dead-zone scaffolding: full strength while the
        rate is off or ramping, then removed over one more ramp length."""
        ramp_end = self.rate_free_steps + self.rate_warmup_steps
        if step <= ramp_end or self.rate_warmup_steps <= 0:
            return 1.0
        return max(0.0, 1.0 - (step - ramp_end) / self.rate_warmup_steps)


@dataclass
class RunConfig:
    """Full training-run description; JSON round-trippable."""

    stage: int = 1
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    schedule: StageSchedule = field(default_factory=StageSchedule)
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    dataset_seed: int = 1
    dataset_clips: int = 200
    dataset_resolution: int = 64
    dataset_window: int = 7
    denoiser_pretrain_steps: int = 600
    train_full_denoiser: bool = False  # True bypasses the low-rank adapters
    cond_dropout: float = 0.3  # stage I: fraction of samples trained with
    #                              zeroed temporal conditions, so the latent
    #                              cannot atrophy into a condition passthrough
    ref_noise: float = 0.12  # stage I: max noise on the reference frame,
    #                           imitating the lossy references seen at coding
    #                           time so the latent must carry the residual
    latent_anchor_weight: float = 1.0  # stage II/III latent-consistency aid
    latent_anchor_floor: float = 0.25  # kept after the scaffold decays
    dataset_layered_motion: bool = False
    init_checkpoint: str = ""
    out_checkpoint: str = "stage.ckpt"
    metrics_log: str = ""

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        if isinstance(self.schedule, dict):
            self.schedule = StageSchedule(**self.schedule)
        if isinstance(self.pipeline, dict):
            self.pipeline = PipelineConfig(**self.pipeline)
        self.schedule.stage = self.stage

    @classmethod
    def from_json(cls, path) -> "RunConfig":
        with open(path) as f:
            return cls(**json.load(f))

    def to_json(self, path) -> None:
        with open(path, "w") as f:
            json.dump(dataclasses.asdict(self), f, indent=2)


def save_checkpoint(path, config, state_dicts: dict, extra: dict | None = None) -> None:
    """Write a versioned named-parameter archive with a config echo."""
    payload = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "config": dataclasses.asdict(config) if dataclasses.is_dataclass(config) else config,
        "state": state_dicts,
        "extra": extra or {},
    }
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)


def load_checkpoint(path) -> dict:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    version = payload.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    return payload
