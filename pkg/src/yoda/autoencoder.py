"""Temporal-aware frame autoencoder.

A frame is mapped to a 32-channel latent at 1/32 resolution through five
stride-2 stages; a symmetric decoder mirrors them. When temporal conditioning
is enabled, a five-scale extractor turns the previous reconstruction into a
feature pyramid (full resolution down to 1/16) that is concatenated into both
the encoder and the decoder at the matching scales and projected back to the
stage width. The intra variant is the same network with zero scales and no
reference input.

There is no stochastic sampling path anywhere: encoding is a deterministic
function of the frame, the conditions and the weights.
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn

from .config import AutoencoderConfig

DOWNSAMPLE_FACTOR = 32
PAD_MULTIPLE = 64


class ShapeError(ValueError):
    pass


def to_frame_tensor(frame: np.ndarray) -> torch.Tensor:
    """(H, W, 3) array in [0, 1] -> (1, 3, H, W) float tensor."""
    frame = np.asarray(frame)
    if frame.ndim != 3 or frame.shape[2] != 3:
        raise ShapeError(f"expected (H, W, 3) frame, got {frame.shape}")
    if not np.all(np.isfinite(frame)):
        raise ValueError("frame contains non-finite values")
    return torch.from_numpy(np.ascontiguousarray(frame, dtype=np.float32)).permute(2, 0, 1)[None]


def from_frame_tensor(x: torch.Tensor) -> np.ndarray:
    return x[0].permute(1, 2, 0).contiguous().cpu().numpy()


def pad_frame(frame: np.ndarray, multiple: int = PAD_MULTIPLE):
    """Replicate-pad (H, W, 3) to a multiple of ``multiple``; returns (padded, (H, W))."""
    h, w = frame.shape[:2]
    ph = (-h) % multiple
    pw = (-w) % multiple
    if ph or pw:
        frame = np.pad(frame, ((0, ph), (0, pw), (0, 0)), mode="edge")
    return frame, (h, w)


def crop_frame(frame: np.ndarray, true_size) -> np.ndarray:
    h, w = true_size
    return frame[:h, :w]


class ResBlock(nn.Module):
    def __init__(self, ch):
        super().__init__()
        self.norm1 = nn.GroupNorm(1, ch)
        self.conv1 = nn.Conv2d(ch, ch, 3, padding=1)
        self.norm2 = nn.GroupNorm(1, ch)
        self.conv2 = nn.Conv2d(ch, ch, 3, padding=1)
        self.act = nn.SiLU()

    def forward(self, x):
        h = self.conv1(self.act(self.norm1(x)))
        h = self.conv2(self.act(self.norm2(h)))
        return x + h


class Downsample(nn.Module):
    def __init__(self, c_in, c_out):
        super().__init__()
        self.conv = nn.Conv2d(c_in, c_out, 3, stride=2, padding=1)

    def forward(self, x):
        return self.conv(x)


class Upsample(nn.Module):
    def __init__(self, c_in, c_out):
        super().__init__()
        self.conv = nn.Conv2d(c_in, c_out, 3, padding=1)

    def forward(self, x):
        return self.conv(nn.functional.interpolate(x, scale_factor=2, mode="nearest"))


class ConditionExtractor(nn.Module):
    """Feature pyramid over the previous reconstruction: scale i is at 1/2^i."""

    def __init__(self, cfg: AutoencoderConfig):
        super().__init__()
        self.scales = cfg.temporal_scales
        widths = cfg.cond_widths[: self.scales]
        self.stem = nn.Conv2d(3, widths[0], 3, padding=1)
        self.blocks = nn.ModuleList([ResBlock(widths[0])])
        self.downs = nn.ModuleList()
        for i in range(1, self.scales):
            self.downs.append(Downsample(widths[i - 1], widths[i]))
            self.blocks.append(ResBlock(widths[i]))

    def forward(self, x: torch.Tensor) -> list:
        feats = []
        h = self.blocks[0](self.stem(x))
        feats.append(h)
        for down, block in zip(self.downs, self.blocks[1:]):
            h = block(down(h))
            feats.append(h)
        return feats


class FuseConditions(nn.Module):
    """Concatenate one condition level and project back to the stage width."""

    def __init__(self, ch, cond_ch):
        super().__init__()
        self.proj = nn.Conv2d(ch + cond_ch, ch, 1)

    def forward(self, x, cond):
        if cond.shape[-2:] != x.shape[-2:]:
            raise ShapeError(
                f"condition resolution {tuple(cond.shape[-2:])} does not match "
                f"feature resolution {tuple(x.shape[-2:])}"
            )
        return self.proj(torch.cat([x, cond], dim=1))


class FrameEncoder(nn.Module):
    def __init__(self, cfg: AutoencoderConfig):
        super().__init__()
        w = cfg.widths
        self.scales = cfg.temporal_scales
        self.stem = nn.Conv2d(3, w[0], 3, padding=1)
        self.fuses = nn.ModuleList()
        self.blocks = nn.ModuleList()
        self.downs = nn.ModuleList()
        for i in range(5):
            if i < self.scales:
                self.fuses.append(FuseConditions(w[i], cfg.cond_widths[i]))
            self.blocks.append(ResBlock(w[i]))
            self.downs.append(Downsample(w[i], w[min(i + 1, 4)]))
        self.tail = ResBlock(w[4])
        self.head = nn.Conv2d(w[4], cfg.latent_channels, 3, padding=1)

    def forward(self, x, conds):
        h = self.stem(x)
        for i in range(5):
            if i < self.scales:
                h = self.fuses[i](h, conds[i])
            h = self.downs[i](self.blocks[i](h))
        return self.head(self.tail(h))


class FrameDecoder(nn.Module):
    def __init__(self, cfg: AutoencoderConfig):
        super().__init__()
        w = cfg.widths
        self.scales = cfg.temporal_scales
        self.head = nn.Conv2d(cfg.latent_channels, w[4], 3, padding=1)
        self.tail = ResBlock(w[4])
        self.ups = nn.ModuleList()
        self.blocks = nn.ModuleList()
        self.fuses = nn.ModuleList()
        for i in reversed(range(5)):  # produces resolutions 1/16 ... 1/1
            self.ups.append(Upsample(w[min(i + 1, 4)], w[i]))
            self.blocks.append(ResBlock(w[i]))
            if i < self.scales:
                self.fuses.append(FuseConditions(w[i], cfg.cond_widths[i]))
        self.out = nn.Conv2d(w[0], 3, 3, padding=1)

    def forward(self, latent, conds):
        h = self.tail(self.head(latent))
        fuse_iter = 0
        for idx, i in enumerate(reversed(range(5))):
            h = self.ups[idx](h)
            if i < self.scales:
                h = self.fuses[fuse_iter](h, conds[i])
                fuse_iter += 1
            h = self.blocks[idx](h)
        return self.out(h)


class TemporalAutoencoder(nn.Module):
    """Frame autoencoder with optional multiscale temporal conditioning.

    ``temporal_scales == 0`` yields the intra (frame-independent) variant; the
    extractor then does not exist and no reference may be passed.
    """

    def __init__(self, cfg: AutoencoderConfig | None = None):
        super().__init__()
        self.cfg = cfg or AutoencoderConfig()
        if not 0 <= self.cfg.temporal_scales <= 5:
            raise ValueError("temporal_scales must be in 0..5")
        self.encoder = FrameEncoder(self.cfg)
        self.decoder = FrameDecoder(self.cfg)
        self.extractor = ConditionExtractor(self.cfg) if self.cfg.temporal_scales else None

    @property
    def is_conditional(self) -> bool:
        return self.cfg.temporal_scales > 0

    def _check_conds(self, x_hw, conds):
        if not self.is_conditional:
            if conds is not None:
                raise ShapeError("intra model takes no temporal conditions")
            return
        if conds is None:
            raise ShapeError("conditional model requires a temporal condition pyramid")
        if len(conds) != self.cfg.temporal_scales:
            raise ShapeError(f"expected {self.cfg.temporal_scales} pyramid levels, got {len(conds)}")
        h, w = x_hw
        for i, c in enumerate(conds):
            want = (h >> i, w >> i)
            if tuple(c.shape[-2:]) != want:
                raise ShapeError(f"pyramid level {i} is {tuple(c.shape[-2:])}, expected {want}")

    def extract(self, prev_recon: torch.Tensor) -> list:
        if not self.is_conditional:
            raise ShapeError("intra model has no extractor")
        if prev_recon.shape[-2] % 16 or prev_recon.shape[-1] % 16:
            raise ShapeError("reference resolution must be a multiple of 16")
        return self.extractor(prev_recon)

    def encode(self, x: torch.Tensor, conds=None) -> torch.Tensor:
        if x.shape[-2] % DOWNSAMPLE_FACTOR or x.shape[-1] % DOWNSAMPLE_FACTOR:
            raise ShapeError(f"frame dims must be multiples of {DOWNSAMPLE_FACTOR}")
        self._check_conds(x.shape[-2:], conds)
        return self.encoder(x, conds)

    def decode(self, latent: torch.Tensor, conds=None) -> torch.Tensor:
        """Raw decoder output (unclamped), for training objectives."""
        h, w = latent.shape[-2] * DOWNSAMPLE_FACTOR, latent.shape[-1] * DOWNSAMPLE_FACTOR
        if latent.shape[1] != self.cfg.latent_channels:
            raise ShapeError(f"latent must have {self.cfg.latent_channels} channels")
        self._check_conds((h, w), conds)
        return self.decoder(latent, conds)

    # Frame-level wrappers over (H, W, 3) arrays in [0, 1].

    def extract_conditions(self, prev_recon: np.ndarray) -> list:
        with torch.no_grad():
            return self.extract(to_frame_tensor(prev_recon))

    def encode_frame(self, frame: np.ndarray, conds=None) -> torch.Tensor:
        with torch.no_grad():
            return self.encode(to_frame_tensor(frame), conds)

    def decode_frame(self, latent: torch.Tensor, conds=None) -> np.ndarray:
        with torch.no_grad():
            x = self.decode(latent, conds)
        return np.clip(from_frame_tensor(x), 0.0, 1.0)
