"""Conditional latent coder: turns the 32-channel latent into a real bitstream.

The latent is expanded to a 256-channel working feature, transformed to a
half-resolution main code, and entropy-coded in two channel stages whose
Gaussian parameters come from a hyperprior plus temporal conditions derived
from the previous frame's reconstructed feature by a depthwise Feature
Refiner. The decoder mirrors every step, so the reconstructed feature on both
sides is bit-identical; that equality is what keeps long P-frame chains from
drifting.

Quantization: training uses additive uniform noise for the rate term and
straight-through rounding for the reconstruction path; coding uses
mean-shifted rounding with symbols clamped to [-127, 128] (overflows counted).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import LatentCodecConfig
from .rangecoder import (
    SCALE_FLOOR,
    SYMBOL_MAX,
    SYMBOL_MIN,
    QuantizedCdf,
    RangeDecoder,
    RangeEncoder,
    likelihood_bits,
    quantize_pmf,
)

SCALE_TABLE_SIZE = 64
SCALE_TABLE_MAX = 64.0
SCALE_TABLE = np.exp(
    np.linspace(np.log(SCALE_FLOOR), np.log(SCALE_TABLE_MAX), SCALE_TABLE_SIZE)
)

_SYMBOL_GRID = np.arange(SYMBOL_MIN, SYMBOL_MAX + 1, dtype=np.float64)


def _fold_tails(pmf: np.ndarray, lower_tail: float, upper_tail: float) -> np.ndarray:
    pmf = pmf.copy()
    pmf[0] += lower_tail
    pmf[-1] += upper_tail
    return pmf


def _build_scale_table_cdfs() -> list:
    from scipy.special import ndtr

    cdfs = []
    for scale in SCALE_TABLE:
        upper = ndtr((_SYMBOL_GRID + 0.5) / scale)
        lower = ndtr((_SYMBOL_GRID - 0.5) / scale)
        pmf = _fold_tails(upper - lower, lower[0], 1.0 - upper[-1])
        # a floor keeps every clamped symbol decodable (no zero-width bins)
        cdfs.append(quantize_pmf(pmf + 1e-12, offset=SYMBOL_MIN))
    return cdfs


_SCALE_CDFS_CACHE = None


def scale_table_cdfs() -> list:
    """Quantized CDFs for the mean-shifted Gaussian at each table scale."""
    global _SCALE_CDFS_CACHE
    if _SCALE_CDFS_CACHE is None:
        _SCALE_CDFS_CACHE = _build_scale_table_cdfs()
    return _SCALE_CDFS_CACHE


def scale_indices(scales: torch.Tensor) -> np.ndarray:
    """Index of the smallest table scale >= the given scale (elementwise)."""
    s = scales.detach().cpu().numpy().ravel()
    idx = np.searchsorted(SCALE_TABLE, s, side="left")
    return np.clip(idx, 0, SCALE_TABLE_SIZE - 1)


class ReferenceCoder:
    """Entropy backend running the in-process range coder."""

    name = "reference"

    def encode(self, symbols: np.ndarray, cdf_bank: list, indices: np.ndarray) -> bytes:
        enc = RangeEncoder()
        for s, i in zip(symbols.tolist(), indices.tolist()):
            enc.encode(s, cdf_bank[i])
        return enc.finish()

    def decode(self, payload: bytes, cdf_bank: list, indices: np.ndarray) -> np.ndarray:
        dec = RangeDecoder(payload)
        out = np.empty(len(indices), dtype=np.int64)
        for j, i in enumerate(indices.tolist()):
            out[j] = dec.decode(cdf_bank[i])
        dec.finish()
        return out


def ste_round(x: torch.Tensor) -> torch.Tensor:
    """Round with a straight-through gradient."""
    return x + (torch.round(x) - x).detach()


def _uniform_noise(x: torch.Tensor, generator=None) -> torch.Tensor:
    return torch.rand(x.shape, dtype=x.dtype, device=x.device, generator=generator) - 0.5


class FactorizedDensity(nn.Module):
    """Learned monotone per-channel CDF (a small constrained univariate chain).

    Hidden units are 1 -> 3 -> 3 -> 1 per channel; matrices are kept positive
    through softplus and the mixing factors through tanh, so the logit chain
    is monotone in its input and sigmoid of it is a valid CDF.
    """

    def __init__(self, channels: int, filters=(3, 3), init_scale: float = 8.0):
        super().__init__()
        self.channels = channels
        dims = (1,) + tuple(filters) + (1,)
        scale = init_scale ** (1.0 / (len(dims) - 1))
        self.matrices = nn.ParameterList()
        self.biases = nn.ParameterList()
        self.factors = nn.ParameterList()
        for k in range(len(dims) - 1):
            d_in, d_out = dims[k], dims[k + 1]
            init = float(np.log(np.expm1(1.0 / scale / d_in)))
            self.matrices.append(nn.Parameter(torch.full((channels, d_out, d_in), init)))
            # deterministic asymmetric bias init keeps hidden units distinct
            bias = torch.linspace(-0.5, 0.5, d_out).view(1, d_out, 1).repeat(channels, 1, 1)
            self.biases.append(nn.Parameter(bias))
            if k < len(dims) - 2:
                self.factors.append(nn.Parameter(torch.zeros(channels, d_out, 1)))

    def _logits(self, x: torch.Tensor) -> torch.Tensor:
        # x: (channels, 1, n)
        h = x
        for k, (m, b) in enumerate(zip(self.matrices, self.biases)):
            h = torch.bmm(F.softplus(m), h) + b
            if k < len(self.factors):
                h = h + torch.tanh(self.factors[k]) * torch.tanh(h)
        return h

    def bin_probability(self, x: torch.Tensor) -> torch.Tensor:
        """P(x - .5 <= X < x + .5) per element; x shaped (channels, 1, n)."""
        upper = self._logits(x + 0.5)
        lower = self._logits(x - 0.5)
        # evaluate on the numerically favorable side of the sigmoid
        sign = torch.where(upper + lower >= 0, -1.0, 1.0).detach()
        p = torch.abs(torch.sigmoid(sign * upper) - torch.sigmoid(sign * lower))
        return p

    def bits(self, x: torch.Tensor) -> torch.Tensor:
        """-log2 likelihood of (B, C, h, w) values under the per-channel model."""
        b, c, h, w = x.shape
        flat = x.permute(1, 0, 2, 3).reshape(c, 1, -1)
        p = self.bin_probability(flat)
        bits = -torch.log2(p.clamp_min(2.0**-50.0))
        return bits.reshape(c, b, h, w).permute(1, 0, 2, 3)

    @torch.no_grad()
    def integer_cdfs(self) -> list:
        """Quantized CDFs over the clamp window for actual coding."""
        grid = torch.from_numpy(_SYMBOL_GRID).to(torch.float32)
        flat = grid.view(1, 1, -1).expand(self.channels, 1, -1)
        pmf = self.bin_probability(flat).squeeze(1).cpu().numpy().astype(np.float64)
        lower = torch.sigmoid(self._logits(grid.view(1, 1, -1).expand(self.channels, 1, -1) - 0.5))
        upper = torch.sigmoid(self._logits(grid.view(1, 1, -1).expand(self.channels, 1, -1) + 0.5))
        lo_tail = lower[:, 0, 0].cpu().numpy().astype(np.float64)
        up_tail = (1.0 - upper[:, 0, -1]).cpu().numpy().astype(np.float64)
        out = []
        for ch in range(self.channels):
            p = _fold_tails(np.maximum(pmf[ch], 0.0), lo_tail[ch], up_tail[ch])
            out.append(quantize_pmf(p + 1e-12, offset=SYMBOL_MIN))
        return out


class DepthwiseBlock(nn.Module):
    """Depth-wise 3x3 followed by point-wise 1x1, with a stride option."""

    def __init__(self, c_in, c_out, stride=1):
        super().__init__()
        self.dw = nn.Conv2d(c_in, c_in, 3, stride=stride, padding=1, groups=c_in)
        self.pw = nn.Conv2d(c_in, c_out, 1)
        self.act = nn.GELU()

    def forward(self, x):
        return self.pw(self.act(self.dw(x)))


class FeatureRefiner(nn.Module):
    """Derives the two temporal conditions from the cached feature: one at
    feature resolution for contextual embedding, one at code resolution for
    the entropy model."""

    def __init__(self, feature_ch, code_ch):
        super().__init__()
        self.main = nn.Sequential(
            DepthwiseBlock(feature_ch, feature_ch),
            DepthwiseBlock(feature_ch, feature_ch),
        )
        self.hyper = nn.Sequential(
            DepthwiseBlock(feature_ch, feature_ch),
            DepthwiseBlock(feature_ch, code_ch, stride=2),
        )

    def forward(self, prev_feature):
        return self.main(prev_feature), self.hyper(prev_feature)


@dataclass
class EntropyContext:
    """Temporal conditions: ``main`` at feature resolution, ``hyper`` at code
    resolution. Zero tensors when no cached reference exists."""

    main: torch.Tensor
    hyper: torch.Tensor


@dataclass
class RateEstimate:
    bits: float
    coded_bits: int = 0


@dataclass
class CodedFeature:
    """Result of running the coder over one feature tensor."""

    bits_estimate: RateEstimate
    recon_feature: torch.Tensor
    noisy_latent: torch.Tensor
    payloads: tuple | None = None  # (hyper, stage1, stage2) byte strings
    bits_breakdown: dict | None = None
    rate_tensor: torch.Tensor | None = None  # differentiable, train mode only
    overflow_count: int = 0


class ResUnit(nn.Module):
    def __init__(self, ch):
        super().__init__()
        self.conv1 = nn.Conv2d(ch, ch, 3, padding=1)
        self.conv2 = nn.Conv2d(ch, ch, 3, padding=1)
        self.act = nn.GELU()

    def forward(self, x):
        return x + self.conv2(self.act(self.conv1(x)))


class LatentCodec(nn.Module):
    def __init__(self, cfg: LatentCodecConfig | None = None):
        super().__init__()
        self.cfg = cfg or LatentCodecConfig()
        c = self.cfg.feature_channels
        cy = self.cfg.code_channels
        ch = self.cfg.hyper_channels
        cl = self.cfg.latent_channels
        if cy % 2:
            raise ValueError("code_channels must be even (two coding stages)")

        self.expand_proj = nn.Conv2d(cl, c, 1)
        self.expand_res = ResUnit(c)
        self.squeeze_res = ResUnit(c)
        self.squeeze_proj = nn.Conv2d(c, cl, 1)

        self.enc_fuse = nn.Conv2d(c + c, c, 1) if self.cfg.temporal_context else None
        self.main_enc = nn.Sequential(
            ResUnit(c), nn.Conv2d(c, cy, 3, stride=2, padding=1), ResUnit(cy)
        )
        self.dec_up = nn.Conv2d(cy, c, 3, padding=1)
        self.dec_fuse = nn.Conv2d(c + c, c, 1) if self.cfg.temporal_context else None
        self.main_dec = ResUnit(c)

        self.hyper_enc = nn.Sequential(
            nn.Conv2d(cy, ch, 3, stride=2, padding=1),
            nn.GELU(),
            nn.Conv2d(ch, ch, 3, stride=2, padding=1),
        )
        self.hyper_dec1 = nn.Conv2d(ch, ch, 3, padding=1)
        self.hyper_dec2 = nn.Conv2d(ch, cy, 3, padding=1)

        self.factorized = FactorizedDensity(ch)
        half = cy // 2
        self.param1 = nn.Sequential(
            nn.Conv2d(cy + cy, cy, 1), nn.GELU(), nn.Conv2d(cy, 2 * half, 1)
        )
        self.param2 = nn.Sequential(
            nn.Conv2d(cy + cy + half, cy, 1), nn.GELU(), nn.Conv2d(cy, 2 * half, 1)
        )

        self.refiner = (
            FeatureRefiner(c, cy) if self.cfg.temporal_context else None
        )
        self.overflow_total = 0

    # ---- channel expansion / squeeze ----

    def channel_expand(self, latent: torch.Tensor) -> torch.Tensor:
        if latent.shape[1] != self.cfg.latent_channels:
            raise ValueError(f"latent must have {self.cfg.latent_channels} channels")
        return self.expand_res(self.expand_proj(latent))

    def channel_squeeze(self, feature: torch.Tensor) -> torch.Tensor:
        if feature.shape[1] != self.cfg.feature_channels:
            raise ValueError(f"feature must have {self.cfg.feature_channels} channels")
        return self.squeeze_proj(self.squeeze_res(feature))

    # ---- temporal conditions ----

    def zero_context(self, batch: int, feature_hw, device=None, dtype=None) -> EntropyContext:
        h, w = feature_hw
        kw = dict(device=device, dtype=dtype)
        return EntropyContext(
            main=torch.zeros(batch, self.cfg.feature_channels, h, w, **kw),
            hyper=torch.zeros(batch, self.cfg.code_channels, _half(h), _half(w), **kw),
        )

    def refine_features(self, prev_feature=None, feature_hw=None, batch=1) -> EntropyContext:
        """Temporal conditions from the cached feature; zeros when absent."""
        if prev_feature is None:
            if feature_hw is None:
                raise ValueError("feature_hw required when no cached feature exists")
            return self.zero_context(batch, feature_hw)
        if not self.cfg.temporal_context:
            raise ValueError("this codec variant has no temporal context path")
        main, hyper = self.refiner(prev_feature)
        return EntropyContext(main=main, hyper=hyper)

    # ---- internal transforms ----

    def _encode_transform(self, feature, ctx):
        h = feature
        if self.enc_fuse is not None:
            h = self.enc_fuse(torch.cat([h, ctx.main], dim=1))
        return self.main_enc(h)

    def _decode_transform(self, y_hat, ctx, feature_hw):
        h = F.interpolate(y_hat, size=feature_hw, mode="nearest")
        h = self.dec_up(h)
        if self.dec_fuse is not None:
            h = self.dec_fuse(torch.cat([h, ctx.main], dim=1))
        return self.main_dec(h)

    def _hyper_decode(self, z_hat, y_hw):
        mid = (_half(y_hw[0]), _half(y_hw[1]))
        h = F.gelu(self.hyper_dec1(F.interpolate(z_hat, size=mid, mode="nearest")))
        return self.hyper_dec2(F.interpolate(h, size=y_hw, mode="nearest"))

    def _entropy_params(self, psi, ctx_hyper, y1_hat=None):
        if y1_hat is None:
            raw = self.param1(torch.cat([psi, ctx_hyper], dim=1))
        else:
            raw = self.param2(torch.cat([psi, ctx_hyper, y1_hat], dim=1))
        mean, scale_raw = raw.chunk(2, dim=1)
        scale = SCALE_FLOOR + F.softplus(scale_raw)
        return mean, scale

    def _check_ctx(self, feature, ctx):
        if ctx.main.shape[-2:] != feature.shape[-2:]:
            raise ValueError(
                f"context resolution {tuple(ctx.main.shape[-2:])} does not match "
                f"feature {tuple(feature.shape[-2:])}"
            )
        want = (_half(feature.shape[-2]), _half(feature.shape[-1]))
        if tuple(ctx.hyper.shape[-2:]) != want:
            raise ValueError(f"hyper context must be {want}, got {tuple(ctx.hyper.shape[-2:])}")

    # ---- training path ----

    def code_train(self, feature: torch.Tensor, ctx: EntropyContext, generator=None) -> CodedFeature:
        """Differentiable rate/reconstruction pass (no payload is produced).

        The rate graph uses additive uniform noise end to end, so its gradient
        is exact; the reconstruction graph uses straight-through rounding, so
        the decoder sees the same quantized values as at coding time.
        """
        self._check_ctx(feature, ctx)
        y = self._encode_transform(feature, ctx)
        z = self.hyper_enc(y)
        half = self.cfg.code_channels // 2
        y1, y2 = y[:, :half], y[:, half:]

        # rate graph (noise proxy, fully smooth)
        z_noisy = z + _uniform_noise(z, generator)
        z_bits = self.factorized.bits(z_noisy).sum()
        psi_rate = self._hyper_decode(z_noisy, y.shape[-2:])
        mean1_r, scale1_r = self._entropy_params(psi_rate, ctx.hyper)
        y1_noisy = y1 + _uniform_noise(y1, generator)
        y1_bits = likelihood_bits(y1_noisy, mean1_r, scale1_r).sum()
        mean2_r, scale2_r = self._entropy_params(psi_rate, ctx.hyper, y1_noisy)
        y2_bits = likelihood_bits(y2 + _uniform_noise(y2, generator), mean2_r, scale2_r).sum()

        # reconstruction graph (straight-through rounding, decoder-matched,
        # including the coding path's symbol clamp)
        z_hat = torch.clamp(ste_round(z), SYMBOL_MIN, SYMBOL_MAX)
        psi = self._hyper_decode(z_hat, y.shape[-2:])
        mean1, _ = self._entropy_params(psi, ctx.hyper)
        y1_hat = mean1 + torch.clamp(ste_round(y1 - mean1), SYMBOL_MIN, SYMBOL_MAX)
        mean2, _ = self._entropy_params(psi, ctx.hyper, y1_hat)
        y2_hat = mean2 + torch.clamp(ste_round(y2 - mean2), SYMBOL_MIN, SYMBOL_MAX)
        recon = self._decode_transform(torch.cat([y1_hat, y2_hat], dim=1), ctx, feature.shape[-2:])
        if not torch.all(torch.isfinite(recon)):
            raise FloatingPointError("non-finite activations in latent codec")

        rate = z_bits + y1_bits + y2_bits
        return CodedFeature(
            bits_estimate=RateEstimate(bits=float(rate.detach())),
            recon_feature=recon,
            noisy_latent=self.channel_squeeze(recon),
            bits_breakdown={
                "hyper": float(z_bits.detach()),
                "stage1": float(y1_bits.detach()),
                "stage2": float(y2_bits.detach()),
            },
            rate_tensor=rate,
        )

    # ---- coding path (real bitstream) ----

    def _code_symbols(self, values: torch.Tensor, means: torch.Tensor):
        raw = torch.round(values - means)
        clamped = torch.clamp(raw, SYMBOL_MIN, SYMBOL_MAX)
        overflow = int((raw != clamped).sum())
        return clamped, overflow

    def code_frame(self, feature: torch.Tensor, ctx: EntropyContext, coder=None) -> CodedFeature:
        """Encode one feature tensor to (hyper, stage1, stage2) payloads and
        reconstruct it exactly as the decoder will."""
        coder = coder or ReferenceCoder()
        self._check_ctx(feature, ctx)
        if feature.shape[0] != 1:
            raise ValueError("coding path expects batch size 1")
        with torch.no_grad():
            y = self._encode_transform(feature, ctx)
            z = self.hyper_enc(y)

            z_sym, ovf_z = self._code_symbols(z, torch.zeros_like(z))
            z_hat = z_sym.clone()
            z_cdfs = self.factorized.integer_cdfs()
            z_idx = np.arange(z.shape[1]).repeat(z.shape[2] * z.shape[3])
            z_payload = coder.encode(
                (z_sym.cpu().numpy().ravel() - SYMBOL_MIN).astype(np.int64), z_cdfs, z_idx
            )

            psi = self._hyper_decode(z_hat, y.shape[-2:])
            half = self.cfg.code_channels // 2
            y1, y2 = y[:, :half], y[:, half:]
            gauss_cdfs = scale_table_cdfs()

            mean1, scale1 = self._entropy_params(psi, ctx.hyper)
            s1, ovf1 = self._code_symbols(y1, mean1)
            p1 = coder.encode(
                (s1.cpu().numpy().ravel() - SYMBOL_MIN).astype(np.int64),
                gauss_cdfs,
                scale_indices(scale1),
            )
            y1_hat = s1 + mean1

            mean2, scale2 = self._entropy_params(psi, ctx.hyper, y1_hat)
            s2, ovf2 = self._code_symbols(y2, mean2)
            p2 = coder.encode(
                (s2.cpu().numpy().ravel() - SYMBOL_MIN).astype(np.int64),
                gauss_cdfs,
                scale_indices(scale2),
            )
            y2_hat = s2 + mean2

            y_hat = torch.cat([y1_hat, y2_hat], dim=1)
            recon = self._decode_transform(y_hat, ctx, feature.shape[-2:])

            est = float(
                self.factorized.bits(z_hat).sum()
                + likelihood_bits(y1_hat, mean1, scale1).sum()
                + likelihood_bits(y2_hat, mean2, scale2).sum()
            )
            coded_bits = 8 * (len(z_payload) + len(p1) + len(p2))
            overflow = ovf_z + ovf1 + ovf2
            self.overflow_total += overflow
            return CodedFeature(
                bits_estimate=RateEstimate(bits=est, coded_bits=coded_bits),
                recon_feature=recon,
                noisy_latent=self.channel_squeeze(recon),
                payloads=(z_payload, p1, p2),
                bits_breakdown={
                    "hyper": len(z_payload) * 8,
                    "stage1": len(p1) * 8,
                    "stage2": len(p2) * 8,
                },
                overflow_count=overflow,
            )

    def decode_frame(self, payloads, ctx: EntropyContext, latent_hw, coder=None):
        """Decode (hyper, stage1, stage2) payloads; returns (feature, latent)."""
        coder = coder or ReferenceCoder()
        z_payload, p1, p2 = payloads
        h, w = latent_hw
        yh, yw = _half(h), _half(w)
        zh, zw = _half(_half(yh)), _half(_half(yw))  # two stride-2 hyper stages
        with torch.no_grad():
            dev = next(self.parameters()).device
            z_cdfs = self.factorized.integer_cdfs()
            ch = self.cfg.hyper_channels
            z_idx = np.arange(ch).repeat(zh * zw)
            z_sym = coder.decode(z_payload, z_cdfs, z_idx) + SYMBOL_MIN
            z_hat = torch.from_numpy(z_sym.astype(np.float32)).reshape(1, ch, zh, zw).to(dev)

            psi = self._hyper_decode(z_hat, (yh, yw))
            half = self.cfg.code_channels // 2
            gauss_cdfs = scale_table_cdfs()

            mean1, scale1 = self._entropy_params(psi, ctx.hyper)
            s1 = coder.decode(p1, gauss_cdfs, scale_indices(scale1)) + SYMBOL_MIN
            y1_hat = (
                torch.from_numpy(s1.astype(np.float32)).reshape(1, half, yh, yw).to(dev) + mean1
            )

            mean2, scale2 = self._entropy_params(psi, ctx.hyper, y1_hat)
            s2 = coder.decode(p2, gauss_cdfs, scale_indices(scale2)) + SYMBOL_MIN
            y2_hat = (
                torch.from_numpy(s2.astype(np.float32)).reshape(1, half, yh, yw).to(dev) + mean2
            )

            y_hat = torch.cat([y1_hat, y2_hat], dim=1)
            recon = self._decode_transform(y_hat, ctx, (h, w))
            return recon, self.channel_squeeze(recon)


def _half(n: int) -> int:
    # matches a stride-2 3x3 convolution with padding 1
    return (n + 1) // 2
