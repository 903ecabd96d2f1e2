"""Reconstruction and adversarial objectives.

The composite distortion is lambda1 * MSE plus two perceptual terms supplied
by a plugin pair. Pretrained perceptual backbones are out of scope here, so
the default plugin is a deterministic surrogate: feature distances under a
fixed-seed random convolution stack. It satisfies the distance axioms, is
differentiable, and shares the (x, x_hat) -> scalar call signature of the
learned metrics it stands in for.
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import LossWeights


class RandomFeatureDistance(nn.Module):
    """Multi-scale feature MSE under a frozen random conv pyramid.

    The output is calibrated at construction so that, like the learned
    perceptual metrics this stands in for, its magnitude is commensurate with
    pixel MSE; unit loss weights then balance the distortion terms instead of
    letting the feature terms drown the pixel term.
    """

    def __init__(self, seed: int = 0, channels=(8, 16, 24)):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        convs = []
        c_in = 3
        for c_out in channels:
            conv = nn.Conv2d(c_in, c_out, 3, stride=2, padding=1)
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) * 0.3)
                conv.bias.zero_()
            convs.append(conv)
            c_in = c_out
        self.convs = nn.ModuleList(convs)
        for p in self.parameters():
            p.requires_grad_(False)
        self.scale = 1.0
        with torch.no_grad():
            probe = torch.rand(2, 3, 64, 64, generator=gen)
            noisy = torch.clamp(
                probe + 0.1 * torch.randn(probe.shape, generator=gen), 0, 1
            )
            raw = float(self._raw_distance(probe, noisy))
            mse = float(F.mse_loss(probe, noisy))
            self.scale = mse / max(raw, 1e-12)

    def features(self, x):
        feats = []
        h = x
        for conv in self.convs:
            h = torch.tanh(conv(h))
            feats.append(h)
        return feats

    def _raw_distance(self, x, x_hat):
        total = 0.0
        for fa, fb in zip(self.features(x), self.features(x_hat)):
            total = total + F.mse_loss(fa, fb)
        return total

    def forward(self, x: torch.Tensor, x_hat: torch.Tensor) -> torch.Tensor:
        return self.scale * self._raw_distance(x, x_hat)


_PLUGINS = None


def default_perceptual_plugins():
    """The two default perceptual terms (distinct fixed seeds)."""
    global _PLUGINS
    if _PLUGINS is None:
        _PLUGINS = (RandomFeatureDistance(seed=101), RandomFeatureDistance(seed=202))
    return _PLUGINS


def _as_batched(x) -> torch.Tensor:
    if isinstance(x, np.ndarray):
        if x.ndim != 3 or x.shape[2] != 3:
            raise ValueError(f"expected (H, W, 3) frame, got {x.shape}")
        x = torch.from_numpy(np.ascontiguousarray(x, dtype=np.float32)).permute(2, 0, 1)[None]
    if x.dim() == 3:
        x = x[None]
    return x


def rec_loss(x, x_hat, weights: LossWeights | None = None, perceptual=None) -> torch.Tensor:
    """lambda1 * MSE + lambda2 * P1 + lambda3 * P2."""
    weights = weights or LossWeights()
    x = _as_batched(x)
    x_hat = _as_batched(x_hat)
    if x.shape != x_hat.shape:
        raise ValueError(f"shape mismatch {tuple(x.shape)} vs {tuple(x_hat.shape)}")
    p1, p2 = perceptual or default_perceptual_plugins()
    total = weights.lambda1 * F.mse_loss(x_hat, x)
    if weights.lambda2:
        total = total + weights.lambda2 * p1(x, x_hat)
    if weights.lambda3:
        total = total + weights.lambda3 * p2(x, x_hat)
    return total


class PatchDiscriminator(nn.Module):
    """Convolutional discriminator emitting a patch grid of logits
    (three stride-2 stages: 64x64 input -> 8x8 patches)."""

    def __init__(self, base: int = 32):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(3, base, 4, stride=2, padding=1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(base, base * 2, 4, stride=2, padding=1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(base * 2, base * 4, 4, stride=2, padding=1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(base * 4, 1, 3, padding=1),
        )

    def forward(self, x):
        return self.net(x)


def adv_losses(x, x_hat, discriminator) -> dict:
    """Hinge GAN losses over the discriminator's patch grid."""
    x = _as_batched(x)
    x_hat = _as_batched(x_hat)
    real_logits = discriminator(x)
    fake_logits_d = discriminator(x_hat.detach())
    d_loss = 0.5 * (F.relu(1.0 - real_logits).mean() + F.relu(1.0 + fake_logits_d).mean())
    g_loss = -discriminator(x_hat).mean()
    return {"d_loss": d_loss, "g_loss": g_loss}
