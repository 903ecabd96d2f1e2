"""Single-step latent denoiser: a linear-attention transformer projects the
compressed latent onto the clean manifold in one deterministic update.

The mapping is: precondition l_bar = l / sigma_data, predict a raw velocity
v with the transformer, calibrate it to the consistency velocity F, then
take one trigonometric projection step

    denoised = sigma_data * (cos(t) * l_bar - sin(t) * F).

At t = 0 this is the identity regardless of the network output.
"""

from __future__ import annotations

import math

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import DenoiserConfig

T_MAX = math.pi / 2


def map_timestep(t):
    """Map a diffusion time t in [0, pi/2] to sin(t)/(cos(t)+sin(t)) in [0, 1]."""
    if isinstance(t, torch.Tensor):
        if torch.any(t < 0) or torch.any(t > T_MAX + 1e-12):
            raise ValueError("t outside [0, pi/2]")
        return torch.sin(t) / (torch.cos(t) + torch.sin(t))
    if not 0.0 <= t <= T_MAX + 1e-12:
        raise ValueError(f"t={t} outside [0, pi/2]")
    return math.sin(t) / (math.cos(t) + math.sin(t))


def calibrate_velocity(l_bar: torch.Tensor, v: torch.Tensor, t_scm) -> torch.Tensor:
    """Closed-form transform of the raw network output to the consistency velocity:

    ((1 - 2s) * l_bar + (1 - 2s + 2s^2) * v) / sqrt(s^2 + (1-s)^2),  s = t_scm.
    """
    if l_bar.shape != v.shape:
        raise ValueError(f"shape mismatch {tuple(l_bar.shape)} vs {tuple(v.shape)}")
    s = torch.as_tensor(t_scm, dtype=l_bar.dtype, device=l_bar.device)
    if torch.any(s < 0) or torch.any(s > 1):
        raise ValueError("t_scm outside [0, 1]")
    if s.dim() > 0 and s.numel() > 1:  # per-batch times against (B, C, H, W)
        s = s.view(-1, *([1] * (l_bar.dim() - 1)))
    num = (1 - 2 * s) * l_bar + (1 - 2 * s + 2 * s * s) * v
    return num / torch.sqrt(s * s + (1 - s) * (1 - s))


def _sincos_position_embedding(h: int, w: int, dim: int) -> torch.Tensor:
    """Fixed 2-D sine/cosine position table, (1, h*w, dim)."""
    assert dim % 4 == 0
    quarter = dim // 4
    omega = 1.0 / (10000 ** (np.arange(quarter) / quarter))
    ys, xs = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    out = []
    for pos in (ys.reshape(-1), xs.reshape(-1)):
        angles = np.outer(pos, omega)
        out += [np.sin(angles), np.cos(angles)]
    table = np.concatenate(out, axis=1).astype(np.float32)
    return torch.from_numpy(table)[None]


class LoRALinear(nn.Module):
    """Linear layer with an optional rank-r additive adapter (scale alpha/r = 1)."""

    def __init__(self, in_features, out_features, rank: int):
        super().__init__()
        self.base = nn.Linear(in_features, out_features)
        self.rank = rank
        if rank > 0:
            self.lora_a = nn.Parameter(torch.empty(rank, in_features))
            self.lora_b = nn.Parameter(torch.zeros(out_features, rank))
            nn.init.kaiming_uniform_(self.lora_a, a=math.sqrt(5))
        self.adapters_enabled = rank > 0
        self.merged = False

    def forward(self, x):
        out = self.base(x)
        if self.adapters_enabled and not self.merged:
            out = out + F.linear(F.linear(x, self.lora_a), self.lora_b)
        return out

    @torch.no_grad()
    def merge(self):
        if self.rank > 0 and not self.merged:
            self.base.weight += self.lora_b @ self.lora_a
            self.merged = True

    def lora_parameters(self):
        if self.rank > 0:
            yield self.lora_a
            yield self.lora_b


class LinearAttention(nn.Module):
    """Kernel linear attention (elu+1 feature map): cost linear in tokens."""

    def __init__(self, width, heads, rank):
        super().__init__()
        if width % heads:
            raise ValueError("width must divide by heads")
        self.heads = heads
        self.qkv = LoRALinear(width, 3 * width, rank)
        self.proj = LoRALinear(width, width, rank)

    def forward(self, x):
        b, n, d = x.shape
        qkv = self.qkv(x).reshape(b, n, 3, self.heads, d // self.heads)
        q, k, v = (qkv[:, :, i].transpose(1, 2) for i in range(3))  # (b, h, n, dh)
        q = F.elu(q) + 1
        k = F.elu(k) + 1
        kv = torch.einsum("bhnd,bhne->bhde", k, v)
        denom = torch.einsum("bhnd,bhd->bhn", q, k.sum(dim=2)).clamp_min(1e-6)
        out = torch.einsum("bhnd,bhde->bhne", q, kv) / denom[..., None]
        out = out.transpose(1, 2).reshape(b, n, d)
        return self.proj(out)


class DenoiserBlock(nn.Module):
    """Pre-norm transformer block with adaptive layernorm-zero conditioning."""

    def __init__(self, width, heads, rank):
        super().__init__()
        self.norm1 = nn.LayerNorm(width, elementwise_affine=False)
        self.attn = LinearAttention(width, heads, rank)
        self.norm2 = nn.LayerNorm(width, elementwise_affine=False)
        self.fc1 = LoRALinear(width, 4 * width, rank)
        self.fc2 = LoRALinear(4 * width, width, rank)
        self.modulation = nn.Linear(width, 6 * width)
        nn.init.zeros_(self.modulation.weight)
        nn.init.zeros_(self.modulation.bias)

    def forward(self, x, emb):
        sh1, sc1, g1, sh2, sc2, g2 = self.modulation(emb)[:, None].chunk(6, dim=-1)
        x = x + g1 * self.attn(self.norm1(x) * (1 + sc1) + sh1)
        h = self.fc2(F.gelu(self.fc1(self.norm2(x) * (1 + sc2) + sh2)))
        return x + g2 * h


class LatentDenoiser(nn.Module):
    """Linear-attention transformer over 1x1 latent patches plus the one-step
    consistency projection. ``forward_calls`` counts network evaluations so the
    single-evaluation contract is observable."""

    def __init__(self, cfg: DenoiserConfig | None = None):
        super().__init__()
        self.cfg = cfg or DenoiserConfig()
        w = self.cfg.width
        self.sigma_data = self.cfg.sigma_data
        self.embed = nn.Linear(self.cfg.latent_channels, w)
        self.time_mlp = nn.Sequential(nn.Linear(w, w), nn.SiLU(), nn.Linear(w, w))
        self.blocks = nn.ModuleList(
            DenoiserBlock(w, self.cfg.heads, self.cfg.lora_rank) for _ in range(self.cfg.depth)
        )
        self.norm_out = nn.LayerNorm(w, elementwise_affine=False)
        self.head = nn.Linear(w, self.cfg.latent_channels)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)
        self.forward_calls = 0
        self._pos_cache = {}

    def _timestep_embedding(self, t: torch.Tensor, dtype, device) -> torch.Tensor:
        half = self.cfg.width // 2
        freqs = torch.exp(
            -math.log(10000.0) * torch.arange(half, dtype=dtype, device=device) / half
        )
        angles = t.to(dtype)[:, None] * freqs[None] * 100.0
        return torch.cat([torch.sin(angles), torch.cos(angles)], dim=-1)

    def _positions(self, h, w, dtype, device):
        key = (h, w, dtype, device)
        if key not in self._pos_cache:
            self._pos_cache[key] = _sincos_position_embedding(h, w, self.cfg.width)
        return self._pos_cache[key].to(dtype=dtype, device=device)

    def dit_forward(self, l_bar: torch.Tensor, t) -> torch.Tensor:
        """Raw velocity prediction; same shape as the input latent."""
        if l_bar.dim() != 4 or l_bar.shape[1] != self.cfg.latent_channels:
            raise ValueError(f"expected (B, {self.cfg.latent_channels}, h, w) latent")
        self.forward_calls += 1
        b, c, h, w = l_bar.shape
        t = torch.as_tensor(t, dtype=l_bar.dtype, device=l_bar.device).reshape(-1)
        if t.numel() == 1:
            t = t.expand(b)
        x = l_bar.flatten(2).transpose(1, 2)  # (b, n, c), 1x1 patches
        x = self.embed(x) + self._positions(h, w, x.dtype, x.device)
        emb = self.time_mlp(self._timestep_embedding(t, x.dtype, x.device))
        for block in self.blocks:
            x = block(x, emb)
        v = self.head(self.norm_out(x))
        if not torch.all(torch.isfinite(v)):
            raise FloatingPointError("non-finite activations in denoiser")
        return v.transpose(1, 2).reshape(b, c, h, w)

    def one_step_denoise(self, noisy_latent: torch.Tensor, t: float) -> torch.Tensor:
        """Project the compressed latent onto the clean manifold with exactly
        one network evaluation."""
        if isinstance(t, torch.Tensor):
            if torch.any(t < 0) or torch.any(t > T_MAX + 1e-12):
                raise ValueError("t outside [0, pi/2]")
        elif not 0.0 <= t <= T_MAX + 1e-12:
            raise ValueError(f"t={t} outside [0, pi/2]")
        l_bar = noisy_latent / self.sigma_data
        v = self.dit_forward(l_bar, t)
        t_t = torch.as_tensor(t, dtype=noisy_latent.dtype, device=noisy_latent.device)
        f = calibrate_velocity(l_bar, v, map_timestep(t_t))
        cos_t = torch.cos(t_t)
        sin_t = torch.sin(t_t)
        if cos_t.dim() > 0 and cos_t.numel() > 1:
            cos_t = cos_t.view(-1, 1, 1, 1)
            sin_t = sin_t.view(-1, 1, 1, 1)
        return self.sigma_data * (cos_t * l_bar - sin_t * f)

    def merge_lora(self):
        for m in self.modules():
            if isinstance(m, LoRALinear):
                m.merge()

    def lora_parameters(self):
        for m in self.modules():
            if isinstance(m, LoRALinear):
                yield from m.lora_parameters()

    def freeze_base(self):
        """Train adapters only: base weights keep their generative prior."""
        lora = set(id(p) for p in self.lora_parameters())
        for p in self.parameters():
            p.requires_grad = id(p) in lora
