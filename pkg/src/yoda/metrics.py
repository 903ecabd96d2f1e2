"""Quality metrics and Bjontegaard rate deltas for RD evaluation."""

import warnings

import numpy as np
import torch
import torch.nn.functional as F
from scipy.interpolate import PchipInterpolator

PSNR_CAP = 100.0

_MSSSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
_WINDOW_SIZE = 11
_WINDOW_SIGMA = 1.5
_K1, _K2 = 0.01, 0.03


def psnr(x: np.ndarray, x_hat: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB for frames in [0, 1], capped at 100."""
    x = np.asarray(x, dtype=np.float64)
    x_hat = np.asarray(x_hat, dtype=np.float64)
    if x.shape != x_hat.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {x_hat.shape}")
    mse = float(np.mean((x - x_hat) ** 2))
    if mse <= 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))


def _gaussian_window(size: int, sigma: float) -> torch.Tensor:
    coords = torch.arange(size, dtype=torch.float64) - (size - 1) / 2.0
    g = torch.exp(-(coords**2) / (2 * sigma**2))
    return (g / g.sum()).view(1, 1, -1)


def _ssim_components(x, y, window):
    c1 = _K1**2
    c2 = _K2**2

    def blur(t):
        ch = t.shape[1]
        t = F.conv2d(t, window.unsqueeze(2).expand(ch, 1, 1, -1), groups=ch)
        return F.conv2d(t, window.unsqueeze(3).expand(ch, 1, -1, 1), groups=ch)

    pad = 0  # valid convolution, as in the reference implementation
    mu_x, mu_y = blur(x), blur(y)
    sigma_x = blur(x * x) - mu_x**2
    sigma_y = blur(y * y) - mu_y**2
    sigma_xy = blur(x * y) - mu_x * mu_y
    cs = (2 * sigma_xy + c2) / (sigma_x + sigma_y + c2)
    lum = (2 * mu_x * mu_y + c1) / (mu_x**2 + mu_y**2 + c1)
    return float(lum.mean()), float(cs.mean())


def ms_ssim(x: np.ndarray, x_hat: np.ndarray, weights=_MSSSIM_WEIGHTS) -> float:
    """Multi-scale SSIM over up to five dyadic scales for frames in [0, 1].

    Images too small for the full pyramid fall back to the scales that still
    fit the 11x11 window, with the weights renormalized (a warning is issued).
    """
    x = np.asarray(x, dtype=np.float64)
    x_hat = np.asarray(x_hat, dtype=np.float64)
    if x.shape != x_hat.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {x_hat.shape}")
    if x.ndim == 2:
        x = x[..., None]
        x_hat = x_hat[..., None]

    min_side = min(x.shape[0], x.shape[1])
    levels = len(weights)
    max_levels = max(1, int(np.floor(np.log2(min_side / _WINDOW_SIZE))) + 1)
    if max_levels < levels:
        warnings.warn(
            f"image {x.shape[:2]} too small for {levels}-scale MS-SSIM; "
            f"falling back to {max_levels} scales"
        )
        levels = max_levels
    w = np.asarray(weights[:levels], dtype=np.float64)
    w = w / w.sum()

    window = _gaussian_window(_WINDOW_SIZE, _WINDOW_SIGMA)
    a = torch.from_numpy(x).permute(2, 0, 1).unsqueeze(0)
    b = torch.from_numpy(x_hat).permute(2, 0, 1).unsqueeze(0)

    score = 1.0
    with torch.no_grad():
        for level in range(levels):
            lum, cs = _ssim_components(a, b, window)
            if level == levels - 1:
                score *= max(lum * cs, 0.0) ** w[level]
            else:
                score *= max(cs, 0.0) ** w[level]
                a = F.avg_pool2d(a, 2)
                b = F.avg_pool2d(b, 2)
    return float(score)


def bd_rate(anchor, test) -> float:
    """Average rate difference (percent) of ``test`` against ``anchor``.

    Each curve is a sequence of (bpp, quality) points, at least four, with
    distinct rates. log-rate is interpolated piecewise-cubically (PCHIP) over
    quality and integrated over the common quality interval; the result is
    100*(exp(mean log-rate difference) - 1).
    """
    curves = []
    for name, curve in (("anchor", anchor), ("test", test)):
        pts = sorted((float(b), float(q)) for b, q in curve)
        if len(pts) < 4:
            raise ValueError(f"{name} curve needs at least 4 points")
        bpps = np.array([p[0] for p in pts])
        quals = np.array([p[1] for p in pts])
        if np.any(bpps <= 0):
            raise ValueError(f"{name} curve has non-positive rates")
        if len(np.unique(bpps)) != len(bpps):
            raise ValueError(f"{name} curve has duplicate rates")
        order = np.argsort(quals)
        quals, bpps = quals[order], bpps[order]
        if np.any(np.diff(quals) <= 0):
            raise ValueError(f"{name} curve quality values must be distinct")
        curves.append((quals, np.log(bpps)))

    (qa, ra), (qt, rt) = curves
    lo = max(qa.min(), qt.min())
    hi = min(qa.max(), qt.max())
    if hi <= lo:
        raise ValueError("RD curves have no overlapping quality range")

    int_a = PchipInterpolator(qa, ra).antiderivative()
    int_t = PchipInterpolator(qt, rt).antiderivative()
    mean_diff = ((int_t(hi) - int_t(lo)) - (int_a(hi) - int_a(lo))) / (hi - lo)
    return float(100.0 * (np.exp(mean_diff) - 1.0))
