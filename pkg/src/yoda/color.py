"""ITU-R BT.709 color conversion for limited-range YUV 4:2:0 sources.

Reconstruction and reference frames must share one color definition before
any metric is computed, so the conversion here is deterministic: float64
matrix math, rounding to 8-bit, then scaling to [0, 1].
"""

import numpy as np

KR = 0.2126
KB = 0.0722
KG = 1.0 - KR - KB


def _bilinear_upsample_2x(plane: np.ndarray) -> np.ndarray:
    """Chroma upsampling with half-pel siting (9/16, 3/16, 3/16, 1/16 taps)."""
    p = np.pad(plane.astype(np.float64), 1, mode="edge")
    c = p[1:-1, 1:-1]
    up, down = p[:-2, 1:-1], p[2:, 1:-1]
    left, right = p[1:-1, :-2], p[1:-1, 2:]
    ul, ur = p[:-2, :-2], p[:-2, 2:]
    dl, dr = p[2:, :-2], p[2:, 2:]

    h, w = plane.shape
    out = np.empty((2 * h, 2 * w), dtype=np.float64)
    out[0::2, 0::2] = (9 * c + 3 * up + 3 * left + ul) / 16.0
    out[0::2, 1::2] = (9 * c + 3 * up + 3 * right + ur) / 16.0
    out[1::2, 0::2] = (9 * c + 3 * down + 3 * left + dl) / 16.0
    out[1::2, 1::2] = (9 * c + 3 * down + 3 * right + dr) / 16.0
    return out


def yuv420_to_rgb_bt709(y: np.ndarray, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Convert limited-range 8-bit YUV 4:2:0 planes to an RGB frame in [0, 1].

    Chroma planes are half resolution in both dimensions and are upsampled
    bilinearly. Output is rounded to 8-bit levels before scaling, so the
    conversion is bit-exact across platforms.
    """
    y = np.asarray(y)
    u = np.asarray(u)
    v = np.asarray(v)
    if y.ndim != 2 or u.shape != v.shape:
        raise ValueError("expected a 2-D luma plane and matching chroma planes")
    eh, ew = (y.shape[0] + 1) // 2, (y.shape[1] + 1) // 2
    if u.shape != (eh, ew):
        raise ValueError(f"chroma shape {u.shape} does not match luma {y.shape}")

    c = (y.astype(np.float64) - 16.0) * (255.0 / 219.0)
    d = (_bilinear_upsample_2x(u)[: y.shape[0], : y.shape[1]] - 128.0) * (255.0 / 224.0)
    e = (_bilinear_upsample_2x(v)[: y.shape[0], : y.shape[1]] - 128.0) * (255.0 / 224.0)

    r = c + 2.0 * (1.0 - KR) * e
    b = c + 2.0 * (1.0 - KB) * d
    g = c - (2.0 * (1.0 - KB) * KB / KG) * d - (2.0 * (1.0 - KR) * KR / KG) * e

    rgb = np.stack([r, g, b], axis=-1)
    rgb = np.clip(np.floor(rgb + 0.5), 0.0, 255.0)
    return (rgb / 255.0).astype(np.float32)


def rgb_to_yuv420_bt709(frame: np.ndarray) -> tuple:
    """Inverse conversion (used to synthesize YUV test material).

    Takes an RGB frame in [0, 1]; returns limited-range 8-bit (y, u, v)
    planes with 2x2-averaged chroma.
    """
    frame = np.asarray(frame, dtype=np.float64)
    if frame.ndim != 3 or frame.shape[2] != 3:
        raise ValueError("expected an (H, W, 3) frame")
    h, w = frame.shape[:2]
    if h % 2 or w % 2:
        raise ValueError("frame dimensions must be even for 4:2:0")
    r, g, b = frame[..., 0] * 255.0, frame[..., 1] * 255.0, frame[..., 2] * 255.0
    ey = KR * r + KG * g + KB * b
    epb = 0.5 * (b - ey) / (1.0 - KB)
    epr = 0.5 * (r - ey) / (1.0 - KR)
    y = np.clip(np.floor(16.0 + ey * (219.0 / 255.0) + 0.5), 0, 255).astype(np.uint8)
    u_full = 128.0 + epb * (224.0 / 255.0)
    v_full = 128.0 + epr * (224.0 / 255.0)
    u = u_full.reshape(h // 2, 2, w // 2, 2).mean(axis=(1, 3))
    v = v_full.reshape(h // 2, 2, w // 2, 2).mean(axis=(1, 3))
    u = np.clip(np.floor(u + 0.5), 0, 255).astype(np.uint8)
    v = np.clip(np.floor(v + 0.5), 0, 255).astype(np.uint8)
    return y, u, v
