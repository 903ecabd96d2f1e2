"""Frame input/output: Y4M (4:2:0) files and lossless image directories."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from .color import rgb_to_yuv420_bt709, yuv420_to_rgb_bt709

_SUPPORTED_C420 = {"420", "420jpeg", "420mpeg2", "420paldv"}


class FrameIOError(Exception):
    pass


def read_y4m(path):
    """Read a YUV4MPEG2 4:2:0 file as RGB frames via the BT.709 conversion."""
    with open(path, "rb") as f:
        data = f.read()
    newline = data.find(b"\n")
    if newline < 0 or not data.startswith(b"YUV4MPEG2"):
        raise FrameIOError(f"{path}: not a YUV4MPEG2 file")
    width = height = None
    colorspace = "420"
    for token in data[:newline].split()[1:]:
        tag, value = chr(token[0]), token[1:].decode("ascii", "replace")
        if tag == "W":
            width = int(value)
        elif tag == "H":
            height = int(value)
        elif tag == "C":
            colorspace = value
    if width is None or height is None:
        raise FrameIOError(f"{path}: missing W/H in header")
    if colorspace not in _SUPPORTED_C420:
        raise FrameIOError(f"{path}: unsupported colorspace C{colorspace}")
    if width % 2 or height % 2:
        raise FrameIOError(f"{path}: odd dimensions unsupported for 4:2:0")

    y_size = width * height
    c_size = (width // 2) * (height // 2)
    frames = []
    pos = newline + 1
    while pos < len(data):
        marker_end = data.find(b"\n", pos)
        if marker_end < 0 or not data[pos:marker_end].startswith(b"FRAME"):
            raise FrameIOError(f"{path}: bad frame marker at offset {pos}")
        pos = marker_end + 1
        if pos + y_size + 2 * c_size > len(data):
            raise FrameIOError(f"{path}: truncated frame at offset {pos}")
        y = np.frombuffer(data, np.uint8, y_size, pos).reshape(height, width)
        pos += y_size
        u = np.frombuffer(data, np.uint8, c_size, pos).reshape(height // 2, width // 2)
        pos += c_size
        v = np.frombuffer(data, np.uint8, c_size, pos).reshape(height // 2, width // 2)
        pos += c_size
        frames.append(yuv420_to_rgb_bt709(y, u, v))
    return frames


def write_y4m(path, frames, fps=(25, 1)) -> None:
    frames = list(frames)
    if not frames:
        raise FrameIOError("no frames to write")
    h, w = frames[0].shape[:2]
    with open(path, "wb") as f:
        f.write(f"YUV4MPEG2 W{w} H{h} F{fps[0]}:{fps[1]} Ip A1:1 C420\n".encode())
        for frame in frames:
            y, u, v = rgb_to_yuv420_bt709(frame)
            f.write(b"FRAME\n")
            f.write(y.tobytes())
            f.write(u.tobytes())
            f.write(v.tobytes())


def read_image_dir(path):
    """Frames from a directory of images, sorted by filename."""
    paths = sorted(
        p for p in Path(path).iterdir()
        if p.suffix.lower() in (".png", ".bmp", ".tif", ".tiff")
    )
    if not paths:
        raise FrameIOError(f"{path}: no image files found")
    frames = []
    for p in paths:
        img = np.asarray(Image.open(p).convert("RGB"), dtype=np.float32) / 255.0
        frames.append(img)
    return frames


def write_image_dir(path, frames, prefix="frame") -> None:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    for i, frame in enumerate(frames):
        arr = np.clip(np.round(np.asarray(frame) * 255.0), 0, 255).astype(np.uint8)
        Image.fromarray(arr).save(out / f"{prefix}_{i:05d}.png")


def load_frames(path):
    """Dispatch on input type: .y4m file or an image directory."""
    p = Path(path)
    if p.is_dir():
        return read_image_dir(p)
    if p.suffix.lower() == ".y4m":
        return read_y4m(p)
    raise FrameIOError(f"{path}: expected a .y4m file or an image directory")
