"""Sequence-level coding under the low-delay IPPP structure, and the container.

Frame 0 and every ``intra_period``-th frame are intra-coded with the intra
pipeline; the rest are predicted frames conditioned on the previous
reconstruction (frame autoencoder) and on the cached codec feature (entropy
conditions). The feature cache restarts at each intra frame, so groups of
pictures are independently decodable.

Container layout (little-endian):
  magic "YODA" | version u8 | width u16 | height u16 | padded_w u16 |
  padded_h u16 | intra_period u16 | frame_count u32 | lambda_index u8 |
  frame records: type u8, then three [u32 length][bytes] chunks
  (hyper, stage 1, stage 2).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .autoencoder import DOWNSAMPLE_FACTOR, crop_frame, pad_frame
from .model import FrameState, VideoCodec

MAGIC = b"YODA"
CONTAINER_VERSION = 1
_HEADER = struct.Struct("<4sBHHHHHIB")

FRAME_INTRA = 0
FRAME_PREDICTED = 1


class DataError(Exception):
    """Malformed input data or bitstream."""


class ModelError(Exception):
    """Checkpoint does not match the request or the bitstream."""


@dataclass
class SequenceResult:
    bitstream: bytes = b""
    reconstructions: list = field(default_factory=list)  # cropped (H, W, 3) arrays
    frame_types: list = field(default_factory=list)
    frame_stats: list = field(default_factory=list)

    @property
    def bpp(self) -> float:
        if not self.reconstructions:
            return 0.0
        h, w = self.reconstructions[0].shape[:2]
        payload = len(self.bitstream) - _HEADER.size
        return 8.0 * payload / (len(self.reconstructions) * h * w)


def _frame_schedule(frame_count: int, intra_period: int):
    for t in range(frame_count):
        yield t, (FRAME_INTRA if t % intra_period == 0 else FRAME_PREDICTED)


def encode_sequence(frames, codec: VideoCodec, intra_period: int = 32,
                    coder=None) -> SequenceResult:
    """Encode frames ((H, W, 3) arrays in [0, 1]) into a sequence bitstream.

    The encoder tracks exactly the decoder's state: every frame is fully
    decoded (entropy values, feature, denoise, frame) before it is used as a
    reference.
    """
    frames = list(frames)
    if not frames:
        raise DataError("no frames to encode")
    if intra_period < 1:
        raise DataError("intra_period must be >= 1")
    h, w = frames[0].shape[:2]
    for i, f in enumerate(frames):
        if f.shape != frames[0].shape:
            raise DataError(f"frame {i} resolution differs")

    padded0, _ = pad_frame(frames[0])
    ph, pw = padded0.shape[:2]
    header = _HEADER.pack(
        MAGIC, CONTAINER_VERSION, w, h, pw, ph, intra_period, len(frames),
        codec.lambda_index,
    )
    out = [header]
    result = SequenceResult()
    state = FrameState()
    for t, ftype in _frame_schedule(len(frames), intra_period):
        padded, true_size = pad_frame(frames[t])
        if ftype == FRAME_INTRA:
            payloads, intra_state, stats = codec.intra.code_frame(padded, FrameState(), coder)
            # feature cache restarts: the predicted pipeline's first frame in a
            # GOP runs with zero entropy context
            state = FrameState(recon=intra_state.recon, feature=None)
        else:
            payloads, state, stats = codec.predicted.code_frame(padded, state, coder)
        record = [struct.pack("<B", ftype)]
        for p in payloads:
            record.append(struct.pack("<I", len(p)))
            record.append(p)
        out.append(b"".join(record))
        result.frame_types.append(ftype)
        result.frame_stats.append(stats)
        result.reconstructions.append(
            crop_frame(codec.predicted.recon_to_frame(state), true_size)
        )
    result.bitstream = b"".join(out)
    return result


def frame_payload_sizes(bitstream: bytes):
    """Scan the container: list of (frame_type, payload_bytes) per frame.
    Payload bytes include the type byte and chunk length fields (everything
    the frame contributes to the file)."""
    if len(bitstream) < _HEADER.size:
        raise DataError("bitstream shorter than header")
    magic, version, *_rest, frame_count, _li = _HEADER.unpack(bitstream[: _HEADER.size])
    if magic != MAGIC or version != CONTAINER_VERSION:
        raise DataError("bad container header")
    pos = _HEADER.size
    sizes = []
    for t in range(frame_count):
        start = pos
        if pos >= len(bitstream):
            raise DataError(f"truncated at frame {t}")
        ftype = bitstream[pos]
        pos += 1
        for _ in range(3):
            if pos + 4 > len(bitstream):
                raise DataError(f"truncated chunk length at offset {pos}")
            (n,) = struct.unpack("<I", bitstream[pos: pos + 4])
            pos += 4 + n
        if pos > len(bitstream):
            raise DataError(f"truncated chunk payload in frame {t}")
        sizes.append((ftype, pos - start))
    return sizes


def decode_sequence(bitstream: bytes, codec: VideoCodec, coder=None):
    """Decode a sequence bitstream to cropped frames."""
    if len(bitstream) < _HEADER.size:
        raise DataError(f"bitstream shorter than header ({len(bitstream)} bytes)")
    magic, version, w, h, pw, ph, intra_period, frame_count, lambda_index = _HEADER.unpack(
        bitstream[: _HEADER.size]
    )
    if magic != MAGIC:
        raise DataError(f"bad magic {magic!r} at offset 0")
    if version != CONTAINER_VERSION:
        raise DataError(f"unsupported container version {version}")
    if lambda_index != codec.lambda_index:
        raise ModelError(
            f"bitstream was produced at rate point {lambda_index}, "
            f"model is rate point {codec.lambda_index}"
        )
    if ph % DOWNSAMPLE_FACTOR or pw % DOWNSAMPLE_FACTOR:
        raise DataError("padded dimensions are not codec-aligned")

    latent_hw = (ph // DOWNSAMPLE_FACTOR, pw // DOWNSAMPLE_FACTOR)
    pos = _HEADER.size
    frames = []
    state = FrameState()
    for t in range(frame_count):
        if pos + 1 > len(bitstream):
            raise DataError(f"truncated bitstream at frame {t} (offset {pos})")
        ftype = bitstream[pos]
        pos += 1
        if ftype not in (FRAME_INTRA, FRAME_PREDICTED):
            raise DataError(f"unknown frame type {ftype} at offset {pos - 1}")
        if ftype == FRAME_PREDICTED and t % intra_period == 0:
            raise DataError(f"frame {t} must be intra per the header schedule")
        payloads = []
        for _ in range(3):
            if pos + 4 > len(bitstream):
                raise DataError(f"truncated chunk length at offset {pos}")
            (n,) = struct.unpack("<I", bitstream[pos: pos + 4])
            pos += 4
            if pos + n > len(bitstream):
                raise DataError(f"truncated chunk payload at offset {pos}")
            payloads.append(bitstream[pos: pos + n])
            pos += n
        if ftype == FRAME_INTRA:
            intra_state = codec.intra.decode_frame(tuple(payloads), FrameState(), latent_hw, coder)
            state = FrameState(recon=intra_state.recon, feature=None)
        else:
            if state.recon is None:
                raise DataError(f"predicted frame {t} without a reference")
            state = codec.predicted.decode_frame(tuple(payloads), state, latent_hw, coder)
        frames.append(crop_frame(codec.predicted.recon_to_frame(state), (h, w)))
    if pos != len(bitstream):
        raise DataError(f"{len(bitstream) - pos} trailing bytes after frame data")
    return frames
