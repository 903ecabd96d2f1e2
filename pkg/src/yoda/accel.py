"""Bridge to the out-of-process accelerated entropy coder.

The accelerated coder is a separate package (``accel/`` at the repository
root) that mirrors the reference range coder bit-exactly. It is reached over
a persistent subprocess speaking a framed little-endian binary protocol,
batch-oriented (one call per payload) so the crossing cost is amortized:

  request:  u8 op (1 encode / 2 decode) | u32 n_symbols | u32 n_cdfs |
            u32 bank_len | u32 blob_len |
            offsets (n_cdfs+1) u32 | precisions n_cdfs u8 | bank u32 |
            indices n_symbols u32 | blob (encode: n_symbols i32 symbols;
                                         decode: payload bytes)
  response: u8 status (0 ok) | u32 len | bytes (payload / i32 symbols /
            utf-8 error message)
"""

from __future__ import annotations

import atexit
import os
import struct
import subprocess
from pathlib import Path

import numpy as np


class AcceleratedCoderError(RuntimeError):
    pass


def default_server_path() -> Path:
    override = os.environ.get("YODA_ACCEL_SERVER")
    if override:
        return Path(override)
    return Path(__file__).resolve().parents[2] / "accel" / "dist" / "server.js"


def accel_available() -> bool:
    return default_server_path().exists()


class AcceleratedCoder:
    """Drop-in entropy backend; byte-compatible with ``ReferenceCoder``."""

    name = "accel"

    def __init__(self, server_path=None, node_bin="node"):
        self.server_path = Path(server_path or default_server_path())
        if not self.server_path.exists():
            raise AcceleratedCoderError(
                f"accelerated coder not built: {self.server_path} missing "
                f"(run `npm run build` in accel/)"
            )
        self._proc = subprocess.Popen(
            [node_bin, str(self.server_path)],
            stdin=subprocess.PIPE,
            stdout=subprocess.PIPE,
        )
        atexit.register(self.close)

    def close(self):
        if self._proc and self._proc.poll() is None:
            self._proc.stdin.close()
            self._proc.wait(timeout=5)
        self._proc = None

    @staticmethod
    def _flatten(cdf_bank):
        offsets = np.zeros(len(cdf_bank) + 1, dtype=np.uint32)
        precisions = np.zeros(len(cdf_bank), dtype=np.uint8)
        parts = []
        total = 0
        for i, cdf in enumerate(cdf_bank):
            arr = np.asarray(cdf.cdf, dtype=np.uint32)
            parts.append(arr)
            total += arr.size
            offsets[i + 1] = total
            precisions[i] = cdf.precision
        return offsets, precisions, np.concatenate(parts)

    def _roundtrip(self, op, n_symbols, cdf_bank, indices, blob: bytes) -> bytes:
        if self._proc is None or self._proc.poll() is not None:
            raise AcceleratedCoderError("accelerated coder process is not running")
        offsets, precisions, bank = self._flatten(cdf_bank)
        header = struct.pack(
            "<BIIII", op, n_symbols, len(cdf_bank), bank.size, len(blob)
        )
        msg = b"".join([
            header,
            offsets.tobytes(),
            precisions.tobytes(),
            bank.tobytes(),
            np.asarray(indices, dtype=np.uint32).tobytes(),
            blob,
        ])
        self._proc.stdin.write(msg)
        self._proc.stdin.flush()
        head = self._proc.stdout.read(5)
        if len(head) != 5:
            raise AcceleratedCoderError("accelerated coder closed the stream")
        status, length = struct.unpack("<BI", head)
        body = self._proc.stdout.read(length)
        if len(body) != length:
            raise AcceleratedCoderError("short read from accelerated coder")
        if status != 0:
            from .rangecoder import CorruptPayloadError

            message = body.decode("utf-8", "replace")
            if status == 2:
                raise CorruptPayloadError(message)
            raise AcceleratedCoderError(message)
        return body

    def encode(self, symbols: np.ndarray, cdf_bank, indices) -> bytes:
        symbols = np.asarray(symbols, dtype=np.int32)
        return self._roundtrip(1, symbols.size, cdf_bank, indices, symbols.tobytes())

    def decode(self, payload: bytes, cdf_bank, indices) -> np.ndarray:
        out = self._roundtrip(2, len(indices), cdf_bank, indices, payload)
        return np.frombuffer(out, dtype=np.int32).astype(np.int64)


def make_coder(name: str):
    """Entropy backend factory for the CLI flag."""
    if name == "reference":
        from .latent_codec import ReferenceCoder

        return ReferenceCoder()
    if name == "accel":
        return AcceleratedCoder()
    raise ValueError(f"unknown coder backend {name!r}")
