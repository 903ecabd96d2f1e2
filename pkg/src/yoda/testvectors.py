"""Cross-implementation test vectors and benchmarks for the range coder.

The accelerated coder must produce byte-identical payloads, so this module
emits a corpus of randomized (cdf, symbols, payload) cases in a compact
binary form, and provides a reference-throughput benchmark. Vector layout
(little-endian):

  u32 case_count, then per case:
    u8 precision | u32 alphabet | (alphabet+1) x u32 cdf |
    u32 n_symbols | n_symbols x u32 symbols |
    u32 payload_len | payload bytes
"""

from __future__ import annotations

import argparse
import struct
import sys
import time

import numpy as np

from .rangecoder import quantize_pmf, range_decode, range_encode


def generate_cases(seed: int, count: int, max_len: int = 256):
    rng = np.random.default_rng(seed)
    for _ in range(count):
        precision = int(rng.integers(8, 17))
        alphabet = int(rng.integers(1, min(300, (1 << precision) // 2) + 1))
        pmf = rng.random(alphabet) + 1e-9
        if rng.random() < 0.2:
            pmf = pmf**8  # skewed: exercises carries and long renorm runs
        cdf = quantize_pmf(pmf, precision)
        n = int(rng.integers(0, max_len))
        valid = np.flatnonzero(np.diff(cdf.cdf) > 0)
        symbols = valid[rng.integers(0, len(valid), n)]
        payload = range_encode(symbols, [cdf] * n)
        yield cdf, symbols, payload


def write_vectors(path: str, seed: int, count: int) -> None:
    with open(path, "wb") as f:
        f.write(struct.pack("<I", count))
        for cdf, symbols, payload in generate_cases(seed, count):
            f.write(struct.pack("<BI", cdf.precision, cdf.alphabet_size))
            f.write(np.asarray(cdf.cdf, dtype=np.uint32).tobytes())
            f.write(struct.pack("<I", len(symbols)))
            f.write(np.asarray(symbols, dtype=np.uint32).tobytes())
            f.write(struct.pack("<I", len(payload)))
            f.write(payload)


def bench(n_symbols: int, seed: int = 0) -> float:
    """Encode+decode wall time for one uniform-ish stream of n symbols."""
    rng = np.random.default_rng(seed)
    cdf = quantize_pmf(rng.random(256) + 0.05, 16)
    symbols = rng.integers(0, 256, n_symbols)
    cdfs = [cdf] * n_symbols
    t0 = time.perf_counter()
    payload = range_encode(symbols, cdfs)
    decoded = range_decode(payload, cdfs)
    elapsed = time.perf_counter() - t0
    assert decoded == symbols.tolist()
    return elapsed


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="yoda-testvectors")
    parser.add_argument("--out", help="write a vector corpus to this path")
    parser.add_argument("--count", type=int, default=1000)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--bench", type=int, default=0,
                        help="time encode+decode of N symbols instead")
    args = parser.parse_args(argv)
    if args.bench:
        print(f"{bench(args.bench, args.seed):.6f}")
        return 0
    if not args.out:
        parser.error("--out or --bench required")
    write_vectors(args.out, args.seed, args.count)
    print(f"wrote {args.count} cases to {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
