"""Command-line front end.

Exit codes: 0 success, 1 usage error, 2 data error, 3 model/backend error.
"""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

import numpy as np
import torch

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_MODEL = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


class UsageError(Exception):
    pass


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="yoda", description="one-step-diffusion video codec")
    parser.add_argument("--coder", choices=("reference", "accel"), default="reference",
                        help="entropy coding backend")
    sub = parser.add_subparsers(dest="command", required=True)

    enc = sub.add_parser("encode", help="encode frames to a .yoda bitstream")
    enc.add_argument("--input", required=True, help="y4m file or image directory")
    enc.add_argument("--model", required=True, help="codec checkpoint")
    enc.add_argument("--lambda", dest="lambda_rate", type=float, required=True,
                     choices=(1.0, 2.0, 4.0, 8.0), help="rate point of the model")
    enc.add_argument("--intra-period", type=int, default=32)
    enc.add_argument("--output", required=True)

    dec = sub.add_parser("decode", help="decode a .yoda bitstream to images")
    dec.add_argument("--input", required=True)
    dec.add_argument("--model", required=True, help="codec checkpoint")
    dec.add_argument("--output", required=True, help="output image directory")

    tr = sub.add_parser("train", help="run one training stage")
    tr.add_argument("--stage", type=int, required=True, choices=(1, 2, 3))
    tr.add_argument("--config", required=True, help="run config JSON")

    ev = sub.add_parser("eval", help="per-frame quality/rate report")
    ev.add_argument("--recon", required=True, help="reconstruction directory")
    ev.add_argument("--ref", required=True, help="reference directory or y4m")
    ev.add_argument("--bits", required=True, help=".yoda bitstream for rate accounting")
    ev.add_argument("--report", required=True, help="output CSV")

    bd = sub.add_parser("bdrate", help="rate delta between two RD point CSVs")
    bd.add_argument("--anchor", required=True)
    bd.add_argument("--test", required=True)
    bd.add_argument("--metric", default="psnr")
    return parser


def _load_codec(path, lambda_rate=None):
    from .model import VideoCodec
    from .pipeline import ModelError

    try:
        codec = VideoCodec.load(path)
    except FileNotFoundError:
        raise ModelError(f"checkpoint not found: {path}")
    except Exception as exc:  # corrupt / wrong format
        raise ModelError(f"cannot load checkpoint {path}: {exc}")
    if lambda_rate is not None and codec.lambda_rate != lambda_rate:
        raise ModelError(
            f"checkpoint is the lambda_rate={codec.lambda_rate} model, "
            f"requested {lambda_rate}"
        )
    return codec


def cmd_encode(args, coder) -> int:
    from .frameio import load_frames
    from .pipeline import encode_sequence

    codec = _load_codec(args.model, args.lambda_rate)
    frames = load_frames(args.input)
    result = encode_sequence(frames, codec, intra_period=args.intra_period, coder=coder)
    Path(args.output).write_bytes(result.bitstream)
    print(f"encoded {len(frames)} frames, {len(result.bitstream)} bytes, "
          f"{result.bpp:.4f} bpp")
    return EXIT_OK


def cmd_decode(args, coder) -> int:
    from .frameio import write_image_dir
    from .pipeline import decode_sequence

    codec = _load_codec(args.model)
    data = Path(args.input).read_bytes()
    frames = decode_sequence(data, codec, coder=coder)
    write_image_dir(args.output, frames)
    print(f"decoded {len(frames)} frames to {args.output}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .config import RunConfig
    from .train import train_stage1, train_stage2, train_stage3

    run = RunConfig.from_json(args.config)
    run.stage = args.stage
    run.schedule.stage = args.stage
    stage_fn = {1: train_stage1, 2: train_stage2, 3: train_stage3}[args.stage]
    result = stage_fn(run)
    print(f"stage {args.stage} finished; checkpoint at {result.checkpoint}")
    for key, value in result.heldout.items():
        print(f"  heldout {key}: {value}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .frameio import load_frames
    from .metrics import ms_ssim, psnr
    from .pipeline import DataError, frame_payload_sizes

    recon = load_frames(args.recon)
    ref = load_frames(args.ref)
    if len(recon) != len(ref):
        raise DataError(f"{len(recon)} reconstructions vs {len(ref)} references")
    sizes = frame_payload_sizes(Path(args.bits).read_bytes())
    if len(sizes) != len(ref):
        raise DataError(f"bitstream has {len(sizes)} frames, expected {len(ref)}")
    import warnings

    rows = []
    for t, (r, x) in enumerate(zip(recon, ref)):
        h, w = x.shape[:2]
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            rows.append({
                "frame": t,
                "bpp": 8.0 * sizes[t][1] / (h * w),
                "psnr": psnr(x, r),
                "ms_ssim": ms_ssim(x, r),
            })
    with open(args.report, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=["frame", "bpp", "psnr", "ms_ssim"])
        writer.writeheader()
        writer.writerows(rows)
    mean_bpp = float(np.mean([r["bpp"] for r in rows]))
    mean_psnr = float(np.mean([r["psnr"] for r in rows]))
    mean_ssim = float(np.mean([r["ms_ssim"] for r in rows]))
    print(f"frames={len(rows)} bpp={mean_bpp:.4f} psnr={mean_psnr:.2f} "
          f"ms_ssim={mean_ssim:.4f}")
    return EXIT_OK


def _read_rd_points(path, metric):
    from .pipeline import DataError

    with open(path) as f:
        rows = list(csv.DictReader(f))
    if not rows:
        raise DataError(f"{path}: empty CSV")
    if metric not in rows[0]:
        raise DataError(f"{path}: no '{metric}' column")
    return [(float(r["bpp"]), float(r[metric])) for r in rows]


def cmd_bdrate(args) -> int:
    from .metrics import bd_rate
    from .pipeline import DataError

    anchor = _read_rd_points(args.anchor, args.metric)
    test = _read_rd_points(args.test, args.metric)
    try:
        delta = bd_rate(anchor, test)
    except ValueError as exc:
        raise DataError(str(exc))
    print(f"BD-rate ({args.metric}): {delta:+.2f}%")
    return EXIT_OK


def main(argv=None) -> int:
    torch.set_num_threads(1)  # tiny tensors; thread sync costs more than it saves
    parser = build_parser()
    from .accel import AcceleratedCoderError, make_coder
    from .frameio import FrameIOError
    from .pipeline import DataError, ModelError
    from .rangecoder import CorruptPayloadError

    try:
        args = parser.parse_args(argv)
        if args.command in ("encode", "decode"):
            coder = make_coder(args.coder)
        else:
            coder = None
        if args.command == "encode":
            return cmd_encode(args, coder)
        if args.command == "decode":
            return cmd_decode(args, coder)
        if args.command == "train":
            return cmd_train(args)
        if args.command == "eval":
            return cmd_eval(args)
        if args.command == "bdrate":
            return cmd_bdrate(args)
        raise UsageError(f"unknown command {args.command}")
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FrameIOError, CorruptPayloadError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ModelError, AcceleratedCoderError) as exc:
        print(f"model error: {exc}", file=sys.stderr)
        return EXIT_MODEL


if __name__ == "__main__":
    sys.exit(main())
