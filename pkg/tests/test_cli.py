import csv

import numpy as np
import pytest
import torch

from yoda.cli import EXIT_DATA, EXIT_MODEL, EXIT_OK, EXIT_USAGE, main
from yoda.data import ToyVideoDataset
from yoda.frameio import (
    FrameIOError,
    load_frames,
    read_image_dir,
    read_y4m,
    write_image_dir,
    write_y4m,
)
from yoda.model import build_codec

from test_pipeline import tiny_pipeline_cfg


@pytest.fixture(scope="module")
def model_path(tmp_path_factory):
    path = tmp_path_factory.mktemp("model") / "tiny.ckpt"
    codec = build_codec(tiny_pipeline_cfg(True), tiny_pipeline_cfg(False),
                        lambda_rate=4.0, seed=7)
    codec.save(path)
    return str(path)


@pytest.fixture(scope="module")
def input_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("frames")
    data = ToyVideoDataset(seed=9, n_clips=1, resolution=64, window=5)
    write_image_dir(d, [data.clip(0)[t] for t in range(5)])
    return str(d)


class TestFrameIO:
    def test_image_dir_roundtrip(self, tmp_path):
        rng = np.random.default_rng(0)
        frames = [rng.random((32, 48, 3)).astype(np.float32) for _ in range(3)]
        write_image_dir(tmp_path / "imgs", frames)
        back = read_image_dir(tmp_path / "imgs")
        assert len(back) == 3
        for a, b in zip(frames, back):
            assert np.abs(a - b).max() <= 0.5 / 255 + 1e-6  # 8-bit quantization

    def test_y4m_roundtrip(self, tmp_path):
        i, j = np.meshgrid(np.linspace(0, 1, 32), np.linspace(0, 1, 32), indexing="ij")
        frame = np.stack([i, 0.5 * j, 1 - i], axis=-1).astype(np.float32)
        path = tmp_path / "clip.y4m"
        write_y4m(path, [frame, frame])
        back = read_y4m(path)
        assert len(back) == 2
        assert np.abs(back[0] - frame).mean() < 0.02

    def test_y4m_rejects_garbage(self, tmp_path):
        path = tmp_path / "bad.y4m"
        path.write_bytes(b"not a y4m stream")
        with pytest.raises(FrameIOError):
            read_y4m(path)

    def test_load_frames_dispatch(self, tmp_path):
        with pytest.raises(FrameIOError):
            load_frames(tmp_path / "missing.mp4")


class TestCli:
    def test_encode_decode_roundtrip(self, model_path, input_dir, tmp_path):
        out = tmp_path / "seq.yoda"
        code = main([
            "encode", "--input", input_dir, "--model", model_path,
            "--lambda", "4.0", "--intra-period", "32", "--output", str(out),
        ])
        assert code == EXIT_OK
        assert out.exists() and out.read_bytes()[:4] == b"YODA"

        dec_dir = tmp_path / "recon"
        code = main([
            "decode", "--input", str(out), "--model", model_path,
            "--output", str(dec_dir),
        ])
        assert code == EXIT_OK
        assert len(list(dec_dir.glob("*.png"))) == 5

    def test_eval_report(self, model_path, input_dir, tmp_path):
        out = tmp_path / "seq.yoda"
        main(["encode", "--input", input_dir, "--model", model_path,
              "--lambda", "4.0", "--output", str(out)])
        dec_dir = tmp_path / "recon"
        main(["decode", "--input", str(out), "--model", model_path,
              "--output", str(dec_dir)])
        report = tmp_path / "report.csv"
        code = main(["eval", "--recon", str(dec_dir), "--ref", input_dir,
                     "--bits", str(out), "--report", str(report)])
        assert code == EXIT_OK
        rows = list(csv.DictReader(open(report)))
        assert len(rows) == 5
        assert {"frame", "bpp", "psnr", "ms_ssim"} <= set(rows[0])
        assert all(float(r["bpp"]) > 0 for r in rows)

    def test_bdrate_identity(self, tmp_path, capsys):
        path = tmp_path / "points.csv"
        with open(path, "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=["bpp", "psnr"])
            w.writeheader()
            for bpp, q in [(0.1, 30), (0.2, 33), (0.4, 36), (0.8, 39)]:
                w.writerow({"bpp": bpp, "psnr": q})
        code = main(["bdrate", "--anchor", str(path), "--test", str(path)])
        assert code == EXIT_OK
        assert "+0.00%" in capsys.readouterr().out

    def test_usage_error(self):
        assert main(["encode", "--input", "x"]) == EXIT_USAGE
        assert main(["bogus"]) == EXIT_USAGE

    def test_data_error_on_missing_input(self, model_path, tmp_path):
        code = main(["encode", "--input", str(tmp_path / "none"), "--model",
                     model_path, "--lambda", "4.0", "--output",
                     str(tmp_path / "o.yoda")])
        assert code == EXIT_DATA

    def test_model_error_on_wrong_lambda(self, model_path, input_dir, tmp_path):
        code = main(["encode", "--input", input_dir, "--model", model_path,
                     "--lambda", "8.0", "--output", str(tmp_path / "o.yoda")])
        assert code == EXIT_MODEL

    def test_model_error_on_missing_checkpoint(self, input_dir, tmp_path):
        code = main(["encode", "--input", input_dir, "--model",
                     str(tmp_path / "no.ckpt"), "--lambda", "4.0",
                     "--output", str(tmp_path / "o.yoda")])
        assert code == EXIT_MODEL

    def test_decode_corrupt_bitstream(self, model_path, tmp_path):
        bad = tmp_path / "bad.yoda"
        bad.write_bytes(b"YODAgarbage")
        code = main(["decode", "--input", str(bad), "--model", model_path,
                     "--output", str(tmp_path / "d")])
        assert code == EXIT_DATA

    def test_train_micro_config(self, tmp_path):
        from yoda.config import RunConfig, StageSchedule
        import dataclasses

        from test_training import micro_pipeline_cfg

        run = RunConfig(
            stage=1, seed=0, pipeline=micro_pipeline_cfg(),
            schedule=StageSchedule(stage=1, steps=3, batch_size=1),
            dataset_clips=4, denoiser_pretrain_steps=0,
            out_checkpoint=str(tmp_path / "s1.ckpt"),
        )
        cfg_path = tmp_path / "run.json"
        run.to_json(cfg_path)
        assert main(["train", "--stage", "1", "--config", str(cfg_path)]) == EXIT_OK
        assert (tmp_path / "s1.ckpt").exists()
