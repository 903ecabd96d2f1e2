"""Synthetic toy-video clips with exploitable temporal correlation.

Each clip is a textured scene (scrolling gradient background plus a few
textured rectangles) animated with constant per-clip velocities and
wraparound. In the default rigid mode everything shares one velocity, so
frame t equals frame 0 rolled by t * velocity, which makes the generator
trivially verifiable. With ``layered_motion`` the rectangles move relative
to the background, so every predicted frame carries genuine innovation
(occlusions and disocclusions) instead of pure global translation.
Generation is deterministic per seed.
"""

from __future__ import annotations

import numpy as np
import torch


class ToyVideoDataset:
    def __init__(self, seed: int = 0, n_clips: int = 200, resolution: int = 64,
                 window: int = 7, max_speed: int = 6, static_fraction: float = 0.15,
                 layered_speed: int = 16, layered_fade: float = 0.3,
                 layered_motion: bool = False):
        if resolution % 2:
            raise ValueError("resolution must be even")
        self.seed = seed
        self.n_clips = n_clips
        self.resolution = resolution
        self.window = window
        self.layered_motion = layered_motion
        rng = np.random.default_rng(seed)
        self._scenes = []
        speed = layered_speed if layered_motion else max_speed
        for _ in range(n_clips):
            scene = self._make_scene(rng, resolution, speed, layered_motion,
                                     layered_fade)
            if rng.random() < static_fraction:
                scene["velocity"] = np.zeros(2, dtype=np.int64)
                for rect in scene["rects"]:
                    rect["velocity"] = np.zeros(2, dtype=np.int64)
                    rect["fade"] = 0.0
            self._scenes.append(scene)

    @property
    def velocities(self) -> np.ndarray:
        return np.stack([s["velocity"] for s in self._scenes])

    @staticmethod
    def _make_scene(rng, res, max_speed, layered, layered_fade=0.3) -> dict:
        ii, jj = np.meshgrid(np.arange(res), np.arange(res), indexing="ij")
        angle = rng.uniform(0, 2 * np.pi)
        ramp = (np.cos(angle) * ii + np.sin(angle) * jj) / res
        lo, hi = np.sort(rng.uniform(0.1, 0.9, size=(2, 3)), axis=0)
        background = lo + (hi - lo) * ((ramp[..., None] * rng.uniform(1, 3)) % 1.0)
        velocity = rng.integers(-max_speed, max_speed + 1, size=2)

        rects = []
        for _ in range(int(rng.integers(2, 5))):
            rh, rw = (int(v) for v in rng.integers(res // 8, res // 2, size=2))
            coarse = rng.uniform(0.05, 0.95, size=(max(2, rh // 4), max(2, rw // 4), 3))
            reps = (int(np.ceil(rh / coarse.shape[0])), int(np.ceil(rw / coarse.shape[1])))
            texture = np.tile(coarse, (reps[0], reps[1], 1))[:rh, :rw]
            rect_velocity = (
                rng.integers(-max_speed, max_speed + 1, size=2) if layered else velocity
            )
            # layered clips also drift each rectangle's brightness at a
            # constant per-clip speed: coarse innovation no single reference
            # frame can predict
            fade = rng.uniform(-layered_fade, layered_fade) if layered else 0.0
            rects.append({
                "top": int(rng.integers(0, res)),
                "left": int(rng.integers(0, res)),
                "texture": texture,
                "velocity": np.asarray(rect_velocity, dtype=np.int64),
                "fade": float(fade),
            })
        return {"background": background, "velocity": np.asarray(velocity, np.int64),
                "rects": rects}

    def _frame(self, scene, t: int) -> np.ndarray:
        res = self.resolution
        dy, dx = scene["velocity"] * t
        frame = np.roll(scene["background"], (dy, dx), axis=(0, 1)).copy()
        for rect in scene["rects"]:
            ry, rx = rect["velocity"] * t
            rh, rw = rect["texture"].shape[:2]
            rows = (rect["top"] + ry + np.arange(rh)) % res
            cols = (rect["left"] + rx + np.arange(rw)) % res
            frame[np.ix_(rows, cols)] = np.clip(rect["texture"] + rect["fade"] * t, 0, 1)
        return frame

    def __len__(self) -> int:
        return self.n_clips

    def clip(self, index: int, length: int | None = None) -> np.ndarray:
        """(T, H, W, 3) float32 frames in [0, 1]."""
        length = self.window if length is None else length
        scene = self._scenes[index]
        frames = []
        for t in range(length):
            frame = np.clip(np.round(self._frame(scene, t) * 255.0), 0, 255) / 255.0
            frames.append(frame.astype(np.float32))
        return np.stack(frames)

    def batch(self, rng: np.random.Generator, batch_size: int, length: int) -> torch.Tensor:
        """(B, T, 3, H, W) tensor of random clips."""
        idx = rng.integers(0, self.n_clips, size=batch_size)
        clips = np.stack([self.clip(int(i), length) for i in idx])
        return torch.from_numpy(clips).permute(0, 1, 4, 2, 3).contiguous()

    def all_clips(self, length: int | None = None) -> torch.Tensor:
        clips = np.stack([self.clip(i, length) for i in range(self.n_clips)])
        return torch.from_numpy(clips).permute(0, 1, 4, 2, 3).contiguous()
