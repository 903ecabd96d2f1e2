"""Three-stage training recipe.

Stage I trains the frame autoencoder with the composite distortion plus a
patch-adversarial term (no rate term exists in this stage). Stage II freezes
the autoencoder and jointly trains the latent codec and the denoiser's
low-rank adapters under distortion + rate, unrolled over a progressive
temporal window that grows from 2 to 7 frames. Stage III fine-tunes
everything end to end with distortion + rate + adversarial at a fixed
learning rate.

Clips are trained with the first frame given as the reference (a perfectly
decoded intra frame stand-in); coded frames recur through the actual decode
path, so gradients propagate across the unrolled window exactly as the
temporal state does at inference.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .config import PipelineConfig, RunConfig, load_checkpoint, save_checkpoint
from .data import ToyVideoDataset
from .losses import PatchDiscriminator, adv_losses, default_perceptual_plugins, rec_loss
from .model import FramePipeline

T_GRID = tuple(np.linspace(0.1, 1.2, 8))

DIVERGENCE_FACTOR = 10.0
DIVERGENCE_PATIENCE = 500


@dataclass
class StageResult:
    checkpoint: str
    metrics: list = field(default_factory=list)
    heldout: dict = field(default_factory=dict)
    t_star: float | None = None


class DivergenceError(RuntimeError):
    pass


class _DivergenceDetector:
    def __init__(self, warmup: int = 50):
        self.warmup = warmup
        self.baseline = None
        self._warmup_losses = []
        self._bad_streak = 0

    def update(self, step: int, loss: float):
        if not math.isfinite(loss):
            raise DivergenceError(f"non-finite loss {loss} at step {step}")
        if step < self.warmup:
            self._warmup_losses.append(loss)
            return
        if self.baseline is None:
            self.baseline = float(np.mean(self._warmup_losses))
        if loss > DIVERGENCE_FACTOR * self.baseline:
            self._bad_streak += 1
            if self._bad_streak >= DIVERGENCE_PATIENCE:
                raise DivergenceError(
                    f"loss {loss:.4g} above {DIVERGENCE_FACTOR}x baseline "
                    f"{self.baseline:.4g} for {self._bad_streak} steps (step {step})"
                )
        else:
            self._bad_streak = 0


class _MetricsLog:
    def __init__(self, path):
        self.path = Path(path) if path else None
        self.rows = []
        self._writer = None
        self._fh = None

    def log(self, **row):
        self.rows.append(row)
        if self.path:
            if self._writer is None:
                self.path.parent.mkdir(parents=True, exist_ok=True)
                self._fh = open(self.path, "w", newline="")
                self._writer = csv.DictWriter(self._fh, fieldnames=list(row))
                self._writer.writeheader()
            self._writer.writerow(row)
            self._fh.flush()

    def close(self):
        if self._fh:
            self._fh.close()


def _datasets(run: RunConfig):
    train = ToyVideoDataset(
        seed=run.dataset_seed, n_clips=run.dataset_clips,
        resolution=run.dataset_resolution, window=run.dataset_window,
        layered_motion=run.dataset_layered_motion,
    )
    heldout = ToyVideoDataset(
        seed=run.dataset_seed + 10_000, n_clips=max(8, run.dataset_clips // 8),
        resolution=run.dataset_resolution, window=run.dataset_window,
        layered_motion=run.dataset_layered_motion,
    )
    return train, heldout


def _stage1_batch(pipeline, data, rng, batch_size, cond_dropout=0.0,
                  ref_noise=0.0):
    """One reconstruction pass; returns (x, x_hat_raw).

    Two augmentations keep the latent from atrophying into a condition
    passthrough: with probability ``cond_dropout`` a sample's temporal
    conditions are zeroed, and references carry random noise up to
    ``ref_noise`` (at coding time the reference is a lossy reconstruction,
    so a pristine reference is the wrong training signal)."""
    if pipeline.autoencoder.is_conditional:
        clips = data.batch(rng, batch_size, 2)
        ref, x = clips[:, 0], clips[:, 1]
        if ref_noise > 0:
            sigma = torch.from_numpy(
                rng.uniform(0.0, ref_noise, batch_size).astype(np.float32)
            ).view(-1, 1, 1, 1)
            noise = torch.from_numpy(
                rng.standard_normal(ref.shape).astype(np.float32)
            )
            ref = torch.clamp(ref + sigma * noise, 0.0, 1.0)
        conds = pipeline.autoencoder.extract(ref)
        if cond_dropout > 0:
            keep = torch.from_numpy(
                (rng.random(batch_size) >= cond_dropout).astype(np.float32)
            ).view(-1, 1, 1, 1)
            conds = [c * keep for c in conds]
    else:
        x = data.batch(rng, batch_size, 1)[:, 0]
        conds = None
    latent = pipeline.autoencoder.encode(x, conds)
    return x, pipeline.autoencoder.decode(latent, conds)


@torch.no_grad()
def heldout_rec_loss(pipeline: FramePipeline, data: ToyVideoDataset, weights,
                     max_clips: int = 16) -> float:
    total = 0.0
    n = min(max_clips, len(data))
    rng = np.random.default_rng(0)
    for i in range(n):
        x, x_hat = _stage1_batch(pipeline, data, rng, 1)
        total += float(rec_loss(x, x_hat, weights))
    return total / n


def train_stage1(run: RunConfig, pipeline: FramePipeline | None = None) -> StageResult:
    """Autoencoder pretraining: distortion + adversarial, no rate term."""
    torch.manual_seed(run.seed)
    pipeline = pipeline or FramePipeline(run.pipeline)
    data, heldout = _datasets(run)
    rng = np.random.default_rng(run.seed + 1)
    weights = run.weights
    sched = run.schedule

    discriminator = PatchDiscriminator(base=16)
    opt_g = torch.optim.Adam(pipeline.autoencoder.parameters(), lr=sched.lr_start)
    opt_d = torch.optim.Adam(discriminator.parameters(), lr=sched.lr_start)
    detector = _DivergenceDetector()
    log = _MetricsLog(run.metrics_log)
    result = StageResult(checkpoint=run.out_checkpoint)

    pipeline.train()
    for step in range(sched.steps):
        x, x_hat = _stage1_batch(pipeline, data, rng, sched.batch_size,
                                 cond_dropout=run.cond_dropout,
                                 ref_noise=run.ref_noise)
        d_rec = rec_loss(x, x_hat, weights)
        if weights.lambda_adv > 0:
            adv = adv_losses(x, x_hat, discriminator)
            loss = d_rec + weights.lambda_adv * adv["g_loss"]
            g_loss = float(adv["g_loss"].detach())
        else:
            adv = None
            loss = d_rec
            g_loss = 0.0
        opt_g.zero_grad()
        loss.backward()
        if sched.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(pipeline.autoencoder.parameters(),
                                           sched.grad_clip)
        opt_g.step()
        if adv is not None:  # discriminator update after the generator step
            opt_d.zero_grad()
            adv["d_loss"].backward()
            if sched.grad_clip > 0:
                torch.nn.utils.clip_grad_norm_(discriminator.parameters(),
                                               sched.grad_clip)
            opt_d.step()
        detector.update(step, float(loss.detach()))
        if step == 50 or step == sched.steps - 1 or step % 200 == 0:
            hd = heldout_rec_loss(pipeline, heldout, weights)
            if step == 50:
                result.heldout["step50_d_rec"] = hd
            log.log(step=step, loss=float(loss.detach()), d_rec=float(d_rec.detach()),
                    g_loss=g_loss, heldout_d_rec=hd)
    result.heldout["final_d_rec"] = heldout_rec_loss(pipeline, heldout, weights)
    log.close()
    result.metrics = log.rows

    save_checkpoint(
        run.out_checkpoint, run.pipeline,
        {"pipeline": pipeline.state_dict(), "discriminator": discriminator.state_dict()},
        extra={"stage": 1, "heldout": result.heldout},
    )
    return result


def pretrain_denoiser(pipeline: FramePipeline, data: ToyVideoDataset, steps: int,
                      seed: int = 0, lr: float = 1e-3, batch_size: int = 4) -> None:
    """Teach the denoiser to project noisy latents of the frozen autoencoder
    back onto clean ones (so the later adapter training preserves a prior)."""
    if steps <= 0:
        return
    torch.manual_seed(seed + 77)
    rng = np.random.default_rng(seed + 78)
    sigma_d = pipeline.denoiser.sigma_data
    opt = torch.optim.Adam(pipeline.denoiser.parameters(), lr=lr)
    for p in pipeline.autoencoder.parameters():
        p.requires_grad_(False)
    pipeline.denoiser.train()
    for _ in range(steps):
        with torch.no_grad():
            if pipeline.autoencoder.is_conditional:
                clips = data.batch(rng, batch_size, 2)
                conds = pipeline.autoencoder.extract(clips[:, 0])
                latent = pipeline.autoencoder.encode(clips[:, 1], conds)
            else:
                latent = pipeline.autoencoder.encode(data.batch(rng, batch_size, 1)[:, 0])
        t = float(rng.choice(T_GRID))
        noisy = math.cos(t) * latent + math.sin(t) * sigma_d * torch.randn_like(latent)
        denoised = pipeline.denoiser.one_step_denoise(noisy, t)
        loss = torch.mean((denoised - latent) ** 2)
        opt.zero_grad()
        loss.backward()
        opt.step()


def _unrolled_window_losses(pipeline, clips, weights, pixels, t_sample,
                            generator=None, rate_scale=1.0, anchor_weight=0.0):
    """Code frames 1..T-1 of each clip with frame 0 as the given reference.
    Per-frame losses are summed over the window. ``anchor_weight`` adds a
    latent-domain consistency term MSE(decoded latent, encoder latent): the
    stand-in for the large pretrained denoiser prior that pins the codec to
    the latent manifold in the full-scale system. Returns
    (total_loss, mean_d_rec, mean_bpp, (x_last, x_hat_last))."""
    batch, window = clips.shape[:2]
    prev_recon = clips[:, 0]
    prev_feature = None
    total = 0.0
    d_recs = []
    bpps = []
    anchors = []
    last_pair = None
    for t in range(1, window):
        x = clips[:, t]
        conds = (
            pipeline.autoencoder.extract(prev_recon)
            if pipeline.autoencoder.is_conditional else None
        )
        latent = pipeline.autoencoder.encode(x, conds)
        feature = pipeline.codec.channel_expand(latent)
        if prev_feature is None or not pipeline.codec.cfg.temporal_context:
            ctx = pipeline.codec.zero_context(batch, feature.shape[-2:])
        else:
            ctx = pipeline.codec.refine_features(prev_feature)
        out = pipeline.codec.code_train(feature, ctx, generator=generator)
        if pipeline.cfg.use_denoiser:
            latent_hat = pipeline.denoiser.one_step_denoise(out.noisy_latent, t_sample)
        else:
            latent_hat = out.noisy_latent
        x_hat = pipeline.autoencoder.decode(latent_hat, conds)
        d_rec = rec_loss(x, x_hat, weights)
        bpp = out.rate_tensor / (batch * pixels)
        total = total + d_rec + rate_scale * weights.lambda_rate * bpp
        if anchor_weight > 0:
            # pre-denoise: pins the codec to the latent manifold; post-denoise:
            # trains the projection on the actual quantization noise
            anchor = torch.mean((out.noisy_latent - latent.detach()) ** 2)
            total = total + anchor_weight * anchor
            if pipeline.cfg.use_denoiser:
                denoise_err = torch.mean((latent_hat - latent.detach()) ** 2)
                total = total + 4.0 * anchor_weight * denoise_err
            anchors.append(float(anchor.detach()))
        d_recs.append(float(d_rec.detach()))
        bpps.append(float(bpp.detach()))
        last_pair = (x, x_hat)
        prev_recon = torch.clamp(x_hat, 0.0, 1.0)
        if pipeline.cfg.latent_codec.cache_stage == "post_denoise":
            prev_feature = pipeline.codec.channel_expand(latent_hat)
        else:
            prev_feature = out.recon_feature
    mean_anchor = float(np.mean(anchors)) if anchors else 0.0
    return total, float(np.mean(d_recs)), float(np.mean(bpps)), last_pair, mean_anchor


def _load_compatible(module, state: dict) -> None:
    """Load all parameters whose name and shape match (stage handoffs may
    re-dimension modules that a later stage trains from scratch)."""
    own = module.state_dict()
    filtered = {
        k: v for k, v in state.items() if k in own and own[k].shape == v.shape
    }
    module.load_state_dict(filtered, strict=False)


def _audit_frozen(params, where: str):
    for p in params:
        if p.grad is not None and float(p.grad.abs().sum()) != 0.0:
            raise RuntimeError(f"gradient leaked into frozen parameters ({where})")


@torch.no_grad()
def evaluate_predicted(pipeline: FramePipeline, data: ToyVideoDataset, t_star: float,
                       max_clips: int = 16, window: int | None = None) -> dict:
    """Real-bitstream evaluation over held-out clips: frame 0 is the given
    reference, frames 1..T-1 are coded. Returns bpp / psnr / ms_ssim / d_rec."""
    from .metrics import ms_ssim as _ms_ssim
    from .metrics import psnr as _psnr
    from .model import FrameState

    pipeline.eval()
    old_t = pipeline.cfg.t_star
    pipeline.cfg.t_star = t_star
    try:
        n = min(max_clips, len(data))
        window = window or data.window
        bits = 0.0
        pix = 0
        psnrs, ssims, d_recs = [], [], []
        plugins = default_perceptual_plugins()
        for i in range(n):
            clip = data.clip(i, window)
            state = FrameState(
                recon=torch.from_numpy(clip[0]).permute(2, 0, 1)[None].contiguous()
            )
            for t in range(1, window):
                payloads, state, stats = pipeline.code_frame(clip[t], state)
                bits += 8.0 * stats.payload_bytes
                pix += clip[t].shape[0] * clip[t].shape[1]
                recon = pipeline.recon_to_frame(state)
                psnrs.append(_psnr(clip[t], recon))
                import warnings

                with warnings.catch_warnings():
                    warnings.simplefilter("ignore")
                    ssims.append(_ms_ssim(clip[t], recon))
                d_recs.append(float(rec_loss(clip[t], recon, perceptual=plugins)))
        return {
            "bpp": bits / pix,
            "psnr": float(np.mean(psnrs)),
            "ms_ssim": float(np.mean(ssims)),
            "d_rec": float(np.mean(d_recs)),
        }
    finally:
        pipeline.cfg.t_star = old_t


@torch.no_grad()
def select_t_star(pipeline: FramePipeline, data: ToyVideoDataset,
                  max_clips: int = 8) -> float:
    """Pick the inference noise level from the validation grid: the t whose
    single-step projection most reduces the latent quantization error (the
    bitstream does not depend on t). Falls back to the gentlest grid point
    when no projection beats the identity."""
    if not pipeline.cfg.use_denoiser:
        return pipeline.cfg.t_star
    from .model import FrameState

    pipeline.eval()
    pairs = []  # (noisy latent, clean latent)
    for i in range(min(max_clips, len(data))):
        clip = data.clip(i, 3)
        state = FrameState(
            recon=torch.from_numpy(clip[0]).permute(2, 0, 1)[None].contiguous()
        )
        for t in range(1, 3):
            x = torch.from_numpy(clip[t]).permute(2, 0, 1)[None]
            conds = (pipeline.autoencoder.extract(state.recon)
                     if pipeline.autoencoder.is_conditional else None)
            latent = pipeline.autoencoder.encode(x, conds)
            feature = pipeline.codec.channel_expand(latent)
            if state.feature is None or not pipeline.codec.cfg.temporal_context:
                ctx = pipeline.codec.zero_context(1, feature.shape[-2:])
            else:
                ctx = pipeline.codec.refine_features(state.feature)
            coded = pipeline.codec.code_frame(feature, ctx)
            pairs.append((coded.noisy_latent, latent))
            recon, cache = pipeline._finish_frame(
                coded.recon_feature, coded.noisy_latent, conds
            )
            state = FrameState(recon=recon, feature=cache)

    identity_err = float(np.mean([float(torch.mean((n - c) ** 2)) for n, c in pairs]))
    best_t, best_err = float(T_GRID[0]), identity_err
    for t in T_GRID:
        err = float(np.mean([
            float(torch.mean((pipeline.denoiser.one_step_denoise(n, float(t)) - c) ** 2))
            for n, c in pairs
        ]))
        if err < best_err:
            best_t, best_err = float(t), err
    return best_t


def train_stage2(run: RunConfig, pipeline: FramePipeline | None = None) -> StageResult:
    """Joint latent-codec + denoiser training over the frozen autoencoder."""
    torch.manual_seed(run.seed)
    if pipeline is None:
        pipeline = FramePipeline(run.pipeline)
    if run.init_checkpoint:
        payload = load_checkpoint(run.init_checkpoint)
        _load_compatible(pipeline, payload["state"]["pipeline"])
    data, heldout = _datasets(run)
    rng = np.random.default_rng(run.seed + 2)
    weights = run.weights
    sched = run.schedule
    pixels = run.dataset_resolution**2

    pretrain_denoiser(pipeline, data, run.denoiser_pretrain_steps, seed=run.seed)

    for p in pipeline.autoencoder.parameters():
        p.requires_grad_(False)
    if not run.train_full_denoiser:
        pipeline.denoiser.freeze_base()
    trainable = list(pipeline.codec.parameters()) + [
        p for p in pipeline.denoiser.parameters() if p.requires_grad
    ]
    opt = torch.optim.Adam(trainable, lr=sched.lr_start)
    detector = _DivergenceDetector()
    log = _MetricsLog(run.metrics_log)
    result = StageResult(checkpoint=run.out_checkpoint)
    windows_seen = set()

    pipeline.codec.train()
    for step in range(sched.steps):
        window = sched.window_at(step)
        windows_seen.add(window)
        clips = data.batch(rng, sched.batch_size, window)
        t_sample = float(rng.choice(T_GRID[: len(T_GRID) // 2]))
        total, d_rec, bpp, _, anchor = _unrolled_window_losses(
            pipeline, clips, weights, pixels, t_sample,
            rate_scale=sched.rate_scale_at(step),
            anchor_weight=max(
                run.latent_anchor_floor,
                run.latent_anchor_weight * sched.anchor_scale_at(step),
            ),
        )
        opt.zero_grad()
        total.backward()
        _audit_frozen(pipeline.autoencoder.parameters(), "autoencoder in stage 2")
        if sched.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(trainable, sched.grad_clip)
        lr = sched.lr_at(step)
        for group in opt.param_groups:
            group["lr"] = lr
        opt.step()
        detector.update(step, float(total.detach()))
        if step % 250 == 0 or step == sched.steps - 1:
            log.log(step=step, window=window, lr=lr, loss=float(total.detach()),
                    d_rec=d_rec, bpp=bpp, anchor=anchor)
    log.close()
    result.metrics = log.rows
    result.heldout["windows_seen"] = sorted(windows_seen)

    t_star = select_t_star(pipeline, heldout)
    pipeline.cfg.t_star = t_star
    result.t_star = t_star
    result.heldout.update(evaluate_predicted(pipeline, heldout, t_star))

    save_checkpoint(
        run.out_checkpoint, pipeline.cfg,
        {"pipeline": pipeline.state_dict()},
        extra={"stage": 2, "t_star": t_star, "heldout": result.heldout},
    )
    return result


def train_stage3(run: RunConfig, pipeline: FramePipeline | None = None) -> StageResult:
    """End-to-end fine-tuning: distortion + rate + adversarial, fixed lr."""
    torch.manual_seed(run.seed)
    if pipeline is None:
        pipeline = FramePipeline(run.pipeline)
    if run.init_checkpoint:
        payload = load_checkpoint(run.init_checkpoint)
        _load_compatible(pipeline, payload["state"]["pipeline"])
    data, heldout = _datasets(run)
    rng = np.random.default_rng(run.seed + 3)
    weights = run.weights
    sched = run.schedule
    pixels = run.dataset_resolution**2

    for p in pipeline.parameters():
        p.requires_grad_(True)
    discriminator = PatchDiscriminator(base=16)
    opt = torch.optim.Adam(pipeline.parameters(), lr=sched.lr_end)
    opt_d = torch.optim.Adam(discriminator.parameters(), lr=sched.lr_end * 10)
    detector = _DivergenceDetector()
    log = _MetricsLog(run.metrics_log)
    result = StageResult(checkpoint=run.out_checkpoint)

    pipeline.train()
    audited_nonzero = False
    for step in range(sched.steps):
        window = sched.window_at(step)
        clips = data.batch(rng, sched.batch_size, window)
        t_sample = pipeline.cfg.t_star
        total, d_rec, bpp, last_pair, anchor = _unrolled_window_losses(
            pipeline, clips, weights, pixels, t_sample,
            anchor_weight=run.latent_anchor_floor,
        )
        # adversarial term on the last coded reconstruction of the window
        adv = adv_losses(last_pair[0], last_pair[1], discriminator)
        total = total + weights.lambda_adv * adv["g_loss"]

        opt.zero_grad()
        total.backward()
        if sched.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(pipeline.parameters(), sched.grad_clip)
        if not audited_nonzero:
            grads = sum(
                float(p.grad.abs().sum())
                for p in pipeline.autoencoder.parameters()
                if p.grad is not None
            )
            if grads <= 0:
                raise RuntimeError("autoencoder received no gradient in stage 3")
            audited_nonzero = True
        opt.step()
        opt_d.zero_grad()
        adv["d_loss"].backward()
        opt_d.step()
        detector.update(step, float(total.detach()))
        if step % 250 == 0 or step == sched.steps - 1:
            log.log(step=step, lr=sched.lr_end, loss=float(total.detach()), d_rec=d_rec,
                    bpp=bpp, d_loss=float(adv["d_loss"].detach()), g_loss=float(adv["g_loss"].detach()))
    log.close()
    result.metrics = log.rows
    result.heldout.update(evaluate_predicted(pipeline, heldout, pipeline.cfg.t_star))

    save_checkpoint(
        run.out_checkpoint, pipeline.cfg,
        {"pipeline": pipeline.state_dict(), "discriminator": discriminator.state_dict()},
        extra={"stage": 3, "t_star": pipeline.cfg.t_star, "heldout": result.heldout},
    )
    return result


def load_pipeline(path) -> FramePipeline:
    """Rebuild a pipeline from a stage checkpoint (config echo included)."""
    payload = load_checkpoint(path)
    pipeline = FramePipeline(PipelineConfig(**payload["config"]))
    pipeline.load_state_dict(payload["state"]["pipeline"], strict=False)
    t_star = payload.get("extra", {}).get("t_star")
    if t_star is not None:
        pipeline.cfg.t_star = t_star
    return pipeline
