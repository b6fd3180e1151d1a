"""AdamW training loop with alternating generator/discriminator updates,
plus the synthetic motion generator used as the desk-scale data source.

Everything is deterministic per seed: parameter init, batch selection, and
synthetic data all draw from independent named RNG streams, and batch indices
are derived from the step number alone so a resumed run replays the exact
trajectory of an uninterrupted one.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import heatmap as hm
from . import losses as ls
from . import model as mdl
from . import quantizer as qz
from . import tensorcore as tc
from .errors import ArgumentError, TrainingError
from .heatmap import HeatmapVolume, KeypointSequence
from .model import ModelConfig, ModelState, stream_rng
from .tensorcore import Tape, Tensor


@dataclass
class OptimState:
    """Decoupled-weight-decay Adam moments for one parameter group."""

    lr: float = 2.25e-5
    beta1: float = 0.5
    beta2: float = 0.9
    eps: float = 1e-8
    weight_decay: float = 1e-4
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def export_buffers(self, prefix: str) -> dict:
        out = {f"{prefix}.t": np.array([self.t], dtype=np.int64)}
        for name, arr in self.m.items():
            out[f"{prefix}.m.{name}"] = arr
        for name, arr in self.v.items():
            out[f"{prefix}.v.{name}"] = arr
        return out

    def import_buffers(self, prefix: str, buffers: dict) -> None:
        self.t = int(buffers[f"{prefix}.t"][0])
        self.m = {}
        self.v = {}
        for key, arr in buffers.items():
            if key.startswith(f"{prefix}.m."):
                self.m[key[len(prefix) + 3:]] = arr.copy()
            elif key.startswith(f"{prefix}.v."):
                self.v[key[len(prefix) + 3:]] = arr.copy()


def adamw_step(params: dict, grads: dict, opt: OptimState) -> None:
    """One AdamW update over a named parameter group, in sorted-name order."""
    opt.t += 1
    bc1 = 1.0 - opt.beta1 ** opt.t
    bc2 = 1.0 - opt.beta2 ** opt.t
    for name in sorted(params):
        p = params[name]
        g = grads.get(name)
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for parameter {name!r}")
        if name not in opt.m:
            opt.m[name] = np.zeros_like(p.data, dtype=np.float32)
            opt.v[name] = np.zeros_like(p.data, dtype=np.float32)
        g32 = g.astype(np.float32, copy=False)
        opt.m[name] = opt.beta1 * opt.m[name] + (1.0 - opt.beta1) * g32
        opt.v[name] = opt.beta2 * opt.v[name] + (1.0 - opt.beta2) * (g32 * g32)
        if opt.weight_decay:
            p.data -= np.float32(opt.lr * opt.weight_decay) * p.data
        mhat = opt.m[name] / np.float32(bc1)
        vhat = opt.v[name] / np.float32(bc2)
        p.data -= np.float32(opt.lr) * mhat / (np.sqrt(vhat) + np.float32(opt.eps))


# ---------------------------------------------------------------------------
# Synthetic motion
# ---------------------------------------------------------------------------

MOTION_FAMILIES = ("pendulum", "walk-cycle", "random-smooth")


@dataclass
class SyntheticMotionSpec:
    """Smooth per-joint trajectories standing in for captured pose data."""

    joints: int = 4
    frames: int = 64
    family: str = "random-smooth"
    noise: float = 0.0
    seed: int = 0
    dims: int = 2
    width: int = 128
    height: int = 128
    depth: int = 128

    def __post_init__(self):
        if self.family not in MOTION_FAMILIES:
            raise ArgumentError(f"family must be one of {MOTION_FAMILIES}")
        if self.joints < 1 or self.frames < 2:
            raise ArgumentError("need joints >= 1 and frames >= 2")
        if self.dims not in (2, 3):
            raise ArgumentError(f"dims must be 2 or 3, got {self.dims}")


def synth_motion(spec: SyntheticMotionSpec) -> KeypointSequence:
    """Deterministic C1-smooth trajectories kept inside the frame bounds."""
    rng = np.random.default_rng(spec.seed)
    t = np.arange(spec.frames, dtype=np.float64)
    extents = [spec.width, spec.height] + ([spec.depth] if spec.dims == 3 else [])
    coords = np.zeros((spec.frames, spec.joints, spec.dims))

    for k in range(spec.joints):
        if spec.family == "pendulum":
            period = rng.uniform(20, 60)
            theta0 = rng.uniform(0.3, 1.0)
            phase = rng.uniform(0, 2 * np.pi)
            length = rng.uniform(0.15, 0.35) * min(extents)
            theta = theta0 * np.sin(2 * np.pi * t / period + phase)
            cx = 0.5 * spec.width
            cy = 0.15 * spec.height
            coords[:, k, 0] = cx + length * np.sin(theta)
            coords[:, k, 1] = cy + length * np.cos(theta)
            if spec.dims == 3:
                coords[:, k, 2] = 0.5 * spec.depth \
                    + 0.1 * spec.depth * np.sin(2 * np.pi * t / period)
        elif spec.family == "walk-cycle":
            period = rng.uniform(16, 32)
            phase = rng.uniform(0, 2 * np.pi)
            for d, ext in enumerate(extents):
                center = rng.uniform(0.35, 0.65) * ext
                stride_amp = rng.uniform(0.05, 0.2) * ext
                bounce = rng.uniform(0.01, 0.05) * ext
                wave = stride_amp * np.sin(2 * np.pi * t / period + phase) \
                    + bounce * np.sin(4 * np.pi * t / period + 2 * phase + d)
                coords[:, k, d] = center + wave
        else:  # random-smooth
            for d, ext in enumerate(extents):
                center = rng.uniform(0.3, 0.7) * ext
                margin = min(center, ext - 1 - center) * 0.9
                amps = rng.uniform(0, 1, size=3)
                amps *= margin / max(amps.sum(), 1e-9)
                wave = np.zeros(spec.frames)
                for a in amps:
                    period = rng.uniform(12, 80)
                    phase = rng.uniform(0, 2 * np.pi)
                    wave += a * np.sin(2 * np.pi * t / period + phase)
                coords[:, k, d] = center + wave

    if spec.noise > 0:
        coords += spec.noise * rng.standard_normal(coords.shape)
    hi = np.array(extents, dtype=np.float64) - 1.0
    coords = np.clip(coords, 0.0, hi[None, None, :])
    return KeypointSequence(coords)


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainerConfig:
    batch_size: int = 2
    warmup_steps: int = 500          # discriminator frozen (and adv term off) before this
    grad_clip: float = 1.0           # 0 disables clipping
    lr: float = 2.25e-5
    beta1: float = 0.5
    beta2: float = 0.9
    eps: float = 1e-8
    weight_decay: float = 1e-4
    commitment: float = 1.0
    checkpoint_every: int = 0        # 0: only final
    reinit_dead_every: int = 0       # 0: dead-entry reseeding off


@dataclass
class TrainResult:
    state: ModelState
    log_lines: list
    opt_g: OptimState
    opt_d: OptimState


def prepare_windows(config: ModelConfig, data) -> list:
    """Render keypoint windows to [C,T,H,W] f32 arrays matching the config."""
    t_ext, h_ext, w_ext = config.input_extents
    out = []
    for item in data:
        if isinstance(item, KeypointSequence):
            if config.mode == "triplane":
                vol = hm.render3d(item, h_ext, h_ext, w_ext, config.sigma)
                vals = hm.project_triplane(vol).values
            else:
                vals = hm.render2d(item, h_ext, w_ext, config.sigma).values
        elif isinstance(item, HeatmapVolume):
            vals = item.values
        else:
            vals = np.asarray(item)
        if vals.shape != (t_ext, config.in_channels, h_ext, w_ext):
            raise ArgumentError(f"window shape {vals.shape} does not match config "
                                f"({t_ext}, {config.in_channels}, {h_ext}, {w_ext})")
        out.append(np.moveaxis(vals, 0, 1).astype(np.float32))  # [C,T,H,W]
    return out


def _clip_grads(grads: dict, clip: float) -> dict:
    if clip <= 0:
        return grads
    total = 0.0
    for g in grads.values():
        total += float(np.sum(g.astype(np.float64) ** 2))
    norm = np.sqrt(total)
    if norm <= clip:
        return grads
    scale = np.float32(clip / norm)
    return {k: g * scale for k, g in grads.items()}


def _collect_grads(params: dict) -> dict:
    grads = {}
    for name, p in params.items():
        if p.grad is not None:
            grads[name] = p.grad
        p.grad = None
    return grads


def train(config: ModelConfig, data, steps: int, seed: int,
          tcfg: TrainerConfig = None, state: ModelState = None,
          opt_buffers: dict = None, out_dir=None,
          log_stream=None) -> TrainResult:
    """Train until ``state.step == steps``; pass a loaded state to resume.

    Alternates one generator update (reconstruction + VQ + weighted
    adversarial) with one discriminator hinge update per step. With
    ``lambda_adv == 0`` the discriminator is never built, touched, or logged.
    """
    tcfg = tcfg or TrainerConfig()
    windows = prepare_windows(config, data)
    if not windows:
        raise ArgumentError("train requires non-empty data")
    adversarial = config.lambda_adv != 0.0
    if state is None:
        state = mdl.build(config, seed, include_discriminator=adversarial)

    opt_kwargs = dict(lr=tcfg.lr, beta1=tcfg.beta1, beta2=tcfg.beta2,
                      eps=tcfg.eps, weight_decay=tcfg.weight_decay)
    opt_g = OptimState(**opt_kwargs)
    opt_d = OptimState(**opt_kwargs)
    if opt_buffers:
        opt_g.import_buffers("opt_g", opt_buffers)
        if adversarial:
            opt_d.import_buffers("opt_d", opt_buffers)

    psi = ls.FeatureExtractor(config.in_channels,
                              seed=int(stream_rng(seed, "features").integers(2 ** 31)))
    gen_params = {n: p for n, p in state.params.items()
                  if n.startswith(("enc.", "dec."))}
    gen_params["codebook.entries"] = state.codebook.entries
    disc_params = {n: p for n, p in state.params.items() if n.startswith("disc.")}

    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    log_lines = []

    def checkpoint(tag):
        if out_dir is None:
            return
        extra = opt_g.export_buffers("opt_g")
        if adversarial:
            extra |= opt_d.export_buffers("opt_d")
        mdl.save_checkpoint(out_dir / f"ckpt_{tag}.mck", state, extra)

    while state.step < steps:
        step = state.step + 1
        idx_rng = stream_rng(seed, f"batch.{step}")
        idx = idx_rng.integers(0, len(windows), size=tcfg.batch_size)
        x = np.stack([windows[i] for i in idx])  # [B,C,T,H,W]
        adv_active = adversarial and step > tcfg.warmup_steps

        with Tape():
            xt = Tensor(x)
            z_e = mdl.encoder_forward(state, xt)
            result = qz.quantize(z_e, state.codebook)
            xhat = mdl.decoder_forward(state, result.z_q)
            l1 = ls.l1_loss(xhat, xt)
            perc = ls.perceptual_loss(xt, xhat, psi)
            vq = qz.vq_loss(z_e, result.e_sel, commitment=tcfg.commitment)
            adv_g = None
            if adv_active:
                adv_g = ls.g_loss(mdl.discriminator_forward(state, xhat))
            lam = config.lambda_adv if adv_active else 0.0
            total = ls.total_generator_loss(perc, l1, vq, adv_g,
                                            config.alpha_perceptual,
                                            config.beta_l1, lam)
            total_val = float(total.numpy())
            if not np.isfinite(total_val):
                checkpoint("abort")
                raise TrainingError(f"non-finite generator loss at step {step}")
            tc.backward(total)
        g_grads = _clip_grads(_collect_grads(gen_params), tcfg.grad_clip)
        for p in disc_params.values():
            p.grad = None  # generator pass must not update the discriminator
        adamw_step(gen_params, g_grads, opt_g)

        d_val = 0.0
        if adv_active:
            with Tape():
                d_real = mdl.discriminator_forward(state, Tensor(x))
                d_fake = mdl.discriminator_forward(state, Tensor(xhat.data.copy()))
                d_loss = ls.hinge_d_loss(d_real, d_fake)
                d_val = float(d_loss.numpy())
                if not np.isfinite(d_val):
                    checkpoint("abort")
                    raise TrainingError(f"non-finite discriminator loss at step {step}")
                tc.backward(d_loss)
            d_grads = _clip_grads(_collect_grads(disc_params), tcfg.grad_clip)
            adamw_step(disc_params, d_grads, opt_d)

        if tcfg.reinit_dead_every and step % tcfg.reinit_dead_every == 0:
            qz.reinit_dead_entries(state.codebook, stream_rng(seed, f"reinit.{step}"))
            state.codebook.reset_usage()

        state.step = step
        breakdown = ls.LossBreakdown(
            rec_l1=float(l1.numpy()), rec_perceptual=float(perc.numpy()),
            vq=float(vq.numpy()),
            adv_g=float(adv_g.numpy()) if adv_g is not None else 0.0,
            adv_d=d_val, total_g=total_val,
            weights=(config.alpha_perceptual, config.beta_l1, config.lambda_adv))
        line = breakdown.json_line(step)
        log_lines.append(line)
        if log_stream is not None:
            log_stream.write(line + "\n")
        if tcfg.checkpoint_every and step % tcfg.checkpoint_every == 0:
            checkpoint(f"{step:07d}")

    checkpoint("final")
    return TrainResult(state, log_lines, opt_g, opt_d)
