"""Closed-form diffusion maths: schedules, forward corruption, reverse DDPM
stepping, classifier-free guidance and dynamic thresholding.

Timesteps are 0-based indices into the schedule tables. The reverse chain
visits ``t = num_steps - 1, ..., 1``; the step taken at ``t = 1`` lands on
the clean endpoint (the "previous" cumulative product is taken as 1), so the
final output is the thresholded clean estimate with zero added variance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

SCHEDULE_KINDS = ("linear", "cosine")


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step variance tables of the forward process.

    Attributes
    ----------
    num_steps : int
    beta : ndarray of shape (num_steps,)
    alpha_bar : ndarray of shape (num_steps,)
        Cumulative products of ``1 - beta``.
    log_snr : ndarray of shape (num_steps,)
        ``log(alpha_bar / (1 - alpha_bar))``, fed to the denoiser as its
        timestep embedding input.
    kind : str
    """

    num_steps: int
    beta: np.ndarray
    alpha_bar: np.ndarray
    log_snr: np.ndarray
    kind: str = "cosine"

    def check_timestep(self, t: int) -> int:
        t = int(t)
        if not 0 <= t < self.num_steps:
            raise ValueError(f"timestep {t} outside [0, {self.num_steps})")
        return t


@dataclass(frozen=True)
class GuidanceConfig:
    scale: float = 3.0
    dynamic_threshold_percentile: float = 0.995
    clamp_floor: float = 1.0

    def __post_init__(self):
        if not self.scale >= 0:
            raise ValueError(f"guidance scale must be >= 0, got {self.scale}")
        if not 0 < self.dynamic_threshold_percentile <= 1:
            raise ValueError("dynamic_threshold_percentile must lie in (0, 1]")
        if not self.clamp_floor > 0:
            raise ValueError("clamp_floor must be positive")


def _cosine_alpha_bar(num_steps: int, s: float = 0.008) -> np.ndarray:
    # f(t) = cos^2(((t/T) + s)/(1 + s) * pi/2), normalised by f(0); value at
    # index t is the cumulative product after t + 1 steps.
    steps = np.arange(num_steps + 1, dtype=np.float64) / num_steps
    f = np.cos((steps + s) / (1 + s) * math.pi / 2) ** 2
    return f / f[0]


def make_schedule(kind: str = "cosine", num_steps: int = 1000) -> NoiseSchedule:
    """Build a noise schedule.

    ``linear`` spaces beta on [1e-4, 0.02]; ``cosine`` follows the squared
    cosine cumulative-product curve, with beta capped at 0.999.
    """
    if int(num_steps) != num_steps or num_steps < 2:
        raise ValueError(f"num_steps must be an integer >= 2, got {num_steps}")
    num_steps = int(num_steps)
    if kind == "linear":
        beta = np.linspace(1e-4, 0.02, num_steps, dtype=np.float64)
    elif kind == "cosine":
        f = _cosine_alpha_bar(num_steps)
        beta = np.clip(1.0 - f[1:] / f[:-1], 0.0, 0.999)
    else:
        raise ValueError(f"unknown schedule kind {kind!r}; expected one of {SCHEDULE_KINDS}")
    alpha_bar = np.cumprod(1.0 - beta)
    log_snr = np.log(alpha_bar) - np.log1p(-alpha_bar)
    for arr in (beta, alpha_bar, log_snr):
        arr.setflags(write=False)
    return NoiseSchedule(num_steps, beta, alpha_bar, log_snr, kind)


def _as_tensor(x, like: torch.Tensor | None = None) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    x = np.asarray(x)
    t = torch.from_numpy(np.ascontiguousarray(x))
    if like is not None:
        t = t.to(like.dtype)
    return t


def _check_same_shape(a: torch.Tensor, b: torch.Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def q_sample(x0, t: int, noise, sched: NoiseSchedule) -> torch.Tensor:
    """Forward corruption ``sqrt(ab_t) * x0 + sqrt(1 - ab_t) * noise``."""
    x0 = _as_tensor(x0)
    noise = _as_tensor(noise, like=x0)
    _check_same_shape(x0, noise, "q_sample")
    t = sched.check_timestep(t)
    ab = float(sched.alpha_bar[t])
    return math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * noise


def q_sample_batch(x0: torch.Tensor, t: torch.Tensor, noise: torch.Tensor,
                   sched: NoiseSchedule) -> torch.Tensor:
    """Batched forward corruption; ``t`` holds one timestep per leading row."""
    _check_same_shape(x0, noise, "q_sample_batch")
    ab = torch.tensor(sched.alpha_bar, dtype=x0.dtype)[t]
    ab = ab.reshape(-1, *([1] * (x0.dim() - 1)))
    return ab.sqrt() * x0 + (1 - ab).sqrt() * noise


def cfg_combine(eps_cond, eps_uncond, scale: float) -> torch.Tensor:
    """Guided noise ``eps_uncond + scale * (eps_cond - eps_uncond)``.

    ``scale = 1`` is the pure conditional prediction, ``scale = 0`` the pure
    unconditional one.
    """
    eps_cond = _as_tensor(eps_cond)
    eps_uncond = _as_tensor(eps_uncond, like=eps_cond)
    _check_same_shape(eps_cond, eps_uncond, "cfg_combine")
    if scale == 1:
        return eps_cond.clone()
    return eps_uncond + scale * (eps_cond - eps_uncond)


def dynamic_threshold(x0_hat, cfg: GuidanceConfig, per_sample: bool = False) -> torch.Tensor:
    """Quantile clamp-and-rescale of a predicted clean clip.

    ``s = max(clamp_floor, quantile(|x0_hat|, percentile))`` over every element
    of the clip; returns ``clip(x0_hat, -s, s) / s``. With ``per_sample`` the
    leading axis indexes independent clips, each with its own ``s``.
    """
    x = _as_tensor(x0_hat)
    if not torch.isfinite(x).all():
        raise ValueError("dynamic_threshold: non-finite input")
    if per_sample:
        flat = x.reshape(x.shape[0], -1).abs()
        s = torch.quantile(flat, cfg.dynamic_threshold_percentile, dim=1)
        s = s.clamp(min=cfg.clamp_floor).reshape(-1, *([1] * (x.dim() - 1)))
    else:
        s = torch.quantile(x.abs().reshape(-1), cfg.dynamic_threshold_percentile)
        s = s.clamp(min=cfg.clamp_floor)
    return torch.maximum(torch.minimum(x, s), -s) / s


def predict_x0(z_t: torch.Tensor, eps_hat: torch.Tensor, t: int, sched: NoiseSchedule) -> torch.Tensor:
    ab = float(sched.alpha_bar[t])
    return (z_t - math.sqrt(1.0 - ab) * eps_hat) / math.sqrt(ab)


def posterior_coefficients(t: int, sched: NoiseSchedule) -> tuple[float, float, float]:
    """Mean coefficients on (x0, z_t) and variance of q(z_{t-1} | z_t, x0)."""
    ab_t = float(sched.alpha_bar[t])
    ab_prev = 1.0 if t == 1 else float(sched.alpha_bar[t - 1])
    alpha_t = ab_t / ab_prev
    coef_x0 = math.sqrt(ab_prev) * (1.0 - alpha_t) / (1.0 - ab_t)
    coef_zt = math.sqrt(alpha_t) * (1.0 - ab_prev) / (1.0 - ab_t)
    var = (1.0 - ab_prev) / (1.0 - ab_t) * (1.0 - alpha_t)
    return coef_x0, coef_zt, var


def ddpm_step(z_t, eps_hat, t: int, sched: NoiseSchedule, cfg: GuidanceConfig,
              rng_draw=None, per_sample: bool = False) -> torch.Tensor:
    """One ancestral step ``z_t -> z_{t-1}``.

    The clean estimate is dynamically thresholded before forming the
    posterior mean. ``rng_draw`` is ignored at ``t = 1`` (zero variance).
    """
    z_t = _as_tensor(z_t)
    eps_hat = _as_tensor(eps_hat, like=z_t)
    _check_same_shape(z_t, eps_hat, "ddpm_step")
    t = sched.check_timestep(t)
    if t == 0:
        raise ValueError("ddpm_step requires t >= 1")
    x0_hat = dynamic_threshold(predict_x0(z_t, eps_hat, t, sched), cfg, per_sample=per_sample)
    coef_x0, coef_zt, var = posterior_coefficients(t, sched)
    if t == 1:
        return x0_hat
    mean = coef_x0 * x0_hat + coef_zt * z_t
    if rng_draw is None:
        raise ValueError("ddpm_step needs a Gaussian draw for t >= 2")
    rng_draw = _as_tensor(rng_draw, like=z_t)
    _check_same_shape(z_t, rng_draw, "ddpm_step rng_draw")
    return mean + math.sqrt(var) * rng_draw


def sample(model, cond, sched: NoiseSchedule, cfg: GuidanceConfig, seed: int,
           num_frames: int | None = None, frame_offset: int = 0) -> torch.Tensor:
    """Run the full guided reverse chain for one or more conditioning bundles.

    ``cond`` is a single bundle or a list of bundles (generated jointly as a
    batch). Draws come from a NumPy PCG64 stream seeded by ``seed``, so the
    result is reproducible bit for bit. Returns ``(T, H, W)`` for a single
    bundle, ``(B, T, H, W)`` for a list. Pixels invalid under the bundle mask
    are exactly zero.
    """
    from .denoiser import ConditioningBundle, collate_bundles  # local: avoid cycle

    single = isinstance(cond, ConditioningBundle)
    bundles = [cond] if single else list(cond)
    if not bundles:
        raise ValueError("sample: no conditioning bundles")
    T = int(num_frames or model.config.num_frames)
    batch = collate_bundles(bundles, dtype=model.dtype)
    null = collate_bundles([b.null() for b in bundles], dtype=model.dtype)
    B = len(bundles)
    H, W = batch["frame"].shape[-2:]
    shape = (B, T, 1, H, W)
    rng = np.random.Generator(np.random.PCG64(seed))

    def draw() -> torch.Tensor:
        return torch.from_numpy(rng.standard_normal(shape, dtype=np.float32)).to(model.dtype)

    frame_index = torch.arange(frame_offset, frame_offset + T).expand(B, T)
    z = draw()
    was_training = model.training
    model.eval()
    with torch.no_grad():
        for t in range(sched.num_steps - 1, 0, -1):
            lam = torch.full((B,), float(sched.log_snr[t]), dtype=model.dtype)
            eps_c = model(z, lam, batch, frame_index)
            eps_u = model(z, lam, null, frame_index)
            eps = cfg_combine(eps_c, eps_u, cfg.scale)
            z = ddpm_step(z, eps, t, sched, cfg, draw() if t > 1 else None, per_sample=True)
    model.train(was_training)
    mask = batch["mask"].reshape(B, 1, 1, H, W)
    out = torch.where(mask, z, torch.zeros((), dtype=z.dtype))[:, :, 0]
    return out[0] if single else out
