"""Cascaded long-horizon forecasting and SSIM-over-time diagnostics."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from . import metrics
from .data import VideoClip
from .denoiser import ConditioningBundle
from .diffusion import GuidanceConfig, NoiseSchedule, sample

DROP_WINDOW = 5
DROP_THRESHOLD = 0.03  # SSIM per hour


@dataclass
class RolloutTrace:
    """Chained forecast for ``len(full_forecast)`` hours.

    ``hours[i] = i + 1`` is the lead time of ``full_forecast[i]``;
    ``ssim_curve`` and ``min_ssim_hour`` use the same 0-based index.
    """

    chunks: list[VideoClip]
    full_forecast: np.ndarray
    hours: np.ndarray
    chunk_index: np.ndarray
    conditioning_frames: list[np.ndarray] = field(default_factory=list)
    ssim_curve: np.ndarray | None = None
    min_ssim_hour: int | None = None
    min_ssim_value: float | None = None
    reliable_horizon_hours: int | None = None

    def analyze(self, truth, mask=None, drop_window: int = DROP_WINDOW,
                drop_threshold: float = DROP_THRESHOLD) -> "RolloutTrace":
        self.ssim_curve = ssim_curve(self.full_forecast, truth, mask)
        self.min_ssim_hour, self.min_ssim_value = min_ssim_marker(self.ssim_curve)
        self.reliable_horizon_hours = reliable_horizon(self.ssim_curve, drop_window, drop_threshold)
        return self

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["hour", "ssim", "chunk_index"])
        for i, (h, c) in enumerate(zip(self.hours, self.chunk_index)):
            s = "" if self.ssim_curve is None else repr(float(self.ssim_curve[i]))
            w.writerow([int(h), s, int(c)])
        return buf.getvalue()

    def plot_data_csv(self) -> str:
        """Curve points plus the dashed minimum-marker and horizon segments."""
        if self.ssim_curve is None:
            raise ValueError("trace has no SSIM curve; call analyze() first")
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["series", "x", "y"])
        for h, s in zip(self.hours, self.ssim_curve):
            w.writerow(["ssim", int(h), repr(float(s))])
        hour = int(self.hours[self.min_ssim_hour])
        lo = min(0.0, float(np.min(self.ssim_curve)))
        w.writerow(["min_marker", hour, repr(lo)])
        w.writerow(["min_marker", hour, "1.0"])
        w.writerow(["min_point", hour, repr(float(self.min_ssim_value))])
        w.writerow(["reliable_horizon", int(self.reliable_horizon_hours), repr(lo)])
        w.writerow(["reliable_horizon", int(self.reliable_horizon_hours), "1.0"])
        return buf.getvalue()


def cascade_forecast(model, sched: NoiseSchedule, cfg: GuidanceConfig, initial: ConditioningBundle,
                     era5_timeline, horizon_hours: int, seed: int, mode: str = "video",
                     truth=None, corruption=None) -> RolloutTrace:
    """Chain fixed-length generations out to ``horizon_hours``.

    ``era5_timeline[h]`` is the conditioning field at hour ``h`` (hour 0 is
    the initial observation). Chunk ``k`` starts at hour ``k * L`` and is
    conditioned on ``era5_timeline[kL : kL + K]`` plus the last frame of chunk
    ``k - 1``. ``mode="frame"`` runs the same weights one frame at a time.
    ``corruption(k, frames) -> frames`` perturbs chunk ``k`` before chaining.
    """
    if horizon_hours < 1:
        raise ValueError("horizon_hours must be >= 1")
    if mode == "video":
        L = model.config.num_frames
    elif mode == "frame":
        L = 1
    else:
        raise ValueError(f"unknown rollout mode {mode!r}")
    K = model.config.cond_timesteps
    timeline = np.asarray(era5_timeline, dtype=np.float32)
    n_chunks = math.ceil(horizon_hours / L)
    need = max(horizon_hours, (n_chunks - 1) * L + K)
    if timeline.ndim != 4 or len(timeline) < need:
        raise ValueError(f"era5_timeline covers {len(timeline)} hours, need {need}")
    seeds = np.random.SeedSequence(seed).generate_state(n_chunks)
    mask = initial.mask
    frame = initial.initial_frame
    chunks, cond_frames = [], []
    for k in range(n_chunks):
        start = k * L
        bundle = ConditioningBundle(frame, timeline[start:start + K], mask)
        cond_frames.append(bundle.initial_frame)
        out = sample(model, bundle, sched, cfg, int(seeds[k]), num_frames=L).numpy()
        if corruption is not None:
            out = np.where(mask, np.asarray(corruption(k, out), dtype=out.dtype), 0).astype(out.dtype)
        keep = min(L, horizon_hours - start)
        out = out[:keep]
        chunks.append(VideoClip(out, mask, np.arange(start + 1, start + keep + 1, dtype=np.float64)))
        frame = out[-1]
    full = np.concatenate([c.frames for c in chunks])
    trace = RolloutTrace(
        chunks=chunks,
        full_forecast=full,
        hours=np.arange(1, len(full) + 1),
        chunk_index=np.concatenate([np.full(len(c), k) for k, c in enumerate(chunks)]),
        conditioning_frames=cond_frames,
    )
    if truth is not None:
        trace.analyze(truth, mask)
    return trace


def ssim_curve(forecast, truth, mask=None) -> np.ndarray:
    f = np.asarray(forecast, dtype=np.float64)
    t = np.asarray(truth, dtype=np.float64)
    if len(f) != len(t):
        raise ValueError(f"forecast has {len(f)} frames, truth {len(t)}")
    return np.array([metrics.ssim(a, b, mask=mask) for a, b in zip(f, t)])


def reliable_horizon(curve, drop_window: int = DROP_WINDOW, drop_threshold: float = DROP_THRESHOLD) -> int:
    """Hours before the first sharp SSIM decline.

    Scans windows of ``drop_window`` consecutive hourly slopes; the first
    window whose mean slope is below ``-drop_threshold`` marks a decline,
    whose onset is the first slope in that window that is itself below the
    threshold. Returns the number of curve entries preceding the onset, or the
    curve length when no window qualifies.
    """
    c = np.asarray(curve, dtype=np.float64)
    if c.size == 0:
        raise ValueError("empty SSIM curve")
    if drop_window < 1:
        raise ValueError("drop_window must be >= 1")
    d = np.diff(c)
    if d.size == 0:
        return len(c)
    w = min(drop_window, d.size)
    for h in range(d.size - w + 1):
        win = d[h:h + w]
        if win.mean() < -drop_threshold:
            onset = h + int(np.argmax(win < -drop_threshold))
            return onset + 1
    return len(c)


def min_ssim_marker(curve) -> tuple[int, float]:
    c = np.asarray(curve, dtype=np.float64)
    if c.size == 0:
        raise ValueError("empty SSIM curve")
    i = int(np.argmin(c))
    return i, float(c[i])
