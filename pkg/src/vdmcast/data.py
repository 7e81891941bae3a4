"""Synthetic cyclone-like sequences, clip assembly, normalisation and the
on-disk dataset format.

The generator drives an infrared-like brightness-temperature field and the
reanalysis-like conditioning channels from one latent vortex state (centre
track, intensity, rotation phase), so the imagery is genuinely predictable
from the conditioning.

Clip file layout (``train/clip_####.bin``, little-endian)::

    8 bytes   magic b"VDMCLIP1"
    4 bytes   uint32 header length N
    N bytes   UTF-8 JSON header: frames, height, width, era5_timesteps,
              era5_channels, dtype ("<f4"), timestamps, split, storm, seed, start
    H*W       float32 context frame (the last observed frame)
    T*H*W     float32 target frames
    K*C*H*W   float32 conditioning stack
    ceil(H*W/8) bytes  validity mask, np.packbits row-major, MSB first
"""

from __future__ import annotations

import json
import logging
import os
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .checkpoint import atomic_write_bytes
from .denoiser import ConditioningBundle

logger = logging.getLogger(__name__)

CLIP_MAGIC = b"VDMCLIP1"
BORDER_MARGIN = 4
MAX_TRACK_ATTEMPTS = 100


@dataclass
class FrameGrid:
    values: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.values.shape != self.mask.shape or self.values.ndim != 2:
            raise ValueError("FrameGrid values and mask must be matching 2-D grids")
        if not np.isfinite(self.values).all():
            raise ValueError("FrameGrid values must be finite")
        if np.any(self.values[~self.mask] != 0):
            raise ValueError("FrameGrid invalid pixels must be exactly zero")


@dataclass
class VideoClip:
    """``T`` frames sharing one validity mask; ``timestamps`` in hours."""

    frames: np.ndarray
    mask: np.ndarray
    timestamps: np.ndarray = None

    def __post_init__(self):
        self.frames = np.asarray(self.frames)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.frames.ndim != 3 or self.frames.shape[1:] != self.mask.shape:
            raise ValueError(f"clip frames {self.frames.shape} incompatible with mask {self.mask.shape}")
        if self.timestamps is None:
            self.timestamps = np.arange(len(self.frames), dtype=np.float64)
        self.timestamps = np.asarray(self.timestamps, dtype=np.float64)
        if len(self.timestamps) != len(self.frames) or np.any(np.diff(self.timestamps) <= 0):
            raise ValueError("timestamps must be strictly increasing, one per frame")

    def __len__(self):
        return len(self.frames)

    def frame(self, i: int) -> FrameGrid:
        return FrameGrid(self.frames[i], self.mask)


@dataclass
class ForecastSample:
    """One training/evaluation unit: observed context frame, the frames that
    follow it, and the conditioning stack sliced at the context hour."""

    context: np.ndarray
    target: VideoClip
    era5: np.ndarray
    storm: int = 0
    seed: int = 0
    start: int = 0
    split: str = "train"

    @property
    def mask(self) -> np.ndarray:
        return self.target.mask

    def bundle(self) -> ConditioningBundle:
        return ConditioningBundle(self.context, self.era5, self.target.mask)


@dataclass
class SynthStormParams:
    seed: int
    drift: tuple[float, float] = (0.3, -0.2)
    walk_scale: float = 0.15
    vortex_radius: float = 7.0
    intensity_curve: np.ndarray | None = None
    swirl_strength: float = 0.15
    noise_level: float = 0.05
    era5_channels: int = 3
    size: int = 64
    spiral_arms: int = 2
    corruption_prob: float = 0.0
    start: tuple[float, float] | None = None

    @classmethod
    def from_seed(cls, seed: int, regime: str = "default", **overrides) -> "SynthStormParams":
        """Draw storm parameters from a regime's distribution.

        ``default`` storms are compact and moderately swirling; ``broad``
        storms are larger, slower-rotating and noisier, for distribution
        shift checks.
        """
        rng = np.random.default_rng([int(seed), 7919])
        if regime == "default":
            kw = dict(
                drift=(float(rng.uniform(-0.35, 0.35)), float(rng.uniform(-0.35, 0.35))),
                walk_scale=float(rng.uniform(0.05, 0.2)),
                vortex_radius=float(rng.uniform(5.0, 9.0)),
                swirl_strength=float(rng.uniform(0.08, 0.25)),
                noise_level=float(rng.uniform(0.02, 0.06)),
                spiral_arms=int(rng.integers(1, 4)),
            )
        elif regime == "broad":
            kw = dict(
                drift=(float(rng.uniform(-0.2, 0.2)), float(rng.uniform(-0.2, 0.2))),
                walk_scale=float(rng.uniform(0.05, 0.1)),
                vortex_radius=float(rng.uniform(11.0, 15.0)),
                swirl_strength=float(rng.uniform(0.02, 0.06)),
                noise_level=float(rng.uniform(0.1, 0.15)),
                spiral_arms=int(rng.integers(3, 5)),
            )
        else:
            raise ValueError(f"unknown storm regime {regime!r}")
        kw.update(overrides)
        return cls(seed=int(seed), **kw)


def _default_intensity(rng: np.random.Generator, n: int) -> np.ndarray:
    peak = rng.uniform(0.3, 0.7) * n
    width = rng.uniform(0.3, 0.5) * n
    return 0.25 + 0.75 * np.exp(-(((np.arange(n) - peak) / width) ** 2))


def _sample_track(rng: np.random.Generator, p: SynthStormParams, n: int) -> np.ndarray:
    lo, hi = BORDER_MARGIN, p.size - 1 - BORDER_MARGIN
    drift = np.asarray(p.drift, dtype=np.float64)
    for _ in range(MAX_TRACK_ATTEMPTS):
        if p.start is not None:
            c0 = np.asarray(p.start, dtype=np.float64)
        else:
            c0 = p.size / 2 - drift * n / 2 + rng.uniform(-6, 6, size=2)
        steps = drift + p.walk_scale * rng.standard_normal((n - 1, 2))
        track = np.vstack([c0, c0 + np.cumsum(steps, axis=0)])
        if track.min() >= lo and track.max() <= hi:
            return track
    raise ValueError(f"storm {p.seed}: track left the domain after {MAX_TRACK_ATTEMPTS} attempts")


def generate_storm(params: SynthStormParams, num_steps: int, return_track: bool = False):
    """Simulate one storm for ``num_steps`` hourly frames.

    Returns ``(frames, era5)``: a list of raw brightness-temperature
    :class:`FrameGrid` (Kelvin, sanitised) and an array of shape
    ``(num_steps, C, size, size)`` whose channels are the two flow components
    (m/s), a pressure-depth scalar peaking on the vortex centre (hPa) and, for
    ``C > 3``, smoothed cloud moisture. With ``return_track`` the centre
    track ``(num_steps, 2)`` in (x, y) pixels is returned as a third item.
    """
    if num_steps < 10:
        raise ValueError("num_steps must be >= 10")
    p = params
    if not 1 <= p.era5_channels <= 4:
        raise ValueError("era5_channels must lie in [1, 4]")
    rng = np.random.default_rng(int(p.seed))
    track = _sample_track(rng, p, num_steps)
    if p.intensity_curve is None:
        intensity = _default_intensity(rng, num_steps)
    else:
        intensity = np.broadcast_to(np.asarray(p.intensity_curve, dtype=np.float64), (num_steps,))
        if intensity.min() < 0 or intensity.max() > 1:
            raise ValueError("intensity_curve values must lie in [0, 1]")

    n = p.size
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64)
    R = p.vortex_radius
    tex = gaussian_filter(rng.standard_normal((n, n)), 2.0, mode="wrap")
    tex /= tex.std()
    rho = 0.95

    frames, era5 = [], np.empty((num_steps, p.era5_channels, n, n))
    for k in range(num_steps):
        if k:
            fresh = gaussian_filter(rng.standard_normal((n, n)), 2.0, mode="wrap")
            tex = rho * tex + np.sqrt(1 - rho**2) * fresh / fresh.std()
        cx, cy = track[k]
        dx, dy = xx - cx, yy - cy
        r = np.hypot(dx, dy)
        theta = np.arctan2(dy, dx)
        I = intensity[k]
        core = np.exp(-(r**2) / (2 * R**2))
        bands = 0.5 * (1 + np.cos(p.spiral_arms * (theta - p.swirl_strength * k) + 3.0 * r / R))
        cloud = I * (core + 0.6 * bands * np.exp(-r / (2.5 * R)) * (1 - core)) + p.noise_level * tex
        bt = 300.0 - 100.0 * cloud
        if p.corruption_prob and rng.random() < p.corruption_prob:
            h, w = rng.integers(3, 9, size=2)
            y0, x0 = rng.integers(0, n - h), rng.integers(0, n - w)
            bt[y0:y0 + h, x0:x0 + w] = np.nan
        frames.append(sanitize(bt))

        speed = 40.0 * I * (r / R) * np.exp(1 - r / R)
        fields = [
            -speed * np.sin(theta) + p.drift[0],
            speed * np.cos(theta) + p.drift[1],
            50.0 * I * np.exp(-(r**2) / (2 * (1.5 * R) ** 2)),
            gaussian_filter(I * core, 1.5),
        ]
        era5[k] = np.stack(fields[: p.era5_channels])
    if return_track:
        return frames, era5, track
    return frames, era5


def sanitize(raw) -> FrameGrid:
    """Replace NaNs by zero and mark them invalid."""
    raw = np.asarray(raw, dtype=np.float64)
    bad = np.isnan(raw)
    return FrameGrid(np.where(bad, 0.0, raw), ~bad)


def assemble_clips(sequence, clip_len: int, stride: int) -> list[VideoClip]:
    """Slide a ``clip_len`` window over a frame sequence with the given stride.

    Each clip's mask is the AND of its frames' masks; values outside it are
    zeroed. Trailing windows shorter than ``clip_len`` are dropped.
    """
    if clip_len < 1 or stride < 1:
        raise ValueError("clip_len and stride must be >= 1")
    frames = list(sequence)
    if len(frames) < clip_len:
        raise ValueError(f"sequence of {len(frames)} frames is shorter than clip_len={clip_len}")
    clips = []
    for s in range(0, len(frames) - clip_len + 1, stride):
        window = frames[s:s + clip_len]
        mask = np.logical_and.reduce([f.mask for f in window])
        vals = np.stack([np.where(mask, f.values, 0) for f in window])
        clips.append(VideoClip(vals, mask, np.arange(clip_len, dtype=np.float64)))
    return clips


@dataclass(frozen=True)
class NormStats:
    """Per-channel ranges. ``lo``/``hi`` broadcast against the values."""

    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        lo, hi = np.asarray(self.lo, dtype=np.float64), np.asarray(self.hi, dtype=np.float64)
        if lo.shape != hi.shape or np.any(hi <= lo) or not (np.isfinite(lo).all() and np.isfinite(hi).all()):
            raise ValueError("degenerate normalisation stats (max must exceed min)")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)


def normalize(values, stats: NormStats) -> np.ndarray:
    """Affine map of ``[lo, hi]`` onto ``[-1, 1]``; out-of-range values are
    clipped with a logged warning."""
    v = np.asarray(values, dtype=np.float64)
    y = 2.0 * (v - stats.lo) / (stats.hi - stats.lo) - 1.0
    if np.any(np.abs(y) > 1.0):
        logger.warning("normalize: %d values outside the training range clipped to [-1, 1]",
                       int(np.count_nonzero(np.abs(y) > 1.0)))
        y = np.clip(y, -1.0, 1.0)
    return y


def denormalize(values, stats: NormStats) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    return (v + 1.0) * 0.5 * (stats.hi - stats.lo) + stats.lo


@dataclass
class DatasetSpec:
    train_storms: int = 60
    test_storms: int = 18
    steps_per_storm: int = 51
    clip_len: int = 10
    stride: int = 10
    base_seed: int = 0
    image_size: int = 64
    era5_channels: int = 3
    cond_timesteps: int = 3
    corruption_prob: float = 0.02
    regime: str = "default"
    train_seeds: list[int] | None = None
    test_seeds: list[int] | None = None

    def seeds(self) -> tuple[list[int], list[int]]:
        train = list(self.train_seeds) if self.train_seeds is not None else [
            self.base_seed + i for i in range(self.train_storms)]
        test = list(self.test_seeds) if self.test_seeds is not None else [
            self.base_seed + 100_000 + i for i in range(self.test_storms)]
        clash = set(train) & set(test)
        if clash:
            raise ValueError(f"seed collision across splits: {sorted(clash)}")
        if len(set(train)) != len(train) or len(set(test)) != len(test):
            raise ValueError("duplicate storm seeds within a split")
        return train, test

    def storm_params(self, seed: int) -> SynthStormParams:
        return SynthStormParams.from_seed(
            seed, self.regime, era5_channels=self.era5_channels, size=self.image_size,
            corruption_prob=self.corruption_prob,
        )


@dataclass
class Storm:
    """A normalised storm: frames ``(N, H, W)``, stack ``(N, C, H, W)``, masks ``(N, H, W)``."""

    frames: np.ndarray
    era5: np.ndarray
    masks: np.ndarray
    seed: int
    split: str
    index: int


def simulate_storm(spec: DatasetSpec, seed: int):
    frames, era5 = generate_storm(spec.storm_params(seed), spec.steps_per_storm)
    return frames, era5


def compute_stats(storms) -> tuple[NormStats, NormStats]:
    """IR and per-channel conditioning ranges over valid pixels of raw storms."""
    ir_lo, ir_hi = np.inf, -np.inf
    e_lo = e_hi = None
    for frames, era5 in storms:
        for f in frames:
            if f.mask.any():
                ir_lo = min(ir_lo, f.values[f.mask].min())
                ir_hi = max(ir_hi, f.values[f.mask].max())
        lo, hi = era5.min(axis=(0, 2, 3)), era5.max(axis=(0, 2, 3))
        e_lo = lo if e_lo is None else np.minimum(e_lo, lo)
        e_hi = hi if e_hi is None else np.maximum(e_hi, hi)
    return NormStats(np.array(ir_lo), np.array(ir_hi)), NormStats(e_lo, e_hi)


def normalize_storm(frames, era5, ir_stats: NormStats, era5_stats: NormStats,
                    seed: int = 0, split: str = "train", index: int = 0) -> Storm:
    masks = np.stack([f.mask for f in frames])
    vals = np.stack([f.values for f in frames])
    ir = np.where(masks, normalize(np.where(masks, vals, ir_stats.lo), ir_stats), 0.0).astype(np.float32)
    e = normalize(era5, NormStats(era5_stats.lo[:, None, None], era5_stats.hi[:, None, None]))
    return Storm(ir, e.astype(np.float32), masks, seed, split, index)


def storm_samples(storm: Storm, clip_len: int, stride: int, cond_timesteps: int) -> list[ForecastSample]:
    """Cut a storm into (context frame + ``clip_len`` targets) samples."""
    grids = [FrameGrid(v, m) for v, m in zip(storm.frames, storm.masks)]
    windows = assemble_clips(grids, clip_len + 1, stride)
    out = []
    for i, w in enumerate(windows):
        s = i * stride
        era5 = np.where(w.mask, storm.era5[s:s + cond_timesteps], np.float32(0)).astype(np.float32)
        target = VideoClip(w.frames[1:].astype(np.float32), w.mask, np.arange(1, clip_len + 1, dtype=np.float64))
        out.append(ForecastSample(w.frames[0].astype(np.float32), target, era5,
                                  storm=storm.index, seed=storm.seed, start=s, split=storm.split))
    return out


def encode_sample(sample: ForecastSample) -> bytes:
    T, H, W = sample.target.frames.shape
    K, C = sample.era5.shape[:2]
    header = {
        "frames": T, "height": H, "width": W, "era5_timesteps": K, "era5_channels": C,
        "dtype": "<f4", "timestamps": [float(t) for t in sample.target.timestamps],
        "split": sample.split, "storm": int(sample.storm), "seed": int(sample.seed), "start": int(sample.start),
    }
    hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    payload = b"".join(np.ascontiguousarray(a, dtype="<f4").tobytes()
                       for a in (sample.context, sample.target.frames, sample.era5))
    return CLIP_MAGIC + struct.pack("<I", len(hb)) + hb + payload + np.packbits(sample.mask.ravel()).tobytes()


def decode_sample(data: bytes) -> ForecastSample:
    if data[:8] != CLIP_MAGIC:
        raise ValueError("not a clip file (bad magic)")
    (hlen,) = struct.unpack_from("<I", data, 8)
    h = json.loads(data[12:12 + hlen])
    T, H, W, K, C = h["frames"], h["height"], h["width"], h["era5_timesteps"], h["era5_channels"]
    off = 12 + hlen
    floats = np.frombuffer(data, dtype="<f4", count=H * W * (1 + T + K * C), offset=off).astype(np.float32)
    off += floats.nbytes
    mask = np.unpackbits(np.frombuffer(data, dtype=np.uint8, offset=off), count=H * W).astype(bool).reshape(H, W)
    context = floats[:H * W].reshape(H, W)
    frames = floats[H * W:H * W * (1 + T)].reshape(T, H, W)
    era5 = floats[H * W * (1 + T):].reshape(K, C, H, W)
    return ForecastSample(context, VideoClip(frames, mask, h["timestamps"]), era5,
                          storm=h["storm"], seed=h["seed"], start=h["start"], split=h["split"])


def save_sample(path, sample: ForecastSample) -> None:
    atomic_write_bytes(path, encode_sample(sample))


def load_sample(path) -> ForecastSample:
    return decode_sample(Path(path).read_bytes())


_SPEC_FIELDS = [f for f in DatasetSpec.__dataclass_fields__ if f not in ("train_seeds", "test_seeds")]


def _fmt(x) -> str:
    if isinstance(x, (list, tuple, np.ndarray)):
        return ",".join(_fmt(v) for v in np.asarray(x).ravel()) if np.ndim(x) else _fmt(float(x))
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


@dataclass
class Manifest:
    spec: DatasetSpec
    ir_stats: NormStats
    era5_stats: NormStats
    storms: list[tuple[str, int, int, int]] = field(default_factory=list)  # split, index, seed, n_clips
    clips: list[tuple[str, str, int, int]] = field(default_factory=list)   # split, file, storm, start

    def dumps(self) -> str:
        lines = ["# vdmcast dataset manifest", "version = 1"]
        for k in _SPEC_FIELDS:
            lines.append(f"{k} = {_fmt(getattr(self.spec, k))}")
        lines += [
            f"ir_min = {_fmt(self.ir_stats.lo)}", f"ir_max = {_fmt(self.ir_stats.hi)}",
            f"era5_min = {_fmt(self.era5_stats.lo)}", f"era5_max = {_fmt(self.era5_stats.hi)}",
            "[storms]", "# split index seed n_clips",
        ]
        lines += [f"{s} {i} {seed} {n}" for s, i, seed, n in self.storms]
        lines += ["[clips]", "# split file storm start"]
        lines += [f"{s} {f} {i} {st}" for s, f, i, st in self.clips]
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text: str) -> "Manifest":
        section, kv, storms, clips = None, {}, [], []
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if line.startswith("["):
                section = line.strip("[]")
                continue
            if section is None:
                k, v = (p.strip() for p in line.split("=", 1))
                kv[k] = v
            elif section == "storms":
                s, i, seed, n = line.split()
                storms.append((s, int(i), int(seed), int(n)))
            else:
                s, f, i, st = line.split()
                clips.append((s, f, int(i), int(st)))
        types = {f.name: f.type for f in DatasetSpec.__dataclass_fields__.values()}
        spec_kw = {}
        for k in _SPEC_FIELDS:
            t = types[k]
            spec_kw[k] = float(kv[k]) if t == "float" else (kv[k] if t == "str" else int(kv[k]))
        spec = DatasetSpec(**spec_kw)
        spec.train_seeds = [seed for s, _, seed, _ in storms if s == "train"]
        spec.test_seeds = [seed for s, _, seed, _ in storms if s == "test"]
        flt = lambda v: np.array([float(x) for x in v.split(",")])
        return cls(spec, NormStats(flt(kv["ir_min"])[0], flt(kv["ir_max"])[0]),
                   NormStats(flt(kv["era5_min"]), flt(kv["era5_max"])), storms, clips)

    def storm(self, split: str, index: int) -> Storm:
        """Regenerate one normalised storm from its recorded seed."""
        seed = next(sd for s, i, sd, _ in self.storms if s == split and i == index)
        frames, era5 = simulate_storm(self.spec, seed)
        return normalize_storm(frames, era5, self.ir_stats, self.era5_stats, seed, split, index)


def build_dataset(spec: DatasetSpec, root=None) -> tuple[list[ForecastSample], list[ForecastSample]]:
    """Generate train/test storms, normalise with training-split stats and
    (when ``root`` is given) persist clips plus ``manifest.txt``."""
    train_seeds, test_seeds = spec.seeds()
    raw_train = [simulate_storm(spec, s) for s in train_seeds]
    ir_stats, era5_stats = compute_stats(raw_train)
    manifest = Manifest(spec, ir_stats, era5_stats)
    splits = {"train": [], "test": []}
    for split, seeds, raws in (("train", train_seeds, raw_train), ("test", test_seeds, None)):
        for idx, seed in enumerate(seeds):
            frames, era5 = raws[idx] if raws is not None else simulate_storm(spec, seed)
            storm = normalize_storm(frames, era5, ir_stats, era5_stats, seed, split, idx)
            samples = storm_samples(storm, spec.clip_len, spec.stride, spec.cond_timesteps)
            manifest.storms.append((split, idx, seed, len(samples)))
            splits[split].extend(samples)
    if root is not None:
        root = Path(root)
        for split, samples in splits.items():
            for j, smp in enumerate(samples):
                name = f"{split}/clip_{j:04d}.bin"
                save_sample(root / name, smp)
                manifest.clips.append((split, name, smp.storm, smp.start))
        atomic_write_bytes(root / "manifest.txt", manifest.dumps().encode())
    return splits["train"], splits["test"]


def load_manifest(root) -> Manifest:
    return Manifest.loads((Path(root) / "manifest.txt").read_text())


def load_dataset(root) -> tuple[list[ForecastSample], list[ForecastSample], Manifest]:
    root = Path(root)
    if not (root / "manifest.txt").exists():
        raise FileNotFoundError(f"no dataset manifest under {root}")
    manifest = load_manifest(root)
    splits = {"train": [], "test": []}
    for split, name, _, _ in manifest.clips:
        splits[split].append(load_sample(root / name))
    return splits["train"], splits["test"], manifest
