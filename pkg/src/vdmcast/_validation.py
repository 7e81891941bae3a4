"""Input coercion shared by the metrics, rollout and estimator front ends."""

from __future__ import annotations

import numpy as np


def _frames_of(x):
    if hasattr(x, "target"):  # ForecastSample
        return x.target.frames, x.target.mask
    if hasattr(x, "frames") and hasattr(x, "mask"):  # VideoClip
        return x.frames, x.mask
    return np.asarray(x), None


def check_clip(x, mask=None) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(frames (T, H, W) float64, mask (H, W) bool)``."""
    frames, own_mask = _frames_of(x)
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim == 2:
        frames = frames[None]
    if frames.ndim != 3:
        raise ValueError(f"expected a (T, H, W) clip, got shape {frames.shape}")
    if not np.isfinite(frames).all():
        raise ValueError("clip contains non-finite values")
    if mask is None:
        mask = own_mask if own_mask is not None else np.ones(frames.shape[1:], dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != frames.shape[1:]:
        raise ValueError(f"mask {mask.shape} does not match frames {frames.shape[1:]}")
    return frames, mask


def check_pair(pred, truth, mask=None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    p, pm = check_clip(pred, mask)
    t, tm = check_clip(truth, mask)
    if p.shape != t.shape:
        raise ValueError(f"prediction {p.shape} and truth {t.shape} differ in shape")
    if mask is None and not np.array_equal(pm, tm):
        raise ValueError("prediction and truth masks differ")
    if not tm.any():
        raise ValueError("mask has no valid pixels")
    return p, t, tm


def check_frames(X) -> np.ndarray:
    """Stack a frame set into ``(N, H, W)`` float32."""
    if isinstance(X, np.ndarray):
        arr = X
    else:
        arr = np.stack([check_clip(x)[0] for x in X]) if len(X) else np.empty((0, 0, 0))
        if arr.ndim == 4:
            arr = arr.reshape(-1, *arr.shape[2:])
    arr = np.asarray(arr, dtype=np.float32)
    if arr.ndim == 4:
        arr = arr.reshape(-1, *arr.shape[2:])
    if arr.ndim != 3 or not np.isfinite(arr).all():
        raise ValueError(f"expected finite frames of shape (N, H, W), got {arr.shape}")
    return arr


def check_clips(X) -> np.ndarray:
    """Stack a clip set into ``(N, T, H, W)`` float32."""
    if isinstance(X, np.ndarray):
        arr = X
    else:
        arr = np.stack([check_clip(x)[0] for x in X])
    arr = np.asarray(arr, dtype=np.float32)
    if arr.ndim != 4 or not np.isfinite(arr).all():
        raise ValueError(f"expected finite clips of shape (N, T, H, W), got {arr.shape}")
    return arr
