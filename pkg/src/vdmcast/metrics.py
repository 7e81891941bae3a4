"""Forecast quality metrics: MAE, PSNR, SSIM, FID and FVD.

FID/FVD use fixed random-weight convolutional extractors rather than a
pretrained network, so absolute values are only comparable within this
package; orderings are what carry meaning.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

import numpy as np
import torch
from numpy.lib.stride_tricks import sliding_window_view
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted
from torch import nn
import torch.nn.functional as F

from ._validation import check_clips, check_frames, check_pair

PSNR_CAP = 100.0
SSIM_WIN = 7
SSIM_SIGMA = 1.5
COV_EPS = 1e-6


def mae(pred, truth, mask=None) -> float:
    p, t, m = check_pair(pred, truth, mask)
    return float(np.abs(p - t)[:, m].mean())


def psnr(pred, truth, data_range: float = 2.0, mask=None) -> float:
    if not data_range > 0:
        raise ValueError("data_range must be positive")
    p, t, m = check_pair(pred, truth, mask)
    mse = float(((p - t) ** 2)[:, m].mean())
    if mse == 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(data_range**2 / mse))


def gaussian_window(size: int = SSIM_WIN, sigma: float = SSIM_SIGMA) -> np.ndarray:
    ax = np.arange(size, dtype=np.float64) - (size - 1) / 2
    g = np.exp(-(ax**2) / (2 * sigma**2))
    w = np.outer(g, g)
    return w / w.sum()


def ssim_map(x: np.ndarray, y: np.ndarray, data_range: float = 2.0) -> np.ndarray:
    """Local SSIM over every fully contained 7x7 window (``valid`` layout)."""
    w = gaussian_window()
    C1, C2 = (0.01 * data_range) ** 2, (0.03 * data_range) ** 2
    X = sliding_window_view(x, w.shape, axis=(-2, -1))
    Y = sliding_window_view(y, w.shape, axis=(-2, -1))
    wsum = lambda a: np.einsum("...ij,ij->...", a, w)
    mx, my = wsum(X), wsum(Y)
    vx = wsum(X * X) - mx**2
    vy = wsum(Y * Y) - my**2
    cxy = wsum(X * Y) - mx * my
    return ((2 * mx * my + C1) * (2 * cxy + C2)) / ((mx**2 + my**2 + C1) * (vx + vy + C2))


def ssim(pred_frame, truth_frame, data_range: float = 2.0, mask=None) -> float:
    """Mean Gaussian-window SSIM of two frames.

    Windows touching an invalid pixel are excluded. Accepts a stack of frames
    ``(T, H, W)`` too, in which case the per-frame values are averaged.
    """
    p, t, m = check_pair(pred_frame, truth_frame, mask)
    if min(m.shape) < SSIM_WIN:
        raise ValueError(f"frame {m.shape} smaller than the {SSIM_WIN}x{SSIM_WIN} window")
    ok = sliding_window_view(m, (SSIM_WIN, SSIM_WIN)).all(axis=(-2, -1))
    if not ok.any():
        raise ValueError("no SSIM window lies entirely on valid pixels")
    vals = ssim_map(p, t, data_range)[:, ok]
    return float(vals.mean(axis=1).mean())


def ssim_frames(pred, truth, data_range: float = 2.0, mask=None) -> np.ndarray:
    """Per-frame SSIM of two ``(T, H, W)`` stacks."""
    p, t, m = check_pair(pred, truth, mask)
    ok = sliding_window_view(m, (SSIM_WIN, SSIM_WIN)).all(axis=(-2, -1))
    if not ok.any():
        raise ValueError("no SSIM window lies entirely on valid pixels")
    return ssim_map(p, t, data_range)[:, ok].mean(axis=1)


def _sqrtm_psd(a: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh((a + a.T) / 2)
    return (vecs * np.sqrt(np.clip(vals, 0, None))) @ vecs.T


def frechet_distance(mu1, cov1, mu2, cov2) -> float:
    """Squared Fréchet distance between two Gaussians.

    ``|mu1 - mu2|^2 + tr(cov1 + cov2 - 2 (cov1 cov2)^(1/2))`` with the trace of
    the root taken as ``sum sqrt(eig(S1 cov2 S1))``, ``S1 = cov1^(1/2)``, all
    via symmetric eigendecompositions with negative eigenvalues clamped.
    """
    mu1, mu2 = np.atleast_1d(np.asarray(mu1, np.float64)), np.atleast_1d(np.asarray(mu2, np.float64))
    cov1, cov2 = np.atleast_2d(np.asarray(cov1, np.float64)), np.atleast_2d(np.asarray(cov2, np.float64))
    if mu1.shape != mu2.shape or cov1.shape != cov2.shape or cov1.shape != (mu1.size, mu1.size):
        raise ValueError("mean/covariance shapes inconsistent")
    for c in (cov1, cov2):
        if np.abs(c - c.T).max() > 1e-8 * max(1.0, np.abs(c).max()):
            raise ValueError("covariance matrix is not symmetric")
    s1 = _sqrtm_psd(cov1)
    inner = s1 @ cov2 @ s1
    eig = np.linalg.eigvalsh((inner + inner.T) / 2)
    tr_sqrt = np.sqrt(np.clip(eig, 0, None)).sum()
    diff = mu1 - mu2
    d2 = diff @ diff + np.trace(cov1) + np.trace(cov2) - 2.0 * tr_sqrt
    return float(max(d2, 0.0))


def gaussian_stats(features: np.ndarray, eps: float = COV_EPS) -> tuple[np.ndarray, np.ndarray]:
    f = np.asarray(features, dtype=np.float64)
    mu = f.mean(axis=0)
    cov = np.cov(f, rowvar=False) + eps * np.eye(f.shape[1])
    return mu, cov


class _Backbone(nn.Module):
    def __init__(self, width: int, in_channels: int = 1):
        super().__init__()
        self.convs = nn.ModuleList([
            nn.Conv2d(in_channels, width, 3, stride=2, padding=1),
            nn.Conv2d(width, 2 * width, 3, stride=2, padding=1),
            nn.Conv2d(2 * width, 4 * width, 3, stride=2, padding=1),
        ])

    def forward(self, x):
        for conv in self.convs:
            x = F.relu(conv(x))
        return x


class FrameFeatureExtractor(TransformerMixin, BaseEstimator):
    """Fixed, untrained 3-level conv stack mapping frames to ``feature_dim``
    features. Weights depend only on ``seed``; ``fit`` ignores its data."""

    def __init__(self, seed: int = 0, feature_dim: int = 64, width: int = 16):
        self.seed = seed
        self.feature_dim = feature_dim
        self.width = width

    def _build(self) -> nn.Module:
        return nn.ModuleDict({"backbone": _Backbone(self.width), "proj": nn.Linear(4 * self.width, self.feature_dim)})

    def fit(self, X=None, y=None):
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(self.seed)
            net = self._build().double()
            for mod in net.modules():
                if isinstance(mod, (nn.Conv1d, nn.Conv2d, nn.Linear)):
                    nn.init.kaiming_normal_(mod.weight, nonlinearity="relu")
                    nn.init.normal_(mod.bias, std=0.1)
        net.eval()
        self.net_ = net
        return self

    def _ensure(self):
        if not hasattr(self, "net_"):
            self.fit()

    def transform(self, X) -> np.ndarray:
        check_is_fitted(self, "net_")
        frames = torch.from_numpy(check_frames(X)).double()[:, None]
        out = []
        with torch.no_grad():
            for chunk in torch.split(frames, 256):
                h = self.net_["backbone"](chunk).mean(dim=(-2, -1))
                out.append(self.net_["proj"](h))
        return torch.cat(out).numpy()


class ClipFeatureExtractor(FrameFeatureExtractor):
    """Two-stream clip features: a content stream over frames and a motion
    stream over frame-to-frame differences, each a spatial stack followed by
    two valid-padded temporal convolutions and its own half of the output.

    The motion stream makes the features respond to frame order, so a
    reordered clip scores differently even though its frame set is the same.
    """

    def __init__(self, seed: int = 0, feature_dim: int = 128, width: int = 16):
        super().__init__(seed=seed, feature_dim=feature_dim, width=width)

    def _stream(self, out_dim: int) -> nn.Module:
        c = 4 * self.width
        return nn.ModuleDict({
            "backbone": _Backbone(self.width),
            "t1": nn.Conv1d(c, c, 3),
            "t2": nn.Conv1d(c, c, 3),
            "proj": nn.Linear(c, out_dim),
        })

    def _build(self) -> nn.Module:
        if self.feature_dim < 2:
            raise ValueError("clip feature_dim must be >= 2 (one share per stream)")
        half = self.feature_dim // 2
        return nn.ModuleDict({"content": self._stream(half), "motion": self._stream(self.feature_dim - half)})

    @staticmethod
    def _run(stream, x):
        n, T, H, W = x.shape
        h = stream["backbone"](x.reshape(n * T, 1, H, W))
        C, h_, w_ = h.shape[1:]
        h = h.reshape(n, T, C, h_, w_).permute(0, 3, 4, 2, 1).reshape(-1, C, T)
        h = F.relu(stream["t2"](F.relu(stream["t1"](h))))
        return stream["proj"](h.reshape(n, h_ * w_, C, -1).mean(dim=(1, 3)))

    def transform(self, X) -> np.ndarray:
        check_is_fitted(self, "net_")
        clips = torch.from_numpy(check_clips(X)).double()
        if clips.shape[1] < 6:
            raise ValueError("clip features need at least 6 frames")
        out = []
        with torch.no_grad():
            for chunk in torch.split(clips, 32):
                out.append(torch.cat([self._run(self.net_["content"], chunk),
                                      self._run(self.net_["motion"], torch.diff(chunk, dim=1))], dim=1))
        return torch.cat(out).numpy()


def _fd_from_features(fa: np.ndarray, fb: np.ndarray, dim: int) -> float:
    for f in (fa, fb):
        if len(f) < dim + 1:
            raise ValueError(
                f"need at least feature_dim + 1 = {dim + 1} samples per side for a full-rank covariance, got {len(f)}"
            )
    return frechet_distance(*gaussian_stats(fa), *gaussian_stats(fb))


def fid(pred_frames, truth_frames, fx: FrameFeatureExtractor | None = None) -> float:
    fx = fx if fx is not None else FrameFeatureExtractor()
    fx._ensure()
    return _fd_from_features(fx.transform(pred_frames), fx.transform(truth_frames), fx.feature_dim)


def fvd(pred_clips, truth_clips, fx: ClipFeatureExtractor | None = None) -> float:
    fx = fx if fx is not None else ClipFeatureExtractor()
    fx._ensure()
    a, b = check_clips(pred_clips), check_clips(truth_clips)
    if a.shape[1:] != b.shape[1:]:
        raise ValueError("clip sets differ in (T, H, W)")
    return _fd_from_features(fx.transform(a), fx.transform(b), fx.feature_dim)


@dataclass
class MetricReport:
    mae: float
    psnr: float
    ssim: float
    fid: float
    fvd: float
    n_clips: int


def evaluate(pred_clips, truth_clips, masks=None, frame_fx=None, clip_fx=None):
    """Per-clip MAE/PSNR/SSIM rows plus a :class:`MetricReport` summary.

    ``masks`` gives one validity grid per clip (default: all valid).
    Invalid pixels are zeroed on both sides before feature extraction, so
    they influence no metric.
    """
    P, Tr = check_clips(pred_clips), check_clips(truth_clips)
    if P.shape != Tr.shape:
        raise ValueError("prediction and truth sets differ in shape")
    if masks is None:
        masks = [None] * len(P)
    else:
        if len(masks) != len(P):
            raise ValueError(f"{len(masks)} masks for {len(P)} clips")
        keep = np.stack([np.ones(P.shape[2:], bool) if m is None else np.asarray(m, bool) for m in masks])
        P = np.where(keep[:, None], P, 0.0)
        Tr = np.where(keep[:, None], Tr, 0.0)
    rows = []
    for p, t, m in zip(P, Tr, masks):
        rows.append({"mae": mae(p, t, m), "psnr": psnr(p, t, mask=m), "ssim": ssim(p, t, mask=m)})
    report = MetricReport(
        mae=float(np.mean([r["mae"] for r in rows])),
        psnr=float(np.mean([r["psnr"] for r in rows])),
        ssim=float(np.mean([r["ssim"] for r in rows])),
        fid=fid(P.reshape(-1, *P.shape[2:]), Tr.reshape(-1, *Tr.shape[2:]), frame_fx),
        fvd=fvd(P, Tr, clip_fx),
        n_clips=len(P),
    )
    return rows, report


def eval_csv(rows, report: MetricReport, extractor_seed: int, frame_dim: int, clip_dim: int,
             names=None) -> str:
    buf = io.StringIO()
    buf.write(f"# extractor_seed={extractor_seed} frame_feature_dim={frame_dim} clip_feature_dim={clip_dim}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["clip", "mae", "psnr", "ssim", "fid", "fvd"])
    names = names or [str(i) for i in range(len(rows))]
    for name, r in zip(names, rows):
        w.writerow([name, repr(r["mae"]), repr(r["psnr"]), repr(r["ssim"]), "", ""])
    w.writerow(["mean", repr(report.mae), repr(report.psnr), repr(report.ssim), repr(report.fid), repr(report.fvd)])
    return buf.getvalue()
