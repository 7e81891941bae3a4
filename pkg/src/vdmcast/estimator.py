"""Scikit-learn style front end over the denoiser, trainer and sampler."""

from __future__ import annotations

import numpy as np
import torch
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import metrics
from .denoiser import ConditioningBundle, DenoiserConfig, build_denoiser
from .diffusion import GuidanceConfig, make_schedule, sample
from .trainer import StageConfig, load_model, two_stage_train


def _as_samples(X):
    X = list(X)
    if not X:
        raise ValueError("empty input")
    for x in X:
        if not hasattr(x, "bundle") or not hasattr(x, "target"):
            raise TypeError(f"expected ForecastSample items, got {type(x).__name__}")
    return X


def _as_bundles(X):
    X = list(X)
    if not X:
        raise ValueError("empty input")
    return [x if isinstance(x, ConditioningBundle) else x.bundle() for x in X]


class VideoDiffusionForecaster(BaseEstimator):
    """Conditional video diffusion forecaster.

    ``fit`` runs the single-frame then multi-frame curriculum on a list of
    ``ForecastSample``; ``predict`` generates one clip per sample (or
    conditioning bundle) and returns ``(N, T, H, W)``; ``score`` is the mean
    per-frame SSIM against the samples' targets.
    """

    def __init__(self, base_channels=32, channel_multipliers=(1, 2, 4), temporal_attention_heads=2,
                 embed_dim=128, attention_levels=2, max_frames=16, schedule="cosine", num_steps=100,
                 guidance_scale=3.0, dynamic_threshold_percentile=0.995, stage1_epochs=20,
                 stage2_epochs=60, batch_size=1, learning_rate=3e-4, cond_dropout_prob=0.1,
                 grad_clip=1.0, sample_batch_size=8, seed=0, checkpoint_dir=None):
        self.base_channels = base_channels
        self.channel_multipliers = channel_multipliers
        self.temporal_attention_heads = temporal_attention_heads
        self.embed_dim = embed_dim
        self.attention_levels = attention_levels
        self.max_frames = max_frames
        self.schedule = schedule
        self.num_steps = num_steps
        self.guidance_scale = guidance_scale
        self.dynamic_threshold_percentile = dynamic_threshold_percentile
        self.stage1_epochs = stage1_epochs
        self.stage2_epochs = stage2_epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.cond_dropout_prob = cond_dropout_prob
        self.grad_clip = grad_clip
        self.sample_batch_size = sample_batch_size
        self.seed = seed
        self.checkpoint_dir = checkpoint_dir

    def _denoiser_config(self, first) -> DenoiserConfig:
        K, C, H, _ = first.era5.shape
        return DenoiserConfig(
            base_channels=self.base_channels, channel_multipliers=tuple(self.channel_multipliers),
            temporal_attention_heads=self.temporal_attention_heads, cond_channels=C, cond_timesteps=K,
            embed_dim=self.embed_dim, image_size=H, num_frames=len(first.target),
            max_frames=self.max_frames, attention_levels=self.attention_levels,
        )

    def _stage_configs(self) -> tuple[StageConfig, StageConfig]:
        common = dict(batch_size=self.batch_size, learning_rate=self.learning_rate,
                      cond_dropout_prob=self.cond_dropout_prob, grad_clip=self.grad_clip)
        return (StageConfig("single_frame", self.stage1_epochs, seed=2 * self.seed + 1, **common),
                StageConfig("multi_frame", self.stage2_epochs, seed=2 * self.seed + 2, **common))

    def fit(self, X, y=None):
        X = _as_samples(X)
        shapes = {(s.target.frames.shape, s.era5.shape) for s in X}
        if len(shapes) != 1:
            raise ValueError(f"samples disagree in shape: {sorted(shapes)}")
        self.schedule_ = make_schedule(self.schedule, self.num_steps)
        self.model_ = build_denoiser(self._denoiser_config(X[0]), seed=self.seed)
        s1, s2 = self._stage_configs()
        _, self.reports_ = two_stage_train(self.model_, X, self.schedule_, s1, s2, out_dir=self.checkpoint_dir)
        self.n_features_in_ = int(np.prod(X[0].target.frames.shape[1:]))
        return self

    @classmethod
    def from_checkpoint(cls, path, **params) -> "VideoDiffusionForecaster":
        """Rebuild a fitted estimator from a saved stage checkpoint."""
        model, ck = load_model(path)
        c = model.config
        est = cls(base_channels=c.base_channels, channel_multipliers=c.channel_multipliers,
                  temporal_attention_heads=c.temporal_attention_heads, embed_dim=c.embed_dim,
                  attention_levels=c.attention_levels, max_frames=c.max_frames, **params)
        est.model_ = model
        est.schedule_ = make_schedule(est.schedule, est.num_steps)
        est.reports_ = ()
        est.n_features_in_ = c.image_size * c.image_size
        return est

    def guidance(self) -> GuidanceConfig:
        return GuidanceConfig(scale=self.guidance_scale,
                              dynamic_threshold_percentile=self.dynamic_threshold_percentile)

    def predict(self, X, seed=None) -> np.ndarray:
        check_is_fitted(self, "model_")
        bundles = _as_bundles(X)
        seed = self.seed if seed is None else seed
        states = np.random.SeedSequence(seed).generate_state(-(-len(bundles) // self.sample_batch_size))
        out = []
        for i, state in enumerate(states):
            chunk = bundles[i * self.sample_batch_size:(i + 1) * self.sample_batch_size]
            with torch.no_grad():
                out.append(sample(self.model_, chunk, self.schedule_, self.guidance(), int(state)).numpy())
        return np.concatenate(out)

    def score(self, X, y=None) -> float:
        X = _as_samples(X)
        pred = self.predict(X)
        return float(np.mean([metrics.ssim(p, s.target.frames, mask=s.mask) for p, s in zip(pred, X)]))
