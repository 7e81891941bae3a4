"""Conditional video-diffusion forecasting for cyclone-like image sequences."""

__version__ = "0.1.0"

from .data import DatasetSpec, ForecastSample, FrameGrid, VideoClip, build_dataset, load_dataset
from .denoiser import ConditioningBundle, DenoiserConfig, build_denoiser, null_bundle
from .diffusion import GuidanceConfig, NoiseSchedule, make_schedule, sample
from .estimator import VideoDiffusionForecaster
from .metrics import MetricReport, evaluate, fid, fvd, mae, psnr, ssim
from .rollout import RolloutTrace, cascade_forecast, reliable_horizon
from .trainer import StageConfig, TrainReport, train_stage, two_stage_train

__all__ = [
    "ConditioningBundle", "DatasetSpec", "DenoiserConfig", "ForecastSample", "FrameGrid", "GuidanceConfig",
    "MetricReport", "NoiseSchedule", "RolloutTrace", "StageConfig", "TrainReport", "VideoClip",
    "VideoDiffusionForecaster", "build_dataset", "build_denoiser", "cascade_forecast", "evaluate", "fid", "fvd",
    "load_dataset", "mae", "make_schedule", "null_bundle", "psnr", "reliable_horizon", "sample", "ssim",
    "train_stage", "two_stage_train",
]
