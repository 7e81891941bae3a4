"""INI run configuration shared by every CLI subcommand.

Every key has a typed default; a config file only lists what it changes.
Unknown sections or keys are rejected so typos fail loudly. Relative paths
are resolved against the working directory.
"""

from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, field
from pathlib import Path

from .data import DatasetSpec
from .denoiser import DenoiserConfig
from .diffusion import GuidanceConfig, make_schedule
from .trainer import PRESETS, StageConfig


class ConfigError(ValueError):
    """Invalid run configuration (reported as a usage error by the CLI)."""


DEFAULTS: dict[str, dict[str, object]] = {
    "run": {"seed": 0, "output_dir": "runs/default"},
    "data": {
        "root": "data/synth",
        "train_storms": 60,
        "test_storms": 18,
        "steps_per_storm": 51,
        "clip_len": 10,
        "stride": 10,
        "base_seed": 0,
        "image_size": 64,
        "era5_channels": 3,
        "cond_timesteps": 3,
        "corruption_prob": 0.02,
        "regime": "default",
    },
    "model": {
        "base_channels": 32,
        "channel_multipliers": (1, 2, 4),
        "temporal_attention_heads": 2,
        "embed_dim": 128,
        "max_frames": 16,
        "attention_levels": 2,
    },
    "diffusion": {
        "schedule": "cosine",
        "num_steps": 100,
        "guidance_scale": 3.0,
        "dynamic_threshold_percentile": 0.995,
        "clamp_floor": 1.0,
    },
    "train": {
        "preset": "full",
        "stage1_epochs": -1,  # -1: take the preset's value
        "stage2_epochs": -1,
        "batch_size": 1,
        "learning_rate": 3e-4,
        "cond_dropout_prob": 0.1,
        "grad_clip": 1.0,
        "max_clips": 0,  # 0: every training clip
    },
    "eval": {
        "extractor_seed": 0,
        "frame_feature_dim": 64,
        "clip_feature_dim": 64,
        "max_clips": 0,
        "batch_size": 8,
    },
    "rollout": {
        "horizon": 50,
        "storms": 3,
        "mode": "video",
        "drop_window": 5,
        "drop_threshold": 0.03,
    },
}


def _parse(default, raw: str, where: str):
    try:
        if isinstance(default, bool):
            return raw.strip().lower() in ("1", "true", "yes", "on")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(int(v) for v in raw.replace(" ", "").split(",") if v)
    except ValueError as exc:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {type(default).__name__}") from exc
    return raw.strip()


def _format(v) -> str:
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


@dataclass
class RunConfig:
    values: dict[str, dict[str, object]] = field(
        default_factory=lambda: {s: dict(kv) for s, kv in DEFAULTS.items()})
    source: str | None = None

    @classmethod
    def from_text(cls, text: str, source: str | None = None) -> "RunConfig":
        parser = configparser.ConfigParser(interpolation=None)
        try:
            parser.read_string(text, source=source or "<config>")
        except configparser.Error as exc:
            raise ConfigError(str(exc)) from exc
        cfg = cls(source=source)
        for section in parser.sections():
            if section not in DEFAULTS:
                raise ConfigError(f"unknown config section [{section}]")
            for key, raw in parser.items(section):
                if key not in DEFAULTS[section]:
                    raise ConfigError(f"unknown key {key!r} in [{section}]")
                cfg.values[section][key] = _parse(DEFAULTS[section][key], raw, f"[{section}] {key}")
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path=None) -> "RunConfig":
        if path is None:
            cfg = cls()
            cfg.validate()
            return cfg
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        return cls.from_text(p.read_text(), source=str(p))

    def __getitem__(self, section: str) -> dict[str, object]:
        return self.values[section]

    def set(self, section: str, key: str, value) -> None:
        if key not in DEFAULTS.get(section, {}):
            raise ConfigError(f"unknown key {key!r} in [{section}]")
        self.values[section][key] = value

    def validate(self) -> None:
        """Build every derived object once so bad values surface early."""
        try:
            self.dataset_spec().seeds()
            self.denoiser_config()
            self.schedule()
            self.guidance()
            self.stage_configs()
        except ConfigError:
            raise
        except (ValueError, TypeError) as exc:
            raise ConfigError(str(exc)) from exc
        if self["rollout"]["mode"] not in ("video", "frame"):
            raise ConfigError("[rollout] mode must be 'video' or 'frame'")
        if self["train"]["preset"] not in PRESETS:
            raise ConfigError(f"[train] preset must be one of {sorted(PRESETS)}")

    # derived objects

    @property
    def seed(self) -> int:
        return int(self["run"]["seed"])

    @property
    def output_dir(self) -> Path:
        return Path(str(self["run"]["output_dir"]))

    @property
    def data_root(self) -> Path:
        return Path(str(self["data"]["root"]))

    def dataset_spec(self) -> DatasetSpec:
        d = {k: v for k, v in self["data"].items() if k != "root"}
        return DatasetSpec(**d)

    def denoiser_config(self) -> DenoiserConfig:
        d = self["data"]
        return DenoiserConfig(
            cond_channels=int(d["era5_channels"]),
            cond_timesteps=int(d["cond_timesteps"]),
            image_size=int(d["image_size"]),
            num_frames=int(d["clip_len"]),
            **self["model"],
        )

    def schedule(self):
        d = self["diffusion"]
        return make_schedule(str(d["schedule"]), int(d["num_steps"]))

    def guidance(self) -> GuidanceConfig:
        d = self["diffusion"]
        return GuidanceConfig(float(d["guidance_scale"]), float(d["dynamic_threshold_percentile"]),
                              float(d["clamp_floor"]))

    def stage_epochs(self, preset: str | None = None, skip_stage1: bool = False) -> tuple[int, int]:
        t = self["train"]
        name = preset or str(t["preset"])
        if name not in PRESETS:
            raise ConfigError(f"unknown preset {name!r}; expected one of {sorted(PRESETS)}")
        e1, e2 = PRESETS[name]
        if preset is None:
            e1 = e1 if int(t["stage1_epochs"]) < 0 else int(t["stage1_epochs"])
            e2 = e2 if int(t["stage2_epochs"]) < 0 else int(t["stage2_epochs"])
        return (0 if skip_stage1 else e1), e2

    def stage_configs(self, preset: str | None = None, skip_stage1: bool = False) -> tuple[StageConfig, StageConfig]:
        e1, e2 = self.stage_epochs(preset, skip_stage1)
        t = self["train"]
        common = dict(batch_size=int(t["batch_size"]), learning_rate=float(t["learning_rate"]),
                      cond_dropout_prob=float(t["cond_dropout_prob"]), grad_clip=float(t["grad_clip"]))
        # distinct streams per stage, both fixed by the run seed
        return (StageConfig("single_frame", e1, seed=self.seed * 2 + 1, **common),
                StageConfig("multi_frame", e2, seed=self.seed * 2 + 2, **common))

    def to_ini(self) -> str:
        parser = configparser.ConfigParser(interpolation=None)
        for section, kv in self.values.items():
            parser[section] = {k: _format(v) for k, v in kv.items()}
        buf = io.StringIO()
        parser.write(buf)
        return buf.getvalue()
