"""Two-stage curriculum training of the denoiser.

Stage one trains on single frames (each clip split into independent
context -> frame pairs, the frame's lead index telling the network which
hour it is producing); stage two trains on whole clips, starting from the
stage-one weights with a fresh optimiser.
"""

from __future__ import annotations

import csv
import io
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import checkpoint as ckpt_io
from .denoiser import ConditioningBundle, Denoiser, DenoiserConfig, collate_bundles
from .diffusion import NoiseSchedule, q_sample_batch

logger = logging.getLogger(__name__)

STAGES = ("single_frame", "multi_frame")
# Epoch splits (stage 1, stage 2) for the default and low-data presets.
PRESETS = {"full": (20, 60), "lowdata": (40, 40)}


@dataclass
class StageConfig:
    stage: str = "multi_frame"
    epochs: int = 1
    batch_size: int = 1
    learning_rate: float = 3e-4
    cond_dropout_prob: float = 0.1
    seed: int = 0
    grad_clip: float = 1.0

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"stage must be one of {STAGES}, got {self.stage!r}")
        if self.epochs < 0 or self.batch_size < 1 or not self.learning_rate > 0:
            raise ValueError("epochs must be >= 0, batch_size >= 1 and learning_rate > 0")
        if not 0 <= self.cond_dropout_prob < 1:
            raise ValueError("cond_dropout_prob must lie in [0, 1)")


@dataclass
class TrainReport:
    stage: str
    epoch_losses: list[float] = field(default_factory=list)
    epoch_seconds: list[float] = field(default_factory=list)
    checkpoint_path: str | None = None

    def to_csv(self, include_timing: bool = False) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "mean_loss", "seconds"] if include_timing else ["epoch", "mean_loss"])
        for i, loss in enumerate(self.epoch_losses, 1):
            row = [i, repr(float(loss))]
            if include_timing:
                row.append(f"{self.epoch_seconds[i - 1]:.3f}")
            w.writerow(row)
        return buf.getvalue()


def masked_eps_loss(eps_true: torch.Tensor, eps_pred: torch.Tensor, mask) -> torch.Tensor:
    """Mean squared noise error over valid pixels only.

    ``mask`` is ``(H, W)`` or ``(B, H, W)`` and broadcasts over every other
    axis of the ``(B, T, 1, H, W)`` predictions.
    """
    if eps_true.shape != eps_pred.shape:
        raise ValueError(f"shape mismatch {tuple(eps_true.shape)} vs {tuple(eps_pred.shape)}")
    mask = torch.as_tensor(mask, dtype=torch.bool)
    H, W = eps_true.shape[-2:]
    if mask.shape[-2:] != (H, W):
        raise ValueError("mask does not match the spatial grid")
    if mask.dim() == 3:
        mask = mask.reshape(mask.shape[0], *([1] * (eps_true.dim() - 3)), H, W)
    mask = mask.expand_as(eps_true)
    n = int(mask.sum())
    if n == 0:
        raise ValueError("mask has no valid pixels")
    sq = torch.where(mask, (eps_true - eps_pred) ** 2, torch.zeros((), dtype=eps_true.dtype))
    return sq.sum() / n


def training_items(dataset, stage: str):
    """Expand samples into ``(bundle, target (T, H, W), frame_index)`` items."""
    items = []
    for smp in dataset:
        bundle = smp.bundle()
        frames = np.where(bundle.mask, np.asarray(smp.target.frames, dtype=np.float32), np.float32(0))
        if stage == "multi_frame":
            items.append((bundle, frames, np.arange(len(frames))))
        else:
            items.extend((bundle, frames[j:j + 1], np.array([j])) for j in range(len(frames)))
    return items


class Trainer:
    """Single-writer training loop with resumable state.

    All stochastic choices (visit order, timesteps, noise, guidance dropout)
    come from one NumPy PCG64 stream, which is saved in checkpoints.
    """

    def __init__(self, model: Denoiser, dataset, sched: NoiseSchedule, cfg: StageConfig):
        self.model = model
        self.sched = sched
        self.cfg = cfg
        self.items = training_items(dataset, cfg.stage)
        if not self.items:
            raise ValueError("empty dataset")
        lens = {it[1].shape[0] for it in self.items}
        if cfg.stage == "single_frame" and lens != {1}:
            raise ValueError("single_frame stage needs T = 1 items")
        self.optimizer = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
        self.rng = np.random.Generator(np.random.PCG64(cfg.seed))
        self.order: list[int] = []
        self.pos = 0
        self.epoch = 0
        self.steps = 0
        self.null_draws = 0

    def draws(self, batch: int, shape) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        t = self.rng.integers(1, self.sched.num_steps, size=batch)
        noise = self.rng.standard_normal((batch, *shape), dtype=np.float32)
        drop = self.rng.random(batch) < self.cfg.cond_dropout_prob
        self.null_draws += int(drop.sum())
        return t, noise, drop

    def _next_batch(self):
        if self.pos >= len(self.order):
            self.order = self.rng.permutation(len(self.items)).tolist()
            self.pos = 0
        idx = self.order[self.pos:self.pos + self.cfg.batch_size]
        self.pos += len(idx)
        return [self.items[i] for i in idx]

    def step(self) -> float:
        batch = self._next_batch()
        B = len(batch)
        x0 = torch.from_numpy(np.stack([it[1] for it in batch])[:, :, None]).to(self.model.dtype)
        t, noise, drop = self.draws(B, x0.shape[1:])
        noise = torch.from_numpy(noise).to(x0.dtype)
        bundles = [it[0].null() if d else it[0] for it, d in zip(batch, drop)]
        cond = collate_bundles(bundles, dtype=x0.dtype)
        t = torch.from_numpy(t)
        z = q_sample_batch(x0, t, noise, self.sched)
        lam = torch.tensor(self.sched.log_snr, dtype=x0.dtype)[t]
        frame_index = torch.from_numpy(np.stack([it[2] for it in batch]))
        self.model.train()
        eps = self.model(z, lam, cond, frame_index)
        loss = masked_eps_loss(noise, eps, cond["mask"])
        if not torch.isfinite(loss):
            raise FloatingPointError(
                f"non-finite loss at epoch {self.epoch + 1}, step {self.steps + 1} (t={t.tolist()})"
            )
        self.optimizer.zero_grad(set_to_none=True)
        loss.backward()
        if self.cfg.grad_clip:
            torch.nn.utils.clip_grad_norm_(self.model.parameters(), self.cfg.grad_clip)
        self.optimizer.step()
        self.steps += 1
        return float(loss.detach())

    def run_epoch(self) -> float:
        if self.pos < len(self.order):
            raise RuntimeError("run_epoch called mid-epoch")
        losses = [self.step()]
        while self.pos < len(self.order):
            losses.append(self.step())
        self.epoch += 1
        return float(np.mean(losses))

    def train(self, report: TrainReport | None = None) -> TrainReport:
        report = report or TrainReport(self.cfg.stage)
        for _ in range(self.cfg.epochs - self.epoch):
            t0 = time.perf_counter()
            loss = self.run_epoch()
            report.epoch_losses.append(loss)
            report.epoch_seconds.append(time.perf_counter() - t0)
            logger.info("%s epoch %d/%d loss %.5f", self.cfg.stage, self.epoch, self.cfg.epochs, loss)
        return report

    def to_checkpoint(self) -> ckpt_io.Checkpoint:
        tensors = model_tensors(self.model)
        params = list(self.model.parameters())
        state = self.optimizer.state_dict()["state"]
        for i in sorted(state):
            for k, v in state[i].items():
                tensors[f"optim/{i:04d}/{k}"] = v.detach().cpu().numpy()
        meta = {"epoch": self.epoch, "pos": self.pos, "order": self.order, "steps": self.steps,
                "null_draws": self.null_draws, "stage_config": vars(self.cfg).copy(),
                "num_params": len(params)}
        return ckpt_io.Checkpoint(self.model.config.to_dict(), self.cfg.stage, tensors,
                                  self.rng.bit_generator.state, meta)

    def save(self, path) -> None:
        ckpt_io.save(path, self.to_checkpoint())

    def restore(self, ck: ckpt_io.Checkpoint) -> None:
        load_model_tensors(self.model, ck.tensors)
        state = {}
        for name, arr in ck.tensors.items():
            if name.startswith("optim/"):
                _, i, k = name.split("/")
                state.setdefault(int(i), {})[k] = torch.from_numpy(np.array(arr))
        sd = self.optimizer.state_dict()
        sd["state"] = state
        self.optimizer.load_state_dict(sd)
        self.rng.bit_generator.state = ck.rng_state
        m = ck.meta
        self.epoch, self.pos, self.order = m["epoch"], m["pos"], list(m["order"])
        self.steps, self.null_draws = m["steps"], m["null_draws"]


def model_tensors(model: Denoiser) -> dict[str, np.ndarray]:
    return {f"model/{k}": v.detach().cpu().numpy().copy() for k, v in model.state_dict().items()}


def load_model_tensors(model: Denoiser, tensors: dict[str, np.ndarray]) -> None:
    sd = {k[len("model/"):]: torch.from_numpy(np.array(v)) for k, v in tensors.items() if k.startswith("model/")}
    model.load_state_dict(sd, strict=True)


def save_model(path, model: Denoiser, stage: str, meta: dict | None = None) -> None:
    ckpt_io.save(path, ckpt_io.Checkpoint(model.config.to_dict(), stage, model_tensors(model), None, meta or {}))


def load_model(path) -> tuple[Denoiser, ckpt_io.Checkpoint]:
    ck = ckpt_io.load(path)
    model = Denoiser(DenoiserConfig.from_dict(ck.config))
    load_model_tensors(model, ck.tensors)
    return model, ck


def train_stage(denoiser: Denoiser, dataset, sched: NoiseSchedule, cfg: StageConfig,
                checkpoint_path=None) -> tuple[Denoiser, TrainReport]:
    """Train ``denoiser`` in place for ``cfg.epochs`` epochs."""
    report = TrainReport(cfg.stage)
    if cfg.epochs == 0:
        return denoiser, report
    trainer = Trainer(denoiser, dataset, sched, cfg)
    trainer.train(report)
    if checkpoint_path is not None:
        trainer.save(checkpoint_path)
        report.checkpoint_path = str(checkpoint_path)
    return denoiser, report


def two_stage_train(denoiser: Denoiser, dataset, sched: NoiseSchedule, stage1: StageConfig,
                    stage2: StageConfig, out_dir=None) -> tuple[Denoiser, tuple[TrainReport, TrainReport]]:
    """Single-frame stage then multi-frame stage on the same weights.

    With ``out_dir`` the checkpoints ``stage1.ckpt`` and ``stage2.ckpt`` are
    written after each stage. ``stage1.epochs == 0`` skips the first stage.
    """
    if stage1.stage != "single_frame" or stage2.stage != "multi_frame":
        raise ValueError("two_stage_train expects a single_frame then a multi_frame stage")
    out = Path(out_dir) if out_dir is not None else None
    _, r1 = train_stage(denoiser, dataset, sched, stage1,
                        out / "stage1.ckpt" if out is not None and stage1.epochs else None)
    _, r2 = train_stage(denoiser, dataset, sched, stage2, out / "stage2.ckpt" if out is not None else None)
    return denoiser, (r1, r2)
