"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The heavy criteria (overfit, two-stage comparison) run reduced but complete
experiments on the synthetic storms; their budgets are asserted alongside
the quality thresholds.
"""

import re
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from vdmcast import metrics
from vdmcast.data import DatasetSpec, ForecastSample, VideoClip, build_dataset, load_manifest
from vdmcast.denoiser import ConditioningBundle, DenoiserConfig, build_denoiser
from vdmcast.diffusion import GuidanceConfig, make_schedule, sample
from vdmcast.estimator import VideoDiffusionForecaster
from vdmcast.rollout import cascade_forecast, reliable_horizon
from vdmcast.trainer import StageConfig, two_stage_train

TESTS = Path(__file__).parent
ROOT = TESTS.parent


def _pytest(*args) -> tuple[bool, int, float]:
    t0 = time.perf_counter()
    res = subprocess.run([sys.executable, "-m", "pytest", "-q", "-p", "no:cacheprovider", *args],
                         capture_output=True, text=True, cwd=ROOT)
    elapsed = time.perf_counter() - t0
    m = re.search(r"(\d+) passed", res.stdout)
    return res.returncode == 0, int(m.group(1)) if m else 0, elapsed


def _perturb_invalid(samples, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for s in samples:
        bad = ~s.mask
        frames = s.target.frames.copy()
        frames[:, bad] = rng.uniform(-50, 50, frames[:, bad].shape)
        ctx = s.context.copy()
        ctx[bad] = rng.uniform(-50, 50, int(bad.sum()))
        era5 = s.era5.copy()
        era5[..., bad] = rng.uniform(-50, 50, era5[..., bad].shape)
        out.append(ForecastSample(ctx, VideoClip(frames, s.mask, s.target.timestamps), era5))
    return out


# 1 -------------------------------------------------------------------------

def test_criterion_1_math_oracles(acceptance_report):
    ok, n, secs = _pytest(
        "tests/test_diffusion.py", "tests/test_metrics.py",
        "-k", "q_sample or cfg_combine or dynamic_threshold or frechet or naive_loops or mae_psnr or ssim_examples",
    )
    passed = ok and n >= 10 and secs < 120
    acceptance_report(1, "math oracles", passed, f"{n} oracle tests, {secs:.0f} s (< 120 s)")
    assert passed


# 2 -------------------------------------------------------------------------

def test_criterion_2_gradient_check(acceptance_report):
    ok, n, secs = _pytest("tests/test_denoiser.py::test_gradient_matches_finite_differences")
    passed = ok and n == 1 and secs < 300
    acceptance_report(2, "gradient check", passed, f"60 parameters, rel err <= 1e-3, {secs:.0f} s (< 300 s)")
    assert passed


# 3 -------------------------------------------------------------------------

OVERFIT = dict(image_size=32, base_channels=32, learning_rate=1e-3, stage1_epochs=100, stage2_epochs=300)


def test_criterion_3_overfit(acceptance_report):
    t0 = time.perf_counter()
    train, _ = build_dataset(DatasetSpec(train_storms=2, test_storms=1, image_size=OVERFIT["image_size"],
                                         corruption_prob=0.0))
    clips = train[:4]
    est = VideoDiffusionForecaster(
        base_channels=OVERFIT["base_channels"], channel_multipliers=(1, 2, 4), embed_dim=64,
        temporal_attention_heads=2, attention_levels=2, num_steps=100, learning_rate=OVERFIT["learning_rate"],
        stage1_epochs=OVERFIT["stage1_epochs"], stage2_epochs=OVERFIT["stage2_epochs"], sample_batch_size=4,
        seed=0,
    ).fit(clips)
    final_loss = est.reports_[1].epoch_losses[-1]
    pred = est.predict(clips, seed=0)
    per_frame = np.concatenate([metrics.ssim_frames(p, c.target.frames, mask=c.mask) for p, c in zip(pred, clips)])
    secs = time.perf_counter() - t0
    passed = final_loss < 0.05 and per_frame.mean() > 0.6 and secs < 1800
    acceptance_report(3, "overfit", passed,
                      f"final loss {final_loss:.4f} (< 0.05), mean per-frame SSIM {per_frame.mean():.3f} (> 0.6), "
                      f"min {per_frame.min():.3f}, {secs:.0f} s")
    assert passed


# 4 -------------------------------------------------------------------------

TWO_STAGE = dict(base_channels=16, channel_multipliers=(1, 2, 4), embed_dim=64, temporal_attention_heads=2,
                 attention_levels=2, num_steps=50, stage2_epochs=60, sample_batch_size=10)


def test_criterion_4_two_stage_vs_skip(acceptance_report):
    t0 = time.perf_counter()
    train, test = build_dataset(DatasetSpec(train_storms=4, test_storms=8, image_size=32))
    truth = np.stack([s.target.frames for s in test])
    masks = [s.mask for s in test]
    frame_fx = metrics.FrameFeatureExtractor(seed=0, feature_dim=32)
    clip_fx = metrics.ClipFeatureExtractor(seed=0, feature_dim=8)
    results = []
    for seed in range(5):
        row = {}
        for arm, s1 in (("two_stage", 20), ("skip", 0)):
            est = VideoDiffusionForecaster(**TWO_STAGE, stage1_epochs=s1, seed=seed).fit(train)
            _, rep = metrics.evaluate(est.predict(test, seed=seed), truth, masks, frame_fx, clip_fx)
            row[arm] = (rep.fid, rep.fvd)
        results.append(row)
    secs = time.perf_counter() - t0
    wins = sum(r["two_stage"][0] <= r["skip"][0] for r in results)
    fvd_two = np.mean([r["two_stage"][1] for r in results])
    fvd_skip = np.mean([r["skip"][1] for r in results])
    rel = abs(fvd_two - fvd_skip) / fvd_skip
    passed = wins >= 4 and rel < 0.25 and secs < 4 * 3600
    detail = "; ".join(f"s{i} FID {r['two_stage'][0]:.3g}/{r['skip'][0]:.3g} FVD {r['two_stage'][1]:.3g}/"
                       f"{r['skip'][1]:.3g}" for i, r in enumerate(results))
    acceptance_report(4, "two-stage vs skip-stage1", passed,
                      f"FID two-stage <= skip in {wins}/5, mean FVD differs {100 * rel:.1f}%, {secs:.0f} s [{detail}]")
    assert passed


# 5 -------------------------------------------------------------------------

def test_criterion_5_fvd_penalises_shuffling(acceptance_report):
    t0 = time.perf_counter()
    pool, _ = build_dataset(DatasetSpec(train_storms=20, test_storms=1, corruption_prob=0.0))
    clips = np.stack([s.target.frames for s in pool])
    frame_fx = metrics.FrameFeatureExtractor(seed=0, feature_dim=32).fit()
    clip_fx = metrics.ClipFeatureExtractor(seed=0, feature_dim=16).fit()
    wins, fid_same = 0, 0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        idx = rng.permutation(len(clips))
        A, B = clips[idx[:40]], clips[idx[40:80]]
        shuffled = np.stack([c[rng.permutation(len(c))] for c in B])
        plain = metrics.fvd(B, A, clip_fx)
        mixed = metrics.fvd(shuffled, A, clip_fx)
        wins += mixed > plain
        f_plain = metrics.fid(B.reshape(-1, *B.shape[2:]), A.reshape(-1, *A.shape[2:]), frame_fx)
        f_mixed = metrics.fid(shuffled.reshape(-1, *B.shape[2:]), A.reshape(-1, *A.shape[2:]), frame_fx)
        fid_same += abs(f_mixed - f_plain) <= 1e-9 * max(1.0, abs(f_plain))
    secs = time.perf_counter() - t0
    passed = wins >= 19 and fid_same == 20 and secs < 600
    acceptance_report(5, "FVD detects temporal shuffling", passed,
                      f"shuffled worse in {wins}/20, FID unchanged in {fid_same}/20, {secs:.0f} s")
    assert passed


# 6 -------------------------------------------------------------------------

ROLL_CFG = DenoiserConfig(base_channels=4, channel_multipliers=(1, 2), embed_dim=16, temporal_attention_heads=1,
                          image_size=32, attention_levels=1)
LEVELS = (0.005, 0.02, 0.08)


def _degraded_horizon(model, storm, level, seed):
    """Horizon of an oracle forecast whose chunk ``k`` carries noise of
    standard deviation ``level * k**2``."""
    H = 50
    mask = np.logical_and.reduce(storm.masks[:H + 1])
    truth = np.where(mask, storm.frames[1:H + 1], 0)
    bundle = ConditioningBundle(storm.frames[0], storm.era5[:3], mask)
    rng = np.random.default_rng(seed)

    def corruption(k, frames):
        ref = truth[10 * k:10 * k + len(frames)]
        return ref + level * k ** 2 * rng.standard_normal(ref.shape)

    trace = cascade_forecast(model, make_schedule("cosine", 3), GuidanceConfig(), bundle, storm.era5, H,
                             seed=seed, truth=truth, corruption=corruption)
    return trace.reliable_horizon_hours


def test_criterion_6_rollout_contract(acceptance_report, tmp_path):
    t0 = time.perf_counter()
    ok, n, _ = _pytest("tests/test_rollout.py")
    build_dataset(DatasetSpec(train_storms=2, test_storms=10, image_size=32), root=tmp_path)
    manifest = load_manifest(tmp_path)
    model = build_denoiser(ROLL_CFG, seed=0)
    monotone = 0
    for seed in range(10):
        storm = manifest.storm("test", seed)
        hs = [_degraded_horizon(model, storm, lv, seed) for lv in LEVELS]
        monotone += all(a > b for a, b in zip(hs, hs[1:]))
    secs = time.perf_counter() - t0
    passed = ok and n > 0 and monotone >= 9 and secs < 1200
    acceptance_report(6, "rollout contract", passed,
                      f"{n} chaining/trace/horizon tests; monotone degradation {monotone}/10; {secs:.0f} s")
    assert passed


def test_reliable_horizon_exact_on_piecewise_curves():
    assert reliable_horizon(np.concatenate([np.full(36, 0.8), 0.8 - 0.05 * np.arange(1, 15)])) == 36
    assert reliable_horizon(np.full(50, 0.7)) == 50


# 7 -------------------------------------------------------------------------

CLI_INI = """
[run]
output_dir = {out}
[data]
root = {root}
train_storms = 2
test_storms = 2
steps_per_storm = 21
image_size = 32
era5_channels = 2
[model]
base_channels = 4
channel_multipliers = 1,2
embed_dim = 16
temporal_attention_heads = 1
attention_levels = 1
[diffusion]
num_steps = 4
[train]
stage1_epochs = 1
stage2_epochs = 1
[eval]
frame_feature_dim = 4
clip_feature_dim = 2
[rollout]
horizon = 20
storms = 2
"""


def _cli_run(tmp_path, tag):
    cfg = tmp_path / f"{tag}.ini"
    cfg.write_text(CLI_INI.format(out=tmp_path / f"run_{tag}", root=tmp_path / f"data_{tag}"))
    codes = []
    for cmd in (["gen-data", "--seed", "5"], ["train", "--seed", "3"], ["sample", "--seed", "3"],
                ["eval", "--seed", "3"], ["rollout", "--seed", "3"], ["report"]):
        res = subprocess.run([sys.executable, "-m", "vdmcast.cli", *cmd, "--config", str(cfg)],
                             capture_output=True, text=True)
        codes.append(res.returncode)
    return codes, tmp_path / f"run_{tag}", tmp_path / f"data_{tag}"


def test_criterion_7_cli_determinism(acceptance_report, tmp_path):
    ca, ra, da = _cli_run(tmp_path, "a")
    cb, rb, db = _cli_run(tmp_path, "b")
    same, total = 0, 0
    for a, b in ((ra, rb), (da, db)):
        names = sorted(p.relative_to(a) for p in a.rglob("*.csv"))
        assert names == sorted(p.relative_to(b) for p in b.rglob("*.csv"))
        for name in names:
            total += 1
            same += (a / name).read_bytes() == (b / name).read_bytes()
    expected = {"loss_stage1.csv", "loss_stage2.csv", "samples.csv", "eval.csv", "summary.csv", "storms.csv"}
    present = {p.name for p in ra.rglob("*.csv")} | {p.name for p in da.rglob("*.csv")}
    passed = ca == cb == [0] * 6 and same == total and expected <= present
    acceptance_report(7, "CLI determinism", passed, f"{same}/{total} CSVs byte-identical, exit codes {ca}")
    assert passed


# 8 -------------------------------------------------------------------------

def test_criterion_8_masking_contract(acceptance_report):
    train, test = build_dataset(DatasetSpec(train_storms=2, test_storms=2, image_size=32, corruption_prob=0.3))
    train = [s for s in train if not s.mask.all()][:3] + [s for s in train if s.mask.all()][:1]
    test = [s for s in test if not s.mask.all()][:3]
    assert len(train) == 4 and len(test) == 3
    sched = make_schedule("cosine", 5)
    s1, s2 = StageConfig("single_frame", 1, seed=1), StageConfig("multi_frame", 2, seed=2)

    m_a = build_denoiser(ROLL_CFG, seed=0)
    _, ra = two_stage_train(m_a, train, sched, s1, s2)
    m_b = build_denoiser(ROLL_CFG, seed=0)
    _, rb = two_stage_train(m_b, _perturb_invalid(train), sched, s1, s2)
    losses_same = all(x.epoch_losses == y.epoch_losses for x, y in zip(ra, rb))
    weights_same = all(torch.equal(x, y) for x, y in zip(m_a.state_dict().values(), m_b.state_dict().values()))

    pert = _perturb_invalid(test, seed=1)
    g_a = sample(m_a, [s.bundle() for s in test], sched, GuidanceConfig(), seed=0).numpy()
    g_b = sample(m_a, [s.bundle() for s in pert], sched, GuidanceConfig(), seed=0).numpy()
    masks = [s.mask for s in test]
    gen_same = all(np.array_equal(a[:, m], b[:, m]) for a, b, m in zip(g_a, g_b, masks))

    truth = np.stack([s.target.frames for s in test])
    truth_bad = np.stack([s.target.frames for s in pert])
    pred_bad = g_a.copy()
    for p, m in zip(pred_bad, masks):
        p[:, ~m] = 7.0
    fx, cx = metrics.FrameFeatureExtractor(feature_dim=4), metrics.ClipFeatureExtractor(feature_dim=2)
    rows_a, rep_a = metrics.evaluate(g_a, truth, masks, fx, cx)
    rows_b, rep_b = metrics.evaluate(pred_bad, truth_bad, masks, fx, cx)
    metrics_same = rows_a == rows_b and rep_a == rep_b

    checks = {"losses": losses_same, "weights": weights_same, "generated": gen_same, "metrics": metrics_same}
    passed = all(checks.values())
    acceptance_report(8, "masking contract", passed, ", ".join(f"{k} {'same' if v else 'CHANGED'}"
                                                               for k, v in checks.items()))
    assert passed
