import logging

import numpy as np
import pytest
from scipy.stats import spearmanr

from vdmcast.data import (
    DatasetSpec,
    FrameGrid,
    NormStats,
    SynthStormParams,
    VideoClip,
    assemble_clips,
    build_dataset,
    decode_sample,
    denormalize,
    encode_sample,
    generate_storm,
    load_dataset,
    load_manifest,
    normalize,
    sanitize,
)


def _grids(n, size=8, seed=0):
    rng = np.random.default_rng(seed)
    return [FrameGrid(rng.uniform(-1, 1, (size, size)), np.ones((size, size), bool)) for _ in range(n)]


def test_generate_storm_frozen_dynamics():
    p = SynthStormParams(seed=3, drift=(0, 0), walk_scale=0, swirl_strength=0, noise_level=0,
                         intensity_curve=np.full(12, 0.6))
    frames, era5 = generate_storm(p, 12)
    for f in frames[1:]:
        np.testing.assert_array_equal(f.values, frames[0].values)
    assert np.all(era5 == era5[0])


def test_generate_storm_deterministic():
    p = SynthStormParams.from_seed(11, corruption_prob=0.3)
    a, ea = generate_storm(p, 20)
    b, eb = generate_storm(p, 20)
    assert all(np.array_equal(x.values, y.values) and np.array_equal(x.mask, y.mask) for x, y in zip(a, b))
    assert np.array_equal(ea, eb)
    assert any(not f.mask.all() for f in a)


def test_pressure_field_tracks_drift():
    drift = (0.4, -0.3)
    p = SynthStormParams(seed=5, drift=drift, walk_scale=0.0, start=(20.0, 40.0))
    _, era5, track = generate_storm(p, 30, return_track=True)
    analytic = np.array([20.0, 40.0]) + np.outer(np.arange(30), drift)
    np.testing.assert_allclose(track, analytic, atol=1e-9)
    for k in range(30):
        y, x = np.unravel_index(np.argmax(era5[k, 2]), era5[k, 2].shape)
        assert abs(x - analytic[k, 0]) <= 1 and abs(y - analytic[k, 1]) <= 1
    peaks = np.array([np.unravel_index(np.argmax(e[2]), e[2].shape)[::-1] for e in era5])
    steps = np.diff(peaks, axis=0)
    assert np.all(np.abs(steps - np.array(drift)) <= 1.0 + 1e-9)


def test_intensity_curve_drives_disk_brightness():
    n = 50
    curve = 0.2 + 0.8 * np.abs(np.sin(np.linspace(0, 3, n)))
    p = SynthStormParams(seed=8, intensity_curve=curve, noise_level=0.05)
    frames, _, track = generate_storm(p, n, return_track=True)
    yy, xx = np.mgrid[0:64, 0:64]
    depth = []
    for f, (cx, cy) in zip(frames, track):
        disk = np.hypot(xx - cx, yy - cy) <= p.vortex_radius
        depth.append(300.0 - f.values[disk].mean())
    assert spearmanr(curve, depth).correlation > 0.95


def test_track_failure_raises():
    p = SynthStormParams(seed=0, drift=(3.0, 0.0), walk_scale=0.0)
    with pytest.raises(ValueError, match="left the domain"):
        generate_storm(p, 50)


def test_generate_storm_needs_ten_steps():
    with pytest.raises(ValueError):
        generate_storm(SynthStormParams(seed=0), 9)


def test_sanitize():
    raw = np.arange(64.0).reshape(8, 8)
    raw[3, 7] = np.nan
    g = sanitize(raw)
    assert g.values[3, 7] == 0 and not g.mask[3, 7]
    keep = np.ones((8, 8), bool)
    keep[3, 7] = False
    np.testing.assert_array_equal(g.values[keep], raw[keep])
    assert g.mask[keep].all()

    clean = sanitize(np.ones((4, 4)))
    assert clean.mask.all() and np.all(clean.values == 1)

    dead = sanitize(np.full((4, 4), np.nan))
    assert not dead.mask.any() and np.all(dead.values == 0)


def test_frame_grid_invariants():
    with pytest.raises(ValueError):
        FrameGrid(np.ones((2, 2)), np.zeros((2, 2), bool))
    with pytest.raises(ValueError):
        FrameGrid(np.full((2, 2), np.inf), np.ones((2, 2), bool))
    with pytest.raises(ValueError):
        VideoClip(np.zeros((3, 2, 2)), np.ones((2, 2), bool), [0, 2, 1])


def test_assemble_clips_counts_and_identity():
    seq = _grids(25)
    assert len(assemble_clips(seq, 10, 10)) == (25 - 10) // 10 + 1 == 2
    ten = _grids(10)
    (only,) = assemble_clips(ten, 10, 10)
    np.testing.assert_array_equal(only.frames, np.stack([g.values for g in ten]))
    np.testing.assert_array_equal(only.timestamps, np.arange(10))
    with pytest.raises(ValueError):
        assemble_clips(_grids(5), 10, 1)
    with pytest.raises(ValueError):
        assemble_clips(seq, 0, 1)


def test_assemble_clips_mask_and_semantics():
    seq = _grids(14)
    m = np.ones((8, 8), bool)
    m[2, 5] = False
    seq[3] = FrameGrid(np.where(m, seq[3].values, 0), m)
    clips = assemble_clips(seq, 4, 1)
    for s, c in enumerate(clips):
        if s <= 3 < s + 4:
            assert not c.mask[2, 5] and np.all(c.frames[:, 2, 5] == 0)
        else:
            assert c.mask.all()


@pytest.mark.parametrize("n,L", [(30, 10), (25, 7), (12, 3)])
def test_assemble_partition_reproduces_prefix(n, L):
    seq = _grids(n, seed=n)
    clips = assemble_clips(seq, L, L)
    joined = np.concatenate([c.frames for c in clips])
    usable = (n // L) * L
    np.testing.assert_array_equal(joined, np.stack([g.values for g in seq[:usable]]))


def test_normalize_endpoints_roundtrip_and_clipping(caplog):
    stats = NormStats(np.array(180.0), np.array(300.0))
    assert normalize(180.0, stats) == -1.0 and normalize(300.0, stats) == 1.0
    x = np.random.default_rng(0).uniform(180, 300, 1000)
    assert np.abs(denormalize(normalize(x, stats), stats) - x).max() < 1e-12
    with caplog.at_level(logging.WARNING, logger="vdmcast.data"):
        y = normalize(np.array([250.0, 320.0]), stats)
    assert y[1] == 1.0
    assert "clipped" in caplog.text
    with pytest.raises(ValueError):
        NormStats(np.array(1.0), np.array(1.0))


@pytest.fixture(scope="module")
def small_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("ds")
    spec = DatasetSpec(train_storms=6, test_storms=2, corruption_prob=0.1)
    train, test = build_dataset(spec, root)
    return spec, root, train, test


def test_dataset_layout_and_roundtrip(small_dataset):
    spec, root, train, test = small_dataset
    assert (root / "manifest.txt").exists()
    assert len(list((root / "train").glob("clip_*.bin"))) == len(train)
    tr2, te2, man = load_dataset(root)
    for a, b in zip(train + test, tr2 + te2):
        np.testing.assert_array_equal(a.context, b.context)
        np.testing.assert_array_equal(a.target.frames, b.target.frames)
        np.testing.assert_array_equal(a.era5, b.era5)
        np.testing.assert_array_equal(a.mask, b.mask)
    assert sum(1 for s in man.storms if s[0] == "train") == 6
    assert all(n >= 4 for *_, n in man.storms)
    for smp in tr2:
        assert encode_sample(decode_sample(encode_sample(smp))) == encode_sample(smp)


def test_persisted_frames_satisfy_invariants(small_dataset):
    _, _, train, test = small_dataset
    for smp in train + test:
        for arr in (smp.context[None], smp.target.frames, smp.era5.reshape(-1, *smp.mask.shape)):
            assert np.all(np.abs(arr) <= 1)
            assert np.all(arr[:, ~smp.mask] == 0)
    assert any(not s.mask.all() for s in train)


def test_dataset_byte_identical(tmp_path):
    spec = DatasetSpec(train_storms=3, test_storms=1)
    build_dataset(spec, tmp_path / "a")
    build_dataset(spec, tmp_path / "b")
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert files
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_seed_collision_rejected():
    with pytest.raises(ValueError, match="collision"):
        build_dataset(DatasetSpec(train_seeds=[1, 2, 3], test_seeds=[3]))


def test_default_split_clip_ratio():
    spec = DatasetSpec()
    train_seeds, test_seeds = spec.seeds()
    assert (len(train_seeds), len(test_seeds)) == (60, 18)
    n_clips = (spec.steps_per_storm - (spec.clip_len + 1)) // spec.stride + 1
    assert n_clips >= 4
    ratio = len(train_seeds) * n_clips / (len(test_seeds) * n_clips)
    assert 3.0 <= ratio <= 4.0


def test_manifest_regenerates_storms(small_dataset):
    spec, root, train, _ = small_dataset
    man = load_manifest(root)
    storm = man.storm("train", 0)
    first = [s for s in train if s.storm == 0]
    s0 = first[1]
    np.testing.assert_array_equal(storm.frames[s0.start + 1:s0.start + 11] * s0.mask, s0.target.frames)
