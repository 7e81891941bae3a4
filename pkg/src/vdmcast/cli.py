"""Command-line entry point: ``vdmcast <subcommand> [--config FILE] [--seed N]``.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
Every subcommand writes a resolved copy of its configuration next to its
outputs, and all files are written via temp-file-then-rename.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import __version__, metrics
from .checkpoint import atomic_write_bytes
from .config import ConfigError, RunConfig
from .data import build_dataset, load_dataset, load_manifest, load_sample, save_sample
from .denoiser import ConditioningBundle, build_denoiser, parameter_checksum
from .estimator import VideoDiffusionForecaster
from .rollout import cascade_forecast
from .trainer import two_stage_train

logger = logging.getLogger("vdmcast")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}")


def _write_text(path: Path, text: str) -> None:
    atomic_write_bytes(path, text.encode())


def _write_config(cfg: RunConfig, directory: Path) -> None:
    _write_text(directory / "config.ini", cfg.to_ini())


def _csv(rows, header) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def select(items, n: int):
    """Up to ``n`` items spread evenly over the list (all when ``n <= 0``)."""
    if n <= 0 or n >= len(items):
        return list(items)
    idx = np.unique(np.round(np.linspace(0, len(items) - 1, n)).astype(int))
    return [items[i] for i in idx]


def _require_dataset(cfg: RunConfig):
    root = cfg.data_root
    if not (root / "manifest.txt").is_file():
        raise FileNotFoundError(f"no dataset at {root}; run `vdmcast gen-data` first")
    return load_dataset(root)


def _clip_names(manifest, split: str) -> list[str]:
    return [name for s, name, _, _ in manifest.clips if s == split]


def _checkpoint_path(cfg: RunConfig, arg) -> Path:
    path = Path(arg) if arg else cfg.output_dir / "stage2.ckpt"
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}; run `vdmcast train` first")
    return path


def _estimator(cfg: RunConfig, ckpt: Path) -> VideoDiffusionForecaster:
    d = cfg["diffusion"]
    return VideoDiffusionForecaster.from_checkpoint(
        ckpt, schedule=d["schedule"], num_steps=d["num_steps"], guidance_scale=d["guidance_scale"],
        dynamic_threshold_percentile=d["dynamic_threshold_percentile"],
        sample_batch_size=int(cfg["eval"]["batch_size"]), seed=cfg.seed,
    )


# subcommands


def cmd_gen_data(cfg: RunConfig, args) -> int:
    if args.seed is not None:
        cfg.set("data", "base_seed", args.seed)
        cfg.validate()
    root = cfg.data_root
    spec = cfg.dataset_spec()
    if (root / "manifest.txt").is_file():
        existing = load_manifest(root).spec
        same = all(getattr(existing, k) == getattr(spec, k)
                   for k in spec.__dataclass_fields__ if k not in ("train_seeds", "test_seeds"))
        if not same:
            raise RuntimeError(f"{root} holds a dataset built with different settings; remove it or change [data] root")
        print(f"dataset exists at {root}; nothing to do")
        return EXIT_OK
    train, test = build_dataset(spec, root)
    manifest = load_manifest(root)
    _write_text(root / "storms.csv", _csv(manifest.storms, ["split", "index", "seed", "n_clips"]))
    _write_config(cfg, root)
    n_train = sum(1 for s in manifest.storms if s[0] == "train")
    print(f"wrote {len(train)} train / {len(test)} test clips from {n_train} / "
          f"{len(manifest.storms) - n_train} storms to {root}")
    return EXIT_OK


def cmd_train(cfg: RunConfig, args) -> int:
    if args.seed is not None:
        cfg.set("run", "seed", args.seed)
    if args.preset is not None:
        cfg.set("train", "preset", args.preset)
    s1, s2 = cfg.stage_configs(preset=args.preset, skip_stage1=args.skip_stage1)
    train, _, _ = _require_dataset(cfg)
    train = select(train, int(cfg["train"]["max_clips"]))
    out = cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    model = build_denoiser(cfg.denoiser_config(), seed=cfg.seed)
    logger.info("training %d clips, %d parameters, epochs %d + %d", len(train), model.num_parameters(),
                s1.epochs, s2.epochs)
    _, (r1, r2) = two_stage_train(model, train, cfg.schedule(), s1, s2, out_dir=out)
    for name, rep in (("stage1", r1), ("stage2", r2)):
        _write_text(out / f"loss_{name}.csv", rep.to_csv(include_timing=args.timing))
    timing = {"stage1_seconds": r1.epoch_seconds, "stage2_seconds": r2.epoch_seconds}
    _write_text(out / "timing.json", json.dumps(timing, indent=1) + "\n")
    _write_config(cfg, out)
    print(f"stage2 final loss {r2.epoch_losses[-1]:.5f}; checksum {parameter_checksum(model)[:16]}; "
          f"checkpoints in {out}")
    return EXIT_OK


def cmd_sample(cfg: RunConfig, args) -> int:
    if args.seed is not None:
        cfg.set("run", "seed", args.seed)
    ckpt = _checkpoint_path(cfg, args.checkpoint)
    train, test, manifest = _require_dataset(cfg)
    split = args.split
    pairs = select(list(zip(_clip_names(manifest, split), train if split == "train" else test)),
                   int(cfg["eval"]["max_clips"]))
    est = _estimator(cfg, ckpt)
    pred = est.predict([s for _, s in pairs])
    out = Path(args.out) if args.out else cfg.output_dir / "samples"
    rows = []
    for (name, smp), frames in zip(pairs, pred):
        gen = type(smp)(smp.context, type(smp.target)(frames, smp.mask, smp.target.timestamps), smp.era5,
                        storm=smp.storm, seed=smp.seed, start=smp.start, split=smp.split)
        fname = Path(name).name
        save_sample(out / fname, gen)
        rows.append([f"{split}/{fname}", smp.storm, smp.start, repr(float(frames.mean()))])
    _write_text(out / "samples.csv", _csv(rows, ["clip", "storm", "start", "mean_value"]))
    _write_config(cfg, out)
    print(f"wrote {len(rows)} generated clips to {out}")
    return EXIT_OK


def cmd_eval(cfg: RunConfig, args) -> int:
    if args.seed is not None:
        cfg.set("eval", "extractor_seed", args.seed)
    samples = Path(args.samples) if args.samples else cfg.output_dir / "samples"
    files = sorted(p for p in samples.glob("clip_*.bin")) if samples.is_dir() else []
    if not files:
        raise FileNotFoundError(f"no generated clips under {samples}; run `vdmcast sample` first")
    root = cfg.data_root
    if not (root / "manifest.txt").is_file():
        raise FileNotFoundError(f"no dataset at {root}; run `vdmcast gen-data` first")
    split = args.split
    preds, truths, masks, names = [], [], [], []
    for f in files:
        truth_file = root / split / f.name
        if not truth_file.is_file():
            raise FileNotFoundError(f"no ground truth for {f.name} in {root / split}")
        p, t = load_sample(f), load_sample(truth_file)
        preds.append(p.target.frames)
        truths.append(t.target.frames)
        masks.append(t.mask)
        names.append(f"{split}/{f.name}")
    e = cfg["eval"]
    fx = metrics.FrameFeatureExtractor(seed=int(e["extractor_seed"]), feature_dim=int(e["frame_feature_dim"]))
    cx = metrics.ClipFeatureExtractor(seed=int(e["extractor_seed"]), feature_dim=int(e["clip_feature_dim"]))
    rows, report = metrics.evaluate(preds, truths, masks, fx, cx)
    text = metrics.eval_csv(rows, report, int(e["extractor_seed"]), fx.feature_dim, cx.feature_dim, names)
    out = Path(args.out) if args.out else cfg.output_dir / "eval.csv"
    _write_text(out, text)
    _write_config(cfg, out.parent)
    print(f"mae {report.mae:.4f} psnr {report.psnr:.2f} ssim {report.ssim:.4f} "
          f"fid {report.fid:.4f} fvd {report.fvd:.4f} over {report.n_clips} clips -> {out}")
    return EXIT_OK


def rollout_storm(est: VideoDiffusionForecaster, storm, horizon: int, seed: int, mode: str,
                  drop_window: int, drop_threshold: float):
    """Forecast one regenerated storm from its first frame and analyse it."""
    if horizon > len(storm.frames) - 1:
        raise ValueError(f"horizon {horizon} h exceeds the storm length ({len(storm.frames) - 1} h after the start)")
    K = est.model_.config.cond_timesteps
    mask = np.logical_and.reduce(storm.masks[: horizon + 1])
    bundle = ConditioningBundle(storm.frames[0], storm.era5[:K], mask)
    truth = np.where(mask, storm.frames[1:horizon + 1], 0)
    trace = cascade_forecast(est.model_, est.schedule_, est.guidance(), bundle, storm.era5, horizon,
                             seed, mode=mode)
    return trace.analyze(truth, mask, drop_window, drop_threshold)


def cmd_rollout(cfg: RunConfig, args) -> int:
    if args.seed is not None:
        cfg.set("run", "seed", args.seed)
    r = cfg["rollout"]
    for key in ("horizon", "storms", "mode", "drop_window", "drop_threshold"):
        val = getattr(args, key)
        if val is not None:
            cfg.set("rollout", key, val)
    cfg.validate()
    ckpt = _checkpoint_path(cfg, args.checkpoint)
    root = cfg.data_root
    if not (root / "manifest.txt").is_file():
        raise FileNotFoundError(f"no dataset at {root}; run `vdmcast gen-data` first")
    manifest = load_manifest(root)
    est = _estimator(cfg, ckpt)
    out = cfg.output_dir / "rollout"
    n = min(int(r["storms"]), sum(1 for s in manifest.storms if s[0] == "test"))
    seeds = np.random.SeedSequence(cfg.seed).generate_state(max(n, 1))
    summary = []
    for i in range(n):
        trace = rollout_storm(est, manifest.storm("test", i), int(r["horizon"]), int(seeds[i]), str(r["mode"]),
                              int(r["drop_window"]), float(r["drop_threshold"]))
        _write_text(out / f"storm_{i:02d}.csv", trace.to_csv())
        _write_text(out / f"storm_{i:02d}_plot.csv", trace.plot_data_csv())
        summary.append([i, int(trace.hours[trace.min_ssim_hour]), repr(trace.min_ssim_value),
                        trace.reliable_horizon_hours, repr(float(np.mean(trace.ssim_curve)))])
        logger.info("storm %d: min ssim %.3f at hour %d, reliable horizon %d h", i, trace.min_ssim_value,
                    summary[-1][1], trace.reliable_horizon_hours)
    _write_text(out / "summary.csv", _csv(summary, ["storm", "min_ssim_hour", "min_ssim", "reliable_horizon_hours",
                                                     "mean_ssim"]))
    _write_config(cfg, out)
    print(f"wrote {n} rollout traces of {r['horizon']} h ({r['mode']} mode) to {out}")
    return EXIT_OK


def _read_plot_csv(path: Path) -> dict[str, list[tuple[float, float]]]:
    series: dict[str, list[tuple[float, float]]] = {}
    with path.open() as fh:
        for row in csv.DictReader(fh):
            series.setdefault(row["series"], []).append((float(row["x"]), float(row["y"])))
    return series


def cmd_report(cfg: RunConfig, args) -> int:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    src = cfg.output_dir
    plots = sorted((src / "rollout").glob("storm_*_plot.csv"))
    eval_path = src / "eval.csv"
    if not plots and not eval_path.is_file():
        raise FileNotFoundError(f"nothing to report under {src}; run `vdmcast eval` and/or `vdmcast rollout`")
    out = Path(args.out) if args.out else src / "report"
    out.mkdir(parents=True, exist_ok=True)
    charts = 0
    for p in plots:
        s = _read_plot_csv(p)
        fig, ax = plt.subplots(figsize=(6, 3.5))
        x, y = zip(*s["ssim"])
        ax.plot(x, y, color="tab:blue", lw=1.5, label="SSIM")
        (mx, lo), (_, hi) = s["min_marker"]
        ax.plot([mx, mx], [lo, hi], ls="--", color="tab:red", lw=1, label=f"min at {int(mx)} h")
        ax.plot(*zip(*s["min_point"]), "o", color="tab:red")
        (hx, _), _ = s["reliable_horizon"]
        ax.axvline(hx, ls=":", color="grey", lw=1, label=f"reliable horizon {int(hx)} h")
        ax.set_xlabel("lead time (h)")
        ax.set_ylabel("SSIM")
        ax.set_ylim(min(0.0, lo), 1.0)
        ax.legend(loc="lower left", fontsize=8)
        ax.set_title(p.stem.replace("_plot", ""))
        fig.tight_layout()
        name = p.stem.replace("_plot", "")
        buf = io.BytesIO()
        fig.savefig(buf, format="png", dpi=100, metadata={"Software": None})
        plt.close(fig)
        atomic_write_bytes(out / f"ssim_{name}.png", buf.getvalue())
        charts += 1

    rows = []
    if eval_path.is_file():
        lines = [ln for ln in eval_path.read_text().splitlines() if not ln.startswith("#")]
        mean = next(r for r in csv.DictReader(lines) if r["clip"] == "mean")
        rows += [[k, mean[k]] for k in ("mae", "psnr", "ssim", "fid", "fvd")]
    summary = src / "rollout" / "summary.csv"
    if summary.is_file():
        with summary.open() as fh:
            roll = list(csv.DictReader(fh))
        rows.append(["mean_reliable_horizon_hours", repr(float(np.mean([float(r["reliable_horizon_hours"]) for r in roll])))])
        rows.append(["mean_min_ssim", repr(float(np.mean([float(r["min_ssim"]) for r in roll])))])
    _write_text(out / "summary.csv", _csv(rows, ["metric", "value"]))
    if rows:
        fig, ax = plt.subplots(figsize=(5, 0.4 * len(rows) + 0.6))
        ax.axis("off")
        ax.table(cellText=[[k, f"{float(v):.4g}"] for k, v in rows], colLabels=["metric", "value"], loc="center")
        buf = io.BytesIO()
        fig.savefig(buf, format="png", dpi=100, metadata={"Software": None})
        plt.close(fig)
        atomic_write_bytes(out / "summary.png", buf.getvalue())
    _write_config(cfg, out)
    print(f"wrote {charts} charts and a summary table to {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="INI run configuration (defaults apply to anything omitted)")
    common.add_argument("--seed", type=int, help="seed fixing all stochasticity of the subcommand")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    p = _Parser(prog="vdmcast", description="Conditional video-diffusion forecasting on synthetic storms.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", parents=[common], help="generate the synthetic dataset")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", parents=[common], help="two-stage training")
    t.add_argument("--preset", choices=("full", "lowdata"), help="epoch split (full 20/60, lowdata 40/40)")
    t.add_argument("--skip-stage1", action="store_true", help="multi-frame stage only (no curriculum)")
    t.add_argument("--timing", action="store_true", help="add a wall-clock seconds column to the loss CSVs")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sample", parents=[common], help="generate forecasts for dataset clips")
    s.add_argument("--checkpoint", help="model checkpoint (default: <output_dir>/stage2.ckpt)")
    s.add_argument("--split", choices=("test", "train"), default="test")
    s.add_argument("--out", help="directory for generated clips (default: <output_dir>/samples)")
    s.set_defaults(func=cmd_sample)

    e = sub.add_parser("eval", parents=[common], help="score generated clips against ground truth")
    e.add_argument("--samples", help="directory of generated clips (default: <output_dir>/samples)")
    e.add_argument("--split", choices=("test", "train"), default="test")
    e.add_argument("--out", help="output CSV (default: <output_dir>/eval.csv)")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("rollout", parents=[common], help="cascaded long-horizon forecasts of test storms")
    r.add_argument("--checkpoint", help="model checkpoint (default: <output_dir>/stage2.ckpt)")
    r.add_argument("--horizon", type=int, help="forecast length in hours")
    r.add_argument("--storms", type=int, help="number of test storms to roll out")
    r.add_argument("--mode", choices=("video", "frame"), help="10-frame chunks or frame-by-frame baseline")
    r.add_argument("--drop-window", dest="drop_window", type=int, help="slope window of the horizon rule (h)")
    r.add_argument("--drop-threshold", dest="drop_threshold", type=float,
                   help="SSIM decline per hour that counts as sharp")
    r.set_defaults(func=cmd_rollout)

    rep = sub.add_parser("report", parents=[common], help="SSIM charts and a metric summary table")
    rep.add_argument("--out", help="report directory (default: <output_dir>/report)")
    rep.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(parser.format_usage().rstrip(), file=sys.stderr)
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(1)
    try:
        cfg = RunConfig.load(args.config)
        return args.func(cfg, args)
    except ConfigError as exc:
        print(f"vdmcast: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ValueError, RuntimeError, FloatingPointError, KeyError) as exc:
        print(f"vdmcast {args.command}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
