"""Command-line driver: ``idr train|eval|refine|noise-sim|pilot``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, ExperimentConfig, load_config
from .dataset import (
    CleanImages,
    DataError,
    NoisyImages,
    TargetStore,
    TestPairs,
    corrupt,
    load_dir,
    load_image,
    load_test_pairs,
    refine_targets,
    save_image,
    split_train_test,
    synthetic_corpus,
)
from .model import load_checkpoint
from .noise import RngStream, load_spec
from .tensor import CheckpointError, NumericError, ShapeError

EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

log = logging.getLogger("idr")


def _load_config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg.run.seed = args.seed
    if args.workers is not None:
        if args.workers < 1:
            raise ConfigError("--workers must be >= 1")
        cfg.run.workers = args.workers
    return cfg


def _training_data(cfg: ExperimentConfig) -> tuple[NoisyImages, TestPairs | None]:
    if cfg.data.synthetic:
        clean = synthetic_corpus(cfg.data.synthetic_count, cfg.data.synthetic_size, cfg.data.data_seed)
        train, test = split_train_test(clean, cfg.data.train_fraction, cfg.data.data_seed)
        stream = RngStream(cfg.data.data_seed).child("data")
        noisy = corrupt(train, cfg.noise, stream.child("train"))
        return noisy, TestPairs(corrupt(test, cfg.noise, stream.child("test")), test)
    if not cfg.data.train_dir:
        raise DataError("no training data: set [data] train_dir or synthetic = true")
    noisy = load_dir(cfg.resolve(cfg.data.train_dir), NoisyImages)
    pairs = load_test_pairs(cfg.resolve(cfg.data.test_dir)) if cfg.data.test_dir else None
    return noisy, pairs


def _clean_oracle(cfg: ExperimentConfig) -> CleanImages:
    if cfg.data.synthetic or not cfg.data.clean_dir:
        return synthetic_corpus(cfg.data.synthetic_count, cfg.data.synthetic_size, cfg.data.data_seed)
    return load_dir(cfg.resolve(cfg.data.clean_dir), CleanImages)


def _schedule_text(cfg: ExperimentConfig) -> str:
    icfg = cfg.idr_config()
    total = icfg.total_iterations()
    per_run = (icfg.epochs_per_round if icfg.mode == "full" else icfg.epochs) * icfg.iters_per_epoch
    lines = [f"mode: {icfg.mode}"]
    if icfg.mode == "full":
        lines.append(f"rounds: {icfg.rounds + 1} models x {icfg.epochs_per_round} epochs")
    else:
        lines.append(f"epochs: {icfg.epochs}" + (" (refined between epochs)" if icfg.mode == "fast" and icfg.refine else ""))
    lines.append(f"iterations: {total} ({icfg.iters_per_epoch} per epoch, batch {icfg.batch_size}, patch {icfg.patch_size})")
    drops = ", ".join(str(m) for m in icfg.schedule_iters(per_run))
    lines.append(f"lr: {icfg.lr:g}, x{icfg.lr_factor:g} at iterations {drops}" + (" of each round" if icfg.mode == "full" else ""))
    return "\n".join(lines)


def cmd_train(args) -> int:
    from .report import plot_training
    from .scheduler import RunRecord, train_full_idr, train_fast_idr, train_baseline, write_run_outputs

    cfg = _load_config(args)
    out = Path(args.out or cfg.run.out_dir)
    if args.dry_run:
        print(cfg.to_ini())
        print(_schedule_text(cfg))
        return 0
    noisy, pairs = _training_data(cfg)
    icfg = cfg.idr_config()
    mcfg = cfg.model_config(noisy.channels)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.ini").write_text(cfg.to_ini())
    record = RunRecord()
    kwargs = dict(model_config=mcfg, eval_pairs=pairs, record=record, run_dir=out, log_every=cfg.run.log_every)
    if icfg.mode == "full":
        train_full_idr(noisy, cfg.noise, icfg, **kwargs)
    elif icfg.mode == "fast":
        train_fast_idr(noisy, cfg.noise, icfg, **kwargs)
    else:
        train_baseline(noisy, cfg.noise, icfg, **kwargs)
    effective = {"ini": cfg.to_ini(), "noise": cfg.noise.to_dict(), "model": json.loads(mcfg.to_json())}
    write_run_outputs(out, record, effective, cfg.run.record_time_in_csv)
    plot_training(record, out / "training.png")
    print(f"run written to {out}")
    if record.evals:
        print(f"final test PSNR {record.evals[-1]['psnr']:.3f} dB, SSIM {record.evals[-1]['ssim']:.4f}")
    return 0


def cmd_eval(args) -> int:
    from .scheduler import evaluate

    model = load_checkpoint(args.checkpoint)
    pairs = load_test_pairs(args.test_dir)
    report = evaluate(model, pairs, workers=args.workers or 1)
    text = report.to_csv(per_image=args.per_image)
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    return 0


def cmd_refine(args) -> int:
    model = load_checkpoint(args.checkpoint)
    noisy = load_dir(args.noisy_dir, NoisyImages)
    store = TargetStore.load(args.targets) if args.targets else TargetStore.initial(noisy)
    if store.names != noisy.names:
        raise DataError("target store and noisy directory list different images")
    if args.dry_run:
        print(f"would refine {len(noisy)} images from round {store.round} to {store.round + 1}")
        return 0
    new = refine_targets(model, noisy, store)
    new.save(args.out)
    print(f"round {new.round} targets written to {args.out}")
    return 0


def cmd_noise_sim(args) -> int:
    try:
        spec = load_spec(args.spec)
    except (ValueError, OSError) as exc:
        raise ConfigError(f"{args.spec}: {exc}") from None
    img = load_image(args.input)
    rng = RngStream(args.seed or 0).child("noise")
    level = spec.sample_level(rng) if args.level is None else args.level
    noisy = spec.apply(img, level, rng)
    residual = noisy.astype(np.float64) - img
    stats = {
        "variant": spec.variant,
        "level": level,
        "count": int(residual.size),
        "mean": float(residual.mean()),
        "variance": float(residual.var()),
        "changed_fraction": float(np.mean(residual != 0)),
    }
    if args.dry_run:
        print(json.dumps(stats, indent=2))
        return 0
    save_image(noisy, args.out, bit_depth=args.bit_depth)
    stats_path = Path(args.stats) if args.stats else Path(args.out).with_suffix(".json")
    stats_path.write_text(json.dumps(stats, indent=2) + "\n")
    print(f"noisy image written to {args.out}, statistics to {stats_path}")
    return 0


def cmd_pilot(args) -> int:
    from .pilot import CellRunner, long_format_csv, run_finding1, run_finding2
    from .report import plot_finding1, plot_finding2

    cfg = _load_config(args)
    pcfg = cfg.pilot_config()
    if args.dry_run:
        print(cfg.to_ini())
        n_models = len(pcfg.seeds) * (2 if args.study == "finding1" else len(set(cfg.pilot.sigmas) | {0.0}))
        print(f"study {args.study}: {n_models} models x {pcfg.train.epochs * pcfg.train.iters_per_epoch} iterations")
        return 0
    out = Path(args.out or cfg.run.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.ini").write_text(cfg.to_ini())
    clean = _clean_oracle(cfg)
    runner = CellRunner(pcfg.workers)
    if args.study == "finding1":
        rep = run_finding1(clean, cfg.noise, pcfg, runner=runner)
        plot = plot_finding1
    else:
        rep = run_finding2(clean, cfg.noise, cfg.pilot.bias_type, cfg.pilot.sigmas, pcfg, runner=runner)
        plot = plot_finding2
    name = f"pilot_{args.study}"
    (out / f"{name}.csv").write_text(rep.to_csv())
    (out / f"{name}_long.csv").write_text(long_format_csv(rep.rows()))
    plot(rep, out / f"{name}.png")
    sys.stdout.write(rep.to_csv())
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="idr", description="Iterative data refinement for self-supervised denoising.")
    parser.add_argument("--seed", type=int, default=None, help="override the top-level seed")
    parser.add_argument("--workers", type=int, default=None, help="worker count (default 1)")
    parser.add_argument("--dry-run", action="store_true", help="validate inputs and print the plan only")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a baseline, full-IDR or fast-IDR model")
    p.add_argument("--config", required=True)
    p.add_argument("--out", help="run directory (default: [run] out_dir)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="PSNR/SSIM of a checkpoint on <dir>/noisy vs <dir>/clean")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--test-dir", required=True)
    p.add_argument("--per-image", action="store_true")
    p.add_argument("--out", help="also write the CSV here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("refine", help="denoise the original noisy images into new targets")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--noisy-dir", required=True)
    p.add_argument("--targets", help="current target store (default: the noisy images)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_refine)

    p = sub.add_parser("noise-sim", help="corrupt one image and report residual statistics")
    p.add_argument("--spec", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--stats", help="statistics JSON (default: next to --out)")
    p.add_argument("--level", type=float, help="fixed noise level instead of a sampled one")
    p.add_argument("--bit-depth", type=int, choices=(8, 16), default=8)
    p.set_defaults(func=cmd_noise_sim)

    p = sub.add_parser("pilot", help="run a desk-scale pilot study")
    p.add_argument("study", choices=("finding1", "finding2"))
    p.add_argument("--config")
    p.add_argument("--out", help="output directory (default: [run] out_dir)")
    p.set_defaults(func=cmd_pilot)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if not hasattr(args, "config"):
        args.config = None
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, CheckpointError, ShapeError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
