"""Training schedules: noisier-noisy baseline, full IDR rounds and fast IDR epochs."""

from __future__ import annotations

import csv
import io
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .dataset import (
    ImageSet,
    TargetStore,
    TestPairs,
    crop,
    denoise_full,
    make_noisier_noisy,
    refine_targets,
    require_training_set,
    sample_corners,
)
from .metrics import MetricReport, format_metric, psnr, ssim
from .model import DenoiserModel, ModelConfig, TrainingState, build_unet, save_checkpoint, train_step
from .noise import NoiseSpec, RngStream, _splitmix64
from .tensor import NumericError

log = logging.getLogger(__name__)

MODES = ("baseline", "full", "fast")


@dataclass
class IdrConfig:
    mode: str = "fast"
    epochs: int = 10
    rounds: int = 4
    epochs_per_round: int = 4
    iters_per_epoch: int = 2000
    batch_size: int = 4
    patch_size: int = 48
    lr: float = 3e-4
    milestones: tuple[float, ...] = (0.5, 0.8)
    lr_factor: float = 0.5
    seed: int = 0
    inference_batch: int = 32
    refine: bool = True
    round_seeds: tuple[int, ...] | None = None
    workers: int = 1

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.epochs < 1 or self.epochs_per_round < 1:
            raise ValueError("epoch counts must be >= 1")
        if self.rounds < 0:
            raise ValueError("rounds must be >= 0")
        if self.iters_per_epoch < 0 or self.batch_size < 1 or self.patch_size < 1:
            raise ValueError("iterations, batch and patch sizes must be positive")
        m = tuple(float(v) for v in self.milestones)
        if any(not 0.0 < v < 1.0 for v in m) or any(b <= a for a, b in zip(m, m[1:])):
            raise ValueError("milestones are strictly increasing fractions in (0, 1)")
        self.milestones = m
        if self.workers < 1:
            raise ValueError("workers must be >= 1")

    def schedule_iters(self, total: int) -> list[int]:
        """Absolute iterations at which the learning rate is multiplied by ``lr_factor``."""
        return [int(round(f * total)) for f in self.milestones]

    def lr_at(self, iteration: int, total: int) -> float:
        drops = sum(1 for m in self.schedule_iters(total) if iteration >= m)
        return self.lr * self.lr_factor**drops

    def total_iterations(self) -> int:
        if self.mode == "full":
            return (self.rounds + 1) * self.epochs_per_round * self.iters_per_epoch
        return self.epochs * self.iters_per_epoch


@dataclass
class RunRecord:
    """Loss curve, evaluation trace and timing of one run."""

    epochs: list[dict] = field(default_factory=list)
    evals: list[dict] = field(default_factory=list)
    phases: dict[str, float] = field(default_factory=lambda: {"train": 0.0, "refine": 0.0, "eval": 0.0})
    checkpoints: list[str] = field(default_factory=list)
    streams: dict[str, int] = field(default_factory=dict)
    started: float = field(default_factory=time.time)

    @property
    def refine_fraction(self) -> float:
        """Target-refinement time over train + refine time."""
        busy = self.phases["train"] + self.phases["refine"]
        return self.phases["refine"] / busy if busy else 0.0

    def to_json(self) -> dict:
        d = asdict(self)
        d["refine_fraction"] = self.refine_fraction
        return d

    def metrics_csv(self, timing: bool = False) -> str:
        """``epoch,round,split,psnr,ssim,loss,seconds``; seconds stay blank unless ``timing``."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "round", "split", "psnr", "ssim", "loss", "seconds"])
        evals = {(e["epoch"], e["round"]): e for e in self.evals}
        for ep in self.epochs:
            secs = f"{ep['seconds']:.3f}" if timing else ""
            w.writerow([ep["epoch"], ep["round"], "train", "", "", f"{ep['loss']:.8f}", secs])
            ev = evals.get((ep["epoch"], ep["round"]))
            if ev is not None:
                secs = f"{ev['seconds']:.3f}" if timing else ""
                w.writerow([ev["epoch"], ev["round"], ev["split"], format_metric(ev["psnr"]),
                            format_metric(ev["ssim"]), "", secs])
        return buf.getvalue()


def derive_seed(seed: int, *keys) -> int:
    """Deterministic 63-bit seed for a named purpose."""
    x = int(seed)
    for k in keys:
        if isinstance(k, str):
            k = int.from_bytes(k.encode("utf-8")[:8].ljust(8, b"\0"), "little")
        x = _splitmix64(x ^ _splitmix64(int(k)))
    return x >> 1


def evaluate(model: DenoiserModel, test_pairs: TestPairs, batch_size: int = 32, workers: int = 1) -> MetricReport:
    """Mean and per-image PSNR/SSIM of the model output against clean references."""
    if not isinstance(test_pairs, TestPairs):
        raise TypeError("evaluate expects TestPairs")

    def one(i):
        out = denoise_full(model, [test_pairs.noisy[i]], batch_size=batch_size)[0]
        clean = test_pairs.clean[i]
        return psnr(out, clean), ssim(out, clean)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            scores = list(pool.map(one, range(len(test_pairs))))
    else:
        scores = [one(i) for i in range(len(test_pairs))]
    report = MetricReport()
    for name, (p, s) in zip(test_pairs.names, scores):
        report.add(name, p, s)
    return report


class _Trainer:
    """Shared patch/noise loop; every random draw comes from named streams."""

    def __init__(self, spec: NoiseSpec, cfg: IdrConfig, record: RunRecord, eval_pairs, run_dir, log_every):
        self.spec = spec
        self.cfg = cfg
        self.record = record
        self.eval_pairs = eval_pairs
        self.run_dir = Path(run_dir) if run_dir is not None else None
        self.log_every = log_every
        root = RngStream(cfg.seed)
        self.patch_stream = root.child("patches")
        self.noise_stream = root.child("noise")
        record.streams.update(
            seed=cfg.seed, patches=self.patch_stream.stream, noise=self.noise_stream.stream
        )

    def fit_epochs(self, model, state, targets: Sequence[np.ndarray], epochs: range, total_iters: int,
                   round_: int, stream_key: int, epoch_checkpoints: bool = True):
        cfg = self.cfg
        align = model.config.alignment
        if cfg.patch_size % align:
            raise ValueError(f"patch size {cfg.patch_size} must be a multiple of {align}")
        shapes = [t.shape for t in targets]
        patches = self.patch_stream.child(stream_key)
        noise = self.noise_stream.child(stream_key)
        for epoch in epochs:
            t0 = time.perf_counter()
            losses = []
            for _ in range(cfg.iters_per_epoch):
                it = state.iteration
                state.lr = cfg.lr_at(it, total_iters)
                corners = sample_corners(shapes, cfg.patch_size, cfg.batch_size, patches.child(it))
                pairs = make_noisier_noisy(crop(targets, corners, cfg.patch_size), self.spec, noise.child(it))
                x, y = pairs.as_batch()
                try:
                    losses.append(train_step(model, state, x, y))
                except NumericError as exc:
                    raise NumericError(f"training aborted (round {round_}, epoch {epoch}): {exc}") from exc
                if self.log_every and state.iteration % self.log_every == 0:
                    log.info("round %d epoch %d iter %d loss %.5f", round_, epoch, state.iteration, losses[-1])
            dt = time.perf_counter() - t0
            self.record.phases["train"] += dt
            self.record.epochs.append({
                "epoch": epoch,
                "round": round_,
                "loss": float(np.mean(losses)) if losses else float("nan"),
                "iterations": state.iteration,
                "lr": state.lr,
                "seconds": dt,
            })
            self.maybe_eval(model, epoch, round_)
            if self.run_dir is not None and epoch_checkpoints:
                self.checkpoint(model, f"epoch_{epoch:03d}.ckpt")

    def maybe_eval(self, model, epoch: int, round_: int):
        if self.eval_pairs is None:
            return
        t0 = time.perf_counter()
        rep = evaluate(model, self.eval_pairs, self.cfg.inference_batch, self.cfg.workers)
        dt = time.perf_counter() - t0
        self.record.phases["eval"] += dt
        self.record.evals.append({
            "epoch": epoch,
            "round": round_,
            "split": "test",
            "psnr": rep.mean_psnr,
            "ssim": rep.mean_ssim,
            "seconds": dt,
        })

    def refine(self, model, noisy, store: TargetStore) -> TargetStore:
        t0 = time.perf_counter()
        new = refine_targets(model, noisy, store, self.cfg.inference_batch)
        self.record.phases["refine"] += time.perf_counter() - t0
        return new

    def checkpoint(self, model, name: str):
        path = save_checkpoint(model, self.run_dir / "checkpoints" / name)
        self.record.checkpoints.append(str(path.relative_to(self.run_dir)))


def _model_config(base: ModelConfig | None, noisy: ImageSet, seed: int) -> ModelConfig:
    base = base or ModelConfig(in_channels=noisy.channels)
    if base.in_channels != noisy.channels:
        raise ValueError(f"model has {base.in_channels} input channels, images have {noisy.channels}")
    return ModelConfig(base.levels, base.base_channels, base.in_channels, base.slope, seed, base.convs_per_level)


def _cumulative(noisy, spec, cfg, model_config, eval_pairs, record, run_dir, refine, log_every):
    require_training_set(noisy)
    record = record if record is not None else RunRecord()
    trainer = _Trainer(spec, cfg, record, eval_pairs, run_dir, log_every)
    mcfg = _model_config(model_config, noisy, derive_seed(cfg.seed, "init", 0))
    record.streams["init"] = [mcfg.seed]
    model = build_unet(mcfg)
    state = TrainingState()
    store = TargetStore.initial(noisy)
    total = cfg.epochs * cfg.iters_per_epoch
    for epoch in range(cfg.epochs):
        if epoch and refine:
            store = trainer.refine(model, noisy, store)
        trainer.fit_epochs(model, state, store.targets, range(epoch, epoch + 1), total, store.round, 0)
    if refine:
        store = trainer.refine(model, noisy, store)
    if run_dir is not None:
        trainer.checkpoint(model, "final.ckpt")
    return model, store, record


def train_baseline(noisy, spec: NoiseSpec, cfg: IdrConfig, model_config: ModelConfig | None = None,
                   eval_pairs: TestPairs | None = None, record: RunRecord | None = None,
                   run_dir=None, log_every: int = 0) -> DenoiserModel:
    """Train on {x + n, x} only, for ``cfg.epochs`` epochs."""
    model, _, _ = _cumulative(noisy, spec, cfg, model_config, eval_pairs, record, run_dir, False, log_every)
    return model


def train_fast_idr(noisy, spec: NoiseSpec, cfg: IdrConfig, model_config: ModelConfig | None = None,
                   eval_pairs: TestPairs | None = None, record: RunRecord | None = None,
                   run_dir=None, log_every: int = 0, return_store: bool = False):
    """One epoch per refinement with the model carried over between epochs.

    Epoch 0 uses the noisy images as targets; before each later epoch the
    current model denoises the original noisy images to produce new
    targets. ``cfg.epochs`` counts training epochs; a last refinement pass
    after the final epoch yields the final target store.
    """
    model, store, _ = _cumulative(noisy, spec, cfg, model_config, eval_pairs, record, run_dir,
                                  cfg.refine, log_every)
    return (model, store) if return_store else model


def train_full_idr(noisy, spec: NoiseSpec, cfg: IdrConfig, model_config: ModelConfig | None = None,
                   eval_pairs: TestPairs | None = None, record: RunRecord | None = None,
                   run_dir=None, log_every: int = 0, stores: list | None = None) -> list[DenoiserModel]:
    """Models F_0 .. F_M, each trained from scratch on targets F_{m-1}(x_i)."""
    require_training_set(noisy)
    record = record if record is not None else RunRecord()
    trainer = _Trainer(spec, cfg, record, eval_pairs, run_dir, log_every)
    store = TargetStore.initial(noisy)
    models = []
    per_round = cfg.epochs_per_round * cfg.iters_per_epoch
    for rnd in range(cfg.rounds + 1):
        if rnd:
            store = trainer.refine(models[-1], noisy, store)
        if stores is not None:
            stores.append(store)
        if cfg.round_seeds is not None:
            init_seed = cfg.round_seeds[rnd]
        else:
            init_seed = derive_seed(cfg.seed, "init", rnd)
        record.streams.setdefault("init", []).append(init_seed)
        model = build_unet(_model_config(model_config, noisy, init_seed))
        state = TrainingState()
        first = rnd * cfg.epochs_per_round
        trainer.fit_epochs(model, state, store.targets, range(first, first + cfg.epochs_per_round),
                           per_round, rnd, rnd, epoch_checkpoints=False)
        if run_dir is not None:
            trainer.checkpoint(model, f"round_{rnd:02d}.ckpt")
        models.append(model)
    return models


def train(noisy, spec: NoiseSpec, cfg: IdrConfig, **kwargs):
    """Dispatch on ``cfg.mode``; returns the final model."""
    if cfg.mode == "baseline":
        return train_baseline(noisy, spec, cfg, **kwargs)
    if cfg.mode == "fast":
        return train_fast_idr(noisy, spec, cfg, **kwargs)
    return train_full_idr(noisy, spec, cfg, **kwargs)[-1]


def write_run_outputs(run_dir, record: RunRecord, effective_config: dict | None = None,
                      timing_in_csv: bool = False) -> None:
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "metrics.csv").write_text(record.metrics_csv(timing_in_csv))
    payload = record.to_json()
    if effective_config is not None:
        payload["config"] = effective_config
    (run_dir / "run.json").write_text(json.dumps(payload, indent=2, default=str) + "\n")
