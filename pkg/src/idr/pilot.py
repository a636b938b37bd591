"""Desk-scale pilot studies: generalization of noisier-noisy training and bias sensitivity."""

from __future__ import annotations

import csv
import hashlib
import io
import logging
import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .dataset import CleanImages, TestPairs, corrupt, make_biased_targets, split_train_test
from .metrics import PSNR_SENTINEL, format_metric, psnr
from .noise import NoiseSpec, RngStream
from .scheduler import IdrConfig, evaluate, train_baseline

log = logging.getLogger(__name__)

CONDITIONS = ("noisy_input", "noisier_noisy", "noisy_clean")
BIAS_TYPES = ("gaussian_noise", "gaussian_blur")


@dataclass
class PilotConfig:
    train: IdrConfig = field(default_factory=lambda: IdrConfig(mode="baseline", epochs=4))
    seeds: tuple[int, ...] = (0, 1, 2)
    levels: int = 4
    train_fraction: float = 0.7
    data_seed: int = 0
    workers: int = 1


@dataclass
class PilotSplit:
    """Train/test halves of the clean oracle plus the fixed noisy test sets."""

    train: CleanImages
    test: CleanImages
    levels: list[float]
    test_sets: list[TestPairs]
    key: str = ""

    def digest(self) -> str:
        h = hashlib.sha256(repr(self.levels).encode())
        for im in list(self.train) + [n for p in self.test_sets for n in p.noisy] + list(self.test):
            h.update(np.ascontiguousarray(im).tobytes())
        return h.hexdigest()


def make_split(clean: CleanImages, spec: NoiseSpec, cfg: PilotConfig) -> PilotSplit:
    if not isinstance(clean, CleanImages):
        raise TypeError("pilot studies take the clean oracle as CleanImages")
    train, test = split_train_test(clean, cfg.train_fraction, cfg.data_seed)
    levels = spec.test_levels(cfg.levels)
    study = RngStream(cfg.data_seed).child("study").child("test")
    sets = [
        TestPairs(corrupt(test, spec, study.child(i), level=lv), test) for i, lv in enumerate(levels)
    ]
    split = PilotSplit(train, test, levels, sets)
    split.key = split.digest()
    return split


def _eval_levels(model, split: PilotSplit, cfg: IdrConfig) -> list[float]:
    return [evaluate(model, pairs, cfg.inference_batch).mean_psnr for pairs in split.test_sets]


def _noisy_input_psnr(split: PilotSplit) -> list[float]:
    return [float(np.mean([psnr(n, c) for n, c in zip(p.noisy, p.clean)])) for p in split.test_sets]


def _cell(args) -> list[float]:
    """Train one (condition, seed) model and return its PSNR at each test level."""
    kind, param, seed, spec, split, cfg = args
    tcfg = replace(cfg.train, seed=seed)
    study = RngStream(seed).child("study")
    if kind == "noisier_noisy":
        noisy = corrupt(split.train, spec, study.child("train"))
        model = train_baseline(noisy, spec, tcfg)
    else:
        bias_type, sigma = param
        # same bias draws for every sigma so the conditions differ only in strength
        targets = make_biased_targets(split.train, bias_type, sigma, study.child("bias"))
        model = train_baseline(targets, spec, tcfg)
    return _eval_levels(model, split, tcfg)


class CellRunner:
    """Runs study cells once each; repeated keys are served from memory."""

    def __init__(self, workers: int = 1):
        self.workers = workers
        self.results: dict = {}

    def run(self, jobs: dict) -> dict:
        todo = {k: v for k, v in jobs.items() if k not in self.results}
        if self.workers > 1 and len(todo) > 1:
            with ProcessPoolExecutor(self.workers) as pool:
                done = dict(zip(todo, pool.map(_cell, todo.values())))
        else:
            done = {}
            for k, v in todo.items():
                log.info("pilot cell %s", k)
                done[k] = _cell(v)
        self.results.update(done)
        return {k: self.results[k] for k in jobs}


def _key(kind, param, seed, spec, split, cfg):
    return (kind, param, seed, repr(spec), split.key, repr(cfg.train))


@dataclass
class Finding1Report:
    levels: list[float]
    seeds: tuple[int, ...]
    psnr: dict[str, dict[int, list[float]]]

    def median(self, condition: str) -> list[float]:
        runs = self.psnr[condition]
        return [statistics.median(runs[s][i] for s in self.seeds) for i in range(len(self.levels))]

    def rows(self) -> list[tuple[float, str, int, float]]:
        """Long format: (level, condition, seed, psnr)."""
        out = []
        for cond, runs in self.psnr.items():
            for seed in self.seeds:
                for lv, p in zip(self.levels, runs[seed]):
                    out.append((lv, cond, seed, p))
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        conds = list(self.psnr)
        w.writerow(["level"] + conds)
        medians = {c: self.median(c) for c in conds}
        for i, lv in enumerate(self.levels):
            w.writerow([f"{lv:g}"] + [format_metric(medians[c][i]) for c in conds])
        return buf.getvalue()


def run_finding1(clean: CleanImages, spec: NoiseSpec, cfg: PilotConfig | None = None,
                 conditions=CONDITIONS, runner: CellRunner | None = None) -> Finding1Report:
    """PSNR of the noisy input, a noisier-noisy model and a noisy-clean model per test level."""
    cfg = cfg or PilotConfig()
    unknown = set(conditions) - set(CONDITIONS)
    if unknown:
        raise ValueError(f"unknown conditions {sorted(unknown)}")
    split = make_split(clean, spec, cfg)
    if spec.is_zero():
        # nothing to remove: every curve sits at the identical-image sentinel
        inf = [PSNR_SENTINEL] * len(split.levels)
        return Finding1Report(split.levels, cfg.seeds, {c: {s: list(inf) for s in cfg.seeds} for c in conditions})
    runner = runner or CellRunner(cfg.workers)
    jobs = {}
    for cond in conditions:
        if cond == "noisy_input":
            continue
        for s in cfg.seeds:
            param = None if cond == "noisier_noisy" else ("gaussian_noise", 0.0)
            kind = "noisier_noisy" if cond == "noisier_noisy" else "biased"
            jobs[(cond, s)] = (_key(kind, param, s, spec, split, cfg), (kind, param, s, spec, split, cfg))
    res = runner.run({k: v for k, v in jobs.values()})
    table: dict[str, dict[int, list[float]]] = {}
    for cond in conditions:
        if cond == "noisy_input":
            base = _noisy_input_psnr(split)
            table[cond] = {s: list(base) for s in cfg.seeds}
        else:
            table[cond] = {s: res[jobs[(cond, s)][0]] for s in cfg.seeds}
    return Finding1Report(split.levels, cfg.seeds, table)


@dataclass
class Finding2Report:
    bias_type: str
    sigmas: list[float]
    seeds: tuple[int, ...]
    levels: list[float]
    psnr: dict[float, dict[int, float]]
    reference: dict[int, float]

    def median(self, sigma: float) -> float:
        return statistics.median(self.psnr[sigma][s] for s in self.seeds)

    def median_reference(self) -> float:
        return statistics.median(self.reference[s] for s in self.seeds)

    def drop(self, sigma: float) -> float:
        """Median over seeds of the per-seed PSNR change against the unbiased reference."""
        return statistics.median(self.psnr[sigma][s] - self.reference[s] for s in self.seeds)

    def rows(self) -> list[tuple[float, str, int, float]]:
        return [(sg, f"{self.bias_type}:{sg:g}", s, self.psnr[sg][s]) for sg in self.sigmas for s in self.seeds]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["bias", "sigma", "psnr", "drop"])
        for sg in self.sigmas:
            w.writerow([self.bias_type, f"{sg:g}", format_metric(self.median(sg)), format_metric(self.drop(sg))])
        return buf.getvalue()


def run_finding2(clean: CleanImages, spec: NoiseSpec, bias_type: str, sigmas, cfg: PilotConfig | None = None,
                 runner: CellRunner | None = None) -> Finding2Report:
    """Train on {b + n, b} for biased targets b of growing strength; PSNR averaged over test levels."""
    cfg = cfg or PilotConfig()
    if bias_type not in BIAS_TYPES:
        raise ValueError(f"bias_type must be one of {BIAS_TYPES}")
    sigmas = [float(s) for s in sigmas]
    if not sigmas or any(b <= a for a, b in zip(sigmas, sigmas[1:])) or sigmas[0] < 0:
        raise ValueError("sigmas must be non-negative and strictly ascending")
    split = make_split(clean, spec, cfg)
    runner = runner or CellRunner(cfg.workers)
    # the unbiased reference is the sigma = 0 cell, shared with the noisy-clean curve of finding 1
    grid = sorted(set(sigmas) | {0.0})
    jobs = {}
    for sg in grid:
        # zero-strength bias is the same clean target for both bias types
        param = ("gaussian_noise", 0.0) if sg == 0.0 else (bias_type, sg)
        for s in cfg.seeds:
            jobs[(sg, s)] = (_key("biased", param, s, spec, split, cfg), ("biased", param, s, spec, split, cfg))
    res = runner.run({k: v for k, v in jobs.values()})
    mean = {k: float(np.mean(res[key])) for k, (key, _) in jobs.items()}
    table = {sg: {s: mean[(sg, s)] for s in cfg.seeds} for sg in sigmas}
    reference = {s: mean[(0.0, s)] for s in cfg.seeds}
    return Finding2Report(bias_type, sigmas, cfg.seeds, split.levels, table, reference)


def long_format_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["level", "condition", "psnr", "seed"])
    for level, cond, seed, p in rows:
        w.writerow([f"{level:g}", cond, format_metric(p), seed])
    return buf.getvalue()
