"""Figures rendered next to the CSV reports."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .pilot import Finding1Report, Finding2Report  # noqa: E402
from .scheduler import RunRecord  # noqa: E402

_STYLE = {
    "noisy_input": dict(color="tab:blue", marker="o"),
    "noisier_noisy": dict(color="tab:red", marker="s"),
    "noisy_clean": dict(color="tab:green", marker="^"),
}


def _save(fig, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    # fixed metadata keeps re-renders byte-stable
    fig.savefig(path, dpi=120, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_finding1(report: Finding1Report, path) -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.6))
    for cond in report.psnr:
        for seed in report.seeds:
            ax.scatter(report.levels, report.psnr[cond][seed], s=10, alpha=0.35, color=_STYLE[cond]["color"])
        ax.plot(report.levels, report.median(cond), label=cond.replace("_", "-"), **_STYLE[cond])
    ax.set_xlabel("noise level")
    ax.set_ylabel("PSNR (dB)")
    ax.legend(frameon=False)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    return _save(fig, Path(path))


def plot_finding2(report: Finding2Report, path) -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.6))
    drops = [report.drop(s) for s in report.sigmas]
    ax.bar([f"{s:g}" for s in report.sigmas], drops, color="tab:purple")
    ax.axhline(0.0, color="black", lw=0.8)
    ax.set_xlabel(f"{report.bias_type.replace('_', ' ')} bias strength")
    ax.set_ylabel("PSNR change vs unbiased (dB)")
    ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    return _save(fig, Path(path))


def plot_training(record: RunRecord, path) -> Path:
    """Training loss per epoch and, when evaluated, test PSNR per epoch."""
    fig, ax = plt.subplots(figsize=(5, 3.6))
    epochs = [e["epoch"] for e in record.epochs]
    ax.plot(epochs, [e["loss"] for e in record.epochs], color="tab:gray", marker=".", label="train L1")
    ax.set_xlabel("epoch")
    ax.set_ylabel("L1 loss")
    if record.evals:
        ax2 = ax.twinx()
        ax2.plot([e["epoch"] for e in record.evals], [e["psnr"] for e in record.evals],
                 color="tab:red", marker="o", label="test PSNR")
        ax2.set_ylabel("PSNR (dB)")
    fig.tight_layout()
    return _save(fig, Path(path))
