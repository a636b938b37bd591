"""Self-supervised image denoising by iterative data refinement."""

from .dataset import (
    BiasedTargets,
    CleanImages,
    NoisyImages,
    TargetStore,
    TestPairs,
    corrupt,
    load_dir,
    load_test_pairs,
    synthetic_corpus,
)
from .metrics import psnr, ssim
from .model import DenoiserModel, ModelConfig, build_unet, load_checkpoint, save_checkpoint
from .noise import (
    BinomialSpec,
    CorrelatedSpec,
    GaussianSpec,
    ImpulseSpec,
    PoissonGaussianSpec,
    RngStream,
)
from .scheduler import IdrConfig, RunRecord, evaluate, train_baseline, train_fast_idr, train_full_idr

__version__ = "0.1.0"

__all__ = [
    "BiasedTargets",
    "BinomialSpec",
    "CleanImages",
    "CorrelatedSpec",
    "DenoiserModel",
    "GaussianSpec",
    "IdrConfig",
    "ImpulseSpec",
    "ModelConfig",
    "NoisyImages",
    "PoissonGaussianSpec",
    "RngStream",
    "RunRecord",
    "TargetStore",
    "TestPairs",
    "build_unet",
    "corrupt",
    "evaluate",
    "load_checkpoint",
    "load_dir",
    "load_test_pairs",
    "psnr",
    "save_checkpoint",
    "ssim",
    "synthetic_corpus",
    "train_baseline",
    "train_fast_idr",
    "train_full_idr",
]
