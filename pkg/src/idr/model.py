"""Shallow U-Net denoiser (no normalization layers) and its training step."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .tensor import (
    AdamState,
    NumericError,
    ShapeError,
    Tensor,
    adam_step,
    concat_channels,
    conv2d,
    decode_tensors,
    encode_tensors,
    l1_loss,
    leaky_relu,
    maxpool2,
    upsample2,
)


@dataclass(frozen=True)
class ModelConfig:
    levels: int = 3
    base_channels: int = 16
    in_channels: int = 1
    slope: float = 0.1
    seed: int = 0
    convs_per_level: int = 1

    def __post_init__(self):
        if self.levels < 1:
            raise ValueError(f"levels must be >= 1, got {self.levels}")
        if self.base_channels < 1:
            raise ValueError(f"base_channels must be >= 1, got {self.base_channels}")
        if self.in_channels not in (1, 3, 4):
            raise ValueError(f"in_channels must be 1, 3 or 4, got {self.in_channels}")
        if not 0.0 <= self.slope < 1.0:
            raise ValueError(f"slope must lie in [0, 1), got {self.slope}")
        if self.convs_per_level < 1:
            raise ValueError("convs_per_level must be >= 1")

    @property
    def alignment(self) -> int:
        """Spatial extents must be multiples of this value."""
        return 2 ** (self.levels - 1)

    def widths(self) -> list[int]:
        return [self.base_channels * 2 ** level for level in range(self.levels)]

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def _layer_plan(cfg: ModelConfig) -> list[tuple[str, int, int, int]]:
    """(name, in_ch, out_ch, kernel) for every convolution in forward order."""
    w = cfg.widths()
    plan = []
    prev = cfg.in_channels
    for level in range(cfg.levels):
        for j in range(cfg.convs_per_level):
            plan.append((f"enc{level}.{j}", prev, w[level], 3))
            prev = w[level]
    for level in range(cfg.levels - 2, -1, -1):
        for j in range(cfg.convs_per_level):
            cin = prev + w[level] if j == 0 else w[level]
            plan.append((f"dec{level}.{j}", cin, w[level], 3))
            prev = w[level]
    plan.append(("out", prev, cfg.in_channels, 1))
    return plan


@dataclass
class DenoiserModel:
    config: ModelConfig
    params: dict[str, Tensor] = field(default_factory=dict)

    @classmethod
    def build(cls, config: ModelConfig) -> "DenoiserModel":
        return build_unet(config)

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def named_arrays(self) -> list[tuple[str, np.ndarray]]:
        return [(name, t.data) for name, t in self.params.items()]

    def copy(self) -> "DenoiserModel":
        return DenoiserModel(
            self.config,
            {name: Tensor(t.data.copy(), name=name) for name, t in self.params.items()},
        )

    def digest(self) -> str:
        """SHA-256 of the serialized checkpoint, used as a provenance tag."""
        return hashlib.sha256(to_bytes(self)).hexdigest()

    def _conv(self, name: str, x: Tensor) -> Tensor:
        return conv2d(x, self.params[name + ".weight"], self.params[name + ".bias"])

    def forward(self, x: Tensor) -> Tensor:
        cfg = self.config
        if x.data.ndim != 4 or x.shape[1] != cfg.in_channels:
            raise ShapeError(f"expected (N, {cfg.in_channels}, H, W) input, got {x.shape}")
        h, w = x.shape[2:]
        if h % cfg.alignment or w % cfg.alignment:
            raise ShapeError(
                f"spatial extents {h}x{w} must be multiples of {cfg.alignment}"
            )
        skips = []
        for level in range(cfg.levels):
            if level:
                x = maxpool2(x)
            for j in range(cfg.convs_per_level):
                x = leaky_relu(self._conv(f"enc{level}.{j}", x), cfg.slope)
            if level < cfg.levels - 1:
                skips.append(x)
        for level in range(cfg.levels - 2, -1, -1):
            x = concat_channels(upsample2(x), skips[level])
            for j in range(cfg.convs_per_level):
                x = leaky_relu(self._conv(f"dec{level}.{j}", x), cfg.slope)
        return self._conv("out", x)

    __call__ = forward


def build_unet(config: ModelConfig) -> DenoiserModel:
    """Fresh model with He-uniform weights (fan-in) and zero biases."""
    rng = np.random.default_rng(config.seed)
    params: dict[str, Tensor] = {}
    for name, cin, cout, k in _layer_plan(config):
        bound = np.sqrt(6.0 / (cin * k * k))
        weight = rng.uniform(-bound, bound, size=(cout, cin, k, k)).astype(np.float32)
        params[name + ".weight"] = Tensor(weight, name=name + ".weight")
        params[name + ".bias"] = Tensor(np.zeros(cout, np.float32), name=name + ".bias")
    return DenoiserModel(config, params)


def to_nchw(images: Sequence[np.ndarray]) -> np.ndarray:
    return np.stack([np.asarray(im, dtype=np.float32).transpose(2, 0, 1) for im in images])


def from_nchw(batch: np.ndarray) -> list[np.ndarray]:
    return [np.ascontiguousarray(b.transpose(1, 2, 0)) for b in batch]


def denoise(model: DenoiserModel, batch: Sequence[np.ndarray]) -> list[np.ndarray]:
    """Apply the network to H x W x C images of identical shape.

    Outputs are left unclamped; clamping belongs to export and metrics.
    """
    if not len(batch):
        return []
    cfg = model.config
    for im in batch:
        if im.ndim != 3 or im.shape[2] != cfg.in_channels:
            raise ShapeError(f"image shape {im.shape} does not match {cfg.in_channels} channels")
        if im.shape[0] % cfg.alignment or im.shape[1] % cfg.alignment:
            raise ShapeError(
                f"image extents {im.shape[:2]} must be multiples of {cfg.alignment}"
            )
    out = model.forward(Tensor(to_nchw(batch)))
    return from_nchw(out.data)


@dataclass
class TrainingState:
    """Optimizer moments plus the iteration counter of one training run."""

    adam: AdamState = field(default_factory=AdamState)
    iteration: int = 0

    @property
    def lr(self) -> float:
        return self.adam.lr

    @lr.setter
    def lr(self, value: float) -> None:
        self.adam.lr = value


def train_step(model: DenoiserModel, state: TrainingState, inputs: np.ndarray, targets: np.ndarray) -> float:
    """One forward/backward/Adam update on NCHW arrays; returns the pre-update L1 loss."""
    inputs = np.asarray(inputs, dtype=np.float32)
    targets = np.asarray(targets, dtype=np.float32)
    if inputs.shape != targets.shape:
        raise ShapeError(f"inputs {inputs.shape} and targets {targets.shape} differ")
    params = model.parameters()
    for p in params:
        p.requires_grad = True
        p.grad = None
    try:
        loss = l1_loss(model.forward(Tensor(inputs)), Tensor(targets))
    except NumericError as exc:
        raise NumericError(f"iteration {state.iteration}: {exc}") from exc
    value = float(loss.data)
    if not np.isfinite(value):
        raise NumericError(f"non-finite loss at iteration {state.iteration}")
    loss.backward()
    grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
    try:
        adam_step(params, grads, state.adam)
    except NumericError as exc:
        raise NumericError(f"iteration {state.iteration}: {exc}") from exc
    for p in params:
        p.grad = None
        p.requires_grad = False
    state.iteration += 1
    return value


def to_bytes(model: DenoiserModel) -> bytes:
    return encode_tensors(model.named_arrays(), model.config.to_json().encode("utf-8"))


def from_bytes(blob: bytes) -> DenoiserModel:
    named, extra = decode_tensors(blob)
    config = ModelConfig(**json.loads(extra.decode("utf-8")))
    expected = [(name + suffix) for name, *_ in _layer_plan(config) for suffix in (".weight", ".bias")]
    if [n for n, _ in named] != expected:
        raise ValueError("checkpoint parameters do not match the embedded model config")
    return DenoiserModel(config, {n: Tensor(a, name=n) for n, a in named})


def save_checkpoint(model: DenoiserModel, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(to_bytes(model))
    return path


def load_checkpoint(path) -> DenoiserModel:
    return from_bytes(Path(path).read_bytes())
