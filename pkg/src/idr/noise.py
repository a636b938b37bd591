"""Noise synthesis: Gaussian, Poisson-Gaussian, binomial, impulse, correlated.

Images are H x W x C float arrays. Gaussian and correlated levels are
expressed in 1/255 units inside a spec and converted to [0, 1] units
before sampling. None of the samplers clip their output.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import ClassVar

import numpy as np
from scipy import ndimage

_MASK64 = (1 << 64) - 1


def _splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


class RngStream:
    """Counter-based random stream identified by ``(seed, stream)``.

    Draws come from Philox keyed by the pair, so replaying the same pair
    reproduces the same sequence and distinct stream ids never overlap.
    """

    def __init__(self, seed: int, stream: int = 0):
        self.seed = int(seed) & _MASK64
        self.stream = int(stream) & _MASK64
        seq = np.random.SeedSequence(entropy=self.seed, spawn_key=(self.stream,))
        self.generator = np.random.Generator(np.random.Philox(seq))

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, stream={self.stream}, counter={self.counter})"

    @property
    def counter(self) -> int:
        state = self.generator.bit_generator.state["state"]["counter"]
        return int(sum(int(c) << (64 * i) for i, c in enumerate(state)))

    def child(self, key) -> "RngStream":
        """Independent sub-stream; ``key`` may be an int or a short string."""
        if isinstance(key, str):
            key = int.from_bytes(key.encode("utf-8")[:8].ljust(8, b"\0"), "little")
        return RngStream(self.seed, _splitmix64(self.stream ^ _splitmix64(int(key))))

    def uniform(self, lo=0.0, hi=1.0, size=None):
        return self.generator.uniform(lo, hi, size)

    def normal(self, size=None):
        return self.generator.standard_normal(size)

    def random(self, size=None):
        return self.generator.random(size)

    def integers(self, lo, hi=None, size=None):
        return self.generator.integers(lo, hi, size)


def _range(values, name: str, lo_bound=0.0, hi_bound=math.inf) -> tuple[float, float]:
    lo, hi = (float(v) for v in values)
    if not lo <= hi:
        raise ValueError(f"{name} range must be ordered, got [{lo}, {hi}]")
    if lo < lo_bound or hi > hi_bound:
        raise ValueError(f"{name} range [{lo}, {hi}] outside [{lo_bound}, {hi_bound}]")
    return lo, hi


def sample_uniform(lo: float, hi: float, rng: RngStream) -> float:
    if lo == hi:
        return lo
    return float(rng.uniform(lo, hi))


# -- samplers -----------------------------------------------------------------

def apply_gaussian(img: np.ndarray, sigma: float, rng: RngStream) -> np.ndarray:
    """``img + N(0, sigma^2)`` with sigma in [0, 1] intensity units."""
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    img = np.asarray(img)
    if sigma == 0:
        return img.copy()
    return (img + sigma * rng.normal(img.shape)).astype(img.dtype, copy=False)


def _poisson(lam: np.ndarray, rng: RngStream) -> np.ndarray:
    """Inverse-transform sampling below mean 30, rounded normal approximation above."""
    lam = np.asarray(lam, dtype=np.float64)
    out = np.empty_like(lam)
    small = lam < 30.0
    if small.any():
        lo = lam[small]
        u = rng.random(lo.shape)
        k = np.zeros_like(lo)
        p = np.exp(-lo)
        cdf = p.copy()
        active = u > cdf
        # the tail beyond mean + 12 sd is below double precision for lam < 30
        for i in range(1, 120):
            if not active.any():
                break
            p = np.where(active, p * lo / i, p)
            k = np.where(active, i, k)
            cdf = np.where(active, cdf + p, cdf)
            active &= u > cdf
        out[small] = k
    if (~small).any():
        hi = lam[~small]
        out[~small] = np.maximum(np.rint(hi + np.sqrt(hi) * rng.normal(hi.shape)), 0.0)
    return out


def apply_poisson_gaussian(img: np.ndarray, iso: float, spec: "PoissonGaussianSpec", rng: RngStream) -> np.ndarray:
    """Shot noise with gain ``k`` plus Gaussian read noise, both scaled by ISO/100."""
    if iso <= 0:
        raise ValueError("iso must be positive")
    k, sigma_r = spec.gain(iso)
    if k <= 0:
        raise ValueError(f"signal gain must be positive, got {k}")
    img = np.asarray(img)
    shot = k * _poisson(np.clip(img, 0.0, None) / k, rng)
    read = sigma_r * rng.normal(img.shape)
    return (shot + read).astype(img.dtype, copy=False)


def apply_binomial(img: np.ndarray, p: float, rng: RngStream) -> np.ndarray:
    """Zero whole pixels with probability p through a mask shared by all channels."""
    if not 0.0 <= p <= 1.0:
        raise ValueError("p must lie in [0, 1]")
    img = np.asarray(img)
    keep = rng.random(img.shape[:2]) >= p
    return img * keep[..., None].astype(img.dtype)


def apply_impulse(img: np.ndarray, p: float, rng: RngStream) -> np.ndarray:
    """Replace each pixel channel by 0 or 1 (fair draw) with probability p."""
    if not 0.0 <= p <= 1.0:
        raise ValueError("p must lie in [0, 1]")
    img = np.asarray(img)
    hit = rng.random(img.shape) < p
    values = (rng.random(img.shape) < 0.5).astype(img.dtype)
    return np.where(hit, values, img)


def correlated_field(shape, sigma: float, kernel: np.ndarray, rng: RngStream) -> np.ndarray:
    """``(sigma * v) (*) g`` per channel with zero padding; ``shape`` is H x W x C."""
    kernel = np.asarray(kernel, dtype=np.float64)
    if kernel.size == 0:
        raise ValueError("empty correlation kernel")
    if kernel.ndim != 2 or not np.isfinite(kernel).all():
        raise ValueError("correlation kernel must be a finite 2-D array")
    v = sigma * rng.normal(shape)
    out = np.empty(shape, dtype=np.float64)
    for c in range(shape[2]):
        out[..., c] = ndimage.convolve(v[..., c], kernel, mode="constant", cval=0.0)
    return out


def apply_correlated(img: np.ndarray, sigma: float, kernel: np.ndarray, rng: RngStream) -> np.ndarray:
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    img = np.asarray(img)
    return (img + correlated_field(img.shape, sigma, kernel, rng)).astype(img.dtype, copy=False)


# -- kernels ------------------------------------------------------------------

def parse_kernel(text: str) -> np.ndarray:
    tokens = text.split()
    if len(tokens) < 2:
        raise ValueError("kernel file needs a 'rows cols' header")
    rows, cols = int(tokens[0]), int(tokens[1])
    values = [float(t) for t in tokens[2:]]
    if rows * cols == 0:
        raise ValueError("empty correlation kernel")
    if len(values) != rows * cols:
        raise ValueError(f"kernel header says {rows}x{cols} but {len(values)} values follow")
    kernel = np.array(values, dtype=np.float64).reshape(rows, cols)
    if not np.isfinite(kernel).all():
        raise ValueError("kernel has non-finite entries")
    return kernel


def format_kernel(kernel: np.ndarray) -> str:
    kernel = np.atleast_2d(np.asarray(kernel, dtype=np.float64))
    lines = [f"{kernel.shape[0]} {kernel.shape[1]}"]
    lines += [" ".join(repr(float(v)) for v in row) for row in kernel]
    return "\n".join(lines) + "\n"


def load_kernel(path) -> np.ndarray:
    return parse_kernel(Path(path).read_text())


KERNEL_NAMES = ("delta", "gauss3", "hline5", "vline5", "ring5")


def named_kernel(name: str) -> np.ndarray:
    """Built-in kernel from the packaged registry (unit energy, sum of squares 1)."""
    if name not in KERNEL_NAMES:
        raise KeyError(f"unknown kernel {name!r}; choose from {', '.join(KERNEL_NAMES)}")
    text = resources.files("idr").joinpath("data", "kernels", f"{name}.txt").read_text()
    return parse_kernel(text)


def resolve_kernel(ref: str, base_dir: Path | None = None) -> np.ndarray:
    if ref in KERNEL_NAMES:
        return named_kernel(ref)
    path = Path(ref)
    if base_dir is not None and not path.is_absolute():
        path = base_dir / path
    return load_kernel(path)


# -- calibration ----------------------------------------------------------------

def parse_calibration(text: str) -> tuple[float, float]:
    """Fit ISO-100 gain and read noise from ``iso k sigma_r`` lines.

    Both quantities scale linearly with ISO, so each is a least-squares
    fit through the origin against iso / 100.
    """
    rows = []
    for line in text.splitlines():
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 3:
            raise ValueError(f"calibration line needs 'iso k sigma_r': {line!r}")
        rows.append([float(p) for p in parts])
    if not rows:
        raise ValueError("calibration file has no entries")
    arr = np.array(rows)
    scale = arr[:, 0] / 100.0
    if (scale <= 0).any():
        raise ValueError("calibration ISO values must be positive")
    denom = float(scale @ scale)
    return float(scale @ arr[:, 1]) / denom, float(scale @ arr[:, 2]) / denom


def default_calibration() -> tuple[float, float]:
    text = resources.files("idr").joinpath("data", "calibration.txt").read_text()
    return parse_calibration(text)


# -- specs ------------------------------------------------------------------------

@dataclass(frozen=True)
class NoiseSpec:
    """Base class; subclasses know how to draw a level and apply it."""

    variant: ClassVar[str] = ""

    def sample_level(self, rng: RngStream) -> float:
        lo, hi = self.level_range
        return sample_uniform(lo, hi, rng)

    @property
    def level_range(self) -> tuple[float, float]:
        raise NotImplementedError

    def apply(self, img: np.ndarray, level: float, rng: RngStream) -> np.ndarray:
        raise NotImplementedError

    @property
    def zero_mean(self) -> bool:
        return True

    def is_zero(self) -> bool:
        return self.level_range == (0.0, 0.0)

    def with_range(self, lo: float, hi: float) -> "NoiseSpec":
        raise NotImplementedError

    def test_levels(self, count: int = 4) -> list[float]:
        """Evenly spaced levels spanning the training range."""
        lo, hi = self.level_range
        return [float(v) for v in np.linspace(lo, hi, count)]

    def to_dict(self) -> dict:
        raise NotImplementedError


@dataclass(frozen=True)
class GaussianSpec(NoiseSpec):
    sigma_range: tuple[float, float] = (0.0, 50.0)
    variant: ClassVar[str] = "gaussian"

    def __post_init__(self):
        object.__setattr__(self, "sigma_range", _range(self.sigma_range, "sigma"))

    @property
    def level_range(self):
        return self.sigma_range

    def apply(self, img, level, rng):
        return apply_gaussian(img, level / 255.0, rng)

    def with_range(self, lo, hi):
        return GaussianSpec((lo, hi))

    def to_dict(self):
        return {"variant": self.variant, "sigma_range": list(self.sigma_range)}


@dataclass(frozen=True)
class PoissonGaussianSpec(NoiseSpec):
    k0: float = 0.0
    sigma0: float = 0.0
    iso_range: tuple[float, float] = (800.0, 3200.0)
    variant: ClassVar[str] = "poisson_gaussian"

    def __post_init__(self):
        object.__setattr__(self, "iso_range", _range(self.iso_range, "iso"))
        if self.k0 <= 0 and self.sigma0 <= 0:
            k0, s0 = default_calibration()
            object.__setattr__(self, "k0", k0)
            object.__setattr__(self, "sigma0", s0)
        if self.k0 <= 0:
            raise ValueError("k0 must be positive")
        if self.sigma0 < 0:
            raise ValueError("sigma0 must be non-negative")
        if self.iso_range[0] <= 0:
            raise ValueError("ISO range must be positive")

    @property
    def level_range(self):
        return self.iso_range

    def gain(self, iso: float) -> tuple[float, float]:
        return self.k0 * iso / 100.0, self.sigma0 * iso / 100.0

    def apply(self, img, level, rng):
        return apply_poisson_gaussian(img, level, self, rng)

    def is_zero(self):
        return False

    def with_range(self, lo, hi):
        return PoissonGaussianSpec(self.k0, self.sigma0, (lo, hi))

    def to_dict(self):
        return {
            "variant": self.variant,
            "k0": self.k0,
            "sigma0": self.sigma0,
            "iso_range": list(self.iso_range),
        }


@dataclass(frozen=True)
class BinomialSpec(NoiseSpec):
    p_range: tuple[float, float] = (0.0, 0.95)
    variant: ClassVar[str] = "binomial"

    def __post_init__(self):
        object.__setattr__(self, "p_range", _range(self.p_range, "p", 0.0, 0.95))

    @property
    def level_range(self):
        return self.p_range

    @property
    def zero_mean(self):
        return False

    def apply(self, img, level, rng):
        return apply_binomial(img, level, rng)

    def with_range(self, lo, hi):
        return type(self)((lo, hi))

    def to_dict(self):
        return {"variant": self.variant, "p_range": list(self.p_range)}


@dataclass(frozen=True)
class ImpulseSpec(BinomialSpec):
    variant: ClassVar[str] = "impulse"

    def apply(self, img, level, rng):
        return apply_impulse(img, level, rng)


@dataclass(frozen=True)
class CorrelatedSpec(NoiseSpec):
    sigma_range: tuple[float, float] = (5.0, 5.0)
    kernel: np.ndarray = field(default_factory=lambda: named_kernel("gauss3"))
    kernel_id: str = "gauss3"
    variant: ClassVar[str] = "correlated"

    def __post_init__(self):
        object.__setattr__(self, "sigma_range", _range(self.sigma_range, "sigma"))
        kernel = np.asarray(self.kernel, dtype=np.float64)
        if kernel.size == 0:
            raise ValueError("empty correlation kernel")
        if kernel.ndim != 2 or not np.isfinite(kernel).all():
            raise ValueError("correlation kernel must be a finite 2-D array")
        object.__setattr__(self, "kernel", kernel)

    @property
    def level_range(self):
        return self.sigma_range

    def apply(self, img, level, rng):
        return apply_correlated(img, level / 255.0, self.kernel, rng)

    def with_range(self, lo, hi):
        return CorrelatedSpec((lo, hi), self.kernel, self.kernel_id)

    def to_dict(self):
        return {
            "variant": self.variant,
            "sigma_range": list(self.sigma_range),
            "kernel": self.kernel_id,
        }

    def __eq__(self, other):
        return (
            isinstance(other, CorrelatedSpec)
            and self.sigma_range == other.sigma_range
            and np.array_equal(self.kernel, other.kernel)
        )

    __hash__ = None


def sample_level(spec: NoiseSpec, rng: RngStream) -> float:
    return spec.sample_level(rng)


# -- spec files ---------------------------------------------------------------------

_SPEC_KEYS = {
    "gaussian": {"sigma_range"},
    "poisson_gaussian": {"iso_range", "k0", "sigma0", "calibration"},
    "binomial": {"p_range"},
    "impulse": {"p_range"},
    "correlated": {"sigma", "sigma_range", "kernel"},
}


def _floats(value: str) -> list[float]:
    return [float(v) for v in value.replace(",", " ").split()]


def _pair(value: str) -> tuple[float, float]:
    vals = _floats(value)
    if len(vals) == 1:
        return vals[0], vals[0]
    if len(vals) != 2:
        raise ValueError(f"expected 'lo hi', got {value!r}")
    return vals[0], vals[1]


def spec_from_mapping(values: dict[str, str], base_dir: Path | None = None) -> NoiseSpec:
    """Build a spec from string key/values (as found in spec and config files)."""
    values = {k.strip().lower(): str(v).strip() for k, v in values.items()}
    variant = values.pop("variant", None)
    if variant is None:
        raise ValueError("noise spec needs a 'variant' key")
    variant = variant.lower().replace("-", "_")
    if variant not in _SPEC_KEYS:
        raise ValueError(f"unknown noise variant {variant!r}")
    unknown = set(values) - _SPEC_KEYS[variant]
    if unknown:
        raise ValueError(f"unknown keys for {variant} noise: {', '.join(sorted(unknown))}")

    if variant == "gaussian":
        return GaussianSpec(_pair(values.get("sigma_range", "0 50")))
    if variant in ("binomial", "impulse"):
        cls = BinomialSpec if variant == "binomial" else ImpulseSpec
        return cls(_pair(values.get("p_range", "0 0.95")))
    if variant == "poisson_gaussian":
        k0 = float(values.get("k0", 0.0))
        sigma0 = float(values.get("sigma0", 0.0))
        if "calibration" in values:
            path = Path(values["calibration"])
            if base_dir is not None and not path.is_absolute():
                path = base_dir / path
            k0, sigma0 = parse_calibration(path.read_text())
        return PoissonGaussianSpec(k0, sigma0, _pair(values.get("iso_range", "800 3200")))
    # correlated
    if "sigma" in values and "sigma_range" in values:
        raise ValueError("give either sigma or sigma_range, not both")
    sig = _pair(values.get("sigma_range", values.get("sigma", "5")))
    ref = values.get("kernel", "gauss3")
    return CorrelatedSpec(sig, resolve_kernel(ref, base_dir), ref)


def parse_spec(text: str, base_dir: Path | None = None) -> NoiseSpec:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        sep = "=" if "=" in line else ":" if ":" in line else None
        if sep is None:
            raise ValueError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, value = line.split(sep, 1)
        values[key.strip()] = value.strip()
    return spec_from_mapping(values, base_dir)


def load_spec(path) -> NoiseSpec:
    path = Path(path)
    return parse_spec(path.read_text(), path.parent)


def format_spec(spec: NoiseSpec) -> str:
    d = spec.to_dict()
    lines = []
    for key, value in d.items():
        if isinstance(value, list):
            value = " ".join(repr(float(v)) for v in value)
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"
