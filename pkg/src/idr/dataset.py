"""Image I/O, patch sampling and dataset construction.

Images are H x W x C float32 arrays in [0, 1] at ingest. Which role an
image set plays is carried by its type: training entry points accept
:class:`NoisyImages` (or the explicitly labeled :class:`BiasedTargets` of
the bias study) and refuse :class:`CleanImages`, which only evaluation
may read.
"""

from __future__ import annotations

import hashlib
import json
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from scipy import ndimage

from .model import DenoiserModel, denoise
from .noise import NoiseSpec, RngStream
from .tensor import ShapeError

IMAGE_EXTENSIONS = (".png", ".pgm", ".ppm", ".raw")


class DataError(ValueError):
    """Unreadable, truncated or inconsistent image data."""


# -- image sets -----------------------------------------------------------------

class ImageSet(Sequence):
    """Ordered, named collection of H x W x C images."""

    role = "images"

    def __init__(self, images: Sequence[np.ndarray], names: Sequence[str] | None = None):
        self.images = [np.asarray(im, dtype=np.float32) for im in images]
        for i, im in enumerate(self.images):
            if im.ndim == 2:
                self.images[i] = im[..., None]
            elif im.ndim != 3:
                raise ShapeError(f"image {i} must be H x W x C, got shape {im.shape}")
        if names is None:
            names = [f"{i:04d}" for i in range(len(self.images))]
        if len(names) != len(self.images):
            raise ValueError("names and images differ in length")
        self.names = list(names)

    def __len__(self) -> int:
        return len(self.images)

    def __getitem__(self, i):
        return self.images[i]

    def __iter__(self) -> Iterator[np.ndarray]:
        return iter(self.images)

    def __repr__(self) -> str:
        return f"{type(self).__name__}({len(self)} images)"

    @property
    def channels(self) -> int:
        return self.images[0].shape[2] if self.images else 0


class NoisyImages(ImageSet):
    """Single noisy observations x_i; the only data the method trains on."""

    role = "noisy"


class CleanImages(ImageSet):
    """Ground-truth references. Evaluation and bias synthesis only."""

    role = "clean"


class BiasedTargets(ImageSet):
    """Deliberately degraded clean targets for the data-bias study."""

    role = "biased"

    def __init__(self, images, names=None, bias: str = "gaussian_noise", sigma: float = 0.0):
        super().__init__(images, names)
        self.bias = bias
        self.sigma = sigma


def require_training_set(images) -> ImageSet:
    """Reject anything that is not a noisy set or a labeled biased-target set."""
    if isinstance(images, CleanImages):
        raise TypeError("clean reference images cannot enter a training path")
    if not isinstance(images, (NoisyImages, BiasedTargets)):
        raise TypeError(
            f"training needs NoisyImages (or BiasedTargets), got {type(images).__name__}"
        )
    if not len(images):
        raise ValueError("training set is empty")
    return images


@dataclass
class TestPairs:
    """Noisy inputs with their clean references, for evaluation only."""

    noisy: NoisyImages
    clean: CleanImages

    __test__ = False  # not a pytest class

    def __post_init__(self):
        if len(self.noisy) != len(self.clean):
            raise ValueError("noisy and clean test sets differ in length")
        for a, b in zip(self.noisy, self.clean):
            if a.shape != b.shape:
                raise ShapeError(f"test pair shapes differ: {a.shape} vs {b.shape}")

    def __len__(self) -> int:
        return len(self.noisy)

    @property
    def names(self) -> list[str]:
        return self.noisy.names


@dataclass
class PairSet:
    """(input, target) pairs with the noise level used for each pair."""

    inputs: list[np.ndarray]
    targets: list[np.ndarray]
    levels: list[float]

    def __len__(self) -> int:
        return len(self.inputs)

    def as_batch(self) -> tuple[np.ndarray, np.ndarray]:
        """Stack into NCHW input and target arrays."""
        x = np.stack(self.inputs).transpose(0, 3, 1, 2)
        y = np.stack(self.targets).transpose(0, 3, 1, 2)
        return np.ascontiguousarray(x, dtype=np.float32), np.ascontiguousarray(y, dtype=np.float32)


@dataclass
class TargetStore:
    """Current training targets x_i^(m) for every original noisy image."""

    targets: list[np.ndarray]
    round: int = 0
    model_hash: str = ""
    names: list[str] = field(default_factory=list)

    @classmethod
    def initial(cls, noisy: NoisyImages) -> "TargetStore":
        require_training_set(noisy)
        return cls([im for im in noisy], 0, "", list(noisy.names))

    def __len__(self) -> int:
        return len(self.targets)

    def checksums(self) -> list[str]:
        return [hashlib.sha256(np.ascontiguousarray(t, dtype="<f4").tobytes()).hexdigest() for t in self.targets]

    def save(self, directory) -> Path:
        """Write 16-bit PNGs plus ``manifest.json`` (round, model hash, checksums)."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        entries = []
        for name, t in zip(self.names, self.targets):
            path = directory / f"{name}.png"
            save_image(t, path, bit_depth=16)
            entries.append({"name": name, "sha256": hashlib.sha256(path.read_bytes()).hexdigest()})
        manifest = {"round": self.round, "model_hash": self.model_hash, "images": entries}
        (directory / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
        return directory

    @classmethod
    def load(cls, directory) -> "TargetStore":
        directory = Path(directory)
        manifest = json.loads((directory / "manifest.json").read_text())
        targets, names = [], []
        for entry in manifest["images"]:
            path = directory / f"{entry['name']}.png"
            if hashlib.sha256(path.read_bytes()).hexdigest() != entry["sha256"]:
                raise DataError(f"checksum mismatch for {path}")
            targets.append(load_image(path))
            names.append(entry["name"])
        return cls(targets, manifest["round"], manifest["model_hash"], names)


# -- image I/O --------------------------------------------------------------------

@dataclass(frozen=True)
class RawHeader:
    width: int
    height: int
    bayer: str = "RGGB"
    black: int = 0
    white: int = 65535

    def to_line(self) -> str:
        return f"{self.width} {self.height} bayer={self.bayer} black={self.black} white={self.white}\n"


def _quantize(img: np.ndarray, bit_depth: int) -> np.ndarray:
    if bit_depth not in (8, 16):
        raise DataError(f"bit depth must be 8 or 16, got {bit_depth}")
    maxval = 255 if bit_depth == 8 else 65535
    q = np.rint(np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0) * maxval)
    return q.astype(np.uint8 if bit_depth == 8 else np.uint16)


def _read_netpbm(data: bytes, path) -> np.ndarray:
    # header: magic, width, height, maxval separated by whitespace/comments
    tokens, pos = [], 0
    while len(tokens) < 4:
        m = re.compile(rb"\s*(#[^\n]*\n\s*)*(\S+)").match(data, pos)
        if m is None:
            raise DataError(f"{path}: truncated netpbm header")
        tokens.append(m.group(2))
        pos = m.end()
    magic = tokens[0]
    if magic not in (b"P5", b"P6"):
        raise DataError(f"{path}: unsupported netpbm type {magic!r}")
    w, h, maxval = (int(t) for t in tokens[1:])
    pos += 1  # single whitespace byte after maxval
    channels = 1 if magic == b"P5" else 3
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    count = w * h * channels
    payload = data[pos:pos + count * dtype.itemsize]
    if len(payload) != count * dtype.itemsize:
        raise DataError(f"{path}: payload has {len(payload)} bytes, header implies {count * dtype.itemsize}")
    arr = np.frombuffer(payload, dtype=dtype).reshape(h, w, channels)
    return arr.astype(np.float64) / maxval


def _write_netpbm(img: np.ndarray, path: Path, bit_depth: int) -> None:
    q = _quantize(img, bit_depth)
    channels = q.shape[2]
    if channels not in (1, 3):
        raise DataError("netpbm supports 1 or 3 channels")
    magic = "P5" if channels == 1 else "P6"
    maxval = 255 if bit_depth == 8 else 65535
    header = f"{magic}\n{q.shape[1]} {q.shape[0]}\n{maxval}\n".encode("ascii")
    body = q.astype(">u2").tobytes() if bit_depth == 16 else q.tobytes()
    path.write_bytes(header + body)


def pack_bayer(plane: np.ndarray) -> np.ndarray:
    """RGGB mosaic (H x W) to half-resolution planes (H/2 x W/2 x 4: R, G1, G2, B)."""
    return np.stack([plane[0::2, 0::2], plane[0::2, 1::2], plane[1::2, 0::2], plane[1::2, 1::2]], axis=-1)


def unpack_bayer(packed: np.ndarray) -> np.ndarray:
    h, w, _ = packed.shape
    plane = np.empty((2 * h, 2 * w), dtype=packed.dtype)
    plane[0::2, 0::2] = packed[..., 0]
    plane[0::2, 1::2] = packed[..., 1]
    plane[1::2, 0::2] = packed[..., 2]
    plane[1::2, 1::2] = packed[..., 3]
    return plane


def read_raw(path) -> tuple[np.ndarray, RawHeader]:
    """Load a packed-Bayer raw file, normalized by (white - black) after black subtraction."""
    path = Path(path)
    data = path.read_bytes()
    nl = data.find(b"\n")
    if nl < 0:
        raise DataError(f"{path}: missing raw header line")
    fields = data[:nl].decode("ascii", errors="replace").split()
    try:
        w, h = int(fields[0]), int(fields[1])
        opts = dict(f.split("=", 1) for f in fields[2:])
        header = RawHeader(w, h, opts.get("bayer", "RGGB"), int(opts.get("black", 0)), int(opts.get("white", 65535)))
    except (IndexError, ValueError) as exc:
        raise DataError(f"{path}: malformed raw header {data[:nl]!r}") from exc
    if header.bayer.upper() != "RGGB":
        raise DataError(f"{path}: only RGGB mosaics are supported, got {header.bayer}")
    if header.white <= header.black:
        raise DataError(f"{path}: white level must exceed black level")
    if w % 2 or h % 2:
        raise DataError(f"{path}: mosaic extents must be even")
    payload = data[nl + 1:]
    if len(payload) != 2 * w * h:
        raise DataError(f"{path}: payload has {len(payload)} bytes, header implies {2 * w * h}")
    plane = np.frombuffer(payload, dtype="<u2").reshape(h, w).astype(np.float64)
    plane = np.clip((plane - header.black) / (header.white - header.black), 0.0, 1.0)
    return pack_bayer(plane).astype(np.float32), header


def write_raw(packed: np.ndarray, header: RawHeader, path) -> None:
    plane = unpack_bayer(np.clip(np.asarray(packed, dtype=np.float64), 0.0, 1.0))
    if plane.shape != (header.height, header.width):
        raise DataError(f"packed image implies {plane.shape[::-1]}, header says {header.width}x{header.height}")
    values = np.rint(plane * (header.white - header.black) + header.black).astype("<u2")
    Path(path).write_bytes(header.to_line().encode("ascii") + values.tobytes())


def load_image(path) -> np.ndarray:
    """Read PNG, PGM/PPM (8 or 16 bit) or packed raw into a float32 H x W x C array."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"no such image: {path}")
    ext = path.suffix.lower()
    if ext == ".raw":
        return read_raw(path)[0]
    if ext in (".pgm", ".ppm"):
        return _read_netpbm(path.read_bytes(), path).astype(np.float32)
    if ext == ".png":
        import cv2

        arr = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
        if arr is None:
            raise DataError(f"{path}: unreadable PNG")
        if arr.dtype == np.uint8:
            scale = 255.0
        elif arr.dtype == np.uint16:
            scale = 65535.0
        else:
            raise DataError(f"{path}: unsupported sample type {arr.dtype}")
        if arr.ndim == 2:
            arr = arr[..., None]
        elif arr.shape[2] == 3:
            arr = arr[..., ::-1]
        elif arr.shape[2] == 4:
            arr = arr[..., [2, 1, 0, 3]]
        return (arr.astype(np.float64) / scale).astype(np.float32)
    raise DataError(f"unsupported image format: {path.suffix}")


def save_image(img: np.ndarray, path, bit_depth: int = 8) -> Path:
    """Clamp to [0, 1], quantize and write. ``.raw`` needs :func:`write_raw`."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    img = np.asarray(img)
    if img.ndim == 2:
        img = img[..., None]
    ext = path.suffix.lower()
    if ext in (".pgm", ".ppm"):
        _write_netpbm(img, path, bit_depth)
    elif ext == ".png":
        import cv2

        q = _quantize(img, bit_depth)
        if q.shape[2] == 3:
            q = q[..., ::-1]
        elif q.shape[2] == 4:
            q = q[..., [2, 1, 0, 3]]
        elif q.shape[2] != 1:
            raise DataError(f"PNG supports 1, 3 or 4 channels, got {q.shape[2]}")
        if not cv2.imwrite(str(path), np.ascontiguousarray(q)):
            raise DataError(f"failed to write {path}")
    elif ext == ".raw":
        raise DataError("raw export needs a RawHeader; use write_raw")
    else:
        raise DataError(f"unsupported image format: {path.suffix}")
    return path


def list_images(directory) -> list[Path]:
    directory = Path(directory)
    if not directory.is_dir():
        raise DataError(f"data directory not found: {directory}")
    return sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_EXTENSIONS)


def load_dir(directory, cls=NoisyImages) -> ImageSet:
    paths = list_images(directory)
    if not paths:
        raise DataError(f"no images in {directory}")
    return cls([load_image(p) for p in paths], [p.stem for p in paths])


def load_test_pairs(directory) -> TestPairs:
    """Read ``<dir>/noisy`` and ``<dir>/clean``, matched by file stem."""
    directory = Path(directory)
    noisy = load_dir(directory / "noisy", NoisyImages)
    clean = load_dir(directory / "clean", CleanImages)
    if noisy.names != clean.names:
        raise DataError(f"{directory}: noisy and clean scene names differ")
    return TestPairs(noisy, clean)


# -- patches --------------------------------------------------------------------

def sample_corners(shapes: Sequence[tuple[int, ...]], patch: int, count: int, rng: RngStream) -> list[tuple[int, int, int]]:
    """``count`` (image index, top, left) triples, uniform over images and positions."""
    eligible = [i for i, s in enumerate(shapes) if s[0] >= patch and s[1] >= patch]
    if not eligible:
        raise ShapeError(f"patch size {patch} exceeds every image")
    picks = rng.integers(0, len(eligible), size=count)
    u = rng.random((count, 2))
    corners = []
    for k, e in enumerate(picks):
        i = eligible[int(e)]
        h, w = shapes[i][:2]
        top = int(u[k, 0] * (h - patch + 1))
        left = int(u[k, 1] * (w - patch + 1))
        corners.append((i, top, left))
    return corners


def crop(images: Sequence[np.ndarray], corners, patch: int) -> list[np.ndarray]:
    return [images[i][t:t + patch, l:l + patch] for i, t, l in corners]


def extract_patches(images: Sequence[np.ndarray], patch: int, count: int, rng: RngStream, align: int = 1) -> list[np.ndarray]:
    """Uniformly placed square patches; ``patch`` must be a multiple of ``align``."""
    if patch % align:
        raise ShapeError(f"patch size {patch} is not a multiple of {align}")
    corners = sample_corners([im.shape for im in images], patch, count, rng)
    return crop(images, corners, patch)


# -- dataset construction ------------------------------------------------------------

def make_noisier_noisy(targets: Sequence[np.ndarray], spec: NoiseSpec, rng: RngStream) -> PairSet:
    """Pairs (t_i + n_i, t_i) with a fresh level and noise draw per target."""
    inputs, levels = [], []
    for i, t in enumerate(targets):
        r = rng.child(i)
        level = spec.sample_level(r)
        inputs.append(spec.apply(t, level, r))
        levels.append(level)
    return PairSet(inputs, list(targets), levels)


def _align_up(n: int, a: int) -> int:
    return -(-n // a) * a


def denoise_full(model: DenoiserModel, images: Sequence[np.ndarray], tile: int = 256,
                 overlap: int = 16, batch_size: int = 32) -> list[np.ndarray]:
    """Whole-image inference via reflect-padded tiles whose centers are kept."""
    align = model.config.alignment
    out = [np.empty_like(np.asarray(im, dtype=np.float32)) for im in images]
    jobs: dict[tuple[int, int], list] = {}
    for idx, im in enumerate(images):
        h, w = im.shape[:2]
        th = min(_align_up(tile, align), _align_up(h + 2 * overlap, align))
        tw = min(_align_up(tile, align), _align_up(w + 2 * overlap, align))
        sh, sw = th - 2 * overlap, tw - 2 * overlap
        ny, nx = math.ceil(h / sh), math.ceil(w / sw)
        pad_b = ny * sh + 2 * overlap - h - overlap
        pad_r = nx * sw + 2 * overlap - w - overlap
        padded = np.pad(im, ((overlap, pad_b), (overlap, pad_r), (0, 0)), mode="reflect")
        for iy in range(ny):
            for ix in range(nx):
                y0, x0 = iy * sh, ix * sw
                jobs.setdefault((th, tw), []).append((idx, y0, x0, sh, sw, padded[y0:y0 + th, x0:x0 + tw]))
    for (th, tw), items in jobs.items():
        for start in range(0, len(items), batch_size):
            chunk = items[start:start + batch_size]
            results = denoise(model, [c[5] for c in chunk])
            for (idx, y0, x0, sh, sw, _), res in zip(chunk, results):
                h, w = out[idx].shape[:2]
                hh, ww = min(sh, h - y0), min(sw, w - x0)
                out[idx][y0:y0 + hh, x0:x0 + ww] = res[overlap:overlap + hh, overlap:overlap + ww]
    return out


def refine_targets(model: DenoiserModel, noisy: NoisyImages, store: TargetStore,
                   batch_size: int = 32) -> TargetStore:
    """New store holding F(x_i) for the original noisy images, round + 1."""
    require_training_set(noisy)
    if len(noisy) != len(store):
        raise ValueError("noisy set and target store differ in size")
    if noisy.channels != model.config.in_channels:
        raise ShapeError(f"model expects {model.config.in_channels} channels, images have {noisy.channels}")
    refined = denoise_full(model, list(noisy), batch_size=batch_size)
    return TargetStore(refined, store.round + 1, model.digest(), list(noisy.names))


# -- biased targets -----------------------------------------------------------------

def gaussian_kernel1d(sigma: float) -> np.ndarray:
    """Truncated Gaussian of radius ceil(3 sigma), normalized to sum 1."""
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    if sigma == 0:
        return np.ones(1)
    radius = int(math.ceil(3.0 * sigma))
    ax = np.arange(-radius, radius + 1, dtype=np.float64)
    g = np.exp(-(ax**2) / (2.0 * sigma * sigma))
    return g / g.sum()


def gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur with reflect (edge-excluded) padding; sigma in pixels."""
    img = np.asarray(img)
    if sigma == 0:
        return img.copy()
    g = gaussian_kernel1d(sigma)
    out = ndimage.correlate1d(img.astype(np.float64), g, axis=0, mode="mirror")
    out = ndimage.correlate1d(out, g, axis=1, mode="mirror")
    return out.astype(img.dtype)


def make_biased_targets(clean: CleanImages, bias: str, sigma: float, rng: RngStream) -> BiasedTargets:
    """Degrade clean images: additive Gaussian noise (sigma / 255) or a Gaussian blur (sigma px)."""
    if not isinstance(clean, CleanImages):
        raise TypeError("biased targets are synthesized from CleanImages")
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    out = []
    for i, y in enumerate(clean):
        if bias == "gaussian_noise":
            r = rng.child(i)
            out.append(y + (sigma / 255.0) * r.normal(y.shape).astype(y.dtype) if sigma else y.copy())
        elif bias == "gaussian_blur":
            out.append(gaussian_blur(y, sigma))
        else:
            raise ValueError(f"unknown bias type {bias!r}")
    return BiasedTargets(out, clean.names, bias, sigma)


# -- synthetic corpus ---------------------------------------------------------------

def _spectral_field(size: int, beta: float, rng: np.random.Generator) -> np.ndarray:
    fy = np.fft.fftfreq(size)[:, None]
    fx = np.fft.rfftfreq(size)[None, :]
    f = np.sqrt(fx**2 + fy**2)
    f[0, 0] = 1.0
    amp = f ** (-beta / 2.0)
    amp[0, 0] = 0.0
    phase = rng.standard_normal(amp.shape) + 1j * rng.standard_normal(amp.shape)
    field_ = np.fft.irfft2(amp * phase, s=(size, size))
    field_ -= field_.min()
    return field_ / max(field_.max(), 1e-12)


def synthetic_image(size: int, rng: np.random.Generator) -> np.ndarray:
    """Procedural grayscale scene: 1/f background, flat shapes, gratings, fine texture."""
    img = 0.15 + 0.7 * _spectral_field(size, rng.uniform(2.5, 3.5), rng)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    for _ in range(rng.integers(3, 8)):
        kind = rng.integers(0, 3)
        cy, cx = rng.uniform(0, size, 2)
        value = rng.uniform(0.05, 0.95)
        if kind == 0:
            ry, rx = rng.uniform(size / 16, size / 4, 2)
            theta = rng.uniform(0, np.pi)
            dy, dx = yy - cy, xx - cx
            u = dx * np.cos(theta) + dy * np.sin(theta)
            v = -dx * np.sin(theta) + dy * np.cos(theta)
            mask = (u / rx) ** 2 + (v / ry) ** 2 <= 1.0
        elif kind == 1:
            hy, hx = rng.uniform(size / 16, size / 4, 2)
            mask = (np.abs(yy - cy) <= hy) & (np.abs(xx - cx) <= hx)
        else:
            r = rng.uniform(size / 10, size / 4)
            freq = rng.uniform(0.08, 0.3)
            theta = rng.uniform(0, np.pi)
            grating = 0.5 + 0.5 * np.sin(freq * 2 * np.pi * (xx * np.cos(theta) + yy * np.sin(theta)))
            mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
            value = 0.2 + 0.6 * grating
        alpha = rng.uniform(0.6, 1.0)
        img = np.where(mask, (1 - alpha) * img + alpha * value, img)
    img += rng.uniform(0.02, 0.08) * (_spectral_field(size, 1.0, rng) - 0.5)
    img = np.clip(img, 0.0, 1.0)
    return (np.rint(img * 255.0) / 255.0).astype(np.float32)[..., None]


def synthetic_corpus(count: int = 80, size: int = 128, seed: int = 0) -> CleanImages:
    rng = np.random.default_rng(seed)
    return CleanImages([synthetic_image(size, rng) for _ in range(count)], [f"scene{i:03d}" for i in range(count)])


def split_train_test(images: ImageSet, train_fraction: float = 0.7, seed: int = 0) -> tuple[ImageSet, ImageSet]:
    """Random 70/30-style split preserving the set type."""
    order = np.random.default_rng(seed).permutation(len(images))
    cut = int(round(train_fraction * len(images)))
    cls = type(images)
    tr, te = sorted(order[:cut]), sorted(order[cut:])
    return (
        cls([images[i] for i in tr], [images.names[i] for i in tr]),
        cls([images[i] for i in te], [images.names[i] for i in te]),
    )


def corrupt(clean: CleanImages, spec: NoiseSpec, rng: RngStream, level: float | None = None) -> NoisyImages:
    """Synthesize the noisy observations x_i = y_i + n_i of a clean set."""
    out = []
    for i, y in enumerate(clean):
        r = rng.child(i)
        lv = spec.sample_level(r) if level is None else level
        out.append(spec.apply(y, lv, r))
    return NoisyImages(out, clean.names)
