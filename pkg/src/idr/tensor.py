"""Minimal reverse-mode autodiff over NCHW arrays.

Only the layer set the denoiser needs is provided: same-padded conv2d,
leaky ReLU, 2x2 max pooling, nearest 2x upsampling, channel concatenation
and the L1 loss. Adam and a finite-difference gradient checker live here
as well, together with the binary checkpoint container.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

try:  # optional fast convolution kernels
    import torch
    import torch.nn.functional as _F

    torch.set_num_threads(1)
except ImportError:  # pragma: no cover - exercised only without torch
    torch = None


class ShapeError(ValueError):
    """Raised when operand extents are incompatible."""


class NumericError(ArithmeticError):
    """Raised when a NaN or Inf appears in values or gradients."""


def _check_finite(arr: np.ndarray, what: str) -> None:
    # a single reduction propagates any NaN/Inf into the total
    if not np.isfinite(arr.sum()):
        if not np.isfinite(arr).all():
            raise NumericError(f"non-finite values produced by {what}")


def channels_last(arr: np.ndarray) -> np.ndarray:
    """NCHW-shaped view whose memory is laid out as NHWC (no copy if already so)."""
    return np.ascontiguousarray(arr.transpose(0, 2, 3, 1)).transpose(0, 3, 1, 2)


class Tensor:
    """Array with an optional gradient and a link to the op that made it."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate gradients into every reachable leaf that requires them."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without a seed needs a scalar output")
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg


def make_op(data: np.ndarray, parents: Sequence[Tensor], backward, what: str) -> Tensor:
    """Wrap an op result; the graph edge is kept only when a parent needs grads."""
    _check_finite(data, what)
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# -- convolution kernels ---------------------------------------------------

_CONV_BACKEND = "auto"


def set_conv_backend(name: str) -> None:
    """Select ``"numpy"``, ``"torch"`` or ``"auto"`` (torch when importable)."""
    global _CONV_BACKEND
    if name not in ("auto", "numpy", "torch"):
        raise ValueError(f"unknown conv backend {name!r}")
    if name == "torch" and torch is None:
        raise RuntimeError("torch is not installed")
    _CONV_BACKEND = name


def get_conv_backend() -> str:
    if _CONV_BACKEND == "auto":
        return "torch" if torch is not None else "numpy"
    return _CONV_BACKEND


def _im2col(xp: np.ndarray, k: int, h: int, w: int) -> np.ndarray:
    # xp: (N, C, H+k-1, W+k-1) -> (C*k*k, N*H*W)
    n, c = xp.shape[:2]
    cols = np.empty((c, k, k, n, h, w), dtype=xp.dtype)
    xt = xp.transpose(1, 0, 2, 3)
    for dy in range(k):
        for dx in range(k):
            cols[:, dy, dx] = xt[:, :, dy:dy + h, dx:dx + w]
    return cols.reshape(c * k * k, n * h * w)


def _conv_forward_numpy(x, kernel, bias):
    n, c, h, w = x.shape
    o, _, k, _ = kernel.shape
    p = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    cols = _im2col(xp, k, h, w)
    out = kernel.reshape(o, -1) @ cols
    out = out.reshape(o, n, h, w).transpose(1, 0, 2, 3)
    if bias is not None:
        out = out + bias.reshape(1, o, 1, 1)
    return np.ascontiguousarray(out)


def _conv_backward_numpy(g, x, kernel):
    n, c, h, w = x.shape
    o, _, k, _ = kernel.shape
    p = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    cols = _im2col(xp, k, h, w)
    gm = g.transpose(1, 0, 2, 3).reshape(o, -1)
    dkernel = (gm @ cols.T).reshape(kernel.shape)
    dcols = (kernel.reshape(o, -1).T @ gm).reshape(c, k, k, n, h, w)
    dxp = np.zeros((c, n, h + 2 * p, w + 2 * p), dtype=x.dtype)
    for dy in range(k):
        for dx in range(k):
            dxp[:, :, dy:dy + h, dx:dx + w] += dcols[:, dy, dx]
    dx_ = np.ascontiguousarray(dxp[:, :, p:p + h, p:p + w].transpose(1, 0, 2, 3))
    dbias = g.sum(axis=(0, 2, 3))
    return dx_, dkernel, dbias


def _torch_view(arr: np.ndarray):
    return torch.from_numpy(channels_last(arr))


def _conv_forward_torch(x, kernel, bias):
    k = kernel.shape[-1]
    kt = torch.from_numpy(np.ascontiguousarray(kernel))
    bt = None if bias is None else torch.from_numpy(np.ascontiguousarray(bias))
    with torch.no_grad():
        out = _F.conv2d(_torch_view(x), kt, bt, padding=k // 2)
    return out.numpy()


def _conv_backward_torch(g, x, kernel, need_input=True):
    k = kernel.shape[-1]
    p = k // 2
    kt = torch.from_numpy(np.ascontiguousarray(kernel))
    with torch.no_grad():
        dx_, dk, db = torch.ops.aten.convolution_backward(
            _torch_view(g), _torch_view(x), kt, [kernel.shape[0]], [1, 1], [p, p], [1, 1],
            False, [0, 0], 1, [need_input, True, True],
        )
    return (None if dx_ is None else dx_.numpy()), np.ascontiguousarray(dk.numpy()), db.numpy()


# -- layers -----------------------------------------------------------------

def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None) -> Tensor:
    """Stride-1 convolution with zero "same" padding (cross-correlation)."""
    x, kernel = _as_tensor(x), _as_tensor(kernel)
    if x.data.ndim != 4:
        raise ShapeError(f"conv2d input must be (N, C, H, W), got {x.shape}")
    if kernel.data.ndim != 4 or kernel.shape[2] != kernel.shape[3] or kernel.shape[2] % 2 == 0:
        raise ShapeError(f"conv2d kernel must be (out, in, k, k) with odd k, got {kernel.shape}")
    if kernel.shape[1] != x.shape[1]:
        raise ShapeError(
            f"conv2d channel mismatch: input has {x.shape[1]} channels, "
            f"kernel expects {kernel.shape[1]}"
        )
    if bias is not None:
        bias = _as_tensor(bias)
        if bias.shape != (kernel.shape[0],):
            raise ShapeError(f"conv2d bias must have shape ({kernel.shape[0]},), got {bias.shape}")
    if x.dtype != kernel.dtype:
        raise ShapeError(f"conv2d dtype mismatch: {x.dtype} vs {kernel.dtype}")

    use_torch = get_conv_backend() == "torch"
    fwd = _conv_forward_torch if use_torch else _conv_forward_numpy
    bwd = _conv_backward_torch if use_torch else _conv_backward_numpy
    out = fwd(x.data, kernel.data, None if bias is None else bias.data)

    def backward(g):
        if use_torch:
            dx_, dk, db = bwd(g, x.data, kernel.data, x.requires_grad)
        else:
            dx_, dk, db = bwd(g, x.data, kernel.data)
        return (dx_, dk) if bias is None else (dx_, dk, db)

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return make_op(out, parents, backward, "conv2d")


def leaky_relu(x: Tensor, slope: float = 0.1) -> Tensor:
    if not 0.0 <= slope < 1.0:
        raise ValueError(f"leaky slope must lie in [0, 1), got {slope}")
    x = _as_tensor(x)
    s = x.data.dtype.type(slope)
    # ufuncs keep the operand memory layout
    factor = np.add(np.multiply(x.data > 0, 1 - s, dtype=x.dtype), s)
    out = x.data * factor

    def backward(g):
        return (g * factor,)

    return make_op(out, (x,), backward, "leaky_relu")


def maxpool2(x: Tensor) -> Tensor:
    """2x2 max pooling; gradient goes to the first maximum in row-major order."""
    x = _as_tensor(x)
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2 needs even spatial extents, got {h}x{w}")
    d = x.data
    quads = (d[:, :, 0::2, 0::2], d[:, :, 0::2, 1::2], d[:, :, 1::2, 0::2], d[:, :, 1::2, 1::2])
    out = np.maximum(np.maximum(quads[0], quads[1]), np.maximum(quads[2], quads[3]))

    def backward(g):
        grad = np.zeros_like(d)
        taken = np.zeros(out.shape, dtype=bool)
        for (oy, ox), q in zip(((0, 0), (0, 1), (1, 0), (1, 1)), quads):
            hit = (q == out) & ~taken
            taken |= hit
            grad[:, :, oy::2, ox::2] = g * hit
        return (grad,)

    return make_op(out, (x,), backward, "maxpool2")


def upsample2(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x upsampling."""
    x = _as_tensor(x)
    n, c, h, w = x.shape
    src = x.data.transpose(0, 2, 3, 1)
    out = np.empty((n, h, 2, w, 2, c), dtype=x.dtype)
    out[...] = src[:, :, None, :, None, :]
    out = out.reshape(n, 2 * h, 2 * w, c).transpose(0, 3, 1, 2)

    def backward(g):
        gs = g.transpose(0, 2, 3, 1).reshape(n, h, 2, w, 2, c)
        return (gs.sum(axis=(2, 4)).transpose(0, 3, 1, 2),)

    return make_op(out, (x,), backward, "upsample2")


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 4 or b.data.ndim != 4:
        raise ShapeError("concat_channels expects (N, C, H, W) operands")
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"concat_channels extent mismatch: {a.shape} vs {b.shape}")
    ca = a.shape[1]
    out = np.concatenate(
        [a.data.transpose(0, 2, 3, 1), b.data.astype(a.dtype, copy=False).transpose(0, 2, 3, 1)],
        axis=-1,
    ).transpose(0, 3, 1, 2)

    def backward(g):
        return g[:, :ca], g[:, ca:]

    return make_op(out, (a, b), backward, "concat_channels")


def l1_loss(pred: Tensor, target) -> Tensor:
    """Mean absolute error; the subgradient at zero difference is zero."""
    pred, target = _as_tensor(pred), _as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"l1_loss shape mismatch: {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    count = diff.size
    out = np.asarray(np.abs(diff).mean(dtype=np.float64), dtype=pred.dtype)

    def backward(g):
        s = np.sign(diff) * (g / count)
        return s, -s

    return make_op(out, (pred, target), backward, "l1_loss")


def mul(a: Tensor, b) -> Tensor:
    """Elementwise product (used by gradient-check fixtures)."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mul shape mismatch: {a.shape} vs {b.shape}")
    out = a.data * b.data

    def backward(g):
        return g * b.data, g * a.data

    return make_op(out, (a, b), backward, "mul")


def total(a: Tensor) -> Tensor:
    """Sum of all elements as a scalar tensor."""
    a = _as_tensor(a)
    out = np.asarray(a.data.sum(), dtype=a.dtype)

    def backward(g):
        return (np.broadcast_to(g, a.shape).copy(),)

    return make_op(out, (a,), backward, "total")


# -- optimizer ----------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], state: AdamState) -> AdamState:
    """Bias-corrected Adam update applied in place to ``params``."""
    if len(params) != len(grads):
        raise ShapeError(f"{len(params)} parameters but {len(grads)} gradients")
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    for i, (p, g) in enumerate(zip(params, grads)):
        if g.shape != p.shape:
            raise ShapeError(f"gradient {i} has shape {g.shape}, parameter has {p.shape}")
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient for parameter {i}")
    state.t += 1
    if state.lr == 0.0:
        # a frozen optimizer only advances its step counter
        return state
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        if not g.any():
            # an all-zero gradient decays the moments but leaves the tensor in place
            continue
        step = (state.lr / c1) * m / (np.sqrt(v / c2) + state.eps)
        p.data -= step.astype(p.dtype, copy=False)
    return state


# -- gradient checking -------------------------------------------------------

def grad_check(fn: Callable[[], Tensor], params: Iterable[Tensor], step: float = 1e-3,
               max_coords: int | None = None, seed: int = 0) -> float:
    """Worst relative error between analytic and central-difference gradients.

    ``fn`` rebuilds the scalar output from the current parameter values.
    The comparison is done elementwise as |a - n| / max(|a|, |n|), with
    pairs that are both below 1e-10 counted as exact. ``max_coords`` limits
    each parameter to a random subset of entries.
    """
    params = list(params)
    for p in params:
        if not p.data.flags.c_contiguous:
            raise ValueError(f"grad_check perturbs in place; {p.name or 'parameter'} is not C-contiguous")
        p.requires_grad = True
        p.grad = None
    out = fn()
    out.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    rng = np.random.default_rng(seed)

    worst = 0.0
    for p, a in zip(params, analytic):
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, max_coords, replace=False))
        num = np.empty(coords.size, dtype=np.float64)
        for i, j in enumerate(coords):
            orig = flat[j]
            flat[j] = orig + step
            fp = float(fn().data)
            flat[j] = orig - step
            fm = float(fn().data)
            flat[j] = orig
            num[i] = (fp - fm) / (2.0 * step)
        a = a.reshape(-1)[coords].astype(np.float64)
        denom = np.maximum(np.abs(a), np.abs(num))
        rel = np.where(denom < 1e-10, 0.0, np.abs(a - num) / np.maximum(denom, 1e-300))
        if rel.size:
            worst = max(worst, float(rel.max()))
    for p in params:
        p.grad = None
        p.requires_grad = False
    return worst


# -- checkpoint container ------------------------------------------------------

MAGIC = b"IDRCKPT\x00"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    """Malformed, truncated or corrupted checkpoint data."""


def encode_tensors(named: Sequence[tuple[str, np.ndarray]], extra: bytes = b"") -> bytes:
    """Serialize named float arrays; ``extra`` is stored as a length-prefixed blob.

    Layout: magic, version u32, count u32, then per tensor the name
    (u32 length + UTF-8), rank u32, extents u32 each and little-endian f32
    values. The extra blob (u32 length + bytes) and a CRC32 of everything
    before it close the file.
    """
    parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(named))]
    for name, arr in named:
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    parts.append(struct.pack("<I", len(extra)))
    parts.append(extra)
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def decode_tensors(blob: bytes) -> tuple[list[tuple[str, np.ndarray]], bytes]:
    if len(blob) < len(MAGIC) or blob[: len(MAGIC)] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    if len(blob) < len(MAGIC) + 12:
        raise CheckpointError("checkpoint truncated")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    pos = len(MAGIC)

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(body):
            raise CheckpointError("checkpoint truncated")
        chunk = body[pos:pos + n]
        pos += n
        return chunk

    version, count = struct.unpack("<II", take(8))
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {FORMAT_VERSION})")
    named = []
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        name = take(nlen).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        size = int(np.prod(shape, dtype=np.int64))
        values = np.frombuffer(take(4 * size), dtype="<f4").reshape(shape).astype(np.float32)
        named.append((name, values))
    (elen,) = struct.unpack("<I", take(4))
    extra = take(elen)
    if pos != len(body):
        raise CheckpointError("trailing bytes in checkpoint")
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise CheckpointError("checkpoint checksum mismatch")
    return named, extra
