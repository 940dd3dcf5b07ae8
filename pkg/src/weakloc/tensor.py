"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every model in this package is built from the small op set below. Ops
evaluate eagerly with numpy; when a :class:`Tape` is active and any input
is tracked, the op also records a node holding its inputs, its output and
a backward rule. The backward pass walks the tape once in reverse, which
is a valid topological order because nodes are appended in execution
order.

Image tensors use NCHW layout with row-major (C-order) storage. All
arithmetic is 64-bit.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ArtifactError, ConfigError, EvaluationError, ShapeError, UsageError


class Tensor:
    """A dense n-dimensional float64 array, optionally tracked for gradients.

    ``requires_grad`` marks leaves (parameters, probe points) that should
    receive gradients. Op outputs are marked tracked automatically while a
    tape is active. ``grad`` stays ``None`` until a backward pass reaches
    the tensor; repeated backward passes accumulate additively.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self) -> str:
        return f"Tensor(shape={tuple(self.shape)}, requires_grad={self.requires_grad})"


BackwardRule = Callable[[np.ndarray], Iterable[tuple[Tensor, np.ndarray]]]


class _TapeNode:
    __slots__ = ("inputs", "output", "backward_rule")

    def __init__(self, inputs: tuple[Tensor, ...], output: Tensor, backward_rule: BackwardRule):
        self.inputs = inputs
        self.output = output
        self.backward_rule = backward_rule


class Tape:
    """Execution-ordered record of differentiable ops.

    Use as a context manager around a forward pass; ops executed inside
    record themselves. Independent tapes are isolated, so separate forward
    passes may run concurrently on separate tapes.
    """

    def __init__(self):
        self.nodes: list[_TapeNode] = []
        self._produced: set[int] = set()

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> bool:
        _TAPE_STACK.pop()
        return False

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, inputs: tuple[Tensor, ...], output: Tensor, backward_rule: BackwardRule) -> None:
        self.nodes.append(_TapeNode(inputs, output, backward_rule))
        self._produced.add(id(output))

    def produced(self, t: Tensor) -> bool:
        return id(t) in self._produced

    def backward(self, loss: Tensor) -> None:
        backward(loss, self)


_TAPE_STACK: list[Tape] = []


def active_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def record_op(inputs: tuple[Tensor, ...], out_data: np.ndarray, backward_rule: BackwardRule) -> Tensor:
    """Build an op output, recording a tape node when gradients can flow.

    ``backward_rule(grad_out)`` must yield ``(input_tensor, grad_array)``
    pairs; it is only consulted for inputs with ``requires_grad``.
    """
    tape = active_tape()
    tracked = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=tracked)
    if tracked:
        tape.record(inputs, out, backward_rule)
    return out


def backward(loss: Tensor, tape: Tape) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every tracked leaf.

    The sweep visits each tape node at most once, in reverse execution
    order. Calling twice without ``zero_grad`` doubles the gradients.
    """
    if loss.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    if not tape.produced(loss):
        raise UsageError("loss tensor was not produced on this tape")
    flows: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    holders: dict[int, Tensor] = {id(loss): loss}
    for node in reversed(tape.nodes):
        g_out = flows.pop(id(node.output), None)
        if g_out is None:
            continue
        holders.pop(id(node.output), None)
        for tensor, grad in node.backward_rule(g_out):
            if not tensor.requires_grad:
                continue
            key = id(tensor)
            if key in flows:
                flows[key] = flows[key] + grad
            else:
                flows[key] = grad
                holders[key] = tensor
    for key, grad in flows.items():
        t = holders[key]
        g = np.asarray(grad, dtype=np.float64).reshape(t.data.shape)
        t.grad = g.copy() if t.grad is None else t.grad + g


# ---------------------------------------------------------------------------
# elementwise and linear-algebra ops


def _require_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: operand shapes differ, {tuple(a.shape)} vs {tuple(b.shape)}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape(a, b, "add")
    return record_op((a, b), a.data + b.data, lambda g: ((a, g), (b, g)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product."""
    _require_same_shape(a, b, "mul")
    return record_op((a, b), a.data * b.data, lambda g: ((a, g * b.data), (b, g * a.data)))


def scale(a: Tensor, factor: float) -> Tensor:
    f = float(factor)
    return record_op((a,), a.data * f, lambda g: ((a, g * f),))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {tuple(a.shape)} and {tuple(b.shape)}")
    return record_op(
        (a, b),
        a.data @ b.data,
        lambda g: ((a, g @ b.data.T), (b, a.data.T @ g)),
    )


def linear(x: Tensor, weights: Tensor, bias: Tensor) -> Tensor:
    """Affine map of a batch of row vectors: x @ weights + bias."""
    if x.ndim != 2 or weights.ndim != 2:
        raise ShapeError(f"linear: expected 2-d input and weights, got {tuple(x.shape)} and {tuple(weights.shape)}")
    if x.shape[1] != weights.shape[0]:
        raise ShapeError(
            f"linear: input feature axis {x.shape[1]} does not match weight rows {weights.shape[0]}"
        )
    if bias.shape != (weights.shape[1],):
        raise ShapeError(f"linear: bias shape {tuple(bias.shape)} must be ({weights.shape[1]},)")
    out = x.data @ weights.data + bias.data

    def rule(g):
        return ((x, g @ weights.data.T), (weights, x.data.T @ g), (bias, g.sum(axis=0)))

    return record_op((x, weights, bias), out, rule)


def relu(x: Tensor) -> Tensor:
    # subgradient at 0 is taken as 0
    mask = x.data > 0.0
    return record_op((x,), np.where(mask, x.data, 0.0), lambda g: ((x, g * mask),))


def log(x: Tensor) -> Tensor:
    return record_op((x,), np.log(x.data), lambda g: ((x, g / x.data),))


def clamp_min(x: Tensor, floor: float) -> Tensor:
    """Elementwise max(x, floor); gradient is blocked where the clamp binds."""
    f = float(floor)
    mask = x.data > f
    return record_op((x,), np.where(mask, x.data, f), lambda g: ((x, g * mask),))


def reshape(x: Tensor, shape) -> Tensor:
    orig = x.data.shape
    return record_op((x,), x.data.reshape(shape), lambda g: ((x, g.reshape(orig)),))


def permute(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return record_op((x,), x.data.transpose(axes), lambda g: ((x, g.transpose(inverse)),))


def tsum(x: Tensor) -> Tensor:
    def rule(g):
        return ((x, np.full(x.shape, float(np.asarray(g).reshape(())))),)

    return record_op((x,), np.asarray(x.data.sum()), rule)


def tmean(x: Tensor) -> Tensor:
    n = x.size

    def rule(g):
        return ((x, np.full(x.shape, float(np.asarray(g).reshape(())) / n)),)

    return record_op((x,), np.asarray(x.data.mean()), rule)


def softmax(logits: Tensor) -> Tensor:
    """Row-wise softmax of an N x C matrix, computed with max subtraction."""
    if logits.ndim != 2:
        raise ShapeError(f"softmax: expected an N x C matrix, got shape {tuple(logits.shape)}")
    if logits.shape[1] < 2:
        raise ShapeError(f"softmax: needs at least 2 classes, got {logits.shape[1]}")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    probs = e / e.sum(axis=1, keepdims=True)

    def rule(g):
        inner = (g * probs).sum(axis=1, keepdims=True)
        return ((logits, probs * (g - inner)),)

    return record_op((logits,), probs, rule)


# ---------------------------------------------------------------------------
# convolution


def conv2d(x: Tensor, kernels: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-d cross-correlation of an NCHW batch with OIKK kernels."""
    if x.ndim != 4:
        raise ShapeError(f"conv2d: input must be NCHW, got shape {tuple(x.shape)}")
    if kernels.ndim != 4:
        raise ShapeError(f"conv2d: kernels must be OIKK, got shape {tuple(kernels.shape)}")
    n, c_in, h, w = x.shape
    c_out, k_in, kh, kw = kernels.shape
    if k_in != c_in:
        raise ShapeError(
            f"conv2d: input has {c_in} channels (axis 1) but kernels expect {k_in} (axis 1)"
        )
    stride = int(stride)
    padding = int(padding)
    if stride < 1:
        raise ConfigError(f"conv2d: stride must be >= 1, got {stride}")
    if padding < 0:
        raise ConfigError(f"conv2d: padding must be >= 0, got {padding}")
    h_out = (h + 2 * padding - kh) // stride + 1
    w_out = (w + 2 * padding - kw) // stride + 1
    if h_out < 1 or w_out < 1:
        raise ShapeError(
            f"conv2d: output extent {h_out}x{w_out} < 1 for input {h}x{w} (axes 2,3), "
            f"kernel {kh}x{kw}, stride {stride}, padding {padding}"
        )
    if padding:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x.data
    windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    out = np.einsum("nchwkl,ockl->nohw", windows, kernels.data, optimize=True)

    def rule(g):
        pairs = []
        if kernels.requires_grad:
            gk = np.einsum("nchwkl,nohw->ockl", windows, g, optimize=True)
            pairs.append((kernels, gk))
        if x.requires_grad:
            gw = np.einsum("nohw,ockl->nchwkl", g, kernels.data, optimize=True)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + h_out * stride : stride, j : j + w_out * stride : stride] += gw[..., i, j]
            gx = gxp[:, :, padding : padding + h, padding : padding + w] if padding else gxp
            pairs.append((x, gx))
        return pairs

    return record_op((x, kernels), out, rule)


def add_channel_bias(x: Tensor, bias: Tensor) -> Tensor:
    """Add a per-channel bias to an NCHW tensor."""
    if x.ndim != 4 or bias.shape != (x.shape[1],):
        raise ShapeError(
            f"add_channel_bias: input {tuple(x.shape)} needs a bias of shape ({x.shape[1] if x.ndim == 4 else '?'},), "
            f"got {tuple(bias.shape)}"
        )
    out = x.data + bias.data[None, :, None, None]
    return record_op((x, bias), out, lambda g: ((x, g), (bias, g.sum(axis=(0, 2, 3)))))


# ---------------------------------------------------------------------------
# global pooling


class PoolKind(str, Enum):
    AVG = "avg"
    MAX = "max"
    LSE = "lse"


@dataclass(frozen=True)
class PoolingConfig:
    """Spatial reduction choice for pooling heads.

    ``lse_sharpness`` interpolates log-sum-exp pooling between average
    (small values) and maximum (large values); it only matters for LSE but
    must always be positive.
    """

    kind: PoolKind
    lse_sharpness: float = 10.0

    def __post_init__(self):
        object.__setattr__(self, "kind", PoolKind(self.kind))
        if not (self.lse_sharpness > 0.0):
            raise ConfigError(f"LSE sharpness must be positive, got {self.lse_sharpness}")


def global_pool_nchw(x: Tensor, config: PoolingConfig) -> Tensor:
    """Pool an (N, D, S, S) batch of maps down to per-channel scores (N, D)."""
    if x.ndim != 4:
        raise ShapeError(f"global_pool: expected NCHW maps, got shape {tuple(x.shape)}")
    n, d, s1, s2 = x.shape
    cells = s1 * s2
    if config.kind == PoolKind.AVG:
        out = x.data.mean(axis=(2, 3))

        def rule(g):
            return ((x, np.broadcast_to(g[:, :, None, None] / cells, x.shape).copy()),)

    elif config.kind == PoolKind.MAX:
        flat = x.data.reshape(n, d, cells)
        idx = flat.argmax(axis=2)
        out = np.take_along_axis(flat, idx[:, :, None], axis=2)[:, :, 0]

        def rule(g):
            gflat = np.zeros((n, d, cells))
            np.put_along_axis(gflat, idx[:, :, None], g[:, :, None], axis=2)
            return ((x, gflat.reshape(x.shape)),)

    else:  # LSE
        r = config.lse_sharpness
        m = x.data.max(axis=(2, 3))
        e = np.exp(r * (x.data - m[:, :, None, None]))
        mean_e = e.mean(axis=(2, 3))
        out = m + np.log(mean_e) / r

        def rule(g):
            weights = e / e.sum(axis=(2, 3), keepdims=True)
            return ((x, g[:, :, None, None] * weights),)

    return record_op((x,), out, rule)


def global_pool(maps: Tensor, config: PoolingConfig) -> Tensor:
    """Pool a single (S, S, D) channels-last map stack to (1, 1, D)."""
    if maps.ndim != 3:
        raise ShapeError(f"global_pool: expected an S x S x D map stack, got shape {tuple(maps.shape)}")
    s1, s2, d = maps.shape
    nchw = reshape(permute(maps, (2, 0, 1)), (1, d, s1, s2))
    pooled = global_pool_nchw(nchw, config)
    return reshape(pooled, (1, 1, d))


# ---------------------------------------------------------------------------
# gradient checking


def grad_check(fn: Callable[[Tensor], Tensor], point: Tensor, h: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``fn`` must map a tensor to a scalar tensor and be finite near
    ``point``. The relative error uses max(1, |analytic|, |numeric|) as
    denominator, coordinate by coordinate.
    """
    base = Tensor(np.array(point.data, copy=True), requires_grad=True)
    with Tape() as tape:
        out = fn(base)
        if out.size != 1:
            raise UsageError(f"grad_check: fn must be scalar-valued, got shape {tuple(out.shape)}")
        if not np.isfinite(out.data).all():
            raise EvaluationError("grad_check: fn is non-finite at the probe point")
        backward(out, tape)
    analytic = base.grad if base.grad is not None else np.zeros_like(base.data)
    analytic = analytic.reshape(-1)

    flat = base.data.reshape(-1)
    numeric = np.zeros_like(flat)
    for i in range(flat.size):
        vals = []
        for sign in (+1.0, -1.0):
            probe = flat.copy()
            probe[i] += sign * h
            y = fn(Tensor(probe.reshape(base.data.shape)))
            v = float(np.asarray(y.data).reshape(()))
            if not math.isfinite(v):
                raise EvaluationError(f"grad_check: fn is non-finite at perturbed coordinate {i}")
            vals.append(v)
        numeric[i] = (vals[0] - vals[1]) / (2.0 * h)

    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float(np.max(np.abs(analytic - numeric) / denom)) if flat.size else 0.0


# ---------------------------------------------------------------------------
# binary tensor files

_MAGIC = b"WLTN"
_VERSION = 1


def save_tensor(t: Tensor | np.ndarray, path) -> None:
    """Write a tensor file: magic, version byte, u8 rank, u32 LE extents, f64 LE payload."""
    arr = np.ascontiguousarray(np.asarray(t.data if isinstance(t, Tensor) else t, dtype=np.float64))
    if arr.ndim > 255:
        raise UsageError(f"tensor rank {arr.ndim} does not fit the file format")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(bytes([_VERSION, arr.ndim]))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(arr.astype("<f8").tobytes(order="C"))


def load_tensor(path) -> np.ndarray:
    """Read a tensor file written by :func:`save_tensor`."""
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise ArtifactError(f"cannot read tensor file {path}: {exc}") from exc
    if len(blob) < 6 or blob[:4] != _MAGIC:
        raise ArtifactError(f"not a tensor file: {path}")
    version, rank = blob[4], blob[5]
    if version != _VERSION:
        raise ArtifactError(f"unsupported tensor file version {version} in {path}")
    header_end = 6 + 4 * rank
    if len(blob) < header_end:
        raise ArtifactError(f"truncated tensor header in {path}")
    dims = struct.unpack(f"<{rank}I", blob[6:header_end])
    count = int(np.prod(dims)) if rank else 1
    payload = blob[header_end:]
    if len(payload) != 8 * count:
        raise ArtifactError(f"truncated tensor payload in {path} (expected {8 * count} bytes, got {len(payload)})")
    return np.frombuffer(payload, dtype="<f8").reshape(dims).astype(np.float64)
