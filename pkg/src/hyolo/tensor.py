"""A small reverse-mode autodiff tensor on top of numpy (float64, NCHW).

Broadcasting is deliberately narrow: binary ops accept operands of equal
shape, or one operand holding a single element.  Channel bias broadcasting
lives inside :func:`conv2d`.  Anything else needs an explicit reshape.

Every op checks its output for NaN/Inf and raises :class:`NonFiniteValue`.
"""

from __future__ import annotations

import contextlib
import struct
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from . import _kernels
from .errors import MissingGradient, NonFiniteValue, ShapeMismatch

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Build no graph inside the block (inference, metric passes)."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


def _check_finite(arr: np.ndarray, op: str) -> np.ndarray:
    if not np.isfinite(arr).all():
        raise NonFiniteValue(f"{op} produced a non-finite value")
    return arr


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self._op = "leaf"

    # -- properties -----------------------------------------------------
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
        return float(self.data.reshape(-1)[0]) if self.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    def __len__(self):
        return self.shape[0]

    # -- graph ----------------------------------------------------------
    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into every leaf that requires grad."""
        if grad is None:
            if self.size != 1:
                raise ShapeMismatch("backward() without a seed needs a single-element tensor")
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
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=np.float64)}
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
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg

    def zero_grad(self) -> None:
        self.grad = None

    # -- operator sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __getitem__(self, index):
        return take(self, index)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes)

    def sigmoid(self):
        return sigmoid(self)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _pair(a, b, op):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise ShapeMismatch(f"{op}: shapes {a.shape} and {b.shape} differ (only scalar broadcasting)")
    return a, b


def _fit(g: np.ndarray, like: Tensor) -> np.ndarray:
    """Reduce a broadcast gradient back to ``like``'s shape (scalar case only)."""
    if g.shape == like.shape:
        return g
    return np.full(like.shape, g.sum())


# -- elementwise ------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair(a, b, "add")
    return _make(a.data + b.data, (a, b), lambda g: (_fit(g, a), _fit(g, b)), "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b, "sub")
    return _make(a.data - b.data, (a, b), lambda g: (_fit(g, a), _fit(-g, b)), "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b, "mul")
    return _make(a.data * b.data, (a, b),
                 lambda g: (_fit(g * b.data, a), _fit(g * a.data, b)), "mul")


def div(a, b) -> Tensor:
    a, b = _pair(a, b, "div")
    out = a.data / b.data
    return _make(out, (a, b),
                 lambda g: (_fit(g / b.data, a), _fit(-g * out / b.data, b)), "div")


def power(a: Tensor, exponent: float) -> Tensor:
    a = as_tensor(a)
    e = float(exponent)
    return _make(a.data ** e, (a,), lambda g: (g * e * a.data ** (e - 1.0),), "pow")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):  # _make reports non-finite output
        out = np.log(a.data)
    return _make(out, (a,), lambda g: (g / a.data,), "log")


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def _sigmoid_np(z: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid_np(a.data)
    return _make(s, (a,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def silu(a: Tensor) -> Tensor:
    """x * sigmoid(x)."""
    s = _sigmoid_np(a.data)
    return _make(a.data * s, (a,), lambda g: (g * s * (1.0 + a.data * (1.0 - s)),), "silu")


def softplus(a: Tensor) -> Tensor:
    """log(1 + exp(x)) without overflow."""
    x = a.data
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    return _make(out, (a,), lambda g: (g * _sigmoid_np(x),), "softplus")


def atan(a: Tensor) -> Tensor:
    return _make(np.arctan(a.data), (a,), lambda g: (g / (1.0 + a.data * a.data),), "atan")


def maximum(a, b) -> Tensor:
    """Elementwise max; ties send the gradient to ``a``."""
    a, b = _pair(a, b, "maximum")
    pick = a.data >= b.data
    return _make(np.where(pick, a.data, b.data), (a, b),
                 lambda g: (_fit(np.where(pick, g, 0.0), a), _fit(np.where(pick, 0.0, g), b)), "maximum")


def minimum(a, b) -> Tensor:
    """Elementwise min; ties send the gradient to ``a``."""
    a, b = _pair(a, b, "minimum")
    pick = a.data <= b.data
    return _make(np.where(pick, a.data, b.data), (a, b),
                 lambda g: (_fit(np.where(pick, g, 0.0), a), _fit(np.where(pick, 0.0, g), b)), "minimum")


def clamp_min(a: Tensor, low: float) -> Tensor:
    keep = a.data > low
    return _make(np.where(keep, a.data, low), (a,), lambda g: (np.where(keep, g, 0.0),), "clamp_min")


# -- reductions and shape ---------------------------------------------------

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def tsum(a: Tensor, axis=None) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=axes)

    def bw(g):
        return (np.broadcast_to(np.expand_dims(g, axes), a.shape).copy(),)

    return _make(np.asarray(out), (a,), bw, "sum")


def mean(a: Tensor, axis=None) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    out = a.data.sum(axis=axes) / count

    def bw(g):
        return (np.broadcast_to(np.expand_dims(g, axes) / count, a.shape).copy(),)

    return _make(np.asarray(out), (a,), bw, "mean")


def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)
    return _make(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes) if axes else tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def _has_array_index(index) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return any(isinstance(p, (list, np.ndarray)) for p in parts)


def take(a: Tensor, index) -> Tensor:
    """``a[index]`` with basic or integer-array indexing."""
    out = np.asarray(a.data[index])
    fancy = _has_array_index(index)

    def bw(g):
        full = np.zeros(a.shape)
        if fancy:
            np.add.at(full, index, g)
        else:
            full[index] += g
        return (full,)

    return _make(out.copy() if not fancy else out, (a,), bw, "take")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    axis = axis % len(ref)
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != axis):
            raise ShapeMismatch(f"concat on axis {axis}: {ref} vs {t.shape}")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def bw(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(tensors)))

    return _make(out, tensors, bw, "concat")


def concat_channels(tensors: Sequence[Tensor]) -> Tensor:
    """Join NCHW tensors along the channel axis."""
    for t in tensors:
        if t.ndim != 4:
            raise ShapeMismatch(f"concat_channels needs NCHW tensors, got shape {t.shape}")
    return concat(tensors, axis=1)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    shifted = x - x.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)

    def bw(g):
        return (g - soft * g.sum(axis=axis, keepdims=True),)

    return _make(out, (a,), bw, "log_softmax")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), bw, "softmax")


# -- convolution ------------------------------------------------------------

@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel: int = 3
    stride: int = 1
    padding: int = 1

    def __post_init__(self):
        if self.kernel < 1 or self.stride < 1 or self.padding < 0:
            raise ValueError(f"invalid conv spec k={self.kernel} s={self.stride} p={self.padding}")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValueError("channel counts must be positive")

    def out_size(self, size: int) -> int:
        return _kernels.conv_out_size(size, self.kernel, self.stride, self.padding)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, spec: ConvSpec) -> Tensor:
    """Cross-correlation (no kernel flip) of NCHW ``x``; ``bias`` is per output channel."""
    expect_w = (spec.out_channels, spec.in_channels, spec.kernel, spec.kernel)
    if x.ndim != 4 or x.shape[1] != spec.in_channels:
        raise ShapeMismatch(f"conv2d input {x.shape} does not have {spec.in_channels} channels")
    if weight.shape != expect_w:
        raise ShapeMismatch(f"conv2d weight {weight.shape}, expected {expect_w}")
    if bias.shape != (spec.out_channels,):
        raise ShapeMismatch(f"conv2d bias {bias.shape}, expected {(spec.out_channels,)}")
    if spec.out_size(x.shape[2]) < 1 or spec.out_size(x.shape[3]) < 1:
        raise ShapeMismatch(f"conv2d input {x.shape} too small for kernel {spec.kernel}")
    xd = np.ascontiguousarray(x.data)
    wd = np.ascontiguousarray(weight.data)
    out, ctx = _kernels.conv2d_forward(xd, wd, bias.data, spec.stride, spec.padding)

    def bw(g):
        gx, gw, gb = _kernels.conv2d_backward(xd, wd, g, spec.stride, spec.padding, ctx)
        return gx, gw, gb

    return _make(out, (x, weight, bias), bw, "conv2d")


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5,
               stats: tuple[np.ndarray, np.ndarray] | None = None):
    """Per-channel normalisation of NCHW ``x``, then ``gamma * x_hat + beta``.

    Without ``stats`` the batch mean and (biased) variance over N, H, W are
    used and differentiated through; they are returned alongside the output
    so the caller can keep running averages.  With ``stats = (mean, var)``
    the statistics are constants (inference).
    """
    if x.ndim != 4 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ShapeMismatch(f"batch_norm: input {x.shape}, gamma {gamma.shape}, beta {beta.shape}")
    xd = x.data
    if stats is None:
        mu = xd.mean(axis=(0, 2, 3))
        var = xd.var(axis=(0, 2, 3))
    else:
        mu, var = (np.asarray(a, dtype=np.float64) for a in stats)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu[None, :, None, None]) * inv[None, :, None, None]
    g4 = gamma.data[None, :, None, None]
    out = xhat * g4 + beta.data[None, :, None, None]
    m = xd.shape[0] * xd.shape[2] * xd.shape[3]

    def bw(g):
        gb = g.sum(axis=(0, 2, 3))
        gg = (g * xhat).sum(axis=(0, 2, 3))
        gxhat = g * g4
        if stats is not None:
            gx = gxhat * inv[None, :, None, None]
        else:
            gx = (inv[None, :, None, None] / m) * (
                m * gxhat - gxhat.sum(axis=(0, 2, 3))[None, :, None, None]
                - xhat * (gxhat * xhat).sum(axis=(0, 2, 3))[None, :, None, None])
        return gx, gg, gb

    return _make(out, (x, gamma, beta), bw, "batch_norm"), mu, var


# -- verification and optimisation -----------------------------------------

def gradcheck(
    f: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    step: float = 1e-3,
    coords: dict[int, np.ndarray] | None = None,
) -> float:
    """Max relative error between autodiff and central differences.

    ``f(*inputs)`` must return a single-element tensor.  The error for one
    coordinate is ``|a - n| / max(1e-8, |a| + |n|)``.  ``coords`` optionally
    restricts input ``i`` to the flat indices ``coords[i]``.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    out = f(*inputs)
    if out.size != 1:
        raise ShapeMismatch("gradcheck needs a scalar-valued function")
    out.backward()
    worst = 0.0
    with no_grad():
        for i, t in enumerate(inputs):
            analytic = np.zeros(t.size) if t.grad is None else t.grad.reshape(-1).copy()
            flat = t.data.reshape(-1)
            idx = np.arange(t.size) if coords is None or i not in coords else np.asarray(coords[i])
            for j in idx:
                orig = flat[j]
                flat[j] = orig + step
                hi = f(*inputs).item()
                flat[j] = orig - step
                lo = f(*inputs).item()
                flat[j] = orig
                numeric = (hi - lo) / (2.0 * step)
                if not (np.isfinite(hi) and np.isfinite(lo)):
                    raise NonFiniteValue("gradcheck: non-finite function value")
                err = abs(analytic[j] - numeric) / max(1e-8, abs(analytic[j]) + abs(numeric))
                worst = max(worst, err)
    return worst


class SGD:
    """Classic momentum SGD: ``v = m*v + g``; ``p -= lr*v``.

    With ``max_norm`` set, gradients are first rescaled so their global L2
    norm does not exceed it.  ``weight_decay`` adds ``wd * p`` to the gradient
    of every parameter whose ``decay`` flag is true (all of them by default).
    """

    def __init__(self, params: Iterable[Tensor], lr: float, momentum: float = 0.0,
                 max_norm: float | None = None, weight_decay: float = 0.0,
                 decay: Sequence[bool] | None = None):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.max_norm = max_norm
        self.weight_decay = weight_decay
        self.decay = [True] * len(self.params) if decay is None else list(decay)
        if len(self.decay) != len(self.params):
            raise ValueError("decay flags must match the parameter list")
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        for p in self.params:
            if p.grad is None:
                raise MissingGradient(f"parameter of shape {p.shape} has no gradient")
        scale = 1.0
        if self.max_norm is not None:
            norm = float(np.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in self.params)))
            if norm > self.max_norm:
                scale = self.max_norm / norm
        for p, v, d in zip(self.params, self.velocity, self.decay):
            v *= self.momentum
            v += p.grad * scale if scale != 1.0 else p.grad
            if d and self.weight_decay:
                v += self.weight_decay * p.data
            p.data -= self.lr * v

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def sgd_step(params: Sequence[Tensor], lr: float, momentum: float = 0.0,
             velocity: list[np.ndarray] | None = None) -> list[np.ndarray]:
    """One functional momentum step; returns the updated velocity buffers."""
    opt = SGD(params, lr, momentum)
    if velocity is not None:
        opt.velocity = velocity
    opt.step()
    return opt.velocity


# -- checkpoints ------------------------------------------------------------

MAGIC = b"HYOLO1"


def save_checkpoint(path, params: dict[str, Tensor | np.ndarray]) -> None:
    """Write ``name -> array`` records: u32 name length, name, u32 rank, u64 dims, LE float64 data."""
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        for name, value in params.items():
            arr = value.data if isinstance(value, Tensor) else np.asarray(value, dtype=np.float64)
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path) -> dict[str, np.ndarray]:
    from .errors import DataError

    with open(path, "rb") as fh:
        blob = fh.read()
    if not blob.startswith(MAGIC):
        raise DataError(f"{path}: not a checkpoint (bad magic)")
    pos = len(MAGIC)
    out: dict[str, np.ndarray] = {}
    try:
        while pos < len(blob):
            (n,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            name = blob[pos : pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}Q", blob, pos)
            pos += 8 * rank
            count = int(np.prod(dims)) if rank else 1
            arr = np.frombuffer(blob, dtype="<f8", count=count, offset=pos).reshape(dims)
            pos += 8 * count
            out[name] = arr.astype(np.float64)
    except (struct.error, ValueError) as exc:
        raise DataError(f"{path}: truncated checkpoint") from exc
    return out
