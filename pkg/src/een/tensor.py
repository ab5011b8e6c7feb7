"""Dense float64 tensors with a reverse-mode differentiation tape.

Operations record themselves onto the innermost active :class:`Tape` when at
least one input is tracked (a leaf with ``requires_grad`` or an output already
on a tape). Outside any tape, or inside :func:`no_grad`, results are plain
detached tensors.

Example::

    w = Tensor(np.ones((2, 3)), requires_grad=True)
    with Tape():
        loss = difference_loss(linear(x, w), y, "l2")
        backward(loss)
    w.grad  # dLoss/dw
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DegenerateBatchError, DimensionError, NoTapeError, RankError

DTYPE = np.float64

_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


class Node:
    __slots__ = ("op", "inputs", "output", "backward_fn", "tape")

    def __init__(self, op, inputs, output, backward_fn, tape):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn
        self.tape = tape

    def __repr__(self):
        return f"Node({self.op}, shape={self.output.shape})"


class Tape:
    """Ordered record of operations; nodes are appended in execution order,
    so the list is topologically sorted by construction."""

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> bool:
        _tape_stack().pop()
        return False

    def __len__(self):
        return len(self.nodes)

    def _consume(self):
        for node in self.nodes:
            node.output.tape_node = None
        self.nodes = []


class no_grad:
    """Suspend recording inside an enclosing tape."""

    def __enter__(self):
        _tape_stack().append(None)
        return self

    def __exit__(self, *exc):
        _tape_stack().pop()
        return False


def active_tape() -> Tape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.tape_node: Node | None = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def tracked(self) -> bool:
        return self.requires_grad or self.tape_node is not None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        """A tape-free tensor sharing this tensor's values."""
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def sum(self) -> "Tensor":
        return tsum(self)

    def mean(self) -> "Tensor":
        return mean(self)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(op: str, data: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    out = Tensor(data)
    tape = active_tape()
    if tape is not None and any(t.tracked for t in inputs):
        out.tape_node = Node(op, tuple(inputs), out, backward_fn, tape)
        tape.nodes.append(out.tape_node)
    return out


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` of every tracked leaf reachable from ``loss``.

    Gradients accumulate into existing ``.grad`` buffers. The loss's tape is
    consumed: its nodes are dropped and their outputs detached.
    """
    if loss.size != 1:
        raise RankError(f"backward needs a scalar loss, got shape {loss.shape}")
    node = loss.tape_node
    if node is None:
        raise NoTapeError("loss is not attached to an active tape")
    tape = node.tape
    end = next(i for i in range(len(tape.nodes) - 1, -1, -1) if tape.nodes[i] is node)

    grads = {id(loss): np.ones_like(loss.data)}
    leaf_grads: dict[int, np.ndarray] = {}
    leaves: dict[int, Tensor] = {}
    for nd in reversed(tape.nodes[: end + 1]):
        g = grads.pop(id(nd.output), None)
        if g is None:
            continue
        for inp, gi in zip(nd.inputs, nd.backward_fn(g)):
            if gi is None:
                continue
            key = id(inp)
            if inp.tape_node is not None and inp.tape_node.tape is tape:
                grads[key] = grads[key] + gi if key in grads else gi
            elif inp.requires_grad:
                leaves[key] = inp
                leaf_grads[key] = leaf_grads[key] + gi if key in leaf_grads else gi
    for key, leaf in leaves.items():
        g = np.array(leaf_grads[key], dtype=DTYPE).reshape(leaf.shape)
        leaf.grad = g if leaf.grad is None else leaf.grad + g
    tape._consume()


# ---------------------------------------------------------------- elementwise


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape
    return _emit("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape
    return _emit("sub", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data
    return _emit("mul", ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def tsum(x: Tensor) -> Tensor:
    shape = x.shape
    return _emit("sum", np.asarray(x.data.sum()), (x,),
                 lambda g: (np.broadcast_to(g, shape),))


def mean(x: Tensor) -> Tensor:
    shape, n = x.shape, x.size
    return _emit("mean", np.asarray(x.data.mean()), (x,),
                 lambda g: (np.broadcast_to(g / n, shape),))


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    try:
        data = x.data.reshape(shape)
    except ValueError as e:
        raise DimensionError(f"cannot reshape {old} to {tuple(shape)}") from e
    return _emit("reshape", data, (x,), lambda g: (g.reshape(old),))


def _relu_grad(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    return g * (x > 0)


def _tanh_grad(out: np.ndarray, g: np.ndarray) -> np.ndarray:
    return g * (1.0 - out * out)


def relu(x: Tensor) -> Tensor:
    xd = x.data
    return _emit("relu", np.where(xd > 0, xd, 0.0), (x,), lambda g: (_relu_grad(xd, g),))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return _emit("tanh", out, (x,), lambda g: (_tanh_grad(out, g),))


def activation(x: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "tanh":
        return tanh(x)
    if kind in ("none", "identity"):
        return x
    raise ValueError(f"unknown activation {kind!r}")


# --------------------------------------------------------------------- linear


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``out[n, o] = sum_i x[n, i] * weight[o, i] + bias[o]``."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise DimensionError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise DimensionError(f"linear: bias {bias.shape} incompatible with weight {weight.shape}")
    xd, wd = x.data, weight.data
    out = xd @ wd.T
    if bias is not None:
        out = out + bias.data

    def grad(g):
        gs = (g @ wd, g.T @ xd)
        return gs + (g.sum(axis=0),) if bias is not None else gs

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _emit("linear", out, inputs, grad)


# --------------------------------------------------------------- convolutions


def _windows(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    """(N, C, Hp, Wp) -> read-only view (N, C, Ho, Wo, kh, kw)."""
    return sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]


def _col2im(cols: np.ndarray, padded_shape: tuple, stride: int) -> np.ndarray:
    """Adjoint of :func:`_windows`: scatter-add window entries back."""
    n, c, ho, wo, kh, kw = cols.shape
    out = np.zeros(padded_shape, dtype=DTYPE)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += cols[:, :, :, :, i, j]
    return out


def _pad(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def conv_output_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def conv_transpose_output_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size - 1) * stride - 2 * pad + k


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Zero-padded strided cross-correlation; kernel is (F, C, kH, kW)."""
    if x.ndim != 4 or kernel.ndim != 4:
        raise DimensionError(f"conv2d: expected 4-d input and kernel, got {x.shape} and {kernel.shape}")
    n, c, h, w = x.shape
    f, kc, kh, kw = kernel.shape
    if kc != c:
        raise DimensionError(f"conv2d: input {x.shape} has {c} channels, kernel {kernel.shape} expects {kc}")
    if stride < 1 or pad < 0:
        raise DimensionError(f"conv2d: invalid stride={stride} pad={pad}")
    if h + 2 * pad < kh or w + 2 * pad < kw:
        raise DimensionError(f"conv2d: kernel {kernel.shape} larger than padded input {x.shape} (pad={pad})")

    kd = kernel.data
    cols = _windows(_pad(x.data, pad), kh, kw, stride)
    out = np.tensordot(cols, kd, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)

    def grad(g):
        dcols = np.tensordot(g, kd, axes=([1], [0])).transpose(0, 3, 1, 2, 4, 5)
        dxp = _col2im(dcols, (n, c, h + 2 * pad, w + 2 * pad), stride)
        dk = np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3]))
        return dxp[:, :, pad:pad + h, pad:pad + w], dk

    return _emit("conv2d", np.ascontiguousarray(out), (x, kernel), grad)


def conv_transpose2d(x: Tensor, kernel: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Adjoint of :func:`conv2d`; kernel is (C, F, kH, kW), C = input channels."""
    if x.ndim != 4 or kernel.ndim != 4:
        raise DimensionError(
            f"conv_transpose2d: expected 4-d input and kernel, got {x.shape} and {kernel.shape}")
    n, c, h, w = x.shape
    kc, f, kh, kw = kernel.shape
    if kc != c:
        raise DimensionError(
            f"conv_transpose2d: input {x.shape} has {c} channels, kernel {kernel.shape} expects {kc}")
    if stride < 1 or pad < 0:
        raise DimensionError(f"conv_transpose2d: invalid stride={stride} pad={pad}")
    ho = conv_transpose_output_size(h, kh, stride, pad)
    wo = conv_transpose_output_size(w, kw, stride, pad)
    if ho <= 0 or wo <= 0:
        raise DimensionError(f"conv_transpose2d: non-positive output extent ({ho}, {wo}) for input {x.shape}")

    xd, kd = x.data, kernel.data
    cols = np.tensordot(xd, kd, axes=([1], [0])).transpose(0, 3, 1, 2, 4, 5)
    outp = _col2im(cols, (n, f, ho + 2 * pad, wo + 2 * pad), stride)
    out = outp[:, :, pad:pad + ho, pad:pad + wo]

    def grad(g):
        gcols = _windows(_pad(g, pad), kh, kw, stride)
        dx = np.tensordot(gcols, kd, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
        dk = np.tensordot(xd, gcols, axes=([0, 2, 3], [0, 2, 3]))
        return dx, dk

    return _emit("conv_transpose2d", np.ascontiguousarray(out), (x, kernel), grad)


# ----------------------------------------------------------------- batch norm


@dataclass
class BatchNormState:
    """Running statistics for one batch-norm layer."""

    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5

    @classmethod
    def create(cls, channels: int, momentum: float = 0.1, eps: float = 1e-5) -> "BatchNormState":
        return cls(np.zeros(channels), np.ones(channels), momentum, eps)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState,
               mode: str = "train") -> Tensor:
    """Per-channel normalization over every axis but 1.

    Train mode uses batch statistics and updates ``state`` in place by
    exponential moving average (unbiased variance); eval mode uses the
    running statistics.
    """
    if x.ndim not in (2, 4):
        raise DimensionError(f"batch_norm: expected (N, C) or (N, C, H, W), got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"batch_norm: gamma {gamma.shape}/beta {beta.shape} vs input {x.shape}")
    axes = (0,) if x.ndim == 2 else (0, 2, 3)
    bshape = (1, c) if x.ndim == 2 else (1, c, 1, 1)
    m = x.size // c
    xd, gd = x.data, gamma.data.reshape(bshape)

    if mode == "train":
        if m < 2:
            raise DegenerateBatchError(f"batch_norm: train mode needs >= 2 values per channel, got {m}")
        mu = xd.mean(axis=axes)
        var = xd.var(axis=axes)
        state.running_mean = (1 - state.momentum) * state.running_mean + state.momentum * mu
        state.running_var = (1 - state.momentum) * state.running_var + state.momentum * var * m / (m - 1)
    elif mode == "eval":
        mu, var = state.running_mean, state.running_var
    else:
        raise ValueError(f"batch_norm mode must be 'train' or 'eval', got {mode!r}")

    invstd = (1.0 / np.sqrt(var + state.eps)).reshape(bshape)
    xhat = (xd - mu.reshape(bshape)) * invstd
    out = xhat * gd + beta.data.reshape(bshape)

    def grad(g):
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        dxhat = g * gd
        if mode == "eval":
            return dxhat * invstd, dgamma, dbeta
        s1 = dxhat.sum(axis=axes).reshape(bshape)
        s2 = (dxhat * xhat).sum(axis=axes).reshape(bshape)
        dx = invstd / m * (m * dxhat - s1 - xhat * s2)
        return dx, dgamma, dbeta

    return _emit("batch_norm", out, (x, gamma, beta), grad)


# ----------------------------------------------------------------------- loss


def difference_loss(pred: Tensor, target: Tensor, norm: str = "l2") -> Tensor:
    """Mean squared (``l2``) or mean absolute (``l1``) difference."""
    target = _as_tensor(target)
    if pred.shape != target.shape:
        raise DimensionError(f"difference_loss: prediction {pred.shape} vs target {target.shape}")
    diff = pred.data - target.data
    n = diff.size
    if norm == "l2":
        value = np.mean(diff * diff)
        dpred = lambda g: g * 2.0 * diff / n  # noqa: E731
    elif norm == "l1":
        value = np.mean(np.abs(diff))
        dpred = lambda g: g * np.sign(diff) / n  # noqa: E731
    else:
        raise ValueError(f"norm must be 'l1' or 'l2', got {norm!r}")

    def grad(g):
        d = dpred(g)
        return d, -d

    return _emit("difference_loss", np.asarray(value), (pred, target), grad)


def per_sample_loss(pred: np.ndarray, target: np.ndarray, norm: str = "l2") -> np.ndarray:
    """Untracked per-sample loss: mean over all but the leading axis."""
    diff = (np.asarray(pred) - np.asarray(target)).reshape(len(pred), -1)
    if norm == "l2":
        return np.mean(diff * diff, axis=1)
    if norm == "l1":
        return np.mean(np.abs(diff), axis=1)
    raise ValueError(f"norm must be 'l1' or 'l2', got {norm!r}")
