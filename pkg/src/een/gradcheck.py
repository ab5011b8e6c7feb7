"""Finite-difference gradient checks for every differentiable op.

Each registered case builds random float64 inputs, reduces the op's output
to a scalar through a fixed random projection, and compares autodiff
gradients against central differences.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import tensor as T

TOLERANCE = 1e-4
STEP = 1e-5

REGISTRY: dict[str, Callable[[np.random.Generator], list]] = {}


def register(name: str):
    def deco(fn):
        if name in REGISTRY:
            raise ValueError(f"duplicate gradcheck case {name!r}")
        REGISTRY[name] = fn
        return fn
    return deco


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    num = np.linalg.norm(a - b)
    den = max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12)
    return float(num / den)


def numerical_grad(f: Callable[[], float], x: np.ndarray, h: float = STEP) -> np.ndarray:
    """Central differences of scalar ``f`` w.r.t. ``x``, perturbing in place."""
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return g


def check(fn: Callable[..., T.Tensor], inputs: list[np.ndarray], wrt=None,
          rng: np.random.Generator | None = None, h: float = STEP) -> float:
    """Max relative error over the differentiable inputs of ``fn``.

    ``fn`` receives Tensors and returns a Tensor; non-scalar outputs are
    contracted with a fixed random projection.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    wrt = range(len(inputs)) if wrt is None else wrt
    probe = fn(*[T.Tensor(a) for a in inputs]).data
    proj = rng.standard_normal(probe.shape) if probe.size > 1 else None

    def scalar(out: T.Tensor) -> T.Tensor:
        return out if proj is None else T.tsum(out * proj)

    tensors = [T.Tensor(a, requires_grad=(i in wrt)) for i, a in enumerate(inputs)]
    with T.Tape():
        T.backward(scalar(fn(*tensors)))

    worst = 0.0
    for i in wrt:
        def f():
            with T.no_grad():
                return scalar(fn(*[T.Tensor(a) for a in inputs])).item()
        num = numerical_grad(f, inputs[i], h)
        worst = max(worst, relative_error(tensors[i].grad, num))
    return worst


def _away_from_zero(rng, shape, margin=1e-3):
    x = rng.uniform(-2, 2, shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * (margin + 0.1), x)


@register("add")
def _case_add(rng):
    return [check(T.add, [rng.standard_normal((3, 4)), rng.standard_normal((1, 4))], rng=rng)]


@register("sub")
def _case_sub(rng):
    return [check(T.sub, [rng.standard_normal((2, 3, 1, 1)), rng.standard_normal((2, 3, 2, 2))], rng=rng)]


@register("mul")
def _case_mul(rng):
    return [check(T.mul, [rng.standard_normal((4, 3)), rng.standard_normal((4, 3))], rng=rng)]


@register("sum")
def _case_sum(rng):
    return [check(T.tsum, [rng.standard_normal((3, 2))], rng=rng)]


@register("mean")
def _case_mean(rng):
    return [check(T.mean, [rng.standard_normal((3, 5))], rng=rng)]


@register("reshape")
def _case_reshape(rng):
    return [check(lambda x: T.reshape(x, (6, 2)), [rng.standard_normal((3, 4))], rng=rng)]


@register("linear")
def _case_linear(rng):
    args = [rng.standard_normal((2, 3)), rng.standard_normal((4, 3)), rng.standard_normal(4)]
    return [check(T.linear, args, rng=rng)]


@register("conv2d")
def _case_conv2d(rng):
    errs = []
    for shape, kshape, stride, pad in [((1, 2, 6, 6), (3, 2, 3, 3), 2, 1),
                                       ((2, 3, 5, 5), (2, 3, 4, 4), 1, 0),
                                       ((1, 1, 8, 8), (2, 1, 4, 4), 2, 1)]:
        fn = lambda x, k, s=stride, p=pad: T.conv2d(x, k, s, p)  # noqa: E731
        errs.append(check(fn, [rng.standard_normal(shape), rng.standard_normal(kshape)], rng=rng))
    return errs


@register("conv_transpose2d")
def _case_conv_transpose2d(rng):
    errs = []
    for shape, kshape, stride, pad in [((1, 2, 3, 3), (2, 3, 4, 4), 2, 1),
                                       ((2, 3, 4, 4), (3, 2, 3, 3), 1, 0),
                                       ((1, 2, 2, 2), (2, 2, 3, 3), 3, 1)]:
        fn = lambda x, k, s=stride, p=pad: T.conv_transpose2d(x, k, s, p)  # noqa: E731
        errs.append(check(fn, [rng.standard_normal(shape), rng.standard_normal(kshape)], rng=rng))
    return errs


@register("batch_norm")
def _case_batch_norm(rng):
    errs = []
    for shape in [(3, 2, 2, 2), (5, 3)]:
        c = shape[1]

        def fn(x, g, b):
            return T.batch_norm(x, g, b, T.BatchNormState.create(c), "train")

        args = [rng.standard_normal(shape), rng.uniform(0.5, 1.5, c), rng.standard_normal(c)]
        errs.append(check(fn, args, rng=rng))
    return errs


@register("relu")
def _case_relu(rng):
    return [check(T.relu, [_away_from_zero(rng, (4, 5))], rng=rng)]


@register("tanh")
def _case_tanh(rng):
    return [check(T.tanh, [rng.standard_normal((4, 5))], rng=rng)]


@register("difference_loss")
def _case_difference_loss(rng):
    errs = []
    for norm in ("l2", "l1"):
        pred = rng.standard_normal((3, 4))
        target = pred + _away_from_zero(rng, (3, 4))
        fn = lambda p, t, n=norm: T.difference_loss(p, t, n)  # noqa: E731
        errs.append(check(fn, [pred, target], rng=rng))
    return errs


def run(scope: str = "all", seed: int = 0, tolerance: float = TOLERANCE) -> dict[str, float]:
    """Run registered cases; returns ``{op_name: max relative error}``.

    Raises ``KeyError`` for an unknown op name.
    """
    names = list(REGISTRY) if scope == "all" else [scope]
    for name in names:
        if name not in REGISTRY:
            raise KeyError(name)
    results = {}
    for name in names:
        rng = np.random.default_rng([seed, sorted(REGISTRY).index(name)])
        results[name] = max(REGISTRY[name](rng))
    return results
