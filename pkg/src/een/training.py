"""Training procedures: deterministic phase, conditional phase, joint
variant, and the alternating-minimization baseline.

All procedures consume only ``dataset.x`` and ``dataset.y``.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import tensor as T
from .errors import ConfigError, DataError, LifecycleError
from .model import (ZERO_LATENT, ModelBundle, encode_error, forward, params_checksum,
                    reinitialize_net, residual)
from .optim import DEFAULT_LR, SGD, Adam, AdamState
from .tensor import Tape, Tensor

EVAL_CHUNK = 512
_PHASE_CODES = {"deterministic": 0, "conditional": 1, "joint": 2, "alternating": 3, "alternating-eval": 4}


@dataclass
class PhaseSchedule:
    epochs_deterministic: int = 200
    epochs_conditional: int = 200
    batch_size: int = 32
    loss_norm: str = "l2"
    lr: float = DEFAULT_LR
    seed: int = 0
    patience: int = 20
    prefetch: bool = False
    separate_conditional_network: bool = False

    def validate(self):
        for name in ("epochs_deterministic", "epochs_conditional", "batch_size"):
            if getattr(self, name) < 1:
                raise ConfigError("must be >= 1", f"schedule.{name}")
        if self.loss_norm not in ("l1", "l2"):
            raise ConfigError(f"unknown norm {self.loss_norm!r}", "schedule.loss_norm")
        if self.lr < 0:
            raise ConfigError("must be >= 0", "schedule.lr")
        if self.patience < 1:
            raise ConfigError("must be >= 1", "schedule.patience")
        return self


@dataclass
class AltMinConfig:
    alpha: float = 0.1
    beta: float = DEFAULT_LR
    K: int = 10
    latent_dim: int | None = None
    epochs: int = 200
    optimizer: str = "adam"

    def validate(self):
        if self.K < 1:
            raise ConfigError("must be >= 1", "altmin.K")
        if self.alpha < 0:
            raise ConfigError("must be >= 0", "altmin.alpha")
        if self.beta <= 0:
            raise ConfigError("must be > 0", "altmin.beta")
        if self.epochs < 1:
            raise ConfigError("must be >= 1", "altmin.epochs")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}", "altmin.optimizer")
        return self


@dataclass
class TrainReport:
    phase: str
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    components: dict = field(default_factory=dict)
    initial_loss: float | None = None
    checksum: str = ""
    stopped_early: bool = False
    extras: dict = field(default_factory=dict)
    epoch_seconds: list = field(default_factory=list, compare=False)

    @property
    def epochs(self) -> int:
        return len(self.train_loss)


@dataclass
class PhaseState:
    """Everything needed to resume a phase after ``epoch`` completed epochs."""

    phase: str
    epoch: int
    report: TrainReport
    best: float
    since_best: int
    optimizer: AdamState | None


EpochHook = Callable[[PhaseState], None]


# ------------------------------------------------------------------- batching


def batch_slices(n: int, batch_size: int) -> list[slice]:
    """Contiguous batches; a trailing singleton merges into its predecessor."""
    bounds = list(range(0, n, batch_size)) + [n]
    if len(bounds) > 2 and bounds[-1] - bounds[-2] == 1:
        del bounds[-2]
    return [slice(a, b) for a, b in zip(bounds[:-1], bounds[1:])]


def epoch_order(n: int, seed: int, phase: str, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, _PHASE_CODES[phase], epoch]).permutation(n)


def iter_batches(data, batch_size: int, order: np.ndarray, prefetch: bool = False):
    """Yield ``(x, y)`` batches in ``order``; with ``prefetch`` the next batch
    is assembled on a worker thread while the caller consumes the current one."""
    x, y = data.x, data.y
    slices = batch_slices(len(order), batch_size)

    def assemble(s):
        idx = order[s]
        return x[idx], y[idx]

    if not prefetch:
        for s in slices:
            yield assemble(s)
        return
    with ThreadPoolExecutor(max_workers=1) as pool:
        pending = pool.submit(assemble, slices[0])
        for s in slices[1:]:
            current = pending.result()
            pending = pool.submit(assemble, s)
            yield current
        yield pending.result()


def _check_data(data):
    if data is None or len(data) == 0:
        raise DataError("training dataset is empty")


# -------------------------------------------------------------------- losses


def deterministic_loss(bundle: ModelBundle, data, norm: str = "l2") -> float:
    """Mean per-sample loss of ``f(x, 0)`` over ``data``, eval mode."""
    total = 0.0
    with T.no_grad():
        for s in batch_slices(len(data), EVAL_CHUNK):
            pred = forward(bundle, data.x[s], ZERO_LATENT).data
            total += T.per_sample_loss(pred, data.y[s], norm).sum()
    return total / len(data)


def conditional_loss(bundle: ModelBundle, data, norm: str = "l2") -> float:
    """Mean per-sample loss of ``f(x, phi(residual))`` over ``data``, eval mode."""
    total = 0.0
    with T.no_grad():
        for s in batch_slices(len(data), EVAL_CHUNK):
            x, y = data.x[s], data.y[s]
            z = encode_error(bundle, residual(bundle, x, y))
            total += T.per_sample_loss(forward(bundle, x, z).data, y, norm).sum()
    return total / len(data)


# ------------------------------------------------------------ generic driver


def _run_phase(phase: str, data, schedule: PhaseSchedule, params: dict, step, evaluate,
               epochs: int, val=None, optimizer=None, hook: EpochHook | None = None,
               resume: PhaseState | None = None) -> TrainReport:
    opt = optimizer if optimizer is not None else Adam(params, lr=schedule.lr)
    if resume is not None:
        if resume.phase != phase:
            raise LifecycleError(f"cannot resume phase {phase!r} from a {resume.phase!r} state")
        report, start, best, since_best = resume.report, resume.epoch, resume.best, resume.since_best
        if resume.optimizer is not None:
            opt.state = resume.optimizer
    else:
        report = TrainReport(phase, initial_loss=evaluate(data))
        start, best, since_best = 0, float("inf"), 0

    for epoch in range(start, epochs):
        if report.stopped_early:
            break
        t0 = time.perf_counter()
        order = epoch_order(len(data), schedule.seed, phase, epoch)
        sums, count = {}, 0
        for b, (x, y) in enumerate(iter_batches(data, schedule.batch_size, order, schedule.prefetch)):
            comps = step(x, y, opt, (epoch, b))
            for k, v in comps.items():
                sums[k] = sums.get(k, 0.0) + v * len(x)
            count += len(x)
        means = {k: v / count for k, v in sums.items()}
        report.train_loss.append(means.pop("loss"))
        for k, v in means.items():
            report.components.setdefault(k, []).append(v)
        if val is not None and len(val):
            v = evaluate(val)
            report.val_loss.append(v)
            if v < best:
                best, since_best = v, 0
            else:
                since_best += 1
                if since_best >= schedule.patience:
                    report.stopped_early = True
        report.epoch_seconds.append(time.perf_counter() - t0)
        report.checksum = params_checksum(params)
        if hook is not None:
            hook(PhaseState(phase, epoch + 1, report, best, since_best, opt.state))
    report.checksum = params_checksum(params)
    return report


# -------------------------------------------------------------- procedures


def train_deterministic(bundle: ModelBundle, data, schedule: PhaseSchedule, val=None,
                        hook: EpochHook | None = None, resume: PhaseState | None = None) -> TrainReport:
    """Fit ``f(x, 0)`` to ``y``; the latent path (``W``, ``phi``) is untouched."""
    _check_data(data)
    schedule.validate()
    norm = schedule.loss_norm
    params = bundle.net_params()

    def step(x, y, opt, _):
        with Tape():
            loss = T.difference_loss(forward(bundle, x, ZERO_LATENT, train=True), Tensor(y), norm)
            T.backward(loss)
        opt.step()
        return {"loss": loss.item()}

    return _run_phase("deterministic", data, schedule, params, step,
                      lambda d: deterministic_loss(bundle, d, norm),
                      schedule.epochs_deterministic, val, hook=hook, resume=resume)


def train_conditional(bundle: ModelBundle, data, schedule: PhaseSchedule, val=None,
                      hook: EpochHook | None = None, resume: PhaseState | None = None) -> TrainReport:
    """Fit ``f(x, phi(y - f_frozen(x, 0)))`` to ``y``, updating the live
    weights, ``W`` and ``phi`` together."""
    _check_data(data)
    schedule.validate()
    bundle.frozen_net()  # raises before any work if no snapshot exists
    if schedule.separate_conditional_network and resume is None:
        reinitialize_net(bundle, schedule.seed)
    norm = schedule.loss_norm
    params = bundle.all_params()

    def step(x, y, opt, _):
        r = residual(bundle, x, y)
        with Tape():
            z = encode_error(bundle, r, train=True)
            loss = T.difference_loss(forward(bundle, x, z, train=True), Tensor(y), norm)
            T.backward(loss)
        opt.step()
        return {"loss": loss.item()}

    bundle.meta["phi_trained"] = True
    return _run_phase("conditional", data, schedule, params, step,
                      lambda d: conditional_loss(bundle, d, norm),
                      schedule.epochs_conditional, val, hook=hook, resume=resume)


def train_joint(bundle: ModelBundle, data, schedule: PhaseSchedule, val=None,
                hook: EpochHook | None = None, resume: PhaseState | None = None) -> TrainReport:
    """Minimize deterministic + conditional loss with one set of live weights.

    The report's ``components`` holds both terms per epoch; ``train_loss`` is
    their sum.
    """
    _check_data(data)
    schedule.validate()
    if bundle.mode != "joint":
        raise LifecycleError("train_joint needs a joint-mode bundle")
    norm = schedule.loss_norm
    params = bundle.all_params()

    def step(x, y, opt, _):
        r = residual(bundle, x, y)
        yt = Tensor(y)
        with Tape():
            ld = T.difference_loss(forward(bundle, x, ZERO_LATENT, train=True), yt, norm)
            z = encode_error(bundle, r, train=True)
            lc = T.difference_loss(forward(bundle, x, z, train=True), yt, norm)
            T.backward(ld + lc)
        opt.step()
        return {"loss": ld.item() + lc.item(), "deterministic": ld.item(), "conditional": lc.item()}

    def evaluate(d):
        return deterministic_loss(bundle, d, norm) + conditional_loss(bundle, d, norm)

    bundle.meta["phi_trained"] = True
    return _run_phase("joint", data, schedule, params, step, evaluate,
                      schedule.epochs_conditional, val, hook=hook, resume=resume)


def infer_latents_alternating(bundle: ModelBundle, x, y, K: int, alpha: float,
                              rng: np.random.Generator, norm: str = "l2", train: bool = False,
                              z0: np.ndarray | None = None):
    """K gradient steps ``z <- z - alpha * dL/dz`` from ``z ~ N(0, 1)``.

    Each sample's latent descends its own loss (the batch objective is the sum
    of per-sample losses). Returns ``(z_K, per-sample loss at z_0)``.
    """
    n = len(x)
    z = rng.standard_normal((n, bundle.arch.latent_dim)) if z0 is None else np.array(z0, dtype=float)
    params = bundle.theta_params().values()
    yt = Tensor(y)
    first = None
    for _ in range(K):
        zt = Tensor(z, requires_grad=True)
        with Tape():
            pred = forward(bundle, x, zt, train=train)
            T.backward(T.difference_loss(pred, yt, norm) * float(n))
        if first is None:
            first = T.per_sample_loss(pred.data, y, norm)
        z = z - alpha * zt.grad
        for p in params:
            p.grad = None
    return z, first


def train_alternating(bundle: ModelBundle, data, cfg: AltMinConfig, schedule: PhaseSchedule,
                      val=None, hook: EpochHook | None = None,
                      resume: PhaseState | None = None) -> TrainReport:
    """Alternating minimization baseline.

    Per batch: draw ``z ~ N(0, 1)`` per sample, take ``cfg.K`` latent steps of
    size ``cfg.alpha``, then one parameter step (ADAM, or plain SGD with
    ``cfg.optimizer == "sgd"``) at rate ``cfg.beta`` using the final ``z``.
    ``extras["descent_fraction"]`` is the per-epoch share of samples whose
    loss at ``z_K`` does not exceed the loss at ``z_0``.
    """
    _check_data(data)
    cfg.validate()
    schedule.validate()
    if cfg.latent_dim is not None and cfg.latent_dim != bundle.arch.latent_dim:
        raise ConfigError(f"altmin latent_dim {cfg.latent_dim} != model latent_dim {bundle.arch.latent_dim}",
                          "altmin.latent_dim")
    norm = schedule.loss_norm
    params = bundle.theta_params()
    opt = Adam(params, lr=cfg.beta) if cfg.optimizer == "adam" else SGD(params, cfg.beta)
    descent = {}

    def step(x, y, opt, where):
        epoch, b = where
        rng = np.random.default_rng([schedule.seed, _PHASE_CODES["alternating"], epoch, b])
        z, start_loss = infer_latents_alternating(bundle, x, y, cfg.K, cfg.alpha, rng, norm, train=True)
        with Tape():
            pred = forward(bundle, x, Tensor(z), train=True)
            loss = T.difference_loss(pred, Tensor(y), norm)
            T.backward(loss)
        opt.step()
        ok = T.per_sample_loss(pred.data, y, norm) <= start_loss + 1e-12
        hits, total = descent.get(epoch, (0, 0))
        descent[epoch] = (hits + int(ok.sum()), total + len(ok))
        return {"loss": loss.item()}

    def evaluate(d):
        total = 0.0
        rng = np.random.default_rng([schedule.seed, _PHASE_CODES["alternating-eval"]])
        for s in batch_slices(len(d), EVAL_CHUNK):
            z, _ = infer_latents_alternating(bundle, d.x[s], d.y[s], cfg.K, cfg.alpha, rng, norm)
            with T.no_grad():
                total += T.per_sample_loss(forward(bundle, d.x[s], z).data, d.y[s], norm).sum()
        return total / len(d)

    def record(state: PhaseState):
        state.report.extras["descent_fraction"] = [h / t for h, t in
                                                   (descent[e] for e in sorted(descent))]
        if hook is not None:
            hook(state)

    if resume is not None:
        for e, frac in enumerate(resume.report.extras.get("descent_fraction", [])):
            descent[e] = (frac, 1)
    report = _run_phase("alternating", data, schedule, params, step, evaluate, cfg.epochs, val,
                        optimizer=opt, hook=record, resume=resume)
    report.extras["descent_fraction"] = [h / t for h, t in (descent[e] for e in sorted(descent))]
    return report
