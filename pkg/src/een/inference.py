"""Latent extraction, sampling-based generation and best-of-k evaluation."""

from __future__ import annotations

import csv
import hashlib
import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .container import read_container, write_container
from .errors import ConfigError, LifecycleError
from .model import ZERO_LATENT, ModelBundle, encode_error, forward, residual
from .training import EVAL_CHUNK, batch_slices

PSNR_CEILING = 100.0
CSV_VERSION = "v1"
CURVE_COLUMNS = ["model", "k", "loss_mean", "loss_stderr", "psnr_mean", "psnr_stderr"]


@dataclass(eq=False)
class LatentBank:
    latents: np.ndarray
    source: str = ""

    def __post_init__(self):
        self.latents = np.asarray(self.latents, dtype=np.float64)
        if self.latents.ndim != 2 or len(self.latents) == 0:
            raise LifecycleError(f"latent bank must be a non-empty (n, latent_dim) array, got {self.latents.shape}")
        if not np.all(np.isfinite(self.latents)):
            raise LifecycleError("latent bank contains non-finite values")

    def __len__(self):
        return len(self.latents)

    @property
    def latent_dim(self) -> int:
        return self.latents.shape[1]

    @property
    def checksum(self) -> str:
        return hashlib.sha256(np.ascontiguousarray(self.latents).tobytes()).hexdigest()

    @classmethod
    def gaussian(cls, n: int, latent_dim: int, seed: int) -> "LatentBank":
        """Draws from the standard-normal prior (for models trained without ``phi``)."""
        return cls(np.random.default_rng([seed, 7]).standard_normal((n, latent_dim)), "gaussian-prior")

    def save(self, path, header: dict | None = None):
        write_container(path, {"format": "een-latent-bank", "source": self.source,
                               "checksum": self.checksum, **(header or {})}, {"latents": self.latents})

    @classmethod
    def load(cls, path) -> "LatentBank":
        header, arrays = read_container(path)
        if header.get("format") != "een-latent-bank":
            raise LifecycleError(f"{path} is not a latent bank")
        return cls(arrays["latents"], header.get("source", ""))


def extract_latents(bundle: ModelBundle, data, source: str = "") -> LatentBank:
    """One ``phi(y - f_frozen(x, 0))`` per training sample, single pass each."""
    if not bundle.meta.get("phi_trained"):
        raise LifecycleError("latent extraction needs a bundle whose phi has been trained")
    out = []
    with T.no_grad():
        for s in batch_slices(len(data), EVAL_CHUNK):
            out.append(encode_error(bundle, residual(bundle, data.x[s], data.y[s])).data)
    return LatentBank(np.concatenate(out), source)


def predict(bundle: ModelBundle, x: np.ndarray, z=ZERO_LATENT) -> np.ndarray:
    """Eval-mode untracked forward pass, chunked over the batch."""
    out = []
    with T.no_grad():
        for s in batch_slices(len(x), EVAL_CHUNK):
            zs = z if z is ZERO_LATENT or np.ndim(z) == 1 else z[s]
            out.append(forward(bundle, x[s], zs).data)
    return np.concatenate(out)


def generate(bundle: ModelBundle, x: np.ndarray, bank: LatentBank, k: int, seed: int = 0) -> np.ndarray:
    """``k`` predictions for one input using latents drawn uniformly (with
    replacement) from ``bank``; shape ``(k, *target_shape)``."""
    if k < 1:
        raise ConfigError("k must be >= 1", "k")
    if bank is None or len(bank) == 0:
        raise LifecycleError("generation needs a non-empty latent bank")
    x = np.asarray(x)
    if x.shape == bundle.arch.input_shape:
        x = x[None]
    idx = np.random.default_rng(seed).integers(0, len(bank), k)
    return predict(bundle, np.repeat(x, k, axis=0), bank.latents[idx])


def psnr_from_mse(mse, peak: float = 2.0):
    mse = np.asarray(mse, dtype=np.float64)
    with np.errstate(divide="ignore"):
        out = 10.0 * np.log10(peak * peak / mse)
    return np.where(mse == 0, PSNR_CEILING, out)


def psnr(pred, target, peak: float = 2.0) -> float:
    """``10 log10(peak^2 / MSE)`` in dB; identical inputs give ``PSNR_CEILING``."""
    if peak <= 0:
        raise ValueError("peak must be positive")
    pred, target = np.asarray(pred, dtype=np.float64), np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {target.shape}")
    return float(psnr_from_mse(np.mean((pred - target) ** 2), peak))


@dataclass
class EvalCurve:
    model: str
    ks: list
    loss_mean: list
    loss_stderr: list
    psnr_mean: list
    psnr_stderr: list
    per_sample: np.ndarray = field(repr=False, compare=False, default=None)

    def rows(self):
        for i, k in enumerate(self.ks):
            yield [self.model, k, self.loss_mean[i], self.loss_stderr[i], self.psnr_mean[i], self.psnr_stderr[i]]

    def to_csv(self, config_hash: str = "", peak: float = 2.0) -> str:
        buf = io.StringIO()
        buf.write(f"# een-metrics {CSV_VERSION} config_hash={config_hash} psnr_peak={peak:g}\n")
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CURVE_COLUMNS)
        for row in self.rows():
            writer.writerow([row[0], row[1]] + [repr(float(v)) for v in row[2:]])
        return buf.getvalue()

    def write_csv(self, path, config_hash: str = "", peak: float = 2.0):
        Path(path).write_text(self.to_csv(config_hash, peak))


def _stderr(a: np.ndarray) -> float:
    return float(a.std(ddof=1) / np.sqrt(len(a))) if len(a) > 1 else 0.0


def validate_ks(ks) -> list[int]:
    ks = [int(k) for k in ks]
    if not ks or ks[0] < 1 or any(b <= a for a, b in zip(ks[:-1], ks[1:])):
        raise ConfigError(f"ks must be positive and strictly increasing, got {ks}", "eval.ks")
    return ks


def best_of_k(bundle: ModelBundle, data, bank: LatentBank | None, ks, norm: str = "l2",
              seed: int = 0, peak: float = 2.0, model: str | None = None,
              deterministic: bool | None = None) -> EvalCurve:
    """Per-sample minimum loss over nested draws of ``max(ks)`` latents.

    Draw ``j`` for a test sample is shared by every ``k > j``, so each
    per-sample curve is exactly non-increasing in ``k``. A deterministic
    bundle (or ``deterministic=True``) forces the zero latent: flat curve.
    PSNR is taken on the best sample per test item, then averaged.
    """
    ks = validate_ks(ks)
    kmax = ks[-1]
    n = len(data)
    deterministic = bundle.kind == "deterministic" if deterministic is None else deterministic
    if deterministic:
        pred = predict(bundle, data.x)
        loss = np.repeat(T.per_sample_loss(pred, data.y, norm)[:, None], kmax, axis=1)
        mse = np.repeat(T.per_sample_loss(pred, data.y, "l2")[:, None], kmax, axis=1)
    else:
        if bank is None or len(bank) == 0:
            raise LifecycleError("best-of-k needs a non-empty latent bank")
        draws = np.random.default_rng(seed).integers(0, len(bank), (n, kmax))
        loss = np.empty((n, kmax))
        mse = np.empty((n, kmax))
        for j in range(kmax):
            pred = predict(bundle, data.x, bank.latents[draws[:, j]])
            loss[:, j] = T.per_sample_loss(pred, data.y, norm)
            mse[:, j] = T.per_sample_loss(pred, data.y, "l2")

    best = np.minimum.accumulate(loss, axis=1)
    arg = np.zeros((n, kmax), dtype=np.int64)
    for j in range(1, kmax):
        arg[:, j] = np.where(loss[:, j] < best[:, j - 1], j, arg[:, j - 1])
    best_psnr = psnr_from_mse(np.take_along_axis(mse, arg, axis=1), peak)

    cols = [k - 1 for k in ks]
    per_sample = best[:, cols]
    return EvalCurve(
        model=model or bundle.kind,
        ks=ks,
        loss_mean=[float(best[:, c].mean()) for c in cols],
        loss_stderr=[_stderr(best[:, c]) for c in cols],
        psnr_mean=[float(best_psnr[:, c].mean()) for c in cols],
        psnr_stderr=[_stderr(best_psnr[:, c]) for c in cols],
        per_sample=per_sample,
    )


def read_curve_csv(path) -> tuple[dict, EvalCurve]:
    lines = Path(path).read_text().splitlines()
    meta = dict(item.split("=", 1) for item in lines[0].lstrip("# ").split()[2:])
    rows = list(csv.DictReader(lines[1:]))
    curve = EvalCurve(rows[0]["model"], [int(r["k"]) for r in rows],
                      *[[float(r[c]) for r in rows] for c in CURVE_COLUMNS[2:]])
    return meta, curve
