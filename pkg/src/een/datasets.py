"""Seeded synthetic multimodal datasets with known mode structure.

``mode_offset``: ``y = A x + c_m + noise`` with the mode ``m`` drawn
uniformly, so the best deterministic predictor is ``A x + mean(c)``.

``dot_world``: a ball bouncing deterministically on a small grid plus a
bottom-row paddle whose move each frame is uniform over {-1, 0, +1} slots.
The ball is predictable from two frames; the paddle is not.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .container import read_container, write_container
from .errors import ConfigError, DataError


@dataclass
class SampleBatch:
    """Model inputs ``x``, targets ``y``; ``mode_labels`` is for evaluation only."""

    x: np.ndarray
    y: np.ndarray
    mode_labels: dict = field(default_factory=dict)


@dataclass(eq=False)
class Dataset:
    kind: str
    x: np.ndarray
    y: np.ndarray
    mode_labels: dict = field(default_factory=dict)
    episode: np.ndarray | None = None

    def __post_init__(self):
        if len(self.x) != len(self.y):
            raise DataError(f"x has {len(self.x)} samples but y has {len(self.y)}")

    def __len__(self):
        return len(self.x)

    @property
    def input_shape(self) -> tuple:
        return tuple(self.x.shape[1:])

    @property
    def target_shape(self) -> tuple:
        return tuple(self.y.shape[1:])

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.kind, self.x[idx], self.y[idx],
                       {k: v[idx] for k, v in self.mode_labels.items()},
                       None if self.episode is None else self.episode[idx])

    def batch(self, idx) -> SampleBatch:
        return SampleBatch(self.x[idx], self.y[idx], {k: v[idx] for k, v in self.mode_labels.items()})


# ---------------------------------------------------------------- mode offset


@dataclass
class ModeOffsetSpec:
    input_dim: int = 4
    mode_count: int = 4
    target_dim: int = 8
    offsets: list | None = None
    offset_scale: float = 0.5
    mixing: list | None = None
    mixing_scale: float = 0.1
    noise_sigma: float = 0.01
    sample_count: int = 10000
    seed: int = 0

    def validate(self):
        if self.input_dim < 1 or self.target_dim < 1:
            raise ConfigError("dimensions must be >= 1", "dataset.mode_offset")
        if self.mode_count < 2:
            raise ConfigError("need at least 2 modes", "dataset.mode_offset.mode_count")
        if self.noise_sigma < 0:
            raise ConfigError("must be >= 0", "dataset.mode_offset.noise_sigma")
        if self.sample_count < 1:
            raise ConfigError("must be >= 1", "dataset.mode_offset.sample_count")
        c = self.resolved_offsets()
        if c.shape != (self.mode_count, self.target_dim):
            raise ConfigError(f"offsets must have shape ({self.mode_count}, {self.target_dim})",
                              "dataset.mode_offset.offsets")
        for i in range(len(c)):
            for j in range(i):
                if np.array_equal(c[i], c[j]):
                    raise ConfigError("offsets must be pairwise distinct", "dataset.mode_offset.offsets")
        if self.resolved_mixing().shape != (self.target_dim, self.input_dim):
            raise ConfigError(f"mixing must have shape ({self.target_dim}, {self.input_dim})",
                              "dataset.mode_offset.mixing")
        return self

    def resolved_offsets(self) -> np.ndarray:
        if self.offsets is not None:
            return np.asarray(self.offsets, dtype=np.float64)
        rng = np.random.default_rng([self.seed, 0])
        return rng.uniform(-self.offset_scale, self.offset_scale, (self.mode_count, self.target_dim))

    def resolved_mixing(self) -> np.ndarray:
        if self.mixing is not None:
            return np.asarray(self.mixing, dtype=np.float64)
        rng = np.random.default_rng([self.seed, 1])
        return rng.uniform(-self.mixing_scale, self.mixing_scale, (self.target_dim, self.input_dim))


def gen_mode_offset(spec: ModeOffsetSpec) -> Dataset:
    spec.validate()
    c, a = spec.resolved_offsets(), spec.resolved_mixing()
    rng = np.random.default_rng([spec.seed, 2])
    n = spec.sample_count
    x = rng.uniform(-1.0, 1.0, (n, spec.input_dim))
    m = rng.integers(0, spec.mode_count, n)
    y = x @ a.T + c[m] + spec.noise_sigma * rng.standard_normal((n, spec.target_dim))
    return Dataset("mode_offset", x, y, {"mode": m})


def conditional_mean(spec: ModeOffsetSpec, x: np.ndarray) -> np.ndarray:
    """``E[y | x] = A x + mean(c)``: the optimum of an l2 deterministic fit."""
    return np.asarray(x) @ spec.resolved_mixing().T + spec.resolved_offsets().mean(axis=0)


# ------------------------------------------------------------------ dot world


@dataclass
class DotWorldSpec:
    grid: int = 16
    paddle_width: int = 2
    context: int = 4
    horizon: int = 1
    episode_length: int = 16
    episodes: int = 200
    seed: int = 0

    def validate(self):
        if self.grid < 8:
            raise ConfigError("grid must be >= 8", "dataset.dot_world.grid")
        if not 1 <= self.paddle_width <= self.grid // 4:
            raise ConfigError("paddle_width must be in [1, grid/4]", "dataset.dot_world.paddle_width")
        if self.context < 2 or self.horizon < 1:
            raise ConfigError("context must be >= 2 and horizon >= 1", "dataset.dot_world")
        if self.context + self.horizon > self.episode_length:
            raise ConfigError(
                f"context {self.context} + horizon {self.horizon} exceeds episode length {self.episode_length}",
                "dataset.dot_world.episode_length")
        if self.episodes < 1:
            raise ConfigError("must be >= 1", "dataset.dot_world.episodes")
        return self

    @property
    def ball_rows(self) -> int:
        # the ball stays two rows clear of the paddle row
        return self.grid - 2

    @property
    def paddle_slots(self) -> int:
        return self.grid // self.paddle_width


def ball_step(row: int, col: int, vrow: int, vcol: int, rows: int, cols: int):
    """Advance the ball one frame, reflecting its velocity at the walls."""
    if not 0 <= row + vrow < rows:
        vrow = -vrow
    if not 0 <= col + vcol < cols:
        vcol = -vcol
    return row + vrow, col + vcol, vrow, vcol


def render_frame(spec: DotWorldSpec, ball: tuple, paddle_slot: int) -> np.ndarray:
    frame = np.zeros((spec.grid, spec.grid))
    frame[ball[0], ball[1]] = 1.0
    left = paddle_slot * spec.paddle_width
    frame[spec.grid - 1, left:left + spec.paddle_width] = 1.0
    return frame


def simulate_episode(spec: DotWorldSpec, index: int) -> dict:
    """One episode as a pure function of ``(spec.seed, index)``.

    ``moves[t]`` is the paddle move drawn between frames t-1 and t (0 at t=0);
    the slot is clamped at the walls after the move.
    """
    rng = np.random.default_rng([spec.seed, index])
    g, n = spec.grid, spec.episode_length
    row, col = int(rng.integers(0, spec.ball_rows)), int(rng.integers(0, g))
    vrow, vcol = (int(v) for v in rng.choice([-1, 1], 2))
    slot = int(rng.integers(0, spec.paddle_slots))
    frames = np.zeros((n, g, g))
    balls = np.zeros((n, 2), dtype=np.int64)
    slots = np.zeros(n, dtype=np.int64)
    moves = np.zeros(n, dtype=np.int64)
    for t in range(n):
        if t > 0:
            row, col, vrow, vcol = ball_step(row, col, vrow, vcol, spec.ball_rows, g)
            moves[t] = int(rng.integers(-1, 2))
            slot = min(max(slot + moves[t], 0), spec.paddle_slots - 1)
        balls[t], slots[t] = (row, col), slot
        frames[t] = render_frame(spec, (row, col), slot)
    return {"frames": frames, "ball": balls, "slot": slots, "moves": moves}


def gen_dot_world(spec: DotWorldSpec) -> Dataset:
    spec.validate()
    xs, ys, eps = [], [], []
    labels = {"moves": [], "slot": [], "context_slot": [], "ball": []}
    c, h = spec.context, spec.horizon
    for e in range(spec.episodes):
        ep = simulate_episode(spec, e)
        for t in range(c, spec.episode_length - h + 1):
            xs.append(ep["frames"][t - c:t])
            ys.append(ep["frames"][t:t + h])
            eps.append(e)
            labels["moves"].append(ep["moves"][t:t + h])
            labels["slot"].append(ep["slot"][t:t + h])
            labels["context_slot"].append(ep["slot"][t - 1])
            labels["ball"].append(ep["ball"][t:t + h])
    # pixels in [0, 1] are mapped to [-1, 1]
    x = 2.0 * np.asarray(xs) - 1.0
    y = 2.0 * np.asarray(ys) - 1.0
    return Dataset("dot_world", x, y, {k: np.asarray(v) for k, v in labels.items()}, np.asarray(eps))


def to_pixels(a: np.ndarray) -> np.ndarray:
    """Inverse of the [0, 1] -> [-1, 1] normalization."""
    return (np.asarray(a) + 1.0) / 2.0


# ------------------------------------------------------------ split, identity


def split(dataset: Dataset, fractions=(0.8, 0.1, 0.1), seed: int = 0) -> tuple[Dataset, ...]:
    """Disjoint seed-deterministic partition; by episode when episodes exist."""
    fractions = [float(f) for f in fractions]
    if any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigError(f"split fractions {fractions} must be non-negative and sum to 1", "dataset.split")
    units = np.unique(dataset.episode) if dataset.episode is not None else np.arange(len(dataset))
    perm = np.random.default_rng([seed, 3]).permutation(units)
    counts = [int(round(f * len(units))) for f in fractions[:-1]]
    counts.append(len(units) - sum(counts))
    if min(counts) <= 0:
        raise ConfigError(f"split {fractions} of {len(units)} units leaves an empty partition", "dataset.split")
    parts, start = [], 0
    for n in counts:
        chosen = perm[start:start + n]
        start += n
        if dataset.episode is not None:
            idx = np.flatnonzero(np.isin(dataset.episode, chosen))
        else:
            idx = np.sort(chosen)
        parts.append(dataset.subset(idx))
    return tuple(parts)


def spec_hash(kind: str, spec) -> str:
    payload = json.dumps({"kind": kind, **asdict(spec)}, sort_keys=True, default=str)
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


def generate(kind: str, spec) -> Dataset:
    if kind == "mode_offset":
        return gen_mode_offset(spec)
    if kind == "dot_world":
        return gen_dot_world(spec)
    raise ConfigError(f"unknown dataset kind {kind!r}", "dataset.kind")


def save_dataset(path, dataset: Dataset, header: dict | None = None) -> None:
    arrays = {"x": dataset.x, "y": dataset.y}
    arrays.update({f"label.{k}": v for k, v in dataset.mode_labels.items()})
    if dataset.episode is not None:
        arrays["episode"] = dataset.episode
    write_container(path, {"format": "een-dataset", "kind": dataset.kind, **(header or {})}, arrays)


def load_dataset(path) -> Dataset:
    header, arrays = read_container(path)
    if header.get("format") != "een-dataset":
        raise DataError(f"{path} is not a dataset file")
    labels = {k[len("label."):]: v.astype(np.int64) for k, v in arrays.items() if k.startswith("label.")}
    episode = arrays["episode"].astype(np.int64) if "episode" in arrays else None
    return Dataset(header["kind"], arrays["x"], arrays["y"], labels, episode)


def cached_dataset(root, kind: str, spec) -> Dataset:
    """Load ``<root>/<spec hash>.een`` if present, else generate and store it."""
    path = Path(root) / f"{spec_hash(kind, spec)}.een"
    if path.exists():
        return load_dataset(path)
    data = generate(kind, spec)
    save_dataset(path, data, {"spec_hash": spec_hash(kind, spec)})
    return data
