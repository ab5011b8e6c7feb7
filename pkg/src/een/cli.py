"""Command-line runner: ``een train|eval|generate|gradcheck``.

Exit codes: 0 success, 1 invalid usage or config, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import config as config_mod
from . import gradcheck
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .container import ContainerError
from .datasets import cached_dataset, generate as generate_dataset, split, to_pixels
from .errors import ConfigError, DataError, EENError, LifecycleError
from .inference import (LatentBank, best_of_k, extract_latents, generate as generate_samples, predict,
                        validate_ks)
from .model import ModelBundle, deterministic_prediction, snapshot
from .training import train_alternating, train_conditional, train_deterministic, train_joint

log = logging.getLogger("een")

OUT_ROOT_ENV = "EEN_OUT_ROOT"
DEFAULT_OUT_ROOT = "runs"
CHECKPOINT_NAME = "model.ckpt"
BANK_NAME = "latents.bank"
CONFIG_NAME = "resolved_config.toml"
TRAIN_METRICS_NAME = "train_metrics.csv"
EVAL_NAME = "eval_curve.csv"
TIMINGS_NAME = "timings.json"

PIPELINES = {
    "deterministic": ["deterministic"],
    "een": ["deterministic", "snapshot", "conditional", "bank"],
    "een-joint": ["deterministic", "joint", "bank"],
    "altmin": ["alternating", "bank"],
}
TRAIN_COLUMNS = ["phase", "epoch", "train_loss", "val_loss", "deterministic", "conditional", "descent_fraction"]


# ------------------------------------------------------------------ helpers


def out_root(cli_out: str | None, cfg=None) -> Path:
    """``--out``, else the config's ``out_dir``, else ``$EEN_OUT_ROOT``, else ``runs``."""
    if cli_out:
        return Path(cli_out)
    if cfg is not None and cfg.out_dir:
        return Path(cfg.out_dir)
    return Path(os.environ.get(OUT_ROOT_ENV) or DEFAULT_OUT_ROOT)


def prepare_data(cfg):
    """(train, val, test) for ``cfg``; optionally through the on-disk cache."""
    d = cfg.dataset
    data = cached_dataset(d.cache_dir, d.kind, d.spec) if d.cache_dir else generate_dataset(d.kind, d.spec)
    return split(data, d.split, d.split_seed)


def _fmt(v) -> str:
    return "" if v is None else repr(float(v))


def train_metrics_csv(reports, config_hash: str) -> str:
    """Per-epoch losses of every phase; row ``epoch=0`` is the loss before any update."""
    lines = [f"# een-train-metrics v1 config_hash={config_hash}"]
    rows = [TRAIN_COLUMNS]
    for r in reports:
        rows.append([r.phase, 0, _fmt(r.initial_loss), "", "", "", ""])
        desc = r.extras.get("descent_fraction", [])
        for e in range(r.epochs):
            at = (lambda seq: seq[e] if e < len(seq) else None)
            rows.append([r.phase, e + 1, _fmt(r.train_loss[e]), _fmt(at(r.val_loss)),
                         _fmt(at(r.components.get("deterministic", []))),
                         _fmt(at(r.components.get("conditional", []))), _fmt(at(desc))])
    body = "\n".join(",".join(str(c) for c in row) for row in rows)
    return "\n".join(lines) + "\n" + body + "\n"


def _atomic_write_text(path: Path, text: str):
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


# -------------------------------------------------------------------- train


def train_pipeline(cfg, model: str, root, resume: bool = False, on_checkpoint=None) -> Path:
    """Run the ``model`` pipeline for ``cfg`` into ``<root>/<model>/``.

    ``on_checkpoint(path)`` is called after every checkpoint write.
    """
    if model not in PIPELINES:
        raise ConfigError(f"must be one of {sorted(PIPELINES)}", "model")
    run_dir = Path(root) / model
    run_dir.mkdir(parents=True, exist_ok=True)
    ckpt_path = run_dir / CHECKPOINT_NAME
    chash = cfg.config_hash
    t_start = time.perf_counter()

    train, val, _ = prepare_data(cfg)
    if resume:
        ckpt = load_checkpoint(ckpt_path)
        if ckpt.config_hash != chash:
            raise ConfigError(f"checkpoint config hash {ckpt.config_hash} does not match {chash}", "resume")
        if ckpt.bundle.kind != model:
            raise ConfigError(f"checkpoint holds a {ckpt.bundle.kind!r} model", "model")
    else:
        mode = "joint" if model == "een-joint" else "snapshot"
        bundle = ModelBundle.create(cfg.arch(), seed=cfg.seed, mode=mode, kind=model)
        ckpt = Checkpoint(bundle, chash, cfg.to_dict(include_out_dir=False))
    _atomic_write_text(run_dir / CONFIG_NAME, f"# config_hash={chash}\n" + cfg.to_toml())

    bundle, sched = ckpt.bundle, cfg.schedule

    def save(progress=None):
        ckpt.progress = progress
        save_checkpoint(ckpt_path, ckpt)
        if on_checkpoint is not None:
            on_checkpoint(ckpt_path)

    def hook(state):
        if state.epoch % cfg.checkpoint_every == 0:
            save(state)

    for stage in PIPELINES[model]:
        if stage in ckpt.stages:
            continue
        progress = ckpt.progress if ckpt.progress is not None and ckpt.progress.phase == stage else None
        log.info("%s: stage %s%s", model, stage, f" (resuming after epoch {progress.epoch})" if progress else "")
        report = None
        if stage == "deterministic":
            report = train_deterministic(bundle, train, sched, val, hook=hook, resume=progress)
        elif stage == "snapshot":
            snapshot(bundle)
        elif stage == "conditional":
            report = train_conditional(bundle, train, sched, val, hook=hook, resume=progress)
        elif stage == "joint":
            report = train_joint(bundle, train, sched, val, hook=hook, resume=progress)
        elif stage == "alternating":
            report = train_alternating(bundle, train, cfg.altmin, sched, val, hook=hook, resume=progress)
        elif stage == "bank":
            if model == "altmin":
                bank = LatentBank.gaussian(len(train), bundle.arch.latent_dim, cfg.seed)
            else:
                bank = extract_latents(bundle, train, source=f"{model}:{chash}")
            bank.save(run_dir / BANK_NAME, {"config_hash": chash})
        if report is not None:
            ckpt.reports.append(report)
            log.info("%s: %s done after %d epochs, train loss %.6g", model, stage, report.epochs,
                     report.train_loss[-1] if report.train_loss else float("nan"))
        ckpt.stages.append(stage)
        save()

    _atomic_write_text(run_dir / TRAIN_METRICS_NAME, train_metrics_csv(ckpt.reports, chash))
    timings = {"config_hash": chash,
               "invocation_seconds": time.perf_counter() - t_start,
               "phases": {r.phase: {"epochs": r.epochs, "seconds": float(sum(r.epoch_seconds)),
                                    "epoch_seconds": r.epoch_seconds} for r in ckpt.reports}}
    _atomic_write_text(run_dir / TIMINGS_NAME, json.dumps(timings, indent=2) + "\n")
    return run_dir


# --------------------------------------------------------------------- eval


def _load_for_use(ckpt_path, config_path=None):
    ckpt = load_checkpoint(ckpt_path)
    missing = [s for s in PIPELINES.get(ckpt.bundle.kind, []) if s not in ckpt.stages]
    if missing:
        raise LifecycleError(f"{ckpt_path}: training incomplete, missing stages {missing}")
    cfg = config_mod.load(config_path) if config_path else config_mod.from_dict(ckpt.config)
    return ckpt, cfg


def _load_bank(ckpt_path, bundle) -> LatentBank | None:
    if bundle.kind == "deterministic":
        return None
    path = Path(ckpt_path).parent / BANK_NAME
    if not path.exists():
        raise LifecycleError(f"latent bank {path} is missing for a {bundle.kind!r} model")
    return LatentBank.load(path)


def _eval_split(cfg):
    train, val, test = prepare_data(cfg)
    return {"train": train, "val": val, "test": test}[cfg.eval.split]


def eval_checkpoint(ckpt_path, config_path=None, ks=None, seed=None, out=None) -> Path:
    ckpt, cfg = _load_for_use(ckpt_path, config_path)
    if ks is not None:
        cfg.eval.ks = validate_ks(ks)
    if seed is not None:
        cfg.eval.seed = seed
    bank = _load_bank(ckpt_path, ckpt.bundle)
    data = _eval_split(cfg)
    curve = best_of_k(ckpt.bundle, data, bank, cfg.eval.ks, cfg.eval.norm, cfg.eval.seed,
                      cfg.eval.peak, model=ckpt.bundle.kind)
    out_dir = Path(out) if out else Path(ckpt_path).parent
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / EVAL_NAME
    _atomic_write_text(path, curve.to_csv(ckpt.config_hash, cfg.eval.peak))
    return path


# ----------------------------------------------------------------- generate


def baseline_prediction(bundle: ModelBundle, x: np.ndarray) -> np.ndarray:
    """``f(x, 0)`` through the residual-pass weights when they exist."""
    if bundle.mode == "joint" or bundle.net_minus is not None:
        return deterministic_prediction(bundle, x)
    return predict(bundle, x)


def make_panel(bundle: ModelBundle, x: np.ndarray, y: np.ndarray, bank, k: int, seed: int) -> dict:
    """Context, truth, deterministic prediction, residual and ``k`` generations
    for one sample, all in the data's own value range."""
    det = baseline_prediction(bundle, x[None])[0]
    if bundle.kind == "deterministic":
        gens = np.repeat(det[None], k, axis=0)
    else:
        gens = generate_samples(bundle, x, bank, k, seed)
    return {"context": x, "truth": y, "deterministic": det, "residual": y - det, "generations": gens}


def _frame_strip(a: np.ndarray) -> np.ndarray:
    """(C, H, W) -> (H, C*W): channels laid side by side."""
    return np.concatenate(list(a), axis=1) if a.ndim == 3 else a


def write_pgm(path, image01: np.ndarray, comment: str = ""):
    """8-bit binary PGM of an image with values in [0, 1]."""
    img = np.clip(np.rint(np.asarray(image01) * 255.0), 0, 255).astype(np.uint8)
    h, w = img.shape
    head = "P5\n" + (f"# {comment}\n" if comment else "") + f"{w} {h}\n255\n"
    Path(path).write_bytes(head.encode() + img.tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        end = raw.index(b"\n", pos)
        line = raw[pos:end].decode()
        pos = end + 1
        if not line.startswith("#"):
            tokens += line.split()
    w, h = int(tokens[1]), int(tokens[2])
    return np.frombuffer(raw[pos:pos + w * h], dtype=np.uint8).reshape(h, w)


def generate_panel(ckpt_path, index: int, k: int, seed: int = 0, out=None, config_path=None) -> Path:
    if k < 1:
        raise ConfigError("must be >= 1", "k")
    ckpt, cfg = _load_for_use(ckpt_path, config_path)
    bundle = ckpt.bundle
    bank = _load_bank(ckpt_path, bundle)
    data = _eval_split(cfg)
    if not 0 <= index < len(data):
        raise DataError(f"index {index} out of range for a {cfg.eval.split} split of {len(data)} samples")
    panel = make_panel(bundle, data.x[index], data.y[index], bank, k, seed)
    out_dir = Path(out) if out else Path(ckpt_path).parent / f"generate_{index}"
    out_dir.mkdir(parents=True, exist_ok=True)
    comment = f"config_hash={ckpt.config_hash} index={index} seed={seed}"

    if cfg.dataset.kind == "dot_world":
        for t, frame in enumerate(panel["context"]):
            write_pgm(out_dir / f"context_{t}.pgm", to_pixels(frame), comment)
        write_pgm(out_dir / "truth.pgm", _frame_strip(to_pixels(panel["truth"])), comment)
        write_pgm(out_dir / "deterministic.pgm", _frame_strip(to_pixels(panel["deterministic"])), comment)
        # the residual spans [-2, 2] in data units; mid-grey is zero
        write_pgm(out_dir / "residual.pgm", _frame_strip((panel["residual"] + 2.0) / 4.0), comment)
        for j, g in enumerate(panel["generations"]):
            write_pgm(out_dir / f"gen_{j}.pgm", _frame_strip(to_pixels(g)), comment)
    else:
        with open(out_dir / "panel.csv", "w", newline="") as fh:
            fh.write(f"# een-panel v1 {comment}\n")
            writer = csv.writer(fh, lineterminator="\n")
            n = panel["truth"].size
            writer.writerow(["row"] + [f"v{i}" for i in range(max(n, panel["context"].size))])
            writer.writerow(["context"] + [repr(float(v)) for v in panel["context"].ravel()])
            for name in ("truth", "deterministic", "residual"):
                writer.writerow([name] + [repr(float(v)) for v in panel[name].ravel()])
            for j, g in enumerate(panel["generations"]):
                writer.writerow([f"gen_{j}"] + [repr(float(v)) for v in g.ravel()])
    return out_dir


# ---------------------------------------------------------------- argparse


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _int_list(text: str) -> list[int]:
    try:
        return [int(t) for t in text.replace(" ", "").split(",") if t]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="een", description="Error-encoding network experiments.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train one model pipeline")
    t.add_argument("--config", help="TOML config (defaults apply when omitted)")
    t.add_argument("--model", required=True, choices=sorted(PIPELINES))
    t.add_argument("--seed", type=int, help="override the config seed")
    t.add_argument("--out", help=f"output root (default: config out_dir, ${OUT_ROOT_ENV}, or ./runs)")
    t.add_argument("--resume", action="store_true", help="continue from <out>/<model>/model.ckpt")

    e = sub.add_parser("eval", help="best-of-k curve for a trained checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--config", help="evaluate on this config's dataset instead of the training one")
    e.add_argument("--ks", type=_int_list, help="comma-separated, strictly increasing")
    e.add_argument("--seed", type=int)
    e.add_argument("--out", help="output directory (default: the checkpoint's)")

    g = sub.add_parser("generate", help="dump context, truth, baseline, residual and k generations")
    g.add_argument("--checkpoint", required=True)
    g.add_argument("--config")
    g.add_argument("--index", type=int, default=0, help="sample index in the evaluation split")
    g.add_argument("--k", type=int, default=8)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out")

    c = sub.add_parser("gradcheck", help="finite-difference check of every differentiable op")
    c.add_argument("scope", nargs="?", default="all", help="'all' or an op name")
    return p


def cmd_train(args) -> int:
    cfg = config_mod.load(args.config) if args.config else config_mod.from_dict({})
    if args.seed is not None:
        cfg.seed = args.seed
        cfg.validate()
    root = out_root(args.out, cfg)
    cfg.out_dir = str(root)
    run_dir = train_pipeline(cfg, args.model, root, resume=args.resume)
    print(run_dir)
    return 0


def cmd_eval(args) -> int:
    print(eval_checkpoint(args.checkpoint, args.config, args.ks, args.seed, args.out))
    return 0


def cmd_generate(args) -> int:
    print(generate_panel(args.checkpoint, args.index, args.k, args.seed, args.out, args.config))
    return 0


def cmd_gradcheck(args, parser) -> int:
    if args.scope != "all" and args.scope not in gradcheck.REGISTRY:
        parser.error(f"unknown op {args.scope!r}; known: {', '.join(sorted(gradcheck.REGISTRY))}")
    results = gradcheck.run(args.scope)
    failed = [name for name, err in results.items() if not err < gradcheck.TOLERANCE]
    for name, err in results.items():
        print(f"{name:<18} {err:.3e}  {'FAIL' if name in failed else 'ok'}")
    print(f"{len(results) - len(failed)}/{len(results)} ops within {gradcheck.TOLERANCE:g}")
    return 2 if failed else 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        if args.command == "train":
            return cmd_train(args)
        if args.command == "eval":
            return cmd_eval(args)
        if args.command == "generate":
            return cmd_generate(args)
        return cmd_gradcheck(args, parser)
    except ConfigError as exc:
        print(f"een: config error: {exc}", file=sys.stderr)
        return 1
    except (EENError, ContainerError, OSError) as exc:
        print(f"een: error: {exc}", file=sys.stderr)
        return 2
