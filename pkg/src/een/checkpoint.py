"""Bundle checkpoints: weights, frozen snapshot, optimizer and progress.

Stored in the shared manifest + float64 container. The JSON-valued header
entries carry everything that is not an array (architecture, completed
stages, training reports, in-progress phase bookkeeping).

No generator state needs saving: every random draw during training is
derived from ``(seed, phase, epoch, batch)``, so the seed plus the epoch
counter reproduce the stream exactly.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .container import read_container, write_container
from .errors import LifecycleError
from .model import ArchSpec, ModelBundle, net_state, snapshot
from .optim import AdamState
from .training import PhaseState, TrainReport

FORMAT = "een-checkpoint"
FORMAT_VERSION = "1"


@dataclass
class Checkpoint:
    bundle: ModelBundle
    config_hash: str = ""
    config: dict = field(default_factory=dict)
    stages: list = field(default_factory=list)
    reports: list = field(default_factory=list)
    progress: PhaseState | None = None


def _report_to_dict(report: TrainReport) -> dict:
    return asdict(report)


def _report_from_dict(d: dict) -> TrainReport:
    return TrainReport(**d)


def _load_net(net, arrays: dict[str, np.ndarray], prefix: str):
    params = net.params()
    for name, p in params.items():
        key = f"{prefix}/{name}"
        if key not in arrays:
            raise LifecycleError(f"checkpoint is missing array {key}")
        if arrays[key].shape != p.data.shape:
            raise LifecycleError(f"{key} has shape {arrays[key].shape}, expected {p.data.shape}")
        p.data = arrays[key].copy()
    net.load_buffers({k[len(f"{prefix}/buffer."):]: v for k, v in arrays.items()
                      if k.startswith(f"{prefix}/buffer.")})


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    b = ckpt.bundle
    arrays = {f"theta/{k}": v for k, v in net_state(b.net).items()}
    arrays["W"] = b.injector.W.data
    arrays.update({f"phi/{k}": v.data for k, v in b.phi.params().items()})
    if b.net_minus is not None and b.mode != "joint":
        arrays.update({f"theta_minus/{k}": v for k, v in net_state(b.net_minus).items()})

    progress = None
    if ckpt.progress is not None:
        st = ckpt.progress
        opt = None
        if st.optimizer is not None:
            o = st.optimizer
            opt = {"lr": o.lr, "beta1": o.beta1, "beta2": o.beta2, "eps": o.eps, "step": o.step}
            arrays.update({f"optim.m/{k}": v for k, v in o.m.items()})
            arrays.update({f"optim.v/{k}": v for k, v in o.v.items()})
        progress = {"phase": st.phase, "epoch": st.epoch, "best": st.best, "since_best": st.since_best,
                    "report": _report_to_dict(st.report), "optimizer": opt}

    header = {
        "format": FORMAT,
        "format_version": FORMAT_VERSION,
        "kind": b.kind,
        "mode": b.mode,
        "arch": json.dumps(b.arch.to_dict(), sort_keys=True),
        "meta": json.dumps(b.meta, sort_keys=True),
        "config_hash": ckpt.config_hash,
        "config": json.dumps(ckpt.config, sort_keys=True),
        "stages": json.dumps(ckpt.stages),
        "reports": json.dumps([_report_to_dict(r) for r in ckpt.reports]),
        "progress": json.dumps(progress),
        "rng": json.dumps({"derivation": "seed,phase,epoch,batch",
                           "next_epoch": None if progress is None else progress["epoch"]}),
    }
    write_container(path, header, arrays)


def load_checkpoint(path) -> Checkpoint:
    header, arrays = read_container(path)
    if header.get("format") != FORMAT:
        raise LifecycleError(f"{path} is not a model checkpoint")
    if header.get("format_version") != FORMAT_VERSION:
        raise LifecycleError(f"{path}: unsupported checkpoint version {header.get('format_version')!r}")
    arch = ArchSpec(**json.loads(header["arch"]))
    bundle = ModelBundle.create(arch, seed=0, mode=header["mode"], kind=header["kind"])
    bundle.meta = json.loads(header["meta"])
    _load_net(bundle.net, arrays, "theta")
    bundle.injector.W.data = arrays["W"].copy()
    for name, p in bundle.phi.params().items():
        p.data = arrays[f"phi/{name}"].copy()
    if any(k.startswith("theta_minus/") for k in arrays):
        snapshot(bundle)
        _load_net(bundle.net_minus, arrays, "theta_minus")

    progress = None
    raw = json.loads(header["progress"])
    if raw is not None:
        opt = None
        if raw["optimizer"] is not None:
            opt = AdamState(**raw["optimizer"])
            opt.m = {k[len("optim.m/"):]: v.copy() for k, v in arrays.items() if k.startswith("optim.m/")}
            opt.v = {k[len("optim.v/"):]: v.copy() for k, v in arrays.items() if k.startswith("optim.v/")}
        progress = PhaseState(raw["phase"], raw["epoch"], _report_from_dict(raw["report"]),
                              raw["best"], raw["since_best"], opt)
    return Checkpoint(bundle, header.get("config_hash", ""), json.loads(header["config"]),
                      json.loads(header["stages"]),
                      [_report_from_dict(r) for r in json.loads(header["reports"])], progress)
