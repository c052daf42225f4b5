"""Checkpoints: everything needed to resume or evaluate a run, bit-exactly.

A checkpoint stores the trainable parameters (encoder plus optional head),
batch-norm running statistics, Adam moments, the EMA target state, the
schedule position, and the run's root seed. All randomness in training is
derived from (root seed, step counters), so storing those two is a complete
RNG state: a resumed run replays the exact stream of the uninterrupted one.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .container import load_arrays, save_arrays
from .encoder import EncoderConfig, EncoderParams
from .errors import CheckpointError
from .tensor import Tensor

HEAD_FRAME_CLASSIFIER = "frame_classifier"
HEAD_CTC = "ctc"

_META_VERSION = 1


@dataclass
class Checkpoint:
    kind: str                             # supervised | xlst | finetuned
    encoder_config: EncoderConfig
    params: dict                          # name -> np.ndarray (enc + head.*)
    running: dict                         # name -> np.ndarray
    head_kind: Optional[str] = None
    opt: Optional[dict] = None            # {"m": {...}, "v": {...}, "step", betas, eps}
    ema: Optional[dict] = None            # {"params": {...}, "running": {...}, "lam"}
    step: int = 0
    epoch: int = 0
    total_steps: int = 0
    root_seed: int = 0
    config_hash: str = ""
    extra: dict = field(default_factory=dict)

    # -- conversions ------------------------------------------------------

    def encoder_params(self, requires_grad=False, dtype=None) -> EncoderParams:
        tensors = {}
        for name, arr in self.params.items():
            if name.startswith("head."):
                continue
            data = arr if dtype is None else arr.astype(dtype)
            tensors[name] = Tensor(data.copy(), requires_grad=requires_grad)
        running = {k: v.copy() for k, v in self.running.items()}
        return EncoderParams(self.encoder_config, tensors, running).validate()

    def head_tensors(self, requires_grad=False, dtype=None) -> dict:
        out = {}
        for name, arr in self.params.items():
            if name.startswith("head."):
                data = arr if dtype is None else arr.astype(dtype)
                out[name] = Tensor(data.copy(), requires_grad=requires_grad)
        return out

    def ema_encoder_params(self, dtype=None) -> EncoderParams:
        if self.ema is None:
            raise CheckpointError("checkpoint holds no EMA state")
        tensors = {}
        for name, arr in self.ema["params"].items():
            data = arr if dtype is None else arr.astype(dtype)
            tensors[name] = Tensor(data.copy(), requires_grad=False)
        running = {k: v.copy() for k, v in self.ema["running"].items()}
        return EncoderParams(self.encoder_config, tensors, running).validate()

    # -- serialization ----------------------------------------------------

    def save(self, path) -> str:
        meta = {
            "meta_version": _META_VERSION,
            "kind": self.kind,
            "encoder_config": self.encoder_config.to_dict(),
            "head_kind": self.head_kind,
            "schedule": {"step": self.step, "epoch": self.epoch,
                         "total_steps": self.total_steps},
            "rng": {"root_seed": self.root_seed},
            "config_hash": self.config_hash,
            "extra": self.extra,
        }
        if self.opt is not None:
            meta["opt"] = {k: self.opt[k] for k in ("step", "beta1", "beta2", "eps")}
        if self.ema is not None:
            meta["ema"] = {"lam": self.ema["lam"]}
        entries = {"meta": _json_entry(meta)}
        for name in sorted(self.params):
            entries[f"param/{name}"] = self.params[name]
        for name in sorted(self.running):
            entries[f"running/{name}"] = self.running[name]
        if self.opt is not None:
            for name in sorted(self.opt["m"]):
                entries[f"opt/m/{name}"] = self.opt["m"][name]
                entries[f"opt/v/{name}"] = self.opt["v"][name]
        if self.ema is not None:
            for name in sorted(self.ema["params"]):
                entries[f"ema/param/{name}"] = self.ema["params"][name]
            for name in sorted(self.ema["running"]):
                entries[f"ema/running/{name}"] = self.ema["running"][name]
        save_arrays(path, entries)
        return path

    @classmethod
    def load(cls, path) -> "Checkpoint":
        entries = load_arrays(path)
        if "meta" not in entries:
            raise CheckpointError(f"{path}: container is not a checkpoint (no meta entry)")
        meta = json.loads(bytes(entries["meta"]).decode("utf-8"))
        if meta.get("meta_version") != _META_VERSION:
            raise CheckpointError(
                f"{path}: checkpoint meta version {meta.get('meta_version')} "
                f"differs from supported version {_META_VERSION}")
        params, running = {}, {}
        opt_m, opt_v = {}, {}
        ema_params, ema_running = {}, {}
        for key, arr in entries.items():
            if key.startswith("param/"):
                params[key[len("param/"):]] = arr
            elif key.startswith("running/"):
                running[key[len("running/"):]] = arr
            elif key.startswith("opt/m/"):
                opt_m[key[len("opt/m/"):]] = arr
            elif key.startswith("opt/v/"):
                opt_v[key[len("opt/v/"):]] = arr
            elif key.startswith("ema/param/"):
                ema_params[key[len("ema/param/"):]] = arr
            elif key.startswith("ema/running/"):
                ema_running[key[len("ema/running/"):]] = arr
        opt = None
        if "opt" in meta:
            opt = dict(meta["opt"])
            opt["m"], opt["v"] = opt_m, opt_v
        ema = None
        if "ema" in meta:
            ema = {"lam": meta["ema"]["lam"], "params": ema_params,
                   "running": ema_running}
        return cls(
            kind=meta["kind"],
            encoder_config=EncoderConfig.from_dict(meta["encoder_config"]),
            params=params,
            running=running,
            head_kind=meta["head_kind"],
            opt=opt,
            ema=ema,
            step=meta["schedule"]["step"],
            epoch=meta["schedule"]["epoch"],
            total_steps=meta["schedule"]["total_steps"],
            root_seed=meta["rng"]["root_seed"],
            config_hash=meta["config_hash"],
            extra=meta.get("extra", {}),
        )

    def equals(self, other: "Checkpoint") -> bool:
        """Bit-exact equality, used by round-trip and reproducibility tests."""
        def dict_eq(a, b):
            return set(a) == set(b) and all(
                a[k].dtype == b[k].dtype and np.array_equal(a[k], b[k]) for k in a)

        if (self.kind, self.head_kind, self.step, self.epoch, self.total_steps,
                self.root_seed, self.config_hash, self.extra) != \
           (other.kind, other.head_kind, other.step, other.epoch,
                other.total_steps, other.root_seed, other.config_hash, other.extra):
            return False
        if self.encoder_config != other.encoder_config:
            return False
        if not (dict_eq(self.params, other.params) and dict_eq(self.running, other.running)):
            return False
        if (self.opt is None) != (other.opt is None):
            return False
        if self.opt is not None:
            scalars = ("step", "beta1", "beta2", "eps")
            if any(self.opt[k] != other.opt[k] for k in scalars):
                return False
            if not (dict_eq(self.opt["m"], other.opt["m"])
                    and dict_eq(self.opt["v"], other.opt["v"])):
                return False
        if (self.ema is None) != (other.ema is None):
            return False
        if self.ema is not None:
            if self.ema["lam"] != other.ema["lam"]:
                return False
            if not (dict_eq(self.ema["params"], other.ema["params"])
                    and dict_eq(self.ema["running"], other.ema["running"])):
                return False
        return True


def _json_entry(obj) -> np.ndarray:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return np.frombuffer(blob, dtype=np.uint8)


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        h.update(fh.read())
    return h.hexdigest()
