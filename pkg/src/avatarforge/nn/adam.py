"""Named parameter store with Adam moments, plus checkpoint I/O."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from ..container import load_tensors, save_tensors
from .tensor import Tensor


class AdamError(RuntimeError):
    pass


class ParamStore:
    """Named trainable Tensors with per-parameter Adam moments and a step
    counter; `buffers` holds non-trainable state (batchnorm statistics)."""

    def __init__(self):
        self.params: dict[str, Tensor] = {}
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self.step = 0

    def add(self, name: str, value) -> Tensor:
        if name in self.params:
            raise AdamError(f"duplicate parameter {name!r}")
        t = Tensor(np.asarray(value, dtype=np.float64), requires_grad=True, name=name)
        self.params[name] = t
        self.m[name] = np.zeros_like(t.data)
        self.v[name] = np.zeros_like(t.data)
        return t

    def names(self):
        return sorted(self.params)

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    def astype(self, dtype):
        for t in self.params.values():
            t.data = t.data.astype(dtype)
        return self

    def save(self, path, extra_meta=None):
        path = Path(path)
        tensors = {f"param/{k}": v.data for k, v in self.params.items()}
        tensors.update({f"adam_m/{k}": v for k, v in self.m.items()})
        tensors.update({f"adam_v/{k}": v for k, v in self.v.items()})
        tensors.update({f"buffer/{k}": v for k, v in self.buffers.items()})
        meta = {"step": self.step}
        if extra_meta:
            meta.update(extra_meta)
        save_tensors(path, tensors, meta)
        manifest = {
            "step": self.step,
            "params": {k: {"shape": list(v.data.shape), "dtype": str(v.data.dtype)}
                       for k, v in sorted(self.params.items())},
            "buffers": sorted(self.buffers),
        }
        path.with_suffix(path.suffix + ".json").write_text(json.dumps(manifest, indent=1))

    def load(self, path):
        tensors, meta = load_tensors(path)
        for key, arr in tensors.items():
            kind, name = key.split("/", 1)
            if kind == "param":
                if name not in self.params:
                    raise AdamError(f"checkpoint has unknown parameter {name!r}")
                if self.params[name].data.shape != arr.shape:
                    raise AdamError(f"shape mismatch for {name!r}")
                self.params[name].data = arr.astype(np.float64)
            elif kind == "adam_m":
                self.m[name] = arr.astype(np.float64)
            elif kind == "adam_v":
                self.v[name] = arr.astype(np.float64)
            elif kind == "buffer":
                self.buffers[name] = arr.astype(np.float64)
        self.step = int(meta["step"])
        return meta


def adam_step(store: ParamStore, lr: float, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8, names=None) -> None:
    """One bias-corrected Adam update over `names` (default: all parameters),
    reading gradients from the parameter tensors. Missing gradients count as
    zero; any NaN gradient aborts the step before mutating anything."""
    if names is None:
        names = store.names()
    else:
        names = sorted(names)
        for n in names:
            if n not in store.params:
                raise AdamError(f"unknown parameter {n!r}")
    for n in names:
        g = store.params[n].grad
        if g is not None and not np.all(np.isfinite(g)):
            raise AdamError(f"non-finite gradient for parameter {n!r}")
    store.step += 1
    t = store.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for n in names:
        p = store.params[n]
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        store.m[n] = beta1 * store.m[n] + (1.0 - beta1) * g
        store.v[n] = beta2 * store.v[n] + (1.0 - beta2) * (g * g)
        mhat = store.m[n] / c1
        vhat = store.v[n] / c2
        p.data = p.data - lr * mhat / (np.sqrt(vhat) + eps)
