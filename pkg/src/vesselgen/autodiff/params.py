"""Named parameters, Adam, and the binary parameter file."""
from __future__ import annotations

import json
import struct
from typing import Optional

import numpy as np

from vesselgen.autodiff.tensor import Tensor

MAGIC = b"VFPARAMS"
_M = "__adam_m__/"
_V = "__adam_v__/"


class ParamFileError(ValueError):
    pass


def glorot_uniform(rng: np.random.Generator, shape: tuple) -> np.ndarray:
    fan_in, fan_out = (shape[0], shape[-1]) if len(shape) > 1 else (shape[0], shape[0])
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=shape)


class ParameterStore:
    """Ordered mapping of name -> leaf tensor plus Adam moments."""

    def __init__(self):
        self.params: dict[str, Tensor] = {}
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step = 0

    def create(self, name: str, value: np.ndarray) -> Tensor:
        if name in self.params:
            raise KeyError(f"parameter {name!r} already exists")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True, name=name)
        self.params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __len__(self) -> int:
        return len(self.params)

    def names(self) -> list[str]:
        return list(self.params)

    def n_values(self) -> int:
        return int(sum(t.data.size for t in self.params.values()))

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def grads(self) -> dict[str, np.ndarray]:
        return {k: (np.zeros_like(t.data) if t.grad is None else t.grad) for k, t in self.params.items()}

    def values(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.params.items()}

    def flat(self) -> np.ndarray:
        return np.concatenate([t.data.ravel() for t in self.params.values()]) if self.params else np.zeros(0)

    # -- serialization ----------------------------------------------------

    def save(self, path, meta: Optional[dict] = None) -> None:
        arrays: list[tuple[str, np.ndarray]] = [(k, t.data) for k, t in self.params.items()]
        for k in self.params:
            if k in self.m:
                arrays.append((_M + k, self.m[k]))
                arrays.append((_V + k, self.v[k]))
        entries, offset = [], 0
        for name, a in arrays:
            entries.append({"name": name, "shape": list(a.shape), "offset": offset})
            offset += a.size * 8
        manifest = json.dumps({"tensors": entries, "step": self.step, "meta": meta or {}},
                              sort_keys=True).encode("utf-8")
        with open(path, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<Q", len(manifest)))
            fh.write(manifest)
            for _, a in arrays:
                fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())

    @classmethod
    def load(cls, path) -> tuple["ParameterStore", dict]:
        with open(path, "rb") as fh:
            raw = fh.read()
        if raw[:8] != MAGIC:
            raise ParamFileError(f"{path}: not a parameter file")
        if len(raw) < 16:
            raise ParamFileError(f"{path}: truncated header")
        (n,) = struct.unpack_from("<Q", raw, 8)
        try:
            manifest = json.loads(raw[16:16 + n].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise ParamFileError(f"{path}: bad manifest ({exc})") from None
        base = 16 + n
        store = cls()
        store.step = int(manifest.get("step", 0))
        for e in manifest["tensors"]:
            size = int(np.prod(e["shape"], dtype=np.int64))
            start = base + e["offset"]
            if start + 8 * size > len(raw):
                raise ParamFileError(f"{path}: payload truncated at {e['name']}")
            a = np.frombuffer(raw, dtype="<f8", count=size, offset=start).reshape(e["shape"]).astype(np.float64)
            name = e["name"]
            if name.startswith(_M):
                store.m[name[len(_M):]] = a
            elif name.startswith(_V):
                store.v[name[len(_V):]] = a
            else:
                store.create(name, a)
        return store, manifest.get("meta", {})


class Adam:
    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps

    def step(self, store: ParameterStore, grads: Optional[dict[str, np.ndarray]] = None,
             lr: Optional[float] = None) -> None:
        grads = store.grads() if grads is None else grads
        lr = self.lr if lr is None else lr
        store.step += 1
        t = store.step
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for name, p in store.params.items():
            g = grads.get(name)
            if g is None:
                g = np.zeros_like(p.data)
            m = store.m.get(name)
            if m is None:
                m = store.m[name] = np.zeros_like(p.data)
                store.v[name] = np.zeros_like(p.data)
            v = store.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float) -> tuple[dict[str, np.ndarray], float]:
    """Scale all gradients together so their global L2 norm is at most ``max_norm``."""
    norm = float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))
    if max_norm > 0 and norm > max_norm:
        f = max_norm / norm
        grads = {k: g * f for k, g in grads.items()}
    return grads, norm


def step_decay(base_lr: float, epoch: int, every: int, factor: float) -> float:
    """Learning rate multiplied by ``factor`` once per ``every`` epochs."""
    return base_lr * factor ** (epoch // every) if every > 0 else base_lr

