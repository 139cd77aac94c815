"""Central-difference gradient checks against the tape."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from vesselgen.autodiff.params import ParameterStore
from vesselgen.autodiff.tensor import Tape, Tensor
from vesselgen.autodiff.tensor import sum as tsum


@dataclass
class GradCheckResult:
    name: str
    max_rel_error: float
    n_checked: int

    def ok(self, tol: float = 1e-5) -> bool:
        return self.max_rel_error <= tol


def rel_error(g: np.ndarray, fd: np.ndarray, floor: float = 1e-8) -> np.ndarray:
    """|g - fd| / max(floor, |g| + |fd|); ``floor`` absorbs gradients that are exactly zero."""
    return np.abs(g - fd) / np.maximum(floor, np.abs(g) + np.abs(fd))


def check_params(loss_fn: Callable[[], Tensor], store: ParameterStore, h: float = 1e-6,
                 max_per_param: Optional[int] = None, rng: Optional[np.random.Generator] = None,
                 floor: float = 1e-8) -> list[GradCheckResult]:
    """Compare tape gradients of ``loss_fn()`` with central differences per parameter.

    ``loss_fn`` must be deterministic (fix any sampling noise inside it).
    ``max_per_param`` limits the number of probed entries per tensor.
    """
    store.zero_grad()
    with Tape() as tape:
        loss = loss_fn()
    tape.backward(loss)
    grads = {k: v.copy() for k, v in store.grads().items()}
    rng = rng or np.random.default_rng(0)
    out = []
    for name, p in store.params.items():
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_per_param is not None and flat.size > max_per_param:
            idx = np.sort(rng.choice(flat.size, max_per_param, replace=False))
        fd = np.empty(len(idx))
        for j, i in enumerate(idx):
            old = flat[i]
            flat[i] = old + h
            up = loss_fn().item()
            flat[i] = old - h
            dn = loss_fn().item()
            flat[i] = old
            fd[j] = (up - dn) / (2 * h)
        err = rel_error(grads[name].reshape(-1)[idx], fd, floor)
        out.append(GradCheckResult(name, float(err.max()) if len(err) else 0.0, len(idx)))
    return out


def check_function(fn: Callable[..., Tensor], inputs: list[np.ndarray], h: float = 1e-6) -> float:
    """Max relative error of d sum(fn(*inputs)) / d inputs."""
    ts = [Tensor(x.copy(), requires_grad=True) for x in inputs]
    with Tape() as tape:
        y = fn(*ts)
        loss = tsum(y) if y.data.size != 1 else y
    tape.backward(loss)
    worst = 0.0
    for t in ts:
        flat = t.data.reshape(-1)
        fd = np.empty(flat.size)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            up = float(fn(*ts).data.sum())
            flat[i] = old - h
            dn = float(fn(*ts).data.sum())
            flat[i] = old
            fd[i] = (up - dn) / (2 * h)
        g = np.zeros_like(flat) if t.grad is None else t.grad.reshape(-1)
        if flat.size:
            worst = max(worst, float(rel_error(g, fd).max()))
    return worst


def primitive_checks(seed: int = 0) -> dict[str, float]:
    """Max relative gradient error of every primitive on small random inputs."""
    from vesselgen.autodiff import tensor as T

    rng = np.random.default_rng(seed)

    def r(*shape):
        return rng.normal(size=shape)

    pos = np.abs(r(3, 4)) + 0.5
    away = r(3, 4)
    away[np.abs(away) < 0.1] += 0.3  # keep relu inputs off the kink
    tgt = np.array([0, 3, 1])
    w = np.array([0.5, 1.0, 2.0])
    mask = np.zeros((2, 1, 1, 5))
    mask[1, ..., 3:] = -1e9
    # fixed random projections make each summed output a generic functional
    c1 = r(3, 4)
    c2 = r(2, 2)
    c3 = r(2, 6)
    c4 = r(4, 3)
    c5 = r(4)
    c6 = r(3, 1)
    c7 = r(3, 4)
    c8 = r(3, 4)
    c9 = r(2, 3, 5, 4)
    c10 = r(3, 4)
    cases = {
        "add": (lambda a, b: T.add(a, b), [r(3, 4), r(4)]),
        "sub": (lambda a, b: T.sub(a, b), [r(3, 1), r(3, 4)]),
        "mul": (lambda a, b: T.mul(a, b), [r(3, 4), r(1, 4)]),
        "tanh": (T.tanh, [r(3, 4)]),
        "relu": (T.relu, [away]),
        "softplus": (T.softplus, [r(3, 4) * 3]),
        "exp": (T.exp, [r(3, 4)]),
        "log": (T.log, [pos]),
        "matmul": (T.matmul, [r(2, 3, 4), r(4, 5)]),
        "concat": (lambda a, b: T.mul(T.concat([a, b], axis=1), np.arange(7.0)), [r(3, 4), r(3, 3)]),
        "take": (lambda a: T.mul(T.take(a, np.array([0, 2, 2])), c1), [r(3, 4)]),
        "slice": (lambda a: T.mul(a[1:, ::2], c2), [r(3, 4)]),
        "reshape": (lambda a: T.mul(T.reshape(a, (2, 6)), c3), [r(3, 4)]),
        "transpose": (lambda a: T.mul(T.transpose(a, (1, 0)), c4), [r(3, 4)]),
        "sum": (lambda a: T.mul(T.sum(a, axis=0), c5), [r(3, 4)]),
        "mean": (lambda a: T.mul(T.mean(a, axis=1, keepdims=True), c6), [r(3, 4)]),
        "softmax": (lambda a: T.mul(T.softmax(a), c7), [r(3, 4)]),
        "layer_norm": (lambda a, g, b: T.mul(T.layer_norm(a, g, b, 1e-5), c8), [r(3, 4), r(4), r(4)]),
        "attention": (lambda q, k, v: T.mul(T.scaled_dot_attention(q, k, v, mask), c9),
                      [r(2, 3, 5, 4), r(2, 3, 5, 4), r(2, 3, 5, 4)]),
        "mse": (lambda a: T.mse(a, np.ones((3, 4)), np.abs(c10)), [r(3, 4)]),
        "cross_entropy": (lambda a: T.cross_entropy(a, tgt, w), [r(3, 4)]),
    }
    return {name: check_function(fn, inputs) for name, (fn, inputs) in cases.items()}
