"""Layers built from tape primitives; weights live in a ParameterStore."""
from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from vesselgen.autodiff import tensor as T
from vesselgen.autodiff.params import ParameterStore, glorot_uniform
from vesselgen.autodiff.tensor import Tensor


def init_dense(store: ParameterStore, name: str, n_in: int, n_out: int, rng: np.random.Generator) -> None:
    store.create(f"{name}.W", glorot_uniform(rng, (n_in, n_out)))
    store.create(f"{name}.b", np.zeros(n_out))


def dense(store: ParameterStore, name: str, x: Tensor) -> Tensor:
    return T.add(T.matmul(x, store[f"{name}.W"]), store[f"{name}.b"])


def init_mlp(store, name, sizes: Sequence[int], rng) -> None:
    for i in range(len(sizes) - 1):
        init_dense(store, f"{name}.{i}", sizes[i], sizes[i + 1], rng)


def mlp(store, name, x: Tensor, n_layers: int, act=T.tanh, final_act: bool = True) -> Tensor:
    for i in range(n_layers):
        x = dense(store, f"{name}.{i}", x)
        if i < n_layers - 1 or final_act:
            x = act(x)
    return x


def init_layer_norm(store, name, dim: int) -> None:
    store.create(f"{name}.g", np.ones(dim))
    store.create(f"{name}.b", np.zeros(dim))


def layer_norm(store, name, x: Tensor, eps: float = 1e-5) -> Tensor:
    return T.layer_norm(x, store[f"{name}.g"], store[f"{name}.b"], eps=eps)


def init_attention(store, name, dim: int, rng) -> None:
    init_dense(store, f"{name}.qkv", dim, 3 * dim, rng)
    init_dense(store, f"{name}.out", dim, dim, rng)


def attention(store, name, x: Tensor, n_heads: int, mask: Optional[np.ndarray] = None) -> Tensor:
    """Multi-head self-attention on (B, T, D); ``mask`` is additive, shape (B, 1, 1, T)."""
    b, t, d = x.shape
    if d % n_heads:
        raise T.DimensionError(f"model width {d} not divisible by {n_heads} heads")
    dh = d // n_heads
    qkv = T.reshape(dense(store, f"{name}.qkv", x), (b, t, 3, n_heads, dh))
    qkv = T.transpose(qkv, (2, 0, 3, 1, 4))  # (3, B, H, T, dh)
    o = T.scaled_dot_attention(qkv[0], qkv[1], qkv[2], mask)
    o = T.reshape(T.transpose(o, (0, 2, 1, 3)), (b, t, d))
    return dense(store, f"{name}.out", o)


def init_transformer_block(store, name, dim: int, ff: int, rng) -> None:
    init_layer_norm(store, f"{name}.ln1", dim)
    init_attention(store, f"{name}.attn", dim, rng)
    init_layer_norm(store, f"{name}.ln2", dim)
    init_dense(store, f"{name}.ff1", dim, ff, rng)
    init_dense(store, f"{name}.ff2", ff, dim, rng)


def transformer_block(store, name, x: Tensor, n_heads: int, mask: Optional[np.ndarray] = None) -> Tensor:
    """Pre-norm residual block: x + attn(ln(x)), then x + ff(ln(x))."""
    x = T.add(x, attention(store, f"{name}.attn", layer_norm(store, f"{name}.ln1", x), n_heads, mask))
    h = T.relu(dense(store, f"{name}.ff1", layer_norm(store, f"{name}.ln2", x)))
    return T.add(x, dense(store, f"{name}.ff2", h))


def padding_mask(lengths: Sequence[int], total: int, prefix: int = 0) -> np.ndarray:
    """Additive key mask of shape (B, 1, 1, prefix + total); padded keys get -1e9."""
    lengths = np.asarray(lengths)
    m = np.zeros((len(lengths), prefix + total))
    m[:, prefix:][np.arange(total)[None, :] >= lengths[:, None]] = -1e9
    return m[:, None, None, :]


def sinusoidal(n: int, dim: int) -> np.ndarray:
    pos = np.arange(n)[:, None]
    i = np.arange(dim)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / dim)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


def reparameterize(mu: Tensor, logvar: Tensor, rng: np.random.Generator) -> Tensor:
    eps = rng.standard_normal(mu.shape)
    return T.add(mu, T.mul(T.exp(T.mul(logvar, 0.5)), eps))


def kl_diag_gaussian(mu_q: Tensor, lv_q: Tensor, mu_p=None, lv_p=None, weight: Optional[np.ndarray] = None) -> Tensor:
    """Sum over latent dims of KL(q || p), averaged over rows (or weighted by ``weight``).

    ``p`` defaults to the standard normal.
    """
    if mu_p is None:
        per = T.sub(T.add(T.exp(lv_q), T.mul(mu_q, mu_q)), T.add(lv_q, 1.0))
    else:
        d = T.sub(mu_q, mu_p)
        ratio = T.mul(T.add(T.exp(lv_q), T.mul(d, d)), T.exp(T.mul(lv_p, -1.0)))
        per = T.add(T.sub(lv_p, lv_q), T.sub(ratio, 1.0))
    rows = T.mul(T.sum(per, axis=-1), 0.5)
    if weight is None:
        return T.mean(rows)
    return T.sum(T.mul(rows, np.asarray(weight, dtype=np.float64)))
