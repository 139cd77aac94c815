"""Stage 2: conditional transformer VAE over canonical segments.

The encoder reads point tokens [x, y, z, r] with sinusoidal positions,
preceded by a learned aggregation token and an embedding of the
descriptor C; the aggregation token's output gives q(z | x, C). A prior
network gives p(z | C). The decoder is non-autoregressive: a learned query
per position plus projections of z and C, a self-attention stack, a
4-channel point head (radius through softplus) and a length classifier over
2..max_len on the pooled output. Decoded points are shifted so the first
point sits at the origin and the last one at (1, 0, 0).
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from vesselgen.autodiff import Adam, ParameterStore, Tape
from vesselgen.autodiff import nn
from vesselgen.autodiff.params import clip_grad_norm, glorot_uniform, step_decay
from vesselgen.autodiff import tensor as T
from vesselgen.autodiff.tensor import Tensor
from vesselgen.checkpoint import CsvLog
from vesselgen.core import EX, GeometricDescriptor, VesselError, VesselSegment
from vesselgen.preprocess import MAX_SEQ_LEN

LOG_FIELDS = ("epoch", "total", "recon_mse", "len_ce", "kl", "lr")


@dataclass
class SegVaeConfig:
    token_dim: int = 4
    model_dim: int = 128
    n_layers: int = 4
    n_heads: int = 4
    ff_dim: int = 0  # 0 means 4 * model_dim
    latent_dim: int = 64
    max_len: int = MAX_SEQ_LEN
    w_recon: float = 1.0
    w_len: float = 1.0
    w_kl: float = 1.0
    lr: float = 2e-4
    epochs: int = 2000
    batch_size: int = 512
    grad_clip: float = 0.0  # global norm; 0 disables
    lr_decay: float = 1.0
    lr_every: int = 0  # 0 keeps the rate fixed
    ln_eps: float = 1e-5

    def __post_init__(self):
        for name in ("token_dim", "model_dim", "n_layers", "n_heads", "latent_dim", "epochs", "batch_size"):
            if getattr(self, name) <= 0:
                raise VesselError(f"{name} must be positive")
        if self.model_dim % self.n_heads:
            raise VesselError(f"model_dim {self.model_dim} not divisible by n_heads {self.n_heads}")
        if self.max_len < 2:
            raise VesselError("max_len must be at least 2")
        if min(self.w_recon, self.w_len, self.w_kl) < 0:
            raise VesselError("loss weights must be non-negative")

    def lr_at(self, epoch: int) -> float:
        return step_decay(self.lr, epoch, self.lr_every, self.lr_decay)

    @property
    def ff(self) -> int:
        return self.ff_dim or 4 * self.model_dim

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SegVaeConfig":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


def init_params(cfg: SegVaeConfig, rng: np.random.Generator) -> ParameterStore:
    d, z = cfg.model_dim, cfg.latent_dim
    s = ParameterStore()
    nn.init_dense(s, "tok", cfg.token_dim, d, rng)
    nn.init_dense(s, "cond", 4, d, rng)
    s.create("agg", glorot_uniform(rng, (1, d)))
    for i in range(cfg.n_layers):
        nn.init_transformer_block(s, f"enc{i}", d, cfg.ff, rng)
    nn.init_layer_norm(s, "enc_ln", d)
    nn.init_dense(s, "mu", d, z, rng)
    nn.init_dense(s, "logvar", d, z, rng)
    nn.init_mlp(s, "prior", [4, d, 2 * z], rng)
    s.create("query", glorot_uniform(rng, (cfg.max_len, d)))
    nn.init_dense(s, "zproj", z, d, rng)
    nn.init_dense(s, "dcond", 4, d, rng)
    for i in range(cfg.n_layers):
        nn.init_transformer_block(s, f"dec{i}", d, cfg.ff, rng)
    nn.init_layer_norm(s, "dec_ln", d)
    nn.init_dense(s, "out", d, cfg.token_dim, rng)
    nn.init_dense(s, "len", d, cfg.max_len - 1, rng)
    return s


# --------------------------------------------------------------------------- #
# Network pieces


def _cond_array(cs) -> np.ndarray:
    return np.array([c.as_array() if isinstance(c, GeometricDescriptor) else np.asarray(c, dtype=np.float64)
                     for c in cs]).reshape(-1, 4)


def _pad(segs: Sequence[VesselSegment], max_len: int) -> tuple[np.ndarray, np.ndarray]:
    lengths = np.array([len(s) for s in segs])
    if lengths.max() > max_len:
        raise VesselError(f"segment of {lengths.max()} points exceeds max_len {max_len}")
    x = np.zeros((len(segs), int(lengths.max()), 4))
    for i, s in enumerate(segs):
        x[i, :len(s)] = s.as_array()
    return x, lengths


def _encode(store, cfg: SegVaeConfig, x: np.ndarray, lengths: np.ndarray, cond: np.ndarray):
    b, t, _ = x.shape
    pos = nn.sinusoidal(t, cfg.model_dim)
    tok = T.add(nn.dense(store, "tok", Tensor(x)), pos)
    agg = T.mul(T.reshape(store["agg"], (1, 1, cfg.model_dim)), np.ones((b, 1, 1)))
    c = T.reshape(nn.dense(store, "cond", Tensor(cond)), (b, 1, cfg.model_dim))
    h = T.concat([agg, c, tok], axis=1)
    mask = nn.padding_mask(lengths, t, prefix=2)
    for i in range(cfg.n_layers):
        h = nn.transformer_block(store, f"enc{i}", h, cfg.n_heads, mask)
    h0 = nn.layer_norm(store, "enc_ln", h[:, 0, :], cfg.ln_eps)
    return nn.dense(store, "mu", h0), nn.dense(store, "logvar", h0)


def _prior(store, cfg: SegVaeConfig, cond: np.ndarray):
    out = nn.mlp(store, "prior", Tensor(cond), 2, final_act=False)
    return out[:, :cfg.latent_dim], out[:, cfg.latent_dim:]


def _decode(store, cfg: SegVaeConfig, z: Tensor, cond: np.ndarray):
    """Raw decoder output: points (B, max_len, 4) before endpoint forcing, length logits."""
    b = z.shape[0]
    d = cfg.model_dim
    q = T.add(store["query"], T.reshape(nn.dense(store, "zproj", z), (b, 1, d)))
    h = T.add(q, T.reshape(nn.dense(store, "dcond", Tensor(cond)), (b, 1, d)))
    for i in range(cfg.n_layers):
        h = nn.transformer_block(store, f"dec{i}", h, cfg.n_heads)
    h = nn.layer_norm(store, "dec_ln", h, cfg.ln_eps)
    raw = nn.dense(store, "out", h)
    pts = T.concat([raw[:, :, 0:3], T.softplus(raw[:, :, 3:4])], axis=2)
    logits = nn.dense(store, "len", T.mean(h, axis=1))
    return pts, logits


def force_endpoints(pts: Tensor, lengths: np.ndarray) -> Tensor:
    """p_i - p_0 + (i / (L - 1)) * ((1, 0, 0) - (p_{L-1} - p_0)) on the xyz channels."""
    b, n, _ = pts.shape
    lengths = np.asarray(lengths)
    xyz = pts[:, :, 0:3]
    p0 = xyz[:, 0:1, :]
    rel = T.sub(xyz, p0)
    last = T.reshape(T.take(rel, (np.arange(b), lengths - 1)), (b, 1, 3))
    ramp = (np.arange(n)[None, :] / (lengths[:, None] - 1.0))[:, :, None]
    xyz = T.add(rel, T.mul(T.sub(EX, last), ramp))
    return T.concat([xyz, pts[:, :, 3:4]], axis=2)


# --------------------------------------------------------------------------- #
# Public operations


def encode_segment(seg: VesselSegment, c, store: ParameterStore, cfg: SegVaeConfig):
    x, lengths = _pad([seg], cfg.max_len)
    mu, lv = _encode(store, cfg, x, lengths, _cond_array([c]))
    return mu.data[0].copy(), lv.data[0].copy()


def encode_segments(segs, cs, store, cfg):
    x, lengths = _pad(segs, cfg.max_len)
    mu, lv = _encode(store, cfg, x, lengths, _cond_array(cs))
    return mu.data.copy(), lv.data.copy()


def prior_net(c, store: ParameterStore, cfg: SegVaeConfig):
    mu, lv = _prior(store, cfg, _cond_array([c]))
    return mu.data[0].copy(), lv.data[0].copy()


def predicted_length(logits: np.ndarray) -> np.ndarray:
    return np.argmax(np.asarray(logits), axis=-1) + 2


def decode_segment(z, c, store: ParameterStore, cfg: SegVaeConfig) -> tuple[np.ndarray, np.ndarray]:
    """(points (max_len, 4), length logits (max_len - 1,)); endpoints forced at the predicted length."""
    pts, logits = _decode(store, cfg, Tensor(np.asarray(z, dtype=np.float64)[None, :]), _cond_array([c]))
    lengths = predicted_length(logits.data)
    return force_endpoints(pts, lengths).data[0].copy(), logits.data[0].copy()


def _loss_terms(store, cfg: SegVaeConfig, x: np.ndarray, lengths: np.ndarray, cond: np.ndarray,
                rng: Optional[np.random.Generator]):
    b, t, _ = x.shape
    mu, lv = _encode(store, cfg, x, lengths, cond)
    mu_p, lv_p = _prior(store, cfg, cond)
    z = mu if rng is None else nn.reparameterize(mu, lv, rng)
    pts, logits = _decode(store, cfg, z, cond)
    pts = force_endpoints(pts, lengths)
    target = np.zeros((b, cfg.max_len, 4))
    target[:, :t] = x
    mask = (np.arange(cfg.max_len)[None, :] < lengths[:, None]).astype(np.float64)
    w = mask / (lengths[:, None] * 4.0 * b)
    recon = T.mse(pts, target, np.repeat(w[:, :, None], 4, axis=2))
    ce = T.cross_entropy(logits, lengths - 2)
    kl = nn.kl_diag_gaussian(mu, lv, mu_p, lv_p)
    total = T.add(T.add(T.mul(recon, cfg.w_recon), T.mul(ce, cfg.w_len)), T.mul(kl, cfg.w_kl))
    return total, recon, ce, kl


def segvae_loss(segs, cs, store: ParameterStore, cfg: SegVaeConfig, rng: Optional[np.random.Generator] = None):
    """Loss tensors (total, recon_mse, len_ce, kl) on one segment or a list.

    ``rng=None`` decodes the posterior mean.
    """
    if isinstance(segs, VesselSegment):
        segs, cs = [segs], [cs]
    x, lengths = _pad(segs, cfg.max_len)
    return _loss_terms(store, cfg, x, lengths, _cond_array(cs), rng)


def sample_segment(c, store: ParameterStore, cfg: SegVaeConfig, rng: np.random.Generator) -> VesselSegment:
    return sample_segments([c], store, cfg, rng)[0]


def sample_segments(cs, store, cfg: SegVaeConfig, rng: np.random.Generator) -> list[VesselSegment]:
    """Draw z from the conditional prior and decode, truncated at the predicted length."""
    cond = _cond_array(cs)
    mu_p, lv_p = _prior(store, cfg, cond)
    z = nn.reparameterize(mu_p, lv_p, rng)
    pts, logits = _decode(store, cfg, z, cond)
    lengths = predicted_length(logits.data)
    out = force_endpoints(pts, lengths).data
    segs = []
    for i, n in enumerate(lengths):
        p = out[i, :n].copy()
        p[0, :3] = 0.0
        p[n - 1, :3] = EX
        segs.append(VesselSegment(p[:, :3], p[:, 3]))
    return segs


def reconstruction_report(segs, cs, store, cfg) -> dict:
    """Masked MSE of posterior-mean reconstructions and length-head accuracy."""
    x, lengths = _pad(segs, cfg.max_len)
    cond = _cond_array(cs)
    mu, _ = _encode(store, cfg, x, lengths, cond)
    pts, logits = _decode(store, cfg, mu, cond)
    pts = force_endpoints(pts, lengths).data[:, :x.shape[1]]
    mask = np.arange(x.shape[1])[None, :] < lengths[:, None]
    err = ((pts - x) ** 2).sum(axis=2)
    per = (err * mask).sum(axis=1) / (4.0 * lengths)
    acc = float(np.mean(predicted_length(logits.data) == lengths))
    return {"recon_mse": float(per.mean()), "length_accuracy": acc}


# --------------------------------------------------------------------------- #
# Training


def segment_pairs(samples) -> list[tuple[VesselSegment, GeometricDescriptor]]:
    """(canonical segment, child descriptor) for every stored edge, in edge order."""
    out = []
    for s in samples:
        kg = s.key_graph
        for p, c in kg.edges():
            seg = s.segments.get((p, c))
            if seg is not None:
                out.append((seg, kg.nodes[c].desc))
    return out


def train_stage2(dataset, cfg: SegVaeConfig, seed: int, store: Optional[ParameterStore] = None,
                 start_epoch: int = 0, log_path=None,
                 callback: Optional[Callable[[dict], None]] = None) -> tuple[ParameterStore, list[dict]]:
    """Adam over (segment, descriptor) pairs with an optional step-decayed rate.

    ``dataset`` holds pairs or training samples. Shuffling and noise are
    derived from ``(seed, epoch)`` so a resumed run matches an uninterrupted one.
    """
    data = list(dataset)
    if data and not isinstance(data[0], tuple):
        data = segment_pairs(data)
    if not data:
        raise VesselError("empty dataset")
    segs = [d[0] for d in data]
    cond = _cond_array([d[1] for d in data])
    if store is None:
        store = init_params(cfg, np.random.default_rng(seed))
    opt = Adam(cfg.lr)
    log = []
    writer = None if log_path is None else CsvLog(log_path, LOG_FIELDS, append=start_epoch > 0)
    try:
        for epoch in range(start_epoch, cfg.epochs):
            rng = np.random.default_rng([seed, epoch])
            lr = cfg.lr_at(epoch)
            perm = rng.permutation(len(segs))
            sums = np.zeros(4)
            n_batches = 0
            for s in range(0, len(perm), cfg.batch_size):
                idx = perm[s:s + cfg.batch_size]
                x, lengths = _pad([segs[i] for i in idx], cfg.max_len)
                store.zero_grad()
                with Tape() as tape:
                    terms = _loss_terms(store, cfg, x, lengths, cond[idx], rng)
                tape.backward(terms[0])
                opt.step(store, clip_grad_norm(store.grads(), cfg.grad_clip)[0], lr=lr)
                sums += [t.item() for t in terms]
                n_batches += 1
            row = dict(zip(LOG_FIELDS, [epoch, *(sums / n_batches), lr]))
            log.append(row)
            if writer is not None:
                writer.write(row)
            if callback is not None:
                callback(row)
    finally:
        if writer is not None:
            writer.close()
    return store, log
