"""Stage 1: recursive VAE over binary key graphs.

Encoding runs bottom-up: each node's hidden state is an MLP of its own
attributes and its two children's states (zeros for a missing child). The
root state gives the latent Gaussian. Decoding runs top-down: the latent is
expanded into the state of a virtual parent of the root, every node's
attributes are predicted from its parent's state (left or right decoder),
its own state from the parent state plus those attributes, and a 4-way
classifier on that state decides which children exist.

Trees in a batch are processed level by level so every layer runs as one
matrix product per level.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from vesselgen.autodiff import Adam, ParameterStore, Tape, step_decay
from vesselgen.autodiff import nn
from vesselgen.autodiff.params import clip_grad_norm
from vesselgen.autodiff import tensor as T
from vesselgen.autodiff.tensor import Tensor
from vesselgen.checkpoint import CsvLog
from vesselgen.core import GeometricDescriptor, GraphError, KeyGraph, KeyNode, VesselError

LEAF, LEFT, RIGHT, BOTH = 0, 1, 2, 3
LOG_FIELDS = ("epoch", "total", "attr_mse", "cls_ce", "kl", "lr")


@dataclass
class RvaeConfig:
    attr_dim: int = 10
    hidden_dim: int = 256
    latent_dim: int = 512
    max_depth: int = 16
    w_attr: float = 1.0
    w_cls: float = 1.0
    w_kl: float = 1.0
    lr: float = 1e-3
    lr_decay: float = 0.8
    lr_every: int = 100
    epochs: int = 20000
    batch_size: int = 128
    grad_clip: float = 0.0  # global norm; 0 disables

    def __post_init__(self):
        for name in ("attr_dim", "hidden_dim", "latent_dim", "max_depth", "epochs", "batch_size"):
            if getattr(self, name) <= 0:
                raise VesselError(f"{name} must be positive")
        if min(self.w_attr, self.w_cls, self.w_kl) < 0:
            raise VesselError("loss weights must be non-negative")
        if not self.lr > 0:
            raise VesselError("lr must be positive")

    def lr_at(self, epoch: int) -> float:
        return step_decay(self.lr, epoch, self.lr_every, self.lr_decay)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RvaeConfig":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


def init_params(cfg: RvaeConfig, rng: np.random.Generator) -> ParameterStore:
    a, h, z = cfg.attr_dim, cfg.hidden_dim, cfg.latent_dim
    s = ParameterStore()
    nn.init_mlp(s, "enc", [a + 2 * h, h, h], rng)
    nn.init_dense(s, "mu", h, z, rng)
    nn.init_dense(s, "logvar", h, z, rng)
    nn.init_dense(s, "expand", z, h, rng)
    nn.init_mlp(s, "cls", [h, h, 4], rng)
    nn.init_mlp(s, "left", [h, h, a], rng)
    nn.init_mlp(s, "right", [h, h, a], rng)
    nn.init_mlp(s, "child", [h + a, h, h], rng)
    return s


# --------------------------------------------------------------------------- #
# Flattened trees


def _lr_children(kg: KeyGraph, u: int) -> tuple:
    cs = tuple(kg.children.get(u, ()))
    if len(cs) == 0:
        return None, None
    if len(cs) == 1:
        return cs[0], None
    if len(cs) == 2:
        return cs
    raise GraphError(f"node {u} is not binary")


def node_class(left, right) -> int:
    return (LEFT if left is not None else 0) + (RIGHT if right is not None else 0)


@dataclass
class _Flat:
    attrs: np.ndarray  # (n, attr_dim) in preorder
    left: np.ndarray  # local index or -1
    right: np.ndarray
    side: np.ndarray  # 0 left/root, 1 right
    parent: np.ndarray  # -1 for the root
    depth: np.ndarray
    height: np.ndarray
    cls: np.ndarray


def flatten(kg: KeyGraph, attr_dim: int = 10, max_depth: Optional[int] = None) -> _Flat:
    order = kg.preorder()
    pos = {u: i for i, u in enumerate(order)}
    n = len(order)
    attrs = np.array([kg.nodes[u].attributes() for u in order]).reshape(n, -1)
    if attrs.shape[1] != attr_dim:
        raise VesselError(f"attribute dimension {attrs.shape[1]} != {attr_dim}")
    left = np.full(n, -1)
    right = np.full(n, -1)
    side = np.zeros(n, dtype=np.int64)
    parent = np.full(n, -1)
    depth = np.zeros(n, dtype=np.int64)
    cls = np.zeros(n, dtype=np.int64)
    for i, u in enumerate(order):
        lc, rc = _lr_children(kg, u)
        cls[i] = node_class(lc, rc)
        for c, arr, sd in ((lc, left, 0), (rc, right, 1)):
            if c is not None:
                j = pos[c]
                arr[i] = j
                side[j] = sd
                parent[j] = i
                depth[j] = depth[i] + 1
    if max_depth is not None and depth.max() > max_depth:
        raise VesselError(f"tree depth {depth.max()} exceeds max_depth {max_depth}")
    height = np.zeros(n, dtype=np.int64)
    for i in reversed(range(n)):
        kids = [c for c in (left[i], right[i]) if c >= 0]
        height[i] = 1 + max(height[c] for c in kids) if kids else 0
    return _Flat(attrs, left, right, side, parent, depth, height, cls)


@dataclass
class _Batch:
    attrs: np.ndarray
    cls: np.ndarray
    node_w: np.ndarray  # 1 / (n_nodes(tree) * B)
    roots: np.ndarray
    enc_levels: list  # [(nodes, left_rows, right_rows)]
    enc_rows: np.ndarray  # bank row of each node (row 0 is the zero state)
    dec_levels: list  # [(nodes_left_first, parent_rows, n_left)]


def make_batch(flats: Sequence[_Flat]) -> _Batch:
    offs = np.cumsum([0] + [len(f.attrs) for f in flats])
    n_total = int(offs[-1])
    b = len(flats)
    cat = lambda name: np.concatenate([getattr(f, name) for f in flats])  # noqa: E731
    attrs = np.concatenate([f.attrs for f in flats])
    glob = lambda arr, o: np.where(arr >= 0, arr + o, -1)  # noqa: E731
    left = np.concatenate([glob(f.left, o) for f, o in zip(flats, offs)])
    right = np.concatenate([glob(f.right, o) for f, o in zip(flats, offs)])
    parent = np.concatenate([glob(f.parent, o) for f, o in zip(flats, offs)])
    side, depth, height, cls = cat("side"), cat("depth"), cat("height"), cat("cls")
    node_w = np.concatenate([np.full(len(f.attrs), 1.0 / (len(f.attrs) * b)) for f in flats])
    roots = offs[:-1].astype(np.int64)

    enc_rows = np.zeros(n_total, dtype=np.int64)
    enc_levels = []
    nxt = 1
    for h in range(int(height.max()) + 1):
        nodes = np.nonzero(height == h)[0]
        enc_rows[nodes] = np.arange(nxt, nxt + len(nodes))
        nxt += len(nodes)
        lrows = np.where(left[nodes] >= 0, enc_rows[np.maximum(left[nodes], 0)], 0)
        rrows = np.where(right[nodes] >= 0, enc_rows[np.maximum(right[nodes], 0)], 0)
        enc_levels.append((nodes, lrows, rrows))

    # decoder bank: rows 0..B-1 hold the expanded latents (virtual parents)
    dec_rows = np.zeros(n_total, dtype=np.int64)
    dec_levels = []
    nxt = b
    for d in range(int(depth.max()) + 1):
        nodes = np.nonzero(depth == d)[0]
        nodes = np.concatenate([nodes[side[nodes] == 0], nodes[side[nodes] == 1]])
        if d == 0:
            prow = np.searchsorted(roots, nodes)
        else:
            prow = dec_rows[parent[nodes]]
        dec_rows[nodes] = np.arange(nxt, nxt + len(nodes))
        nxt += len(nodes)
        dec_levels.append((nodes, prow, int(np.sum(side[nodes] == 0))))
    return _Batch(attrs, cls, node_w, roots, enc_levels, enc_rows, dec_levels)


# --------------------------------------------------------------------------- #
# Network pieces


def _encode(store: ParameterStore, batch: _Batch, hidden: int) -> tuple[Tensor, Tensor]:
    bank = Tensor(np.zeros((1, hidden)))
    for nodes, lrows, rrows in batch.enc_levels:
        x = T.concat([Tensor(batch.attrs[nodes]), T.take(bank, lrows), T.take(bank, rrows)], axis=1)
        bank = T.concat([bank, nn.mlp(store, "enc", x, 2)], axis=0)
    h_root = T.take(bank, batch.enc_rows[batch.roots])
    return nn.dense(store, "mu", h_root), nn.dense(store, "logvar", h_root)


def _expand(store, z: Tensor) -> Tensor:
    return T.tanh(nn.dense(store, "expand", z))


def _child_state(store, h_parent: Tensor, v: Tensor) -> Tensor:
    return nn.mlp(store, "child", T.concat([h_parent, v], axis=1), 2)


def _attr_pred(store, h_parent: Tensor, n_left: int) -> Tensor:
    parts = []
    if n_left:
        parts.append(nn.mlp(store, "left", h_parent[:n_left], 2, final_act=False))
    if n_left < h_parent.shape[0]:
        parts.append(nn.mlp(store, "right", h_parent[n_left:], 2, final_act=False))
    return parts[0] if len(parts) == 1 else T.concat(parts, axis=0)


def _decode_forced(store, batch: _Batch, z: Tensor):
    bank = _expand(store, z)
    v_all, logit_all, order = [], [], []
    for nodes, prow, n_left in batch.dec_levels:
        hp = T.take(bank, prow)
        v = _attr_pred(store, hp, n_left)
        h = _child_state(store, hp, v)
        bank = T.concat([bank, h], axis=0)
        v_all.append(v)
        logit_all.append(nn.mlp(store, "cls", h, 2, final_act=False))
        order.append(nodes)
    return T.concat(v_all, axis=0), T.concat(logit_all, axis=0), np.concatenate(order)


# --------------------------------------------------------------------------- #
# Public operations


def encode_tree(kg: KeyGraph, store: ParameterStore, cfg: RvaeConfig) -> tuple[np.ndarray, np.ndarray]:
    batch = make_batch([flatten(kg, cfg.attr_dim, cfg.max_depth)])
    mu, lv = _encode(store, batch, cfg.hidden_dim)
    return mu.data[0].copy(), lv.data[0].copy()


def _loss_terms(store, cfg, batch: _Batch, rng: Optional[np.random.Generator]):
    mu, lv = _encode(store, batch, cfg.hidden_dim)
    z = mu if rng is None else nn.reparameterize(mu, lv, rng)
    v, logits, order = _decode_forced(store, batch, z)
    w = batch.node_w[order]
    attr = T.mse(v, batch.attrs[order], np.repeat(w[:, None], cfg.attr_dim, axis=1))
    ce = T.cross_entropy(logits, batch.cls[order], w)
    kl = nn.kl_diag_gaussian(mu, lv)
    total = T.add(T.add(T.mul(attr, cfg.w_attr), T.mul(ce, cfg.w_cls)), T.mul(kl, cfg.w_kl))
    return total, attr, ce, kl


def rvae_loss(trees, store: ParameterStore, cfg: RvaeConfig, rng: Optional[np.random.Generator] = None):
    """Teacher-forced loss on one tree or a list of trees, as tensors.

    Components are per-tree means averaged over the list. ``rng=None`` uses
    the posterior mean instead of a sample.
    """
    trees = [trees] if isinstance(trees, KeyGraph) else list(trees)
    batch = make_batch([flatten(t, cfg.attr_dim, cfg.max_depth) for t in trees])
    return _loss_terms(store, cfg, batch, rng)


@dataclass
class DecodedTree:
    key_graph: KeyGraph
    logits: dict[int, np.ndarray]


def decode_tree(z, store: ParameterStore, cfg: RvaeConfig, max_depth: Optional[int] = None) -> DecodedTree:
    """Free-running decode of one latent; nodes are numbered in creation order."""
    return decode_trees(np.asarray(z, dtype=np.float64)[None, :], store, cfg, max_depth)[0]


def decode_trees(z: np.ndarray, store: ParameterStore, cfg: RvaeConfig,
                 max_depth: Optional[int] = None) -> list[DecodedTree]:
    max_depth = cfg.max_depth if max_depth is None else max_depth
    z = np.asarray(z, dtype=np.float64).reshape(-1, cfg.latent_dim)
    nb = len(z)
    attrs: list[list[np.ndarray]] = [[] for _ in range(nb)]
    kids: list[list[list]] = [[] for _ in range(nb)]
    logits: list[dict] = [{} for _ in range(nb)]
    hp = _expand(store, Tensor(z)).data
    # frontier entries: (tree, parent local id or -1, side)
    frontier = [(b, -1, 0) for b in range(nb)]
    for depth in range(max_depth + 1):
        if not frontier:
            break
        perm = sorted(range(len(frontier)), key=lambda k: frontier[k][2])
        frontier = [frontier[k] for k in perm]
        hp = hp[perm]
        n_left = sum(1 for e in frontier if e[2] == 0)
        v = _attr_pred(store, Tensor(hp), n_left).data
        h = _child_state(store, Tensor(hp), Tensor(v)).data
        lg = nn.mlp(store, "cls", Tensor(h), 2, final_act=False).data
        nxt, rows = [], []
        for k, (b, par, sd) in enumerate(frontier):
            nid = len(attrs[b])
            attrs[b].append(v[k])
            kids[b].append([None, None])
            logits[b][nid] = lg[k]
            if par >= 0:
                kids[b][par][sd] = nid
            c = LEAF if depth == max_depth else int(np.argmax(lg[k]))
            if c in (LEFT, BOTH):
                nxt.append((b, nid, 0))
                rows.append(k)
            if c in (RIGHT, BOTH):
                nxt.append((b, nid, 1))
                rows.append(k)
        frontier = nxt
        hp = h[rows] if rows else h[:0]
    out = []
    for b in range(nb):
        nodes = {i: _node_from_attr(a) for i, a in enumerate(attrs[b])}
        children = {i: tuple(c) for i, c in enumerate(kids[b])}
        out.append(DecodedTree(KeyGraph(nodes, 0, children), logits[b]))
    return out


def _node_from_attr(a: np.ndarray) -> KeyNode:
    d = a[6:10]
    return KeyNode(a[0:3].copy(), a[3:6].copy(),
                   GeometricDescriptor(float(d[0]), float(d[1]), float(d[2]), int(round(max(float(d[3]), 0.0)))))


def project_key_graph(kg: KeyGraph) -> KeyGraph:
    """Clamp decoded attributes into the valid region.

    Lengths and curvature become non-negative with chord <= arc, and
    directions are renormalized (falling back to the parent offset, or
    zero when that is degenerate too).
    """
    parents = kg.parents()
    nodes = {}
    for u, node in kg.nodes.items():
        d = node.desc
        ell = max(d.ell, 0.0)
        delta = min(max(d.delta, 0.0), ell)
        kappa = max(d.kappa, 0.0)
        if ell - delta <= 1e-12 * max(1.0, ell):
            kappa = 0.0
        direction = node.dir
        n = float(np.linalg.norm(direction))
        if n > 1e-9:
            direction = direction / n
        elif u in parents:
            off = node.pos - kg.nodes[parents[u]].pos
            m = float(np.linalg.norm(off))
            direction = off / m if m > 1e-9 else np.zeros(3)
        else:
            direction = np.zeros(3)
        if u not in parents:
            direction = np.zeros(3)
        nodes[u] = KeyNode(node.pos, direction, GeometricDescriptor(ell, delta, kappa, max(d.rho, 0)))
    return KeyGraph(nodes, kg.root, dict(kg.children))


def sample_key_graph(store: ParameterStore, cfg: RvaeConfig, rng: np.random.Generator,
                     max_depth: Optional[int] = None) -> KeyGraph:
    z = rng.standard_normal(cfg.latent_dim)
    return project_key_graph(decode_tree(z, store, cfg, max_depth).key_graph)


def same_topology(a: KeyGraph, b: KeyGraph) -> bool:
    def shape(kg, u):
        lc, rc = _lr_children(kg, u)
        return (None if lc is None else shape(kg, lc), None if rc is None else shape(kg, rc))

    return shape(a, a.root) == shape(b, b.root)


def reconstruct(kg: KeyGraph, store: ParameterStore, cfg: RvaeConfig) -> KeyGraph:
    """Teacher-free decode of the posterior mean."""
    mu, _ = encode_tree(kg, store, cfg)
    return decode_tree(mu, store, cfg).key_graph


def reconstruction_report(trees: Sequence[KeyGraph], store, cfg) -> dict:
    """Topology accuracy and attribute MSE (over topology matches) of posterior-mean decodes."""
    hits, sq, cnt = 0, 0.0, 0
    for kg in trees:
        rec = reconstruct(kg, store, cfg)
        if same_topology(kg, rec):
            hits += 1
            a = np.array([kg.nodes[u].attributes() for u in kg.preorder()])
            b = np.array([rec.nodes[u].attributes() for u in rec.preorder()])
            sq += float(((a - b) ** 2).sum())
            cnt += a.size
    return {"topology_accuracy": hits / len(trees), "attr_mse": sq / cnt if cnt else float("inf")}


# --------------------------------------------------------------------------- #
# Training and checkpoints


def _key_graphs(dataset) -> list[KeyGraph]:
    return [getattr(d, "key_graph", d) for d in dataset]


def train_stage1(dataset, cfg: RvaeConfig, seed: int, store: Optional[ParameterStore] = None,
                 start_epoch: int = 0, log_path=None,
                 callback: Optional[Callable[[dict], None]] = None) -> tuple[ParameterStore, list[dict]]:
    """Mini-batch Adam over the dataset; returns parameters and the per-epoch log.

    A resumed run passes the stored parameters and ``start_epoch``; the
    shuffling and noise streams are re-derived from ``seed`` and the epoch,
    so resuming reproduces an uninterrupted run exactly.
    """
    trees = _key_graphs(dataset)
    if not trees:
        raise VesselError("empty dataset")
    flats = [flatten(t, cfg.attr_dim, cfg.max_depth) for t in trees]
    if store is None:
        store = init_params(cfg, np.random.default_rng(seed))
    opt = Adam(cfg.lr)
    log = []
    writer = None if log_path is None else CsvLog(log_path, LOG_FIELDS, append=start_epoch > 0)
    try:
        for epoch in range(start_epoch, cfg.epochs):
            rng = np.random.default_rng([seed, epoch])
            perm = rng.permutation(len(flats))
            lr = cfg.lr_at(epoch)
            sums = np.zeros(4)
            n_batches = 0
            for s in range(0, len(perm), cfg.batch_size):
                batch = make_batch([flats[i] for i in perm[s:s + cfg.batch_size]])
                store.zero_grad()
                with Tape() as tape:
                    terms = _loss_terms(store, cfg, batch, rng)
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
