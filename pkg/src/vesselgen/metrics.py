"""Point-based (Chamfer, occupancy JSD) and graph-based (degree / spectral MMD,
Sinkhorn GWD) metrics for comparing sets of vessels.

Anything that samples derives its seed from the content of its input, so
evaluating a set against itself reproduces the same samples and scores 0.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from vesselgen import kernels
from vesselgen.assembly import TriangleMesh, skeleton_to_mesh
from vesselgen.core import KeyGraph, SkeletonGraph, VesselError


class MetricError(VesselError):
    pass


class ConvergenceError(ArithmeticError):
    pass


def content_seed(*arrays, salt: int = 0) -> int:
    h = hashlib.sha256(str(salt).encode())
    for a in arrays:
        a = np.ascontiguousarray(a)
        h.update(str(a.dtype).encode() + str(a.shape).encode())
        h.update(a.tobytes())
    return int.from_bytes(h.digest()[:8], "little")


# --------------------------------------------------------------------------- #
# Point clouds


def sample_points_from_mesh(m: TriangleMesh, n: int, rng: np.random.Generator) -> np.ndarray:
    """``n`` points, triangle chosen by area, uniform inside the triangle."""
    if n < 1:
        raise MetricError("n must be at least 1")
    areas = m.triangle_areas()
    total = float(areas.sum())
    if not total > 0:
        raise MetricError("mesh has zero area")
    tri = rng.choice(len(areas), size=n, p=areas / total)
    u = rng.random(n)
    v = rng.random(n)
    flip = u + v > 1.0
    u[flip], v[flip] = 1.0 - u[flip], 1.0 - v[flip]
    a, b, c = (m.vertices[m.triangles[tri, k]] for k in range(3))
    return a + u[:, None] * (b - a) + v[:, None] * (c - a)


def _cloud(p) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64).reshape(-1, 3)
    if not len(p):
        raise MetricError("empty point cloud")
    if not np.all(np.isfinite(p)):
        raise MetricError("non-finite point")
    return p


def chamfer(a, b) -> float:
    """Mean squared nearest-neighbour distance, summed over both directions."""
    a, b = _cloud(a), _cloud(b)
    return float(kernels.min_sqdist(a, b).mean() + kernels.min_sqdist(b, a).mean())


def normalize_cloud(p) -> np.ndarray:
    """Center on the bounding box and scale the largest extent to 1."""
    p = _cloud(p)
    lo, hi = p.min(axis=0), p.max(axis=0)
    ext = float((hi - lo).max())
    return (p - 0.5 * (lo + hi)) / (ext if ext > 0 else 1.0)


def occupancy_histogram(clouds: Sequence, grid_res: int = 28) -> tuple[np.ndarray, int]:
    """Pooled cell counts on [-0.5, 0.5]^3 and the number of clamped points."""
    if not len(clouds):
        raise MetricError("empty set")
    counts = np.zeros(grid_res ** 3)
    clamped = 0
    for c in clouds:
        c = _cloud(c)
        idx = np.floor((c + 0.5) * grid_res).astype(np.int64)
        out = np.any((idx < 0) | (idx >= grid_res), axis=1)
        clamped += int(out.sum())
        idx = np.clip(idx, 0, grid_res - 1)
        flat = (idx[:, 0] * grid_res + idx[:, 1]) * grid_res + idx[:, 2]
        counts += np.bincount(flat, minlength=grid_res ** 3)
    return counts, clamped


def jsd_distributions(p, q) -> float:
    """Jensen-Shannon divergence (natural log) of two histograms, normalized here."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    p = p / p.sum()
    q = q / q.sum()
    m = 0.5 * (p + q)

    def kl(x):
        nz = x > 0
        return float((x[nz] * np.log(x[nz] / m[nz])).sum())

    return 0.5 * kl(p) + 0.5 * kl(q)


def jsd(set_a: Sequence, set_b: Sequence, grid_res: int = 28) -> float:
    ha, _ = occupancy_histogram(set_a, grid_res)
    hb, _ = occupancy_histogram(set_b, grid_res)
    return jsd_distributions(ha, hb)


# --------------------------------------------------------------------------- #
# Graph statistics


def _edges_of(g) -> tuple[int, np.ndarray]:
    """(node count, edge index pairs) for skeletons, key graphs, or (n, edges)."""
    if isinstance(g, SkeletonGraph):
        idx = g.index_of()
        e = np.array([[idx[int(u)], idx[int(v)]] for u, v in g.edges], dtype=np.int64).reshape(-1, 2)
        return g.n_nodes, e
    if isinstance(g, KeyGraph):
        order = g.preorder()
        pos = {u: i for i, u in enumerate(order)}
        e = np.array([[pos[p], pos[c]] for p, c in g.edges()], dtype=np.int64).reshape(-1, 2)
        return len(order), e
    n, e = g
    return int(n), np.asarray(e, dtype=np.int64).reshape(-1, 2)


def degree_sequence(g) -> np.ndarray:
    n, e = _edges_of(g)
    return np.bincount(e.ravel(), minlength=n)


def normalized_laplacian(g) -> np.ndarray:
    """I - D^-1/2 A D^-1/2; isolated vertices get a zero row and column."""
    n, e = _edges_of(g)
    a = np.zeros((n, n))
    for u, v in e:
        if u != v:
            a[u, v] = a[v, u] = 1.0
    deg = a.sum(axis=1)
    inv = np.zeros(n)
    nz = deg > 0
    inv[nz] = 1.0 / np.sqrt(deg[nz])
    lap = -(inv[:, None] * a * inv[None, :])
    lap[np.diag_indices(n)] = nz.astype(np.float64)
    return lap


def tridiagonalize(a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Householder reduction of a symmetric matrix; returns (diagonal, sub-diagonal)."""
    a = np.array(a, dtype=np.float64)
    n = len(a)
    for k in range(n - 2):
        x = a[k + 1:, k]
        nx = float(np.linalg.norm(x))
        if nx == 0.0:
            continue
        alpha = -math.copysign(nx, x[0])
        v = x.copy()
        v[0] -= alpha
        nv = float(np.linalg.norm(v))
        if nv == 0.0:
            continue
        v /= nv
        blk = a[k + 1:, k:]
        blk -= 2.0 * np.outer(v, v @ blk)
        blk = a[k:, k + 1:]
        blk -= 2.0 * np.outer(blk @ v, v)
    return np.diag(a).copy(), np.diag(a, -1).copy()


def laplacian_spectrum(g, max_sweeps: int = 60) -> np.ndarray:
    """Ascending eigenvalues of the normalized Laplacian."""
    lap = normalized_laplacian(g)
    if len(lap) > 2000:
        raise MetricError(f"graph of {len(lap)} nodes exceeds the 2000-node limit")
    if len(lap) == 0:
        return np.zeros(0)
    d, e = tridiagonalize(lap)
    try:
        return np.asarray(kernels.tql_eigenvalues(d, e, max_sweeps))
    except ArithmeticError as exc:
        raise ConvergenceError(str(exc)) from None


def degree_histogram(g, n_bins: int) -> np.ndarray:
    h = np.bincount(degree_sequence(g), minlength=n_bins)[:n_bins].astype(np.float64)
    return h / max(h.sum(), 1.0)


def spectrum_histogram(g, n_bins: int = 200) -> np.ndarray:
    lam = np.clip(laplacian_spectrum(g), 0.0, 2.0)
    h, _ = np.histogram(lam, bins=n_bins, range=(0.0, 2.0))
    h = h.astype(np.float64)
    return h / max(h.sum(), 1.0)


def emd_1d(p, q, bin_width: float = 1.0) -> float:
    """Earth mover's distance between two histograms on the same equally spaced bins."""
    return float(np.abs(np.cumsum(np.asarray(p) - np.asarray(q))).sum() * bin_width)


def gaussian_emd_kernel(p, q, sigma: float = 1.0, bin_width: float = 1.0) -> float:
    w = emd_1d(p, q, bin_width)
    return math.exp(-w * w / (2.0 * sigma * sigma))


def mmd_biased(xs: Sequence[np.ndarray], ys: Sequence[np.ndarray], sigma: float = 1.0,
               bin_width: float = 1.0) -> float:
    """V-statistic MMD^2 with the Gaussian-EMD kernel."""
    if not len(xs) or not len(ys):
        raise MetricError("empty set")

    def mean_k(a, b):
        return sum(gaussian_emd_kernel(u, v, sigma, bin_width) for u in a for v in b) / (len(a) * len(b))

    return max(mean_k(xs, xs) + mean_k(ys, ys) - 2.0 * mean_k(xs, ys), 0.0)


def degree_mmd(graphs_a: Sequence, graphs_b: Sequence, sigma: float = 1.0) -> float:
    if not len(graphs_a) or not len(graphs_b):
        raise MetricError("empty set")
    n_bins = 1 + max(int(degree_sequence(g).max(initial=0)) for g in list(graphs_a) + list(graphs_b))
    ha = [degree_histogram(g, n_bins) for g in graphs_a]
    hb = [degree_histogram(g, n_bins) for g in graphs_b]
    return mmd_biased(ha, hb, sigma)


def spectral_mmd(graphs_a: Sequence, graphs_b: Sequence, sigma: float = 1.0, n_bins: int = 200) -> float:
    """MMD between normalized-Laplacian spectrum histograms; EMD measured in eigenvalue units."""
    if not len(graphs_a) or not len(graphs_b):
        raise MetricError("empty set")
    ha = [spectrum_histogram(g, n_bins) for g in graphs_a]
    hb = [spectrum_histogram(g, n_bins) for g in graphs_b]
    return mmd_biased(ha, hb, sigma, bin_width=2.0 / n_bins)


# --------------------------------------------------------------------------- #
# Transport


def hungarian_exact_ot(cost) -> float:
    """Optimal perfect matching cost / n for an n x n cost matrix."""
    c = np.asarray(cost, dtype=np.float64)
    if c.ndim != 2 or c.shape[0] != c.shape[1]:
        raise MetricError(f"cost matrix must be square, got {c.shape}")
    if not np.all(np.isfinite(c)):
        raise MetricError("cost matrix must be finite")
    r, k = linear_sum_assignment(c)
    return float(c[r, k].sum() / len(c))


SINKHORN_MAX_ITER = 500
SINKHORN_TOL = 1e-9
SINKHORN_FAIL = 1e-3  # residual above which a capped run is an error


def sinkhorn_cost(cost, eps: float, max_iter: int = SINKHORN_MAX_ITER, tol: float = SINKHORN_TOL) -> float:
    """Entropic OT value <a, f> + <b, g> with uniform marginals.

    The regularization is annealed by halves from the largest cost down to
    ``eps``, warm-starting each stage from the previous potentials. The
    last stage runs until the marginal violation drops below ``tol`` or
    ``max_iter`` iterations pass; earlier stages stop at 1e-4. A final violation above
    ``SINKHORN_FAIL`` is an error.
    """
    c = np.ascontiguousarray(cost, dtype=np.float64)
    n, m = c.shape
    log_a = np.full(n, -math.log(n))
    log_b = np.full(m, -math.log(m))
    schedule = [float(eps)]
    top = float(c.max()) if c.size else 0.0
    while schedule[-1] * 2.0 < top:
        schedule.append(schedule[-1] * 2.0)
    g = None
    for k, e in enumerate(reversed(schedule)):
        stage_tol = float(tol) if k == len(schedule) - 1 else max(float(tol), 1e-4)
        f, g, _, err = kernels.sinkhorn_log(c, log_a, log_b, e, int(max_iter), stage_tol, g)
    if not err < SINKHORN_FAIL:
        raise ConvergenceError(f"Sinkhorn did not converge: marginal residual {err:.3e}")
    return float(f.mean() + g.mean())


def sinkhorn_divergence(x, y, eps: float = 0.01, max_iter: int = SINKHORN_MAX_ITER) -> float:
    """OT(x, y) - OT(x, x)/2 - OT(y, y)/2 with Euclidean cost, clamped at 0."""
    x, y = _cloud(x), _cloud(y)
    cxy = _pairwise(x, y)
    s = sinkhorn_cost(cxy, eps, max_iter) - 0.5 * sinkhorn_cost(_pairwise(x, x), eps, max_iter) \
        - 0.5 * sinkhorn_cost(_pairwise(y, y), eps, max_iter)
    return max(s, 0.0)


def _pairwise(x, y) -> np.ndarray:
    d = x[:, None, :] - y[None, :, :]
    return np.sqrt(np.einsum("ijk,ijk->ij", d, d))


def sample_graph_points(g: SkeletonGraph, n: int, rng: np.random.Generator) -> np.ndarray:
    """``n`` points uniform by arc length over the graph's edges."""
    idx = g.index_of()
    if not g.n_edges:
        return np.repeat(g.pos[:1], n, axis=0)
    a = g.pos[[idx[int(u)] for u in g.edges[:, 0]]]
    b = g.pos[[idx[int(v)] for v in g.edges[:, 1]]]
    lens = np.linalg.norm(b - a, axis=1)
    total = float(lens.sum())
    if not total > 0:
        return np.repeat(g.pos[:1], n, axis=0)
    e = rng.choice(len(lens), size=n, p=lens / total)
    t = rng.random(n)[:, None]
    return a[e] + t * (b[e] - a[e])


def normalize_rms(p) -> np.ndarray:
    p = _cloud(p)
    p = p - p.mean(axis=0)
    rms = float(np.sqrt((p * p).sum(axis=1).mean()))
    return p / rms if rms > 0 else p


def graph_cloud(g: SkeletonGraph, n: int = 100, salt: int = 0) -> np.ndarray:
    rng = np.random.default_rng(content_seed(g.pos, g.edges, salt=salt))
    return normalize_rms(sample_graph_points(g, n, rng))


def gwd(g_a: SkeletonGraph, g_b: SkeletonGraph, n_samples: int = 100, eps: float = 0.01) -> float:
    for g in (g_a, g_b):
        if len(g.components()) != 1:
            raise MetricError("gwd needs connected graphs")
    return sinkhorn_divergence(graph_cloud(g_a, n_samples), graph_cloud(g_b, n_samples), eps)


# --------------------------------------------------------------------------- #
# Set evaluation


@dataclass
class VesselSample:
    skeleton: SkeletonGraph
    mesh: Optional[TriangleMesh] = None
    key_graph: Optional[KeyGraph] = None


@dataclass
class EvalConfig:
    n_points: int = 2048
    grid_res: int = 28
    gwd_samples: int = 100
    gwd_eps: float = 0.01
    gwd_max_pairs: int = 64
    mmd_sigma: float = 1.0
    spectrum_bins: int = 200
    paired: bool = False
    mesh_voxel: float = 0.0  # 0: a third of the smallest radius when a mesh is missing
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EvalConfig":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


@dataclass
class MetricsReport:
    jsd: float
    cd: float
    deg_mmd: float
    spec_mmd: float
    gwd: float
    n_generated: int
    n_reference: int
    n_clamped: int = 0
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def table(self) -> str:
        """Aligned text table; JSD and CD are shown multiplied by 1e3."""
        cols = ["JSD", "CD", "Deg.", "Spec.", "GWD"]
        vals = [f"{self.jsd * 1e3:.3f}", f"{self.cd * 1e3:.3f}", f"{self.deg_mmd:.4f}",
                f"{self.spec_mmd:.4f}", f"{self.gwd:.4f}"]
        w = [max(len(c), len(v)) for c, v in zip(cols, vals)]
        head = "  ".join(c.rjust(k) for c, k in zip(cols, w))
        row = "  ".join(v.rjust(k) for v, k in zip(vals, w))
        note = f"(JSD, CD x 1e3; {self.n_generated} generated vs {self.n_reference} reference)"
        return f"{head}\n{row}\n{note}\n"


def _mesh_of(s: VesselSample, cfg: EvalConfig) -> TriangleMesh:
    if s.mesh is not None:
        return s.mesh
    voxel = cfg.mesh_voxel or float(s.skeleton.radius.min()) / 3.0
    return skeleton_to_mesh(s.skeleton, voxel)


def _key_graph_of(s: VesselSample) -> KeyGraph:
    if s.key_graph is not None:
        return s.key_graph
    from vesselgen.preprocess import extract_key_graph

    return extract_key_graph(s.skeleton)


def _clouds(samples, cfg) -> list[np.ndarray]:
    out = []
    for s in samples:
        m = _mesh_of(s, cfg)
        rng = np.random.default_rng(content_seed(m.vertices, m.triangles, salt=cfg.seed))
        out.append(normalize_cloud(sample_points_from_mesh(m, cfg.n_points, rng)))
    return out


def evaluate_sets(generated: Sequence[VesselSample], reference: Sequence[VesselSample],
                  cfg: Optional[EvalConfig] = None) -> MetricsReport:
    """All five metrics of ``generated`` against ``reference``.

    Paired mode compares item i with item i (reconstruction); otherwise
    CD and GWD take, for each generated item, the minimum over the
    reference set, with GWD over a seeded subset of at most
    ``gwd_max_pairs`` generated items.
    """
    cfg = cfg or EvalConfig()
    gen = [s if isinstance(s, VesselSample) else VesselSample(*s) for s in generated]
    ref = [s if isinstance(s, VesselSample) else VesselSample(*s) for s in reference]
    if not gen or not ref:
        raise MetricError("empty set")
    if cfg.paired and len(gen) != len(ref):
        raise MetricError(f"paired evaluation needs equal sizes, got {len(gen)} and {len(ref)}")

    cg, cr = _clouds(gen, cfg), _clouds(ref, cfg)
    hg, clamp_g = occupancy_histogram(cg, cfg.grid_res)
    hr, clamp_r = occupancy_histogram(cr, cfg.grid_res)
    j = jsd_distributions(hg, hr)

    if cfg.paired:
        cd = float(np.mean([chamfer(a, b) for a, b in zip(cg, cr)]))
    else:
        cd = float(np.mean([min(chamfer(a, b) for b in cr) for a in cg]))

    kg_g = [_key_graph_of(s) for s in gen]
    kg_r = [_key_graph_of(s) for s in ref]
    deg = degree_mmd(kg_g, kg_r, cfg.mmd_sigma)
    spec = spectral_mmd(kg_g, kg_r, cfg.mmd_sigma, cfg.spectrum_bins)

    pts_g = [graph_cloud(s.skeleton, cfg.gwd_samples) for s in gen]
    pts_r = [graph_cloud(s.skeleton, cfg.gwd_samples) for s in ref]
    pick = np.arange(len(gen))
    if len(pick) > cfg.gwd_max_pairs:
        pick = np.sort(np.random.default_rng(cfg.seed).choice(len(pick), cfg.gwd_max_pairs, replace=False))
    self_r = {}

    def self_cost(k):
        if k not in self_r:
            self_r[k] = sinkhorn_cost(_pairwise(pts_r[k], pts_r[k]), cfg.gwd_eps)
        return self_r[k]

    vals = []
    for i in pick:
        sg = sinkhorn_cost(_pairwise(pts_g[i], pts_g[i]), cfg.gwd_eps)
        cands = [int(i)] if cfg.paired else range(len(ref))
        best = math.inf
        for k in cands:
            s = sinkhorn_cost(_pairwise(pts_g[i], pts_r[k]), cfg.gwd_eps) - 0.5 * sg - 0.5 * self_cost(k)
            best = min(best, max(s, 0.0))
        vals.append(best)
    g = float(np.mean(vals))
    return MetricsReport(j, cd, deg, spec, g, len(gen), len(ref), clamp_g + clamp_r, cfg.to_dict())
