"""From binary volumes or raw skeletons to binary key graphs and segments.

Pipeline: thin_volume -> estimate_radius -> skeleton_to_graph ->
extract_key_graph -> binarize_bifurcations -> extract_segments ->
normalize_sample.
"""
from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import ndimage

from vesselgen import kernels
from vesselgen.core import (
    GeometricDescriptor,
    GraphError,
    KeyGraph,
    KeyNode,
    SkeletonGraph,
    VesselError,
    VesselSegment,
    ZERO_DESC,
    arc_length,
    compute_descriptor,
    key_graph_from_dict,
    key_graph_to_dict,
    normalize_segment,
)

MAX_SEQ_LEN = 200
HEADER = struct.Struct("<3I3f")

# peeling order: +x, -x, +y, -y, +z, -z
DIRECTIONS = ((1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1))


class VolumeError(VesselError):
    pass


@dataclass(frozen=True, eq=False)
class VoxelGrid:
    """Binary occupancy; ``data`` is flat in x-fastest order."""

    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]
    data: np.ndarray

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        if len(dims) != 3 or min(dims) <= 0:
            raise VolumeError(f"invalid dims {self.dims}")
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or not min(spacing) > 0:
            raise VolumeError(f"invalid spacing {self.spacing}")
        data = np.asarray(self.data).astype(bool).reshape(-1)
        if data.size != dims[0] * dims[1] * dims[2]:
            raise VolumeError(f"data length {data.size} does not match dims {dims}")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "data", data)

    @classmethod
    def from_array(cls, vol: np.ndarray, spacing=(1.0, 1.0, 1.0)) -> "VoxelGrid":
        """Build from an array indexed ``[x, y, z]``."""
        vol = np.asarray(vol, dtype=bool)
        return cls(vol.shape, spacing, vol.transpose(2, 1, 0).reshape(-1))

    @property
    def array(self) -> np.ndarray:
        """Occupancy indexed ``[x, y, z]``."""
        x, y, z = self.dims
        return self.data.reshape(z, y, x).transpose(2, 1, 0)


def write_voxels(v: VoxelGrid, path) -> None:
    with open(path, "wb") as fh:
        fh.write(HEADER.pack(*v.dims, *v.spacing))
        fh.write(v.data.astype(np.uint8).tobytes())


def read_voxels(path) -> VoxelGrid:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < HEADER.size:
        raise VolumeError(f"{path}: truncated header")
    *dims, sx, sy, sz = HEADER.unpack_from(raw)
    n = dims[0] * dims[1] * dims[2]
    body = np.frombuffer(raw, dtype=np.uint8, offset=HEADER.size)
    if n == 0 or body.size != n:
        raise VolumeError(f"{path}: expected {n} voxel bytes, found {body.size}")
    if np.any(body > 1):
        raise VolumeError(f"{path}: voxel bytes must be 0 or 1")
    return VoxelGrid(tuple(dims), (sx, sy, sz), body)


# --------------------------------------------------------------------------- #
# Thinning and radii


def thin_volume(v: VoxelGrid) -> np.ndarray:
    """Curve skeleton of a single 26-connected object.

    Returns the skeleton voxel coordinates as a ``(k, 3)`` array sorted in
    raster order.
    """
    vol = v.array
    if not vol.any():
        raise VolumeError("empty volume")
    _, n = ndimage.label(vol, structure=np.ones((3, 3, 3)))
    if n != 1:
        raise VolumeError(f"volume has {n} 26-connected components")
    work = np.ascontiguousarray(np.pad(vol, 1), dtype=np.uint8)
    while True:
        removed = 0
        for d in DIRECTIONS:
            removed += kernels.thin_subiteration(work, *d)
        if removed == 0:
            break
    return np.argwhere(work[1:-1, 1:-1, 1:-1])


def estimate_radius(v: VoxelGrid, skeleton: np.ndarray) -> np.ndarray:
    """Distance from each skeleton voxel centre to the nearest background voxel centre."""
    vol = v.array
    skeleton = np.asarray(skeleton, dtype=int).reshape(-1, 3)
    if len(skeleton) and not np.all(vol[tuple(skeleton.T)]):
        raise VolumeError("skeleton voxel outside occupancy")
    edt = ndimage.distance_transform_edt(np.pad(vol, 1), sampling=v.spacing)
    return edt[tuple((skeleton + 1).T)]


def skeleton_to_graph(skeleton: np.ndarray, radii, spacing=(1.0, 1.0, 1.0)) -> SkeletonGraph:
    """One node per skeleton voxel at its physical centre, 26-adjacency edges."""
    skeleton = np.asarray(skeleton, dtype=np.int64).reshape(-1, 3)
    if len(skeleton) == 0:
        raise VolumeError("empty skeleton")
    index = {tuple(c): i for i, c in enumerate(skeleton.tolist())}
    edges = []
    offsets = [(dx, dy, dz) for dx in (-1, 0, 1) for dy in (-1, 0, 1) for dz in (-1, 0, 1)]
    offsets = [o for o in offsets if o > (0, 0, 0)]
    for i, (x, y, z) in enumerate(skeleton.tolist()):
        for dx, dy, dz in offsets:
            j = index.get((x + dx, y + dy, z + dz))
            if j is not None:
                edges.append((i, j))
    g = SkeletonGraph(
        ids=np.arange(len(skeleton)),
        pos=skeleton * np.asarray(spacing, dtype=np.float64),
        radius=np.asarray(radii, dtype=np.float64),
        edges=np.array(edges, dtype=np.int64).reshape(-1, 2),
    )
    comps = g.components()
    if len(comps) > 1:
        sizes = ", ".join(str(len(c)) for c in comps)
        raise GraphError(f"skeleton has {len(comps)} components (sizes {sizes})")
    return g


# --------------------------------------------------------------------------- #
# Key graphs


def maximum_spanning_tree(g: SkeletonGraph) -> list[tuple[int, int]]:
    """Kruskal on mean endpoint radius; ties go to the lower id pair."""
    idx = g.index_of()
    parent = {int(i): int(i) for i in g.ids}

    def find(u):
        while parent[u] != u:
            parent[u] = parent[parent[u]]
            u = parent[u]
        return u

    keyed = []
    for u, v in g.edges:
        u, v = int(u), int(v)
        w = 0.5 * (g.radius[idx[u]] + g.radius[idx[v]])
        keyed.append((-w, min(u, v), max(u, v)))
    keyed.sort()
    tree = []
    for _, u, v in keyed:
        ru, rv = find(u), find(v)
        if ru != rv:
            parent[ru] = rv
            tree.append((u, v))
    return tree


def _rooted(tree_edges, nodes, root: int) -> tuple[dict[int, Optional[int]], list[int]]:
    adj: dict[int, list[int]] = {int(n): [] for n in nodes}
    for u, v in tree_edges:
        adj[u].append(v)
        adj[v].append(u)
    up: dict[int, Optional[int]] = {root: None}
    order = [root]
    stack = [root]
    while stack:
        u = stack.pop()
        for w in sorted(adj[u]):
            if w not in up:
                up[w] = u
                order.append(w)
                stack.append(w)
    return up, order


def _chain(up: dict, top: int, bottom: int) -> list[int]:
    """Skeleton ids from ``top`` down to ``bottom`` along the rooted tree."""
    path = [bottom]
    while path[-1] != top:
        nxt = up.get(path[-1])
        if nxt is None:
            raise GraphError(f"node {bottom} is not below {top}")
        path.append(nxt)
    return path[::-1]


def _edge_attributes(pos_parent, pos_child, chain_pos, depth: int):
    off = pos_child - pos_parent
    delta = float(np.linalg.norm(off))
    if delta <= 1e-12:
        return np.zeros(3), GeometricDescriptor(0.0, 0.0, 0.0, depth)
    seg = VesselSegment(chain_pos, np.ones(len(chain_pos)))
    desc = compute_descriptor(seg, depth)
    return off / delta, desc


def extract_key_graph(g: SkeletonGraph, root_hint=None) -> KeyGraph:
    """Key vertices (degree != 2 in the radius-weighted maximum spanning tree)
    joined by the degree-2 chains between them. Fan-out is not limited.

    Children are ordered by descending subtree radius (ties: lower id).
    """
    if g.n_nodes < 2:
        raise GraphError("skeleton needs at least 2 nodes")
    if len(g.components()) != 1:
        raise GraphError("skeleton is not connected")
    tree = maximum_spanning_tree(g)
    assert len(tree) == g.n_nodes - 1
    deg = {int(i): 0 for i in g.ids}
    for u, v in tree:
        deg[u] += 1
        deg[v] += 1
    idx = g.index_of()
    key = sorted(n for n, d in deg.items() if d != 2)
    if root_hint is not None:
        hint = np.asarray(root_hint, dtype=np.float64)
        root = min(key, key=lambda n: (float(np.linalg.norm(g.pos[idx[n]] - hint)), n))
    else:
        root = min(key, key=lambda n: (-float(g.radius[idx[n]]), n))

    up, order = _rooted(tree, g.ids, root)
    keyset = set(key)
    key_parent: dict[int, int] = {}
    for n in order[1:]:
        if n in keyset:
            p = up[n]
            while p not in keyset:
                p = up[p]
            key_parent[n] = p
    kids: dict[int, list[int]] = {n: [] for n in key}
    for c, p in key_parent.items():
        kids[p].append(c)

    sub_r = {n: float(g.radius[idx[n]]) for n in key}
    for n in reversed([m for m in order if m in keyset]):
        for c in kids[n]:
            sub_r[n] = max(sub_r[n], sub_r[c])

    depth = {root: 0}
    nodes = {root: KeyNode(g.pos[idx[root]], np.zeros(3), ZERO_DESC)}
    children = {}
    for n in [m for m in order if m in keyset]:
        kids[n].sort(key=lambda c: (-sub_r[c], c))
        children[n] = tuple(kids[n])
        for c in kids[n]:
            depth[c] = depth[n] + 1
            chain = _chain(up, n, c)
            d, desc = _edge_attributes(g.pos[idx[n]], g.pos[idx[c]], g.pos[[idx[k] for k in chain]], depth[c])
            nodes[c] = KeyNode(g.pos[idx[c]], d, desc)
    return KeyGraph(nodes, root, children, subtree_radius=sub_r)


def binarize_bifurcations(t: KeyGraph) -> KeyGraph:
    """Replace every node with k > 2 children by a right-leaning chain of
    k - 1 co-located binary nodes joined by zero-length edges."""
    sub_r = t.subtree_radius
    next_id = max(t.nodes) + 1
    nodes = dict(t.nodes)
    children: dict[int, tuple] = {}
    aliases = dict(t.aliases)
    new_depth: dict[int, int] = {t.root: 0}

    for n in t.preorder():
        kids = t.child_list(n)
        if len(kids) > 2:
            kids = sorted(kids, key=lambda c: (-sub_r.get(c, 0.0), c))
        else:
            children[n] = (tuple(kids) + (None, None))[:2]
            for c in kids:
                new_depth[c] = new_depth[n] + 1
            continue
        anchor = aliases.get(n, n)
        cur = n
        for j, c in enumerate(kids[:-2]):
            link = next_id
            next_id += 1
            aliases[link] = anchor
            new_depth[link] = new_depth[cur] + 1
            nodes[link] = KeyNode(t.nodes[n].pos, t.nodes[n].dir, GeometricDescriptor(0.0, 0.0, 0.0, new_depth[link]))
            children[cur] = (c, link)
            new_depth[c] = new_depth[cur] + 1
            cur = link
        children[cur] = (kids[-2], kids[-1])
        new_depth[kids[-2]] = new_depth[cur] + 1
        new_depth[kids[-1]] = new_depth[cur] + 1

    # descriptor depths follow the new tree
    for nid, d in new_depth.items():
        node = nodes[nid]
        if nid != t.root and node.desc.rho != d:
            desc = GeometricDescriptor(node.desc.ell, node.desc.delta, node.desc.kappa, d)
            nodes[nid] = KeyNode(node.pos, node.dir, desc)
    return KeyGraph(nodes, t.root, children, aliases, dict(sub_r))


# --------------------------------------------------------------------------- #
# Segments


def resample_segment(seg: VesselSegment, n_points: int, max_len: int = MAX_SEQ_LEN) -> VesselSegment:
    """``n_points`` samples uniform in arc length; endpoints kept exactly."""
    if not 2 <= n_points <= max_len:
        raise VesselError(f"n_points={n_points} outside [2, {max_len}]")
    steps = np.linalg.norm(np.diff(seg.pos, axis=0), axis=1)
    s = np.concatenate([[0.0], np.cumsum(steps)])
    target = np.linspace(0.0, s[-1], n_points)
    pos = np.column_stack([np.interp(target, s, seg.pos[:, k]) for k in range(3)])
    rad = np.interp(target, s, seg.radius)
    pos[0], pos[-1] = seg.pos[0], seg.pos[-1]
    rad[0], rad[-1] = seg.radius[0], seg.radius[-1]
    return VesselSegment(pos, rad)


def resample_count(seg: VesselSegment, spacing: Optional[float] = None, max_len: int = MAX_SEQ_LEN) -> int:
    """min(ceil(arc / spacing) + 1, max_len); spacing defaults to the median step."""
    if spacing is None:
        spacing = float(np.median(np.linalg.norm(np.diff(seg.pos, axis=0), axis=1)))
    n = math.ceil(arc_length(seg) / spacing - 1e-9) + 1
    return int(min(max(n, 2), max_len))


@dataclass(eq=False)
class TrainingSample:
    """Binary key graph plus one canonical segment per non-degenerate edge.

    ``offset``/``scale`` record the normalization: normalized = (raw - offset) * scale.
    """

    key_graph: KeyGraph
    segments: dict[tuple[int, int], VesselSegment]
    offset: np.ndarray = field(default_factory=lambda: np.zeros(3))
    scale: float = 1.0

    def denormalize_points(self, p) -> np.ndarray:
        return np.asarray(p) / self.scale + self.offset


def extract_segments(
    g: SkeletonGraph,
    kg: KeyGraph,
    spacing: Optional[float] = None,
    max_len: int = MAX_SEQ_LEN,
) -> TrainingSample:
    """Cut the skeleton into one resampled, canonical segment per key edge.

    Descriptors are recomputed on the resampled segments (depth = child
    depth) and written back into the key graph. Edges between co-located
    nodes get no segment.
    """
    idx = g.index_of()
    alias = lambda n: kg.aliases.get(n, n)  # noqa: E731
    root_sk = alias(kg.root)
    if root_sk not in idx:
        raise GraphError("key graph root is not a skeleton node")
    up, _ = _rooted(maximum_spanning_tree(g), g.ids, root_sk)
    depth = kg.depths()
    nodes = dict(kg.nodes)
    segments = {}
    for p, c in kg.edges():
        sp, sc = alias(p), alias(c)
        if sp == sc:
            continue
        try:
            chain = _chain(up, sp, sc)
        except GraphError as exc:
            raise GraphError(f"inconsistent input: no chain for key edge ({p}, {c})") from exc
        rows = [idx[k] for k in chain]
        raw = VesselSegment(g.pos[rows], g.radius[rows])
        seg = resample_segment(raw, resample_count(raw, spacing, max_len), max_len)
        desc = compute_descriptor(seg, depth[c])
        chord = seg.pos[-1] - seg.pos[0]
        nodes[c] = KeyNode(g.pos[idx[sc]], chord / desc.delta, desc)
        canon, _ = normalize_segment(seg)
        segments[(p, c)] = canon
    out = KeyGraph(nodes, kg.root, dict(kg.children), dict(kg.aliases), dict(kg.subtree_radius))
    return TrainingSample(out, segments)


def normalize_sample(s: TrainingSample) -> TrainingSample:
    """Root to the origin, farthest key node at distance 1."""
    kg = s.key_graph
    root_pos = kg.nodes[kg.root].pos
    extent = max(float(np.linalg.norm(n.pos - root_pos)) for n in kg.nodes.values())
    if len(kg.nodes) < 2 or extent <= 1e-12:
        raise GraphError("cannot normalize a degenerate key graph")
    k = 1.0 / extent
    nodes = {}
    for nid, n in kg.nodes.items():
        d = n.desc
        desc = GeometricDescriptor(d.ell * k, d.delta * k, d.kappa / k, d.rho)
        nodes[nid] = KeyNode((n.pos - root_pos) * k, n.dir, desc)
    nodes[kg.root] = KeyNode(np.zeros(3), kg.nodes[kg.root].dir, kg.nodes[kg.root].desc)
    out = KeyGraph(nodes, kg.root, dict(kg.children), dict(kg.aliases))
    return TrainingSample(out, dict(s.segments), s.offset + root_pos / s.scale, s.scale * k)


def preprocess_skeleton(g: SkeletonGraph, root_hint=None, spacing: Optional[float] = None,
                        max_len: int = MAX_SEQ_LEN) -> TrainingSample:
    kg = binarize_bifurcations(extract_key_graph(g, root_hint))
    return normalize_sample(extract_segments(g, kg, spacing, max_len))


def preprocess_volume(v: VoxelGrid, root_hint=None, max_len: int = MAX_SEQ_LEN) -> TrainingSample:
    skel = thin_volume(v)
    g = skeleton_to_graph(skel, estimate_radius(v, skel), v.spacing)
    return preprocess_skeleton(g, root_hint, float(np.median(v.spacing)), max_len)


# --------------------------------------------------------------------------- #
# Serialization


def sample_to_dict(s: TrainingSample) -> dict:
    return {
        "key_graph": key_graph_to_dict(s.key_graph),
        "segments": [
            {"parent": int(p), "child": int(c), "points": seg.as_array().tolist()}
            for (p, c), seg in s.segments.items()
        ],
        "normalization": {"offset": [float(x) for x in s.offset], "scale": float(s.scale)},
    }


def sample_from_dict(d: dict) -> TrainingSample:
    kg = key_graph_from_dict(d["key_graph"])
    segs = {(int(e["parent"]), int(e["child"])): VesselSegment.from_array(e["points"]) for e in d["segments"]}
    norm = d.get("normalization", {"offset": [0.0, 0.0, 0.0], "scale": 1.0})
    return TrainingSample(kg, segs, np.asarray(norm["offset"], dtype=np.float64), float(norm["scale"]))


def save_sample(s: TrainingSample, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(sample_to_dict(s), fh)


def load_sample(path) -> TrainingSample:
    with open(path, encoding="utf-8") as fh:
        return sample_from_dict(json.load(fh))


def load_dataset(root, split: str = "train") -> list[TrainingSample]:
    """Samples under ``root/split`` (or ``root`` itself if it holds samples)."""
    d = os.path.join(root, split)
    if not os.path.isdir(d):
        d = root
    names = sorted(n for n in os.listdir(d) if n.endswith(".json"))
    return [load_sample(os.path.join(d, n)) for n in names]
