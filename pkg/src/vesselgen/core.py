"""Domain types shared by every stage: skeletons, key graphs, segments.

Also holds the per-segment descriptor computation, the canonical segment
frame, and the JSON schemas for skeletons and key graphs.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np


class VesselError(ValueError):
    """Base class for invalid vessel data."""


class InvalidSegmentError(VesselError):
    pass


class DegenerateChordError(VesselError):
    pass


class GraphError(VesselError):
    pass


def _frozen(a, dtype=np.float64) -> np.ndarray:
    arr = np.array(a, dtype=dtype)
    arr.setflags(write=False)
    return arr


# --------------------------------------------------------------------------- #
# Skeletons


@dataclass(frozen=True, eq=False)
class SkeletonGraph:
    """Undirected centerline graph with a radius per node.

    ``ids[i]`` is the id of the node stored in row ``i`` of ``pos``/``radius``.
    ``edges`` holds id pairs.
    """

    ids: np.ndarray
    pos: np.ndarray
    radius: np.ndarray
    edges: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "ids", _frozen(self.ids, np.int64).reshape(-1))
        object.__setattr__(self, "pos", _frozen(self.pos).reshape(-1, 3))
        object.__setattr__(self, "radius", _frozen(self.radius).reshape(-1))
        object.__setattr__(self, "edges", _frozen(self.edges, np.int64).reshape(-1, 2))

    @property
    def n_nodes(self) -> int:
        return int(self.ids.shape[0])

    @property
    def n_edges(self) -> int:
        return int(self.edges.shape[0])

    def index_of(self) -> dict[int, int]:
        return {int(i): k for k, i in enumerate(self.ids)}

    def adjacency(self) -> dict[int, list[int]]:
        adj: dict[int, list[int]] = {int(i): [] for i in self.ids}
        for u, v in self.edges:
            adj[int(u)].append(int(v))
            adj[int(v)].append(int(u))
        return adj

    def degrees(self) -> dict[int, int]:
        return {k: len(v) for k, v in self.adjacency().items()}

    def components(self) -> list[list[int]]:
        adj = self.adjacency()
        seen: set[int] = set()
        comps = []
        for s in sorted(adj):
            if s in seen:
                continue
            comp = [s]
            seen.add(s)
            stack = [s]
            while stack:
                u = stack.pop()
                for v in adj[u]:
                    if v not in seen:
                        seen.add(v)
                        comp.append(v)
                        stack.append(v)
            comps.append(sorted(comp))
        return comps

    def validate(self, require_connected: bool = True) -> list[str]:
        """Human-readable invariant violations; empty when valid."""
        problems = []
        ids = [int(i) for i in self.ids]
        if len(set(ids)) != len(ids):
            problems.append("duplicate node ids")
        known = set(ids)
        seen_edges = set()
        for u, v in self.edges:
            u, v = int(u), int(v)
            if u not in known or v not in known:
                problems.append(f"edge ({u}, {v}) references unknown node")
            if u == v:
                problems.append(f"self-loop at {u}")
            key = (min(u, v), max(u, v))
            if key in seen_edges:
                problems.append(f"duplicate edge {key}")
            seen_edges.add(key)
        if np.any(~(self.radius > 0)):
            problems.append("non-positive radius")
        if not np.all(np.isfinite(self.pos)):
            problems.append("non-finite coordinates")
        if require_connected and self.n_nodes and not problems:
            comps = self.components()
            if len(comps) != 1:
                problems.append(f"graph has {len(comps)} connected components")
        return problems


def skeleton_to_dict(g: SkeletonGraph) -> dict:
    return {
        "nodes": [
            {"id": int(i), "pos": [float(c) for c in p], "radius": float(r)}
            for i, p, r in zip(g.ids, g.pos, g.radius)
        ],
        "edges": [[int(u), int(v)] for u, v in g.edges],
    }


def skeleton_from_dict(d: dict) -> SkeletonGraph:
    nodes = d["nodes"]
    return SkeletonGraph(
        ids=[n["id"] for n in nodes],
        pos=[n["pos"] for n in nodes] if nodes else np.zeros((0, 3)),
        radius=[n["radius"] for n in nodes],
        edges=d["edges"] if d["edges"] else np.zeros((0, 2)),
    )


def dump_skeleton(g: SkeletonGraph, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(skeleton_to_dict(g), fh)


def load_skeleton(path) -> SkeletonGraph:
    with open(path, encoding="utf-8") as fh:
        return skeleton_from_dict(json.load(fh))


# --------------------------------------------------------------------------- #
# Key graphs


@dataclass(frozen=True)
class GeometricDescriptor:
    """Arc length, chord length, curvature and tree depth of one segment."""

    ell: float
    delta: float
    kappa: float
    rho: int

    def as_array(self) -> np.ndarray:
        return np.array([self.ell, self.delta, self.kappa, float(self.rho)])

    @classmethod
    def from_array(cls, a) -> "GeometricDescriptor":
        return cls(float(a[0]), float(a[1]), float(a[2]), int(round(float(a[3]))))

    def problems(self, tol: float = 1e-6) -> list[str]:
        out = []
        if min(self.ell, self.delta, self.kappa) < 0 or self.rho < 0:
            out.append("negative descriptor entry")
        if self.delta > self.ell + tol:
            out.append(f"chord {self.delta:.6g} exceeds arc {self.ell:.6g}")
        if abs(self.ell - self.delta) <= 1e-12 * max(1.0, self.ell) and self.kappa > tol:
            out.append("straight segment with non-zero curvature")
        return out


ZERO_DESC = GeometricDescriptor(0.0, 0.0, 0.0, 0)


@dataclass(frozen=True, eq=False)
class KeyNode:
    pos: np.ndarray
    dir: np.ndarray
    desc: GeometricDescriptor

    def __post_init__(self):
        object.__setattr__(self, "pos", _frozen(self.pos).reshape(3))
        object.__setattr__(self, "dir", _frozen(self.dir).reshape(3))

    def attributes(self) -> np.ndarray:
        """The 10-dim attribute vector [pos, dir, desc]."""
        return np.concatenate([self.pos, self.dir, self.desc.as_array()])


@dataclass(eq=False)
class KeyGraph:
    """Rooted tree over key nodes.

    ``children[id]`` is a tuple of child ids; binary graphs use exactly
    ``(left, right)`` with ``None`` for a missing child. ``aliases`` maps
    nodes inserted by binarization to the skeleton node they sit on;
    ``subtree_radius`` is the thickest skeleton radius below each node.
    Neither is serialized.
    """

    nodes: dict[int, KeyNode]
    root: int
    children: dict[int, tuple]
    aliases: dict[int, int] = field(default_factory=dict)
    subtree_radius: dict[int, float] = field(default_factory=dict)

    def child_list(self, nid: int) -> list[int]:
        return [c for c in self.children.get(nid, ()) if c is not None]

    def parents(self) -> dict[int, int]:
        out = {}
        for p, cs in self.children.items():
            for c in cs:
                if c is not None:
                    out[c] = p
        return out

    def preorder(self) -> list[int]:
        """Depth-first, left before right."""
        order = []
        stack = [self.root]
        while stack:
            u = stack.pop()
            order.append(u)
            stack.extend(reversed(self.child_list(u)))
        return order

    def depths(self) -> dict[int, int]:
        d = {self.root: 0}
        for u in self.preorder():
            for c in self.child_list(u):
                d[c] = d[u] + 1
        return d

    def edges(self) -> list[tuple[int, int]]:
        return [(p, c) for p in self.preorder() for c in self.child_list(p)]

    def leaves(self) -> list[int]:
        return [u for u in self.preorder() if not self.child_list(u)]

    def is_binary(self) -> bool:
        return all(len(self.child_list(u)) <= 2 for u in self.nodes)

    def max_depth(self) -> int:
        return max(self.depths().values())

    def relabeled(self) -> "KeyGraph":
        """Copy with ids 0..n-1 in preorder; aliases are dropped."""
        order = self.preorder()
        new = {old: k for k, old in enumerate(order)}
        children = {}
        for old in order:
            cs = self.children.get(old, (None, None))
            children[new[old]] = tuple(None if c is None else new[c] for c in cs)
        return KeyGraph({new[o]: self.nodes[o] for o in order}, 0, children)


def validate_key_graph(
    g: KeyGraph,
    max_depth: Optional[int] = None,
    check_consistency: bool = True,
    tol: float = 1e-6,
) -> list[str]:
    """List every invariant violation of ``g``; an empty list means valid.

    With ``check_consistency`` the descriptor chord and node direction of
    each non-root node are compared with the actual parent-child offset.
    """
    report = []
    if g.root not in g.nodes:
        return [f"root {g.root} is not a node"]
    parent_of: dict[int, int] = {}
    for p, cs in g.children.items():
        if p not in g.nodes:
            report.append(f"children listed for unknown node {p}")
            continue
        real = [c for c in cs if c is not None]
        if len(real) > 2:
            report.append(f"node {p} has {len(real)} children (not binary)")
        for c in real:
            if c not in g.nodes:
                report.append(f"node {p} has unknown child {c}")
            elif c in parent_of:
                report.append(f"not a tree: node {c} has two parents ({parent_of[c]}, {p})")
            else:
                parent_of[c] = p
    if g.root in parent_of:
        report.append("not a tree: root has a parent")
    # reachability and cycles
    seen = set()
    stack = [g.root]
    while stack:
        u = stack.pop()
        if u in seen:
            report.append(f"not a tree: cycle through {u}")
            break
        seen.add(u)
        stack.extend(c for c in g.children.get(u, ()) if c is not None and c in g.nodes)
    unreachable = set(g.nodes) - seen
    if unreachable:
        report.append(f"not a tree: {len(unreachable)} node(s) unreachable from root")
    if report:
        return report

    depths = g.depths()
    if max_depth is not None and max(depths.values()) > max_depth:
        report.append(f"depth {max(depths.values())} exceeds max_depth {max_depth}")
    for nid, node in g.nodes.items():
        if not (np.all(np.isfinite(node.pos)) and np.all(np.isfinite(node.dir))):
            report.append(f"node {nid}: non-finite attribute")
            continue
        n = float(np.linalg.norm(node.dir))
        if abs(n - 1.0) > tol and not (n <= tol and (nid == g.root or node.desc.delta < tol)):
            report.append(f"node {nid}: direction norm {n:.6g} not in {{0, 1}}")
        for msg in node.desc.problems(tol):
            report.append(f"node {nid}: {msg}")
        if check_consistency and nid != g.root:
            par = g.nodes[parent_of[nid]]
            off = node.pos - par.pos
            dist = float(np.linalg.norm(off))
            if abs(dist - node.desc.delta) > tol:
                report.append(f"node {nid}: chord {node.desc.delta:.9g} != parent distance {dist:.9g}")
            elif dist > tol and np.max(np.abs(off / dist - node.dir)) > tol:
                report.append(f"node {nid}: direction disagrees with parent offset")
    return report


def key_graph_to_dict(g: KeyGraph) -> dict:
    if not g.is_binary():
        raise GraphError("only binary key graphs are serializable")
    nodes = []
    for nid in g.preorder():
        node = g.nodes[nid]
        cs = tuple(g.children.get(nid, ()))
        cs = (cs + (None, None))[:2]
        nodes.append({
            "id": int(nid),
            "pos": [float(x) for x in node.pos],
            "dir": [float(x) for x in node.dir],
            "desc": [node.desc.ell, node.desc.delta, node.desc.kappa, node.desc.rho],
            "left": cs[0],
            "right": cs[1],
        })
    return {"root": int(g.root), "nodes": nodes}


def key_graph_from_dict(d: dict) -> KeyGraph:
    nodes = {}
    children = {}
    for n in d["nodes"]:
        nid = int(n["id"])
        nodes[nid] = KeyNode(n["pos"], n["dir"], GeometricDescriptor.from_array(n["desc"]))
        children[nid] = (n.get("left"), n.get("right"))
    return KeyGraph(nodes, int(d["root"]), children)


# --------------------------------------------------------------------------- #
# Segments and similarity transforms


@dataclass(frozen=True, eq=False)
class VesselSegment:
    """Ordered samples (x, y, z, r) along one vessel segment."""

    pos: np.ndarray
    radius: np.ndarray

    def __post_init__(self):
        pos = _frozen(self.pos).reshape(-1, 3)
        rad = _frozen(self.radius).reshape(-1)
        if pos.shape[0] < 2:
            raise InvalidSegmentError(f"segment needs at least 2 points, got {pos.shape[0]}")
        if rad.shape[0] != pos.shape[0]:
            raise InvalidSegmentError("radius count does not match point count")
        if not np.all(np.isfinite(pos)) or not np.all(np.isfinite(rad)):
            raise InvalidSegmentError("non-finite segment values")
        if np.any(rad <= 0):
            raise InvalidSegmentError("non-positive radius")
        steps = np.linalg.norm(np.diff(pos, axis=0), axis=1)
        if np.any(steps <= 1e-9):
            raise InvalidSegmentError("consecutive points coincide")
        object.__setattr__(self, "pos", pos)
        object.__setattr__(self, "radius", rad)

    def __len__(self) -> int:
        return int(self.pos.shape[0])

    def as_array(self) -> np.ndarray:
        return np.column_stack([self.pos, self.radius])

    @classmethod
    def from_array(cls, a) -> "VesselSegment":
        a = np.asarray(a, dtype=np.float64)
        return cls(a[:, :3], a[:, 3])


def arc_length(seg: VesselSegment) -> float:
    return float(np.linalg.norm(np.diff(seg.pos, axis=0), axis=1).sum())


def chord_length(seg: VesselSegment) -> float:
    return float(np.linalg.norm(seg.pos[-1] - seg.pos[0]))


def turning_angles(seg: VesselSegment) -> np.ndarray:
    d = np.diff(seg.pos, axis=0)
    a, b = d[:-1], d[1:]
    cross = np.linalg.norm(np.cross(a, b), axis=1)
    dot = np.einsum("ij,ij->i", a, b)
    return np.arctan2(cross, dot)


def mean_curvature(seg: VesselSegment) -> float:
    """Total turning angle per unit arc length."""
    if len(seg) == 2:
        return 0.0
    return float(turning_angles(seg).sum() / arc_length(seg))


def compute_descriptor(seg: VesselSegment, depth: int) -> GeometricDescriptor:
    if depth < 0:
        raise VesselError("depth must be non-negative")
    ell = arc_length(seg)
    delta = min(chord_length(seg), ell)
    return GeometricDescriptor(ell, delta, mean_curvature(seg), int(depth))


def rotation_between(a, b) -> np.ndarray:
    """Smallest rotation taking unit vector ``a`` onto unit vector ``b``.

    Antiparallel inputs rotate by pi about a fixed axis perpendicular to ``a``.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    v = np.cross(a, b)
    s = float(np.linalg.norm(v))
    c = float(a @ b)
    if s < 1e-12:
        if c > 0:
            return np.eye(3)
        helper = np.eye(3)[int(np.argmin(np.abs(a)))]
        k = np.cross(a, helper)
        k /= np.linalg.norm(k)
        return 2.0 * np.outer(k, k) - np.eye(3)
    return axis_angle(v / s, math.atan2(s, c))


def axis_angle(axis, angle: float) -> np.ndarray:
    k = np.asarray(axis, dtype=np.float64)
    K = np.array([[0.0, -k[2], k[1]], [k[2], 0.0, -k[0]], [-k[1], k[0], 0.0]])
    return np.eye(3) + math.sin(angle) * K + (1.0 - math.cos(angle)) * (K @ K)


@dataclass(frozen=True, eq=False)
class RigidSimilarity:
    """x -> scale * rotation @ x + translation; radii scale by ``scale``."""

    rotation: np.ndarray
    scale: float
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotation", _frozen(self.rotation).reshape(3, 3))
        object.__setattr__(self, "translation", _frozen(self.translation).reshape(3))
        if not self.scale > 0:
            raise VesselError("similarity scale must be positive")

    @classmethod
    def identity(cls) -> "RigidSimilarity":
        return cls(np.eye(3), 1.0, np.zeros(3))

    def apply_points(self, p) -> np.ndarray:
        return self.scale * (np.asarray(p) @ self.rotation.T) + self.translation

    def apply(self, seg: VesselSegment) -> VesselSegment:
        return VesselSegment(self.apply_points(seg.pos), seg.radius * self.scale)

    def compose(self, other: "RigidSimilarity") -> "RigidSimilarity":
        """self after other."""
        return RigidSimilarity(
            self.rotation @ other.rotation,
            self.scale * other.scale,
            self.scale * (self.rotation @ other.translation) + self.translation,
        )

    def inverse(self) -> "RigidSimilarity":
        rt = self.rotation.T
        return RigidSimilarity(rt, 1.0 / self.scale, -(rt @ self.translation) / self.scale)


EX = np.array([1.0, 0.0, 0.0])


def normalize_segment(seg: VesselSegment) -> tuple[VesselSegment, RigidSimilarity]:
    """Map a segment into the canonical frame.

    The canonical segment starts at the origin and ends at (1, 0, 0); the
    rotation is the smallest one taking +x onto the chord, so the roll is a
    function of the chord direction alone. Radii are divided by the chord.
    Returns the canonical segment and the transform mapping it back.
    """
    chord = seg.pos[-1] - seg.pos[0]
    delta = float(np.linalg.norm(chord))
    if delta <= 1e-9:
        raise DegenerateChordError("segment endpoints coincide")
    R = rotation_between(EX, chord / delta)
    xform = RigidSimilarity(R, delta, seg.pos[0])
    canon_pos = ((seg.pos - seg.pos[0]) @ R) / delta
    canon_pos[0] = 0.0
    canon_pos[-1] = EX
    return VesselSegment(canon_pos, seg.radius / delta), xform


def max_deviation_direction(seg: VesselSegment) -> Optional[np.ndarray]:
    """Unit offset from the chord to the farthest point, or None if straight."""
    a, b = seg.pos[0], seg.pos[-1]
    u = b - a
    n = np.linalg.norm(u)
    if n <= 1e-12:
        return None
    u = u / n
    rel = seg.pos - a
    perp = rel - np.outer(rel @ u, u)
    dist = np.linalg.norm(perp, axis=1)
    k = int(np.argmax(dist))
    if dist[k] <= 1e-9 * n:
        return None
    return perp[k] / dist[k]
