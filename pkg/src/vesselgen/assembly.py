"""Stage 3: place canonical segments along a key graph and mesh the result."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Mapping, Union

import numpy as np
from skimage import measure

from vesselgen import kernels, rvae, segvae
from vesselgen.core import (
    EX,
    KeyGraph,
    SkeletonGraph,
    VesselError,
    VesselSegment,
    axis_angle,
    max_deviation_direction,
    rotation_between,
)

POINT_EDGE = 1e-6  # shorter key edges are point attachments


class AssemblyError(VesselError):
    pass


class MeshError(VesselError):
    pass


def align_segment(canonical: VesselSegment, p_start, p_end, n) -> VesselSegment:
    """Scale, rotate and translate a canonical segment onto a key edge.

    The first rotation takes +x onto the chord; the second rolls about the
    chord so the bend points along the part of ``n`` orthogonal to the chord
    (skipped when that part is negligible or the segment is straight).
    """
    p_start = np.asarray(p_start, dtype=np.float64)
    p_end = np.asarray(p_end, dtype=np.float64)
    chord = p_end - p_start
    scale = float(np.linalg.norm(chord))
    if scale <= 1e-9:
        raise AssemblyError("segment endpoints coincide")
    u = chord / scale
    pts = scale * (canonical.pos @ rotation_between(EX, u).T)
    n = np.asarray(n, dtype=np.float64)
    n_perp = n - (n @ u) * u
    norm = float(np.linalg.norm(n_perp))
    if norm >= 1e-6:
        dev = max_deviation_direction(VesselSegment(pts, canonical.radius))
        if dev is not None:
            target = n_perp / norm
            angle = math.atan2(float(u @ np.cross(dev, target)), float(dev @ target))
            pts = pts @ axis_angle(u, angle).T
    pts = pts + p_start
    pts[0] = p_start
    pts[-1] = p_end
    return VesselSegment(pts, canonical.radius * scale)


SegmentSource = Union[Mapping[tuple, VesselSegment], Callable[[int, int], VesselSegment]]


def assemble(kg: KeyGraph, segment_source: SegmentSource) -> SkeletonGraph:
    """Depth-first (left before right) placement of one segment per key edge.

    Key nodes map to exactly one skeleton node each; segment endpoints reuse
    those nodes, so nothing is merged by spatial tolerance.
    """
    get = segment_source if callable(segment_source) else (lambda p, c: segment_source.get((p, c)))
    pos: list[np.ndarray] = []
    rad: list[float] = []
    edges: list[tuple[int, int]] = []
    slot: dict[int, int] = {}

    def new_node(p, r):
        pos.append(np.asarray(p, dtype=np.float64))
        rad.append(float(r))
        return len(pos) - 1

    root = kg.root
    slot[root] = new_node(kg.nodes[root].pos, 1.0)
    root_radius_set = False
    for p in kg.preorder():
        for c in kg.child_list(p):
            child = kg.nodes[c]
            if float(np.linalg.norm(child.pos - kg.nodes[p].pos)) < POINT_EDGE:
                slot[c] = slot[p]
                continue
            canon = get(p, c)
            if canon is None:
                raise AssemblyError(f"no segment for key edge ({p}, {c})")
            seg = align_segment(canon, kg.nodes[p].pos, child.pos, child.dir)
            if slot[p] == slot[root] and not root_radius_set:
                rad[slot[root]] = float(seg.radius[0])
                root_radius_set = True
            prev = slot[p]
            for k in range(1, len(seg) - 1):
                cur = new_node(seg.pos[k], seg.radius[k])
                edges.append((prev, cur))
                prev = cur
            slot[c] = new_node(child.pos, seg.radius[-1])
            edges.append((prev, slot[c]))
    return SkeletonGraph(
        ids=np.arange(len(pos)),
        pos=np.array(pos).reshape(-1, 3),
        radius=np.array(rad),
        edges=np.array(edges, dtype=np.int64).reshape(-1, 2),
    )


MAX_TREE_DRAWS = 100


def generate_vessel(stage1, stage2, rng: np.random.Generator, max_depth=None,
                    with_key_graph: bool = False):
    """Sample a key graph, sample one segment per non-degenerate edge, assemble.

    ``stage1`` and ``stage2`` are (ParameterStore, config) pairs. Key graphs
    without a single edge carry no radius or shape and are drawn again.
    """
    s1, c1 = stage1
    s2, c2 = stage2
    for _ in range(MAX_TREE_DRAWS):
        kg = rvae.sample_key_graph(s1, c1, rng, max_depth)
        if len(kg.nodes) > 1:
            break
    else:
        raise AssemblyError(f"no key graph with an edge in {MAX_TREE_DRAWS} draws")
    edges = [(p, c) for p, c in kg.edges()
             if float(np.linalg.norm(kg.nodes[c].pos - kg.nodes[p].pos)) >= POINT_EDGE]
    segs = segvae.sample_segments([kg.nodes[c].desc for _, c in edges], s2, c2, rng) if edges else []
    g = assemble(kg, dict(zip(edges, segs)))
    return (g, kg) if with_key_graph else g


# --------------------------------------------------------------------------- #
# Meshes


@dataclass(frozen=True, eq=False)
class TriangleMesh:
    vertices: np.ndarray
    triangles: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        t = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if t.size and (t.min() < 0 or t.max() >= len(v)):
            raise MeshError("triangle index out of range")
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "triangles", t)

    def triangle_areas(self) -> np.ndarray:
        a, b, c = (self.vertices[self.triangles[:, k]] for k in range(3))
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)

    def surface_area(self) -> float:
        return float(self.triangle_areas().sum())

    def signed_volume(self) -> float:
        a, b, c = (self.vertices[self.triangles[:, k]] for k in range(3))
        return float(np.einsum("ij,ij->i", a, np.cross(b, c)).sum() / 6.0)

    def is_watertight(self) -> bool:
        """Every undirected edge is shared by exactly two triangles."""
        e = self._edges()
        e = np.sort(e, axis=1)
        _, counts = np.unique(e, axis=0, return_counts=True)
        return bool(len(counts)) and bool(np.all(counts == 2))

    def is_consistently_oriented(self) -> bool:
        """Every directed edge appears once (neighbours traverse it oppositely)."""
        _, counts = np.unique(self._edges(), axis=0, return_counts=True)
        return bool(np.all(counts == 1))

    def n_components(self) -> int:
        from scipy.sparse import coo_matrix
        from scipy.sparse.csgraph import connected_components

        e = self._edges()
        n = len(self.vertices)
        adj = coo_matrix((np.ones(len(e)), (e[:, 0], e[:, 1])), shape=(n, n))
        used = np.zeros(n, dtype=bool)
        used[self.triangles.ravel()] = True
        _, labels = connected_components(adj, directed=False)
        return len(np.unique(labels[used]))

    def _edges(self) -> np.ndarray:
        t = self.triangles
        return np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])


MAX_GRID_SIDE = 1024


def mesh_vessel(g: SkeletonGraph, resolution: int = 160) -> tuple["TriangleMesh", float, int]:
    """Mesh at about ``resolution`` voxels along the longest side (finer if every
    radius allows half of the smallest one).

    Branches thinner than 1.25 voxels are thickened to that radius for the
    mesh only. Returns the mesh, the voxel size and the number of thickened nodes.
    """
    rmin = float(g.radius.min())
    ext = float((g.pos.max(axis=0) - g.pos.min(axis=0)).max() + 2 * g.radius.max())
    voxel = max(0.5 * rmin, ext / resolution)
    floor = 1.25 * voxel
    thin = int((g.radius < floor).sum())
    if thin:
        g = SkeletonGraph(ids=g.ids, pos=g.pos, radius=np.maximum(g.radius, floor), edges=g.edges)
    return skeleton_to_mesh(g, voxel), voxel, thin


def skeleton_to_mesh(g: SkeletonGraph, voxel_size: float) -> TriangleMesh:
    """Zero level set of the union of tapered capsules, one per skeleton edge.

    Marching cubes runs on a grid of ``voxel_size`` padded by the largest
    radius plus two voxels; triangles are flipped if needed so the signed
    volume is positive.
    """
    if not voxel_size > 0:
        raise MeshError("voxel size must be positive")
    rmin = float(g.radius.min())
    if voxel_size >= rmin:
        raise MeshError(f"voxel size {voxel_size} must be below the smallest radius {rmin}")
    idx = g.index_of()
    if g.n_edges:
        ia = np.array([idx[int(u)] for u in g.edges[:, 0]])
        ib = np.array([idx[int(v)] for v in g.edges[:, 1]])
    else:
        ia = ib = np.arange(g.n_nodes)
    a, b = g.pos[ia], g.pos[ib]
    pad = float(g.radius.max()) + 2.0 * voxel_size
    lo = g.pos.min(axis=0) - pad
    hi = g.pos.max(axis=0) + pad
    shape = tuple(int(s) for s in np.ceil((hi - lo) / voxel_size).astype(int) + 1)
    if max(shape) > MAX_GRID_SIDE:
        raise MeshError(f"grid {shape} exceeds {MAX_GRID_SIDE} voxels per side; use a larger voxel size")
    field = kernels.capsule_field(lo, voxel_size, shape, a, b, g.radius[ia], g.radius[ib], 2.0 * voxel_size)
    verts, faces, _, _ = measure.marching_cubes(field, level=0.0, spacing=(voxel_size,) * 3)
    mesh = TriangleMesh(verts + lo, faces)
    if mesh.signed_volume() < 0:
        mesh = TriangleMesh(mesh.vertices, mesh.triangles[:, ::-1])
    return mesh


# --------------------------------------------------------------------------- #
# Mesh files


def export_mesh(m: TriangleMesh, path, format: str = "obj") -> None:
    fmt = format.lower()
    if fmt == "obj":
        with open(path, "w", encoding="ascii") as fh:
            for v in m.vertices:
                fh.write(f"v {v[0]:.9f} {v[1]:.9f} {v[2]:.9f}\n")
            for t in m.triangles:
                fh.write(f"f {t[0] + 1} {t[1] + 1} {t[2] + 1}\n")
    elif fmt == "ply":
        header = (
            "ply\nformat binary_little_endian 1.0\n"
            f"element vertex {len(m.vertices)}\n"
            "property double x\nproperty double y\nproperty double z\n"
            f"element face {len(m.triangles)}\n"
            "property list uchar int vertex_indices\nend_header\n"
        )
        faces = np.zeros(len(m.triangles), dtype=[("n", "u1"), ("idx", "<i4", (3,))])
        faces["n"] = 3
        faces["idx"] = m.triangles
        with open(path, "wb") as fh:
            fh.write(header.encode("ascii"))
            fh.write(m.vertices.astype("<f8").tobytes())
            fh.write(faces.tobytes())
    else:
        raise ValueError(f"unknown mesh format {format!r}")


def read_obj(path) -> TriangleMesh:
    verts, faces = [], []
    with open(path, encoding="ascii") as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                verts.append([float(x) for x in parts[1:4]])
            elif parts[0] == "f":
                faces.append([int(x.split("/")[0]) - 1 for x in parts[1:4]])
    return TriangleMesh(np.array(verts).reshape(-1, 3), np.array(faces).reshape(-1, 3))


def read_ply(path) -> TriangleMesh:
    with open(path, "rb") as fh:
        raw = fh.read()
    end = raw.index(b"end_header\n") + len(b"end_header\n")
    header = raw[:end].decode("ascii").splitlines()
    nv = nf = 0
    for line in header:
        if line.startswith("element vertex"):
            nv = int(line.split()[-1])
        elif line.startswith("element face"):
            nf = int(line.split()[-1])
    verts = np.frombuffer(raw, dtype="<f8", count=3 * nv, offset=end).reshape(nv, 3)
    faces = np.frombuffer(raw, dtype=[("n", "u1"), ("idx", "<i4", (3,))], count=nf, offset=end + 24 * nv)
    if nf and np.any(faces["n"] != 3):
        raise MeshError("only triangle faces are supported")
    return TriangleMesh(verts.copy(), faces["idx"].astype(np.int64))

