import numpy as np
import pytest

from vesselgen.core import GeometricDescriptor, KeyGraph, KeyNode, SkeletonGraph, VesselSegment, ZERO_DESC, \
    validate_key_graph
from vesselgen.preprocess import (
    VolumeError,
    VoxelGrid,
    binarize_bifurcations,
    estimate_radius,
    extract_key_graph,
    load_sample,
    maximum_spanning_tree,
    normalize_sample,
    preprocess_skeleton,
    preprocess_volume,
    read_voxels,
    resample_count,
    resample_segment,
    save_sample,
    skeleton_to_graph,
    thin_volume,
    write_voxels,
)


def tube_volume(length=30, radius=3):
    x, y, z = np.mgrid[:length, :2 * radius + 5, :2 * radius + 5]
    c = radius + 2
    vol = ((y - c) ** 2 + (z - c) ** 2 <= radius ** 2) & (x >= 2) & (x < length - 2)
    return VoxelGrid.from_array(vol)


def test_voxel_file_roundtrip(tmp_path):
    v = VoxelGrid.from_array(np.random.default_rng(0).random((4, 5, 6)) > 0.5, spacing=(0.5, 1.0, 2.0))
    write_voxels(v, tmp_path / "v.raw")
    w = read_voxels(tmp_path / "v.raw")
    assert w.dims == v.dims and w.spacing == v.spacing
    assert np.array_equal(w.array, v.array)


def test_voxel_file_errors(tmp_path):
    (tmp_path / "short.raw").write_bytes(b"abc")
    with pytest.raises(VolumeError):
        read_voxels(tmp_path / "short.raw")
    v = VoxelGrid.from_array(np.ones((2, 2, 2)))
    write_voxels(v, tmp_path / "v.raw")
    data = (tmp_path / "v.raw").read_bytes()
    (tmp_path / "trunc.raw").write_bytes(data[:-1])
    with pytest.raises(VolumeError):
        read_voxels(tmp_path / "trunc.raw")


def test_thinning_tube_is_a_line():
    v = tube_volume()
    skel = thin_volume(v)
    # a one-voxel-wide curve along x: at most one voxel per x slice, close to the axis
    assert len(np.unique(skel[:, 0])) == len(skel)
    assert np.abs(skel[:, 1:] - 5).max() <= 1
    g = skeleton_to_graph(skel, estimate_radius(v, skel))
    assert sorted(g.degrees().values()).count(1) == 2


def test_thinning_rejects_two_components():
    vol = np.zeros((10, 10, 10), bool)
    vol[1:3, 1:3, 1:3] = True
    vol[6:8, 6:8, 6:8] = True
    with pytest.raises(VolumeError):
        thin_volume(VoxelGrid.from_array(vol))


def test_radius_of_tube_axis():
    v = tube_volume(radius=4)
    skel = thin_volume(v)
    r = estimate_radius(v, skel)
    mid = r[len(r) // 2]
    assert 4.0 <= mid <= 5.0


def test_tube_phantom_gives_two_key_nodes():
    s = preprocess_volume(tube_volume())
    assert len(s.key_graph.nodes) == 2
    assert len(s.segments) == 1


def cycle_skeleton():
    # square cycle with one thin edge; the spanning tree must drop it
    pos = [(0, 0, 0), (1, 0, 0), (1, 1, 0), (0, 1, 0)]
    return SkeletonGraph(ids=[0, 1, 2, 3], pos=pos, radius=[2.0, 2.0, 1.0, 0.5],
                         edges=[(0, 1), (1, 2), (2, 3), (3, 0)])


def test_maximum_spanning_tree_drops_thinnest_edge():
    tree = maximum_spanning_tree(cycle_skeleton())
    assert len(tree) == 3
    assert (2, 3) not in tree


def star_skeleton(arms=3, n=6):
    pos, rad, edges = [(0.0, 0.0, 0.0)], [1.0], []
    dirs = [(1, 0, 0), (0, 1, 0), (0, 0, 1), (-1, 0, 0)][:arms]
    for a, d in enumerate(dirs):
        prev = 0
        for k in range(1, n + 1):
            pos.append(tuple(k * np.asarray(d, float)))
            rad.append(0.9 - 0.1 * a)
            edges.append((prev, len(pos) - 1))
            prev = len(pos) - 1
    return SkeletonGraph(ids=np.arange(len(pos)), pos=pos, radius=rad, edges=edges)


def test_extract_key_graph_star():
    kg = extract_key_graph(star_skeleton(3))
    assert kg.root == 0
    assert len(kg.nodes) == 4
    # children ordered by subtree radius, thickest first
    assert list(kg.child_list(0)) == [6, 12, 18]
    for c in kg.child_list(0):
        assert kg.nodes[c].desc.ell == pytest.approx(6.0)
        assert kg.nodes[c].desc.kappa == 0.0


def test_binarize_four_way_junction():
    kg = binarize_bifurcations(extract_key_graph(star_skeleton(4)))
    assert kg.is_binary()
    assert len(kg.nodes) == 5 + 2
    assert validate_key_graph(kg) == []
    inserted = [n for n in kg.nodes if n in kg.aliases]
    assert len(inserted) == 2
    for n in inserted:
        assert np.array_equal(kg.nodes[n].pos, kg.nodes[0].pos)


def test_resample_segment_keeps_endpoints():
    t = np.linspace(0, 1, 7)
    s = VesselSegment(np.column_stack([t, t ** 2, 0 * t]), np.linspace(1, 0.5, 7))
    r = resample_segment(s, 12)
    assert len(r) == 12
    assert np.array_equal(r.pos[0], s.pos[0]) and np.array_equal(r.pos[-1], s.pos[-1])
    steps = np.linalg.norm(np.diff(r.pos, axis=0), axis=1)
    assert steps.max() / steps.min() < 1.5
    with pytest.raises(ValueError):
        resample_segment(s, 1)


def test_resample_count():
    s = VesselSegment([(0, 0, 0), (1, 0, 0), (2, 0, 0), (3, 0, 0)], np.ones(4))
    assert resample_count(s) == 4
    assert resample_count(s, spacing=0.5) == 7
    assert resample_count(s, spacing=1e-3, max_len=50) == 50


def test_preprocess_sample_invariants(samples):
    for s in samples:
        kg = s.key_graph
        assert validate_key_graph(kg) == []
        assert np.array_equal(kg.nodes[kg.root].pos, np.zeros(3))
        extent = max(np.linalg.norm(n.pos) for n in kg.nodes.values())
        assert extent == pytest.approx(1.0)
        for (p, c), seg in s.segments.items():
            assert np.array_equal(seg.pos[0], [0, 0, 0]) and np.array_equal(seg.pos[-1], [1, 0, 0])
            assert kg.nodes[c].desc.delta == pytest.approx(np.linalg.norm(kg.nodes[c].pos - kg.nodes[p].pos))


def test_normalize_sample_records_transform(trees):
    g = trees[0]
    s = preprocess_skeleton(g)
    root_raw = s.denormalize_points(s.key_graph.nodes[s.key_graph.root].pos)
    assert np.allclose(root_raw, g.pos[0])
    again = normalize_sample(s)
    assert again.scale == pytest.approx(s.scale)


def test_sample_file_roundtrip(tmp_path, samples):
    s = samples[0]
    save_sample(s, tmp_path / "s.json")
    t = load_sample(tmp_path / "s.json")
    assert t.key_graph.preorder() == s.key_graph.preorder()
    for k, seg in s.segments.items():
        assert np.abs(t.segments[k].as_array() - seg.as_array()).max() < 1e-12
    assert np.allclose(t.offset, s.offset) and t.scale == s.scale


def test_key_graph_without_bifurcation_depths():
    nodes = {0: KeyNode([0, 0, 0], [0, 0, 0], ZERO_DESC),
             1: KeyNode([1, 0, 0], [1, 0, 0], GeometricDescriptor(1, 1, 0, 1))}
    kg = binarize_bifurcations(KeyGraph(nodes, 0, {0: (1,), 1: ()}))
    assert kg.children[0] == (1, None)
