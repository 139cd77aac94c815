import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vesselgen.core import (
    DegenerateChordError,
    GeometricDescriptor,
    GraphError,
    InvalidSegmentError,
    KeyGraph,
    KeyNode,
    RigidSimilarity,
    SkeletonGraph,
    VesselSegment,
    ZERO_DESC,
    arc_length,
    chord_length,
    compute_descriptor,
    key_graph_from_dict,
    key_graph_to_dict,
    mean_curvature,
    normalize_segment,
    rotation_between,
    skeleton_from_dict,
    skeleton_to_dict,
    validate_key_graph,
)


def seg(points, r=1.0):
    points = np.asarray(points, dtype=float)
    return VesselSegment(points, np.full(len(points), r))


def test_arc_length_examples():
    assert arc_length(seg([(0, 0, 0), (1, 0, 0), (2, 0, 0)])) == 2.0
    assert arc_length(seg([(0, 0, 0), (3, 4, 0)])) == 5.0


def test_arc_length_random_polyline():
    p = np.random.default_rng(0).normal(size=(10, 3))
    expected = sum(math.dist(p[i], p[i + 1]) for i in range(9))
    assert arc_length(seg(p)) == pytest.approx(expected, rel=1e-12)


def test_chord_length():
    assert chord_length(seg([(0, 0, 0), (1, 1, 0), (3, 4, 0)])) == pytest.approx(5.0)


def test_segment_validation():
    with pytest.raises(InvalidSegmentError):
        seg([(0, 0, 0)])
    with pytest.raises(InvalidSegmentError):
        seg([(0, 0, 0), (0, 0, 0), (1, 0, 0)])
    with pytest.raises(InvalidSegmentError):
        VesselSegment([(0, 0, 0), (1, 0, 0)], [1.0, 0.0])


def test_descriptor_straight_segment():
    d = compute_descriptor(seg([(0, 0, 0), (1, 0, 0), (2, 0, 0)]), 3)
    assert (d.ell, d.delta, d.kappa, d.rho) == (2.0, 2.0, 0.0, 3)
    assert d.problems() == []


def test_descriptor_quarter_circle():
    t = np.linspace(0, np.pi / 2, 200)
    d = compute_descriptor(seg(np.column_stack([np.cos(t), np.sin(t), 0 * t])), 1)
    # 199 chords of angle h turn by h at each of the 198 interior vertices
    h = (np.pi / 2) / 199
    assert d.kappa == pytest.approx(198 * h / (199 * 2 * math.sin(h / 2)), rel=1e-12)
    assert d.kappa == pytest.approx(1.0, rel=1e-2)
    assert d.delta == pytest.approx(math.sqrt(2))
    assert d.delta < d.ell


def test_descriptor_rejects_negative_depth():
    with pytest.raises(ValueError):
        compute_descriptor(seg([(0, 0, 0), (1, 0, 0)]), -1)


def test_mean_curvature_two_points_is_zero():
    assert mean_curvature(seg([(0, 0, 0), (1, 2, 3)])) == 0.0


@pytest.mark.parametrize("b", [(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0.3, -0.4, 0.866)])
def test_rotation_between(b):
    b = np.asarray(b, float) / np.linalg.norm(b)
    R = rotation_between(np.array([1.0, 0, 0]), b)
    assert np.allclose(R @ [1, 0, 0], b, atol=1e-12)
    assert np.allclose(R.T @ R, np.eye(3), atol=1e-12)
    assert np.linalg.det(R) == pytest.approx(1.0, abs=1e-12)


unit_vec = st.tuples(*[st.floats(-1, 1)] * 3).filter(lambda v: np.linalg.norm(v) > 0.1)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(*[st.floats(-5, 5)] * 3), min_size=3, max_size=12, unique=True))
def test_normalize_segment_roundtrip(points):
    p = np.asarray(points, float)
    steps = np.linalg.norm(np.diff(p, axis=0), axis=1)
    if steps.min() < 1e-3 or np.linalg.norm(p[-1] - p[0]) < 1e-2:
        return
    s = VesselSegment(p, np.linspace(0.5, 0.2, len(p)))
    canon, xform = normalize_segment(s)
    assert np.array_equal(canon.pos[0], [0, 0, 0])
    assert np.array_equal(canon.pos[-1], [1, 0, 0])
    back = xform.apply(canon)
    scale = max(1.0, np.abs(p).max())
    assert np.abs(back.pos - p).max() < 1e-9 * scale
    assert np.allclose(back.radius, s.radius, rtol=1e-12)


def test_normalize_degenerate_chord():
    with pytest.raises(DegenerateChordError):
        normalize_segment(seg([(0, 0, 0), (1, 0, 0), (0, 0, 0)]))


@settings(max_examples=30, deadline=None)
@given(unit_vec, st.floats(0.1, 10), unit_vec, st.floats(0.1, 10))
def test_similarity_compose_inverse(a1, s1, a2, s2):
    r1 = rotation_between([1.0, 0, 0], np.asarray(a1) / np.linalg.norm(a1))
    r2 = rotation_between([0, 1.0, 0], np.asarray(a2) / np.linalg.norm(a2))
    t1 = RigidSimilarity(r1, s1, a2)
    t2 = RigidSimilarity(r2, s2, a1)
    p = np.random.default_rng(0).normal(size=(5, 3))
    assert np.allclose(t1.compose(t2).apply_points(p), t1.apply_points(t2.apply_points(p)), atol=1e-9)
    assert np.allclose(t1.inverse().apply_points(t1.apply_points(p)), p, atol=1e-9)


def test_similarity_rejects_bad_scale():
    with pytest.raises(ValueError):
        RigidSimilarity(np.eye(3), 0.0, np.zeros(3))


def line_skeleton():
    return SkeletonGraph(ids=[0, 1, 2], pos=[(0, 0, 0), (1, 0, 0), (2, 0, 0)], radius=[1, 1, 1],
                         edges=[(0, 1), (1, 2)])


def test_skeleton_validate():
    assert line_skeleton().validate() == []
    bad = SkeletonGraph(ids=[0, 1, 2, 3], pos=np.zeros((4, 3)), radius=[1, 1, 0, 1], edges=[(0, 1), (1, 1)])
    problems = " ".join(bad.validate())
    assert "self-loop" in problems and "radius" in problems
    split = SkeletonGraph(ids=[0, 1, 2, 3], pos=np.zeros((4, 3)), radius=np.ones(4), edges=[(0, 1), (2, 3)])
    assert any("2 connected components" in p for p in split.validate())


def test_skeleton_dict_roundtrip():
    g = line_skeleton()
    h = skeleton_from_dict(json.loads(json.dumps(skeleton_to_dict(g))))
    assert np.array_equal(g.pos, h.pos) and np.array_equal(g.edges, h.edges)


def y_key_graph():
    d = GeometricDescriptor(1.0, 1.0, 0.0, 1)
    nodes = {
        0: KeyNode([0, 0, 0], [0, 0, 0], ZERO_DESC),
        1: KeyNode([0, 0, 1], [0, 0, 1], d),
        2: KeyNode([0, 1, 1], [0, 1, 0], GeometricDescriptor(1.0, 1.0, 0.0, 2)),
        3: KeyNode([1, 0, 1], [1, 0, 0], GeometricDescriptor(1.0, 1.0, 0.0, 2)),
    }
    return KeyGraph(nodes, 0, {0: (1, None), 1: (2, 3), 2: (None, None), 3: (None, None)})


def test_key_graph_valid_and_traversal():
    kg = y_key_graph()
    assert validate_key_graph(kg) == []
    assert kg.preorder() == [0, 1, 2, 3]
    assert kg.edges() == [(0, 1), (1, 2), (1, 3)]
    assert kg.leaves() == [2, 3]
    assert kg.max_depth() == 2
    assert validate_key_graph(kg, max_depth=1) != []


def test_key_graph_detects_two_parents():
    kg = y_key_graph()
    kg.children[2] = (3, None)
    assert any("two parents" in p for p in validate_key_graph(kg))


def test_key_graph_detects_bad_direction_and_chord():
    kg = y_key_graph()
    kg.nodes[2] = KeyNode([0, 1, 1], [0, 0.5, 0], kg.nodes[2].desc)
    assert any("direction norm" in p for p in validate_key_graph(kg))
    kg = y_key_graph()
    kg.nodes[3] = KeyNode([2, 0, 1], [1, 0, 0], kg.nodes[3].desc)
    assert any("chord" in p for p in validate_key_graph(kg))


def test_descriptor_problems():
    assert GeometricDescriptor(1.0, 2.0, 0.0, 0).problems()
    assert GeometricDescriptor(1.0, 1.0, 0.5, 0).problems()
    assert GeometricDescriptor(-1.0, 0.0, 0.0, 0).problems()


def test_key_graph_dict_roundtrip():
    kg = y_key_graph()
    back = key_graph_from_dict(json.loads(json.dumps(key_graph_to_dict(kg))))
    assert back.preorder() == kg.preorder()
    for n in kg.nodes:
        assert np.array_equal(back.nodes[n].attributes(), kg.nodes[n].attributes())


def test_key_graph_dict_rejects_non_binary():
    kg = y_key_graph()
    kg.children[0] = (1, 2, 3)
    with pytest.raises(GraphError):
        key_graph_to_dict(kg)
