import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rsimplex import geometry as g
from rsimplex.geometry import HPolytope, HyperInterval, Ellipsoid

from oracles import enumerate_vertices, lift_feasible, random_bounded_polytope

UNIT_BOX2 = HyperInterval([-1, -1], [1, 1]).to_polytope()
PEND_S = HPolytope([[-1, 0], [1, 0], [0, -1], [0, 1]],
                   [-0.75 * math.pi, 1.25 * math.pi, 1, 1])


def test_contains_point_examples():
    assert g.contains_point(UNIT_BOX2, [0, 0])
    assert g.contains_point(PEND_S, [math.pi, 0])
    assert not g.contains_point(PEND_S, [0, 0])


def test_contains_point_dimension_mismatch():
    with pytest.raises(ValueError):
        g.contains_point(UNIT_BOX2, [0, 0, 0])


def test_contains_point_tolerance_is_absolute_on_unit_rows():
    p = HPolytope([[2.0]], [2.0])  # x <= 1
    assert g.contains_point(p, [1 + 0.5e-9])
    assert not g.contains_point(p, [1 + 1e-6])


def test_is_empty_examples():
    assert g.is_empty(HPolytope([[1.0], [-1.0]], [-1.0, -1.0]))
    assert not g.is_empty(UNIT_BOX2)


def test_is_empty_matches_vertex_enumeration():
    rng = np.random.default_rng(0)
    seen = {True: 0, False: 0}
    for _ in range(60):
        a = rng.normal(size=(10, 3))
        b = rng.normal(size=10)
        expected = len(enumerate_vertices(a, b)) == 0
        assert g.is_empty(HPolytope(a, b)) == expected
        seen[expected] += 1
    assert seen[True] > 0 and seen[False] > 0


def test_is_subset_examples():
    small = HyperInterval([-0.5, -0.5], [0.5, 0.5]).to_polytope()
    assert g.is_subset(small, UNIT_BOX2)
    assert not g.is_subset(UNIT_BOX2, small)


def test_is_subset_unbounded_is_false():
    half = HPolytope([[1.0, 0.0]], [0.0])
    assert not g.is_subset(half, UNIT_BOX2)


def test_is_subset_empty_is_vacuous():
    assert g.is_subset(g.empty_polytope(2), UNIT_BOX2)


def test_is_subset_matches_vertex_oracle_2d():
    rng = np.random.default_rng(1)
    for _ in range(80):
        ap, bp = random_bounded_polytope(rng, 2, 4, scale=rng.uniform(0.5, 1.5))
        aq, bq = random_bounded_polytope(rng, 2, 4, scale=rng.uniform(0.5, 1.5))
        verts = enumerate_vertices(ap, bp)
        if len(verts) == 0:
            continue
        q = HPolytope(aq, bq).canonical()
        expected = bool(np.all(verts @ q.a_mat.T <= q.b_vec + 1e-9))
        assert g.is_subset(HPolytope(ap, bp), HPolytope(aq, bq)) == expected


def test_project_hand_elimination():
    # {(x,u) | x+u <= 1, -u <= 0, u <= 1} -> {x <= 1}
    p = HPolytope([[1, 1], [0, -1], [0, 1]], [1, 0, 1])
    proj = g.project_to_states(p, 1)
    assert proj.n_rows == 1
    assert np.allclose(proj.a_mat, [[1.0]]) and np.allclose(proj.b_vec, [1.0])


def test_project_box():
    box = HyperInterval([-1, -2, -3], [1, 2, 3]).to_polytope()
    proj = g.project_to_states(box, 2)
    expected = HyperInterval([-1, -2], [1, 2]).to_polytope()
    assert g.is_subset(proj, expected) and g.is_subset(expected, proj)
    assert proj.n_rows == 4


def test_project_random_against_lift_oracle():
    rng = np.random.default_rng(2)
    for _ in range(10):
        a, b = random_bounded_polytope(rng, 3, 6)
        p = HPolytope(a, b)
        if g.is_empty(p):
            continue
        proj = g.project_to_states(p, 2)
        pts = rng.uniform(-1.2, 1.2, size=(200, 2))
        canon = p.canonical()
        for x in pts:
            inside = g.contains_point(proj, x, tol=1e-7)
            # Points within 1e-6 of the boundary are ambiguous for both routes.
            margin = np.min(proj.canonical().b_vec - proj.canonical().a_mat @ x)
            if abs(margin) < 1e-6:
                continue
            assert inside == lift_feasible(canon.a_mat, canon.b_vec, x, 2)


def test_project_row_cap():
    rng = np.random.default_rng(3)
    normals = rng.normal(size=(40, 3))
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    with pytest.raises(g.ProjectionError):
        g.project_to_states(HPolytope(normals, np.ones(40)), 1, max_rows=5)


def test_remove_redundant_examples():
    p = g.remove_redundant(HPolytope([[1.0], [1.0]], [1.0, 2.0]))
    assert p.n_rows == 1 and np.isclose(p.b_vec[0], 1.0)
    box = UNIT_BOX2
    dup = HPolytope(np.vstack([box.a_mat, box.a_mat, 3 * box.a_mat]),
                    np.concatenate([box.b_vec, box.b_vec, 3 * box.b_vec]))
    assert g.remove_redundant(dup).n_rows == 4


def test_remove_redundant_preserves_set():
    rng = np.random.default_rng(4)
    for _ in range(20):
        a, b = random_bounded_polytope(rng, 3, 8)
        p = HPolytope(a, b)
        if g.is_empty(p):
            continue
        r = g.remove_redundant(p)
        assert r.n_rows <= p.n_rows
        assert g.is_subset(p, r) and g.is_subset(r, p)


@settings(max_examples=30, deadline=None)
@given(st.integers(min_value=0, max_value=10_000))
def test_is_subset_reflexive(seed):
    rng = np.random.default_rng(seed)
    a, b = random_bounded_polytope(rng, 2, 3)
    p = HPolytope(a, b)
    assert g.is_subset(p, p)


def test_ellipsoid_membership_matches_formula():
    rng = np.random.default_rng(5)
    for _ in range(5):
        l_mat = rng.normal(size=(2, 2))
        y = rng.normal(size=2)
        e = Ellipsoid(l_mat, y)
        pts = rng.normal(size=(2000, 2)) * 2 + y
        for x in pts:
            assert e.contains(x) == (np.linalg.norm(l_mat @ (x - y)) <= 1 + 1e-9)


def test_box_in_polytope_agrees_with_vertex_test():
    rng = np.random.default_rng(6)
    for _ in range(200):
        lo = rng.uniform(-1.2, 1.0, size=2)
        box = HyperInterval(lo, lo + rng.uniform(0, 0.5, size=2))
        shifted = HyperInterval(box.lower + [math.pi, 0], box.upper + [math.pi, 0])
        verts_in = all(g.contains_point(PEND_S, v) for v in shifted.vertices())
        assert g.box_in_polytope(shifted, PEND_S) == verts_in


def test_text_roundtrip(tmp_path):
    p = HPolytope([[1.0, -2.5], [0.1, 1e-17]], [3.0, -4.25])
    path = tmp_path / "p.txt"
    g.save(p, path)
    q = g.load(path)
    assert np.array_equal(p.a_mat, q.a_mat) and np.array_equal(p.b_vec, q.b_vec)
    assert path.read_text().startswith("# hpolytope v1 dim=2 rows=2\n")


def test_hyperinterval_rejects_inverted_bounds():
    with pytest.raises(ValueError):
        HyperInterval([1.0], [0.0])
