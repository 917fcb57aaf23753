import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tumourfem.mesh import (
    Marker,
    SimplicialMesh,
    build_box_mesh,
    build_interval_mesh,
    build_rect_mesh,
    check_non_obtuse,
    evaluate_p1,
    is_nested,
    mark_interface,
    refine,
    refine_uniform,
)

QUARTER = {"left": "neumann", "bottom": "neumann", "right": "robin", "top": "robin"}


def _angles(tri):
    out = []
    for i in range(3):
        a, b, c = tri[i], tri[(i + 1) % 3], tri[(i + 2) % 3]
        u, v = b - a, c - a
        out.append(math.degrees(math.acos(np.dot(u, v) / np.linalg.norm(u) / np.linalg.norm(v))))
    return out


def test_interval_four_cells():
    m = build_interval_mesh(0.0, 1.0, 4)
    assert (m.n_vertices, m.n_cells) == (5, 4)
    assert m.h_max == pytest.approx(0.25) and m.h_min == pytest.approx(0.25)


def test_interval_single_cell():
    m = build_interval_mesh(0.0, 1.0, 1)
    assert (m.n_vertices, m.n_cells) == (2, 1)


def test_interval_coarsest_study_grid():
    assert build_interval_mesh(0.0, 1.0, 32).h_max == pytest.approx(1 / 32)


def test_unit_square_two_right_triangles():
    m = build_rect_mesh((0, 0, 1, 1), 1, 1)
    assert (m.n_vertices, m.n_cells) == (4, 2)
    for cell in m.cells:
        for ang in _angles(m.vertices[cell]):
            assert min(abs(ang - 45), abs(ang - 90)) < 1e-9


def test_quarter_domain_markers_and_size():
    m = build_rect_mesh((0, 0, 12.5, 12.5), 64, 64, QUARTER)
    assert m.h_max == pytest.approx(12.5 * math.sqrt(2) / 64)
    mid = m.vertices[m.boundary_facets].mean(axis=1)
    robin = m.facet_markers == Marker.ROBIN
    on_robin_side = np.isclose(mid[:, 0], 12.5) | np.isclose(mid[:, 1], 12.5)
    assert np.array_equal(robin, on_robin_side)


def test_rect_two_by_one_is_conforming():
    m = build_rect_mesh((0, 0, 2, 1), 2, 1)
    assert (m.n_vertices, m.n_cells) == (6, 4)
    assert m.check_conforming()


def test_refine_all_gives_four_similar_children():
    m = build_rect_mesh((0, 0, 1, 1), 1, 1)
    r = refine(m, range(m.n_cells))
    assert r.n_cells == 8
    for cell in r.cells:
        assert sorted(np.round(_angles(r.vertices[cell]), 9)) == [45.0, 45.0, 90.0]
    assert r.check_conforming()


def test_refine_empty_marks_is_identity():
    m = build_rect_mesh((0, 0, 1, 1), 2, 2)
    r = refine(m, [])
    assert np.array_equal(r.vertices, m.vertices) and np.array_equal(r.cells, m.cells)


def test_refine_interval_single_cell():
    m = build_interval_mesh(0.0, 1.0, 4)
    r = refine(m, [0])
    assert r.n_cells == 5
    lengths = sorted(r.cell_volumes)
    assert lengths[:2] == pytest.approx([0.125, 0.125])


def test_mark_interface_constant_fields():
    m = build_rect_mesh((0, 0, 1, 1), 3, 3)
    assert mark_interface(m, np.ones(m.n_vertices)) == frozenset()
    assert mark_interface(m, np.zeros(m.n_vertices)) == frozenset(range(m.n_cells))


def test_mark_interface_tanh_layer():
    eps = 0.02
    m = build_interval_mesh(0.0, 1.0, 64)
    x = m.vertices[:, 0]
    phi = -np.tanh((np.abs(x - 0.5) - 0.2) / (math.sqrt(2) * eps))
    marks = mark_interface(m, phi)
    expected = {c for c in range(m.n_cells) if np.any(np.abs(phi[m.cells[c]]) < 0.95)}
    assert marks == expected
    centres = m.vertices[m.cells].mean(axis=1)[:, 0]
    assert all(abs(abs(centres[c] - 0.5) - 0.2) < 0.1 for c in marks)


def test_mark_interface_crossings_and_fence():
    m = build_interval_mesh(0.0, 1.0, 4)
    phi = np.array([1.0, 1.0, 1.0, -1.0, -1.0])
    assert mark_interface(m, phi) == frozenset()
    assert mark_interface(m, phi, detect_crossings=True) == frozenset({2})
    assert mark_interface(m, phi, detect_crossings=True, h_min=0.25) == frozenset()


def test_non_obtuse_structured_and_interval():
    assert check_non_obtuse(build_rect_mesh((0, 0, 1, 1), 4, 4)).ok
    assert check_non_obtuse(build_interval_mesh(0, 1, 5)).ok


def test_obtuse_triangle_detected():
    verts = np.array([[0.0, 0.0], [4.0, 0.0], [0.2, 0.2]])
    m = SimplicialMesh(verts, np.array([[0, 1, 2]]), np.array([[0, 1], [1, 2], [2, 0]]),
                       np.zeros(3, dtype=int))
    rep = check_non_obtuse(m)
    assert not rep.ok
    # angle at (0.2, 0.2) from the dot product of its edge vectors
    u, v = verts[0] - verts[2], verts[1] - verts[2]
    expected = math.degrees(math.acos(np.dot(u, v) / np.linalg.norm(u) / np.linalg.norm(v)))
    assert rep.worst_angle == pytest.approx(expected)


def test_box_mesh_volume_and_markers():
    m = build_box_mesh((0, 0, 0, 3, 3, 3), 2, {"right": "robin"})
    assert m.check_conforming()
    assert m.cell_volumes.sum() == pytest.approx(27.0, rel=1e-12)
    assert np.all(m.cell_volumes > 0)
    assert check_non_obtuse(m).ok


def test_evaluate_p1_reproduces_linear():
    m = refine(build_rect_mesh((0, 0, 1, 1), 3, 3), [0, 4, 7])
    f = lambda p: 2.0 * p[:, 0] - 3.0 * p[:, 1] + 0.5
    pts = np.random.default_rng(0).random((50, 2))
    assert evaluate_p1(m, f(m.vertices), pts) == pytest.approx(f(pts), abs=1e-12)


@settings(max_examples=15, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 2))
def test_uniform_refinement_counts_nesting_and_measure(nx, ny, passes):
    m = build_rect_mesh((0, 0, 1.5, 1), nx, ny, QUARTER)
    r = refine_uniform(m, passes)
    assert r.n_cells == m.n_cells * 4**passes
    assert is_nested(m, r)
    assert r.cell_volumes.sum() == pytest.approx(1.5, rel=1e-12)
    assert check_non_obtuse(r).ok
    assert r.check_conforming()


@settings(max_examples=15, deadline=None)
@given(st.integers(1, 16), st.integers(1, 3))
def test_interval_refinement_doubles(n, passes):
    m = build_interval_mesh(0.0, 2.0, n)
    r = refine_uniform(m, passes)
    assert r.n_cells == n * 2**passes
    assert is_nested(m, r)
    assert r.cell_volumes.sum() == pytest.approx(2.0, rel=1e-12)


@settings(max_examples=20, deadline=None)
@given(st.lists(st.integers(0, 31), max_size=12), st.integers(0, 2**31 - 1))
def test_local_refinement_stays_non_obtuse_and_conforming(marks, seed):
    m = build_rect_mesh((0, 0, 1, 1), 4, 4, QUARTER)
    rng = np.random.default_rng(seed)
    for _ in range(2):
        m = refine(m, set(marks) | set(rng.integers(0, m.n_cells, 3).tolist()))
        marks = []
    assert m.check_conforming()
    assert check_non_obtuse(m).ok
    assert m.cell_volumes.sum() == pytest.approx(1.0, rel=1e-12)
    assert set(np.unique(m.facet_markers)) <= {Marker.NEUMANN, Marker.ROBIN}
