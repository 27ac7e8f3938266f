import numpy as np
import pytest

from isounfit.mesh import (SimplicialMesh, affine_map, make_rect_mesh, read_mesh, refine,
                           refine_uniform, write_mesh)


@pytest.mark.parametrize("n", [1, 2, 4, 7])
def test_rect_mesh_counts_and_area(n):
    m = make_rect_mesh((-1, -1), (1, 1), n)
    assert m.num_elements == 2 * n * n
    assert m.num_vertices == (n + 1) ** 2
    assert np.all(m.dets > 0)
    assert m.areas.sum() == pytest.approx(4.0, abs=1e-14)
    assert m.is_conforming()


@pytest.mark.parametrize("lower, upper, n", [((0, 0), (1, 1), 0), ((1, 0), (0, 1), 2), ((0, 0), (1, 1), 1.5)])
def test_rect_mesh_rejects_bad_input(lower, upper, n):
    with pytest.raises(ValueError):
        make_rect_mesh(lower, upper, n)


def test_affine_map_examples():
    m = SimplicialMesh(np.array([[1.0, 1.0], [2.0, 1.0], [1.0, 3.0]]), np.array([[0, 1, 2]]))
    F = affine_map(m, 0)
    np.testing.assert_allclose(F.A, [[1, 0], [0, 2]])
    np.testing.assert_allclose(F.x0, [1, 1])
    np.testing.assert_allclose(F(np.array([[1.0, 0.0], [0.0, 1.0]])), [[2, 1], [1, 3]])
    ref = SimplicialMesh(np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]), np.array([[0, 1, 2]]))
    np.testing.assert_allclose(affine_map(ref, 0).A, np.eye(2))
    np.testing.assert_allclose(affine_map(ref, 0).x0, 0)


def test_det_is_twice_area(square8):
    np.testing.assert_allclose(square8.dets, 2 * square8.areas)


def test_invalid_element_index():
    with pytest.raises(ValueError):
        SimplicialMesh(np.zeros((3, 2)), np.array([[0, 1, 3]]))


def test_refine_empty_is_noop(square8):
    assert refine(square8, []) is square8


def test_refine_all_bisects_everything(square8):
    fine = refine(square8, np.arange(square8.num_elements))
    assert fine.num_elements >= 2 * square8.num_elements
    assert fine.areas.sum() == pytest.approx(4.0, abs=1e-14)
    assert fine.is_conforming()
    assert np.all(fine.generation >= 1)


def test_refine_local_closure_conforming(rng, square8):
    m = square8
    for _ in range(8):
        marked = rng.choice(m.num_elements, size=max(1, m.num_elements // 10), replace=False)
        m = refine(m, marked)
        assert m.is_conforming()
        assert m.areas.sum() == pytest.approx(4.0, abs=1e-12)
        assert np.all(m.dets > 0)


def test_refine_rejects_bad_ids(square8):
    with pytest.raises(ValueError):
        refine(square8, [square8.num_elements])


def test_uniform_refinement_halves_diameter():
    m = make_rect_mesh((0, 0), (1, 1), 2)
    d = [m.diameters.max()]
    for _ in range(3):
        m = refine_uniform(m)
        d.append(m.diameters.max())
    np.testing.assert_allclose(np.array(d[1:]) / np.array(d[:-1]), 0.5, rtol=1e-12)


def test_min_angle_after_many_refinements(rng):
    m0 = make_rect_mesh((-1, -1), (1, 1), 4)
    m = m0
    for _ in range(10):
        c = m.vertices[m.elements].mean(axis=1)
        m = refine(m, np.nonzero(np.hypot(*c.T) < 0.5 + rng.uniform(0, 0.2))[0])
    assert m.min_angles().min() >= 0.5 * m0.min_angles().min()


def test_adjacency_tables(square8):
    m = square8
    counts = np.bincount(m.element_edges.ravel(), minlength=len(m.edges))
    assert len(m.boundary_edges) == np.sum(counts == 1) == 4 * 8
    assert set(np.unique(m.boundary_vertices)) == set(
        np.nonzero(np.isclose(np.abs(m.vertices).max(axis=1), 1.0))[0])
    nb = m.vertex_neighbors([0])
    assert 0 in nb and len(nb) > 1


def test_mesh_roundtrip(tmp_path, square8):
    disp = np.arange(2 * square8.num_vertices, dtype=float).reshape(-1, 2) / 7
    write_mesh(tmp_path / "m.txt", square8, disp)
    m, d = read_mesh(tmp_path / "m.txt")
    np.testing.assert_array_equal(m.elements, square8.elements)
    np.testing.assert_array_equal(m.vertices, square8.vertices)
    np.testing.assert_array_equal(d, disp)
    write_mesh(tmp_path / "n.txt", square8)
    assert read_mesh(tmp_path / "n.txt")[1] is None
