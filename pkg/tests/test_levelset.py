import numpy as np
import pytest

from isounfit.cutquad import cut_rules
from isounfit.fespace import FeSpace
from isounfit.levelset import (Side, by_name, circle, classify, classify_values, flower, make_view,
                               plane, project_levelset)
from isounfit.mesh import SimplicialMesh, make_rect_mesh, refine_uniform


@pytest.mark.parametrize("vals, expected", [
    ((1.0, 2.0, 0.5), Side.POS),
    ((-1.0, -2.0, -0.5), Side.NEG),
    ((-1.0, 1.0, 1.0), Side.CUT),
    ((0.0, 0.0, 1.0), Side.POS),
    ((0.0, 0.0, 0.0), Side.POS),
    ((0.0, -1.0, -1.0), Side.CUT),
])
def test_classify_values(vals, expected):
    assert classify_values(np.array([vals]))[0] == expected


def test_zero_edge_contributes_no_neg_area():
    m = SimplicialMesh(np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]), np.array([[0, 1, 2]]))
    vals = np.array([[0.0, 0.0, 1.0]])
    assert classify_values(vals)[0] == Side.POS
    # perturbing one vertex to a negative value keeps the NEG part vanishingly small
    r = cut_rules(m, [0], np.array([[-1e-300, 0.0, 1.0]]), 2)
    assert r.neg_area[0] == pytest.approx(0.0, abs=1e-200)


@pytest.mark.parametrize("k", [1, 2, 3])
@pytest.mark.parametrize("method", ["oswald", "nodal"])
def test_plane_is_reproduced(k, method, square8):
    ls = plane((0.6, 0.8), 0.1)
    phi = project_levelset(ls, FeSpace(square8, k), method=method)
    X = phi.space.dof_coordinates()
    np.testing.assert_allclose(phi.coeffs, ls(X), atol=1e-12)
    view = make_view(ls, square8, k, method=method)
    np.testing.assert_allclose(view.phi_lin.coeffs, ls(square8.vertices), atol=1e-12)


def test_view_sets(square8):
    view = make_view(circle(0.6), square8, 2)
    cls = view.classification
    assert set(np.unique(cls)) == {Side.NEG, Side.POS, Side.CUT}
    np.testing.assert_array_equal(view.cut_set, np.nonzero(cls == Side.CUT)[0])
    assert set(view.cut_set) <= set(view.extended_set)
    touched = np.zeros(square8.num_vertices, bool)
    touched[square8.elements[view.cut_set].ravel()] = True
    expected = np.nonzero(touched[square8.elements].any(axis=1))[0]
    np.testing.assert_array_equal(view.extended_set, expected)
    cls2, cut2, ext2 = classify(view.phi_lin)
    np.testing.assert_array_equal(cut2, view.cut_set)


def test_circle_projection_order():
    ls = circle(0.6)
    m = make_rect_mesh((-1, -1), (1, 1), 8)
    errs = []
    pts = np.array([[0.2, 0.2], [0.6, 0.1], [0.1, 0.5]])
    for _ in range(4):
        view = make_view(ls, m, 2)
        el = np.repeat(view.cut_set, len(pts))
        ref = np.tile(pts, (len(view.cut_set), 1))
        x = np.einsum("pij,pj->pi", m.jacobians[el], ref) + m.origins[el]
        errs.append(np.abs(view.phi.eval_points(el, ref) - ls(x)).max())
        m = refine_uniform(m)
    rates = np.log2(np.array(errs[:-1]) / errs[1:])
    assert rates[-1] > 2.7


def test_planar_interface_second_order():
    ls = circle(0.6)
    m = make_rect_mesh((-1, -1), (1, 1), 8)
    errs, counts = [], []
    for _ in range(4):
        view = make_view(ls, m, 1)
        r = cut_rules(m, view.cut_set, view.lin_vertex_values(view.cut_set), 2)
        x = np.einsum("pij,pj->pi", m.jacobians[r.iface.elem], r.iface.ref) + m.origins[r.iface.elem]
        errs.append(np.abs(ls(x)).max())
        counts.append(len(view.cut_set) * m.diameters.max())
        m = refine_uniform(m)
    assert np.log2(errs[-2] / errs[-1]) > 1.7
    assert max(counts) / min(counts) < 2.0


def test_flower_and_names():
    f = flower()
    x = np.array([[0.5, 0.0], [0.0, 0.7]])
    # at theta = 0 the radius is r0; at theta = pi/2 sin(4 pi) = 0
    np.testing.assert_allclose(f(x), [0.0, 0.2], atol=1e-14)
    assert np.isfinite(make_view(f, make_rect_mesh((-1, -1), (1, 1), 4), 3).phi.coeffs).all()
    assert by_name("circle").name == "circle"
    assert by_name("plane", normal=(0, 1), c=0.5)(np.array([[0.0, 1.0]]))[0] == 0.5
    with pytest.raises(ValueError):
        by_name("torus")
    with pytest.raises(ValueError):
        project_levelset(f, FeSpace(make_rect_mesh((0, 0), (1, 1), 1), 1), method="bogus")
