import math

import numpy as np
import pytest

from isounfit.cutquad import (NotCutError, cut_element_rule, cut_rules, dump_rules, element_rules,
                              gauss_rule_segment, gauss_rule_triangle, mapped_interface_integral,
                              mapped_volume_integral)
from isounfit.deform import Deformation, build_deformation
from isounfit.fespace import FeSpace, interpolate_p1
from isounfit.levelset import circle, make_view
from isounfit.mesh import SimplicialMesh, make_rect_mesh, refine_uniform
from isounfit.studies import _neg_area_exact, random_cut_triangles

REF = SimplicialMesh(np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]), np.array([[0, 1, 2]]))


@pytest.mark.parametrize("order", range(0, 11))
def test_triangle_rule_monomials(order):
    q = gauss_rule_triangle(order)
    assert np.all(q.weights > 0)
    for a in range(order + 1):
        for b in range(order + 1 - a):
            exact = math.factorial(a) * math.factorial(b) / math.factorial(a + b + 2)
            val = np.sum(q.weights * q.points[:, 0] ** a * q.points[:, 1] ** b)
            assert val == pytest.approx(exact, abs=1e-14)


@pytest.mark.parametrize("order", range(0, 11))
def test_segment_rule_monomials(order):
    q = gauss_rule_segment(order)
    assert np.all(q.weights > 0)
    for a in range(order + 1):
        assert np.sum(q.weights * q.points**a) == pytest.approx(1 / (a + 1), abs=1e-14)


def test_midpoint_rule():
    q = gauss_rule_segment(1)
    np.testing.assert_allclose(q.points, [0.5])
    np.testing.assert_allclose(q.weights, [1.0])
    assert gauss_rule_triangle(0).weights.sum() == pytest.approx(0.5)
    with pytest.raises(ValueError):
        gauss_rule_triangle(-1)


def _p1(vals):
    sp = FeSpace(REF, 1)
    return interpolate_p1(sp.function(np.array(vals, dtype=float)))


def test_single_negative_vertex():
    r = cut_element_rule(REF, 0, _p1([-1, 1, 1]), 4)
    assert r.neg_weights.sum() == pytest.approx(0.5 / 4)
    assert r.pos_weights.sum() == pytest.approx(0.5 * 3 / 4)
    assert r.iface_weights.sum() == pytest.approx(math.sqrt(0.5))
    np.testing.assert_allclose(r.iface_normals, np.tile([1, 1], (len(r.iface_weights), 1)) / math.sqrt(2))


def test_two_negative_vertices():
    r = cut_element_rule(REF, 0, _p1([-1, -1, 1]), 4)
    assert r.neg_weights.sum() == pytest.approx(3 / 8)
    assert r.pos_weights.sum() == pytest.approx(1 / 8)


def test_not_cut_raises():
    with pytest.raises(NotCutError):
        cut_rules(REF, [0], np.array([[1.0, 2.0, 3.0]]), 2)


def test_cut_through_vertex_drops_empty_piece():
    r = cut_rules(REF, [0], np.array([[-1.0, 1.0, 0.0]]), 4)
    assert np.all(r.sides[0].weights > 0) and np.all(r.sides[1].weights > 0)
    assert r.neg_area[0] + r.pos_area[0] == pytest.approx(0.5, abs=1e-15)
    assert np.all(np.isfinite(r.iface.normals))


@pytest.mark.parametrize("order", [2, 6])
def test_polynomial_exactness_on_pieces(order):
    vals = np.array([[-0.3, 0.7, 0.4]])
    r = cut_rules(REF, [0], vals, order)
    for a in range(order + 1):
        b = order - a
        total = sum(np.sum(s.weights * s.ref[:, 0] ** a * s.ref[:, 1] ** b) for s in r.sides)
        exact = math.factorial(a) * math.factorial(b) / math.factorial(a + b + 2)
        assert total == pytest.approx(exact, abs=1e-15)


def test_fuzz_positivity_partition_and_area(rng):
    verts, vals = random_cut_triangles(rng, 1000)
    mesh = SimplicialMesh(verts.reshape(-1, 2), np.arange(3 * len(verts)).reshape(-1, 3))
    r = cut_rules(mesh, np.arange(len(verts)), vals, 4)
    for part in (r.sides[0], r.sides[1], r.iface):
        assert np.all(part.weights > 0)
    exact, area = _neg_area_exact(verts, vals)
    np.testing.assert_allclose(r.neg_area + r.pos_area, area, atol=1e-12)
    np.testing.assert_allclose(r.neg_area, exact, atol=1e-12)
    # interface weights sum to the straight segment length
    seg = np.bincount(r.iface.elem, r.iface.weights, minlength=len(verts))
    nz = seg > 0
    assert nz.sum() > 900


def test_monte_carlo_neg_area(rng):
    vals = np.array([[-0.4, 0.9, 0.3]])
    m = SimplicialMesh(np.array([[0.0, 0.0], [2.0, 0.5], [0.3, 1.5]]), np.array([[0, 1, 2]]))
    r = cut_rules(m, [0], vals, 2)
    n = 10**6
    a, b = rng.uniform(size=(2, n))
    fold = a + b > 1
    a[fold], b[fold] = 1 - a[fold], 1 - b[fold]
    hits = ((1 - a - b) * vals[0, 0] + a * vals[0, 1] + b * vals[0, 2]) < 0
    p = r.neg_area[0] / m.areas[0]
    assert abs(hits.mean() - p) <= 3 * math.sqrt(p * (1 - p) / n)


def test_mapped_integrals_identity_and_affine(square8):
    view = make_view(circle(0.6), square8, 2)
    r = cut_rules(square8, view.cut_set, view.lin_vertex_values(view.cut_set), 6)
    planar = r.sides[0].weights.sum()
    ident = Deformation.identity(square8, 2)
    assert mapped_volume_integral(lambda y: np.ones(len(y)), r.sides[0], ident) == pytest.approx(planar, rel=1e-14)
    assert mapped_volume_integral(lambda y: np.ones(len(y)), r.sides[0], None, square8) == pytest.approx(planar, rel=1e-14)
    # a global affine displacement scales volumes by |det J|
    J = np.array([[1.2, 0.1], [0.0, 0.9]])
    d = FeSpace(square8, 2, components=2).interpolate(lambda X: X @ (J - np.eye(2)).T)
    aff = Deformation(d, np.arange(square8.num_elements))
    val = mapped_volume_integral(lambda y: np.ones(len(y)), r.sides[0], aff)
    assert val == pytest.approx(planar * abs(np.linalg.det(J)), rel=1e-12)
    length, _ = mapped_interface_integral(lambda y: np.ones(len(y)), r.iface, ident)
    assert length == pytest.approx(r.iface.weights.sum(), rel=1e-14)


def test_uncut_elements_exact(square8):
    rule = element_rules(square8, np.arange(square8.num_elements), 4)
    val = mapped_volume_integral(lambda y: y[:, 0] ** 2 * y[:, 1] ** 2, rule, None, square8)
    assert val == pytest.approx(4 / 9, abs=1e-13)


@pytest.mark.parametrize("k", [1, 2, 3])
def test_circle_area_and_length(k):
    ls = circle(0.6)
    m = make_rect_mesh((-1, -1), (1, 1), 16)
    errs = []
    for _ in range(3):
        h = m.diameters.max()
        view = make_view(ls, m, k)
        d = build_deformation(view)
        r = cut_rules(m, view.cut_set, view.lin_vertex_values(view.cut_set), 2 * k + 2)
        inner = element_rules(m, np.nonzero(view.classification == 0)[0], 2 * k + 2)
        area = (mapped_volume_integral(lambda y: np.ones(len(y)), r.sides[0], d)
                + mapped_volume_integral(lambda y: np.ones(len(y)), inner, d))
        length, normals = mapped_interface_integral(lambda y: np.ones(len(y)), r.iface, d)
        np.testing.assert_allclose(np.linalg.norm(normals, axis=1), 1.0)
        errs.append([abs(area - math.pi * 0.36), abs(length - 2 * math.pi * 0.6)])
        m = refine_uniform(m)
    errs = np.array(errs)
    # area and length are integrals; signed errors cancel, so only the
    # low-order rates are stable enough to gate on
    assert np.all(errs[-1] < h ** (k + 1))
    if k <= 2:
        rates = np.log2(errs[:-1] / errs[1:])
        assert np.all(rates[-1] > k + 0.5)


def test_normals_point_outward_on_circle(square8):
    view = make_view(circle(0.6), square8, 2)
    d = build_deformation(view)
    r = cut_rules(square8, view.cut_set, view.lin_vertex_values(view.cut_set), 4)
    from isounfit.cutquad import mapped_interface_data

    y, w, n = mapped_interface_data(r.iface, d)
    radial = y / np.linalg.norm(y, axis=1)[:, None]
    assert np.all(np.sum(n * radial, axis=1) > 0.9)


def test_dump_rules(tmp_path):
    r = cut_rules(REF, [0], np.array([[-1.0, 1.0, 1.0]]), 2)
    dump_rules(tmp_path / "r.csv", r)
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0] == "element,side,x,y,weight"
    assert {ln.split(",")[1] for ln in lines[1:]} == {"NEG", "POS", "IFACE"}
