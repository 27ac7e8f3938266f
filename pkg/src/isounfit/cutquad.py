"""Positive-weight quadrature on cut triangles and its mapped counterpart.

Rules on a cut element are produced by splitting the element along the
zero line of the P1 level set into a triangle and a quadrilateral (itself
split into two triangles) and mapping a collapsed Gauss rule onto every
piece.  Degenerate pieces (cut through a vertex) are dropped, so every
weight that is produced is strictly positive.
"""

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .levelset import Side, classify_values


class NotCutError(ValueError):
    pass


class SingularDeformationError(ArithmeticError):
    pass


@dataclass(frozen=True)
class QuadRule:
    points: np.ndarray
    weights: np.ndarray
    order: int


@lru_cache(maxsize=None)
def gauss_rule_segment(order):
    """Gauss-Legendre rule on [0, 1], exact up to degree ``order``."""
    if order < 0:
        raise ValueError("order must be >= 0")
    n = max(1, (order + 2) // 2)
    x, w = np.polynomial.legendre.leggauss(n)
    return QuadRule(0.5 * (x + 1.0), 0.5 * w, order)


@lru_cache(maxsize=None)
def gauss_rule_triangle(order):
    """Collapsed Gauss rule on the reference triangle, exact up to ``order``."""
    if order < 0:
        raise ValueError("order must be >= 0")
    n = max(1, (order + 3) // 2)
    x, w = np.polynomial.legendre.leggauss(n)
    x = 0.5 * (x + 1.0)
    w = 0.5 * w
    xi, eta = np.meshgrid(x, x, indexing="ij")
    wxi, weta = np.meshgrid(w, w, indexing="ij")
    pts = np.stack([xi.ravel(), (eta * (1.0 - xi)).ravel()], axis=1)
    wts = (wxi * weta * (1.0 - xi)).ravel()
    return QuadRule(pts, wts, order)


_REF_VERTS = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])


@dataclass
class SideRule:
    """Flattened quadrature points of one side over many elements."""

    elem: np.ndarray
    ref: np.ndarray
    weights: np.ndarray


@dataclass
class InterfaceRule:
    elem: np.ndarray
    ref: np.ndarray
    weights: np.ndarray
    normals: np.ndarray
    tangents: np.ndarray


@dataclass
class CutRules:
    """Quadrature rules for a batch of cut elements.

    ``sides[0]`` covers ``{I_h phi < 0}``, ``sides[1]`` covers
    ``{I_h phi >= 0}``.  Points are reference coordinates of ``elem``;
    weights are physical (area or length) on the undeformed mesh.
    Interface normals are unit vectors pointing from NEG to POS.
    """

    elements: np.ndarray
    sides: tuple
    iface: InterfaceRule
    neg_area: np.ndarray
    pos_area: np.ndarray


@dataclass
class CutRule:
    element: int
    neg_points: np.ndarray
    neg_weights: np.ndarray
    pos_points: np.ndarray
    pos_weights: np.ndarray
    iface_points: np.ndarray
    iface_weights: np.ndarray
    iface_normals: np.ndarray


def _tri_area(p0, p1, p2):
    d1 = p1 - p0
    d2 = p2 - p0
    return 0.5 * (d1[..., 0] * d2[..., 1] - d1[..., 1] * d2[..., 0])


def cut_rules(mesh, elems, vertex_values, order):
    """Vectorised cut rules for ``elems`` given P1 vertex values (n, 3)."""
    elems = np.asarray(elems, dtype=np.int64)
    vals = np.asarray(vertex_values, dtype=float)
    n = len(elems)
    cls = classify_values(vals)
    if np.any(cls != Side.CUT):
        bad = elems[cls != Side.CUT]
        raise NotCutError(f"elements {bad[:5].tolist()} are not cut")

    neg = vals < 0
    nneg = neg.sum(axis=1)
    lone_is_neg = nneg == 1
    lone = np.where(lone_is_neg, np.argmax(neg, axis=1), np.argmax(~neg, axis=1))
    p = (lone + 1) % 3
    q = (lone + 2) % 3
    rows = np.arange(n)
    aL, ap, aq = vals[rows, lone], vals[rows, p], vals[rows, q]
    VL, Vp, Vq = _REF_VERTS[lone], _REF_VERTS[p], _REF_VERTS[q]
    tp = aL / (aL - ap)
    tq = aL / (aL - aq)
    P = VL + tp[:, None] * (Vp - VL)
    Q = VL + tq[:, None] * (Vq - VL)

    lone_side = np.where(lone_is_neg, 0, 1)
    pieces = [
        (VL, P, Q, lone_side),
        (P, Vp, Vq, 1 - lone_side),
        (P, Vq, Q, 1 - lone_side),
    ]
    rule = gauss_rule_triangle(order)
    dets = mesh.dets[elems]
    side_elem = [[], []]
    side_ref = [[], []]
    side_w = [[], []]
    neg_area = np.zeros(n)
    pos_area = np.zeros(n)
    for a, b, c, side in pieces:
        area = _tri_area(a, b, c)
        keep = area > 0
        if not keep.any():
            continue
        a, b, c, side, area = a[keep], b[keep], c[keep], side[keep], area[keep]
        idx = rows[keep]
        pts = (a[:, None, :] + rule.points[None, :, 0:1] * (b - a)[:, None, :]
               + rule.points[None, :, 1:2] * (c - a)[:, None, :])
        w = rule.weights[None, :] * (2.0 * area * dets[idx])[:, None]
        phys_area = area * dets[idx]
        np.add.at(neg_area, idx[side == 0], phys_area[side == 0])
        np.add.at(pos_area, idx[side == 1], phys_area[side == 1])
        for s in (0, 1):
            m = side == s
            if m.any():
                side_elem[s].append(np.repeat(elems[idx[m]], rule.points.shape[0]))
                side_ref[s].append(pts[m].reshape(-1, 2))
                side_w[s].append(w[m].ravel())

    sides = []
    for s in (0, 1):
        if side_elem[s]:
            sides.append(SideRule(np.concatenate(side_elem[s]), np.concatenate(side_ref[s]),
                                  np.concatenate(side_w[s])))
        else:
            sides.append(SideRule(np.zeros(0, np.int64), np.zeros((0, 2)), np.zeros(0)))

    A = mesh.jacobians[elems]
    Ainv = mesh.inverse_jacobians[elems]
    d_ref = Q - P
    d_phys = np.einsum("eij,ej->ei", A, d_ref)
    length = np.linalg.norm(d_phys, axis=1)
    grad_ref = np.stack([vals[:, 1] - vals[:, 0], vals[:, 2] - vals[:, 0]], axis=1)
    grad = np.einsum("eji,ej->ei", Ainv, grad_ref)
    normal = grad / np.linalg.norm(grad, axis=1)[:, None]
    keep = length > 0
    seg = gauss_rule_segment(order)
    ns = len(seg.weights)
    ipts = P[keep][:, None, :] + seg.points[None, :, None] * d_ref[keep][:, None, :]
    iw = seg.weights[None, :] * length[keep][:, None]
    tang = d_phys[keep] / length[keep][:, None]
    iface = InterfaceRule(
        np.repeat(elems[keep], ns),
        ipts.reshape(-1, 2),
        iw.ravel(),
        np.repeat(normal[keep], ns, axis=0),
        np.repeat(tang, ns, axis=0),
    )
    return CutRules(elems, tuple(sides), iface, neg_area, pos_area)


def cut_element_rule(mesh, elem, phi_lin, order):
    """Quadrature rule of a single cut element (see :func:`cut_rules`)."""
    vals = phi_lin.coeffs[mesh.elements[elem]][None, :]
    r = cut_rules(mesh, [elem], vals, order)
    return CutRule(
        int(elem),
        r.sides[0].ref, r.sides[0].weights,
        r.sides[1].ref, r.sides[1].weights,
        r.iface.ref, r.iface.weights, r.iface.normals,
    )


def element_rules(mesh, elems, order):
    """Standard rule on whole (uncut) elements as a :class:`SideRule`."""
    elems = np.asarray(elems, dtype=np.int64)
    rule = gauss_rule_triangle(order)
    nq = len(rule.weights)
    w = rule.weights[None, :] * mesh.dets[elems][:, None]
    return SideRule(np.repeat(elems, nq), np.tile(rule.points, (len(elems), 1)), w.ravel())


def _map(deformation, mesh, elem, ref):
    """Mapped points and Jacobians of ``Theta`` (reference -> deformed)."""
    if deformation is None:
        A = mesh.jacobians[elem]
        y = np.einsum("pij,pj->pi", A, ref) + mesh.origins[elem]
        return y, A
    return deformation.theta(elem, ref)


def mapped_volume_integral(f, rule, deformation=None, mesh=None):
    """``sum_i w_i |det DPsi_h(x_i)| f(Psi_h(x_i))`` over a :class:`SideRule`."""
    mesh = mesh if mesh is not None else deformation.mesh
    y, J = _map(deformation, mesh, rule.elem, rule.ref)
    detJ = J[:, 0, 0] * J[:, 1, 1] - J[:, 0, 1] * J[:, 1, 0]
    factor = np.abs(detJ) / mesh.dets[rule.elem]
    fv = np.asarray(f(y), dtype=float)
    if not np.all(np.isfinite(fv)):
        raise FloatingPointError("non-finite integrand value")
    return float(np.sum(rule.weights * factor * fv))


def mapped_interface_data(rule, deformation=None, mesh=None):
    """Mapped points, length weights and unit normals of an interface rule."""
    mesh = mesh if mesh is not None else deformation.mesh
    y, J = _map(deformation, mesh, rule.elem, rule.ref)
    Ainv = mesh.inverse_jacobians[rule.elem]
    DPsi = J @ Ainv
    tau = np.einsum("pij,pj->pi", DPsi, rule.tangents)
    stretch = np.linalg.norm(tau, axis=1)
    if np.any(stretch < 1e-14):
        raise SingularDeformationError("degenerate mapped interface tangent")
    tau = tau / stretch[:, None]
    rot = np.stack([tau[:, 1], -tau[:, 0]], axis=1)
    planar_rot = np.stack([rule.tangents[:, 1], -rule.tangents[:, 0]], axis=1)
    sign = np.sign(np.sum(planar_rot * rule.normals, axis=1))
    normals = rot * sign[:, None]
    return y, rule.weights * stretch, normals


def mapped_interface_integral(f, rule, deformation=None, mesh=None):
    """``sum_i w_i |DPsi_h t| f(Psi_h(x_i))``; returns ``(value, normals)``."""
    y, w, normals = mapped_interface_data(rule, deformation, mesh)
    fv = np.asarray(f(y), dtype=float)
    if not np.all(np.isfinite(fv)):
        raise FloatingPointError("non-finite integrand value")
    return float(np.sum(w * fv)), normals


def dump_rules(path, rules):
    """CSV debug dump: ``element,side,x,y,weight`` (side NEG, POS or IFACE)."""
    rows = []
    for name, r in (("NEG", rules.sides[0]), ("POS", rules.sides[1]), ("IFACE", rules.iface)):
        for e, (x, y), w in zip(r.elem, r.ref, r.weights):
            rows.append(f"{e},{name},{x:.17g},{y:.17g},{w:.17g}")
    with open(path, "w") as fh:
        fh.write("element,side,x,y,weight\n")
        fh.write("\n".join(rows))
        fh.write("\n")
