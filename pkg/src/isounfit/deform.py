"""Isoparametric mesh transformation ``Psi_h = id + d_h``.

The deformation is built element by element on the cut elements: every
quadrature point ``x`` is moved along a continuous piecewise linear
quasi-normal field ``s`` until the element polynomial of the level set
(evaluated beyond the element if needed) takes the value of the P1
interpolant at ``x``.  Displacements longer than ``gamma * h_T`` are
shortened, fitted locally in L2 and averaged dof-wise into the continuous
space.
"""

from dataclasses import dataclass, field

import numpy as np

from .cutquad import SingularDeformationError, gauss_rule_triangle
from .fespace import FeFunction, FeSpace, eval_basis, eval_basis_values

NEWTON_TOL = 1e-14
NEWTON_MAXIT = 100
DERIV_FLOOR = 1e-13


class DegenerateLevelSetError(ArithmeticError):
    pass


class ElementwiseFunction:
    """Function given per element: ``fn(elems, ref_points) -> values``.

    Used for data that is discontinuous across elements (gradients of a
    finite element function, element-local transformations).
    """

    def __init__(self, fn, components=1):
        self.fn = fn
        self.components = components

    def __call__(self, elems, ref_points):
        return self.fn(elems, ref_points)


def _eval_on_points(g, mesh, elems, ref):
    if isinstance(g, ElementwiseFunction):
        return np.asarray(g(elems, ref), dtype=float)
    A = mesh.jacobians[elems]
    x = np.einsum("pij,pj->pi", A, ref) + mesh.origins[elems]
    return np.asarray(g(x), dtype=float)


def local_l2_fit(values, k, rule, fix_vertices=False):
    """Element-local L2 fit of sampled values onto P^k.

    ``values`` has shape (ne, nq) or (ne, nq, ncomp) at the points of
    ``rule``; returns local coefficients (ne, nloc[, ncomp]).  The affine
    Jacobian cancels, so the reference mass matrix serves every element.
    With ``fix_vertices`` the fit is restricted to polynomials vanishing at
    the three vertices.
    """
    phi = eval_basis_values(k, rule.points)
    W = phi * rule.weights[:, None]
    M = phi.T @ W
    b = np.einsum("qi,eq...->ei...", W, values)
    nloc = phi.shape[1]
    out = np.zeros_like(b)
    if fix_vertices:
        if nloc > 3:
            sol = np.linalg.solve(M[3:, 3:], b[:, 3:].reshape(len(b), nloc - 3, -1))
            out[:, 3:] = sol.reshape(out[:, 3:].shape)
    else:
        sol = np.linalg.solve(M, b.reshape(len(b), nloc, -1))
        out[:] = sol.reshape(out.shape)
    return out


def average_to_space(local, space, region):
    """Dof-wise arithmetic mean of element contributions; zero elsewhere."""
    dm = space.dof_map[region].ravel()
    counts = np.bincount(dm, minlength=space.num_scalar_dofs)
    hit = counts > 0
    if space.components == 1:
        sums = np.bincount(dm, weights=local.ravel(), minlength=space.num_scalar_dofs)
        out = np.zeros(space.num_scalar_dofs)
        out[hit] = sums[hit] / counts[hit]
        return FeFunction(space, out)
    loc = local.reshape(-1, 2)
    out = np.zeros((space.num_scalar_dofs, 2))
    for c in range(2):
        sums = np.bincount(dm, weights=loc[:, c], minlength=space.num_scalar_dofs)
        out[hit, c] = sums[hit] / counts[hit]
    return FeFunction(space, out.ravel())


def oswald_project(g, space, region, order=None, fix_vertices=False):
    """Element-local L2 fits on ``region`` followed by dof averaging.

    ``g`` is either a callable on physical points ``(n, 2)`` or an
    :class:`ElementwiseFunction`.
    """
    region = np.asarray(region, dtype=np.int64)
    k = space.k
    rule = gauss_rule_triangle(order if order is not None else 2 * k + 2)
    nq = len(rule.weights)
    if len(region) == 0:
        return FeFunction(space)
    elems = np.repeat(region, nq)
    ref = np.tile(rule.points, (len(region), 1))
    vals = _eval_on_points(g, space.mesh, elems, ref)
    if space.components == 1:
        vals = vals.reshape(len(region), nq)
    else:
        vals = vals.reshape(len(region), nq, 2)
    local = local_l2_fit(vals, k, rule, fix_vertices=fix_vertices)
    return average_to_space(local, space, region)


def gradient_field(phi):
    """Element-wise physical gradient of a scalar FE function."""
    mesh = phi.space.mesh
    k = phi.space.k

    def fn(elems, ref):
        _, dphi = eval_basis(k, ref)
        c = phi.local_coeffs(elems)
        g_ref = np.einsum("pi,pij->pj", c, dphi)
        return np.einsum("pj,pji->pi", g_ref, mesh.inverse_jacobians[elems])

    return ElementwiseFunction(fn, components=2)


@dataclass
class SearchField:
    s: FeFunction

    def at(self, elems, ref):
        return self.s.eval_points(elems, ref)


def build_search_field(phi, view, order=None):
    """Continuous P1 quasi-normal field from the averaged gradient of ``phi``."""
    mesh = phi.space.mesh
    cut = view.cut_set
    grad = gradient_field(phi)
    rule = gauss_rule_triangle(order if order is not None else 2 * phi.space.k + 2)
    if len(cut):
        g = grad(np.repeat(cut, len(rule.weights)), np.tile(rule.points, (len(cut), 1)))
        if np.any(np.linalg.norm(g, axis=1) == 0.0):
            raise DegenerateLevelSetError("vanishing level set gradient on a cut element")
    space = FeSpace(mesh, 1, components=2)
    return SearchField(oswald_project(grad, space, cut, order=order))


@dataclass
class PointResult:
    displacement: np.ndarray
    limited: np.ndarray
    failed: np.ndarray
    iterations: np.ndarray


def solve_points(poly_coeffs, k, ref, s_ref, s_norm, target, h, gamma,
                 tol=NEWTON_TOL, maxit=NEWTON_MAXIT):
    """Vectorised line search ``E_T(phi)(x + r s) = I_h phi(x)`` in reference coords.

    ``poly_coeffs`` (P, nloc) are the element coefficients of ``phi`` at every
    point, ``s_ref`` the search direction pulled back to the reference
    element, ``s_norm`` its physical length.  Returns the step ``r`` per
    point together with failure flags and iteration counts.
    """
    n = len(ref)
    r = np.zeros(n)
    active = np.ones(n, dtype=bool)
    failed = np.zeros(n, dtype=bool)
    iters = np.zeros(n, dtype=np.int64)
    scale = tol * h / s_norm

    def residual(idx, rr):
        y = ref[idx] + rr[:, None] * s_ref[idx]
        phi, dphi = eval_basis(k, y)
        c = poly_coeffs[idx]
        val = np.einsum("pi,pi->p", phi, c)
        grad = np.einsum("pi,pij->pj", c, dphi)
        return val - target[idx], np.einsum("pj,pj->p", grad, s_ref[idx])

    idx = np.arange(n)
    g, dg = residual(idx, r)
    prev_step = np.full(n, np.inf)
    for _ in range(maxit):
        idx = np.nonzero(active)[0]
        if len(idx) == 0:
            break
        gi, dgi = g[idx], dg[idx]
        bad = np.abs(dgi) < DERIV_FLOOR
        if bad.any():
            failed[idx[bad]] = True
            active[idx[bad]] = False
            keep = ~bad
            idx, gi, dgi = idx[keep], gi[keep], dgi[keep]
        step = -gi / dgi
        iters[idx] += 1
        small = np.abs(step) <= scale[idx]
        # damping: halve steps that increase the residual
        trial = r[idx] + step
        gt, dgt = residual(idx, trial)
        grow = (np.abs(gt) > np.abs(gi)) & ~small
        for _ in range(30):
            if not grow.any():
                break
            step[grow] *= 0.5
            sub = idx[grow]
            trial[grow] = r[sub] + step[grow]
            gg, dd = residual(sub, trial[grow])
            gt[grow], dgt[grow] = gg, dd
            grow_new = np.abs(gg) > np.abs(gi[grow])
            gidx = np.nonzero(grow)[0]
            grow[gidx[~grow_new]] = False
            if np.all(np.abs(step[grow]) <= scale[idx[grow]]):
                break
        r[idx] = trial
        g[idx], dg[idx] = gt, dgt
        # stagnation at round-off level counts as converged
        stagnant = (np.abs(step) >= prev_step[idx]) & (np.abs(step) <= 1e4 * scale[idx])
        prev_step[idx] = np.abs(step)
        done = small | stagnant
        active[idx[done]] = False
    failed |= active
    r[failed] = 0.0
    return r, failed, iters


def psi_T_points(phi, phi_lin, s, elems, ref, gamma):
    """Limited displacement ``d_bar`` of ``Psi_T`` at reference points of cut elements."""
    mesh = phi.space.mesh
    k = phi.space.k
    elems = np.asarray(elems, dtype=np.int64)
    ref = np.atleast_2d(np.asarray(ref, dtype=float))
    target = np.einsum("pi,pi->p", eval_basis_values(1, ref), phi_lin.coeffs[mesh.elements[elems]])
    s_phys = s.at(elems, ref)
    s_norm = np.linalg.norm(s_phys, axis=1)
    if np.any(s_norm == 0.0):
        raise DegenerateLevelSetError("vanishing search direction")
    s_ref = np.einsum("pij,pj->pi", mesh.inverse_jacobians[elems], s_phys)
    h = mesh.diameters[elems]
    r, failed, iters = solve_points(phi.local_coeffs(elems), k, ref, s_ref, s_norm, target, h, gamma)
    d = r[:, None] * s_phys
    nd = np.linalg.norm(d, axis=1)
    cap = gamma * h
    limited = nd > cap
    d[limited] *= (cap[limited] / nd[limited])[:, None]
    return PointResult(d, limited, failed, iters)


def psi_T_pointwise(x_ref, elem, phi, phi_lin, s, gamma):
    """Displaced physical point and limitation flag for one reference point."""
    mesh = phi.space.mesh
    res = psi_T_points(phi, phi_lin, s, [elem], [x_ref], gamma)
    x = mesh.jacobians[elem] @ np.asarray(x_ref, dtype=float) + mesh.origins[elem]
    return x + res.displacement[0], bool(res.limited[0])


class Deformation:
    """``Psi_h = id + d_h`` with ``d_h`` in a vector Lagrange space."""

    def __init__(self, d, active_set, limited_count=0, failed_count=0,
                 newton_iterations=None, max_kappa=1.0, gamma=None):
        self.d = d
        self.active_set = np.asarray(active_set, dtype=np.int64)
        self.limited_count = int(limited_count)
        self.failed_count = int(failed_count)
        self.newton_iterations = (np.zeros(0, dtype=np.int64) if newton_iterations is None
                                  else newton_iterations)
        self.max_kappa = max_kappa
        self.gamma = gamma
        self.damped = np.zeros(0, dtype=np.int64)

    @classmethod
    def identity(cls, mesh, k):
        return cls(FeFunction(FeSpace(mesh, k, components=2)), [])

    @property
    def space(self):
        return self.d.space

    @property
    def mesh(self):
        return self.d.space.mesh

    @property
    def k(self):
        return self.d.space.k

    def theta(self, elems, ref):
        """Deformed physical points and Jacobians ``grad Theta_h`` (P, 2, 2)."""
        mesh = self.mesh
        elems = np.asarray(elems, dtype=np.int64)
        ref = np.atleast_2d(ref)
        A = mesh.jacobians[elems]
        y = np.einsum("pij,pj->pi", A, ref) + mesh.origins[elems]
        J = np.array(A)
        c = self.d.local_coeffs(elems)
        moving = np.any(c != 0.0, axis=(1, 2))
        if moving.any():
            phi, dphi = eval_basis(self.k, ref[moving])
            cm = c[moving]
            y[moving] += np.einsum("pi,pic->pc", phi, cm)
            J[moving] += np.einsum("pic,pij->pcj", cm, dphi)
        return y, J

    def displacement_at_vertices(self):
        return self.d.vertex_values()


def _element_quality(d, elems, rule):
    nq = len(rule.weights)
    el = np.repeat(elems, nq)
    _, J = d.theta(el, np.tile(rule.points, (len(elems), 1)))
    J_hat = d.mesh.inverse_jacobians[el] @ J
    det = np.linalg.det(J_hat).reshape(len(elems), nq)
    kap = _kappa(J_hat).reshape(len(elems), nq)
    kap[det <= 0] = np.inf
    return kap.max(axis=1), det.min(axis=1)


def shape_guard(d, elems, kappa_max, rule, max_rounds=60):
    """Halve the displacement on elements whose sampled ``kappa(grad Psi_hat)``
    exceeds ``kappa_max`` (or whose Jacobian is not positive) until none do.

    Returns the set of elements that were damped.
    """
    coeffs = d.d.coeffs.reshape(-1, 2)
    damped = set()
    check = np.asarray(elems, dtype=np.int64)
    for _ in range(max_rounds):
        if len(check) == 0:
            break
        kap, _ = _element_quality(d, check, rule)
        bad = check[kap > kappa_max]
        if len(bad) == 0:
            break
        damped.update(bad.tolist())
        dofs = np.unique(d.space.dof_map[bad])
        coeffs[dofs] *= 0.5
        check = d.mesh.vertex_neighbors(bad)
        check = check[np.isin(check, elems)]
    return np.array(sorted(damped), dtype=np.int64)


def build_deformation(view, space=None, gamma=0.1, order=None, search=None, kappa_max=10.0):
    """Assemble ``d_h`` from element-local transformations on the cut elements.

    ``kappa_max`` bounds the sampled condition number of ``grad Psi_hat_h``
    on the active elements; offending elements are damped towards the
    identity.  ``None`` disables the guard.
    """
    phi = view.phi
    mesh = phi.space.mesh
    k = phi.space.k
    if space is None:
        space = FeSpace(mesh, k, components=2)
    if space.mesh is not mesh:
        raise ValueError("deformation space lives on a different mesh")
    cut = view.cut_set
    if len(cut) == 0:
        return Deformation(FeFunction(space), [], gamma=gamma)
    s = search if search is not None else build_search_field(phi, view, order=order)
    rule = gauss_rule_triangle(order if order is not None else 2 * space.k + 2)
    nq = len(rule.weights)
    elems = np.repeat(cut, nq)
    ref = np.tile(rule.points, (len(cut), 1))
    res = psi_T_points(phi, view.phi_lin, s, elems, ref, gamma)
    local = local_l2_fit(res.displacement.reshape(len(cut), nq, 2), space.k, rule, fix_vertices=True)
    d = average_to_space(local, space, cut)
    deformation = Deformation(
        d, view.extended_set,
        limited_count=int(res.limited.sum()),
        failed_count=int(res.failed.sum()),
        newton_iterations=res.iterations,
        gamma=gamma,
    )
    if kappa_max is not None and kappa_max > 0:
        deformation.damped = shape_guard(deformation, view.extended_set, kappa_max, rule)
    deformation.max_kappa = regularity_report(deformation).max_kappa_hat
    return deformation


@dataclass
class RegularityReport:
    max_kappa_hat: float
    elem_kappa_hat: int
    max_kappa_theta: float
    elem_kappa_theta: int
    min_det_ratio: float
    elem_min_det: int
    samples: int = 0
    per_element: dict = field(default_factory=dict, repr=False)


def _kappa(J):
    sv = np.linalg.svd(J, compute_uv=False)
    with np.errstate(divide="ignore"):
        return np.where(sv[:, 1] > 0, sv[:, 0] / sv[:, 1], np.inf)


def regularity_report(d, order=None, elems=None):
    """Sampled condition numbers of ``grad Psi_hat_h`` and ``grad Theta_h``."""
    mesh = d.mesh
    act = d.active_set if elems is None else np.asarray(elems, dtype=np.int64)
    if len(act) == 0:
        return RegularityReport(1.0, -1, 1.0, -1, 1.0, -1, 0)
    rule = gauss_rule_triangle(order if order is not None else 2 * d.k + 2)
    nq = len(rule.weights)
    el = np.repeat(act, nq)
    ref = np.tile(rule.points, (len(act), 1))
    _, J = d.theta(el, ref)
    J_hat = mesh.inverse_jacobians[el] @ J
    k_hat = _kappa(J_hat)
    k_theta = _kappa(J)
    det_ratio = np.linalg.det(J_hat)
    k_hat[det_ratio <= 0] = np.inf
    k_theta[det_ratio <= 0] = np.inf
    i1, i2, i3 = int(np.argmax(k_hat)), int(np.argmax(k_theta)), int(np.argmin(det_ratio))
    return RegularityReport(float(k_hat[i1]), int(el[i1]), float(k_theta[i2]), int(el[i2]),
                            float(det_ratio[i3]), int(el[i3]), len(el))


def eval_deformed(f, d, elem, ref_point):
    """Value and gradient (w.r.t. deformed coordinates) of ``f o Psi_h^{-1}``."""
    ref = np.atleast_2d(ref_point)
    elems = np.full(len(ref), elem, dtype=np.int64)
    _, J = d.theta(elems, ref)
    det = J[:, 0, 0] * J[:, 1, 1] - J[:, 0, 1] * J[:, 1, 0]
    if np.any(det <= 0):
        raise SingularDeformationError(f"non-positive Jacobian on element {elem}")
    phi, dphi = eval_basis(f.space.k, ref)
    c = f.local_coeffs(np.array([elem]))[0]
    val = phi @ c
    g_ref = np.einsum("i,pij->pj", c, dphi)
    grad = np.linalg.solve(np.transpose(J, (0, 2, 1)), g_ref[..., None])[..., 0]
    return val, grad
