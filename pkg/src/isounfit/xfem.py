"""Isoparametric Nitsche-XFEM for the two-domain elliptic interface problem.

Find ``u_h`` in the doubled space with

    a(u, v) + N^c(u, v) + N^c(v, u) + N^s(u, v) = f(v)

where the volume terms carry the weights ``beta_i`` of the interface
condition ``[[beta u]] = 0``:

    a(u, v) = sum_i beta_i alpha_i (grad u, grad v)_{Psi_h(Omega_i,h)}
    f(v)    = sum_i beta_i (f_i, v)_{Psi_h(Omega_i,h)}
    N^c     = ({-alpha grad u . n}, [[beta v]])_{Gamma_h}
    N^s     = (alpha_bar lambda k^2 / h) ([[beta u]], [[beta v]])_{Gamma_h}

The average ``{.}`` uses Heaviside weights from the undeformed cut
configuration; ``n`` points from the negative to the positive side.
"""

import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .cutquad import cut_rules, element_rules, mapped_interface_data
from .deform import Deformation
from .fespace import FeSpace, eval_basis
from .levelset import Side

_CHUNK = 4096


class SingularSystemError(ArithmeticError):
    pass


class XfemSpace:
    """Doubled Lagrange space: one copy of every dof per side it touches.

    ``side_dofs[s, i]`` is the global index of base dof ``i`` on side ``s``
    (0 = negative, 1 = positive), or -1 if that copy does not exist.
    """

    def __init__(self, base, view):
        self.base = base
        self.view = view
        cls = view.classification
        n = base.num_scalar_dofs
        self.side_dofs = -np.ones((2, n), dtype=np.int64)
        offset = 0
        for s, side in enumerate((Side.NEG, Side.POS)):
            elems = np.nonzero((cls == side) | (cls == Side.CUT))[0]
            active = np.zeros(n, dtype=bool)
            active[base.dof_map[elems].ravel()] = True
            idx = np.nonzero(active)[0]
            self.side_dofs[s, idx] = offset + np.arange(len(idx))
            offset += len(idx)
        self.ndofs = offset

    @property
    def k(self):
        return self.base.k

    @property
    def num_duplicated(self):
        return int(np.sum((self.side_dofs >= 0).all(axis=0)))

    def element_dofs(self, side, elems):
        return self.side_dofs[side][self.base.dof_map[elems]]


def build_xfem_space(base, view):
    return XfemSpace(base, view)


@dataclass
class InterfaceProblem:
    """Data of the interface problem; callables take points of shape (n, 2).

    ``rhs``, ``dirichlet`` and ``exact`` are pairs (negative side, positive
    side).  ``exact_grad`` is optional and used for the H1 error.
    """

    alpha: tuple
    beta: tuple
    rhs: tuple
    dirichlet: tuple
    exact: tuple = None
    exact_grad: tuple = None
    lam: float = 20.0

    def __post_init__(self):
        if min(self.alpha) <= 0 or min(self.beta) <= 0:
            raise ValueError("alpha and beta must be positive")


def disk_problem(alpha=(2.0, 1.0), beta=(1.0, 1.5), radius=0.6, lam=20.0):
    """Manufactured solution ``u_i = alpha_j U(r) + beta_j`` (j the other side),
    ``U(r) = cos(pi r^2 / (2 R^2))``.

    With ``c = pi / (2 R^2)`` the radial Laplacian is
    ``Delta U = -4 c sin(c r^2) - 4 c^2 r^2 cos(c r^2)``, so
    ``f_i = -alpha_i alpha_j Delta U`` on both sides.
    """
    a1, a2 = alpha
    b1, b2 = beta
    c = np.pi / (2.0 * radius**2)

    def U(X):
        return np.cos(c * np.sum(X**2, axis=1))

    def gradU(X):
        r2 = np.sum(X**2, axis=1)
        return (-2.0 * c * np.sin(c * r2))[:, None] * X

    def lapU(X):
        r2 = np.sum(X**2, axis=1)
        return -4.0 * c * np.sin(c * r2) - 4.0 * c**2 * r2 * np.cos(c * r2)

    u1 = lambda X: a2 * U(X) + b2  # noqa: E731
    u2 = lambda X: a1 * U(X) + b1  # noqa: E731
    g1 = lambda X: a2 * gradU(X)  # noqa: E731
    g2 = lambda X: a1 * gradU(X)  # noqa: E731
    f = lambda X: -a1 * a2 * lapU(X)  # noqa: E731
    return InterfaceProblem(alpha, beta, (f, f), (u1, u2), (u1, u2), (g1, g2), lam)


@dataclass
class SparseSystem:
    matrix: sp.csr_matrix
    rhs: np.ndarray
    constrained: np.ndarray
    values: np.ndarray
    info: dict = field(default_factory=dict)


@dataclass
class SolveReport:
    residual: float
    warned: bool
    ndofs: int


def _point_geometry(d, elems, ref, k):
    """Mapped points, basis values, deformed gradients and weight ratios."""
    y, J = d.theta(elems, ref)
    det = J[:, 0, 0] * J[:, 1, 1] - J[:, 0, 1] * J[:, 1, 0]
    phi, dphi = eval_basis(k, ref)
    Jinv = np.linalg.inv(J)
    # grad = J^{-T} grad_ref
    G = np.einsum("pij,pni->pnj", Jinv, dphi)
    return y, phi, G, det / d.mesh.dets[elems]


def _volume_blocks(d, rule, k, coef, rhs_fn, rhs_coef):
    """Element stiffness and load blocks ``coef (grad u, grad v)``,
    ``rhs_coef (f, v)`` accumulated from the points of a side rule."""
    elems_u, inv = np.unique(rule.elem, return_inverse=True)
    n = len(rule.elem)
    nloc = (k + 1) * (k + 2) // 2
    local_K = np.zeros((len(elems_u), nloc, nloc))
    local_F = np.zeros((len(elems_u), nloc))
    for start in range(0, n, _CHUNK * 8):
        sl = slice(start, min(n, start + _CHUNK * 8))
        y, phi, G, ratio = _point_geometry(d, rule.elem[sl], rule.ref[sl], k)
        w = rule.weights[sl] * ratio
        Kp = coef * np.einsum("p,pia,pja->pij", w, G, G)
        np.add.at(local_K, inv[sl], Kp)
        fv = rhs_fn(y)
        np.add.at(local_F, inv[sl], rhs_coef * (w * fv)[:, None] * phi)
    return elems_u, local_K, local_F


def _scatter(rows, K, F, rows_all, cols_all, vals_all, load_idx, load_val):
    nloc = rows.shape[1]
    rows_all.append(np.repeat(rows, nloc, axis=1).ravel())
    cols_all.append(np.tile(rows, (1, nloc)).ravel())
    vals_all.append(K.ravel())
    if F is not None:
        load_idx.append(rows.ravel())
        load_val.append(F.ravel())


def assemble(problem, xspace, d=None, order=None, cut=None):
    """Assemble the Nitsche-XFEM system on the (deformed) mesh."""
    base, view = xspace.base, xspace.view
    mesh = base.mesh
    k = base.k
    if d is None:
        d = Deformation.identity(mesh, k)
    if d.mesh is not mesh:
        raise ValueError("deformation lives on a different mesh")
    order = order if order is not None else 2 * k + 2
    cls = view.classification
    if cut is None:
        cut = cut_rules(mesh, view.cut_set, view.lin_vertex_values(view.cut_set), order)
    alpha, beta = problem.alpha, problem.beta
    rows_all, cols_all, vals_all, load_idx, load_val = [], [], [], [], []

    # whole elements, grouped by side
    for s, side in enumerate((Side.NEG, Side.POS)):
        elems = np.nonzero(cls == side)[0]
        for start in range(0, len(elems), _CHUNK):
            chunk = elems[start:start + _CHUNK]
            rule = element_rules(mesh, chunk, order)
            eu, K, F = _volume_blocks(d, rule, k, beta[s] * alpha[s],
                                      problem.rhs[s], beta[s])
            _scatter(xspace.element_dofs(s, eu), K, F, rows_all, cols_all, vals_all,
                     load_idx, load_val)
        # cut element parts on this side
        rule = cut.sides[s]
        if len(rule.elem):
            eu, K, F = _volume_blocks(d, rule, k, beta[s] * alpha[s],
                                      problem.rhs[s], beta[s])
            _scatter(xspace.element_dofs(s, eu), K, F, rows_all, cols_all, vals_all,
                     load_idx, load_val)

    # interface terms
    ir = cut.iface
    if len(ir.elem):
        areas = mesh.areas[cut.elements]
        kappa1 = (cut.neg_area >= 0.5 * areas).astype(float)
        order_ = np.argsort(cut.elements)
        pos = order_[np.searchsorted(cut.elements[order_], ir.elem)]
        k1 = kappa1[pos]
        k2 = 1.0 - k1
        _, w, normals = mapped_interface_data(ir, d)
        _, phi, G, _ = _point_geometry(d, ir.elem, ir.ref, k)
        Gn = np.einsum("pia,pa->pi", G, normals)
        jump = np.concatenate([beta[0] * phi, -beta[1] * phi], axis=1)
        flux = np.concatenate([-(k1 * alpha[0])[:, None] * Gn, -(k2 * alpha[1])[:, None] * Gn], axis=1)
        abar = 0.5 * (alpha[0] + alpha[1])
        pen = abar * problem.lam * k**2 / mesh.diameters[ir.elem]
        M = (np.einsum("pi,pj->pij", jump, flux) + np.einsum("pi,pj->pij", flux, jump)
             + pen[:, None, None] * np.einsum("pi,pj->pij", jump, jump))
        M *= w[:, None, None]
        eu, inv = np.unique(ir.elem, return_inverse=True)
        nl = 2 * phi.shape[1]
        local = np.zeros((len(eu), nl, nl))
        np.add.at(local, inv, M)
        rows = np.concatenate([xspace.element_dofs(0, eu), xspace.element_dofs(1, eu)], axis=1)
        _scatter(rows, local, None, rows_all, cols_all, vals_all, load_idx, load_val)

    n = xspace.ndofs
    rows = np.concatenate(rows_all)
    cols = np.concatenate(cols_all)
    vals = np.concatenate(vals_all)
    if np.any(rows < 0) or np.any(cols < 0):
        raise RuntimeError("inactive dof referenced during assembly")
    A = sp.coo_matrix((vals, (rows, cols)), shape=(n, n)).tocsr()
    A.sum_duplicates()
    b = np.bincount(np.concatenate(load_idx), weights=np.concatenate(load_val), minlength=n)

    # strong Dirichlet data on the fitted outer boundary
    bdofs = base.boundary_dofs()
    X = base.dof_coordinates()[bdofs]
    if d is not None:
        X = X + d.d.coeffs.reshape(-1, 2)[bdofs]
    con, val = [], []
    for s in (0, 1):
        g = xspace.side_dofs[s, bdofs]
        m = g >= 0
        if m.any():
            con.append(g[m])
            val.append(np.asarray(problem.dirichlet[s](X[m]), dtype=float))
    constrained = np.concatenate(con) if con else np.zeros(0, dtype=np.int64)
    values = np.concatenate(val) if val else np.zeros(0)
    return SparseSystem(A, b, constrained, values, {"cut": cut, "order": order})


def solve(system, warn_threshold=1e-6):
    """Direct sparse solve with strongly imposed constraints."""
    A, b = system.matrix, system.rhs
    n = A.shape[0]
    x = np.zeros(n)
    fixed = np.zeros(n, dtype=bool)
    fixed[system.constrained] = True
    x[system.constrained] = system.values
    diag = A.diagonal()
    empty = (diag == 0.0) & ~fixed
    # copies supported only on zero-measure pieces carry no information
    fixed |= empty
    free = np.nonzero(~fixed)[0]
    rhs = b[free] - A[free][:, fixed] @ x[fixed]
    Aff = A[free][:, free].tocsc()
    if Aff.shape[0] == 0:
        return x, SolveReport(0.0, False, 0)
    try:
        lu = spla.splu(Aff)
    except RuntimeError as exc:
        raise SingularSystemError(str(exc)) from exc
    xf = lu.solve(rhs)
    if not np.all(np.isfinite(xf)):
        raise SingularSystemError("non-finite solution from the direct solver")
    res = np.linalg.norm(Aff @ xf - rhs) / max(np.linalg.norm(rhs), 1e-300)
    warned = res > warn_threshold
    if warned:
        warnings.warn(f"relative residual {res:.2e} exceeds {warn_threshold:.0e}", RuntimeWarning)
    x[free] = xf
    return x, SolveReport(float(res), bool(warned), int(len(free)))


def _side_values(u, xspace, s, elems, ref, d, with_grad=True):
    k = xspace.k
    y, phi, G, ratio = _point_geometry(d, elems, ref, k)
    c = u[xspace.element_dofs(s, elems)]
    val = np.einsum("pi,pi->p", phi, c)
    grad = np.einsum("pi,pia->pa", c, G) if with_grad else None
    return y, val, grad, ratio


def error_norms(u, problem, d, view, xspace, order=None, cut=None):
    """(L2 error, broken H1 seminorm error, L2 norm of [[beta u_h]] on Gamma_h)."""
    mesh = view.mesh
    k = xspace.k
    if d is None:
        d = Deformation.identity(mesh, k)
    order = order if order is not None else 2 * k + 2
    if cut is None:
        cut = cut_rules(mesh, view.cut_set, view.lin_vertex_values(view.cut_set), order)
    l2 = 0.0
    h1 = 0.0
    cls = view.classification
    for s, side in enumerate((Side.NEG, Side.POS)):
        elems = np.nonzero(cls == side)[0]
        rules = [element_rules(mesh, elems[i:i + _CHUNK], order)
                 for i in range(0, len(elems), _CHUNK)]
        rules.append(cut.sides[s])
        for rule in rules:
            if len(rule.elem) == 0:
                continue
            y, val, grad, ratio = _side_values(u, xspace, s, rule.elem, rule.ref, d)
            w = rule.weights * ratio
            l2 += np.sum(w * (val - problem.exact[s](y)) ** 2)
            if problem.exact_grad is not None:
                h1 += np.sum(w * np.sum((grad - problem.exact_grad[s](y)) ** 2, axis=1))
    ir = cut.iface
    jump = 0.0
    if len(ir.elem):
        _, w, _ = mapped_interface_data(ir, d)
        _, v0, _, _ = _side_values(u, xspace, 0, ir.elem, ir.ref, d, with_grad=False)
        _, v1, _, _ = _side_values(u, xspace, 1, ir.elem, ir.ref, d, with_grad=False)
        jump = np.sum(w * (problem.beta[0] * v0 - problem.beta[1] * v1) ** 2)
    return float(np.sqrt(l2)), float(np.sqrt(h1)), float(np.sqrt(jump))


def interpolate_exact(problem, xspace, d=None):
    """Side-wise nodal interpolant of the exact solution (deformed nodes)."""
    base = xspace.base
    X = base.dof_coordinates()
    if d is not None:
        X = X + d.d.coeffs.reshape(-1, 2)
    u = np.zeros(xspace.ndofs)
    for s in (0, 1):
        idx = np.nonzero(xspace.side_dofs[s] >= 0)[0]
        u[xspace.side_dofs[s, idx]] = problem.exact[s](X[idx])
    return u


def solve_fitted_poisson(mesh, k, alpha, rhs, dirichlet, order=None):
    """Standard continuous Galerkin solve of ``-alpha Delta u = f`` (oracle)."""
    space = FeSpace(mesh, k)
    order = order if order is not None else 2 * k + 2
    rule = element_rules(mesh, np.arange(mesh.num_elements), order)
    d = Deformation.identity(mesh, k)
    eu, K, F = _volume_blocks(d, rule, k, alpha, rhs, 1.0)
    rows_all, cols_all, vals_all, li, lv = [], [], [], [], []
    _scatter(space.dof_map[eu], K, F, rows_all, cols_all, vals_all, li, lv)
    n = space.ndofs
    A = sp.coo_matrix((np.concatenate(vals_all), (np.concatenate(rows_all), np.concatenate(cols_all))),
                      shape=(n, n)).tocsr()
    b = np.bincount(np.concatenate(li), weights=np.concatenate(lv), minlength=n)
    bd = space.boundary_dofs()
    vals = dirichlet(space.dof_coordinates()[bd])
    u, _ = solve(SparseSystem(A, b, bd, vals))
    return space, u
