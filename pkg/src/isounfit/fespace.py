"""Continuous Lagrange spaces of degree k on triangle meshes.

Local dof ordering on an element: the three vertices, then ``k - 1`` points
on each local edge (edge ``i`` runs between the two vertices other than
``i``, from the lower to the higher local index in the cyclic order
``(1, 2), (2, 0), (0, 1)``), then the interior points.  Globally, edge dofs
run from the lower to the higher global vertex index, so both neighbours of
an edge agree on them.

Vector-valued spaces interleave components: scalar dof ``i`` component
``c`` has global index ``2 * i + c``.
"""

from functools import lru_cache

import numpy as np

from .mesh import LOCAL_EDGES


def num_local_dofs(k):
    return (k + 1) * (k + 2) // 2


@lru_cache(maxsize=None)
def lagrange_nodes(k):
    """Reference coordinates of the local Lagrange nodes, shape (nloc, 2)."""
    ref_vertices = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    nodes = [ref_vertices[0], ref_vertices[1], ref_vertices[2]]
    for a, b in LOCAL_EDGES:
        for j in range(1, k):
            t = j / k
            nodes.append((1 - t) * ref_vertices[a] + t * ref_vertices[b])
    for j in range(1, k):
        for i in range(1, k - j):
            nodes.append(np.array([i / k, j / k]))
    out = np.array(nodes)
    out.flags.writeable = False
    return out


def _exponents(k):
    return [(a, d - a) for d in range(k + 1) for a in range(d, -1, -1)]


@lru_cache(maxsize=None)
def _monomial_coeffs(k):
    exps = _exponents(k)
    nodes = lagrange_nodes(k)
    V = np.array([[x**a * y**b for a, b in exps] for x, y in nodes])
    C = np.linalg.inv(V)
    C.flags.writeable = False
    return C


def _monomials(k, pts):
    pts = np.atleast_2d(np.asarray(pts, dtype=float))
    x, y = pts[:, 0], pts[:, 1]
    xp = np.stack([x**i for i in range(k + 1)], axis=1)
    yp = np.stack([y**i for i in range(k + 1)], axis=1)
    exps = _exponents(k)
    vals = np.stack([xp[:, a] * yp[:, b] for a, b in exps], axis=1)
    dx = np.stack([a * xp[:, a - 1] * yp[:, b] if a else np.zeros_like(x) for a, b in exps], axis=1)
    dy = np.stack([b * xp[:, a] * yp[:, b - 1] if b else np.zeros_like(x) for a, b in exps], axis=1)
    return vals, dx, dy


def eval_basis(k, ref_points):
    """Values ``(npts, nloc)`` and reference gradients ``(npts, nloc, 2)``.

    Points outside the reference triangle are allowed; the result is then
    the polynomial extension of each basis function.
    """
    C = _monomial_coeffs(k)
    vals, dx, dy = _monomials(k, ref_points)
    grads = np.stack([dx @ C, dy @ C], axis=2)
    return vals @ C, grads


def eval_basis_values(k, ref_points):
    vals, _, _ = _monomials(k, ref_points)
    return vals @ _monomial_coeffs(k)


class FeSpace:
    """Degree-``k`` continuous Lagrange space with ``components`` copies."""

    def __init__(self, mesh, k, components=1):
        if k < 1:
            raise ValueError("degree must be >= 1")
        if components not in (1, 2):
            raise ValueError("components must be 1 or 2")
        self.mesh = mesh
        self.k = int(k)
        self.components = components
        self.nloc = num_local_dofs(k)
        self.dof_map = self._build_dof_map()
        self.num_scalar_dofs = int(self.dof_map.max()) + 1
        self.ndofs = self.num_scalar_dofs * components

    def _build_dof_map(self):
        mesh, k = self.mesh, self.k
        ne, nv = mesh.num_elements, mesh.num_vertices
        nedge = len(mesh.edges)
        ne_dofs = k - 1
        n_int = (k - 1) * (k - 2) // 2
        dm = np.empty((ne, self.nloc), dtype=np.int64)
        dm[:, :3] = mesh.elements
        col = 3
        if ne_dofs:
            offs = np.arange(ne_dofs)
            for loc, (a, b) in enumerate(LOCAL_EDGES):
                gid = mesh.element_edges[:, loc]
                forward = mesh.elements[:, a] < mesh.elements[:, b]
                seq = np.where(forward[:, None], offs[None, :], ne_dofs - 1 - offs[None, :])
                dm[:, col:col + ne_dofs] = nv + gid[:, None] * ne_dofs + seq
                col += ne_dofs
        if n_int:
            start = nv + nedge * ne_dofs
            dm[:, col:] = start + np.arange(ne)[:, None] * n_int + np.arange(n_int)[None, :]
        return dm

    def vector_dofs(self, elem=None):
        """Interleaved global indices ``(ne, nloc, 2)`` for a 2-component space."""
        dm = self.dof_map if elem is None else self.dof_map[elem]
        return np.stack([2 * dm, 2 * dm + 1], axis=-1)

    def dof_coordinates(self):
        """Physical coordinates of every scalar dof, shape (num_scalar_dofs, 2)."""
        nodes = lagrange_nodes(self.k)
        A = self.mesh.jacobians
        x = np.einsum("eij,nj->eni", A, nodes) + self.mesh.origins[:, None, :]
        out = np.empty((self.num_scalar_dofs, 2))
        out[self.dof_map.ravel()] = x.reshape(-1, 2)
        return out

    def boundary_dofs(self):
        """Scalar dofs lying on the domain boundary."""
        be = self.mesh.boundary_edges
        if len(be) == 0:
            return np.zeros(0, dtype=np.int64)
        el, loc = be[:, 0], be[:, 1]
        cols = [LOCAL_EDGES[loc, 0], LOCAL_EDGES[loc, 1]]
        for j in range(self.k - 1):
            cols.append(3 + loc * (self.k - 1) + j)
        cols = np.stack(cols, axis=1)
        return np.unique(self.dof_map[el[:, None], cols])

    def function(self, coeffs=None):
        return FeFunction(self, coeffs)

    def interpolate(self, f):
        """Nodal interpolant of ``f(x) -> value`` (or 2-vector)."""
        X = self.dof_coordinates()
        vals = np.asarray(f(X), dtype=float)
        if self.components == 2:
            vals = vals.reshape(-1, 2).ravel()
        return FeFunction(self, vals)


class FeFunction:
    def __init__(self, space, coeffs=None):
        self.space = space
        if coeffs is None:
            coeffs = np.zeros(space.ndofs)
        coeffs = np.asarray(coeffs, dtype=float)
        if coeffs.shape != (space.ndofs,):
            raise ValueError(f"expected {space.ndofs} coefficients, got {coeffs.shape}")
        self.coeffs = coeffs

    def local_coeffs(self, elems=None):
        """Element coefficients, (ne, nloc) or (ne, nloc, 2) for vector spaces."""
        sp = self.space
        dm = sp.dof_map if elems is None else sp.dof_map[elems]
        if sp.components == 1:
            return self.coeffs[dm]
        return self.coeffs.reshape(-1, 2)[dm]

    def eval(self, elem, ref_points, grad=False):
        """Value (and physical gradient) on element ``elem`` at reference points.

        Scalar: values ``(npts,)``, gradients ``(npts, 2)``.
        Vector: values ``(npts, 2)``, gradients ``(npts, 2, 2)`` with
        ``[.., c, j] = d f_c / d x_j``.
        """
        pts = np.atleast_2d(ref_points)
        phi, dphi = eval_basis(self.space.k, pts)
        c = self.local_coeffs(np.array([elem]))[0]
        Ainv = self.space.mesh.inverse_jacobians[elem]
        if self.space.components == 1:
            val = phi @ c
            if not grad:
                return val
            g_ref = np.einsum("pi,pij->pj", np.broadcast_to(c, phi.shape), dphi)
            return val, g_ref @ Ainv
        val = phi @ c
        if not grad:
            return val
        g_ref = np.einsum("ic,pij->pcj", c, dphi)
        return val, g_ref @ Ainv

    def eval_points(self, elems, ref_points):
        """Vectorised values at one reference point per entry of ``elems``."""
        phi = eval_basis_values(self.space.k, ref_points)
        c = self.local_coeffs(elems)
        if self.space.components == 1:
            return np.einsum("pi,pi->p", phi, c)
        return np.einsum("pi,pic->pc", phi, c)

    def vertex_values(self):
        nv = self.space.mesh.num_vertices
        if self.space.components == 1:
            return self.coeffs[:nv]
        return self.coeffs.reshape(-1, 2)[:nv]


def interpolate_p1(f):
    """Nodal P1 interpolant of a scalar degree-k function (vertex values)."""
    if f.space.components != 1:
        raise ValueError("interpolate_p1 expects a scalar function")
    sp = f.space
    p1 = sp if sp.k == 1 else FeSpace(sp.mesh, 1)
    return FeFunction(p1, np.array(f.coeffs[: sp.mesh.num_vertices]))


def dump_coeffs(path, f):
    """Write coefficients as CSV ``index,value`` rows."""
    np.savetxt(path, np.column_stack([np.arange(len(f.coeffs)), f.coeffs]),
               delimiter=",", header="index,value", comments="", fmt=["%d", "%.17g"])


def load_coeffs(path):
    return np.loadtxt(path, delimiter=",", skiprows=1)[:, 1]
