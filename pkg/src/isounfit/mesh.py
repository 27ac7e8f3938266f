"""Conforming triangle meshes with newest-vertex bisection.

Elements are stored as vertex triples ``(v0, v1, v2)`` with positive
orientation.  ``v0`` is the newest vertex, so the refinement edge of an
element is always its local edge 0, ``(v1, v2)``.  Local edge ``i`` is the
edge opposite local vertex ``i``.
"""

from dataclasses import dataclass, field

import numpy as np

# local edge i is opposite local vertex i
LOCAL_EDGES = np.array([[1, 2], [2, 0], [0, 1]])


@dataclass(frozen=True)
class AffineMap:
    """``x = A @ xhat + x0`` from the reference triangle onto an element."""

    A: np.ndarray
    x0: np.ndarray

    def __call__(self, xhat):
        return np.asarray(xhat) @ self.A.T + self.x0

    @property
    def det(self):
        return float(np.linalg.det(self.A))


@dataclass(frozen=True, eq=False)
class SimplicialMesh:
    vertices: np.ndarray
    elements: np.ndarray
    generation: np.ndarray = None
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        v = np.ascontiguousarray(self.vertices, dtype=float)
        e = np.ascontiguousarray(self.elements, dtype=np.int64)
        if v.ndim != 2 or v.shape[1] != 2:
            raise ValueError("vertices must have shape (nv, 2)")
        if e.ndim != 2 or e.shape[1] != 3:
            raise ValueError("elements must have shape (ne, 3)")
        if e.size and (e.min() < 0 or e.max() >= len(v)):
            raise ValueError("element vertex index out of range")
        g = self.generation
        g = np.zeros(len(e), dtype=np.int64) if g is None else np.asarray(g, dtype=np.int64)
        v.flags.writeable = False
        e.flags.writeable = False
        g.flags.writeable = False
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "elements", e)
        object.__setattr__(self, "generation", g)

    @property
    def num_vertices(self):
        return len(self.vertices)

    @property
    def num_elements(self):
        return len(self.elements)

    def _cached(self, key, fn):
        if key not in self._cache:
            self._cache[key] = fn()
        return self._cache[key]

    @property
    def jacobians(self):
        """Stack of affine-map matrices, shape (ne, 2, 2); columns are edge vectors."""

        def build():
            p = self.vertices[self.elements]
            A = np.stack([p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]], axis=2)
            A.flags.writeable = False
            return A

        return self._cached("jac", build)

    @property
    def inverse_jacobians(self):
        return self._cached("ijac", lambda: np.linalg.inv(self.jacobians))

    @property
    def origins(self):
        return self.vertices[self.elements[:, 0]]

    @property
    def dets(self):
        def build():
            A = self.jacobians
            return A[:, 0, 0] * A[:, 1, 1] - A[:, 0, 1] * A[:, 1, 0]

        return self._cached("det", build)

    @property
    def areas(self):
        return 0.5 * self.dets

    @property
    def diameters(self):
        """Longest edge length per element."""

        def build():
            p = self.vertices[self.elements]
            lens = [np.linalg.norm(p[:, a] - p[:, b], axis=1) for a, b in LOCAL_EDGES]
            return np.max(lens, axis=0)

        return self._cached("diam", build)

    def _edge_table(self):
        ne = self.num_elements
        pairs = self.elements[:, LOCAL_EDGES].reshape(-1, 2)
        lo = pairs.min(axis=1)
        hi = pairs.max(axis=1)
        keys = lo * self.num_vertices + hi
        uniq, inverse = np.unique(keys, return_inverse=True)
        edge_vertices = np.stack([uniq // self.num_vertices, uniq % self.num_vertices], axis=1)
        return edge_vertices, inverse.reshape(ne, 3)

    @property
    def edges(self):
        """Unique edges as sorted vertex pairs, shape (nedges, 2)."""
        return self._cached("edges", self._edge_table)[0]

    @property
    def element_edges(self):
        """Global edge index of each local edge, shape (ne, 3)."""
        return self._cached("edges", self._edge_table)[1]

    @property
    def edge_elements(self):
        """For each edge the (up to two) adjacent elements, -1 where absent."""

        def build():
            ee = self.element_edges.ravel()
            owner = np.repeat(np.arange(self.num_elements), 3)
            out = -np.ones((len(self.edges), 2), dtype=np.int64)
            order = np.argsort(ee, kind="stable")
            ee_s, own_s = ee[order], owner[order]
            first = np.ones(len(ee_s), dtype=bool)
            first[1:] = ee_s[1:] != ee_s[:-1]
            out[ee_s[first], 0] = own_s[first]
            out[ee_s[~first], 1] = own_s[~first]
            return out

        return self._cached("edge_elems", build)

    @property
    def boundary_edges(self):
        """(element, local-edge) pairs lying on the domain boundary."""

        def build():
            counts = np.bincount(self.element_edges.ravel(), minlength=len(self.edges))
            on_bnd = counts[self.element_edges] == 1
            el, loc = np.nonzero(on_bnd)
            return np.stack([el, loc], axis=1)

        return self._cached("bnd", build)

    @property
    def boundary_vertices(self):
        be = self.boundary_edges
        if len(be) == 0:
            return np.zeros(0, dtype=np.int64)
        vs = self.elements[be[:, 0][:, None], LOCAL_EDGES[be[:, 1]]]
        return np.unique(vs)

    def vertex_elements(self):
        """CSR-style vertex-to-element incidence ``(offsets, elements)``."""

        def build():
            flat = self.elements.ravel()
            owner = np.repeat(np.arange(self.num_elements), 3)
            order = np.argsort(flat, kind="stable")
            offsets = np.zeros(self.num_vertices + 1, dtype=np.int64)
            np.add.at(offsets, flat + 1, 1)
            return np.cumsum(offsets), owner[order]

        return self._cached("v2e", build)

    def vertex_neighbors(self, elems):
        """All elements sharing at least one vertex with ``elems``."""
        elems = np.asarray(elems, dtype=np.int64)
        if elems.size == 0:
            return elems
        touched = np.zeros(self.num_vertices, dtype=bool)
        touched[self.elements[elems].ravel()] = True
        return np.nonzero(touched[self.elements].any(axis=1))[0]

    def is_conforming(self):
        """True when every edge is shared by at most two elements and no
        vertex lies in the interior of another element's edge."""
        counts = np.bincount(self.element_edges.ravel(), minlength=len(self.edges))
        if counts.max(initial=0) > 2:
            return False
        # a hanging node sits on the midpoint of a boundary-looking edge;
        # detect any vertex lying strictly inside a once-used edge
        single = self.edges[counts == 1]
        if len(single) == 0:
            return True
        a = self.vertices[single[:, 0]]
        b = self.vertices[single[:, 1]]
        mid = 0.5 * (a + b)
        used = np.zeros(self.num_vertices, dtype=bool)
        used[self.elements.ravel()] = True
        lookup = {tuple(np.round(p, 13)): i for i, p in enumerate(self.vertices[used])}
        for m in mid:
            if tuple(np.round(m, 13)) in lookup:
                return False
        return True

    def affine_map(self, elem):
        return AffineMap(np.array(self.jacobians[elem]), np.array(self.origins[elem]))

    def min_angles(self):
        p = self.vertices[self.elements]
        out = []
        for i in range(3):
            u = p[:, (i + 1) % 3] - p[:, i]
            w = p[:, (i + 2) % 3] - p[:, i]
            c = np.sum(u * w, axis=1) / (np.linalg.norm(u, axis=1) * np.linalg.norm(w, axis=1))
            out.append(np.arccos(np.clip(c, -1.0, 1.0)))
        return np.min(out, axis=0)


def affine_map(mesh, elem):
    return mesh.affine_map(elem)


def make_rect_mesh(lower, upper, n):
    """Structured ``2 n^2`` triangle mesh of the rectangle ``[lower, upper]``.

    Each cell is split along the diagonal that alternates in a criss-cross
    pattern; the right-angle vertex is stored first so that the hypotenuse
    is the refinement edge of every triangle.
    """
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    if int(n) != n or n < 1:
        raise ValueError(f"n must be a positive integer, got {n!r}")
    if lower.shape != (2,) or upper.shape != (2,) or np.any(lower >= upper):
        raise ValueError("lower must be componentwise smaller than upper")
    n = int(n)
    xs = np.linspace(lower[0], upper[0], n + 1)
    ys = np.linspace(lower[1], upper[1], n + 1)
    X, Y = np.meshgrid(xs, ys, indexing="xy")
    verts = np.stack([X.ravel(), Y.ravel()], axis=1)

    i, j = np.meshgrid(np.arange(n), np.arange(n), indexing="xy")
    i, j = i.ravel(), j.ravel()
    v00 = j * (n + 1) + i
    v10 = v00 + 1
    v01 = v00 + n + 1
    v11 = v01 + 1
    flip = (i + j) % 2 == 1
    # diagonal v00-v11: right angles at v10 and v01
    t1 = np.stack([v10, v11, v00], axis=1)
    t2 = np.stack([v01, v00, v11], axis=1)
    # diagonal v10-v01: right angles at v00 and v11
    t3 = np.stack([v00, v10, v01], axis=1)
    t4 = np.stack([v11, v01, v10], axis=1)
    first = np.where(flip[:, None], t3, t1)
    second = np.where(flip[:, None], t4, t2)
    elems = np.empty((2 * n * n, 3), dtype=np.int64)
    elems[0::2] = first
    elems[1::2] = second
    return SimplicialMesh(verts, elems)


def _edge_keys(elements, nv):
    pairs = elements[:, LOCAL_EDGES]
    lo = pairs.min(axis=2)
    hi = pairs.max(axis=2)
    return lo * nv + hi


def refine(mesh, marked):
    """Newest-vertex bisection of ``marked`` elements with conforming closure.

    Returns a new mesh; the input is left untouched.
    """
    marked = np.unique(np.asarray(list(marked) if not isinstance(marked, np.ndarray) else marked,
                                  dtype=np.int64))
    if marked.size == 0:
        return mesh
    if marked.min() < 0 or marked.max() >= mesh.num_elements:
        raise ValueError("marked element id out of range")

    elems = mesh.elements.copy()
    gen = mesh.generation.copy()
    verts = [mesh.vertices]
    nv = mesh.num_vertices
    # edge keys are computed with the final vertex count unknown; use a
    # bound large enough for all midpoints that can ever be created
    base = np.int64(nv) * 4 + 16

    keys = _edge_keys(elems, base)
    split = np.unique(keys[marked, 0])
    while True:
        has = np.isin(keys, split)
        need = has.any(axis=1) & ~has[:, 0]
        if not need.any():
            break
        split = np.union1d(split, keys[need, 0])

    lo = split // base
    hi = split % base
    mid_index = nv + np.arange(len(split), dtype=np.int64)
    verts.append(0.5 * (mesh.vertices[lo] + mesh.vertices[hi]))
    total_v = nv + len(split)
    if total_v >= base:
        raise RuntimeError("vertex key space exhausted")

    while True:
        keys = _edge_keys(elems, base)
        pos = np.searchsorted(split, keys[:, 0])
        pos = np.minimum(pos, len(split) - 1)
        bis = split[pos] == keys[:, 0]
        if not bis.any():
            break
        idx = np.nonzero(bis)[0]
        m = mid_index[pos[idx]]
        v0, v1, v2 = elems[idx, 0], elems[idx, 1], elems[idx, 2]
        child_a = np.stack([m, v0, v1], axis=1)
        child_b = np.stack([m, v2, v0], axis=1)
        keep = ~bis
        elems = np.concatenate([elems[keep], child_a, child_b])
        g = gen[idx] + 1
        gen = np.concatenate([gen[keep], g, g])

    return SimplicialMesh(np.concatenate(verts), elems, gen)


def refine_uniform(mesh, times=1):
    """Halve the mesh size ``times`` times (two bisection sweeps each)."""
    for _ in range(2 * times):
        mesh = refine(mesh, np.arange(mesh.num_elements))
    return mesh


def write_mesh(path, mesh, displacement=None):
    """Write the plain-text mesh format documented in the README.

    Blocks: ``VERTICES nv`` (``index x y``), ``ELEMENTS ne``
    (``index v0 v1 v2``) and optionally ``DISPLACEMENT nv`` (``index dx dy``).
    """
    with open(path, "w") as fh:
        fh.write(f"VERTICES {mesh.num_vertices}\n")
        for i, (x, y) in enumerate(mesh.vertices):
            fh.write(f"{i} {x:.17g} {y:.17g}\n")
        fh.write(f"ELEMENTS {mesh.num_elements}\n")
        for i, (a, b, c) in enumerate(mesh.elements):
            fh.write(f"{i} {a} {b} {c}\n")
        if displacement is not None:
            disp = np.asarray(displacement).reshape(mesh.num_vertices, 2)
            fh.write(f"DISPLACEMENT {mesh.num_vertices}\n")
            for i, (dx, dy) in enumerate(disp):
                fh.write(f"{i} {dx:.17g} {dy:.17g}\n")


def read_mesh(path):
    """Inverse of :func:`write_mesh`; returns ``(mesh, displacement_or_None)``."""
    blocks = {}
    with open(path) as fh:
        lines = [ln.split() for ln in fh if ln.strip()]
    i = 0
    while i < len(lines):
        name, count = lines[i][0], int(lines[i][1])
        rows = lines[i + 1:i + 1 + count]
        blocks[name] = np.array([[float(t) for t in r[1:]] for r in rows]).reshape(count, -1)
        i += 1 + count
    mesh = SimplicialMesh(blocks["VERTICES"], blocks["ELEMENTS"].astype(np.int64))
    return mesh, blocks.get("DISPLACEMENT")
