"""Level set functions, their discrete projections and cut classification."""

from dataclasses import dataclass
from enum import IntEnum

import numpy as np

from .fespace import FeSpace, interpolate_p1


class Side(IntEnum):
    NEG = 0
    POS = 1
    CUT = 2


@dataclass(frozen=True)
class AnalyticLevelSet:
    """Scalar field ``evaluator(X) -> values`` for points ``X`` of shape (n, 2)."""

    evaluator: object
    name: str = "levelset"
    gradient: object = None

    def __call__(self, X):
        X = np.atleast_2d(X)
        return np.asarray(self.evaluator(X), dtype=float)


def plane(normal, c):
    n = np.asarray(normal, dtype=float)
    return AnalyticLevelSet(lambda X: X @ n - c, name="plane",
                            gradient=lambda X: np.broadcast_to(n, X.shape))


def circle(radius):
    def value(X):
        return np.hypot(X[:, 0], X[:, 1]) - radius

    def grad(X):
        return X / np.hypot(X[:, 0], X[:, 1])[:, None]

    return AnalyticLevelSet(value, name="circle", gradient=grad)


def flower(r0=0.5, amplitude=0.1, omega=8):
    def value(X):
        theta = np.arctan2(X[:, 1], X[:, 0])
        return np.hypot(X[:, 0], X[:, 1]) - (r0 + amplitude * np.sin(omega * theta))

    return AnalyticLevelSet(value, name="flower")


BUILTIN = {"circle": lambda: circle(0.6), "flower": flower, "disk": lambda: circle(0.6)}


def by_name(name, **kwargs):
    if name == "plane":
        return plane(kwargs.get("normal", (1.0, 0.0)), kwargs.get("c", 0.0))
    if name == "circle" and "radius" in kwargs:
        return circle(kwargs["radius"])
    try:
        return BUILTIN[name]()
    except KeyError:
        raise ValueError(f"unknown level set {name!r}") from None


def project_levelset(ls, space, method="oswald", order=None):
    """Discrete level set in ``space``.

    ``method="oswald"`` uses the element-local L2 fit followed by dof
    averaging over the whole mesh; ``method="nodal"`` interpolates.
    """
    if space.components != 1:
        raise ValueError("level set space must be scalar")
    if method == "nodal":
        return space.interpolate(ls)
    if method != "oswald":
        raise ValueError(f"unknown projection {method!r}")
    from .deform import oswald_project

    return oswald_project(ls, space, np.arange(space.mesh.num_elements), order=order)


def classify_values(vertex_values):
    """Classification from P1 vertex values, shape (ne, 3).  Zero counts as POS."""
    neg = np.asarray(vertex_values) < 0
    out = np.full(len(neg), Side.POS, dtype=np.int8)
    out[neg.all(axis=1)] = Side.NEG
    out[neg.any(axis=1) & ~neg.all(axis=1)] = Side.CUT
    return out


@dataclass
class LevelSetView:
    phi: object
    phi_lin: object
    classification: np.ndarray
    cut_set: np.ndarray
    extended_set: np.ndarray
    exact: AnalyticLevelSet = None

    @property
    def mesh(self):
        return self.phi.space.mesh

    def lin_vertex_values(self, elems=None):
        ev = self.mesh.elements if elems is None else self.mesh.elements[elems]
        return self.phi_lin.coeffs[ev]


def classify(phi_lin):
    """Return ``(classification, cut_set, extended_set)`` for a P1 function."""
    mesh = phi_lin.space.mesh
    cls = classify_values(phi_lin.coeffs[mesh.elements])
    cut = np.nonzero(cls == Side.CUT)[0]
    ext = mesh.vertex_neighbors(cut)
    return cls, cut, ext


def make_view(ls, mesh, k, method="oswald", order=None):
    """Build the discrete level set, its P1 interpolant and cut topology."""
    space = FeSpace(mesh, k)
    phi = project_levelset(ls, space, method=method, order=order)
    phi_lin = interpolate_p1(phi)
    cls, cut, ext = classify(phi_lin)
    return LevelSetView(phi, phi_lin, cls, cut, ext, exact=ls)
