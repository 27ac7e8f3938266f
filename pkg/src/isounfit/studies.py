"""Convergence studies and the quadrature/deformation fuzz harness.

Every study returns a :class:`ConvergenceReport` holding one record per
level, the EOC table and the fully resolved configuration.
"""

import json
import math
import os
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import xfem
from .cutquad import cut_rules, mapped_interface_data
from .deform import build_deformation, regularity_report
from .fespace import FeSpace, dump_coeffs
from .levelset import Side, by_name, classify_values, make_view, plane
from .mesh import make_rect_mesh, refine, refine_uniform, write_mesh

CASES = ("circle", "flower", "disk")
DEFAULT_BASE_N = {"circle": 12, "flower": 8, "disk": 4}


class ConfigError(ValueError):
    pass


@dataclass
class StudyConfig:
    case: str = "circle"
    k: int = 2
    levels: int = 5
    refinement: str = "uniform"
    gamma: float = 0.1
    lam: float = 20.0
    quad_order: int = None
    output_dir: str = None
    export_meshes: bool = False
    base_n: int = None
    kappa_max: float = 10.0
    alpha: tuple = (2.0, 1.0)
    beta: tuple = (1.0, 1.5)
    dof_cap: float = 2e6
    seed: int = 0
    threads: int = 1

    def validate(self):
        if self.case not in CASES:
            raise ConfigError(f"case must be one of {CASES}, got {self.case!r}")
        if not 1 <= int(self.k) <= 4:
            raise ConfigError("k must lie in [1, 4]")
        if int(self.levels) < 1:
            raise ConfigError("levels must be >= 1")
        if not self.gamma > 0:
            raise ConfigError("gamma must be positive")
        if not self.lam > 0:
            raise ConfigError("lambda must be positive")
        if self.refinement not in ("uniform", "adaptive"):
            raise ConfigError("refinement must be 'uniform' or 'adaptive'")
        if self.quad_order is not None and int(self.quad_order) < 0:
            raise ConfigError("quad_order must be >= 0")
        if self.base_n is not None and int(self.base_n) < 1:
            raise ConfigError("base_n must be >= 1")
        return self

    def resolved(self):
        self.validate()
        out = StudyConfig(**asdict(self))
        if out.base_n is None:
            out.base_n = DEFAULT_BASE_N[out.case]
        if out.quad_order is None:
            out.quad_order = 2 * out.k + 2
        out.alpha = tuple(float(a) for a in out.alpha)
        out.beta = tuple(float(b) for b in out.beta)
        return out


def eoc(e_prev, e, h_prev, h):
    """``log(e_prev / e) / log(h_prev / h)``; NaN when undefined."""
    if not (e_prev > 0 and e > 0 and h_prev > 0 and h > 0) or h_prev == h:
        return float("nan")
    return math.log(e_prev / e) / math.log(h_prev / h)


def _clean(v):
    if isinstance(v, (np.floating, float)):
        v = float(v)
        return v if math.isfinite(v) else str(v)
    if isinstance(v, np.integer):
        return int(v)
    if isinstance(v, dict):
        return {a: _clean(b) for a, b in v.items()}
    if isinstance(v, (list, tuple)):
        return [_clean(b) for b in v]
    return v


@dataclass
class ConvergenceReport:
    config: dict
    metrics: tuple
    levels: list = field(default_factory=list)
    notes: list = field(default_factory=list)

    @property
    def eocs(self):
        """Per level, the EOC of every metric against the previous computed level."""
        table = []
        prev = None
        for rec in self.levels:
            row = {}
            for m in self.metrics:
                row[m] = (float("nan") if prev is None
                          else eoc(prev[m], rec[m], prev["h"], rec["h"]))
            table.append(row)
            prev = rec
        return table

    def errors(self, metric):
        return np.array([r[metric] for r in self.levels])

    def h(self):
        return np.array([r["h"] for r in self.levels])

    def mean_eoc(self, metric, first, last=None):
        """EOC between level records ``first`` and ``last`` (default: final)."""
        last = len(self.levels) - 1 if last is None else last
        a, b = self.levels[first], self.levels[last]
        return eoc(a[metric], b[metric], a["h"], b["h"])

    def to_dict(self):
        rows = []
        for rec, e in zip(self.levels, self.eocs):
            rows.append(dict(rec, eoc=e))
        return _clean({"config": self.config, "metrics": list(self.metrics),
                       "levels": rows, "notes": self.notes})

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=False)

    def csv_rows(self):
        keys = []
        for rec in self.levels:
            keys += [key for key in rec if key not in keys]
        head = keys + [f"eoc_{m}" for m in self.metrics]
        rows = [",".join(head)]
        for rec, e in zip(self.levels, self.eocs):
            vals = [rec.get(key, "") for key in keys] + [e[m] for m in self.metrics]
            rows.append(",".join(_fmt(v) for v in vals))
        return rows

    def write(self, out_dir, stem):
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, stem + ".json"), "w") as fh:
            fh.write(self.to_json() + "\n")
        with open(os.path.join(out_dir, stem + ".csv"), "w") as fh:
            fh.write("\n".join(self.csv_rows()) + "\n")


def _fmt(v):
    if isinstance(v, bool):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.10g}"
    return str(v)


def _scalar_dofs(mesh, k):
    return (mesh.num_vertices + len(mesh.edges) * (k - 1)
            + mesh.num_elements * (k - 1) * (k - 2) // 2)


def refine_to_interface(mesh, ls, sweeps=2):
    """Refine cut elements of the P1 interpolant of ``ls`` plus one vertex ring."""
    for _ in range(sweeps):
        cls = classify_values(ls(mesh.vertices)[mesh.elements])
        cut = np.nonzero(cls == Side.CUT)[0]
        mesh = refine(mesh, mesh.vertex_neighbors(cut))
    return mesh


def _level_meshes(cfg, ls):
    mesh = make_rect_mesh((-1.0, -1.0), (1.0, 1.0), cfg.base_n)
    for level in range(cfg.levels):
        yield level, mesh
        if level + 1 < cfg.levels:
            mesh = refine_uniform(mesh) if cfg.refinement == "uniform" else refine_to_interface(mesh, ls)


def _deformation_diagnostics(d, view):
    iters = d.newton_iterations
    return {
        "cut_elements": int(len(view.cut_set)),
        "limited_count": d.limited_count,
        "barrier_active": bool(d.limited_count > 0),
        "failed_count": d.failed_count,
        "damped_elements": int(len(d.damped)),
        "max_kappa": float(d.max_kappa),
        "newton_median": float(np.median(iters)) if len(iters) else 0.0,
        "newton_max": int(iters.max()) if len(iters) else 0,
    }


def _maybe_export(cfg, level, mesh, d):
    if cfg.export_meshes and cfg.output_dir:
        os.makedirs(cfg.output_dir, exist_ok=True)
        path = os.path.join(cfg.output_dir, f"mesh_{cfg.case}_k{cfg.k}_level{level}.txt")
        write_mesh(path, mesh, d.displacement_at_vertices())
        dump_coeffs(path[:-4] + "_displacement.csv", d.d)


def geometry_error(view, d, order):
    """``max |phi(Psi_h(x))|`` over mapped interface quadrature points."""
    mesh = view.mesh
    rules = cut_rules(mesh, view.cut_set, view.lin_vertex_values(view.cut_set), order)
    y, _, _ = mapped_interface_data(rules.iface, d)
    return float(np.max(np.abs(view.exact(y)))) if len(y) else 0.0


def run_geom_study(config):
    """Maximal level-set value on the mapped interface over refinement levels."""
    cfg = config.resolved()
    if cfg.case not in ("circle", "flower"):
        raise ConfigError("geometry studies support case 'circle' or 'flower'")
    ls = by_name(cfg.case)
    report = ConvergenceReport(asdict(cfg), ("geom",))
    for level, mesh in _level_meshes(cfg, ls):
        dofs = _scalar_dofs(mesh, cfg.k)
        if dofs > cfg.dof_cap:
            report.notes.append(f"level {level} skipped: {dofs} scalar dofs exceed cap {cfg.dof_cap:g}")
            break
        t0 = time.perf_counter()
        view = make_view(ls, mesh, cfg.k)
        d = build_deformation(view, gamma=cfg.gamma, order=cfg.quad_order,
                              kappa_max=cfg.kappa_max)
        err = geometry_error(view, d, cfg.quad_order)
        rec = {"level": level, "h": float(mesh.diameters[view.cut_set].max()),
               "elements": mesh.num_elements, "dofs": dofs, "geom": err}
        rec.update(_deformation_diagnostics(d, view))
        rec["min_det_ratio"] = regularity_report(d, cfg.quad_order).min_det_ratio
        rec["seconds"] = time.perf_counter() - t0
        if rec["barrier_active"]:
            report.notes.append(f"level {level}: barrier active ({d.limited_count} points limited)")
        if not math.isfinite(rec["max_kappa"]):
            report.notes.append(f"level {level}: max_kappa blow-up (non-positive Jacobian)")
        report.levels.append(rec)
        _maybe_export(cfg, level, mesh, d)
    return report


def first_unlimited_level(report):
    """Index of the first level record after which the barrier stays inactive."""
    idx = None
    for i, rec in enumerate(report.levels):
        if rec["limited_count"] == 0:
            if idx is None:
                idx = i
        else:
            idx = None
    return idx


def run_interface_study(config):
    """Full Nitsche-XFEM pipeline for the disk problem under uniform refinement."""
    cfg = config.resolved()
    if cfg.case != "disk":
        raise ConfigError("interface studies support case 'disk'")
    ls = by_name("disk")
    problem = xfem.disk_problem(alpha=cfg.alpha, beta=cfg.beta, lam=cfg.lam)
    report = ConvergenceReport(asdict(cfg), ("L2", "H1", "jump"))
    for level, mesh in _level_meshes(cfg, ls):
        dofs = _scalar_dofs(mesh, cfg.k)
        if dofs > cfg.dof_cap:
            report.notes.append(f"level {level} skipped: {dofs} scalar dofs exceed cap {cfg.dof_cap:g}")
            break
        t0 = time.perf_counter()
        view = make_view(ls, mesh, cfg.k)
        d = build_deformation(view, gamma=cfg.gamma, order=cfg.quad_order,
                              kappa_max=cfg.kappa_max)
        xs = xfem.build_xfem_space(FeSpace(mesh, cfg.k), view)
        cut = cut_rules(mesh, view.cut_set, view.lin_vertex_values(view.cut_set), cfg.quad_order)
        system = xfem.assemble(problem, xs, d, order=cfg.quad_order, cut=cut)
        u, sol = xfem.solve(system)
        l2, h1, jump = xfem.error_norms(u, problem, d, view, xs, order=cfg.quad_order, cut=cut)
        rec = {"level": level, "h": float(mesh.diameters.max()), "elements": mesh.num_elements,
               "dofs": xs.ndofs, "duplicated": xs.num_duplicated,
               "L2": l2, "H1": h1, "jump": jump,
               "residual": sol.residual, "solver_warning": sol.warned}
        rec.update(_deformation_diagnostics(d, view))
        rec["seconds"] = time.perf_counter() - t0
        if sol.warned:
            report.notes.append(f"level {level}: residual reduction only {sol.residual:.2e}")
        report.levels.append(rec)
        _maybe_export(cfg, level, mesh, d)
    return report


# --------------------------------------------------------------------------
# fuzz harness

def random_cut_triangles(rng, n):
    """Random non-degenerate triangles with P1 values of mixed sign."""
    verts = rng.uniform(-1.0, 1.0, size=(n, 3, 2))
    d1, d2 = verts[:, 1] - verts[:, 0], verts[:, 2] - verts[:, 0]
    det = d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]
    flip = det < 0
    verts[flip, 1], verts[flip, 2] = verts[flip, 2].copy(), verts[flip, 1].copy()
    det = np.abs(det)
    keep = det > 1e-3
    verts = verts[keep]
    vals = rng.uniform(-1.0, 1.0, size=(len(verts), 3))
    sign = rng.integers(0, 2, size=len(verts)) * 2 - 1
    vals[:, 0] = sign * np.abs(vals[:, 0])
    vals[:, 1] = -sign * np.abs(vals[:, 1])
    # occasionally cut exactly through a vertex
    through = rng.uniform(size=len(verts)) < 0.05
    vals[through, 2] = 0.0
    return verts, vals


def _triangle_mesh(verts):
    from .mesh import SimplicialMesh

    n = len(verts)
    return SimplicialMesh(verts.reshape(-1, 2), np.arange(3 * n).reshape(n, 3))


def _neg_area_exact(verts, vals):
    """Closed-form area of ``{P1 < 0}`` on each triangle."""
    A = np.abs(0.5 * ((verts[:, 1, 0] - verts[:, 0, 0]) * (verts[:, 2, 1] - verts[:, 0, 1])
                      - (verts[:, 1, 1] - verts[:, 0, 1]) * (verts[:, 2, 0] - verts[:, 0, 0])))
    neg = vals < 0
    lone_neg = neg.sum(axis=1) == 1
    out = np.empty(len(vals))
    for i in range(len(vals)):
        v = vals[i]
        j = int(np.argmax(neg[i])) if lone_neg[i] else int(np.argmax(~neg[i]))
        others = [m for m in range(3) if m != j]
        frac = (v[j] / (v[j] - v[others[0]])) * (v[j] / (v[j] - v[others[1]]))
        out[i] = A[i] * (frac if lone_neg[i] else 1.0 - frac)
    return out, A


def check_quadrature(rng, n=1000, mc_samples=10**6, fault=None):
    """Weight positivity, area partition and Monte-Carlo NEG area agreement."""
    verts, vals = random_cut_triangles(rng, n)
    mesh = _triangle_mesh(verts)
    elems = np.arange(len(verts))
    rules = cut_rules(mesh, elems, vals, order=4)
    weights = np.concatenate([rules.sides[0].weights, rules.sides[1].weights, rules.iface.weights])
    if fault == "negative-weight":
        weights = weights.copy()
        weights[0] = -abs(weights[0])
    out = {}
    out["weight_positivity"] = bool(np.all(weights > 0))
    neg_sum = np.bincount(np.searchsorted(elems, rules.sides[0].elem), rules.sides[0].weights,
                          minlength=len(elems))
    pos_sum = np.bincount(np.searchsorted(elems, rules.sides[1].elem), rules.sides[1].weights,
                          minlength=len(elems))
    exact_neg, area = _neg_area_exact(verts, vals)
    out["area_partition"] = bool(np.max(np.abs(neg_sum + pos_sum - area)) <= 1e-12)
    out["neg_area_closed_form"] = bool(np.max(np.abs(neg_sum - exact_neg)) <= 1e-12)
    # pooled Monte-Carlo estimate of the mean NEG fraction
    tri = rng.integers(0, len(verts), size=mc_samples)
    a, b = rng.uniform(size=(2, mc_samples))
    fold = a + b > 1
    a[fold], b[fold] = 1 - a[fold], 1 - b[fold]
    lin = (1 - a - b) * vals[tri, 0] + a * vals[tri, 1] + b * vals[tri, 2]
    hits = (lin < 0).astype(float)
    p = (neg_sum / area)[tri]
    sigma = np.sqrt(np.mean(p * (1 - p)) / mc_samples)
    out["monte_carlo_area"] = bool(abs(hits.mean() - p.mean()) <= 3 * sigma)
    return out


def _random_circle(rng):
    c = rng.uniform(-0.2, 0.2, size=2)
    r = rng.uniform(0.3, 0.6)
    from .levelset import AnalyticLevelSet

    return AnalyticLevelSet(lambda X: np.hypot(X[:, 0] - c[0], X[:, 1] - c[1]) - r, name="circle")


def check_deformation(rng, trials=3, k_values=(1, 2, 3)):
    """Vertex fixation, locality and exactness for planar level sets."""
    fix_ok = loc_ok = lin_ok = True
    for _ in range(trials):
        mesh = make_rect_mesh((-1.0, -1.0), (1.0, 1.0), int(rng.integers(6, 11)))
        for k in k_values:
            view = make_view(_random_circle(rng), mesh, k)
            d = build_deformation(view)
            fix_ok &= bool(np.abs(d.displacement_at_vertices()).max() <= 1e-12)
            inside = np.zeros(d.space.num_scalar_dofs, dtype=bool)
            inside[np.unique(d.space.dof_map[view.extended_set])] = True
            loc_ok &= bool(np.all(d.d.coeffs.reshape(-1, 2)[~inside] == 0.0))
            normal = rng.normal(size=2)
            normal /= np.linalg.norm(normal)
            lview = make_view(plane(normal, rng.uniform(-0.3, 0.3)), mesh, k)
            lin_ok &= bool(np.abs(build_deformation(lview).d.coeffs).max() <= 1e-12)
    return {"vertex_fixation": fix_ok, "locality": loc_ok, "linear_identity": lin_ok}


def run_quad_check(config=None, n=1000, mc_samples=10**6, fault=None):
    """Run all fuzz properties; returns ``{property: passed}`` (sorted keys).

    ``fault`` is a test-only hook that injects a known defect.
    """
    seed = 0 if config is None else config.seed
    rng = np.random.default_rng(seed)
    out = check_quadrature(rng, n=n, mc_samples=mc_samples, fault=fault)
    out.update(check_deformation(rng))
    return dict(sorted(out.items()))


__all__ = [
    "StudyConfig", "ConvergenceReport", "ConfigError", "run_geom_study",
    "run_interface_study", "run_quad_check", "eoc", "first_unlimited_level",
    "geometry_error", "refine_to_interface",
]
