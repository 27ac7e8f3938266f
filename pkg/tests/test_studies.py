import json
import math

import numpy as np
import pytest

from isounfit import xfem
from isounfit.cli import main
from isounfit.cutquad import element_rules
from isounfit.studies import (ConfigError, ConvergenceReport, StudyConfig, eoc,
                              first_unlimited_level, run_geom_study, run_interface_study,
                              run_quad_check)


def test_eoc_formula():
    assert eoc(1.0, 0.25, 0.2, 0.1) == pytest.approx(2.0)
    assert math.isnan(eoc(0.0, 1.0, 0.2, 0.1))


@pytest.mark.parametrize("kw", [dict(k=0), dict(k=5), dict(levels=0), dict(gamma=0.0),
                                dict(case="torus"), dict(refinement="random"), dict(lam=-1.0)])
def test_config_validation(kw):
    with pytest.raises(ConfigError):
        StudyConfig(**kw).validate()


def test_config_echo_is_complete():
    rep = run_geom_study(StudyConfig(case="circle", k=1, levels=2))
    for key in ("case", "k", "levels", "refinement", "gamma", "lam", "quad_order",
                "output_dir", "export_meshes", "base_n", "kappa_max", "seed", "threads"):
        assert key in rep.config
    assert rep.config["base_n"] == 12 and rep.config["quad_order"] == 4


def test_geom_study_circle_k1():
    rep = run_geom_study(StudyConfig(case="circle", k=1, levels=5))
    rates = [e["geom"] for e in rep.eocs[1:]]
    assert rates[-1] > 1.7
    assert all(r["limited_count"] == 0 for r in rep.levels)


def test_wrong_case_for_study():
    with pytest.raises(ConfigError):
        run_geom_study(StudyConfig(case="disk"))
    with pytest.raises(ConfigError):
        run_interface_study(StudyConfig(case="circle"))


def test_barrier_flag_and_blowup_report():
    """Barrier disabled on a coarse flower mesh: kappa blows up, study still completes."""
    rep = run_geom_study(StudyConfig(case="flower", k=4, levels=1, base_n=4, gamma=1e9,
                                     kappa_max=None))
    assert rep.levels[0]["max_kappa"] > 100 or not math.isfinite(rep.levels[0]["max_kappa"])
    ref = run_geom_study(StudyConfig(case="flower", k=4, levels=1, base_n=4))
    assert ref.levels[0]["barrier_active"]
    assert any("barrier active" in n for n in ref.notes)
    assert math.isfinite(ref.levels[0]["max_kappa"])


def test_first_unlimited_level():
    rep = ConvergenceReport({}, ("geom",))
    for i, lim in enumerate([5, 0, 3, 0, 0]):
        rep.levels.append({"level": i, "h": 2.0**-i, "geom": 1.0, "limited_count": lim})
    assert first_unlimited_level(rep) == 3


def test_dof_cap_skips_level():
    rep = run_geom_study(StudyConfig(case="circle", k=2, levels=3, dof_cap=1000))
    assert len(rep.levels) == 1
    assert "skipped" in rep.notes[0]


def test_report_outputs(tmp_path):
    rep = run_interface_study(StudyConfig(case="disk", k=1, levels=2))
    rep.write(tmp_path, "r")
    data = json.loads((tmp_path / "r.json").read_text())
    assert len(data["levels"]) == 2
    assert data["levels"][0]["eoc"]["L2"] == "nan"
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0].startswith("level,h,")
    assert len(lines) == 3


def test_report_is_deterministic():
    a = run_interface_study(StudyConfig(case="disk", k=2, levels=2))
    b = run_interface_study(StudyConfig(case="disk", k=2, levels=2))
    strip = lambda r: [{k: v for k, v in rec.items() if k != "seconds"} for r_ in [r] for rec in r_.levels]  # noqa: E731
    assert strip(a) == strip(b)


def _fitted_l2(mesh, k, prob):
    space, u = xfem.solve_fitted_poisson(mesh, k, 1.0, prob.rhs[0], prob.exact[0])
    r = element_rules(mesh, np.arange(mesh.num_elements), 2 * k + 2)
    X = np.einsum("pij,pj->pi", mesh.jacobians[r.elem], r.ref) + mesh.origins[r.elem]
    f = space.function(u)
    return np.sqrt(np.sum(r.weights * (f.eval_points(r.elem, r.ref) - prob.exact[0](X)) ** 2))


@pytest.mark.parametrize("k", [1, 2, 3])
def test_equal_coefficients_match_fitted_solver(k):
    from isounfit.mesh import make_rect_mesh, refine_uniform

    rep = run_interface_study(StudyConfig(case="disk", k=k, levels=4, alpha=(1, 1), beta=(1, 1)))
    mesh = refine_uniform(make_rect_mesh((-1, -1), (1, 1), 4), 3)
    ref = _fitted_l2(mesh, k, xfem.disk_problem(alpha=(1, 1), beta=(1, 1)))
    assert rep.levels[-1]["L2"] == pytest.approx(ref, rel=0.01)


def test_quad_check_properties():
    a = run_quad_check(StudyConfig(seed=3), n=300, mc_samples=10**5)
    b = run_quad_check(StudyConfig(seed=3), n=300, mc_samples=10**5)
    assert a == b
    assert all(a.values())
    bad = run_quad_check(StudyConfig(seed=3), n=300, mc_samples=10**5, fault="negative-weight")
    assert not bad["weight_positivity"]


def test_cli_exit_codes(tmp_path, capsys):
    assert main(["quad-check", "--samples", "200", "--mc-samples", "20000"]) == 0
    assert main(["quad-check", "--samples", "200", "--mc-samples", "20000",
                 "--inject-fault", "negative-weight"]) == 2
    with pytest.raises(SystemExit) as exc:
        main(["geom-study", "--refine", "sideways"])
    assert exc.value.code == 1
    assert main(["geom-study", "--k", "9"]) == 1
    out = tmp_path / "o"
    assert main(["geom-study", "--case", "circle", "--k", "1", "--levels", "3", "--out", str(out),
                 "--export-meshes", "--min-eoc", "1.5"]) == 0
    assert (out / "geom_circle_k1.json").exists() and (out / "geom_circle_k1.csv").exists()
    assert (out / "mesh_circle_k1_level2.txt").exists()
    assert main(["geom-study", "--case", "circle", "--k", "1", "--levels", "3", "--min-eoc", "5"]) == 2
    assert main(["interface-solve", "--k", "1", "--levels", "2", "--lambda", "40"]) == 0
    text = capsys.readouterr().out
    assert "weight_positivity: FAIL" in text and "acceptance: final EOC geom" in text


def test_cli_numerical_failure(monkeypatch):
    import isounfit.cli as cli

    def boom(cfg):
        raise xfem.SingularSystemError("structurally singular")

    monkeypatch.setattr(cli, "run_interface_study", boom)
    assert main(["interface-solve", "--k", "1", "--levels", "1"]) == 3
