"""Command line driver: ``isounfit {geom-study, interface-solve, quad-check}``.

Exit codes: 0 success, 1 usage error, 2 property/acceptance failure,
3 numerical failure.
"""

import argparse
import json
import logging
import math
import os
import sys

from threadpoolctl import threadpool_limits

from .cutquad import SingularDeformationError
from .deform import DegenerateLevelSetError
from .studies import (ConfigError, StudyConfig, first_unlimited_level, run_geom_study,
                      run_interface_study, run_quad_check)
from .xfem import SingularSystemError

EXIT_OK, EXIT_USAGE, EXIT_FAIL, EXIT_NUMERIC = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        sys.exit(EXIT_USAGE)


def _common(p, case_choices, default_case, default_levels):
    p.add_argument("--case", choices=case_choices, default=default_case)
    p.add_argument("--k", type=int, default=2, help="polynomial degree (1..4)")
    p.add_argument("--levels", type=int, default=default_levels)
    p.add_argument("--refine", choices=("uniform", "adaptive"), default="uniform")
    p.add_argument("--gamma", type=float, default=0.1, help="barrier parameter")
    p.add_argument("--kappa-max", type=float, default=10.0,
                   help="shape guard bound on kappa(grad Psi_hat); <= 0 disables it")
    p.add_argument("--quad-order", type=int, default=None)
    p.add_argument("--base-n", type=int, default=None, help="cells per side of the level-0 mesh")
    p.add_argument("--dof-cap", type=float, default=2e6)
    p.add_argument("--out", default=None, help="directory for JSON/CSV reports")
    p.add_argument("--export-meshes", action="store_true")
    p.add_argument("--min-eoc", type=float, default=None,
                   help="exit with status 2 if the final EOC of any metric is below this")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=1)


def build_parser():
    parser = _Parser(prog="isounfit", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("geom-study", help="geometry error of the mapped interface")
    _common(g, ("circle", "flower"), "circle", 5)

    s = sub.add_parser("interface-solve", help="Nitsche-XFEM convergence study on the disk")
    _common(s, ("disk",), "disk", 5)
    s.add_argument("--lambda", dest="lam", type=float, default=20.0, help="Nitsche penalty")
    s.add_argument("--alpha", type=float, nargs=2, default=(2.0, 1.0))
    s.add_argument("--beta", type=float, nargs=2, default=(1.0, 1.5))

    q = sub.add_parser("quad-check", help="fuzz properties of cut rules and deformations")
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--samples", type=int, default=1000, help="random cut triangles")
    q.add_argument("--mc-samples", type=int, default=10**6)
    q.add_argument("--threads", type=int, default=1)
    q.add_argument("--out", default=None)
    q.add_argument("--inject-fault", default=None, help=argparse.SUPPRESS)
    return parser


def _config(args):
    kw = dict(case=args.case, k=args.k, levels=args.levels, refinement=args.refine,
              gamma=args.gamma, quad_order=args.quad_order, output_dir=args.out,
              export_meshes=args.export_meshes, base_n=args.base_n,
              kappa_max=args.kappa_max if args.kappa_max > 0 else None,
              dof_cap=args.dof_cap, seed=args.seed, threads=args.threads)
    if args.command == "interface-solve":
        kw.update(lam=args.lam, alpha=tuple(args.alpha), beta=tuple(args.beta))
    return StudyConfig(**kw)


def _print_report(report):
    metrics = report.metrics
    head = f"{'lvl':>3} {'h':>10} {'dofs':>9} " + " ".join(
        f"{m:>10} {'eoc':>6}" for m in metrics) + f" {'limited':>7} {'kappa':>7} {'sec':>6}"
    print(head)
    for rec, e in zip(report.levels, report.eocs):
        cols = " ".join(f"{rec[m]:10.3e} {e[m]:6.2f}" for m in metrics)
        print(f"{rec['level']:3d} {rec['h']:10.3e} {rec['dofs']:9d} {cols} "
              f"{rec['limited_count']:7d} {rec['max_kappa']:7.2f} {rec['seconds']:6.1f}")
    for note in report.notes:
        print(f"note: {note}")


def _check_min_eoc(report, threshold):
    """Gate the final EOC of every metric except the H1 seminorm (one order lower)."""
    if threshold is None:
        return EXIT_OK
    if report.metrics == ("geom",):
        start = first_unlimited_level(report)
        if start is None or start == len(report.levels) - 1:
            print("acceptance: FAIL (no barrier-free level pair)")
            return EXIT_FAIL
    if len(report.levels) < 2:
        print("acceptance: FAIL (fewer than two levels)")
        return EXIT_FAIL
    ok = True
    for m in report.metrics:
        if m == "H1":
            continue
        value = report.eocs[-1][m]
        passed = math.isfinite(value) and value >= threshold
        ok &= passed
        print(f"acceptance: final EOC {m} = {value:.2f} (>= {threshold}) {'PASS' if passed else 'FAIL'}")
    return EXIT_OK if ok else EXIT_FAIL


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        with threadpool_limits(limits=max(1, args.threads)):
            if args.command == "quad-check":
                return _quad_check(args)
            cfg = _config(args)
            if args.command == "geom-study":
                report = run_geom_study(cfg)
                stem = f"geom_{cfg.case}_k{cfg.k}"
            else:
                report = run_interface_study(cfg)
                stem = f"interface_{cfg.case}_k{cfg.k}"
    except ConfigError as exc:
        print(f"isounfit: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (SingularDeformationError, SingularSystemError, DegenerateLevelSetError,
            FloatingPointError) as exc:
        print(f"isounfit: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    _print_report(report)
    if args.out:
        report.write(args.out, stem)
    return _check_min_eoc(report, args.min_eoc)


def _quad_check(args):
    result = run_quad_check(StudyConfig(seed=args.seed), n=args.samples,
                            mc_samples=args.mc_samples, fault=args.inject_fault)
    for name, passed in result.items():
        print(f"{name}: {'PASS' if passed else 'FAIL'}")
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "quad_check.json"), "w") as fh:
            json.dump({"seed": args.seed, "samples": args.samples, "properties": result}, fh, indent=2)
    return EXIT_OK if all(result.values()) else EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
