"""Command-line entry point.

    porohomog run --config study.yaml [--out DIR] [--reproducible] [--check expected.yaml]
    porohomog cell | blayer | micro --eps 1/4 | estimate | rates  [--config F | --shape NAME] [--out DIR]
    porohomog --list-estimates

Exit codes: 0 success, 2 configuration or usage error (including a missing
upstream stage), 3 solver or stage failure, 4 failed expected-value check.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
import warnings
from fractions import Fraction

import yaml

from . import __version__
from . import analysis as an
from .blayer import DecayWarning
from .errors import ConfigError, PorohomogError
from .study import MissingStageError, StageError, Study, StudyConfig, parse_eps, run_checks

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER, EXIT_CHECK = 0, 2, 3, 4

log = logging.getLogger("porohomog")


def _common(p):
    src = p.add_mutually_exclusive_group()
    src.add_argument("--config", help="study configuration (YAML)")
    src.add_argument("--shape", choices=("circle", "ellipse"), help="use the preset study for this shape")
    p.add_argument("--out", help="output directory (overrides output.dir)")
    p.add_argument("--reproducible", action="store_true", help="deterministic serial execution, no timings")


def build_parser():
    parser = argparse.ArgumentParser(prog="porohomog", description="Homogenization error studies for Stokes "
                                     "flow over a periodic porous bed.")
    parser.add_argument("--list-estimates", action="store_true", help="print the estimate catalog and exit")
    parser.add_argument("--version", action="version", version=f"porohomog {__version__}")
    parser.add_argument("-q", "--quiet", action="store_true", help="only report errors")
    sub = parser.add_subparsers(dest="command")
    p = sub.add_parser("run", help="full study: cell, boundary layer, micro sweep, estimates, rates")
    _common(p)
    p.add_argument("--check", help="expected-values file (YAML); exit 4 on mismatch")
    for name, text in (("cell", "cell problems and permeability"), ("blayer", "boundary layer (needs cell)"),
                       ("estimate", "estimates for the configured eps list (needs all stages)"),
                       ("rates", "rate fits from estimates.json")):
        _common(sub.add_parser(name, help=text))
    p = sub.add_parser("micro", help="micro problem for one or more eps")
    _common(p)
    p.add_argument("--eps", action="append", help="eps value such as 1/4 (repeatable; default: config list)")
    return parser


def load_config(args) -> StudyConfig:
    if getattr(args, "config", None):
        cfg = StudyConfig.load(args.config)
    else:
        cfg = StudyConfig.preset(getattr(args, "shape", None) or "ellipse")
    changes = {}
    if getattr(args, "out", None):
        changes["out"] = args.out
    if getattr(args, "reproducible", False):
        changes["reproducible"] = True
    return dataclasses.replace(cfg, **changes).validate() if changes else cfg


def list_estimates(stream=None):
    stream = stream if stream is not None else sys.stdout
    for spec in an.catalog():
        scale = f"  (reported as eps^{spec.scaling} x norm)" if spec.scaling else ""
        stream.write(f"{spec.id:6s} region {spec.region:13s} bound {spec.bound:14s} {spec.formula}{scale}\n")


def _print_rates(fits, stream=None):
    stream = stream if stream is not None else sys.stdout
    for (shape, est), f in sorted(fits.items(), key=lambda kv: (kv[0][0], an.ESTIMATE_IDS.index(kv[0][1]))):
        stream.write(f"{shape:10s} {est:6s} slope {f.slope:7.4f}  r2 {f.r_squared:.4f}  "
                     f"eps [{f.eps_min:g}, {f.eps_max:g}] ({f.n_points} points)\n")


def _cmd_run(args, cfg):
    study = Study(cfg)
    constants, fits = study.run()
    sys.stdout.write(f"K = {json.dumps(constants['K'])}\nC1bl = {constants['C1bl']:.12g}  Cpi = {constants['Cpi']:.12g}\n")
    _print_rates(fits)
    if args.check:
        try:
            expected = yaml.safe_load(open(args.check).read()) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot read expected values {args.check}: {exc}") from exc
        results = run_checks(expected, constants, fits)
        for r in results:
            sys.stdout.write(f"{'PASS' if r.passed else 'FAIL'} {r.name}: {r.detail}\n")
        if not all(r.passed for r in results):
            return EXIT_CHECK
    return EXIT_OK


def _cmd_stage(command, args, cfg):
    study = Study(cfg)
    status = "incomplete"
    try:
        if command == "cell":
            for lv in cfg.levels_needed:
                res = study.cell(lv)
                sys.stdout.write(f"level {lv}: K = {res.K.tolist()}\n")
        elif command == "blayer":
            for lv in cfg.levels_needed:
                res = study.blayer(lv)
                sys.stdout.write(f"level {lv}: C1bl = {res.C1bl:.12g}  Cpi = {res.Cpi:.12g}\n")
            study.constants()
        elif command == "micro":
            eps_list = [parse_eps(e) for e in args.eps] if args.eps else list(cfg.eps)
            cfg2 = dataclasses.replace(cfg, eps=tuple(eps_list)).validate()
            study.config = cfg2
            for e in eps_list:
                for lv in cfg.levels_needed:
                    key = study.micro_key(e, lv)
                    hit = study._cached(study.micro_dir(e, lv), key)
                    sol = study.micro(e, lv)
                    sys.stdout.write(f"eps = {Fraction(e)} level {lv}: {sol.space.n_total} dofs"
                                     f"{' (cache hit)' if hit else ''}\n")
        elif command == "estimate":
            reps = study.reports(compute=False)
            study.write_estimates(reps)
            for r in reps:
                sys.stdout.write(f"eps = {Fraction(r.eps).limit_denominator(10**6)}: " +
                                 " ".join(f"{k}={r.scaled[k]:.4e}" for k in cfg.estimates) + "\n")
        elif command == "rates":
            reps = study.load_reports()
            try:
                fits, _ = study.rates(reps)
            except ValueError as exc:
                raise ConfigError(str(exc)) from exc
            _print_rates(fits)
        status = "complete"
    except PorohomogError as exc:
        study.manifest.mark_incomplete(command, "", str(exc))
        raise
    finally:
        study.manifest.write(status)
    return EXIT_OK


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.ERROR if args.quiet else logging.INFO, format="%(levelname)s %(message)s",
                        stream=sys.stderr)
    warnings.simplefilter("ignore", DecayWarning)  # reported through logging
    if args.list_estimates:
        list_estimates()
        return EXIT_OK
    if not args.command:
        parser.print_help(sys.stderr)
        return EXIT_CONFIG
    try:
        cfg = load_config(args)
        if args.command == "run":
            return _cmd_run(args, cfg)
        return _cmd_stage(args.command, args, cfg)
    except (ConfigError, MissingStageError) as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_CONFIG
    except (StageError, PorohomogError) as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_SOLVER


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
