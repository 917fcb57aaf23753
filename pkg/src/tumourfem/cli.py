"""Command line interface.

Subcommands
-----------
run               solve a configured problem, write snapshots and diagnostics
eoc               convergence study against a fine reference solution
stability-report  time-step bound, its constants and the stability ledger
perturb           continuous dependence on perturbed data
mesh-check        build the configured mesh and check its geometry

Exit status is 0 on success, 2 for configuration errors, 3 for solver
failures and 4 for violated modelling assumptions.
"""

from __future__ import annotations

import argparse
import logging
import sys
import warnings
from pathlib import Path

from . import __version__
from .diagnostics import eoc
from .config import ConfigError, EocStudyConfig, RunConfig, load_config, parse_config
from .experiments import (
    build_mesh,
    continuous_dependence_experiment,
    fingering_experiment,
    prepare_run,
    run_config,
    run_eoc_study,
)
from .io import write_field_csv, write_table_csv, write_vtk
from .mesh import check_non_obtuse
from .model import AssumptionError, check_assumptions, compute_dt_star, compute_growth_constants
from .solver import SolverError, StabilityWarning

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER, EXIT_ASSUMPTION = 0, 2, 3, 4

log = logging.getLogger("tumourfem")


def _load(args) -> RunConfig:
    return load_config(args.config) if args.config else parse_config("")


def _outdir(args, cfg: RunConfig) -> Path:
    out = Path(args.out or cfg.output.dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _dt_star_lines(cfg: RunConfig) -> list:
    """Text block with the stability bound, or the reason it is undefined."""
    try:
        star = compute_dt_star(cfg.params)
    except AssumptionError as exc:
        return [f"dt*: undefined ({exc})"]
    lines = [f"dt*: {star.dt_star!r}"]
    for i, c in enumerate(star.candidates):
        mark = "  <- minimum" if i == star.argmin else ""
        lines.append(f"  candidate {i + 1}: {c!r}{mark}")
    lines += [f"  {k} = {v!r}" for k, v in star.c.items()]
    if not cfg.dt < star.dt_star:
        lines.append(f"WARNING: dt = {cfg.dt!r} is not below dt* = {star.dt_star!r}")
    return lines


def _write_assumptions(out: Path, cfg: RunConfig):
    report = check_assumptions(cfg.params)
    (out / "assumptions.txt").write_text(report.to_text() + "\n" + "\n".join(_dt_star_lines(cfg)) + "\n")
    write_table_csv(out / "assumptions.csv", report.to_rows())
    return report


def _fatal_assumptions(report) -> list:
    # without positive mobilities the scheme cannot be assembled; the other
    # conditions only enter the stability analysis and are reported
    return [c for c in report.failures() if c.name == "A3"]


def _write_snapshots(out: Path, traj, vtk: bool):
    for k, state in zip(traj.snapshot_steps, traj.states):
        fields = {"phi": state.phi, "mu": state.mu, "sigma": state.sigma}
        write_field_csv(out / f"state_{k:06d}.csv", state.mesh, fields)
        if vtk:
            write_vtk(out / f"state_{k:06d}.vtk", state.mesh, fields, title=f"t={state.time!r}")


def cmd_run(args) -> int:
    cfg = _load(args)
    out = _outdir(args, cfg)
    report = _write_assumptions(out, cfg)
    fatal = _fatal_assumptions(report)
    if fatal:
        for c in fatal:
            print(f"assumption {c.name} violated: {c.detail}", file=sys.stderr)
        return EXIT_ASSUMPTION
    for line in _dt_star_lines(cfg):
        print(line)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", StabilityWarning)
        if cfg.initial.profile == "perturbed_circle":
            res = fingering_experiment(cfg)
            traj = res.trajectory
            write_table_csv(out / "anisotropy.csv",
                            [("time", "anisotropy", "n_vertices"), *zip(res.times, res.anisotropy, res.vertices)])
        else:
            traj = run_config(cfg)
    write_table_csv(out / "diagnostics.csv", traj.ledger.rows())
    _write_snapshots(out, traj, cfg.output.vtk)
    print(f"finished at t = {traj.final.time!r} after {len(traj.reports)} steps; output in {out}")
    return EXIT_OK


def cmd_eoc(args) -> int:
    cfg = _load(args)
    out = _outdir(args, cfg)
    study = cfg.eoc
    if args.quick or study.quick:
        study = EocStudyConfig.quick_mode(T=study.T, T_precondition=study.T_precondition)
    with warnings.catch_warnings():
        # dt = h^2 exceeds the stability bound on the coarse levels by design
        warnings.simplefilter("ignore", StabilityWarning)
        result = run_eoc_study(study, cfg.params, cfg.newton, cfg.sigma_inf, progress=print,
                               threads=args.threads)
    table = result.table
    write_table_csv(out / "eoc_errors.csv", table.rows())
    rows = [("quantity", "eoc_last", *[f"eoc_{i + 1}" for i in range(len(study.hs) - 1)])]
    for name, errors in table.errors.items():
        last, orders = eoc(errors, table.hs)
        rows.append((name, last, *orders))
        print(f"{name:18s} {last:.4f}")
    write_table_csv(out / "eoc_orders.csv", rows)
    return EXIT_OK


def cmd_stability_report(args) -> int:
    cfg = _load(args)
    out = _outdir(args, cfg)
    consts = compute_growth_constants(cfg.params)
    report = check_assumptions(cfg.params, consts)
    lines = [report.to_text(), *_dt_star_lines(cfg)]
    lines += [f"  {k} = {v!r}" for k, v in consts.__dict__.items()]

    def emit(status=EXIT_OK):
        text = "\n".join(lines)
        (out / "stability_report.txt").write_text(text + "\n")
        print(text)
        return status

    if _fatal_assumptions(report):
        return emit(EXIT_ASSUMPTION)
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", StabilityWarning)
            traj = run_config(cfg, keep="none")
    except SolverError as exc:
        lines.append(f"simulation failed: {exc}")
        return emit(EXIT_SOLVER)
    ledger = traj.ledger
    rows = [("step", "time", "energy", "aggregate")]
    for k in range(1, len(ledger) + 1):
        rows.append((k, ledger.records["time"][k - 1], ledger.records["energy"][k - 1], ledger.aggregate(k)))
    write_table_csv(out / "stability_ledger.csv", rows)
    p = cfg.params
    if p.chi_phi == 0 and p.lambda_p == 0 and p.lambda_a == 0:
        rises = ledger.energy_increases()
        lines.append(f"monotone: {'true' if not rises else 'false'}")
        if rises:
            lines.append(f"energy increases at steps {rises}")
    lines.append(f"ledger aggregate at t = {traj.final.time!r}: {ledger.aggregate()!r}")
    return emit()


def cmd_perturb(args) -> int:
    cfg = _load(args)
    out = _outdir(args, cfg)
    deltas = tuple(args.delta) if args.delta else cfg.perturb.deltas
    rows = continuous_dependence_experiment(cfg, deltas, cfg.perturb.target)
    table = [("delta", "aggregate", "aggregate_over_delta2")]
    table += [(r.delta, r.aggregate, r.ratio) for r in rows]
    write_table_csv(out / "perturb.csv", table)
    for r in rows:
        print(f"delta={r.delta:g} aggregate={r.aggregate:.6e}")
    return EXIT_OK


def cmd_mesh_check(args) -> int:
    cfg = _load(args)
    base = build_mesh(cfg)
    mesh = prepare_run(cfg)[0].mesh if cfg.mesh.adapt else base
    conforming = mesh.check_conforming()
    angles = check_non_obtuse(mesh)
    print(f"dim {mesh.dim}, vertices {mesh.n_vertices}, cells {mesh.n_cells}")
    print(f"h_max {mesh.h_max!r}, h_min {mesh.h_min!r}, measure {mesh.measure!r}")
    print(f"conforming: {'true' if conforming else 'false'}")
    print(f"non-obtuse: {'true' if angles.ok else 'false'} (largest angle {angles.worst_angle:.4f} deg)")
    if args.out:
        out = _outdir(args, cfg)
        write_vtk(out / "mesh.vtk", mesh)
    return EXIT_OK if conforming and angles.ok else EXIT_ASSUMPTION


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tumourfem", description="Finite element solver for a diffuse interface tumour growth model.")
    parser.add_argument("--version", action="version", version=__version__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="TOML run configuration")
    common.add_argument("--out", metavar="DIR", help="output directory (overrides [output] dir)")
    common.add_argument("--quick", action="store_true", help="reduced convergence study")
    common.add_argument("--threads", type=int, default=1, metavar="N", help="parallel jobs")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("run", parents=[common], help="run a configured simulation").set_defaults(fn=cmd_run)
    sub.add_parser("eoc", parents=[common], help="convergence study").set_defaults(fn=cmd_eoc)
    sub.add_parser("stability-report", parents=[common],
                   help="time-step bound and stability ledger").set_defaults(fn=cmd_stability_report)
    p = sub.add_parser("perturb", parents=[common], help="continuous dependence study")
    p.add_argument("--delta", type=float, action="append", help="perturbation size (repeatable)")
    p.set_defaults(fn=cmd_perturb)
    sub.add_parser("mesh-check", parents=[common], help="mesh geometry checks").set_defaults(fn=cmd_mesh_check)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except AssumptionError as exc:
        print(f"assumption violated: {exc}", file=sys.stderr)
        return EXIT_ASSUMPTION
    except SolverError as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
