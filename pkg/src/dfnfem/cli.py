"""Command-line entry point: ``dfnfem {forward,gradcheck,identify,make-reference} CONFIG``.

Exit codes: 0 success, 1 usage or configuration error, 2 solver or
identification failure, 3 gradient check above threshold.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
import tempfile
from pathlib import Path

import numpy as np

from . import __version__
from .adjoint import backward_sweep, voltage_partials
from .config import RunConfig, load_config
from .errors import ConfigError, DFNError, ForwardFailure, IdentificationError
from .ident import IdentificationProblem, Objective, RateData, identify
from .mesh import ELECTRODES, TAG
from .solver import CellModel

log = logging.getLogger("dfnfem")

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER, EXIT_THRESHOLD = 0, 1, 2, 3
VOLTAGE_COLUMNS = ("step", "time_s", "current_A_per_m2", "voltage_V")


class UsageError(Exception):
    pass


# -- output helpers ---------------------------------------------------------

def header_line(cfg: RunConfig) -> str:
    return f"# dfnfem {__version__} config_sha256={cfg.sha256} seed={cfg.seed}"


def write_atomic(path: Path, text: str) -> None:
    """Write through a temporary file in the target directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def csv_text(cfg: RunConfig, columns, rows) -> str:
    buf = io.StringIO()
    buf.write(header_line(cfg) + "\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([v if isinstance(v, (str, int, np.integer)) else repr(float(v)) for v in row])
    return buf.getvalue()


def voltage_rows(tape, voltages=None):
    voltages = tape.voltages if voltages is None else voltages
    return [(k, e.time, e.i_app, v) for k, (e, v) in enumerate(zip(tape.entries, voltages))]


def read_voltage_csv(path) -> tuple[np.ndarray, np.ndarray]:
    """Times and voltages from a CSV with time_s and voltage_V columns; '#' lines are skipped."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"reference file not found: {path}")
    with open(path, newline="") as fh:
        lines = [ln for ln in fh if ln.strip() and not ln.startswith("#")]
    reader = csv.DictReader(lines)
    if reader.fieldnames is None or not {"time_s", "voltage_V"} <= set(reader.fieldnames):
        raise ConfigError(f"{path}: needs time_s and voltage_V columns")
    t, v = [], []
    for row in reader:
        t.append(float(row["time_s"]))
        v.append(float(row["voltage_V"]))
    if not t:
        raise ConfigError(f"{path}: no samples")
    return np.array(t), np.array(v)


def snapshot_rows(model: CellModel, tape):
    """One row per node and tape entry; absent fields are NaN."""
    mesh, d = model.mesh, model.dofs
    owner = {TAG[e]: e for e in ELECTRODES}
    local = np.full(mesh.n_nodes, -1)
    for e in ELECTRODES:
        local[mesh.electrode_nodes(e)] = np.arange(mesh.electrode_nodes(e).size)
    for k, entry in enumerate(tape.entries):
        y = entry.state.y
        for n in range(mesh.n_nodes):
            vals = [y[dof[n]] if dof[n] >= 0 else np.nan for dof in (d.dof_c, d.dof_p, d.dof_s, d.dof_j)]
            e = owner.get(int(mesh.electrode_of_node[n]))
            cs = entry.state.micro[e][local[n], -1] if e is not None else np.nan
            yield (k, entry.time, n, *mesh.nodes[n], *vals, cs)


def snapshot_columns(dim):
    return ("step", "time_s", "node", *("x", "y", "z")[:dim], "c_e", "phi_e", "phi_s", "j", "c_s_surf")


# -- commands ---------------------------------------------------------------

def _model(cfg: RunConfig) -> CellModel:
    return CellModel(cfg.build_mesh(), cfg.n_micro, cfg.newton)


def _require_protocols(cfg):
    if not cfg.protocols:
        raise ConfigError("missing required key protocol (or protocols)")


def cmd_forward(cfg: RunConfig) -> int:
    _require_protocols(cfg)
    model = _model(cfg)
    status = EXIT_OK
    for proto in cfg.protocols:
        try:
            tape = model.run_forward(cfg.params, proto.drive())
        except ForwardFailure as exc:
            log.error("forward run %s failed: %s", proto.name, exc)
            tape, status = exc.tape, EXIT_SOLVER
        path = cfg.output_dir / f"voltage_{proto.name}.csv"
        write_atomic(path, csv_text(cfg, VOLTAGE_COLUMNS, voltage_rows(tape)))
        if cfg.snapshots and len(tape):
            write_atomic(cfg.output_dir / f"fields_{proto.name}.csv",
                         csv_text(cfg, snapshot_columns(model.mesh.dim), snapshot_rows(model, tape)))
        log.info("%s: %d steps, reason %s, final V %.6f", proto.name, tape.n_steps, tape.reason,
                 tape.voltages[-1] if len(tape) else np.nan)
        print(f"{proto.name}: {tape.n_steps} steps, {tape.reason}, wrote {path}")
    return status


def cmd_make_reference(cfg: RunConfig) -> int:
    _require_protocols(cfg)
    model = _model(cfg)
    rng = np.random.default_rng(cfg.seed)
    for proto in cfg.protocols:
        try:
            tape = model.run_forward(cfg.params, proto.drive())
        except ForwardFailure as exc:
            log.error("reference run %s failed: %s", proto.name, exc)
            return EXIT_SOLVER
        v = tape.voltages
        if cfg.noise_sigma > 0:
            v = v + rng.normal(0.0, cfg.noise_sigma, size=v.shape)
        path = cfg.output_dir / f"reference_{proto.name}.csv"
        write_atomic(path, csv_text(cfg, VOLTAGE_COLUMNS, voltage_rows(tape, v)))
        print(f"{proto.name}: {tape.n_steps} steps, wrote {path}")
    return EXIT_OK


def _load_rates(cfg: RunConfig, steps=None):
    rates = []
    for ref in cfg.identification.references:
        t, v = read_voltage_csv(ref.path)
        if steps is not None:
            keep = t <= steps * ref.protocol.dt * (1 + 1e-12)
            t, v = t[keep], v[keep]
        rates.append(RateData(ref.protocol.name, ref.protocol.i_app, ref.protocol.dt, t, v))
    return rates


def _require_identification(cfg):
    if cfg.identification is None:
        raise ConfigError("missing required section identification")


def gradient_check(cfg: RunConfig, fd_step: float):
    """Adjoint and central-difference gradients of the configured objective.

    With reference files the objective is the mean voltage RMSE; without,
    it is the mean terminal voltage over ``identification.steps`` steps of
    every protocol.
    """
    _require_identification(cfg)
    ident = cfg.identification
    names = ident.spec.names
    model = _model(cfg)
    theta0 = cfg.params.vector(names)
    if ident.references:
        rates = _load_rates(cfg, ident.steps)
        problem = IdentificationProblem(ident.spec, cfg.params, rates, model, ident.settings, newton=cfg.newton)
        obj = Objective(problem)

        def value(params, with_grad=False):
            ev = obj.evaluate(params, rates, names if with_grad else None)
            return ev.objective, ev.gradient_theta
    else:
        _require_protocols(cfg)
        steps = ident.steps or 20

        def value(params, with_grad=False):
            total, grad = 0.0, np.zeros(len(names))
            for proto in cfg.protocols:
                tape = model.run_forward(params, proto.drive(cutoff=False, max_steps=steps))
                n = len(tape)
                total += float(np.mean(tape.voltages)) / len(cfg.protocols)
                if with_grad:
                    dV = np.full(n, 1.0 / (n * len(cfg.protocols)))
                    grad += backward_sweep(model, tape, voltage_partials(model, dV), names).gradient
            return total, grad

    _, adj = value(cfg.params, True)
    fd = np.zeros(len(names))
    for k, name in enumerate(names):
        h = fd_step * max(abs(theta0[k]), 1e-300)
        fp, _ = value(cfg.params.with_values({name: theta0[k] + h}))
        fm, _ = value(cfg.params.with_values({name: theta0[k] - h}))
        fd[k] = (fp - fm) / (2 * h)
    denom = np.maximum(np.abs(fd), np.abs(adj))
    rel = np.where(denom > 0, np.abs(adj - fd) / np.where(denom > 0, denom, 1.0), 0.0)
    return names, adj, fd, rel


def cmd_gradcheck(cfg: RunConfig, fd_step=None, threshold=None) -> int:
    _require_identification(cfg)
    fd_step = cfg.identification.fd_step if fd_step is None else fd_step
    threshold = cfg.identification.threshold if threshold is None else threshold
    names, adj, fd, rel = gradient_check(cfg, fd_step)
    rows = list(zip(names, adj, fd, rel))
    path = cfg.output_dir / "gradcheck.csv"
    write_atomic(path, csv_text(cfg, ("parameter", "adjoint", "fd", "rel_error"), rows))
    for name, a, f, r in rows:
        print(f"{name:16s} adjoint={a: .10e} fd={f: .10e} rel_error={r:.3e}")
    bad = [n for n, r in zip(names, rel) if not r <= threshold]
    if bad:
        print(f"gradient check failed (threshold {threshold:g}): {', '.join(bad)}", file=sys.stderr)
        return EXIT_THRESHOLD
    print(f"gradient check passed (threshold {threshold:g})")
    return EXIT_OK


def _write_history(cfg, history):
    write_atomic(cfg.output_dir / "identification_history.csv",
                 csv_text(cfg, ("iteration", "objective_V"), list(enumerate(history))))


def cmd_identify(cfg: RunConfig) -> int:
    _require_identification(cfg)
    ident = cfg.identification
    if not ident.references:
        raise ConfigError("missing required key identification.references")
    rates = _load_rates(cfg)
    model = _model(cfg)
    problem = IdentificationProblem(ident.spec, cfg.params, rates, model, ident.settings, newton=cfg.newton)
    if isinstance(ident.start, list):
        w_start = np.array(ident.start)
    elif ident.start == "midpoint":
        w_start = np.full(len(ident.spec), 0.5)
    else:
        w_start = None
    try:
        result = identify(problem, w_start=w_start)
    except IdentificationError as exc:
        _write_history(cfg, exc.history or [])
        log.error("identification failed: %s", exc)
        return EXIT_SOLVER
    report = result.report()
    report["per_rate_rmse_V"] = dict(zip([r.name for r in rates], report["per_rate_rmse_V"]))
    report["header"] = header_line(cfg)
    write_atomic(cfg.output_dir / "identification_report.json", json.dumps(report, indent=2) + "\n")
    write_atomic(cfg.output_dir / "identified_parameters.csv",
                 csv_text(cfg, ("parameter", "value", "w"),
                          [(n, result.theta[n], w) for n, w in zip(ident.spec.names, result.w)]))
    _write_history(cfg, result.history)
    print(json.dumps({k: report[k] for k in ("objective_V", "parameters", "NF", "termination", "wall_time_s")},
                     indent=2))
    return EXIT_OK


COMMANDS = {
    "forward": cmd_forward,
    "gradcheck": cmd_gradcheck,
    "identify": cmd_identify,
    "make-reference": cmd_make_reference,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dfnfem", description="FEM Doyle-Fuller-Newman simulation and identification")
    parser.add_argument("--version", action="version", version=f"dfnfem {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("config", help="YAML run configuration")
        p.add_argument("--out", help="output directory (overrides output.dir)")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a configuration entry, e.g. protocol.dt=10")
        p.add_argument("--seed", type=int, help="random seed (overrides seed)")
        p.add_argument("-v", "--verbose", action="count", default=None)
        if name == "gradcheck":
            p.add_argument("--fd-step", type=float, help="relative central-difference step")
            p.add_argument("--threshold", type=float, help="maximum relative error")
        if name == "make-reference":
            p.add_argument("--noise", type=float, help="standard deviation of additive noise (V)")
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"dfnfem: usage error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    overrides = list(args.set)
    if args.out is not None:
        overrides.append(f"output.dir={json.dumps(str(Path(args.out).resolve()))}")
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if getattr(args, "noise", None) is not None:
        overrides.append(f"reference.noise_sigma={args.noise}")
    try:
        cfg = load_config(args.config, overrides, require_files=args.command != "make-reference")
        level = args.verbose if args.verbose is not None else cfg.verbosity
        logging.basicConfig(level={0: logging.WARNING, 1: logging.INFO}.get(level, logging.DEBUG),
                            format="%(levelname)s %(name)s: %(message)s")
        if args.command == "gradcheck":
            return cmd_gradcheck(cfg, args.fd_step, args.threshold)
        return COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(f"dfnfem: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DFNError as exc:
        print(f"dfnfem: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
