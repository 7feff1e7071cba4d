"""Command-line entry point.

Exit codes: 0 success, 1 experiment/runtime error, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import pipelines, protocol
from .backend import open_backend
from .config import ExperimentConfig, build_config, read_config_file
from .device import load_map, new_crossbar, save_map
from .errors import ConfigurationError, MemxbarError
from .programming import ProgrammingAborted, program_array

log = logging.getLogger("memxbar")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _common(p: argparse.ArgumentParser) -> None:
    # SUPPRESS keeps sub-parser defaults from clobbering values given before the subcommand
    g = p.add_argument_group("common options")
    g.add_argument("--config", type=Path, default=argparse.SUPPRESS,
                   help="key=value config file; command-line flags override it")
    g.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    g.add_argument("--method", choices=("vipi", "pi"), type=str.lower, default=argparse.SUPPRESS)
    g.add_argument("--backend", default=argparse.SUPPRESS,
                   help="direct | pipe | tcp:HOST:PORT (default direct)")
    g.add_argument("--out", type=Path, default=argparse.SUPPRESS, help="output directory")
    g.add_argument("--no-figures", dest="figures", action="store_false", default=argparse.SUPPRESS,
                   help="skip PNG figures, write CSV/JSON only")
    g.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="memxbar", description="Memristor crossbar simulator and experiments.")
    _common(parser)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("simulate-serve", help="serve the line protocol for a simulated crossbar")
    _common(p)
    p.add_argument("--listen", metavar="HOST:PORT", help="serve TCP instead of stdin/stdout")
    p.add_argument("--state", type=Path, help="start from a saved conductance map")

    p = sub.add_parser("program", help="program a targets CSV onto the crossbar")
    _common(p)
    p.add_argument("--targets", type=Path, required=True,
                   help="rows x cols CSV in [0, 1]; empty or nan cells are skipped")
    p.add_argument("--state", type=Path, help="start from a saved conductance map")

    p = sub.add_parser("read-map", help="dump the conductance map as CSV")
    _common(p)
    p.add_argument("--state", type=Path, help="saved map to read instead of a fresh device")

    p = sub.add_parser("digits", help="binary digit classification experiment")
    _common(p)
    p.add_argument("--dataset", type=Path, help="digits CSV (default: bundled copy)")
    p.add_argument("--split", type=float)
    p.add_argument("--compare", action="store_true", help="run both VIPI and PI on the same seed")

    p = sub.add_parser("robot", help="robot-command regression experiment")
    _common(p)
    p.add_argument("--dataset", type=Path, help="trajectory CSV (default: generated from --seed)")
    p.add_argument("--split", type=float)
    p.add_argument("--n-samples", type=int)

    p = sub.add_parser("gen-data", help="write a synthetic trajectory CSV")
    _common(p)
    p.add_argument("--n-samples", type=int, default=600)
    return parser


def _config(args) -> ExperimentConfig:
    values: dict = {}
    if getattr(args, "config", None):
        values.update(read_config_file(args.config))
    flags = {k: v for k, v in vars(args).items() if k not in ("verbose",)}
    values.update(flags)
    return build_config(values)


def _device(cfg: ExperimentConfig, state: Path | None):
    if state is not None:
        return load_map(state)
    return new_crossbar(8, 8, cfg.variability, cfg.subseeds()["device"])


def _write_json(doc, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(_finite(doc), indent=2, sort_keys=True) + "\n")
    return path


def _finite(obj):
    """Replace NaN/inf floats by None so partial reports stay valid JSON."""
    if isinstance(obj, float):
        return obj if math.isfinite(obj) else None
    if isinstance(obj, dict):
        return {k: _finite(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_finite(v) for v in obj]
    return obj


def read_targets_csv(path: Path) -> np.ndarray:
    rows = []
    with Path(path).open(newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row:
                continue
            try:
                rows.append([float(c) if c.strip() else math.nan for c in row])
            except ValueError:
                raise ConfigurationError(f"{path}:{lineno}: non-numeric target") from None
    if not rows or len({len(r) for r in rows}) != 1:
        raise ConfigurationError(f"{path}: targets must be a non-empty rectangular grid")
    return np.array(rows)


# --- subcommands --------------------------------------------------------------------------------


def cmd_simulate_serve(args, cfg):
    model = _device(cfg, args.state)
    if args.listen:
        host, _, port = args.listen.rpartition(":")
        if not port.isdigit():
            raise ConfigurationError(f"--listen expects HOST:PORT, got {args.listen!r}")
        with protocol.CrossbarServer(model, host or "127.0.0.1", int(port)) as server:
            h, p = server.address
            print(f"listening on {h}:{p}", file=sys.stderr, flush=True)
            try:
                server.serve_forever()
            except KeyboardInterrupt:
                pass
    else:
        protocol.serve(model, sys.stdin.buffer, sys.stdout.buffer)
    return EXIT_OK


def cmd_program(args, cfg):
    targets = read_targets_csv(args.targets)
    model = None if cfg.backend.startswith("tcp:") else _device(cfg, args.state)
    out = cfg.out
    out.mkdir(parents=True, exist_ok=True)
    with open_backend(cfg.backend, model, *targets.shape) as h:
        try:
            report = program_array(h, targets, cfg.vipi, cfg.method)
        except ProgrammingAborted as exc:
            _write_json(exc.report.to_dict(), out / "program_report_partial.json")
            raise
    _write_json(report.to_dict(), out / "program_report.json")
    report.write_trace_csv(out / "program_trace.csv")
    if model is not None:
        save_map(model, out / "map.csv")
    if cfg.figures:
        from . import plotting
        plotting.plot_programming(report, out / "program_errors.png")
    print(f"{report.method}: {len(report.converged_cells)}/{report.n_programmed} cells converged, "
          f"E_tot={report.e_tot:.4f}")
    return EXIT_OK


def cmd_read_map(args, cfg):
    if cfg.backend.startswith("tcp:"):
        # estimate through the wire: a one-hot input reads one crossbar row
        with open_backend(cfg.backend) as h:
            weights = np.array([h.infer(np.eye(h.rows)[x]) for x in range(h.rows)])
    else:
        weights = _device(cfg, args.state).weights()
    w = csv.writer(sys.stdout, lineterminator="\n")
    for row in weights:
        w.writerow([f"{v:.6f}" for v in row])
    return EXIT_OK


def cmd_digits(args, cfg):
    methods = ("vipi", "pi") if args.compare else (cfg.method.value,)
    reports = {}
    for m in methods:
        run_cfg = dataclasses.replace(cfg, method=type(cfg.method)(m))
        rep = pipelines.run_digits_experiment(run_cfg)
        rep.save(cfg.out / m if args.compare else cfg.out, cfg.figures)
        reports[m] = rep
        print(f"{m}: best accuracy {rep.best_accuracy:.4f} at t={rep.best_threshold:.2f} "
              f"(software {rep.software_best_accuracy:.4f}), E_tot={rep.programming.e_tot:.4f}, "
              f"converged {rep.programming.convergence_fraction:.3f}")
    if args.compare:
        with (cfg.out / "digits_compare.csv").open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["threshold", "vipi_accuracy", "pi_accuracy", "software_accuracy"])
            v, p = reports["vipi"], reports["pi"]
            for row in zip(v.thresholds, v.accuracy, p.accuracy, v.software_accuracy):
                w.writerow([f"{row[0]:.2f}"] + [repr(float(x)) for x in row[1:]])
        if cfg.figures:
            from . import plotting
            plotting.plot_threshold_sweep({k.upper(): r for k, r in reports.items()},
                                          cfg.out / "digits_compare.png")
        gap = reports["vipi"].best_accuracy - reports["pi"].best_accuracy
        print(f"VIPI - PI best accuracy: {100 * gap:+.1f} points")
    return EXIT_OK


def cmd_robot(args, cfg):
    rep = pipelines.run_robot_experiment(cfg)
    rep.save(cfg.out, cfg.figures)
    print(f"RMSE software {rep.rmse_software:.5f}, chip without fine-tune "
          f"{rep.rmse_no_finetune:.5f}, chip fine-tuned {rep.rmse_finetuned:.5f}")
    return EXIT_OK


def cmd_gen_data(args, cfg):
    path = pipelines.generate_dataset_file(cfg.seed, args.n_samples, cfg.out / "trajectory.csv")
    print(path)
    return EXIT_OK


COMMANDS = {
    "simulate-serve": cmd_simulate_serve,
    "program": cmd_program,
    "read-map": cmd_read_map,
    "digits": cmd_digits,
    "robot": cmd_robot,
    "gen-data": cmd_gen_data,
}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = _config(args)
        return COMMANDS[args.command](args, cfg)
    except ConfigurationError as exc:
        print(f"memxbar: configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except pipelines.ExperimentAborted as exc:
        out = getattr(args, "out", None) or Path("out")
        path = _write_json(exc.partial, Path(out) / f"{args.command}_partial_report.json")
        print(f"memxbar: {exc} (partial report: {path})", file=sys.stderr)
        return EXIT_FAIL
    except (MemxbarError, OSError) as exc:
        print(f"memxbar: error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
