"""Closed-loop conductance programming.

The controller reads a cell, computes the weight error, and issues a
pulse whose signed duration is a PI function of that error.  In the
voltage-incremental variant the pulse amplitude grows by ``delta`` every
``n_c`` iterations, so devices with a high switching threshold eventually
respond; the plain PI baseline keeps the amplitude fixed.
"""

from __future__ import annotations

import csv
import enum
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .backend import Backend
from .errors import ConfigurationError, MemxbarError, RangeError


class Method(enum.Enum):
    VIPI = "vipi"
    PI = "pi"


@dataclass(frozen=True)
class VipiConfig:
    k_p: float = 2.0
    k_i: float = 0.1
    epsilon: float = 0.02
    delta: float = 0.02
    n_c: int = 10
    n_iter: int = 200
    e_max: float = 1.0
    v_delta_init: float = 0.08
    n_avg: int = 4
    v_delta_max: float = 0.50

    def validate(self) -> None:
        for name in ("k_p", "k_i", "epsilon", "delta", "e_max", "v_delta_init", "v_delta_max"):
            if not getattr(self, name) > 0:
                raise ConfigurationError(f"{name} must be > 0")
        for name in ("n_c", "n_iter", "n_avg"):
            value = getattr(self, name)
            if int(value) != value or value < 1:
                raise ConfigurationError(f"{name} must be a positive integer")
        if self.v_delta_init > self.v_delta_max:
            raise ConfigurationError("v_delta_init exceeds v_delta_max")

    def amplitude(self, writes_done: int, incremental: bool = True) -> float:
        """Pulse amplitude after ``writes_done`` completed iterations."""
        if not incremental:
            return self.v_delta_init
        return min(self.v_delta_init + self.delta * (writes_done // self.n_c), self.v_delta_max)


@dataclass
class ProgramReport:
    x: int
    y: int
    target: float
    achieved: float
    iterations: int
    converged: bool
    final_v_delta: float
    error_trace: list[float] = field(default_factory=list)
    c_pulse_trace: list[float] = field(default_factory=list)
    v_delta_trace: list[float] = field(default_factory=list)

    @property
    def writes(self) -> int:
        return len(self.c_pulse_trace)


def read_weight(h: Backend, x: int, y: int, n_avg: int = 4) -> float:
    """Mean of ``n_avg`` one-hot reads of cell (x, y)."""
    if int(n_avg) != n_avg or n_avg < 1:
        raise ConfigurationError("n_avg must be a positive integer")
    if not (0 <= x < h.rows and 0 <= y < h.cols):
        raise RangeError(f"cell ({x}, {y}) outside {h.rows}x{h.cols} grid")
    probe = np.zeros(h.rows)
    probe[x] = 1.0
    return float(np.mean([h.infer(probe)[y] for _ in range(n_avg)]))


def _program_cell(h, x, y, target, cfg, incremental):
    cfg.validate()
    if not 0.0 <= target <= 1.0:
        raise RangeError(f"target {target} outside [0, 1]")
    report = ProgramReport(x, y, float(target), math.nan, 0, False, cfg.v_delta_init)
    e_acc = 0.0
    v_delta = cfg.v_delta_init
    for i in range(1, cfg.n_iter + 1):
        phi = read_weight(h, x, y, cfg.n_avg)
        err = target - phi
        report.achieved = phi
        report.iterations = i
        report.error_trace.append(err)
        if abs(err) < cfg.epsilon:
            report.converged = True
            break
        e_acc = max(min(e_acc + err, cfg.e_max), -cfg.e_max)
        c_pulse = cfg.k_p * err + cfg.k_i * e_acc
        h.write_weight(x, y, c_pulse, v_delta)
        report.c_pulse_trace.append(c_pulse)
        report.v_delta_trace.append(v_delta)
        v_delta = cfg.amplitude(i, incremental)
    report.final_v_delta = v_delta
    return report


def vipi_program_cell(h: Backend, x: int, y: int, target: float,
                      cfg: VipiConfig = VipiConfig()) -> ProgramReport:
    """Voltage-incremental PI programming of one cell.

    Non-convergence is reported through ``ProgramReport.converged``; it is
    never raised.
    """
    return _program_cell(h, x, y, target, cfg, incremental=True)


def pi_program_cell(h: Backend, x: int, y: int, target: float,
                    cfg: VipiConfig = VipiConfig()) -> ProgramReport:
    """Fixed-amplitude PI baseline (amplitude stays at ``cfg.v_delta_init``)."""
    return _program_cell(h, x, y, target, cfg, incremental=False)


@dataclass
class ArrayReport:
    method: str
    cells: list[ProgramReport]
    repairs: list[ProgramReport]
    targets: np.ndarray
    verified: np.ndarray
    e_tot_first_pass: float
    e_tot: float
    complete: bool = True

    def final_reports(self) -> dict[tuple[int, int], ProgramReport]:
        out = {(r.x, r.y): r for r in self.cells}
        out.update({(r.x, r.y): r for r in self.repairs})
        return out

    @property
    def converged_cells(self) -> set[tuple[int, int]]:
        return {k for k, r in self.final_reports().items() if r.converged}

    @property
    def n_programmed(self) -> int:
        return int(np.sum(~np.isnan(self.targets)))

    @property
    def convergence_fraction(self) -> float:
        n = self.n_programmed
        return len(self.converged_cells) / n if n else 1.0

    def to_dict(self) -> dict:
        def nan_to_none(a):
            return [[None if math.isnan(v) else float(v) for v in row] for row in a]

        return {
            "method": self.method,
            "complete": self.complete,
            "n_programmed": self.n_programmed,
            "convergence_fraction": self.convergence_fraction,
            "e_tot": self.e_tot,
            "e_tot_first_pass": self.e_tot_first_pass,
            "targets": nan_to_none(self.targets),
            "verified": nan_to_none(self.verified),
            "cells": [asdict(r) for r in self.cells],
            "repairs": [asdict(r) for r in self.repairs],
        }

    def write_json(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        return path

    def write_trace_csv(self, path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["x", "y", "pass", "iteration", "error", "c_pulse", "v_delta"])
            for pass_no, reports in ((1, self.cells), (2, self.repairs)):
                for r in reports:
                    for i, err in enumerate(r.error_trace):
                        c = r.c_pulse_trace[i] if i < r.writes else ""
                        v = r.v_delta_trace[i] if i < r.writes else ""
                        w.writerow([r.x, r.y, pass_no, i + 1, repr(err), repr(c) if c != "" else "",
                                    repr(v) if v != "" else ""])
        return path


class ProgrammingAborted(MemxbarError):
    """Backend failure mid-array; ``report`` holds what was done so far."""

    def __init__(self, message, report: ArrayReport):
        super().__init__(message)
        self.report = report


def _verify(h, targets, n_avg):
    verified = np.full(targets.shape, np.nan)
    for x, y in zip(*np.nonzero(~np.isnan(targets))):
        verified[x, y] = read_weight(h, int(x), int(y), n_avg)
    return verified


def program_array(h: Backend, targets, cfg: VipiConfig = VipiConfig(),
                  method: Method | str = Method.VIPI) -> ArrayReport:
    """Program every non-NaN entry of ``targets`` in row-major order.

    After the first pass all cells are verified; any whose error exceeds
    ``epsilon`` (typically from half-select disturb by later writes) is
    programmed once more, and the array is verified again.
    """
    method = Method(method)
    cfg.validate()
    targets = np.asarray(targets, dtype=float)
    if targets.shape != h.dims:
        raise ConfigurationError(f"targets shape {targets.shape} != crossbar {h.dims}")
    mask = ~np.isnan(targets)
    if np.any((targets[mask] < 0) | (targets[mask] > 1)):
        raise RangeError("targets must lie in [0, 1]")
    program = vipi_program_cell if method is Method.VIPI else pi_program_cell
    report = ArrayReport(method.value, [], [], targets, np.full(targets.shape, np.nan),
                         math.nan, math.nan, complete=False)
    try:
        for x, y in zip(*np.nonzero(mask)):
            report.cells.append(program(h, int(x), int(y), float(targets[x, y]), cfg))
        verified = _verify(h, targets, cfg.n_avg)
        report.verified = verified
        report.e_tot_first_pass = float(np.nansum(np.abs(verified - targets)))
        for x, y in zip(*np.nonzero(mask)):
            if abs(verified[x, y] - targets[x, y]) > cfg.epsilon:
                report.repairs.append(program(h, int(x), int(y), float(targets[x, y]), cfg))
        if report.repairs:
            verified = _verify(h, targets, cfg.n_avg)
            report.verified = verified
        report.e_tot = float(np.nansum(np.abs(verified - targets)))
    except MemxbarError as exc:
        if isinstance(exc, (ConfigurationError, RangeError)):
            raise
        raise ProgrammingAborted(f"array programming aborted: {exc}", report) from exc
    report.complete = True
    return report
