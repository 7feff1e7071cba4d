"""End-to-end experiments: binary digit classification and robot-command regression.

Both follow the same arc: preprocess on the training split only, train in
software with the crossbar layer boxed into [0, 1], program that layer onto
a (simulated or remote) crossbar, fine-tune downstream parameters with the
chip in the loop, and evaluate on the held-out split.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .backend import Backend, open_backend
from .config import ExperimentConfig
from .data import (MinMaxScaler, generate_trajectory_dataset, load_digits_csv, load_trajectory_csv,
                   pca_fit, split_indices, write_trajectory_csv)
from .device import new_crossbar
from .errors import DegenerateDataError, MemxbarError
from .programming import ArrayReport, ProgrammingAborted, program_array
from .training import (LabeledDataset, LinearModel, MlpModel, chip_outputs, cross_entropy,
                       finetune_bias_chip_in_loop, finetune_layer2_chip_in_loop, one_hot, softmax,
                       train_constrained_linear, train_mlp_software)

log = logging.getLogger(__name__)

THRESHOLDS = np.round(np.arange(101) * 0.01, 2)
DIGITS_ETA, DIGITS_STEPS = 0.05, 1000
ROBOT_ETA, ROBOT_STEPS = 0.05, 10000


class ExperimentAborted(MemxbarError):
    """An experiment stage failed; ``partial`` holds everything computed so far."""

    def __init__(self, message, partial: dict):
        super().__init__(message)
        self.partial = partial


def _timestamp() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _dump_json(doc: dict, path: Path) -> Path:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True, allow_nan=False) + "\n")
    return path


def _matrix(a) -> list:
    return np.asarray(a, dtype=float).tolist()


def threshold_sweep(p1, labels, thresholds=THRESHOLDS) -> np.ndarray:
    """Accuracy of ``class 1 iff p1 > t`` for every threshold (ties go to class 0)."""
    p1 = np.asarray(p1, dtype=float)[None, :]
    pred = (p1 > np.asarray(thresholds)[:, None]).astype(int)
    return (pred == np.asarray(labels)[None, :]).mean(axis=1)


def _make_backend(cfg: ExperimentConfig, rows=8, cols=8) -> Backend:
    model = None
    if not cfg.backend.startswith("tcp:"):
        model = new_crossbar(rows, cols, cfg.variability, cfg.subseeds()["device"])
    return open_backend(cfg.backend, model, rows, cols)


def _program(h, targets, cfg, partial):
    try:
        return program_array(h, targets, cfg.vipi, cfg.method)
    except ProgrammingAborted as exc:
        partial["programming"] = exc.report.to_dict()
        raise ExperimentAborted(str(exc), partial) from exc


# --- digits -----------------------------------------------------------------------------------


@dataclass
class DigitsReport:
    config: dict
    thresholds: np.ndarray
    accuracy: np.ndarray
    software_accuracy: np.ndarray
    model: LinearModel
    bias_init: np.ndarray
    bias: np.ndarray
    loss_pre_finetune: float
    loss_post_finetune: float
    programming: ArrayReport
    n_train: int
    n_test: int
    pca_variances: np.ndarray
    scaler: dict
    created_at: str = field(default_factory=_timestamp)

    @property
    def best_accuracy(self) -> float:
        return float(self.accuracy.max())

    @property
    def best_threshold(self) -> float:
        return float(self.thresholds[int(np.argmax(self.accuracy))])

    @property
    def software_best_accuracy(self) -> float:
        return float(self.software_accuracy.max())

    def to_dict(self) -> dict:
        prog = self.programming
        return {
            "experiment": "digits",
            "created_at": self.created_at,
            "config": self.config,
            "n_train": self.n_train,
            "n_test": self.n_test,
            "best_accuracy": self.best_accuracy,
            "best_threshold": self.best_threshold,
            "software_best_accuracy": self.software_best_accuracy,
            "e_tot": prog.e_tot,
            "convergence_fraction": prog.convergence_fraction,
            "loss_pre_finetune": self.loss_pre_finetune,
            "loss_post_finetune": self.loss_post_finetune,
            "bias_init": _matrix(self.bias_init),
            "bias": _matrix(self.bias),
            "sweep": {"thresholds": _matrix(self.thresholds), "accuracy": _matrix(self.accuracy),
                      "software_accuracy": _matrix(self.software_accuracy)},
            "model": linear_model_to_dict(self.model, self.config.get("seed")),
            "pca_variances": _matrix(self.pca_variances),
            "scaler": self.scaler,
            "programming": {k: v for k, v in prog.to_dict().items() if k not in ("cells", "repairs")},
        }

    def save(self, out_dir, figures: bool = True) -> dict[str, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {"report": _dump_json(self.to_dict(), out / "digits_report.json")}
        sweep = out / "digits_sweep.csv"
        with sweep.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["threshold", "accuracy", "software_accuracy"])
            for t, a, s in zip(self.thresholds, self.accuracy, self.software_accuracy):
                w.writerow([f"{t:.2f}", repr(float(a)), repr(float(s))])
        paths["sweep"] = sweep
        paths["traces"] = self.programming.write_trace_csv(out / "digits_program_trace.csv")
        if figures:
            from . import plotting
            paths["figure"] = plotting.plot_threshold_sweep(
                {self.config["method"]: self}, out / "digits_sweep.png")
        return paths


def linear_model_to_dict(model: LinearModel, seed=None) -> dict:
    return {
        "kind": "linear_softmax",
        "dims": list(model.phi.shape),
        "constraint_box": [0.0, 1.0],
        "phi": _matrix(model.phi),
        "bias": _matrix(model.bias),
        "training_seed": seed,
        "loss": model.loss,
        "kkt_residual": model.kkt_residual,
        "iterations": model.iterations,
        "loss_trace": [float(v) for v in model.loss_trace],
    }


def prepare_digits(cfg: ExperimentConfig):
    """Load, split, project and rescale; every fit sees training rows only."""
    pixels, labels = load_digits_csv(cfg.dataset)
    if len(np.unique(labels)) < 2:
        raise DegenerateDataError("digits data must contain both classes 0 and 1")
    train_idx, test_idx = split_indices(len(pixels), cfg.split, cfg.subseeds()["split"])
    if len(test_idx) < 2 or len(train_idx) < 8:
        raise DegenerateDataError("split leaves too few rows for training or testing")
    basis = pca_fit(pixels[train_idx], 8)
    scaler = MinMaxScaler().fit(basis.project(pixels[train_idx]))
    x_train = scaler.transform(basis.project(pixels[train_idx]))
    x_test = scaler.transform(basis.project(pixels[test_idx]))
    train = LabeledDataset(x_train, one_hot(labels[train_idx], 2))
    test = LabeledDataset(x_test, one_hot(labels[test_idx], 2))
    return train, test, basis, scaler


def run_digits_experiment(cfg: ExperimentConfig) -> DigitsReport:
    cfg.validate()
    seeds = cfg.subseeds()
    partial: dict = {"experiment": "digits", "config": cfg.summary()}
    train, test, basis, scaler = prepare_digits(cfg)
    model = train_constrained_linear(train, (2, 8))
    partial["model"] = linear_model_to_dict(model, cfg.seed)
    y_test = test.labels[:, 1].astype(int)
    software_acc = threshold_sweep(model.predict_proba(test.inputs)[:, 1], y_test)

    eta = DIGITS_ETA if cfg.eta is None else cfg.eta
    n_step = DIGITS_STEPS if cfg.n_step is None else cfg.n_step
    try:
        with _make_backend(cfg) as h:
            prog = _program(h, model.crossbar_targets(h.rows, h.cols), cfg, partial)
            partial["programming"] = prog.to_dict()
            bias_init = np.random.default_rng(seeds["finetune"]).standard_normal(2)
            bias = finetune_bias_chip_in_loop(h, train, eta, n_step, seeds["finetune"])
            out_train = chip_outputs(h, train.inputs, 2)
            out_test = chip_outputs(h, test.inputs, 2)
    except ExperimentAborted:
        raise
    except MemxbarError as exc:
        raise ExperimentAborted(f"digits experiment failed: {exc}", partial) from exc

    loss_pre = cross_entropy(softmax(out_train + bias_init), train.labels)
    loss_post = cross_entropy(softmax(out_train + bias), train.labels)
    accuracy = threshold_sweep(softmax(out_test + bias)[:, 1], y_test)
    return DigitsReport(cfg.summary(), THRESHOLDS.copy(), accuracy, software_acc, model,
                        bias_init, bias, loss_pre, loss_post, prog, len(train), len(test),
                        basis.variances, scaler.to_dict())


# --- robot ------------------------------------------------------------------------------------


def rmse(pred, truth, axis=None):
    return np.sqrt(np.mean((np.asarray(pred) - np.asarray(truth)) ** 2, axis=axis))


@dataclass
class RobotReport:
    config: dict
    times: np.ndarray
    truth: np.ndarray  # (n_test, 2)
    pred_software: np.ndarray
    pred_chip_raw: np.ndarray  # software layer2 on the programmed crossbar
    pred_chip: np.ndarray  # after chip-in-the-loop fine-tuning
    model: MlpModel
    layer2: np.ndarray
    bias2: np.ndarray
    programming: ArrayReport
    n_train: int
    scaler: dict
    created_at: str = field(default_factory=_timestamp)

    @property
    def rmse_software(self) -> float:
        return float(rmse(self.pred_software, self.truth))

    @property
    def rmse_no_finetune(self) -> float:
        return float(rmse(self.pred_chip_raw, self.truth))

    @property
    def rmse_finetuned(self) -> float:
        return float(rmse(self.pred_chip, self.truth))

    def to_dict(self) -> dict:
        prog = self.programming
        per = {name: _matrix(rmse(p, self.truth, axis=0)) for name, p in
               (("software", self.pred_software), ("chip_no_finetune", self.pred_chip_raw),
                ("chip_finetuned", self.pred_chip))}
        return {
            "experiment": "robot",
            "created_at": self.created_at,
            "config": self.config,
            "n_train": self.n_train,
            "n_test": len(self.truth),
            "rmse_software": self.rmse_software,
            "rmse_no_finetune": self.rmse_no_finetune,
            "rmse_finetuned": self.rmse_finetuned,
            "rmse_per_channel": {k: dict(zip(("v_cmd", "steer_cmd"), v)) for k, v in per.items()},
            "e_tot": prog.e_tot,
            "convergence_fraction": prog.convergence_fraction,
            "model": {
                "kind": "mlp_relu",
                "hidden": self.model.hidden,
                "crossbar_layer": "layer1",
                "constraint_box": [0.0, 1.0],
                "layer1": _matrix(self.model.layer1), "bias1": _matrix(self.model.bias1),
                "layer2_software": _matrix(self.model.layer2),
                "bias2_software": _matrix(self.model.bias2),
                "layer2": _matrix(self.layer2), "bias2": _matrix(self.bias2),
                "training_seed": self.config.get("seed"),
                "loss_trace": [float(v) for v in self.model.loss_trace],
            },
            "scaler": self.scaler,
            "programming": {k: v for k, v in prog.to_dict().items() if k not in ("cells", "repairs")},
        }

    def save(self, out_dir, figures: bool = True) -> dict[str, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {"report": _dump_json(self.to_dict(), out / "robot_report.json")}
        pred = out / "robot_predictions.csv"
        with pred.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t", "v_true", "v_pred", "steer_true", "steer_pred"])
            for t, tr, pr in zip(self.times, self.truth, self.pred_chip):
                w.writerow([repr(float(t)), repr(float(tr[0])), repr(float(pr[0])),
                            repr(float(tr[1])), repr(float(pr[1]))])
        paths["predictions"] = pred
        paths["traces"] = self.programming.write_trace_csv(out / "robot_program_trace.csv")
        if figures:
            from . import plotting
            paths["figure"] = plotting.plot_robot_commands(self, out / "robot_commands.png")
        return paths


def load_robot_table(cfg: ExperimentConfig) -> np.ndarray:
    if cfg.dataset is not None:
        return load_trajectory_csv(cfg.dataset)
    return generate_trajectory_dataset(cfg.seed, cfg.n_samples)


def run_robot_experiment(cfg: ExperimentConfig, table: np.ndarray | None = None) -> RobotReport:
    cfg.validate()
    seeds = cfg.subseeds()
    partial: dict = {"experiment": "robot", "config": cfg.summary()}
    table = load_robot_table(cfg) if table is None else np.asarray(table, dtype=float)
    train_idx, test_idx = split_indices(len(table), cfg.split, seeds["split"])
    scaler = MinMaxScaler(per_feature=True).fit(table[train_idx, 1:4])
    inputs = scaler.transform(table[:, 1:4])
    targets = table[:, 4:6]
    train = LabeledDataset(inputs[train_idx], targets[train_idx], "regression")
    test = LabeledDataset(inputs[test_idx], targets[test_idx], "regression")

    model = train_mlp_software(train, hidden=8, seed=seeds["train"])
    eta = ROBOT_ETA if cfg.eta is None else cfg.eta
    n_step = ROBOT_STEPS if cfg.n_step is None else cfg.n_step
    try:
        with _make_backend(cfg) as h:
            prog = _program(h, model.crossbar_targets(h.rows, h.cols), cfg, partial)
            partial["programming"] = prog.to_dict()
            layer2, bias2 = finetune_layer2_chip_in_loop(h, model, train, eta, n_step,
                                                         seeds["finetune"], schedule="linear")
            mac_test = chip_outputs(h, test.inputs, model.hidden)
    except ExperimentAborted:
        raise
    except MemxbarError as exc:
        raise ExperimentAborted(f"robot experiment failed: {exc}", partial) from exc

    hidden = np.maximum(mac_test + model.bias1, 0.0)
    return RobotReport(
        cfg.summary(), table[test_idx, 0], test.labels, model.predict(test.inputs),
        model.predict_from_mac(mac_test), hidden @ layer2.T + bias2, model, layer2, bias2,
        prog, len(train), scaler.to_dict())


def generate_dataset_file(seed: int, n: int, path) -> Path:
    return write_trajectory_csv(generate_trajectory_dataset(seed, n), path)
