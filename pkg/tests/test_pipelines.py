import csv
import json

import numpy as np
import pytest

from memxbar import pipelines
from memxbar.config import ExperimentConfig, build_config, read_config_file
from memxbar.data import load_digits_csv, pca_fit, split_indices
from memxbar.device import VariabilitySpec
from memxbar.errors import ConfigurationError, DegenerateDataError
from memxbar.programming import Method


@pytest.fixture(scope="module")
def digits_report():
    return pipelines.run_digits_experiment(ExperimentConfig(seed=2))


@pytest.fixture(scope="module")
def robot_report():
    return pipelines.run_robot_experiment(ExperimentConfig(seed=1))


def test_threshold_sweep_rule():
    p1 = np.array([0.2, 0.5, 0.8])
    y = np.array([0, 1, 1])
    acc = pipelines.threshold_sweep(p1, y, [0.0, 0.5, 1.0])
    # at t = 0.5 the tie p1 == t is classified as 0
    assert acc.tolist() == [2 / 3, 2 / 3, 1 / 3]


def test_digits_report_contents(digits_report):
    r = digits_report
    assert len(r.thresholds) == len(r.accuracy) == 101
    assert r.thresholds[0] == 0.0 and r.thresholds[-1] == 1.0
    assert np.all((r.accuracy >= 0) & (r.accuracy <= 1))
    assert r.n_train + r.n_test == 360 and r.n_train == 252
    assert r.programming.n_programmed == 16
    assert r.model.phi.min() >= 0 and r.model.phi.max() <= 1


def test_digits_sweep_endpoints_are_majority_rates(digits_report):
    r = digits_report
    _, labels = load_digits_csv()
    _, test_idx = split_indices(len(labels), 0.7, ExperimentConfig(seed=2).subseeds()["split"])
    frac1 = labels[test_idx].mean()
    assert r.accuracy[0] == pytest.approx(frac1)
    assert r.accuracy[-1] == pytest.approx(1 - frac1)


def test_bias_finetune_lowers_training_loss(digits_report):
    assert digits_report.loss_post_finetune <= digits_report.loss_pre_finetune


def test_leakage_guard():
    cfg = ExperimentConfig(seed=5)
    train, test, basis, scaler = pipelines.prepare_digits(cfg)
    pixels, _ = load_digits_csv()
    tr, _ = split_indices(len(pixels), cfg.split, cfg.subseeds()["split"])
    oracle = pca_fit(pixels[tr], 8)
    assert np.allclose(basis.components, oracle.components, atol=1e-10)
    assert not np.allclose(basis.mean, pca_fit(pixels, 8).mean)
    assert scaler.lo == pytest.approx(oracle.project(pixels[tr]).min())
    assert scaler.hi == pytest.approx(oracle.project(pixels[tr]).max())


def test_split_determinism():
    a = pipelines.prepare_digits(ExperimentConfig(seed=9))[0]
    b = pipelines.prepare_digits(ExperimentConfig(seed=9))[0]
    assert np.array_equal(a.inputs, b.inputs)


def test_degenerate_split():
    with pytest.raises(DegenerateDataError):
        pipelines.run_digits_experiment(ExperimentConfig(split=0.999))


def test_ideal_device_matches_software():
    r = pipelines.run_digits_experiment(ExperimentConfig(seed=1, variability=VariabilitySpec.ideal()))
    assert r.best_accuracy >= r.software_best_accuracy - 0.02


def test_digits_save(tmp_path, digits_report):
    paths = digits_report.save(tmp_path, figures=True)
    doc = json.loads(paths["report"].read_text())
    assert doc["best_accuracy"] == digits_report.best_accuracy
    assert doc["model"]["constraint_box"] == [0.0, 1.0]
    assert len(doc["model"]["phi"]) == 2 and len(doc["model"]["phi"][0]) == 8
    rows = list(csv.reader(paths["sweep"].open()))
    assert rows[0] == ["threshold", "accuracy", "software_accuracy"] and len(rows) == 102
    assert paths["figure"].stat().st_size > 0


def test_robot_report(robot_report, tmp_path):
    r = robot_report
    assert r.rmse_finetuned < r.rmse_no_finetune
    assert r.rmse_finetuned <= 1.25 * r.rmse_software
    paths = r.save(tmp_path, figures=False)
    rows = list(csv.reader(paths["predictions"].open()))
    assert rows[0] == ["t", "v_true", "v_pred", "steer_true", "steer_pred"]
    assert len(rows) - 1 == len(r.truth) == 180
    doc = json.loads(paths["report"].read_text())
    assert set(doc["rmse_per_channel"]["chip_finetuned"]) == {"v_cmd", "steer_cmd"}
    assert "figure" not in paths


def test_robot_software_model_beats_mean(robot_report):
    spread = np.sqrt(np.mean((robot_report.truth - robot_report.truth.mean(0)) ** 2))
    assert 2 * robot_report.rmse_software <= spread


def test_robot_ideal_device_tracks_software():
    cfg = ExperimentConfig(seed=0, variability=VariabilitySpec.ideal())
    r = pipelines.run_robot_experiment(cfg)
    assert r.rmse_finetuned <= 1.05 * r.rmse_software


def test_backend_failure_gives_partial_report():
    with pytest.raises(pipelines.ExperimentAborted) as info:
        pipelines.run_digits_experiment(ExperimentConfig(backend="tcp:127.0.0.1:1"))
    assert "model" in info.value.partial and "programming" not in info.value.partial


def test_reports_are_deterministic(tmp_path):
    a = pipelines.run_digits_experiment(ExperimentConfig(seed=3)).to_dict()
    b = pipelines.run_digits_experiment(ExperimentConfig(seed=3)).to_dict()
    a.pop("created_at"), b.pop("created_at")
    assert json.dumps(a, sort_keys=True) == json.dumps(b, sort_keys=True)


# --- config ---------------------------------------------------------------------------------------


def test_config_file_and_overrides(tmp_path, monkeypatch):
    f = tmp_path / "exp.cfg"
    f.write_text("# comment\nseed = 4\nmethod=PI\nk_p=3.5\nadc_bits=none\nv_th_clip_hi=0.3\n")
    values = read_config_file(f)
    cfg = build_config({**values, "seed": 8})
    assert cfg.seed == 8 and cfg.method is Method.PI and cfg.vipi.k_p == 3.5
    assert cfg.variability.adc_bits is None and cfg.variability.v_th_clip == (0.06, 0.3)


def test_seed_environment_fallback(monkeypatch):
    monkeypatch.setenv("MENA_SEED", "17")
    assert build_config({}).seed == 17
    assert build_config({"seed": 2}).seed == 2


@pytest.mark.parametrize("values", [{"bogus": 1}, {"split": 1.0}, {"method": "magic"},
                                    {"n_iter": "x"}, {"dataset": "/no/such/file.csv"}])
def test_bad_config_rejected(values):
    with pytest.raises(ConfigurationError):
        build_config(values)


def test_subseeds_are_distinct_and_stable():
    s = ExperimentConfig(seed=1).subseeds()
    assert len(set(s.values())) == 4 and s == ExperimentConfig(seed=1).subseeds()
