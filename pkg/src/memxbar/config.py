"""Experiment configuration and the flat ``key=value`` config-file format."""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .device import VariabilitySpec
from .errors import ConfigurationError
from .programming import Method, VipiConfig

SEED_ENV = "MENA_SEED"

_VARIABILITY_KEYS = {
    "v_th_mean": float, "v_th_sd": float, "v_th_clip_lo": float, "v_th_clip_hi": float,
    "k_mean": float, "k_sd": float, "read_noise_sd": float, "adc_bits": str,
}
_VIPI_KEYS = {f.name: f.type for f in dataclasses.fields(VipiConfig)}


@dataclass
class ExperimentConfig:
    seed: int = 0
    variability: VariabilitySpec = field(default_factory=VariabilitySpec)
    vipi: VipiConfig = field(default_factory=VipiConfig)
    method: Method = Method.VIPI
    split: float = 0.7
    backend: str = "direct"
    dataset: Path | None = None
    out: Path = Path("out")
    eta: float | None = None
    n_step: int | None = None
    n_samples: int = 600
    figures: bool = True

    def validate(self) -> None:
        if not 0 < self.split < 1:
            raise ConfigurationError(f"split must be in (0, 1), got {self.split}")
        self.variability.validate()
        self.vipi.validate()
        if self.dataset is not None and not Path(self.dataset).is_file():
            raise ConfigurationError(f"dataset {self.dataset} is not readable")

    def subseeds(self) -> dict[str, int]:
        """Independent integer seeds for each random consumer, derived from ``seed``."""
        names = ("split", "device", "train", "finetune")
        state = np.random.SeedSequence(self.seed).generate_state(len(names))
        return {name: int(s) for name, s in zip(names, state)}

    def summary(self) -> dict:
        spec = self.variability
        return {
            "seed": self.seed,
            "method": self.method.value,
            "split": self.split,
            "backend": self.backend,
            "dataset": str(self.dataset) if self.dataset else None,
            "variability": dataclasses.asdict(spec),
            "vipi": dataclasses.asdict(self.vipi),
            "eta": self.eta,
            "n_step": self.n_step,
            "n_samples": self.n_samples,
        }


def read_config_file(path) -> dict[str, str]:
    """Parse ``key=value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"{path}:{lineno}: expected key=value")
        key, value = line.split("=", 1)
        out[key.strip().replace("-", "_")] = value.strip()
    return out


def _coerce(key, typ, value):
    try:
        if typ in (int, "int"):
            return int(value)
        if typ in (float, "float"):
            return float(value)
        return value
    except ValueError:
        raise ConfigurationError(f"{key}: cannot parse {value!r}") from None


def build_config(values: dict[str, object]) -> ExperimentConfig:
    """Build a config from a flat mapping (config file merged with CLI flags).

    Unknown keys are rejected.  ``seed`` falls back to ``$MENA_SEED`` and then 0.
    """
    values = {k: v for k, v in values.items() if v is not None}
    cfg = ExperimentConfig()
    var = dataclasses.asdict(cfg.variability)
    var_clip = list(var.pop("v_th_clip"))
    vipi = dataclasses.asdict(cfg.vipi)
    for key, value in values.items():
        if key in _VARIABILITY_KEYS:
            if key == "v_th_clip_lo":
                var_clip[0] = float(value)
            elif key == "v_th_clip_hi":
                var_clip[1] = float(value)
            elif key == "adc_bits":
                var["adc_bits"] = None if str(value).lower() in ("none", "inf") else int(value)
            else:
                var[key] = float(value)
        elif key in _VIPI_KEYS:
            vipi[key] = _coerce(key, "int" if key in ("n_c", "n_iter", "n_avg") else "float", value)
        elif key == "seed":
            cfg.seed = _coerce(key, int, value)
        elif key == "method":
            try:
                cfg.method = Method(str(value).lower())
            except ValueError:
                raise ConfigurationError(f"method must be vipi or pi, got {value!r}") from None
        elif key == "split":
            cfg.split = _coerce(key, float, value)
        elif key == "backend":
            cfg.backend = str(value)
        elif key == "dataset":
            cfg.dataset = Path(value)
        elif key == "out":
            cfg.out = Path(value)
        elif key == "eta":
            cfg.eta = _coerce(key, float, value)
        elif key == "n_step":
            cfg.n_step = _coerce(key, int, value)
        elif key == "n_samples":
            cfg.n_samples = _coerce(key, int, value)
        elif key == "figures":
            cfg.figures = str(value).lower() not in ("0", "false", "no", "off")
        elif key in ("config", "command", "targets", "listen", "state", "compare"):
            continue
        else:
            raise ConfigurationError(f"unknown config key {key!r}")
    if "seed" not in values and os.environ.get(SEED_ENV):
        cfg.seed = _coerce(SEED_ENV, int, os.environ[SEED_ENV])
    cfg.variability = VariabilitySpec(v_th_clip=tuple(var_clip), **var)
    cfg.vipi = VipiConfig(**vipi)
    cfg.validate()
    return cfg
