"""Behavioral model of a memristor crossbar.

Every device holds a normalized conductance ``weight`` in ``[w_min, w_max]``.
A voltage pulse whose magnitude exceeds the device switching threshold moves
the weight linearly in the overdrive ``|V| - v_th`` and the pulse duration;
anything at or below threshold leaves the device untouched.  Writes use the
half-select scheme: the addressed device sees the full amplitude, devices
sharing its row or column see half of it.

Reads compute the ideal multiply-accumulate ``o_j = sum_i w_ij x_i`` and
add Gaussian readout noise followed by ADC quantization.

All computation happens in weight units.  The physical mapping (1 uS to
100 uS) is kept only for reporting, see :func:`weight_to_siemens`.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, DimensionError, RangeError

READ_AMPLITUDE = 0.05  # volts, full-scale inference voltage
MIN_THRESHOLD = 0.06  # volts, lowest admissible switching threshold
PULSE_MIN_MS = 0.01
PULSE_MAX_MS = 10.0
G_MIN_SIEMENS = 1e-6
G_MAX_SIEMENS = 100e-6


def weight_to_siemens(weight):
    return G_MIN_SIEMENS + np.asarray(weight) * (G_MAX_SIEMENS - G_MIN_SIEMENS)


@dataclass(frozen=True)
class MemristorCell:
    weight: float
    v_th: float
    k_update: float
    w_min: float = 0.0
    w_max: float = 1.0


@dataclass(frozen=True)
class VariabilitySpec:
    """Device-to-device spread and readout imperfections.

    ``adc_bits=None`` means an ideal (unquantized) readout.
    """

    v_th_mean: float = 0.12
    v_th_sd: float = 0.05
    v_th_clip: tuple[float, float] = (0.06, 0.40)
    k_mean: float = 0.5
    k_sd: float = 0.05
    read_noise_sd: float = 0.002
    adc_bits: int | None = 12

    def validate(self) -> None:
        lo, hi = self.v_th_clip
        if lo < MIN_THRESHOLD:
            raise ConfigurationError(
                f"v_th_clip lower bound {lo} below {MIN_THRESHOLD} V (reads would disturb)")
        if hi < lo:
            raise ConfigurationError(f"v_th_clip is empty: {self.v_th_clip}")
        if min(self.v_th_sd, self.k_sd, self.read_noise_sd) < 0:
            raise ConfigurationError("standard deviations must be >= 0")
        if self.k_mean <= 0:
            raise ConfigurationError("k_mean must be > 0")
        if self.adc_bits is not None and self.adc_bits < 1:
            raise ConfigurationError("adc_bits must be >= 1")

    @classmethod
    def ideal(cls, v_th: float = MIN_THRESHOLD) -> "VariabilitySpec":
        """No spread, no read noise, no quantization."""
        return cls(v_th_mean=v_th, v_th_sd=0.0, v_th_clip=(MIN_THRESHOLD, max(v_th, 0.40)),
                   k_sd=0.0, read_noise_sd=0.0, adc_bits=None)


@dataclass(frozen=True)
class PulseCommand:
    x: int
    y: int
    c_pulse: float
    v_delta: float

    @property
    def polarity(self) -> int:
        # zero-length commands still carry a (positive) pulse after clamping
        return 1 if self.c_pulse >= 0 else -1

    @property
    def duration(self) -> float:
        return float(np.clip(abs(self.c_pulse), PULSE_MIN_MS, PULSE_MAX_MS))


def _overdrive_update(weight, v, v_th, k, duration, w_min, w_max):
    """Linear-overdrive law, valid for scalars and arrays alike."""
    mag = np.abs(v)
    step = np.where(mag > v_th, np.sign(v) * k * (mag - v_th) * duration, 0.0)
    return np.clip(weight + step, w_min, w_max)


def apply_pulse(cell: MemristorCell, v_applied: float, duration: float) -> MemristorCell:
    """Return the cell state after a pulse of ``v_applied`` volts for ``duration`` ms."""
    if duration < 0:
        raise RangeError(f"negative pulse duration {duration}")
    if abs(v_applied) <= cell.v_th:
        return cell
    w = _overdrive_update(cell.weight, v_applied, cell.v_th, cell.k_update, duration,
                          cell.w_min, cell.w_max)
    return dataclasses.replace(cell, weight=float(w))


def _truncated_normal(rng, mean, sd, lo, hi, size):
    if sd == 0:
        return np.full(size, float(np.clip(mean, lo, hi)))
    out = rng.normal(mean, sd, size)
    bad = (out < lo) | (out > hi)
    while bad.any():
        out[bad] = rng.normal(mean, sd, int(bad.sum()))
        bad = (out < lo) | (out > hi)
    return out


@dataclass
class CrossbarModel:
    """Grid of memristors plus the seeded randomness that drives it.

    Cell parameters live in ``rows x cols`` arrays; :meth:`cell` returns a
    :class:`MemristorCell` snapshot of one device.
    """

    rows: int
    cols: int
    variability: VariabilitySpec
    rng_seed: int
    v_th: np.ndarray = field(repr=False)
    k_update: np.ndarray = field(repr=False)
    weight: np.ndarray = field(repr=False)
    w_min: float = 0.0
    w_max: float = 1.0
    _noise: np.random.Generator = field(repr=False, default=None)

    def cell(self, x: int, y: int) -> MemristorCell:
        self._check_coords(x, y)
        return MemristorCell(float(self.weight[x, y]), float(self.v_th[x, y]),
                             float(self.k_update[x, y]), self.w_min, self.w_max)

    def weights(self) -> np.ndarray:
        """Copy of the conductance map in weight units."""
        return self.weight.copy()

    def _check_coords(self, x, y):
        if not (0 <= x < self.rows and 0 <= y < self.cols):
            raise RangeError(f"cell ({x}, {y}) outside {self.rows}x{self.cols} grid")

    def reset(self) -> None:
        """Restore the fresh state drawn from ``rng_seed``."""
        fresh = new_crossbar(self.rows, self.cols, self.variability, self.rng_seed)
        self.v_th, self.k_update, self.weight = fresh.v_th, fresh.k_update, fresh.weight
        self._noise = fresh._noise

    def write_pulse(self, cmd: PulseCommand) -> "CrossbarModel":
        """Apply one half-select pulse episode in place."""
        self._check_coords(cmd.x, cmd.y)
        if cmd.v_delta < 0:
            raise RangeError(f"negative pulse amplitude {cmd.v_delta}")
        v_full = cmd.polarity * cmd.v_delta
        volts = np.zeros((self.rows, self.cols))
        volts[cmd.x, :] = v_full / 2
        volts[:, cmd.y] = v_full / 2
        volts[cmd.x, cmd.y] = v_full
        self.weight = _overdrive_update(self.weight, volts, self.v_th, self.k_update,
                                        cmd.duration, self.w_min, self.w_max)
        return self

    def ideal_mac(self, x_norm) -> np.ndarray:
        x = self._check_input(x_norm)
        return x @ self.weight

    def read_mac(self, x_norm) -> np.ndarray:
        """Noisy, quantized column readout for inputs ``x_norm`` in [0, 1]."""
        out = self.ideal_mac(x_norm)
        spec = self.variability
        if spec.read_noise_sd > 0:
            out = out + self._noise.normal(0.0, spec.read_noise_sd, self.cols)
        if spec.adc_bits is not None:
            levels = 2 ** spec.adc_bits - 1
            lsb = self.rows / levels
            out = np.round(np.clip(out, 0.0, self.rows) / lsb) * lsb
        return out

    def _check_input(self, x_norm):
        x = np.asarray(x_norm, dtype=float)
        if x.shape != (self.rows,):
            raise DimensionError(f"expected {self.rows} inputs, got shape {x.shape}")
        if not np.all((x >= 0) & (x <= 1)):
            raise RangeError("input components must lie in [0, 1]")
        return x


def new_crossbar(rows: int = 8, cols: int = 8, variability: VariabilitySpec | None = None,
                 seed: int = 0) -> CrossbarModel:
    """Draw a fresh crossbar.

    Thresholds and update rates come from truncated normals; initial weights
    are uniform in [0.05, 0.15].  Everything is a pure function of ``seed``.
    """
    if variability is None:
        variability = VariabilitySpec()
    if int(rows) != rows or int(cols) != cols or rows < 1 or cols < 1:
        raise ConfigurationError(f"invalid crossbar dims {rows}x{cols}")
    variability.validate()
    build_ss, noise_ss = np.random.SeedSequence(seed).spawn(2)
    rng = np.random.default_rng(build_ss)
    shape = (rows, cols)
    lo, hi = variability.v_th_clip
    v_th = _truncated_normal(rng, variability.v_th_mean, variability.v_th_sd, lo, hi, shape)
    k = _truncated_normal(rng, variability.k_mean, variability.k_sd,
                          0.01 * variability.k_mean, np.inf, shape)
    w0 = rng.uniform(0.05, 0.15, shape)
    return CrossbarModel(rows, cols, variability, seed, v_th, k, w0,
                         _noise=np.random.default_rng(noise_ss))


def save_map(model: CrossbarModel, path) -> Path:
    """Write the conductance map CSV and a ``.meta`` key=value companion."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [",".join(f"{w:.9g}" for w in row) for row in model.weight]
    path.write_text("\n".join(lines) + "\n")
    spec = model.variability
    meta = {
        "rows": model.rows,
        "cols": model.cols,
        "seed": model.rng_seed,
        "v_th_mean": spec.v_th_mean,
        "v_th_sd": spec.v_th_sd,
        "v_th_clip_lo": spec.v_th_clip[0],
        "v_th_clip_hi": spec.v_th_clip[1],
        "k_mean": spec.k_mean,
        "k_sd": spec.k_sd,
        "read_noise_sd": spec.read_noise_sd,
        "adc_bits": "none" if spec.adc_bits is None else spec.adc_bits,
    }
    meta_path = path.with_suffix(path.suffix + ".meta")
    meta_path.write_text("".join(f"{k}={v}\n" for k, v in meta.items()))
    return path


def read_map(path) -> np.ndarray:
    return np.loadtxt(path, delimiter=",", ndmin=2)


def load_map(path) -> CrossbarModel:
    """Rebuild a model from a saved map: device parameters from the seed, weights from the CSV."""
    path = Path(path)
    meta = {}
    for line in path.with_suffix(path.suffix + ".meta").read_text().splitlines():
        if "=" in line:
            key, value = line.split("=", 1)
            meta[key.strip()] = value.strip()
    bits = meta["adc_bits"]
    spec = VariabilitySpec(
        v_th_mean=float(meta["v_th_mean"]), v_th_sd=float(meta["v_th_sd"]),
        v_th_clip=(float(meta["v_th_clip_lo"]), float(meta["v_th_clip_hi"])),
        k_mean=float(meta["k_mean"]), k_sd=float(meta["k_sd"]),
        read_noise_sd=float(meta["read_noise_sd"]),
        adc_bits=None if bits == "none" else int(bits))
    model = new_crossbar(int(meta["rows"]), int(meta["cols"]), spec, int(meta["seed"]))
    weights = read_map(path)
    if weights.shape != (model.rows, model.cols):
        raise DimensionError(f"map shape {weights.shape} != {(model.rows, model.cols)}")
    model.weight = np.clip(weights, model.w_min, model.w_max)
    return model
