"""Inference/write access to a crossbar, either in-process or over the wire.

Callers work in normalized units only: inputs in [0, 1], readouts and
targets in weight units.  The conversion to read voltages stays inside the
backend.

Both backends quantize every value crossing the boundary (inputs, pulse
durations and amplitudes, readouts) to the wire resolution of 1e-6, so the
direct and protocol paths see bit-identical numbers and closed-loop
controllers cannot diverge between them.
"""

from __future__ import annotations

import enum

import numpy as np

from . import protocol as wire
from .device import MIN_THRESHOLD, READ_AMPLITUDE, CrossbarModel, PulseCommand
from .errors import (BackendUnavailableError, ConfigurationError, DimensionError, ProtocolError,
                     RangeError)


class BackendKind(enum.Enum):
    DIRECT = "direct"
    PROTOCOL = "protocol"


def _quantize(values) -> np.ndarray:
    return wire.wire_round(np.ravel(values))


class Backend:
    """Common checks and unit handling; subclasses supply the transport."""

    kind: BackendKind

    def __init__(self, rows: int, cols: int, v_read_max: float = READ_AMPLITUDE):
        if v_read_max > MIN_THRESHOLD:
            raise ConfigurationError(
                f"v_read_max={v_read_max} V could exceed a switching threshold")
        self.dims = (rows, cols)
        self.v_read_max = v_read_max

    @property
    def rows(self) -> int:
        return self.dims[0]

    @property
    def cols(self) -> int:
        return self.dims[1]

    def infer(self, x_norm) -> np.ndarray:
        x = np.asarray(x_norm, dtype=float)
        if x.shape != (self.rows,):
            raise DimensionError(f"expected {self.rows} inputs, got shape {x.shape}")
        if not np.all((x >= 0) & (x <= 1)):
            raise RangeError("input components must lie in [0, 1]")
        # the firmware drives v_read_max * x volts; the device model takes the
        # normalized code directly so both paths use the same float
        return self._read(_quantize(x))

    def write_weight(self, x: int, y: int, c_pulse: float, v_delta: float) -> None:
        if not (0 <= x < self.rows and 0 <= y < self.cols):
            raise RangeError(f"cell ({x}, {y}) outside {self.rows}x{self.cols} grid")
        if v_delta < 0:
            raise RangeError("v_delta must be >= 0")
        self._write(int(x), int(y), float(wire.wire_round(c_pulse)), float(wire.wire_round(v_delta)))

    def close(self) -> None:
        pass

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def _read(self, x_norm: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def _write(self, x, y, c_pulse, v_delta) -> None:
        raise NotImplementedError


class DirectBackend(Backend):
    kind = BackendKind.DIRECT

    def __init__(self, model: CrossbarModel, v_read_max: float = READ_AMPLITUDE):
        super().__init__(model.rows, model.cols, v_read_max)
        self.model = model

    def _read(self, x_norm):
        return _quantize(self.model.read_mac(x_norm))

    def _write(self, x, y, c_pulse, v_delta):
        self.model.write_pulse(PulseCommand(x, y, c_pulse, v_delta))


class ProtocolBackend(Backend):
    """Talks to a firmware endpoint through a transport with ``request(line) -> line``."""

    kind = BackendKind.PROTOCOL

    def __init__(self, transport, rows: int = 8, cols: int = 8,
                 v_read_max: float = READ_AMPLITUDE):
        super().__init__(rows, cols, v_read_max)
        self.transport = transport

    def _call(self, cmd):
        try:
            raw = self.transport.request(wire.encode_command(cmd))
            resp = wire.parse_response(raw, self.cols)
        except ProtocolError as exc:
            raise BackendUnavailableError(f"garbled response: {exc}") from exc
        if isinstance(resp, wire.Err):
            if resp.code == wire.DIM:
                raise DimensionError(resp.detail)
            if resp.code == wire.RANGE:
                raise RangeError(resp.detail)
            raise ProtocolError(resp.code, resp.detail)
        return resp

    def _read(self, x_norm):
        resp = self._call(wire.Infer(tuple(float(v) for v in x_norm)))
        if not isinstance(resp, wire.Out):
            raise BackendUnavailableError(f"expected OUT, got {resp!r}")
        return np.array(resp.values, dtype=float)

    def _write(self, x, y, c_pulse, v_delta):
        resp = self._call(wire.Write(x, y, c_pulse, v_delta))
        if not isinstance(resp, wire.Ack):
            raise BackendUnavailableError(f"expected ACK, got {resp!r}")

    def ping(self) -> bool:
        return isinstance(self._call(wire.Ping()), wire.Pong)

    def reset(self) -> None:
        self._call(wire.Reset())

    def close(self):
        self.transport.close()


def open_backend(spec: str, model: CrossbarModel | None = None, rows: int = 8,
                 cols: int = 8) -> Backend:
    """Build a backend from a CLI-style spec.

    ``direct`` and ``pipe`` need ``model``; ``tcp:host:port`` connects to a
    running ``simulate-serve`` endpoint.
    """
    if spec == "direct":
        if model is None:
            raise ConfigurationError("direct backend needs a model")
        return DirectBackend(model)
    if spec == "pipe":
        if model is None:
            raise ConfigurationError("pipe backend needs a model")
        return ProtocolBackend(wire.pipe_transport(model), model.rows, model.cols)
    if spec.startswith("tcp:"):
        host, _, port = spec[4:].rpartition(":")
        if not host or not port.isdigit():
            raise ConfigurationError(f"bad tcp endpoint {spec!r}, expected tcp:host:port")
        return ProtocolBackend(wire.tcp_transport(host, int(port)), rows, cols)
    raise ConfigurationError(f"unknown backend {spec!r}")


__all__ = ["Backend", "BackendKind", "DirectBackend", "ProtocolBackend", "open_backend",
           "BackendUnavailableError"]
