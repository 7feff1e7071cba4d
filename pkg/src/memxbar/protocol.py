"""Line-oriented ASCII protocol between a host and the crossbar firmware.

Grammar (one command per ``\\n``-terminated line, fields space separated,
numbers rendered with six decimals)::

    INFER v0 v1 ... v{rows-1}      ->  OUT o0 ... o{cols-1}
    WRITE x y c_pulse v_delta      ->  ACK
    RESET                          ->  ACK
    PING                           ->  PONG
    <anything malformed>           ->  ERR <PARSE|RANGE|DIM|STATE> <detail>

:class:`Firmware` binds the grammar to a :class:`~memxbar.device.CrossbarModel`;
:func:`serve` runs it over any binary line stream.
"""

from __future__ import annotations

import logging
import math
import socket
import socketserver
import threading
from dataclasses import dataclass
from typing import Union

import numpy as np

from .device import CrossbarModel, PulseCommand
from .errors import BackendUnavailableError, DimensionError, MemxbarError, ProtocolError, RangeError

log = logging.getLogger(__name__)

PARSE, RANGE, DIM, STATE = "PARSE", "RANGE", "DIM", "STATE"
ERROR_CODES = (PARSE, RANGE, DIM, STATE)
DECIMALS = 6


@dataclass(frozen=True)
class Infer:
    x_norm: tuple[float, ...]


@dataclass(frozen=True)
class Write:
    x: int
    y: int
    c_pulse: float
    v_delta: float


@dataclass(frozen=True)
class Reset:
    pass


@dataclass(frozen=True)
class Ping:
    pass


@dataclass(frozen=True)
class Out:
    values: tuple[float, ...]


@dataclass(frozen=True)
class Ack:
    pass


@dataclass(frozen=True)
class Pong:
    pass


@dataclass(frozen=True)
class Err:
    code: str
    detail: str = ""


Command = Union[Infer, Write, Reset, Ping]
Response = Union[Out, Ack, Pong, Err]


def _num(v: float) -> str:
    s = f"{v:.{DECIMALS}f}"
    # "-0.000000" would not survive a round trip as a distinct value
    return "0.000000" if s == "-0.000000" else s


def wire_round(v):
    """Round to the wire resolution (1e-6).

    Values already rounded this way survive encode/parse bit-exactly.
    """
    return np.round(np.asarray(v, dtype=float), DECIMALS)


def encode_command(cmd: Command) -> str:
    if isinstance(cmd, Infer):
        return "INFER " + " ".join(_num(v) for v in cmd.x_norm) + "\n"
    if isinstance(cmd, Write):
        return f"WRITE {cmd.x} {cmd.y} {_num(cmd.c_pulse)} {_num(cmd.v_delta)}\n"
    if isinstance(cmd, Reset):
        return "RESET\n"
    if isinstance(cmd, Ping):
        return "PING\n"
    raise TypeError(f"not a command: {cmd!r}")


def encode_response(resp: Response) -> str:
    if isinstance(resp, Out):
        return "OUT " + " ".join(_num(v) for v in resp.values) + "\n"
    if isinstance(resp, Ack):
        return "ACK\n"
    if isinstance(resp, Pong):
        return "PONG\n"
    if isinstance(resp, Err):
        detail = " ".join(resp.detail.split())  # keep it on one line
        return f"ERR {resp.code} {detail}".rstrip() + "\n"
    raise TypeError(f"not a response: {resp!r}")


def _tokens(line) -> list[str]:
    if isinstance(line, (bytes, bytearray)):
        try:
            line = bytes(line).decode("ascii")
        except UnicodeDecodeError:
            raise ProtocolError(PARSE, "non-ascii bytes") from None
    return line.split()


def _float(tok: str) -> float:
    try:
        v = float(tok)
    except ValueError:
        raise ProtocolError(PARSE, f"not a number: {tok[:32]!r}") from None
    if not math.isfinite(v):
        raise ProtocolError(PARSE, f"non-finite number: {tok[:32]!r}")
    return v


def _int(tok: str) -> int:
    try:
        return int(tok)
    except ValueError:
        raise ProtocolError(PARSE, f"not an integer: {tok[:32]!r}") from None


def parse_command(line, rows: int = 8, cols: int = 8) -> Command:
    """Parse one command line; raises :class:`ProtocolError` on any defect."""
    toks = _tokens(line)
    if not toks:
        raise ProtocolError(PARSE, "empty line")
    verb, args = toks[0], toks[1:]
    if verb == "PING" or verb == "RESET":
        if args:
            raise ProtocolError(DIM, f"{verb} takes no arguments")
        return Ping() if verb == "PING" else Reset()
    if verb == "INFER":
        if len(args) != rows:
            raise ProtocolError(DIM, f"INFER needs {rows} values, got {len(args)}")
        values = tuple(_float(t) for t in args)
        if any(v < 0 or v > 1 for v in values):
            raise ProtocolError(RANGE, "INFER values must lie in [0, 1]")
        return Infer(values)
    if verb == "WRITE":
        if len(args) != 4:
            raise ProtocolError(DIM, f"WRITE needs 4 fields, got {len(args)}")
        x, y = _int(args[0]), _int(args[1])
        c_pulse, v_delta = _float(args[2]), _float(args[3])
        if not (0 <= x < rows and 0 <= y < cols):
            raise ProtocolError(RANGE, f"cell ({x}, {y}) outside {rows}x{cols}")
        if v_delta < 0:
            raise ProtocolError(RANGE, "v_delta must be >= 0")
        return Write(x, y, c_pulse, v_delta)
    raise ProtocolError(PARSE, f"unknown command {verb[:32]!r}")


def parse_response(line, cols: int = 8) -> Response:
    toks = _tokens(line)
    if not toks:
        raise ProtocolError(PARSE, "empty response")
    verb, args = toks[0], toks[1:]
    if verb == "OUT":
        if len(args) != cols:
            raise ProtocolError(DIM, f"OUT needs {cols} values, got {len(args)}")
        return Out(tuple(_float(t) for t in args))
    if verb == "ACK" and not args:
        return Ack()
    if verb == "PONG" and not args:
        return Pong()
    if verb == "ERR" and args and args[0] in ERROR_CODES:
        return Err(args[0], " ".join(args[1:]))
    raise ProtocolError(PARSE, f"unrecognized response {verb[:32]!r}")


class Firmware:
    """Simulated firmware endpoint owning one crossbar model."""

    def __init__(self, model: CrossbarModel):
        self.model = model

    def execute(self, cmd: Command) -> Response:
        model = self.model
        try:
            if isinstance(cmd, Infer):
                return Out(tuple(float(v) for v in wire_round(model.read_mac(cmd.x_norm))))
            if isinstance(cmd, Write):
                model.write_pulse(PulseCommand(cmd.x, cmd.y, cmd.c_pulse, cmd.v_delta))
                return Ack()
            if isinstance(cmd, Reset):
                model.reset()
                return Ack()
            if isinstance(cmd, Ping):
                return Pong()
        except DimensionError as exc:
            return Err(DIM, str(exc))
        except RangeError as exc:
            return Err(RANGE, str(exc))
        except MemxbarError as exc:
            return Err(STATE, str(exc))
        return Err(STATE, f"unhandled command {type(cmd).__name__}")

    def handle_line(self, line) -> str:
        try:
            cmd = parse_command(line, self.model.rows, self.model.cols)
        except ProtocolError as exc:
            return encode_response(Err(exc.code, exc.detail))
        return encode_response(self.execute(cmd))


def serve(model: CrossbarModel, rfile, wfile) -> int:
    """Answer every line read from ``rfile`` on ``wfile`` until EOF.

    Both streams are binary.  Returns the number of commands served.
    """
    fw = Firmware(model)
    n = 0
    for raw in iter(rfile.readline, b""):
        wfile.write(fw.handle_line(raw).encode("ascii"))
        wfile.flush()
        n += 1
    return n


class LoopbackTransport:
    """Hands encoded lines straight to an in-process :class:`Firmware`."""

    def __init__(self, firmware: Firmware):
        self.firmware = firmware

    def request(self, line: str) -> str:
        return self.firmware.handle_line(line.encode("ascii"))

    def close(self):
        pass


class StreamTransport:
    """Request/response over a pair of binary streams (socket files, pipes)."""

    def __init__(self, rfile, wfile, on_close=None):
        self.rfile, self.wfile = rfile, wfile
        self._on_close = on_close

    def request(self, line: str) -> str:
        try:
            self.wfile.write(line.encode("ascii"))
            self.wfile.flush()
            resp = self.rfile.readline()
        except (OSError, ValueError) as exc:
            raise BackendUnavailableError(f"transport failed: {exc}") from exc
        if not resp:
            raise BackendUnavailableError("transport closed by peer")
        return resp.decode("ascii")

    def close(self):
        for f in (self.wfile, self.rfile):
            try:
                f.close()
            except OSError:
                pass
        if self._on_close is not None:
            self._on_close()


def pipe_transport(model: CrossbarModel) -> StreamTransport:
    """Serve ``model`` on a background thread over a local socket pair."""
    host_sock, fw_sock = socket.socketpair()
    fw_r, fw_w = fw_sock.makefile("rb"), fw_sock.makefile("wb")

    def run():
        try:
            serve(model, fw_r, fw_w)
        except OSError:
            pass
        finally:
            fw_r.close()
            fw_w.close()
            fw_sock.close()

    thread = threading.Thread(target=run, name="memxbar-firmware", daemon=True)
    thread.start()

    def close():
        host_sock.close()
        thread.join(timeout=5)

    return StreamTransport(host_sock.makefile("rb"), host_sock.makefile("wb"), close)


def tcp_transport(host: str, port: int, timeout: float = 10.0) -> StreamTransport:
    try:
        sock = socket.create_connection((host, port), timeout=timeout)
    except OSError as exc:
        raise BackendUnavailableError(f"cannot reach {host}:{port}: {exc}") from exc
    return StreamTransport(sock.makefile("rb"), sock.makefile("wb"), sock.close)


class _SessionHandler(socketserver.StreamRequestHandler):
    def handle(self):
        log.info("session from %s", self.client_address)
        n = serve(self.server.model, self.rfile, self.wfile)
        log.info("session closed after %d commands", n)


class CrossbarServer(socketserver.TCPServer):
    """Single-threaded TCP server: one session at a time owns the model."""

    allow_reuse_address = True

    def __init__(self, model: CrossbarModel, host: str = "127.0.0.1", port: int = 0):
        self.model = model
        super().__init__((host, port), _SessionHandler)

    @property
    def address(self) -> tuple[str, int]:
        return self.server_address[:2]
