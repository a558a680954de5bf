"""Line protocol exposing a device backend over TCP, and the matching client.

Grammar (one command per line, ``\\n`` terminated)::

    HELLO
    SETV <id> <volts>
    GETP <port>
    LOADW <id> <n>        followed by n lines, one sample each
    RUNTRACE <duration_ns> <dt_ns>
    SEED <u64>
    BYE

Replies are ``OK [payload]`` or ``ERR <code> <message>``.  A RUNTRACE reply
``OK <ports> <n>`` is followed by one line per port: ``<port> s0 s1 ...``.
Floats are written with ``repr`` so values survive the round trip exactly.
"""

from __future__ import annotations

import logging
import math
import re
import socket
import socketserver
import threading
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .actuation import TimeTrace, TraceFormatError
from .device import UnknownIdError

log = logging.getLogger(__name__)

PROTOCOL = "apictwin/1"
VERBS = ("HELLO", "SETV", "GETP", "LOADW", "RUNTRACE", "SEED", "BYE")
_ID = re.compile(r"[A-Za-z0-9_]+\Z")
_INT = re.compile(r"(0|[1-9][0-9]*)\Z")
_FLOAT = re.compile(r"[+-]?(\d+\.?\d*|\.\d+)([eE][+-]?\d+)?\Z")
U64_MAX = 2**64 - 1


class WireError(ValueError):
    """Malformed message or an ERR reply."""

    def __init__(self, code: int, message: str):
        super().__init__(f"ERR {code} {message}")
        self.code = code
        self.message = message


class DeviceBusyError(WireError):
    pass


def fmt_float(x: float) -> str:
    x = float(x)
    if not math.isfinite(x):
        raise ValueError("non-finite value")
    return repr(x)


def parse_float(tok: str) -> float:
    if not _FLOAT.match(tok):
        raise WireError(400, f"bad number {tok!r}")
    return float(tok)


def parse_int(tok: str, hi: int = U64_MAX) -> int:
    if not _INT.match(tok):
        raise WireError(400, f"bad integer {tok!r}")
    v = int(tok)
    if v > hi:
        raise WireError(400, f"integer out of range {tok!r}")
    return v


def parse_id(tok: str) -> str:
    if not _ID.match(tok):
        raise WireError(400, f"bad identifier {tok!r}")
    return tok


@dataclass(frozen=True)
class WireCommand:
    verb: str
    args: tuple = ()
    samples: tuple[float, ...] = ()

    def lines(self) -> list[str]:
        v, a = self.verb, self.args
        if v in ("HELLO", "BYE"):
            head = v
        elif v == "SETV":
            head = f"SETV {a[0]} {fmt_float(a[1])}"
        elif v == "GETP":
            head = f"GETP {int(a[0])}"
        elif v == "LOADW":
            head = f"LOADW {a[0]} {len(self.samples)}"
        elif v == "RUNTRACE":
            head = f"RUNTRACE {fmt_float(a[0])} {fmt_float(a[1])}"
        elif v == "SEED":
            head = f"SEED {int(a[0])}"
        else:
            raise ValueError(f"unknown verb {v!r}")
        return [head] + [fmt_float(s) for s in self.samples]

    def encode(self) -> bytes:
        return "".join(line + "\n" for line in self.lines()).encode("ascii")


def parse_command(line: str) -> WireCommand:
    """Parse a command line (without the LOADW sample lines)."""
    parts = line.split(" ")
    verb, args = parts[0], parts[1:]
    arity = {"HELLO": 0, "BYE": 0, "SETV": 2, "GETP": 1, "LOADW": 2, "RUNTRACE": 2, "SEED": 1}
    if verb not in arity:
        raise WireError(400, f"unknown verb {verb!r}")
    if len(args) != arity[verb] or any(a == "" for a in args):
        raise WireError(400, f"{verb} takes {arity[verb]} argument(s)")
    if verb == "SETV":
        return WireCommand(verb, (parse_id(args[0]), parse_float(args[1])))
    if verb == "GETP":
        return WireCommand(verb, (parse_int(args[0]),))
    if verb == "LOADW":
        return WireCommand(verb, (parse_id(args[0]), parse_int(args[1], 10**9)))
    if verb == "RUNTRACE":
        return WireCommand(verb, (parse_float(args[0]), parse_float(args[1])))
    if verb == "SEED":
        return WireCommand(verb, (parse_int(args[0]),))
    return WireCommand(verb)


def parse_message(text: str) -> WireCommand:
    """Parse a full encoded command, including LOADW sample lines."""
    if not text.endswith("\n"):
        raise WireError(400, "missing line terminator")
    lines = text[:-1].split("\n")
    cmd = parse_command(lines[0])
    if cmd.verb == "LOADW":
        n = cmd.args[1]
        if len(lines) != n + 1:
            raise WireError(400, "sample count mismatch")
        return WireCommand("LOADW", (cmd.args[0],), tuple(parse_float(s) for s in lines[1:]))
    if len(lines) != 1:
        raise WireError(400, "one command per line")
    return cmd


@dataclass(frozen=True)
class WireReply:
    ok: bool
    payload: str = ""
    code: int = 0

    def line(self) -> str:
        if self.ok:
            return "OK" + (f" {self.payload}" if self.payload else "")
        return f"ERR {self.code} {self.payload}"

    def encode(self) -> bytes:
        return (self.line() + "\n").encode("ascii")

    def raise_for_error(self) -> "WireReply":
        if not self.ok:
            if self.code == 404:
                raise UnknownIdError(self.payload)
            if self.code == 503:
                raise DeviceBusyError(self.code, self.payload)
            raise WireError(self.code, self.payload)
        return self


def parse_reply(line: str) -> WireReply:
    if line == "OK":
        return WireReply(True)
    if line.startswith("OK "):
        return WireReply(True, line[3:])
    m = re.match(r"ERR ([1-9][0-9]{2}) (.+)\Z", line)
    if m:
        return WireReply(False, m.group(2), int(m.group(1)))
    raise WireError(400, f"malformed reply {line!r}")


# -- server ------------------------------------------------------------------


class _Session:
    """Executes parsed commands against the device for one connection."""

    def __init__(self, server: "WireServer"):
        self.server = server
        self.owner = False

    @property
    def dev(self):
        return self.server.device

    def hello(self) -> WireReply:
        if self.owner:
            return WireReply(True, PROTOCOL)
        if not self.server.device_lock.acquire(blocking=False):
            return WireReply(False, "device busy", 503)
        self.owner = True
        ids = " ".join(getattr(self.dev, "shifter_ids", ()))
        return WireReply(True, f"{PROTOCOL} {self.dev.n_ports} {ids}".rstrip())

    def release(self) -> None:
        if self.owner:
            self.owner = False
            self.server.device_lock.release()

    def execute(self, cmd: WireCommand) -> list[str]:
        if cmd.verb == "HELLO":
            return [self.hello().line()]
        if not self.owner:
            return [WireReply(False, "HELLO required", 503).line()]
        try:
            if cmd.verb == "SETV":
                self.dev.set_voltage(*cmd.args)
                return ["OK"]
            if cmd.verb == "GETP":
                try:
                    return ["OK " + fmt_float(self.dev.read_power(cmd.args[0]))]
                except UnknownIdError:
                    return [WireReply(False, "unknown port", 404).line()]
            if cmd.verb == "LOADW":
                self.dev.load_waveform(cmd.args[0], np.asarray(cmd.samples))
                return ["OK"]
            if cmd.verb == "SEED":
                self.dev.reseed(cmd.args[0])
                return ["OK"]
            if cmd.verb == "RUNTRACE":
                traces = self.dev.run_trace(*cmd.args)
                n = len(next(iter(traces.values())))
                out = [f"OK {len(traces)} {n}"]
                for port, tr in traces.items():
                    out.append(f"{port} " + " ".join(map(repr, tr.samples.tolist())))
                return out
            if cmd.verb == "BYE":
                self.release()
                return ["OK"]
        except UnknownIdError as exc:
            return [WireReply(False, str(exc), 404).line()]
        except (TraceFormatError, ValueError) as exc:
            return [WireReply(False, str(exc).replace("\n", " ") or "bad request", 400).line()]
        raise AssertionError(cmd.verb)


class _Handler(socketserver.StreamRequestHandler):
    def handle(self):
        session = _Session(self.server)
        try:
            while True:
                raw = self.rfile.readline()
                if not raw:
                    return
                try:
                    line = raw.decode("ascii")
                    if not line.endswith("\n"):
                        return  # dropped mid-line
                    cmd = parse_command(line[:-1])
                except (UnicodeDecodeError, WireError) as exc:
                    msg = exc.message if isinstance(exc, WireError) else "non-ascii input"
                    self._send([WireReply(False, msg, 400).line()])
                    continue
                if cmd.verb == "LOADW":
                    cmd = self._read_samples(cmd)
                    if cmd is None:
                        return
                    if isinstance(cmd, WireReply):
                        self._send([cmd.line()])
                        continue
                self._send(session.execute(cmd))
                if cmd.verb == "BYE":
                    return
        except (ConnectionError, OSError):
            return
        finally:
            session.release()

    def _read_samples(self, cmd):
        """Read the LOADW sample block; ``None`` when the peer hangs up."""
        sid, n = cmd.args
        samples, bad = [], None
        for _ in range(n):
            raw = self.rfile.readline()
            if not raw or not raw.endswith(b"\n"):
                return None  # partial waveform discarded
            try:
                samples.append(parse_float(raw.decode("ascii")[:-1]))
            except (UnicodeDecodeError, WireError):
                bad = bad or raw
        if bad is not None:
            return WireReply(False, "bad sample in waveform", 400)
        return WireCommand("LOADW", (sid,), tuple(samples))

    def _send(self, lines):
        self.wfile.write(("\n".join(lines) + "\n").encode("ascii"))
        self.wfile.flush()


class WireServer(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, device, address: tuple[str, int]):
        super().__init__(address, _Handler)
        self.device = device
        self.device_lock = threading.Lock()

    @property
    def endpoint(self) -> str:
        host, port = self.server_address[:2]
        return f"{host}:{port}"


def parse_endpoint(endpoint: str) -> tuple[str, int]:
    host, sep, port = endpoint.rpartition(":")
    if not sep or not host:
        raise ValueError(f"endpoint must be host:port, got {endpoint!r}")
    return host, parse_int(port, 65535)


def serve(device, endpoint: str = "127.0.0.1:0") -> WireServer:
    """Bind a server for ``device``; call ``serve_forever`` (or use :func:`serving`)."""
    return WireServer(device, parse_endpoint(endpoint))


@contextmanager
def serving(device, endpoint: str = "127.0.0.1:0"):
    """Run a server in a background thread for the duration of the block."""
    server = serve(device, endpoint)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    try:
        yield server
    finally:
        server.shutdown()
        server.server_close()
        thread.join()


# -- client ------------------------------------------------------------------


class RemoteBackend:
    """Device backend speaking the wire protocol.

    ``sweep`` pipelines SETV/GETP batches; the server executes them in order,
    so readings match an in-process set-then-read loop exactly.
    """

    def __init__(self, endpoint: str, timeout: float | None = 60.0, batch: int = 2048):
        host, port = parse_endpoint(endpoint)
        self._sock = socket.create_connection((host, port), timeout=timeout)
        self._r = self._sock.makefile("rb")
        self.batch = batch
        hello = self._call(WireCommand("HELLO"))
        parts = hello.payload.split()
        if not parts or parts[0] != PROTOCOL:
            raise WireError(400, f"unexpected server greeting {hello.payload!r}")
        self.n_ports = int(parts[1])
        self._ids = tuple(parts[2:])

    # -- plumbing
    def _readline(self) -> str:
        raw = self._r.readline()
        if not raw:
            raise ConnectionError("server closed the connection")
        return raw.decode("ascii").rstrip("\n")

    def _send(self, data: bytes) -> None:
        self._sock.sendall(data)

    def _call(self, cmd: WireCommand) -> WireReply:
        self._send(cmd.encode())
        return parse_reply(self._readline()).raise_for_error()

    # -- backend contract
    @property
    def shifter_ids(self) -> tuple[str, ...]:
        return self._ids

    def set_voltage(self, sid: str, v: float) -> None:
        self._call(WireCommand("SETV", (sid, float(v))))

    def read_power(self, port: int) -> float:
        return float(self._call(WireCommand("GETP", (int(port),))).payload)

    def load_waveform(self, sid: str, samples: Sequence[float]) -> None:
        self._call(WireCommand("LOADW", (sid,), tuple(map(float, samples))))

    def reseed(self, seed: int) -> None:
        self._call(WireCommand("SEED", (int(seed),)))

    def run_trace(self, duration: float, dt: float) -> dict[int, TimeTrace]:
        head = self._call(WireCommand("RUNTRACE", (float(duration), float(dt))))
        n_ports, n = map(int, head.payload.split())
        out = {}
        for _ in range(n_ports):
            port, *vals = self._readline().split(" ")
            out[int(port)] = TimeTrace(np.array([float(v) for v in vals], dtype=float)[:n], float(dt))
        return out

    def sweep(self, assignments: Mapping[str, Sequence[float]], ports: Sequence[int]) -> np.ndarray:
        ids = list(assignments)
        cols = [np.asarray(assignments[s], dtype=float) for s in ids]
        n = len(cols[0])
        out = np.empty((n, len(ports)))
        per_point = len(ids) + len(ports)
        step = max(1, self.batch // per_point)
        for start in range(0, n, step):
            stop = min(n, start + step)
            buf = []
            for i in range(start, stop):
                buf += [f"SETV {s} {fmt_float(c[i])}\n" for s, c in zip(ids, cols)]
                buf += [f"GETP {int(p)}\n" for p in ports]
            self._send("".join(buf).encode("ascii"))
            for i in range(start, stop):
                for _ in ids:
                    parse_reply(self._readline()).raise_for_error()
                for j in range(len(ports)):
                    out[i, j] = float(parse_reply(self._readline()).raise_for_error().payload)
        return out

    def close(self) -> None:
        try:
            self._call(WireCommand("BYE"))
        except (OSError, ConnectionError, WireError):
            pass
        finally:
            self._r.close()
            self._sock.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def remote_backend(endpoint: str, **kw) -> RemoteBackend:
    return RemoteBackend(endpoint, **kw)
