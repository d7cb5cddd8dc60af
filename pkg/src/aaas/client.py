"""Client side of the offload protocol.

A ``Session`` is one connection to one daemon and mirrors the command set
one-to-one. ``run_remote_analysis`` spreads an analysis over several daemons,
one thread and one contiguous trial slice per device, and keeps the devices in
lock step so the copy-in, kernel and copy-out phases can be timed separately.
"""

from __future__ import annotations

import logging
import os
import socket
import threading
import time
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import protocol as P
from .riskcore import (
    KERNEL_NAME,
    EventLossTable,
    InvalidTables,
    Portfolio,
    YearEventTable,
    encode_elts,
    encode_layer,
    encode_yet,
)
from .riskcore.model import check_layer

log = logging.getLogger("aaas.client")

CONNECT_TIMEOUT = 5.0
REQUEST_TIMEOUT = 300.0
TRANSFER_CHUNK = 16 << 20


class ClientError(Exception):
    pass


class MalformedServerList(ClientError, ValueError):
    pass


class ConnectFailure(ClientError, ConnectionError):
    pass


class HandshakeRejected(ClientError):
    def __init__(self, status: P.Status, message: str = ""):
        super().__init__(f"handshake rejected: {P.Status(status).name} {message}".rstrip())
        self.status = P.Status(status)


class Timeout(ClientError, TimeoutError):
    pass


class ClosedSession(ClientError):
    pass


class StaleBuffer(ClientError):
    pass


class RemoteError(ClientError):
    """The daemon answered a request with a non-OK status."""

    def __init__(self, request: P.MsgType, status: P.Status, message: str = ""):
        super().__init__(f"{P.MsgType(request).name} failed: {P.Status(status).name} {message}".rstrip())
        self.request = P.MsgType(request)
        self.status = P.Status(status)
        self.remote_message = message


class DeviceFailure(ClientError):
    def __init__(self, endpoint: "DeviceEndpoint", cause: BaseException):
        super().__init__(f"device {endpoint} failed: {cause}")
        self.endpoint = endpoint
        self.cause = cause


@dataclass(frozen=True)
class DeviceEndpoint:
    host: str
    port: int
    ordinal: int = 0

    def __str__(self) -> str:
        return f"#{self.ordinal} {self.host}:{self.port}"


def parse_endpoint(text: str, ordinal: int = 0) -> DeviceEndpoint:
    host, sep, port = text.strip().rpartition(":")
    host = host.strip("[]")
    if not sep or not host or not port.isdigit() or not 0 < int(port) < 65536:
        raise MalformedServerList(f"expected HOST:PORT, got {text!r}")
    return DeviceEndpoint(host, int(port), ordinal)


def discover_devices(env: Mapping[str, str] | None = None) -> list[DeviceEndpoint]:
    """Endpoints from the comma-separated ``AAAS_SERVERS`` list, in order; unset means none."""
    env = os.environ if env is None else env
    raw = env.get("AAAS_SERVERS", "")
    if not raw.strip():
        return []
    return [parse_endpoint(item, i) for i, item in enumerate(raw.split(","))]


def request_timeout(env: Mapping[str, str] | None = None) -> float:
    env = os.environ if env is None else env
    raw = env.get("AAAS_TIMEOUT_SECS")
    if raw is None:
        return REQUEST_TIMEOUT
    try:
        value = float(raw)
    except ValueError:
        raise ClientError(f"AAAS_TIMEOUT_SECS is not a number: {raw!r}") from None
    if value <= 0:
        raise ClientError("AAAS_TIMEOUT_SECS must be > 0")
    return value


@dataclass(eq=False)
class DeviceBuffer:
    session: "Session"
    handle: int
    size: int
    live: bool = True


class Session:
    """One connection to one daemon, bound to a single kernel name."""

    def __init__(self, sock: socket.socket, endpoint: DeviceEndpoint, kernel_name: str,
                 timeout: float, transfer_chunk: int = TRANSFER_CHUNK):
        self._sock = sock
        self.endpoint = endpoint
        self.kernel_name = kernel_name
        self.timeout = timeout
        self.transfer_chunk = transfer_chunk
        self.device: P.HelloAck | None = None
        self.trace: list[P.MsgType] = []
        self.closed = False
        self.poisoned = False
        self._rid = 0
        self._buffers: set[DeviceBuffer] = set()

    @classmethod
    def open(cls, endpoint: DeviceEndpoint, kernel_name: str = KERNEL_NAME, *,
             connect_timeout: float = CONNECT_TIMEOUT, timeout: float | None = None,
             transfer_chunk: int = TRANSFER_CHUNK) -> "Session":
        try:
            sock = socket.create_connection((endpoint.host, endpoint.port), timeout=connect_timeout)
        except OSError as exc:
            raise ConnectFailure(f"cannot connect to {endpoint}: {exc}") from exc
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        sock.settimeout(request_timeout() if timeout is None else timeout)
        session = cls(sock, endpoint, kernel_name, sock.gettimeout(), transfer_chunk)
        try:
            session.device = session._call(P.Hello(kernel_name))
        except RemoteError as exc:
            session._drop()
            raise HandshakeRejected(exc.status, exc.remote_message) from exc
        except ClientError:
            session._drop()
            raise
        return session

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        if not self.closed:
            self.close()

    def _drop(self) -> None:
        self.closed = True
        for buf in self._buffers:
            buf.live = False
        self._buffers.clear()
        try:
            self._sock.close()
        except OSError:
            pass

    def _call(self, cmd: P.Command):
        if self.closed:
            raise ClosedSession(f"session to {self.endpoint} is closed")
        self._rid += 1
        rid = self._rid
        self.trace.append(cmd.MSG_TYPE)
        try:
            P.write_frame(self._sock, cmd, rid)
            resp, got = P.read_frame(self._sock)
        except socket.timeout as exc:
            self.poisoned = True
            self._drop()
            raise Timeout(f"{cmd.MSG_TYPE.name} to {self.endpoint} timed out after {self.timeout}s") from exc
        except (OSError, P.ProtocolError) as exc:
            self.poisoned = True
            self._drop()
            raise ClientError(f"{cmd.MSG_TYPE.name} to {self.endpoint}: {exc}") from exc
        if got != rid:
            self.poisoned = True
            self._drop()
            raise ClientError(f"response id {got} does not match request id {rid}")
        if isinstance(resp, P.Failure):
            raise RemoteError(resp.request, resp.status, resp.message)
        if not P.is_response(resp) or resp.MSG_TYPE != cmd.MSG_TYPE:
            self.poisoned = True
            self._drop()
            raise ClientError(f"unexpected {type(resp).__name__} for {cmd.MSG_TYPE.name}")
        return resp

    def _own(self, buf: DeviceBuffer) -> None:
        if buf.session is not self:
            raise StaleBuffer("buffer belongs to another session")
        if not buf.live:
            raise StaleBuffer(f"buffer {buf.handle} was freed or its session closed")

    def alloc(self, size: int) -> DeviceBuffer:
        ack = self._call(P.AllocBuffer(size))
        buf = DeviceBuffer(self, ack.handle, size)
        self._buffers.add(buf)
        return buf

    def write(self, buf: DeviceBuffer, offset: int, data) -> None:
        self._own(buf)
        view = memoryview(data).cast("B")
        if not len(view):
            self._call(P.TransferToDevice(buf.handle, offset, b""))
        for pos in range(0, len(view), self.transfer_chunk):
            chunk = view[pos:pos + self.transfer_chunk]
            self._call(P.TransferToDevice(buf.handle, offset + pos, bytes(chunk)))

    def read(self, buf: DeviceBuffer, offset: int, length: int) -> bytes:
        self._own(buf)
        if length == 0:
            return self._call(P.TransferToHost(buf.handle, offset, 0)).data
        out = bytearray(length)
        for pos in range(0, length, self.transfer_chunk):
            n = min(self.transfer_chunk, length - pos)
            data = self._call(P.TransferToHost(buf.handle, offset + pos, n)).data
            out[pos:pos + n] = data
        return bytes(out)

    def free(self, buf: DeviceBuffer) -> None:
        self._own(buf)
        self._call(P.FreeBuffer(buf.handle))
        buf.live = False
        self._buffers.discard(buf)

    def launch(self, lanes: int, chunk_size: int, args: Sequence) -> None:
        self._call(P.LaunchKernel(self.kernel_name, lanes, chunk_size, tuple(self._arg(a) for a in args)))

    def _arg(self, a) -> P.Arg:
        if isinstance(a, P.Arg):
            return a
        if isinstance(a, DeviceBuffer):
            self._own(a)
            return P.Arg.buffer(a.handle)
        if isinstance(a, (bool, np.bool_)):
            raise TypeError("boolean kernel arguments are not supported")
        if isinstance(a, (int, np.integer)):
            return P.Arg.u64(int(a))
        if isinstance(a, (float, np.floating)):
            return P.Arg.f64(float(a))
        raise TypeError(f"cannot pass {type(a).__name__} as a kernel argument")

    def close(self) -> None:
        """Send Quit and close; a poisoned session is just disconnected."""
        if self.closed:
            raise ClosedSession(f"session to {self.endpoint} is already closed")
        try:
            self._call(P.Quit())
        finally:
            self._drop()


# --- multi-device analysis ---------------------------------------------------------------

@dataclass
class PhaseTimes:
    transfer_in: float = 0.0
    kernel: float = 0.0
    transfer_out: float = 0.0

    @property
    def total(self) -> float:
        return self.transfer_in + self.kernel + self.transfer_out


@dataclass
class RemoteRun:
    ylts: dict[tuple[int, int], np.ndarray]
    phases: PhaseTimes
    traces: list[list[P.MsgType]] = field(default_factory=list)


class _Phases:
    """Barrier-separated phases; each phase's wall time is measured once all devices arrive."""

    def __init__(self, parties: int):
        self.barrier = threading.Barrier(parties)
        self.times = PhaseTimes()
        self._mark = 0.0

    def begin(self) -> None:
        if self.barrier.wait() == 0:
            self._mark = time.perf_counter()
        self.barrier.wait()

    def end(self, name: str) -> None:
        if self.barrier.wait() == 0:
            setattr(self.times, name, getattr(self.times, name) + time.perf_counter() - self._mark)
        self.barrier.wait()


def _device_worker(endpoint, yet_slice, elts, portfolio, lanes, chunk_size, kernel_name,
                   phases: _Phases, out: dict, traces: list, index: int, timeout) -> None:
    """Full command sequence on one device; the YET stays resident across layers."""
    layers = list(portfolio.layers())
    yet_blob = encode_yet(yet_slice)
    n = yet_slice.n_trials
    session = Session.open(endpoint, kernel_name, timeout=timeout)
    try:
        yet_buf = None
        for key, layer in layers:
            elt_blob = encode_elts([elts[i] for i in layer.elt_ids])
            layer_blob = encode_layer(layer)
            phases.begin()
            first = yet_buf is None
            if first:
                yet_buf = session.alloc(len(yet_blob))
            elt_buf = session.alloc(len(elt_blob))
            layer_buf = session.alloc(len(layer_blob))
            out_buf = session.alloc(8 * n)
            if first:
                session.write(yet_buf, 0, yet_blob)
            session.write(elt_buf, 0, elt_blob)
            session.write(layer_buf, 0, layer_blob)
            phases.end("transfer_in")
            phases.begin()
            session.launch(lanes, chunk_size, [yet_buf, elt_buf, layer_buf, out_buf, 0, n])
            phases.end("kernel")
            phases.begin()
            out[key][index] = np.frombuffer(session.read(out_buf, 0, 8 * n), dtype="<f8")
            phases.end("transfer_out")
            for buf in (elt_buf, layer_buf, out_buf):
                session.free(buf)
        session.free(yet_buf)
        traces[index] = session.trace
        session.close()
    except BaseException:
        if not session.closed:
            session._drop()
        raise


def device_slices(n_trials: int, n_devices: int) -> list[tuple[int, int]]:
    """One contiguous slice per device, sizes differing by at most one (some may be empty)."""
    q, r = divmod(n_trials, n_devices)
    bounds = np.cumsum([0] + [q + (i < r) for i in range(n_devices)])
    return [(int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:])]


def remote_analysis(
    portfolio: Portfolio,
    yet: YearEventTable,
    elts: Sequence[EventLossTable],
    devices: Sequence[DeviceEndpoint],
    lanes: int = 1,
    chunk_size: int = 256,
    kernel_name: str = KERNEL_NAME,
    timeout: float | None = None,
) -> RemoteRun:
    """Run every layer on the given daemons and stitch the per-trial losses together."""
    if not devices:
        raise ClientError("no devices given")
    if lanes < 1 or chunk_size < 1:
        raise InvalidTables("lanes and chunk_size must be >= 1")
    for _, layer in portfolio.layers():
        check_layer(layer, elts, yet.catalog_size)
    blocks = device_slices(yet.n_trials, len(devices))
    keys = [key for key, _ in portfolio.layers()]
    out = {key: [None] * len(devices) for key in keys}
    traces: list = [None] * len(devices)
    errors: list = [None] * len(devices)
    phases = _Phases(len(devices))

    def work(i, dev, b, e):
        try:
            _device_worker(dev, yet.slice(b, e), elts, portfolio, lanes, chunk_size,
                           kernel_name, phases, out, traces, i, timeout)
        except BaseException as exc:
            errors[i] = exc
            phases.barrier.abort()

    threads = [threading.Thread(target=work, args=(i, dev, b, e), name=f"device-{i}")
               for i, (dev, (b, e)) in enumerate(zip(devices, blocks))]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    # The first real error wins; broken barriers are just the other devices stopping.
    for dev, exc in zip(devices, errors):
        if exc is not None and not isinstance(exc, threading.BrokenBarrierError):
            raise DeviceFailure(dev, exc) from exc
    for dev, exc in zip(devices, errors):
        if exc is not None:
            raise DeviceFailure(dev, exc) from exc
    ylts = {key: np.concatenate(parts) if parts else np.zeros(0) for key, parts in out.items()}
    return RemoteRun(ylts, phases.times, traces)


def run_remote_analysis(portfolio, yet, elts, devices, lanes=1, chunk_size=256, **kw):
    """Same result shape as ``riskcore.analyze``: ``{(program, layer): losses}``."""
    return remote_analysis(portfolio, yet, elts, devices, lanes, chunk_size, **kw).ylts
