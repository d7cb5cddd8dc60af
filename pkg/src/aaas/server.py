"""The offload daemon.

One acceptor thread hands every connection to its own session worker, which
owns an isolated context (buffer table, handle counter, sequence state) for
the lifetime of the connection and releases everything when the client goes
away. Device memory is a single pool shared first come, first served. Kernels
run synchronously inside the Launch request on a shared lane scheduler that
caps concurrent lanes across all sessions and hands out steps in FIFO order,
so concurrent launches interleave instead of queueing behind each other.
"""

from __future__ import annotations

import argparse
import collections
import contextlib
import itertools
import logging
import os
import signal
import socket
import sys
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

from . import protocol as P
from .riskcore import KERNEL_NAME, MalformedBlob, RangeOutOfBounds, RiskError, risk_kernel

log = logging.getLogger("aaas.server")

DEFAULT_MEM_CAP = 4 << 30


class BindFailure(OSError):
    pass


class KernelError(Exception):
    """Raised by kernels for bad launches; ``status`` picks the response code."""

    def __init__(self, message: str, status: P.Status = P.Status.KERNEL_FAILURE):
        super().__init__(message)
        self.status = status


# --- lane scheduling ---------------------------------------------------------------

class FairGate:
    """Counting semaphore that admits waiters strictly in arrival order."""

    def __init__(self, permits: int):
        self._permits = permits
        self._queue: collections.deque = collections.deque()
        self._cond = threading.Condition()

    @contextlib.contextmanager
    def hold(self):
        token = object()
        with self._cond:
            self._queue.append(token)
            while self._queue[0] is not token or self._permits == 0:
                self._cond.wait()
            self._queue.popleft()
            self._permits -= 1
            self._cond.notify_all()
        try:
            yield
        finally:
            with self._cond:
                self._permits += 1
                self._cond.notify_all()


class LaneScheduler:
    """Executor shared by all sessions; ``max_lanes`` bounds concurrent work steps."""

    def __init__(self, max_lanes: int):
        self.max_lanes = max_lanes
        self._gate = FairGate(max_lanes)

    def bind(self, lanes: int) -> "_KernelLanes":
        return _KernelLanes(self, max(1, min(lanes, self.max_lanes)))

    def step(self):
        return self._gate.hold()


@dataclass
class _KernelLanes:
    scheduler: LaneScheduler
    lanes: int

    def run(self, fns: Sequence[Callable[[], None]]) -> None:
        if len(fns) == 1:
            fns[0]()
            return
        with ThreadPoolExecutor(max_workers=len(fns), thread_name_prefix="lane") as pool:
            for fut in [pool.submit(fn) for fn in fns]:
                fut.result()

    def step(self):
        return self.scheduler.step()


# --- kernels ---------------------------------------------------------------------------

@dataclass
class KernelCall:
    buffers: list[bytearray]
    scalars: list
    lanes: int
    chunk_size: int
    executor: _KernelLanes


@dataclass(frozen=True)
class KernelEntry:
    name: str
    params: tuple[P.ArgKind, ...]
    fn: Callable[[KernelCall], None]


def _aggregate_risk(call: KernelCall) -> None:
    yet, elt, layer, out = call.buffers
    begin, end = call.scalars
    try:
        risk_kernel(yet, elt, layer, out, call.executor.lanes, call.chunk_size, (begin, end), call.executor)
    except RangeOutOfBounds as exc:
        raise KernelError(str(exc), P.Status.RANGE_ERROR) from exc
    except (MalformedBlob, RiskError) as exc:
        raise KernelError(str(exc)) from exc


B, U = P.ArgKind.BUFFER, P.ArgKind.U64
AGGREGATE_RISK = KernelEntry(KERNEL_NAME, (B, B, B, B, U, U), _aggregate_risk)


def default_registry() -> Mapping[str, KernelEntry]:
    return {AGGREGATE_RISK.name: AGGREGATE_RISK}


# --- memory ------------------------------------------------------------------------------

class DevicePool:
    """Global device-memory accounting, first come first served."""

    def __init__(self, capacity: int):
        self.capacity = capacity
        self.in_use = 0
        self._lock = threading.Lock()

    def reserve(self, size: int) -> bool:
        with self._lock:
            if self.in_use + size > self.capacity:
                return False
            self.in_use += size
            return True

    def release(self, size: int) -> None:
        with self._lock:
            self.in_use -= size


# --- sessions ------------------------------------------------------------------------------

@dataclass
class ServerConfig:
    host: str = "127.0.0.1"
    port: int = 0
    memory_cap: int = DEFAULT_MEM_CAP
    max_lanes: int = field(default_factory=lambda: os.cpu_count() or 1)
    max_sessions: int = 16
    device_id: int = 0
    max_payload: int = P.DEFAULT_MAX_PAYLOAD

    def __post_init__(self):
        if self.memory_cap <= 0:
            raise ValueError("memory_cap must be > 0")
        if self.max_lanes < 1:
            raise ValueError("max_lanes must be >= 1")
        if self.max_sessions < 1:
            raise ValueError("max_sessions must be >= 1")


@dataclass
class SessionContext:
    session_id: int
    buffers: dict[int, bytearray] = field(default_factory=dict)
    bytes_in_use: int = 0
    kernel_name: str | None = None
    next_handle: int = 1
    validator: P.SequenceValidator = field(default_factory=P.SequenceValidator)

    @property
    def finished(self) -> bool:
        return self.validator.finished


class Daemon:
    def __init__(self, config: ServerConfig, registry: Mapping[str, KernelEntry] | None = None):
        self.config = config
        self.registry = dict(registry or default_registry())
        self.pool = DevicePool(config.memory_cap)
        self.lanes = LaneScheduler(config.max_lanes)
        self._ids = itertools.count(1)
        self._sessions: dict[int, tuple[socket.socket, threading.Thread]] = {}
        self._slots = threading.Lock()
        self._stop = threading.Event()
        self._listener: socket.socket | None = None
        self._acceptor: threading.Thread | None = None
        self.address: tuple[str, int] | None = None

    # -- command handling (socket free, used directly by tests) --

    def new_context(self) -> SessionContext:
        return SessionContext(next(self._ids))

    def handle_command(self, ctx: SessionContext, cmd: P.Command) -> P.Message:
        try:
            ctx.validator.check(cmd)
        except P.ProtocolViolation as exc:
            return P.Failure(cmd.MSG_TYPE, exc.status, str(exc))
        handler = getattr(self, f"_on_{type(cmd).__name__}")
        resp = handler(ctx, cmd)
        if not isinstance(resp, P.Failure):
            ctx.validator.accept(cmd)
        return resp

    def _on_Hello(self, ctx, cmd: P.Hello):
        if cmd.client_version != P.VERSION:
            return P.Failure(cmd.MSG_TYPE, P.Status.PROTOCOL_ERROR, f"unsupported client version {cmd.client_version}")
        if cmd.kernel_name not in self.registry:
            return P.Failure(cmd.MSG_TYPE, P.Status.UNKNOWN_KERNEL, f"no kernel named {cmd.kernel_name!r}")
        ctx.kernel_name = cmd.kernel_name
        return P.HelloAck(self.config.device_id, self.config.memory_cap, self.config.max_lanes)

    def _on_AllocBuffer(self, ctx, cmd: P.AllocBuffer):
        if not self.pool.reserve(cmd.size):
            return P.Failure(cmd.MSG_TYPE, P.Status.OUT_OF_DEVICE_MEMORY,
                             f"{cmd.size} bytes requested, {self.pool.capacity - self.pool.in_use} free")
        try:
            region = bytearray(cmd.size)
        except MemoryError:
            self.pool.release(cmd.size)
            return P.Failure(cmd.MSG_TYPE, P.Status.OUT_OF_DEVICE_MEMORY, "host allocation failed")
        handle = ctx.next_handle
        ctx.next_handle += 1
        ctx.buffers[handle] = region
        ctx.bytes_in_use += cmd.size
        ctx.validator.allocated(handle)
        return P.AllocAck(handle)

    def _on_TransferToDevice(self, ctx, cmd: P.TransferToDevice):
        region = ctx.buffers[cmd.handle]
        end = cmd.offset + len(cmd.data)
        if end > len(region):
            return P.Failure(cmd.MSG_TYPE, P.Status.RANGE_ERROR, f"write [{cmd.offset}, {end}) exceeds buffer of {len(region)}")
        region[cmd.offset:end] = cmd.data
        return P.TransferToDeviceAck()

    def _on_TransferToHost(self, ctx, cmd: P.TransferToHost):
        region = ctx.buffers[cmd.handle]
        end = cmd.offset + cmd.length
        if end > len(region):
            return P.Failure(cmd.MSG_TYPE, P.Status.RANGE_ERROR, f"read [{cmd.offset}, {end}) exceeds buffer of {len(region)}")
        if cmd.length + 4 > self.config.max_payload:
            return P.Failure(cmd.MSG_TYPE, P.Status.RANGE_ERROR, "read larger than the maximum payload")
        return P.TransferToHostAck(bytes(region[cmd.offset:end]))

    def _on_LaunchKernel(self, ctx, cmd: P.LaunchKernel):
        entry = self.registry.get(cmd.kernel_name)
        if entry is None:
            return P.Failure(cmd.MSG_TYPE, P.Status.UNKNOWN_KERNEL, f"no kernel named {cmd.kernel_name!r}")
        if cmd.lanes == 0 or cmd.chunk_size == 0:
            return P.Failure(cmd.MSG_TYPE, P.Status.PROTOCOL_ERROR, "lanes and chunk_size must be >= 1")
        kinds = tuple(P.ArgKind(a.kind) for a in cmd.args)
        if kinds != entry.params:
            return P.Failure(cmd.MSG_TYPE, P.Status.PROTOCOL_ERROR,
                             f"{entry.name} expects {[k.name for k in entry.params]}, got {[k.name for k in kinds]}")
        call = KernelCall(
            buffers=[ctx.buffers[a.value] for a in cmd.args if a.kind == P.ArgKind.BUFFER],
            scalars=[a.value for a in cmd.args if a.kind != P.ArgKind.BUFFER],
            lanes=cmd.lanes,
            chunk_size=cmd.chunk_size,
            executor=self.lanes.bind(cmd.lanes),
        )
        started = time.perf_counter()
        try:
            entry.fn(call)
        except KernelError as exc:
            return P.Failure(cmd.MSG_TYPE, exc.status, str(exc))
        except Exception as exc:  # contain any kernel crash to this request
            log.exception("kernel %s failed in session %d", entry.name, ctx.session_id)
            return P.Failure(cmd.MSG_TYPE, P.Status.KERNEL_FAILURE, f"{type(exc).__name__}: {exc}")
        log.debug("session %d: %s ran in %.6fs", ctx.session_id, entry.name, time.perf_counter() - started)
        return P.LaunchAck()

    def _on_FreeBuffer(self, ctx, cmd: P.FreeBuffer):
        region = ctx.buffers.pop(cmd.handle)
        ctx.bytes_in_use -= len(region)
        self.pool.release(len(region))
        return P.FreeAck()

    def _on_Quit(self, ctx, cmd: P.Quit):
        return P.QuitAck()

    def release(self, ctx: SessionContext) -> None:
        for handle in list(ctx.buffers):
            region = ctx.buffers.pop(handle)
            self.pool.release(len(region))
        ctx.bytes_in_use = 0

    # -- networking --

    def start(self) -> tuple[str, int]:
        """Bind and start accepting in the background; returns the bound address."""
        try:
            sock = socket.create_server((self.config.host, self.config.port), reuse_port=False)
        except OSError as exc:
            raise BindFailure(exc.errno, f"cannot bind {self.config.host}:{self.config.port}: {exc.strerror}") from exc
        sock.settimeout(0.2)
        self._listener = sock
        self.address = sock.getsockname()[:2]
        self._acceptor = threading.Thread(target=self._accept_loop, name="acceptor", daemon=True)
        self._acceptor.start()
        log.info("listening on %s:%d (mem_cap=%d, max_lanes=%d, max_sessions=%d)",
                 *self.address, self.config.memory_cap, self.config.max_lanes, self.config.max_sessions)
        return self.address

    def _accept_loop(self) -> None:
        while not self._stop.is_set():
            try:
                conn, peer = self._listener.accept()
            except socket.timeout:
                continue
            except OSError:
                break
            conn.settimeout(None)
            conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            with self._slots:
                full = len(self._sessions) >= self.config.max_sessions
                if not full:
                    ctx = self.new_context()
                    t = threading.Thread(target=self._serve_session, args=(conn, peer, ctx),
                                         name=f"session-{ctx.session_id}", daemon=True)
                    self._sessions[ctx.session_id] = (conn, t)
            if full:
                threading.Thread(target=self._refuse, args=(conn, peer), daemon=True).start()
            else:
                t.start()
        self._listener.close()

    def _refuse(self, conn: socket.socket, peer) -> None:
        log.warning("refusing %s: %d sessions active", peer, self.config.max_sessions)
        try:
            conn.settimeout(5.0)
            msg, rid = P.read_frame(conn, self.config.max_payload)
            request = msg.MSG_TYPE if not P.is_response(msg) else P.MsgType.HELLO
            P.write_frame(conn, P.Failure(request, P.Status.PROTOCOL_ERROR, "server at max_sessions"), rid)
        except (OSError, P.ProtocolError):
            pass
        finally:
            conn.close()

    def _serve_session(self, conn: socket.socket, peer, ctx: SessionContext) -> None:
        log.info("session %d: connected from %s", ctx.session_id, peer)
        try:
            while not ctx.finished:
                try:
                    msg, rid = P.read_frame(conn, self.config.max_payload)
                except P.ProtocolError as exc:
                    log.warning("session %d: bad frame: %s", ctx.session_id, exc)
                    P.write_frame(conn, P.Failure(P.MsgType.HELLO, P.Status.PROTOCOL_ERROR, str(exc)), 0)
                    break
                if P.is_response(msg):
                    P.write_frame(conn, P.Failure(P.MsgType.HELLO, P.Status.PROTOCOL_ERROR, "unexpected response frame"), rid)
                    break
                resp = self.handle_command(ctx, msg)
                P.write_frame(conn, resp, rid, self.config.max_payload)
                if isinstance(msg, P.Hello) and isinstance(resp, P.Failure):
                    break
        except (ConnectionError, OSError) as exc:
            log.info("session %d: connection lost: %s", ctx.session_id, exc)
        finally:
            self.release(ctx)
            conn.close()
            with self._slots:
                self._sessions.pop(ctx.session_id, None)
            log.info("session %d: closed", ctx.session_id)

    @property
    def active_sessions(self) -> int:
        with self._slots:
            return len(self._sessions)

    def shutdown(self, drain_timeout: float = 30.0) -> None:
        """Stop accepting, wait for sessions to finish, then cut any stragglers."""
        self._stop.set()
        if self._acceptor is not None:
            self._acceptor.join()
        with self._slots:
            sessions = list(self._sessions.values())
        for _, t in sessions:
            t.join(drain_timeout)
        with self._slots:
            stragglers = list(self._sessions.values())
        for conn, t in stragglers:
            with contextlib.suppress(OSError):
                conn.shutdown(socket.SHUT_RDWR)
            t.join(5.0)

    def __enter__(self):
        if self.address is None:
            self.start()
        return self

    def __exit__(self, *exc):
        self.shutdown(drain_timeout=5.0)


def serve(config: ServerConfig, registry: Mapping[str, KernelEntry] | None = None,
          ready: Callable[[tuple[str, int]], None] | None = None) -> None:
    """Run a daemon until SIGINT/SIGTERM (main thread) or process exit."""
    daemon = Daemon(config, registry)
    address = daemon.start()
    if ready:
        ready(address)
    stop = threading.Event()
    if threading.current_thread() is threading.main_thread():
        for sig in (signal.SIGINT, signal.SIGTERM):
            signal.signal(sig, lambda *_: stop.set())
    stop.wait()
    log.info("shutting down: draining %d sessions", daemon.active_sessions)
    daemon.shutdown()


def parse_bytes(text: str) -> int:
    units = {"K": 1 << 10, "M": 1 << 20, "G": 1 << 30, "T": 1 << 40}
    text = text.strip().upper().removesuffix("B").removesuffix("I")
    if text and text[-1] in units:
        return int(float(text[:-1]) * units[text[-1]])
    return int(text)


def parse_bind(text: str) -> tuple[str, int]:
    host, sep, port = text.rpartition(":")
    if not sep or not port.isdigit():
        raise argparse.ArgumentTypeError(f"expected HOST:PORT, got {text!r}")
    return host.strip("[]") or "0.0.0.0", int(port)


def main(argv: list[str] | None = None) -> int:
    ap = argparse.ArgumentParser(prog="aaas-server", description="Remote compute offload daemon.")
    ap.add_argument("--bind", type=parse_bind, default=("127.0.0.1", 9000), metavar="HOST:PORT")
    ap.add_argument("--mem-cap", type=parse_bytes, default=DEFAULT_MEM_CAP, metavar="BYTES",
                    help="simulated device memory, e.g. 4G (default 4 GiB)")
    ap.add_argument("--max-lanes", type=int, default=os.cpu_count() or 1, metavar="N")
    ap.add_argument("--max-sessions", type=int, default=16, metavar="N")
    ap.add_argument("--device-id", type=int, default=0)
    ap.add_argument("--log-level", default="INFO")
    args = ap.parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), stream=sys.stderr,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        config = ServerConfig(args.bind[0], args.bind[1], args.mem_cap, args.max_lanes,
                              args.max_sessions, args.device_id)
    except ValueError as exc:
        ap.error(str(exc))

    def ready(addr):
        print(f"aaas-server listening on {addr[0]}:{addr[1]}", flush=True)

    try:
        serve(config, ready=ready)
    except BindFailure as exc:
        print(f"aaas-server: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
