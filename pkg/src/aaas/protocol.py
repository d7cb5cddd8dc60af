"""Binary request/response protocol between offload clients and the daemon.

Every message travels in one frame: a 24-byte little-endian header followed by
``payload_len`` bytes::

    magic "AAAS" | u16 version=1 | u16 msg_type | u64 request_id | u64 payload_len

Requests use msg_type 1..7; the matching response uses ``0x80 + msg_type`` and
the same request_id. Response payloads start with a u32 status. Byte layouts
for every payload, with hex dumps, are in ``docs/protocol.md``.
"""

from __future__ import annotations

import enum
import socket
import struct
from dataclasses import dataclass
from typing import ClassVar, Iterable, Union

MAGIC = b"AAAS"
VERSION = 1
HEADER = struct.Struct("<4sHHQQ")
HEADER_SIZE = HEADER.size
DEFAULT_MAX_PAYLOAD = 1 << 30
RESPONSE_BIT = 0x80
assert HEADER_SIZE == 24


class MsgType(enum.IntEnum):
    HELLO = 1
    ALLOC_BUFFER = 2
    TRANSFER_TO_DEVICE = 3
    TRANSFER_TO_HOST = 4
    LAUNCH_KERNEL = 5
    FREE_BUFFER = 6
    QUIT = 7


class Status(enum.IntEnum):
    OK = 0
    UNKNOWN_KERNEL = 1
    OUT_OF_DEVICE_MEMORY = 2
    BAD_HANDLE = 3
    PROTOCOL_ERROR = 4
    KERNEL_FAILURE = 5
    RANGE_ERROR = 6


class ArgKind(enum.IntEnum):
    U64 = 0
    F64 = 1
    BUFFER = 2


class ProtocolError(Exception):
    """Base class for framing and sequencing errors."""


class BadMagic(ProtocolError):
    pass


class UnsupportedVersion(ProtocolError):
    pass


class OversizedPayload(ProtocolError):
    pass


class TruncatedFrame(ProtocolError):
    pass


class UnknownMsgType(ProtocolError):
    pass


class MalformedPayload(ProtocolError):
    pass


class ProtocolViolation(ProtocolError):
    def __init__(self, step: str, message: str, status: Status = Status.PROTOCOL_ERROR):
        super().__init__(f"{step}: {message}")
        self.step = step
        self.status = status


# --- messages ----------------------------------------------------------------

@dataclass(frozen=True)
class Arg:
    kind: ArgKind
    value: Union[int, float]

    @classmethod
    def u64(cls, v: int) -> "Arg":
        return cls(ArgKind.U64, int(v))

    @classmethod
    def f64(cls, v: float) -> "Arg":
        return cls(ArgKind.F64, float(v))

    @classmethod
    def buffer(cls, handle: int) -> "Arg":
        return cls(ArgKind.BUFFER, int(handle))


@dataclass(frozen=True)
class Hello:
    kernel_name: str
    client_version: int = VERSION
    MSG_TYPE: ClassVar[MsgType] = MsgType.HELLO


@dataclass(frozen=True)
class AllocBuffer:
    size: int
    MSG_TYPE: ClassVar[MsgType] = MsgType.ALLOC_BUFFER


@dataclass(frozen=True)
class TransferToDevice:
    handle: int
    offset: int
    data: bytes
    MSG_TYPE: ClassVar[MsgType] = MsgType.TRANSFER_TO_DEVICE


@dataclass(frozen=True)
class TransferToHost:
    handle: int
    offset: int
    length: int
    MSG_TYPE: ClassVar[MsgType] = MsgType.TRANSFER_TO_HOST


@dataclass(frozen=True)
class LaunchKernel:
    kernel_name: str
    lanes: int
    chunk_size: int
    args: tuple[Arg, ...] = ()
    MSG_TYPE: ClassVar[MsgType] = MsgType.LAUNCH_KERNEL


@dataclass(frozen=True)
class FreeBuffer:
    handle: int
    MSG_TYPE: ClassVar[MsgType] = MsgType.FREE_BUFFER


@dataclass(frozen=True)
class Quit:
    MSG_TYPE: ClassVar[MsgType] = MsgType.QUIT


@dataclass(frozen=True)
class HelloAck:
    device_id: int
    memory_cap: int
    max_lanes: int
    MSG_TYPE: ClassVar[MsgType] = MsgType.HELLO


@dataclass(frozen=True)
class AllocAck:
    handle: int
    MSG_TYPE: ClassVar[MsgType] = MsgType.ALLOC_BUFFER


@dataclass(frozen=True)
class TransferToDeviceAck:
    MSG_TYPE: ClassVar[MsgType] = MsgType.TRANSFER_TO_DEVICE


@dataclass(frozen=True)
class TransferToHostAck:
    data: bytes
    MSG_TYPE: ClassVar[MsgType] = MsgType.TRANSFER_TO_HOST


@dataclass(frozen=True)
class LaunchAck:
    MSG_TYPE: ClassVar[MsgType] = MsgType.LAUNCH_KERNEL


@dataclass(frozen=True)
class FreeAck:
    MSG_TYPE: ClassVar[MsgType] = MsgType.FREE_BUFFER


@dataclass(frozen=True)
class QuitAck:
    MSG_TYPE: ClassVar[MsgType] = MsgType.QUIT


@dataclass(frozen=True)
class Failure:
    """Non-OK response to ``request``; the payload carries a diagnostic string."""

    request: MsgType
    status: Status
    message: str = ""


Command = Union[Hello, AllocBuffer, TransferToDevice, TransferToHost, LaunchKernel, FreeBuffer, Quit]
Ack = Union[HelloAck, AllocAck, TransferToDeviceAck, TransferToHostAck, LaunchAck, FreeAck, QuitAck]
Message = Union[Command, Ack, Failure]

COMMANDS = {c.MSG_TYPE: c for c in (Hello, AllocBuffer, TransferToDevice, TransferToHost, LaunchKernel, FreeBuffer, Quit)}
ACKS = {a.MSG_TYPE: a for a in (HelloAck, AllocAck, TransferToDeviceAck, TransferToHostAck, LaunchAck, FreeAck, QuitAck)}


def is_response(msg: Message) -> bool:
    return not isinstance(msg, tuple(COMMANDS.values()))


def msg_type_of(msg: Message) -> int:
    if isinstance(msg, Failure):
        return RESPONSE_BIT + int(msg.request)
    code = int(msg.MSG_TYPE)
    return code + RESPONSE_BIT if is_response(msg) else code


# --- payload codec -------------------------------------------------------------

_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")
_ARG = struct.Struct("<B8s")


def _str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return _U32.pack(len(raw)) + raw


def _arg(a: Arg) -> bytes:
    kind = ArgKind(a.kind)
    if kind is ArgKind.F64:
        value = struct.pack("<d", a.value)
    else:
        value = _U64.pack(a.value)
    return _ARG.pack(kind, value)


def payload_parts(msg: Message) -> list[bytes]:
    """Payload as a list of byte strings (bulk data is kept as its own part)."""
    try:
        if isinstance(msg, Failure):
            if Status(msg.status) is Status.OK:
                raise MalformedPayload("a failure response needs a non-OK status")
            return [_U32.pack(Status(msg.status)) + _str(msg.message)]
        if isinstance(msg, Hello):
            return [_str(msg.kernel_name) + _U32.pack(msg.client_version)]
        if isinstance(msg, AllocBuffer):
            return [_U64.pack(msg.size)]
        if isinstance(msg, TransferToDevice):
            return [struct.pack("<QQ", msg.handle, msg.offset), msg.data]
        if isinstance(msg, TransferToHost):
            return [struct.pack("<QQQ", msg.handle, msg.offset, msg.length)]
        if isinstance(msg, LaunchKernel):
            head = _str(msg.kernel_name) + struct.pack("<III", msg.lanes, msg.chunk_size, len(msg.args))
            return [head + b"".join(_arg(a) for a in msg.args)]
        if isinstance(msg, FreeBuffer):
            return [_U64.pack(msg.handle)]
        if isinstance(msg, Quit):
            return []
        ok = _U32.pack(Status.OK)
        if isinstance(msg, HelloAck):
            return [ok + struct.pack("<IQI", msg.device_id, msg.memory_cap, msg.max_lanes)]
        if isinstance(msg, AllocAck):
            return [ok + _U64.pack(msg.handle)]
        if isinstance(msg, TransferToHostAck):
            return [ok, msg.data]
        if isinstance(msg, (TransferToDeviceAck, LaunchAck, FreeAck, QuitAck)):
            return [ok]
    except struct.error as exc:
        raise MalformedPayload(f"cannot encode {type(msg).__name__}: {exc}") from exc
    raise TypeError(f"not a protocol message: {msg!r}")


class _Reader:
    def __init__(self, buf: memoryview):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> memoryview:
        if self.pos + n > len(self.buf):
            raise MalformedPayload(f"payload too short: need {n} bytes at {self.pos}, have {len(self.buf) - self.pos}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, st: struct.Struct):
        return st.unpack(self.take(st.size))

    def u32(self) -> int:
        return self.unpack(_U32)[0]

    def u64(self) -> int:
        return self.unpack(_U64)[0]

    def string(self) -> str:
        n = self.u32()
        try:
            return str(self.take(n), "utf-8")
        except UnicodeDecodeError as exc:
            raise MalformedPayload(f"string is not UTF-8: {exc}") from exc

    def rest(self) -> bytes:
        out = bytes(self.buf[self.pos:])
        self.pos = len(self.buf)
        return out

    def done(self) -> None:
        if self.pos != len(self.buf):
            raise MalformedPayload(f"{len(self.buf) - self.pos} unexpected trailing payload bytes")


def decode_payload(msg_type: int, payload) -> Message:
    r = _Reader(memoryview(payload).cast("B"))
    if msg_type in COMMANDS:
        kind = MsgType(msg_type)
        if kind is MsgType.HELLO:
            msg = Hello(r.string(), r.u32())
        elif kind is MsgType.ALLOC_BUFFER:
            msg = AllocBuffer(r.u64())
        elif kind is MsgType.TRANSFER_TO_DEVICE:
            h, off = r.u64(), r.u64()
            msg = TransferToDevice(h, off, r.rest())
        elif kind is MsgType.TRANSFER_TO_HOST:
            msg = TransferToHost(r.u64(), r.u64(), r.u64())
        elif kind is MsgType.LAUNCH_KERNEL:
            name = r.string()
            lanes, chunk, n = r.unpack(struct.Struct("<III"))
            args = []
            for _ in range(n):
                tag, raw = r.unpack(_ARG)
                if tag == ArgKind.F64:
                    args.append(Arg(ArgKind.F64, struct.unpack("<d", raw)[0]))
                elif tag in (ArgKind.U64, ArgKind.BUFFER):
                    args.append(Arg(ArgKind(tag), _U64.unpack(raw)[0]))
                else:
                    raise MalformedPayload(f"unknown argument tag {tag}")
            msg = LaunchKernel(name, lanes, chunk, tuple(args))
        elif kind is MsgType.FREE_BUFFER:
            msg = FreeBuffer(r.u64())
        else:
            msg = Quit()
        r.done()
        return msg

    request = msg_type - RESPONSE_BIT
    if request not in ACKS:
        raise UnknownMsgType(f"unknown message type 0x{msg_type:04x}")
    code = r.u32()
    try:
        status = Status(code)
    except ValueError:
        raise MalformedPayload(f"unknown status code {code}") from None
    if status is not Status.OK:
        msg = Failure(MsgType(request), status, r.string())
    elif request == MsgType.HELLO:
        msg = HelloAck(*r.unpack(struct.Struct("<IQI")))
    elif request == MsgType.ALLOC_BUFFER:
        msg = AllocAck(r.u64())
    elif request == MsgType.TRANSFER_TO_HOST:
        msg = TransferToHostAck(r.rest())
    else:
        msg = ACKS[MsgType(request)]()
    r.done()
    return msg


# --- frames ----------------------------------------------------------------------

@dataclass(frozen=True)
class FrameHeader:
    msg_type: int
    request_id: int
    payload_len: int


def pack_header(msg_type: int, request_id: int, payload_len: int) -> bytes:
    return HEADER.pack(MAGIC, VERSION, msg_type, request_id, payload_len)


def parse_header(buf, max_payload: int = DEFAULT_MAX_PAYLOAD) -> FrameHeader:
    if len(buf) < HEADER_SIZE:
        raise TruncatedFrame(f"need {HEADER_SIZE} header bytes, have {len(buf)}")
    magic, version, msg_type, request_id, payload_len = HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise BadMagic(f"bad magic {bytes(magic)!r}")
    if version != VERSION:
        raise UnsupportedVersion(f"unsupported protocol version {version}")
    if msg_type not in COMMANDS and msg_type - RESPONSE_BIT not in ACKS:
        raise UnknownMsgType(f"unknown message type 0x{msg_type:04x}")
    if payload_len > max_payload:
        raise OversizedPayload(f"payload of {payload_len} bytes exceeds limit {max_payload}")
    return FrameHeader(msg_type, request_id, payload_len)


def frame_parts(msg: Message, request_id: int, max_payload: int = DEFAULT_MAX_PAYLOAD) -> list[bytes]:
    parts = payload_parts(msg)
    size = sum(len(p) for p in parts)
    if size > max_payload:
        raise OversizedPayload(f"payload of {size} bytes exceeds limit {max_payload}")
    return [pack_header(msg_type_of(msg), request_id, size), *parts]


def encode_frame(msg: Message, request_id: int, max_payload: int = DEFAULT_MAX_PAYLOAD) -> bytes:
    return b"".join(frame_parts(msg, request_id, max_payload))


def decode_frame(buf, max_payload: int = DEFAULT_MAX_PAYLOAD) -> tuple[Message, int, int]:
    """Decode one frame from the front of ``buf``; returns (message, request_id, consumed)."""
    view = memoryview(buf).cast("B")
    head = parse_header(view[:HEADER_SIZE], max_payload)
    end = HEADER_SIZE + head.payload_len
    if len(view) < end:
        raise TruncatedFrame(f"frame needs {end} bytes, have {len(view)}")
    return decode_payload(head.msg_type, view[HEADER_SIZE:end]), head.request_id, end


# --- socket I/O ----------------------------------------------------------------------

def _recv_exact(sock: socket.socket, n: int) -> bytearray:
    buf = bytearray(n)
    view = memoryview(buf)
    got = 0
    while got < n:
        k = sock.recv_into(view[got:], min(n - got, 1 << 22))
        if k == 0:
            raise ConnectionError(f"peer closed connection after {got} of {n} bytes")
        got += k
    return buf


def read_frame(sock: socket.socket, max_payload: int = DEFAULT_MAX_PAYLOAD) -> tuple[Message, int]:
    """Read one frame; never consumes bytes past its end."""
    head = parse_header(_recv_exact(sock, HEADER_SIZE), max_payload)
    payload = _recv_exact(sock, head.payload_len) if head.payload_len else b""
    return decode_payload(head.msg_type, payload), head.request_id


def write_frame(sock: socket.socket, msg: Message, request_id: int, max_payload: int = DEFAULT_MAX_PAYLOAD) -> None:
    parts = frame_parts(msg, request_id, max_payload)
    if sum(len(p) for p in parts) < 1 << 16:
        sock.sendall(b"".join(parts))
    else:
        for p in parts:
            sock.sendall(p)


# --- sequencing ------------------------------------------------------------------------

STEP = {
    MsgType.HELLO: "initialise",
    MsgType.ALLOC_BUFFER: "allocate",
    MsgType.TRANSFER_TO_DEVICE: "copy-in",
    MsgType.LAUNCH_KERNEL: "launch",
    MsgType.TRANSFER_TO_HOST: "copy-out",
    MsgType.FREE_BUFFER: "release",
    MsgType.QUIT: "quit",
}


class SequenceValidator:
    """Per-session ordering rules.

    Hello must come first and only once, nothing may follow Quit, and copies,
    launches and frees may only name live handles. ``check`` inspects a command
    without changing state; the owner reports outcomes with ``allocated``,
    ``freed`` and ``accept``.
    """

    def __init__(self):
        self.started = False
        self.finished = False
        self.live: set[int] = set()

    def check(self, cmd: Command) -> None:
        step = STEP[cmd.MSG_TYPE]
        if self.finished:
            raise ProtocolViolation(step, "command after quit")
        if not self.started:
            if not isinstance(cmd, Hello):
                raise ProtocolViolation(step, "session must start with hello")
            return
        if isinstance(cmd, Hello):
            raise ProtocolViolation(step, "duplicate hello")
        for h in self._handles(cmd):
            if h not in self.live:
                raise ProtocolViolation(step, f"handle {h} is not allocated", Status.BAD_HANDLE)

    @staticmethod
    def _handles(cmd: Command) -> Iterable[int]:
        if isinstance(cmd, (TransferToDevice, TransferToHost, FreeBuffer)):
            return (cmd.handle,)
        if isinstance(cmd, LaunchKernel):
            return tuple(a.value for a in cmd.args if a.kind == ArgKind.BUFFER)
        return ()

    def accept(self, cmd: Command) -> None:
        if isinstance(cmd, Hello):
            self.started = True
        elif isinstance(cmd, Quit):
            self.finished = True
        elif isinstance(cmd, FreeBuffer):
            self.live.discard(cmd.handle)

    def allocated(self, handle: int) -> None:
        self.live.add(handle)


def validate_sequence(history: Iterable[Command]) -> bool:
    """Check a command history, assuming successful allocations receive handles 1, 2, 3, ..."""
    v = SequenceValidator()
    next_handle = 1
    for cmd in history:
        v.check(cmd)
        v.accept(cmd)
        if isinstance(cmd, AllocBuffer):
            v.allocated(next_handle)
            next_handle += 1
    return True
