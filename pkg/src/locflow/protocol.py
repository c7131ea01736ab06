"""Messages exchanged between workers, clients and the server.

A frame on the wire is a 4-byte big-endian length followed by a UTF-8 body.
The body is a canonical JSON envelope ``{"body":..., "type":..., "version":1}``
(see PROTOCOL.md for the field-by-field schema).  ``decode`` never raises
anything other than :class:`MalformedMessage` or :class:`VersionMismatch`.
"""

from __future__ import annotations

import enum
import json
import socket
import struct
from dataclasses import dataclass, field
from typing import Any

from . import serial
from .errors import LocflowError, MalformedMessage, VersionMismatch, rebuild
from .model import ApplicationSpec, EnvironmentBundle, FileId, FileTemplate, Patch, check_name, sha256_hex

PROTOCOL_VERSION = 1
HEADER = struct.Struct(">I")
MAX_FRAME_BYTES = 256 * 1024 * 1024


class Purpose(str, enum.Enum):
    APP = "APP"
    ENV = "ENV"
    PATCH = "PATCH"


class ReplyKind(str, enum.Enum):
    ASSIGNMENT = "ASSIGNMENT"
    GET_INPUT_ASSIGNMENT = "GET_INPUT_ASSIGNMENT"
    NO_WORK = "NO_WORK"


class UploadStatus(str, enum.Enum):
    SUCCESS = "SUCCESS"
    ERROR = "ERROR"


@dataclass(frozen=True)
class Hardware:
    cpu_count: int = 1
    benchmark_gflops: float = 1.0
    memory_mb: int = 0
    disk_mb: int = 0


@dataclass(frozen=True)
class Register:
    user_id: str
    hardware: Hardware
    group_id: str | None = None
    client_id: str | None = None
    protocol_version: int = PROTOCOL_VERSION


@dataclass(frozen=True)
class RegisterReply:
    client_id: str


@dataclass(frozen=True)
class WorkRequest:
    client_id: str
    hardware: Hardware
    inventory: list[FileId] = field(default_factory=list)
    protocol_version: int = PROTOCOL_VERSION

    def __post_init__(self):
        names = [f.name for f in self.inventory]
        if len(set(names)) != len(names):
            raise ValueError("inventory names must be distinct")


@dataclass(frozen=True)
class ManifestEntry:
    file: FileId
    purpose: Purpose
    signature: bytes | None = None
    entry: bool = False

    def __post_init__(self):
        if self.purpose is Purpose.APP and not self.signature:
            raise ValueError(f"APP file {self.file.name!r} carries no signature")


@dataclass(frozen=True)
class InventoryQuery:
    names: list[str]

    def __post_init__(self):
        for n in self.names:
            check_name(n)


@dataclass(frozen=True)
class InventoryAnswer:
    client_id: str
    query: list[str]
    held: list[str]

    def __post_init__(self):
        if not set(self.held) <= set(self.query):
            raise ValueError("answer names must be a subset of the query")


@dataclass(frozen=True)
class WorkReply:
    kind: ReplyKind
    result_id: str | None = None
    wu_id: str | None = None
    deadline_at: float | None = None
    manifest: list[ManifestEntry] = field(default_factory=list)
    inputs: list[str] = field(default_factory=list)
    output: FileTemplate | None = None
    max_result_size_bytes: int | None = None
    backoff_secs: int | None = None
    inventory_query: InventoryQuery | None = None

    def __post_init__(self):
        if self.kind is ReplyKind.NO_WORK:
            if self.backoff_secs is None or self.backoff_secs < 0:
                raise ValueError("NO_WORK needs a non-negative backoff_secs")
            if self.manifest or self.result_id:
                raise ValueError("NO_WORK carries no assignment")
            return
        if not self.result_id or not self.wu_id or self.deadline_at is None:
            raise ValueError("assignments need result_id, wu_id and deadline_at")
        if sum(1 for m in self.manifest if m.entry) != 1:
            raise ValueError("assignment manifest needs exactly one entry executable")
        if self.kind is ReplyKind.ASSIGNMENT:
            clash = {m.file.name for m in self.manifest} & set(self.inputs)
            if clash:
                raise ValueError(f"assignment manifest lists input files {sorted(clash)}")


@dataclass(frozen=True)
class OutputPayload:
    file: FileId
    data: bytes

    def __post_init__(self):
        if len(self.data) != self.file.size_bytes:
            raise ValueError(f"payload for {self.file.name!r} has {len(self.data)} bytes, "
                             f"declared {self.file.size_bytes}")
        if sha256_hex(self.data) != self.file.digest:
            raise ValueError(f"payload for {self.file.name!r} does not match its digest")


@dataclass(frozen=True)
class ResultUpload:
    client_id: str
    result_id: str
    status: UploadStatus
    cpu_seconds: float = 0.0
    outputs: list[OutputPayload] = field(default_factory=list)

    def __post_init__(self):
        if self.cpu_seconds < 0:
            raise ValueError("cpu_seconds must be non-negative")


@dataclass(frozen=True)
class Ack:
    inventory_query: InventoryQuery | None = None


@dataclass(frozen=True)
class DownloadRequest:
    digest: str
    purpose: Purpose
    client_id: str | None = None


@dataclass(frozen=True)
class DownloadReply:
    file: FileId
    data: bytes


@dataclass(frozen=True)
class SubmitApplication:
    app: ApplicationSpec
    blobs: list[bytes]


@dataclass(frozen=True)
class SubmitApplicationReply:
    app_id: str


@dataclass(frozen=True)
class WorkunitSpec:
    """A workunit as submitted; ``key`` is local to the submission."""

    key: str
    app_id: str
    env_id: str
    output: FileTemplate
    patch_id: str | None = None
    required_inputs: list[str] = field(default_factory=list)
    get_input_app: str | None = None
    predecessors: list[str] = field(default_factory=list)
    max_result_size_bytes: int = 64 * 1024 * 1024
    deadline_secs: int = 3600
    max_retries: int = 2


@dataclass(frozen=True)
class SubmitJob:
    name: str
    workunits: list[WorkunitSpec]
    environments: list[EnvironmentBundle] = field(default_factory=list)
    patches: list[Patch] = field(default_factory=list)
    blobs: list[bytes] = field(default_factory=list)


@dataclass(frozen=True)
class SubmitJobReply:
    job_id: str
    wu_ids: list[str]


@dataclass(frozen=True)
class StatusRequest:
    job_id: str | None = None


@dataclass(frozen=True)
class WorkunitStatus:
    wu_id: str
    state: str
    client_id: str | None = None


@dataclass(frozen=True)
class ClientStatus:
    client_id: str
    user_id: str
    inventory_files: int
    inventory_bytes: int
    last_contact: float


@dataclass(frozen=True)
class CreditRow:
    name: str
    credit: float


@dataclass(frozen=True)
class StatusReply:
    counts: dict[str, int]
    workunits: list[WorkunitStatus] = field(default_factory=list)
    clients: list[ClientStatus] = field(default_factory=list)
    users: list[CreditRow] = field(default_factory=list)
    groups: list[CreditRow] = field(default_factory=list)
    jobs: list[str] = field(default_factory=list)


@dataclass(frozen=True)
class FetchRequest:
    job_id: str
    include_all: bool = False


@dataclass(frozen=True)
class FetchReply:
    digest: str
    archive: bytes


@dataclass(frozen=True)
class ErrorReply:
    code: str
    message: str
    details: dict[str, Any] = field(default_factory=dict)

    @classmethod
    def from_exception(cls, exc: LocflowError) -> ErrorReply:
        return cls(exc.code, exc.message, {k: serial.to_wire(v) for k, v in exc.details.items()})


MESSAGE_TYPES: dict[str, type] = {
    cls.__name__: cls
    for cls in [
        Register, RegisterReply, WorkRequest, WorkReply, InventoryQuery, InventoryAnswer,
        ResultUpload, Ack, DownloadRequest, DownloadReply, SubmitApplication,
        SubmitApplicationReply, SubmitJob, SubmitJobReply, StatusRequest, StatusReply,
        FetchRequest, FetchReply, ErrorReply,
    ]
}


def encode(message: Any) -> bytes:
    name = type(message).__name__
    if MESSAGE_TYPES.get(name) is not type(message):
        raise TypeError(f"not a protocol message: {message!r}")
    return serial.dumps({"type": name, "version": PROTOCOL_VERSION, "body": message})


def _reject_constant(token: str):
    raise ValueError(f"non-finite number {token}")


def _unique_keys(pairs):
    obj = {}
    for k, v in pairs:
        if k in obj:
            raise ValueError(f"duplicate key {k!r}")
        obj[k] = v
    return obj


def decode(data: bytes) -> Any:
    try:
        text = bytes(data).decode("utf-8")
    except UnicodeDecodeError as exc:
        raise MalformedMessage(exc.start, "invalid UTF-8") from None
    try:
        raw = json.loads(text, parse_constant=_reject_constant, object_pairs_hook=_unique_keys)
    except json.JSONDecodeError as exc:
        raise MalformedMessage(exc.pos, exc.msg) from None
    except (ValueError, RecursionError) as exc:
        raise MalformedMessage(0, str(exc) or "unparseable") from None
    if not isinstance(raw, dict) or set(raw) != {"type", "version", "body"}:
        raise MalformedMessage("$", "envelope must have exactly type, version and body")
    version = raw["version"]
    if isinstance(version, bool) or not isinstance(version, int):
        raise MalformedMessage("$.version", "expected integer")
    if version != PROTOCOL_VERSION:
        raise VersionMismatch(f"protocol version {version} not supported (want {PROTOCOL_VERSION})")
    cls = MESSAGE_TYPES.get(raw["type"]) if isinstance(raw["type"], str) else None
    if cls is None:
        raise MalformedMessage("$.type", f"unknown message type {raw['type']!r}")
    try:
        return serial.from_wire(cls, raw["body"], "$.body")
    except MalformedMessage:
        raise
    except (ValueError, TypeError, LocflowError, RecursionError) as exc:
        raise MalformedMessage("$.body", str(exc)) from None


def frame(body: bytes) -> bytes:
    if len(body) > MAX_FRAME_BYTES:
        raise ValueError(f"frame of {len(body)} bytes exceeds limit")
    return HEADER.pack(len(body)) + body


def unframe(data: bytes) -> bytes:
    """Body of a single complete frame; truncation or trailing bytes are malformed."""
    if len(data) < HEADER.size:
        raise MalformedMessage(len(data), "truncated length prefix")
    (length,) = HEADER.unpack_from(data)
    if length > MAX_FRAME_BYTES:
        raise MalformedMessage(0, f"frame length {length} exceeds limit")
    end = HEADER.size + length
    if len(data) < end:
        raise MalformedMessage(len(data), f"truncated frame: {len(data) - HEADER.size} of {length} bytes")
    if len(data) > end:
        raise MalformedMessage(end, "trailing bytes after frame")
    return bytes(data[HEADER.size:end])


def pack(message: Any) -> bytes:
    return frame(encode(message))


def unpack(data: bytes) -> Any:
    return decode(unframe(data))


class FrameDecoder:
    """Incremental splitter for a stream of frames."""

    def __init__(self, max_frame: int = MAX_FRAME_BYTES):
        self.max_frame = max_frame
        self._buf = bytearray()

    def feed(self, data: bytes) -> list[bytes]:
        self._buf.extend(data)
        frames = []
        while len(self._buf) >= HEADER.size:
            (length,) = HEADER.unpack_from(self._buf)
            if length > self.max_frame:
                raise MalformedMessage(0, f"frame length {length} exceeds limit")
            if len(self._buf) < HEADER.size + length:
                break
            frames.append(bytes(self._buf[HEADER.size:HEADER.size + length]))
            del self._buf[:HEADER.size + length]
        return frames

    @property
    def pending(self) -> int:
        return len(self._buf)


def recv_exact(sock: socket.socket, n: int) -> bytes:
    chunks = []
    got = 0
    while got < n:
        chunk = sock.recv(min(n - got, 1 << 20))
        if not chunk:
            raise MalformedMessage(got, f"connection closed after {got} of {n} bytes")
        chunks.append(chunk)
        got += len(chunk)
    return b"".join(chunks)


def send_message(sock: socket.socket, message: Any) -> None:
    sock.sendall(pack(message))


def recv_message(sock: socket.socket, max_frame: int = MAX_FRAME_BYTES) -> Any:
    (length,) = HEADER.unpack(recv_exact(sock, HEADER.size))
    if length > max_frame:
        raise MalformedMessage(0, f"frame length {length} exceeds limit")
    return decode(recv_exact(sock, length))


def call(address: tuple[str, int], message: Any, timeout: float = 30.0) -> Any:
    """One request/response exchange over a fresh TCP connection.

    In-band ``ErrorReply`` answers are raised as the matching exception.
    """
    with socket.create_connection(address, timeout=timeout) as sock:
        send_message(sock, message)
        reply = recv_message(sock)
    if isinstance(reply, ErrorReply):
        raise rebuild(reply.code, reply.message, reply.details)
    return reply


def parse_address(text: str) -> tuple[str, int]:
    host, _, port = text.rpartition(":")
    if not host or not port.isdigit():
        raise ValueError(f"address must look like host:port, got {text!r}")
    return host.strip("[]"), int(port)
