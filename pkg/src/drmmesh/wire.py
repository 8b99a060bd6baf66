"""Message envelopes, framing, transcripts and transports.

Frames are a 4-byte big-endian length followed by the canonical JSON of an
:class:`Envelope`. The same framing runs over the deterministic in-process
:class:`SimTransport` and over TCP sockets (:class:`SocketTransport` /
:func:`serve`). Sockets carry plaintext frames: a deployment must put a
TLS-equivalent channel underneath.
"""

from __future__ import annotations

import enum
import logging
import socket
import socketserver
import struct
import threading
from collections.abc import Callable, Iterable, Iterator, Mapping
from dataclasses import dataclass, field
from typing import Any

from .hybrid import b64d, b64e, canonical_json, parse_json

log = logging.getLogger(__name__)

PROTOCOL_VERSION = 1
MAX_FRAME = 16 * 1024 * 1024
_LEN = struct.Struct(">I")


class WireError(Exception):
    pass


class SchemaError(WireError):
    pass


class TransportTimeout(WireError):
    pass


class RemoteError(WireError):
    """The peer answered with an ``error`` envelope."""

    def __init__(self, stage: str, reason: str, detail: str = "") -> None:
        super().__init__(f"{stage}/{reason}" + (f": {detail}" if detail else ""))
        self.stage = stage
        self.reason = reason
        self.detail = detail


class MessageType(str, enum.Enum):
    PURCHASE_OPEN = "purchase_open"
    PURCHASE_CHALLENGE = "purchase_challenge"
    PURCHASE_COMPLETE_REQUEST = "purchase_complete_request"
    PURCHASE_COMPLETE_RESPONSE = "purchase_complete_response"
    CERT_REQUEST = "cert_request"
    CERT_RESPONSE = "cert_response"
    EXECUTE_REQUEST = "execute_request"
    STREAM_CHUNK = "stream_chunk"
    ERROR = "error"
    CARD_COMMAND = "card_command"


#: Required body fields per message type.
SCHEMAS: dict[MessageType, frozenset[str]] = {
    MessageType.PURCHASE_OPEN: frozenset(),
    MessageType.PURCHASE_CHALLENGE: frozenset({"nonce"}),
    MessageType.PURCHASE_COMPLETE_REQUEST: frozenset(
        {"cert_chain", "pk_tmp", "signature", "rating", "content_id", "model", "quantity", "payment_token"}
    ),
    MessageType.PURCHASE_COMPLETE_RESPONSE: frozenset(
        {"content_id", "license_kem", "license_dem", "license_signature", "encrypted_ck"}
    ),
    MessageType.CERT_REQUEST: frozenset(),
    MessageType.CERT_RESPONSE: frozenset({"cert_chain"}),
    MessageType.EXECUTE_REQUEST: frozenset({"cert_id", "content_id"}),
    MessageType.STREAM_CHUNK: frozenset({"index", "total", "data", "resume_token"}),
    MessageType.ERROR: frozenset({"stage", "reason"}),
    MessageType.CARD_COMMAND: frozenset({"cmd"}),
}

#: Service paths and the request type each accepts.
ENDPOINTS: dict[str, MessageType] = {
    "POST /purchase/open": MessageType.PURCHASE_OPEN,
    "POST /purchase/complete": MessageType.PURCHASE_COMPLETE_REQUEST,
    "POST /cert": MessageType.CERT_REQUEST,
    "POST /execute": MessageType.EXECUTE_REQUEST,
}


@dataclass(frozen=True)
class Envelope:
    message_type: MessageType
    body: Mapping[str, Any]
    session_id: str = ""
    protocol_version: int = PROTOCOL_VERSION

    def validate(self) -> Envelope:
        if self.protocol_version != PROTOCOL_VERSION:
            raise SchemaError(f"unsupported protocol version {self.protocol_version}")
        if not isinstance(self.body, Mapping):
            raise SchemaError("body must be an object")
        missing = SCHEMAS[self.message_type] - set(self.body)
        if missing:
            raise SchemaError(f"{self.message_type.value} missing {sorted(missing)}")
        return self

    def to_dict(self) -> dict[str, Any]:
        return {
            "v": self.protocol_version,
            "type": self.message_type.value,
            "session": self.session_id,
            "body": dict(self.body),
        }

    def to_bytes(self) -> bytes:
        return canonical_json(self.to_dict())

    @classmethod
    def from_bytes(cls, data: bytes) -> Envelope:
        try:
            d = parse_json(data)
            env = cls(
                message_type=MessageType(d["type"]),
                body=d["body"],
                session_id=str(d.get("session", "")),
                protocol_version=int(d["v"]),
            )
        except (KeyError, ValueError, TypeError, UnicodeDecodeError) as exc:
            raise SchemaError(f"undecodable envelope: {exc}") from None
        return env.validate()

    @classmethod
    def error(cls, stage: str, reason: str, detail: str = "", session_id: str = "") -> Envelope:
        return cls(MessageType.ERROR, {"stage": stage, "reason": reason, "detail": detail}, session_id)


def raise_for_error(env: Envelope) -> Envelope:
    if env.message_type is MessageType.ERROR:
        raise RemoteError(env.body["stage"], env.body["reason"], env.body.get("detail", ""))
    return env


def frame(payload: bytes) -> bytes:
    if len(payload) > MAX_FRAME:
        raise WireError("frame too large")
    return _LEN.pack(len(payload)) + payload


def unframe(data: bytes) -> tuple[bytes, bytes]:
    """Split one frame off ``data``; return ``(payload, rest)``."""
    if len(data) < _LEN.size:
        raise WireError("truncated frame header")
    (n,) = _LEN.unpack_from(data)
    if n > MAX_FRAME:
        raise WireError("frame too large")
    end = _LEN.size + n
    if len(data) < end:
        raise WireError("truncated frame")
    return data[_LEN.size:end], data[end:]


def _recv_exact(sock: socket.socket, n: int) -> bytes | None:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            return None if not buf else bytes(buf)
        buf.extend(chunk)
    return bytes(buf)


def read_frame(sock: socket.socket) -> bytes | None:
    header = _recv_exact(sock, _LEN.size)
    if header is None:
        return None
    if len(header) < _LEN.size:
        raise WireError("connection closed mid-header")
    (n,) = _LEN.unpack(header)
    if n > MAX_FRAME:
        raise WireError("frame too large")
    payload = _recv_exact(sock, n) if n else b""
    if payload is None or len(payload) < n:
        raise WireError("connection closed mid-frame")
    return payload


# -- transcripts -------------------------------------------------------------

@dataclass(frozen=True)
class TranscriptEntry:
    direction: str  # "out" (client -> peer) or "in" (peer -> client)
    role: str
    envelope: Envelope
    timestamp: int

    def to_dict(self) -> dict[str, Any]:
        return {"dir": self.direction, "role": self.role, "ts": self.timestamp, "env": self.envelope.to_dict()}


class Transcript:
    """Append-only, thread-safe log of envelopes seen during one session."""

    def __init__(self, label: str = "") -> None:
        self.label = label
        self._entries: list[TranscriptEntry] = []
        self._lock = threading.Lock()
        self.complete = False

    def append(self, direction: str, role: str, envelope: Envelope, timestamp: int = 0) -> None:
        with self._lock:
            if self.complete:
                raise WireError("transcript is closed")
            self._entries.append(TranscriptEntry(direction, role, envelope, timestamp))

    def close(self) -> Transcript:
        self.complete = True
        return self

    @property
    def entries(self) -> tuple[TranscriptEntry, ...]:
        with self._lock:
            return tuple(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def to_bytes(self) -> bytes:
        return canonical_json([e.to_dict() for e in self.entries])

    def for_role(self, role: str) -> Transcript:
        """The sub-transcript a single peer could observe."""
        out = Transcript(f"{self.label}@{role}")
        for e in self.entries:
            if e.role == role:
                out.append(e.direction, e.role, e.envelope, e.timestamp)
        out.complete = self.complete
        return out


# -- transports ----------------------------------------------------------------

Handler = Callable[[Envelope], list[Envelope]]


class FaultAction(str, enum.Enum):
    DROP = "drop"
    DUPLICATE = "duplicate"
    REORDER = "reorder"
    TAMPER = "tamper"


@dataclass
class Fault:
    """Inject one kind of misbehaviour on envelopes of ``message_type``.

    ``occurrence`` counts matching envelopes from 1; ``None`` hits every one.
    ``field`` names the base64url body field flipped by ``tamper``.
    """

    action: FaultAction
    message_type: MessageType
    occurrence: int | None = None
    field: str | None = None
    seen: int = 0

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> Fault:
        return cls(FaultAction(d["action"]), MessageType(d["message_type"]), d.get("occurrence"), d.get("field"))

    def fires(self, env: Envelope) -> bool:
        if env.message_type is not self.message_type:
            return False
        self.seen += 1
        return self.occurrence is None or self.seen == self.occurrence


def tamper_field(env: Envelope, name: str) -> Envelope:
    """Flip the lowest bit of the last byte of a base64url body field."""
    body = dict(env.body)
    raw = bytearray(b64d(body[name]))
    raw[-1] ^= 0x01
    body[name] = b64e(bytes(raw))
    return Envelope(env.message_type, body, env.session_id, env.protocol_version)


class SimTransport:
    """Deterministic in-process delivery with optional fault injection."""

    def __init__(self, clock: Callable[[], int] | None = None, faults: Iterable[Fault] = ()) -> None:
        self._handlers: dict[str, tuple[str, Handler]] = {}
        self.clock = clock or (lambda: 0)
        self.faults = list(faults)

    def register(self, endpoint: str, role: str, handler: Handler) -> None:
        self._handlers[endpoint] = (role, handler)

    def role_of(self, endpoint: str) -> str:
        return self._handlers[endpoint][0]

    def _apply(self, envs: list[Envelope]) -> list[Envelope]:
        out: list[Envelope] = []
        for env in envs:
            copies = [env]
            for fault in self.faults:
                if fault.action is FaultAction.REORDER or not copies or not fault.fires(env):
                    continue
                if fault.action is FaultAction.DROP:
                    copies = []
                elif fault.action is FaultAction.DUPLICATE:
                    copies = copies + copies
                elif fault.action is FaultAction.TAMPER:
                    copies = [tamper_field(c, fault.field) for c in copies]
            out.extend(copies)
        for fault in self.faults:
            # reorder counts whole batches rather than single envelopes
            if fault.action is FaultAction.REORDER and len(out) > 1:
                if any(e.message_type is fault.message_type for e in out):
                    fault.seen += 1
                    if fault.occurrence is None or fault.seen == fault.occurrence:
                        out.reverse()
        return out

    def request(self, endpoint: str, envelope: Envelope, transcript: Transcript | None = None) -> list[Envelope]:
        if endpoint not in self._handlers:
            raise WireError(f"no such endpoint {endpoint!r}")
        role, handler = self._handlers[endpoint]
        # round-trip through bytes so both sides only ever see decoded frames
        wire_req = Envelope.from_bytes(unframe(frame(envelope.validate().to_bytes()))[0])
        if transcript is not None:
            transcript.append("out", role, wire_req, self.clock())
        delivered = self._apply([wire_req])
        if not delivered:
            raise TransportTimeout(f"{envelope.message_type.value} to {endpoint} timed out")
        responses: list[Envelope] = []
        for req in delivered:
            responses.extend(handler(req))
        responses = [Envelope.from_bytes(unframe(frame(r.to_bytes()))[0]) for r in responses]
        responses = self._apply(responses)
        if not responses:
            raise TransportTimeout(f"no response from {endpoint}")
        if transcript is not None:
            for r in responses:
                transcript.append("in", role, r, self.clock())
        return responses


class _FrameHandler(socketserver.BaseRequestHandler):
    def handle(self) -> None:
        handler: Handler = self.server.envelope_handler  # type: ignore[attr-defined]
        try:
            while True:
                payload = read_frame(self.request)
                if payload is None:
                    return
                try:
                    req = Envelope.from_bytes(payload)
                    responses = handler(req)
                except SchemaError as exc:
                    responses = [Envelope.error("wire", "schema", str(exc))]
                data = b"".join(frame(r.to_bytes()) for r in responses)
                self.request.sendall(frame(_LEN.pack(len(responses))) + data)
        except (OSError, WireError) as exc:
            log.debug("connection closed: %s", exc)


class _Server(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True


def serve(handler: Handler, host: str = "127.0.0.1", port: int = 0) -> tuple[socketserver.TCPServer, threading.Thread]:
    """Start a threaded TCP server for ``handler``; returns the server and its thread."""
    server = _Server((host, port), _FrameHandler)
    server.envelope_handler = handler  # type: ignore[attr-defined]
    thread = threading.Thread(target=server.serve_forever, name=f"drmmesh-{port}", daemon=True)
    thread.start()
    return server, thread


class SocketTransport:
    """Client side of :func:`serve`. One connection per request.

    Each response batch is preceded by a frame holding the batch size, so the
    client knows when a (possibly multi-chunk) reply is complete.
    """

    def __init__(self, clock: Callable[[], int] | None = None, timeout: float = 10.0) -> None:
        self._peers: dict[str, tuple[str, tuple[str, int]]] = {}
        self.clock = clock or (lambda: 0)
        self.timeout = timeout
        self._lock = threading.Lock()

    def register(self, endpoint: str, role: str, address: tuple[str, int]) -> None:
        self._peers[endpoint] = (role, address)

    def role_of(self, endpoint: str) -> str:
        return self._peers[endpoint][0]

    def request(self, endpoint: str, envelope: Envelope, transcript: Transcript | None = None) -> list[Envelope]:
        role, address = self._peers[endpoint]
        envelope.validate()
        if transcript is not None:
            transcript.append("out", role, envelope, self.clock())
        try:
            with socket.create_connection(address, timeout=self.timeout) as sock:
                sock.sendall(frame(envelope.to_bytes()))
                header = read_frame(sock)
                if header is None:
                    raise TransportTimeout(f"{endpoint} closed without answering")
                (count,) = _LEN.unpack(header)
                responses = []
                for _ in range(count):
                    payload = read_frame(sock)
                    if payload is None:
                        raise TransportTimeout(f"{endpoint} closed mid-reply")
                    responses.append(Envelope.from_bytes(payload))
        except socket.timeout:
            raise TransportTimeout(f"{endpoint} timed out") from None
        if transcript is not None:
            for r in responses:
                transcript.append("in", role, r, self.clock())
        return responses


# -- linkage scanning ----------------------------------------------------------

def _is_b64(text: str) -> bytes | None:
    if len(text) < 16:
        return None
    try:
        raw = b64d(text)
    except ValueError:
        return None
    return raw if b64e(raw) == text else None


def _leaves(obj: Any) -> Iterator[bytes]:
    """Observable byte strings in a JSON value: decoded base64url or UTF-8 text.

    Numbers (timestamps, counters, prices) and object keys are skipped; they
    are protocol metadata, not identifiers.
    """
    if isinstance(obj, Mapping):
        for v in obj.values():
            yield from _leaves(v)
    elif isinstance(obj, (list, tuple)):
        for v in obj:
            yield from _leaves(v)
    elif isinstance(obj, str):
        raw = _is_b64(obj)
        yield raw if raw is not None else obj.encode("utf-8")
    elif isinstance(obj, (bytes, bytearray)):
        yield bytes(obj)


def observed_blobs(transcript: Transcript) -> list[bytes]:
    blobs = []
    for e in transcript.entries:
        blobs.append(e.envelope.session_id.encode())
        blobs.extend(_leaves(e.envelope.body))
    return [b for b in blobs if b]


def _windows(blobs: Iterable[bytes], n: int) -> set[bytes]:
    out: set[bytes] = set()
    for b in blobs:
        for i in range(len(b) - n + 1):
            out.add(b[i:i + n])
    return out


def _maximal(blobs: Iterable[bytes], hits: set[bytes], n: int) -> set[bytes]:
    found: set[bytes] = set()
    for b in blobs:
        start = None
        for i in range(len(b) - n + 2):
            hit = i <= len(b) - n and b[i:i + n] in hits
            if hit and start is None:
                start = i
            elif not hit and start is not None:
                found.add(b[start:i - 1 + n])
                start = None
    return found


@dataclass(frozen=True)
class LinkageReport:
    expected_static: frozenset[bytes]
    unexpected: frozenset[bytes] = field(default_factory=frozenset)

    @property
    def linkable(self) -> bool:
        return bool(self.unexpected)


def transcript_linkage_scan(
    t1: Transcript, t2: Transcript, static: Iterable[Any] = (), min_len: int = 8
) -> LinkageReport:
    """Report byte strings of at least ``min_len`` bytes observed in both transcripts.

    Shared material also found in ``static`` (certificates everybody shares,
    catalog entries, protocol constants, public content) is expected; anything
    else is a potential linking identifier.
    """
    if not (t1.complete and t2.complete):
        raise WireError("linkage scan needs complete transcripts")
    b1, b2 = observed_blobs(t1), observed_blobs(t2)
    shared = _windows(b1, min_len) & _windows(b2, min_len)
    static_windows = _windows(_leaves(list(static)), min_len)
    unexpected = shared - static_windows
    return LinkageReport(
        expected_static=frozenset(_maximal(b1, shared & static_windows, min_len)),
        unexpected=frozenset(_maximal(b1, unexpected, min_len)),
    )
