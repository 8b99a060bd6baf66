"""Content distributor: one-time ephemeral keys, key decapsulation, chunked delivery."""

from __future__ import annotations

import enum
import threading
from collections.abc import Callable
from dataclasses import dataclass, field

from . import pre
from .hybrid import (
    AuthenticationError,
    Certificate,
    Role,
    SigningKey,
    b64d,
    b64e,
    chain_to_wire,
    decrypt_content,
    issue_certificate,
    kdf_content_key,
)
from .licenses import UnknownContent
from .pairing import EncodingError, PairingGroup, RandomSource
from .provider import content_aad
from .wire import Envelope, MessageType

GRANT_TTL_MS = 300_000
RESUME_WINDOW_MS = 30_000
CHUNK_SIZE = 64 * 1024


class ExecutionRejected(Exception):
    def __init__(self, reason: str, detail: str = "") -> None:
        super().__init__(f"{reason}: {detail}" if detail else reason)
        self.reason = reason
        self.detail = detail


class GrantState(str, enum.Enum):
    ISSUED = "issued"
    SPENT = "spent"
    EXPIRED = "expired"


@dataclass
class EphemeralGrant:
    keypair: pre.PreKeyPair = field(repr=False)
    cert: Certificate
    issued_at: int
    state: GrantState = GrantState.ISSUED


@dataclass
class _Stream:
    cert_id: str
    chunks: list[bytes] = field(repr=False)
    deadline: int


@dataclass(frozen=True)
class StreamChunk:
    index: int
    total: int
    data: bytes
    resume_token: str

    def to_envelope(self, session_id: str = "") -> Envelope:
        body = {"index": self.index, "total": self.total, "data": b64e(self.data), "resume_token": self.resume_token}
        return Envelope(MessageType.STREAM_CHUNK, body, session_id)


class ContentDistributor:
    """Serves content to whoever presents a key re-encrypted toward a fresh grant.

    ``fetch_content`` returns the provider's AEAD blob for a content id; blobs
    are cached after the first fetch.
    """

    def __init__(
        self,
        group: PairingGroup,
        *,
        name: str,
        signing_key: SigningKey,
        cert: Certificate,
        clock: Callable[[], int],
        rng: RandomSource,
        fetch_content: Callable[[str], bytes],
        grant_ttl_ms: int = GRANT_TTL_MS,
        resume_window_ms: int = RESUME_WINDOW_MS,
        chunk_size: int = CHUNK_SIZE,
    ) -> None:
        if cert.role is not Role.CONTENT_DISTRIBUTOR:
            raise ValueError("distributor needs a content_distributor certificate")
        self.group = group
        self.name = name
        self._key = signing_key
        self.cert = cert
        self.clock = clock
        self._rng = rng
        self._fetch = fetch_content
        self.grant_ttl_ms = grant_ttl_ms
        self.resume_window_ms = resume_window_ms
        self.chunk_size = chunk_size

        self._grants: dict[str, EphemeralGrant] = {}
        self._streams: dict[str, _Stream] = {}
        self._cache: dict[str, bytes] = {}
        self._last_ts = 0
        self._lock = threading.Lock()

    def issue_ephemeral_cert(self) -> tuple[Certificate, Certificate]:
        """Fresh one-time PRE key pair, certified by this distributor's signing key.

        Returns the chain ``(ephemeral cert, distributor cert)``.
        """
        keypair = pre.keygen(self.group, self._rng)
        with self._lock:
            now = self.clock()
            self._expire(now)
            self._last_ts = max(now, self._last_ts + 1)
            cert_id = self._rng.randbytes(16).hex()
            cert = issue_certificate(
                self._key,
                issuer_id=self.cert.cert_id,
                role=Role.CONTENT_DISTRIBUTOR_EPHEMERAL,
                subject=self.name,
                ts=self._last_ts,
                verify_key=self._key.verify_key,
                cert_id=cert_id,
                pre_public=keypair.public,
            )
            self._grants[cert_id] = EphemeralGrant(keypair, cert, now)
        return cert, self.cert

    def grant_state(self, cert_id: str) -> GrantState | None:
        grant = self._grants.get(cert_id)
        return None if grant is None else grant.state

    def _expire(self, now: int) -> None:
        for cert_id, grant in list(self._grants.items()):
            if grant.state is GrantState.ISSUED and now - grant.issued_at > self.grant_ttl_ms:
                grant.state = GrantState.EXPIRED
            if grant.state is not GrantState.ISSUED and now - grant.issued_at > 2 * self.grant_ttl_ms:
                del self._grants[cert_id]
        for token, stream in list(self._streams.items()):
            if now > stream.deadline:
                del self._streams[token]

    def _spend(self, cert_id: str) -> EphemeralGrant:
        with self._lock:
            now = self.clock()
            self._expire(now)
            grant = self._grants.get(cert_id)
            if grant is None:
                raise ExecutionRejected("unknown_grant", cert_id)
            if grant.state is GrantState.SPENT:
                raise ExecutionRejected("spent", "ephemeral key already used")
            if grant.state is GrantState.EXPIRED:
                raise ExecutionRejected("expired", cert_id)
            # marked before any decryption or streaming happens
            grant.state = GrantState.SPENT
            return grant

    def _content_blob(self, content_id: str) -> bytes:
        blob = self._cache.get(content_id)
        if blob is None:
            try:
                blob = self._fetch(content_id)
            except UnknownContent:
                raise ExecutionRejected("unknown_content", content_id) from None
            self._cache[content_id] = blob
        return blob

    def execute_content(
        self, cert_id: str, reencrypted_ck: pre.FirstLevelCiphertext, content_id: str
    ) -> list[StreamChunk]:
        grant = self._spend(cert_id)
        try:
            seed = pre.decrypt_first(reencrypted_ck, grant.keypair.secret.a2)
        except pre.DecryptionError as exc:
            raise ExecutionRejected("decrypt_failed", str(exc)) from None
        blob = self._content_blob(content_id)
        try:
            plaintext = decrypt_content(blob, kdf_content_key(seed), aad=content_aad(content_id))
        except AuthenticationError:
            raise ExecutionRejected("decrypt_failed", "content key does not open this content") from None
        chunks = [plaintext[i:i + self.chunk_size] for i in range(0, len(plaintext), self.chunk_size)] or [b""]
        token = self._rng.randbytes(16).hex()
        with self._lock:
            self._streams[token] = _Stream(cert_id, chunks, self.clock() + self.resume_window_ms)
        return [StreamChunk(i, len(chunks), c, token) for i, c in enumerate(chunks)]

    def resume(self, cert_id: str, resume_token: str, from_index: int) -> list[StreamChunk]:
        """Re-send chunks of an interrupted stream for the same grant within the window."""
        with self._lock:
            now = self.clock()
            stream = self._streams.get(resume_token)
            if stream is None or stream.cert_id != cert_id or now > stream.deadline:
                raise ExecutionRejected("bad_resume", "unknown or expired resume token")
            chunks = stream.chunks
        if not 0 <= from_index < len(chunks):
            raise ExecutionRejected("bad_resume", f"index {from_index} out of range")
        return [StreamChunk(i, len(chunks), chunks[i], resume_token) for i in range(from_index, len(chunks))]

    # -- service ---------------------------------------------------------------

    def handle(self, env: Envelope) -> list[Envelope]:
        try:
            if env.message_type is MessageType.CERT_REQUEST:
                return [Envelope(MessageType.CERT_RESPONSE, {"cert_chain": chain_to_wire(self.issue_ephemeral_cert())})]
            if env.message_type is MessageType.EXECUTE_REQUEST:
                b = env.body
                if b.get("resume_token"):
                    chunks = self.resume(str(b["cert_id"]), str(b["resume_token"]), int(b.get("from_index", 0)))
                else:
                    c = pre.decode_ciphertext(self.group, b64d(b["ciphertext"]))
                    if not isinstance(c, pre.FirstLevelCiphertext):
                        raise ExecutionRejected("malformed", "expected a first-level ciphertext")
                    chunks = self.execute_content(str(b["cert_id"]), c, str(b["content_id"]))
                return [ch.to_envelope(env.session_id) for ch in chunks]
        except ExecutionRejected as exc:
            return [Envelope.error("execute", exc.reason, exc.detail, env.session_id)]
        except (EncodingError, KeyError, ValueError, TypeError) as exc:
            return [Envelope.error("execute", "malformed", str(exc), env.session_id)]
        return [Envelope.error("execute", "unsupported", env.message_type.value, env.session_id)]
