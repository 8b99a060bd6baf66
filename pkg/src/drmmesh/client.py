"""Content access device: drives purchase and execution, holds only ciphertexts.

The client is untrusted. It never sees a card secret, a content key or any
plaintext before the distributor streams it. The one cryptographic step it
performs is the re-encryption of its stored content key with the key the
card hands out.
"""

from __future__ import annotations

import hashlib
import os
import tempfile
from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Protocol

from . import pre
from .hybrid import Certificate, CertificateError, b64d, b64e, canonical_json, chain_from_wire, parse_json
from .licenses import LicenseModel
from .pairing import EncodingError, PairingGroup, RandomSource
from .provider import PaymentToken, complete_request_body
from .smartcard import Authorization, CardChannel, CardError, SignedChallenge
from .wire import Envelope, MessageType, RemoteError, Transcript, TransportTimeout, raise_for_error

MAX_RESUMES = 3

PAYMENT_REASONS = frozenset({"invalid_payment", "double_spend", "wrong_amount"})
REPLAY_REASONS = frozenset({"replayed_cert_id", "stale_ts"})


class ClientError(Exception):
    """A flow failed at ``stage`` (pin, category, challenge, payment, license-store, cert, terms, replay, ...)."""

    def __init__(self, stage: str, reason: str, detail: str = "") -> None:
        super().__init__(f"{stage}/{reason}" + (f": {detail}" if detail else ""))
        self.stage = stage
        self.reason = reason
        self.detail = detail


class SecurityViolation(AssertionError):
    """An attack that must fail went through."""


class Transport(Protocol):
    def request(self, endpoint: str, envelope: Envelope, transcript: Transcript | None = None) -> list[Envelope]: ...


def endpoint(peer: str, path: str) -> str:
    return f"{peer} {path}"


# -- key locker --------------------------------------------------------------

@dataclass(frozen=True)
class LockerEntry:
    content_id: str
    encrypted_ck: pre.SecondLevelCiphertext
    pk_tmp: pre.PublicKey

    @property
    def fingerprint(self) -> str:
        return self.pk_tmp.fingerprint()

    def to_dict(self) -> dict[str, Any]:
        return {
            "content_id": self.content_id,
            "encrypted_ck": b64e(self.encrypted_ck.to_bytes()),
            "pk_tmp": b64e(self.pk_tmp.to_bytes()),
        }

    @classmethod
    def from_dict(cls, group: PairingGroup, d: dict[str, Any]) -> LockerEntry:
        ck = pre.decode_ciphertext(group, b64d(d["encrypted_ck"]))
        if not isinstance(ck, pre.SecondLevelCiphertext):
            raise EncodingError("locker entries hold second-level ciphertexts")
        return cls(str(d["content_id"]), ck, pre.PublicKey.from_bytes(group, b64d(d["pk_tmp"])))


class KeyLocker:
    """Encrypted content keys by content id. Persists nothing about usage."""

    def __init__(self, group: PairingGroup, path: str | os.PathLike[str] | None = None) -> None:
        self.group = group
        self.path = Path(path) if path is not None else None
        self._entries: dict[str, LockerEntry] = {}
        if self.path is not None and self.path.exists():
            self._load()

    def __len__(self) -> int:
        return len(self._entries)

    def add(self, entry: LockerEntry) -> None:
        self._entries[entry.fingerprint] = entry
        self.save()

    def get(self, fingerprint: str) -> LockerEntry | None:
        return self._entries.get(fingerprint)

    def for_content(self, content_id: str) -> list[LockerEntry]:
        return [e for e in self._entries.values() if e.content_id == content_id]

    def to_bytes(self) -> bytes:
        return canonical_json({"entries": sorted((e.to_dict() for e in self._entries.values()), key=canonical_json)})

    def save(self) -> None:
        if self.path is None:
            return
        self.path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=self.path.parent, prefix=".locker")
        with os.fdopen(fd, "wb") as fh:
            fh.write(self.to_bytes())
        os.replace(tmp, self.path)

    def _load(self) -> None:
        data = parse_json(self.path.read_bytes())
        for d in data["entries"]:
            entry = LockerEntry.from_dict(self.group, d)
            self._entries[entry.fingerprint] = entry


# -- output sinks --------------------------------------------------------------

class Sink(Protocol):
    def write(self, data: bytes) -> None: ...


class NullSink:
    def __init__(self) -> None:
        self.nbytes = 0

    def write(self, data: bytes) -> None:
        self.nbytes += len(data)


class HashSink:
    def __init__(self) -> None:
        self._h = hashlib.sha256()
        self.nbytes = 0

    def write(self, data: bytes) -> None:
        self._h.update(data)
        self.nbytes += len(data)

    def hexdigest(self) -> str:
        return self._h.hexdigest()


class FileSink:
    def __init__(self, path: str | os.PathLike[str]) -> None:
        self.path = Path(path)
        self._fh = self.path.open("wb")

    def write(self, data: bytes) -> None:
        self._fh.write(data)

    def close(self) -> None:
        self._fh.close()


class BufferSink:
    def __init__(self) -> None:
        self.data = bytearray()

    def write(self, data: bytes) -> None:
        self.data.extend(data)


# -- flows ---------------------------------------------------------------------

@dataclass
class PurchaseOutcome:
    content_id: str
    fingerprint: str
    duplicate_rejections: list[str] = field(default_factory=list)


@dataclass
class ExecuteOutcome:
    content_id: str
    cert_id: str
    nbytes: int
    chunks: int
    resumes: int
    authorization: Authorization = field(repr=False)
    reencrypted_ck: pre.FirstLevelCiphertext = field(repr=False)


class Client:
    def __init__(
        self,
        group: PairingGroup,
        card: CardChannel,
        locker: KeyLocker,
        transport: Transport,
        rng: RandomSource,
        *,
        provider: str = "cp",
    ) -> None:
        self.group = group
        self.card = card
        self.locker = locker
        self.transport = transport
        self._rng = rng
        self.provider = provider

    def _session(self, pin: str) -> str:
        try:
            return self.card.verify_pin(pin)
        except CardError as exc:
            raise ClientError("pin", exc.reason, exc.detail) from None

    def _call(self, stage: str, ep: str, env: Envelope, transcript: Transcript | None) -> list[Envelope]:
        try:
            replies = self.transport.request(ep, env, transcript)
        except TransportTimeout as exc:
            raise ClientError(stage, "timeout", str(exc)) from None
        return replies

    def purchase(
        self,
        content_id: str,
        model: LicenseModel,
        quantity: int,
        payment_token: PaymentToken,
        pin: str,
        *,
        transcript: Transcript | None = None,
    ) -> PurchaseOutcome:
        session = self._session(pin)

        replies = self._call("challenge", endpoint(self.provider, "POST /purchase/open"),
                             Envelope(MessageType.PURCHASE_OPEN, {"content_id": content_id}), transcript)
        challenge_env = replies[0]
        try:
            raise_for_error(challenge_env)
            challenge = SignedChallenge.from_dict(self.group, challenge_env.body)
            rating = str(challenge_env.body.get("rating", "unrated"))
        except RemoteError as exc:
            raise ClientError("challenge", exc.reason, exc.detail) from None
        except (CertificateError, KeyError, ValueError) as exc:
            raise ClientError("challenge", "malformed", str(exc)) from None

        try:
            resp = self.card.begin_purchase(session, challenge.r, rating, challenge)
        except CardError as exc:
            stage = "category" if exc.reason in ("category_denied", "invalid_attributes") else "challenge"
            raise ClientError(stage, exc.reason, exc.detail) from None

        body = complete_request_body(
            resp.cert_chain, resp.pk_tmp, resp.signature, rating, content_id, model, quantity, payment_token
        )
        replies = self._call(
            "payment",
            endpoint(self.provider, "POST /purchase/complete"),
            Envelope(MessageType.PURCHASE_COMPLETE_REQUEST, body, challenge_env.session_id),
            transcript,
        )

        stored = False
        first_error: ClientError | None = None
        rejections: list[str] = []
        for reply in replies:
            if reply.message_type is MessageType.ERROR:
                reason = reply.body["reason"]
                err = ClientError("payment" if reason in PAYMENT_REASONS else "challenge", reason,
                                  reply.body.get("detail", ""))
                if stored:
                    rejections.append(reason)
                else:
                    first_error = first_error or err
                continue
            b = reply.body
            try:
                self.card.store_license(
                    session, resp.fingerprint, b64d(b["license_kem"]), b64d(b["license_dem"]),
                    b64d(b["license_signature"]),
                )
            except CardError as exc:
                if stored:
                    rejections.append(exc.reason)
                    continue
                first_error = first_error or ClientError("license-store", exc.reason, exc.detail)
                continue
            encrypted_ck = pre.decode_ciphertext(self.group, b64d(b["encrypted_ck"]))
            if not isinstance(encrypted_ck, pre.SecondLevelCiphertext):
                raise ClientError("license-store", "malformed", "content key must be second-level")
            if not stored:
                self.locker.add(LockerEntry(content_id, encrypted_ck, resp.pk_tmp))
                stored = True
        if not stored:
            raise first_error or ClientError("payment", "no_response")
        return PurchaseOutcome(content_id, resp.fingerprint, rejections)

    def request_cert(self, distributor: str, transcript: Transcript | None = None) -> list[Certificate]:
        replies = self._call("cert", endpoint(distributor, "POST /cert"),
                             Envelope(MessageType.CERT_REQUEST, {}), transcript)
        try:
            raise_for_error(replies[0])
            return chain_from_wire(self.group, replies[0].body["cert_chain"])
        except RemoteError as exc:
            raise ClientError("cert", exc.reason, exc.detail) from None
        except CertificateError as exc:
            raise ClientError("cert", "malformed", str(exc)) from None

    def execute(
        self,
        content_id: str,
        pin: str,
        sink: Sink,
        *,
        distributor: str,
        cert_chain: Sequence[Certificate] | None = None,
        transcript: Transcript | None = None,
    ) -> ExecuteOutcome:
        """Run one execution. ``cert_chain`` overrides the certificate fetch (attack harness)."""
        session = self._session(pin)
        chain = list(cert_chain) if cert_chain is not None else self.request_cert(distributor, transcript)

        try:
            auth = self.card.authorize_execution(session, content_id, chain)
        except CardError as exc:
            if exc.reason == "terms_denied":
                stage = "terms"
            elif exc.reason in REPLAY_REASONS:
                stage = "replay"
            else:
                stage = "authorize"
            raise ClientError(stage, exc.reason, exc.detail) from None

        entry = self.locker.get(auth.fingerprint)
        if entry is None:
            raise ClientError("locker", "missing_entry", auth.fingerprint)
        # fresh randomness per execution so no ciphertext component repeats
        fresh = pre.rerandomize(entry.encrypted_ck, entry.pk_tmp.z_a1, self._rng)
        reencrypted = pre.reencrypt(fresh, auth.rk)
        cert_id = chain[0].cert_id
        nbytes, chunks, resumes = self._stream(distributor, cert_id, content_id, reencrypted, sink, transcript)
        return ExecuteOutcome(content_id, cert_id, nbytes, chunks, resumes, auth, reencrypted)

    def _stream(
        self,
        distributor: str,
        cert_id: str,
        content_id: str,
        ciphertext: pre.FirstLevelCiphertext,
        sink: Sink,
        transcript: Transcript | None,
    ) -> tuple[int, int, int]:
        ep = endpoint(distributor, "POST /execute")
        body: dict[str, Any] = {"cert_id": cert_id, "content_id": content_id, "ciphertext": b64e(ciphertext.to_bytes())}
        received: dict[int, bytes] = {}
        total: int | None = None
        token = ""
        resumes = 0
        while True:
            try:
                replies = self.transport.request(ep, Envelope(MessageType.EXECUTE_REQUEST, body), transcript)
            except TransportTimeout:
                replies = []
            for reply in replies:
                if reply.message_type is MessageType.ERROR:
                    raise ClientError("execute", reply.body["reason"], reply.body.get("detail", ""))
                b = reply.body
                total = int(b["total"])
                token = str(b["resume_token"])
                received.setdefault(int(b["index"]), b64d(b["data"]))
            if total is not None:
                missing = [i for i in range(total) if i not in received]
                if not missing:
                    break
            if not token or resumes >= MAX_RESUMES:
                raise ClientError("stream", "timeout", "stream incomplete")
            resumes += 1
            body = {"cert_id": cert_id, "content_id": content_id, "resume_token": token, "from_index": missing[0]}
        nbytes = 0
        for i in range(total):
            sink.write(received[i])
            nbytes += len(received[i])
        return nbytes, total, resumes


def malicious_reuse_rk(
    client: Client,
    rk: pre.ReEncryptionKey,
    entry: LockerEntry,
    cert_id: str,
    content_id: str,
    distributor: str,
    transcript: Transcript | None = None,
) -> ClientError:
    """Try to execute again with a leaked ``rk`` against ``cert_id``.

    Returns the rejection. If the distributor streams content instead, that is
    a security failure and :class:`SecurityViolation` is raised.
    """
    fresh = pre.rerandomize(entry.encrypted_ck, entry.pk_tmp.z_a1, client._rng)
    c = pre.reencrypt(fresh, rk)
    try:
        client._stream(distributor, cert_id, content_id, c, NullSink(), transcript)
    except ClientError as exc:
        return exc
    raise SecurityViolation("distributor accepted a reused re-encryption key")

