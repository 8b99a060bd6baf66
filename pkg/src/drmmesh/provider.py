"""Content provider: catalog, purchase protocol (server side) and a payment stub."""

from __future__ import annotations

import threading
from collections.abc import Callable, Mapping
from dataclasses import dataclass, field
from typing import Any

from . import pre
from .hybrid import (
    Certificate,
    CertificateError,
    ContentKey,
    Role,
    SignedBlob,
    SigningKey,
    b64d,
    b64e,
    canonical_json,
    chain_from_wire,
    chain_to_wire,
    encrypt_content,
    hybrid_encrypt,
    random_content_key,
    sign,
    validate_chain,
    verify,
)
from .licenses import License, LicenseModel, LicenseTerms, UnknownContent, quote_price
from .pairing import EncodingError, PairingGroup, RandomSource
from .smartcard import SignedChallenge, challenge_payload, purchase_payload
from .wire import Envelope, MessageType

SESSION_TIMEOUT_MS = 120_000
DEFAULT_RENTAL_PERIOD_MS = 24 * 3600 * 1000


class PurchaseRejected(Exception):
    def __init__(self, reason: str, detail: str = "") -> None:
        super().__init__(f"{reason}: {detail}" if detail else reason)
        self.reason = reason
        self.detail = detail


# -- payment stub ------------------------------------------------------------

@dataclass(frozen=True)
class PaymentToken:
    serial: str
    amount: int
    bank_signature: bytes

    def payload(self) -> bytes:
        return canonical_json({"purpose": "payment", "serial": self.serial, "amount": self.amount})

    def to_dict(self) -> dict[str, Any]:
        return {"serial": self.serial, "amount": self.amount, "signature": b64e(self.bank_signature)}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> PaymentToken:
        return cls(str(d["serial"]), int(d["amount"]), b64d(d["signature"]))


class Bank:
    """Issues signed bearer tokens with a random serial and a fixed amount.

    Stands in for an anonymous payment system: the token carries nothing
    about who bought it.
    """

    def __init__(self, signing_key: SigningKey, cert: Certificate, rng: RandomSource) -> None:
        self._key = signing_key
        self.cert = cert
        self._rng = rng

    def issue(self, amount: int) -> PaymentToken:
        if amount < 0:
            raise ValueError("amount must be nonnegative")
        unsigned = PaymentToken(self._rng.randbytes(16).hex(), amount, b"")
        return PaymentToken(unsigned.serial, amount, sign(unsigned.payload(), self._key).signature)


# -- catalog and sessions ------------------------------------------------------

@dataclass(frozen=True)
class CatalogEntry:
    content_id: str
    title: str
    rating: str
    unit_price: int
    ck: ContentKey = field(repr=False)
    encrypted_content: bytes = field(repr=False)
    cp_cert: Certificate = field(repr=False)

    def public_view(self) -> dict[str, Any]:
        return {"content_id": self.content_id, "title": self.title, "rating": self.rating, "unit_price": self.unit_price}


@dataclass
class PurchaseSession:
    session_id: str
    r: bytes
    created_at: int
    content_id: str | None = None
    state: str = "challenged"  # challenged -> completed | aborted


@dataclass(frozen=True)
class PurchaseResult:
    content_id: str
    license_kem: pre.FirstLevelCiphertext
    license_dem: bytes
    license_signature: bytes
    encrypted_ck: pre.SecondLevelCiphertext

    def to_body(self) -> dict[str, Any]:
        return {
            "content_id": self.content_id,
            "license_kem": b64e(self.license_kem.to_bytes()),
            "license_dem": b64e(self.license_dem),
            "license_signature": b64e(self.license_signature),
            "encrypted_ck": b64e(self.encrypted_ck.to_bytes()),
        }


def content_aad(content_id: str) -> bytes:
    return b"drmmesh/content\x00" + content_id.encode("utf-8")


class ContentProvider:
    def __init__(
        self,
        group: PairingGroup,
        *,
        signing_key: SigningKey,
        cert: Certificate,
        root: Certificate,
        bank_cert: Certificate,
        clock: Callable[[], int],
        rng: RandomSource,
        discounts: Mapping[int, Any] | None = None,
        rental_period_ms: int = DEFAULT_RENTAL_PERIOD_MS,
        session_timeout_ms: int = SESSION_TIMEOUT_MS,
    ) -> None:
        validate_chain([bank_cert], root, Role.BANK)
        validate_chain([cert], root, Role.CONTENT_PROVIDER)
        self.group = group
        self._key = signing_key
        self.cert = cert
        self.root = root
        self.bank_cert = bank_cert
        self.clock = clock
        self._rng = rng
        self.discounts = dict(discounts or {})
        self.rental_period_ms = rental_period_ms
        self.session_timeout_ms = session_timeout_ms

        self._catalog: dict[str, CatalogEntry] = {}
        self._sessions: dict[str, PurchaseSession] = {}
        self._spent_serials: set[str] = set()
        self._license_ids: set[str] = set()
        self._last_ts = 0
        self._lock = threading.Lock()

    # -- catalog ---------------------------------------------------------------

    def ingest_content(
        self, content_id: str, plaintext: bytes, *, title: str = "", rating: str = "unrated", unit_price: int = 0
    ) -> CatalogEntry:
        if not plaintext:
            raise ValueError("content must be nonempty")
        with self._lock:
            if content_id in self._catalog:
                raise ValueError(f"duplicate content id {content_id!r}")
            ck = random_content_key(self.group, self._rng)
            blob = encrypt_content(plaintext, ck, self._rng, aad=content_aad(content_id))
            entry = CatalogEntry(content_id, title or content_id, rating, unit_price, ck, blob, self.cert)
            self._catalog[content_id] = entry
            return entry

    def catalog(self) -> list[dict[str, Any]]:
        return [e.public_view() for e in self._catalog.values()]

    def prices(self) -> dict[str, int]:
        return {cid: e.unit_price for cid, e in self._catalog.items()}

    def serve_encrypted_content(self, content_id: str) -> bytes:
        entry = self._catalog.get(content_id)
        if entry is None:
            raise UnknownContent(content_id)
        return entry.encrypted_content

    # -- purchase protocol -------------------------------------------------------

    def _next_ts(self) -> int:
        self._last_ts = max(self.clock(), self._last_ts + 1)
        return self._last_ts

    def open_purchase(self, content_id: str | None = None) -> tuple[PurchaseSession, SignedChallenge]:
        now = self.clock()
        with self._lock:
            self._expire_sessions(now)
            session = PurchaseSession(self._rng.randbytes(16).hex(), self._rng.randbytes(32), now, content_id)
            self._sessions[session.session_id] = session
        sig = sign(challenge_payload(session.r, now), self._key).signature
        return session, SignedChallenge(session.r, now, sig, (self.cert,))

    def _expire_sessions(self, now: int) -> None:
        stale = [sid for sid, s in self._sessions.items() if now - s.created_at > self.session_timeout_ms]
        for sid in stale:
            del self._sessions[sid]

    def _take_session(self, session_id: str) -> PurchaseSession:
        # one-shot: any completion attempt consumes the session
        now = self.clock()
        with self._lock:
            session = self._sessions.get(session_id)
            if session is None:
                raise PurchaseRejected("unknown_session", session_id)
            if session.state != "challenged":
                raise PurchaseRejected("replayed_session", session_id)
            if now - session.created_at > self.session_timeout_ms:
                session.state = "aborted"
                raise PurchaseRejected("expired_session", session_id)
            session.state = "aborted"
            return session

    def complete_purchase(
        self,
        session_id: str,
        cert_chain: list[Certificate],
        pk_tmp: pre.PublicKey,
        signature: bytes,
        rating: str,
        content_id: str,
        model: LicenseModel,
        quantity: int,
        payment_token: PaymentToken,
    ) -> PurchaseResult:
        session = self._take_session(session_id)
        try:
            card_cert = validate_chain(cert_chain, self.root, Role.SMARTCARD)
        except CertificateError as exc:
            raise PurchaseRejected("bad_chain", str(exc)) from None
        if not verify(SignedBlob(purchase_payload(session.r, pk_tmp, rating), signature), card_cert):
            raise PurchaseRejected("bad_signature", "smartcard signature does not verify")
        entry = self._catalog.get(content_id)
        if entry is None:
            raise PurchaseRejected("unknown_content", content_id)
        if rating != entry.rating:
            raise PurchaseRejected("rating_mismatch", f"card checked {rating!r}, content is {entry.rating!r}")
        try:
            quote = quote_price(self.prices(), content_id, model, quantity, self.discounts)
        except ValueError as exc:
            raise PurchaseRejected("bad_terms", str(exc)) from None
        if not verify(SignedBlob(payment_token.payload(), payment_token.bank_signature), self.bank_cert):
            raise PurchaseRejected("invalid_payment", "bank signature does not verify")
        if payment_token.amount != quote.total:
            raise PurchaseRejected("wrong_amount", f"paid {payment_token.amount}, price {quote.total}")

        with self._lock:
            if payment_token.serial in self._spent_serials:
                raise PurchaseRejected("double_spend", payment_token.serial)
            self._spent_serials.add(payment_token.serial)
            ts = self._next_ts()
            license_id = self._rng.randbytes(16).hex()
            while license_id in self._license_ids:  # pragma: no cover - 128-bit collision
                license_id = self._rng.randbytes(16).hex()
            self._license_ids.add(license_id)
            session.state = "completed"

        lic = License(license_id, ts, content_id, self._terms(model, quantity, ts), self.cert)
        plaintext = canonical_json(lic.to_dict())
        lic_sig = sign(plaintext, self._key).signature
        kem, dem = hybrid_encrypt(plaintext, pk_tmp.z_a1, self._rng)
        encrypted_ck = pre.encrypt_second(entry.ck.g2_seed, pk_tmp.z_a1, self._rng)
        return PurchaseResult(content_id, kem, dem, lic_sig, encrypted_ck)

    def _terms(self, model: LicenseModel, quantity: int, ts: int) -> LicenseTerms:
        if model is LicenseModel.EXECUTE_AT_MOST_N:
            return LicenseTerms(model, n=quantity)
        if model is LicenseModel.PAY_PER_EXECUTE:
            return LicenseTerms.pay_per_execute()
        if model is LicenseModel.EXECUTE_UNTIL:
            return LicenseTerms(model, expiry_ts=ts + quantity * self.rental_period_ms)
        return LicenseTerms(model)

    # -- service -------------------------------------------------------------

    def handle(self, env: Envelope) -> list[Envelope]:
        if env.message_type is MessageType.PURCHASE_OPEN:
            content_id = env.body.get("content_id")
            session, challenge = self.open_purchase(content_id)
            body = challenge.to_dict()
            if content_id in self._catalog:
                body["rating"] = self._catalog[content_id].rating
            return [Envelope(MessageType.PURCHASE_CHALLENGE, body, session.session_id)]
        if env.message_type is MessageType.PURCHASE_COMPLETE_REQUEST:
            b = env.body
            try:
                result = self.complete_purchase(
                    env.session_id,
                    chain_from_wire(self.group, b["cert_chain"]),
                    pre.PublicKey.from_bytes(self.group, b64d(b["pk_tmp"])),
                    b64d(b["signature"]),
                    str(b["rating"]),
                    str(b["content_id"]),
                    LicenseModel(b["model"]),
                    int(b["quantity"]),
                    PaymentToken.from_dict(b["payment_token"]),
                )
            except PurchaseRejected as exc:
                return [Envelope.error("purchase", exc.reason, exc.detail, env.session_id)]
            except (CertificateError, EncodingError, KeyError, ValueError, TypeError) as exc:
                return [Envelope.error("purchase", "malformed", str(exc), env.session_id)]
            return [Envelope(MessageType.PURCHASE_COMPLETE_RESPONSE, result.to_body(), env.session_id)]
        return [Envelope.error("purchase", "unsupported", env.message_type.value, env.session_id)]


def complete_request_body(
    response_chain: list[Certificate] | tuple[Certificate, ...],
    pk_tmp: pre.PublicKey,
    signature: bytes,
    rating: str,
    content_id: str,
    model: LicenseModel,
    quantity: int,
    payment_token: PaymentToken,
) -> dict[str, Any]:
    return {
        "cert_chain": chain_to_wire(response_chain),
        "pk_tmp": b64e(pk_tmp.to_bytes()),
        "signature": b64e(signature),
        "rating": rating,
        "content_id": content_id,
        "model": model.value,
        "quantity": quantity,
        "payment_token": payment_token.to_dict(),
    }
