"""Emulated tamper-resistant smartcard.

The card is the only trusted state machine in the system. It holds the
credential shared by every card, a PIN gate, one temporary PRE key pair per
purchase, the license store, and a monotone timestamp that only moves forward
when a verified license or content-distributor certificate arrives (the card
has no clock of its own). Secrets never leave it: outputs are public keys,
signatures and re-encryption keys.

Two ways to talk to it: direct method calls, or framed command envelopes via
:meth:`Smartcard.handle_frame` (what :class:`CardChannel` uses).
"""

from __future__ import annotations

import functools
import threading
from collections import OrderedDict
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, replace
from datetime import date, datetime, timezone
from typing import Any

from . import pre
from .hybrid import (
    AuthenticationError,
    Certificate,
    CertificateError,
    Role,
    SignedBlob,
    SigningKey,
    b64d,
    b64e,
    canonical_json,
    chain_from_wire,
    chain_to_wire,
    hybrid_decrypt,
    parse_json,
    validate_chain,
    verify,
)
from .licenses import License, LicenseError, check_terms, consume
from .pairing import EncodingError, PairingGroup, RandomSource
from .wire import Envelope, MessageType, RemoteError, SchemaError, Transcript, frame, raise_for_error, unframe

PIN_RETRY_LIMIT = 3
MAX_PENDING_KEYS = 8

#: Minimum holder age per content rating. Unlisted ratings are unrestricted.
DEFAULT_MIN_AGE: dict[str, int] = {"X": 18}


class CardError(Exception):
    def __init__(self, reason: str, detail: str = "") -> None:
        super().__init__(f"{reason}: {detail}" if detail else reason)
        self.reason = reason
        self.detail = detail


@dataclass(frozen=True)
class HolderAttributes:
    """Identity facts installed by the smartcard provider, integrity-protected by its signature."""

    date_of_birth: str
    home_country: str
    signature: bytes = b""

    def payload(self) -> bytes:
        return canonical_json({"date_of_birth": self.date_of_birth, "home_country": self.home_country})

    @classmethod
    def issue(cls, key: SigningKey, date_of_birth: str, home_country: str) -> HolderAttributes:
        unsigned = cls(date_of_birth, home_country)
        return replace(unsigned, signature=key.verify_key.group.sign(key.sk, unsigned.payload()))


def birthday_ts(dob: date, years: int) -> int:
    """Millisecond UTC timestamp at which someone born on ``dob`` turns ``years``."""
    try:
        when = datetime(dob.year + years, dob.month, dob.day, tzinfo=timezone.utc)
    except ValueError:  # 29 February in a common year
        when = datetime(dob.year + years, 3, 1, tzinfo=timezone.utc)
    return int(when.timestamp() * 1000)


def purchase_payload(r: bytes, pk_tmp: pre.PublicKey, rating: str) -> bytes:
    """Bytes the card signs when answering a provider challenge."""
    return canonical_json({"purpose": "purchase", "r": b64e(r), "pk_tmp": b64e(pk_tmp.to_bytes()), "rating": rating})


def challenge_payload(r: bytes, ts: int) -> bytes:
    """Bytes a provider signs to vouch for the time of its challenge."""
    return canonical_json({"purpose": "challenge", "r": b64e(r), "ts": ts})


@dataclass(frozen=True)
class SignedChallenge:
    r: bytes
    ts: int
    signature: bytes
    cert_chain: tuple[Certificate, ...]

    def to_dict(self) -> dict[str, Any]:
        return {
            "nonce": b64e(self.r),
            "ts": self.ts,
            "signature": b64e(self.signature),
            "cert_chain": chain_to_wire(self.cert_chain),
        }

    @classmethod
    def from_dict(cls, group: PairingGroup, d: Mapping[str, Any]) -> SignedChallenge:
        return cls(b64d(d["nonce"]), int(d["ts"]), b64d(d["signature"]), tuple(chain_from_wire(group, d["cert_chain"])))


@dataclass(frozen=True)
class PurchaseResponse:
    pk_tmp: pre.PublicKey
    signature: bytes
    cert_chain: tuple[Certificate, ...]
    rating: str

    @property
    def fingerprint(self) -> str:
        return self.pk_tmp.fingerprint()


@dataclass(frozen=True)
class Authorization:
    rk: pre.ReEncryptionKey
    fingerprint: str


@dataclass
class _Stored:
    license: License
    keypair: pre.PreKeyPair
    fingerprint: str


def _serialized(method):
    @functools.wraps(method)
    def wrapper(self, *args, **kwargs):
        with self._lock:
            return method(self, *args, **kwargs)

    return wrapper


class Smartcard:
    def __init__(
        self,
        group: PairingGroup,
        *,
        signing_key: SigningKey,
        cert_chain: Sequence[Certificate],
        root: Certificate,
        pin: str,
        production_ts: int,
        rng: RandomSource,
        holder: HolderAttributes | None = None,
        pin_retry_limit: int = PIN_RETRY_LIMIT,
        max_pending: int = MAX_PENDING_KEYS,
        min_age: Mapping[str, int] | None = None,
    ) -> None:
        self.group = group
        self._sk_sc = signing_key
        self.cert_chain = tuple(cert_chain)
        self.root = root
        self._pin = pin
        self._card_ts = production_ts
        self._rng = rng
        self._holder = holder
        self.pin_retry_limit = pin_retry_limit
        self.max_pending = max_pending
        self.min_age = dict(DEFAULT_MIN_AGE if min_age is None else min_age)

        self._failures = 0
        self._locked = False
        self._session: str | None = None
        self._pending: OrderedDict[str, pre.PreKeyPair] = OrderedDict()
        self._licenses: dict[str, list[_Stored]] = {}
        # ids observed at the current card_ts; anything older is rejected as stale
        self._seen_license_ids: set[str] = set()
        self._seen_cd_cert_ids: set[str] = set()
        self._lock = threading.RLock()

    @property
    def card_ts(self) -> int:
        return self._card_ts

    @property
    def locked(self) -> bool:
        return self._locked

    # -- PIN / session ---------------------------------------------------------

    @_serialized
    def verify_pin(self, pin_attempt: str) -> str:
        if self._locked:
            raise CardError("locked")
        if pin_attempt != self._pin:
            self._failures += 1
            self._session = None
            if self._failures >= self.pin_retry_limit:
                self._locked = True
                raise CardError("locked", "retry limit reached")
            raise CardError("wrong_pin", f"{self.pin_retry_limit - self._failures} attempts left")
        self._failures = 0
        self._session = self._rng.randbytes(16).hex()
        return self._session

    def _require(self, session: str | None) -> None:
        if self._locked:
            raise CardError("locked")
        if session is None or session != self._session:
            raise CardError("no_session")

    def _advance(self, ts: int) -> None:
        if ts <= self._card_ts:  # pragma: no cover - callers check first
            raise CardError("stale_ts")
        self._card_ts = ts
        self._seen_license_ids.clear()
        self._seen_cd_cert_ids.clear()

    # -- authorization categories -------------------------------------------------

    @_serialized
    def check_authorization_category(self, session: str, content_rating: str, now_ts: int) -> bool:
        self._require(session)
        return self._category_allows(content_rating, now_ts)

    def _category_allows(self, rating: str, now_ts: int) -> bool:
        min_age = self.min_age.get(rating)
        if min_age is None:
            return True
        holder = self._holder
        if holder is None:
            raise CardError("invalid_attributes", "no holder attributes installed")
        provider = self.cert_chain[-1]
        if not provider.verify_key.group.verify(provider.verify_key, holder.payload(), holder.signature):
            raise CardError("invalid_attributes", "attribute signature does not verify")
        try:
            dob = date.fromisoformat(holder.date_of_birth)
        except ValueError:
            raise CardError("invalid_attributes", "unparseable date of birth") from None
        return now_ts >= birthday_ts(dob, min_age)

    # -- purchase ---------------------------------------------------------------

    @_serialized
    def begin_purchase(
        self,
        session: str,
        challenge_r: bytes,
        rating: str = "unrated",
        challenge: SignedChallenge | None = None,
    ) -> PurchaseResponse:
        """Answer a provider challenge with a fresh temporary key and a signature.

        The category check runs against the card timestamp, or against the
        provider-signed challenge time when that is newer and verifies.
        """
        self._require(session)
        now = self._card_ts
        if challenge is not None:
            if challenge.r != challenge_r:
                raise CardError("bad_challenge", "signed nonce does not match")
            now = max(now, self._challenge_time(challenge))
        if not self._category_allows(rating, now):
            raise CardError("category_denied", rating)
        keypair = pre.keygen(self.group, self._rng)
        fp = keypair.public.fingerprint()
        self._pending[fp] = keypair
        while len(self._pending) > self.max_pending:
            self._pending.popitem(last=False)
        sig = self.group.sign(self._sk_sc.sk, purchase_payload(challenge_r, keypair.public, rating))
        return PurchaseResponse(keypair.public, sig, self.cert_chain, rating)

    def _challenge_time(self, challenge: SignedChallenge) -> int:
        try:
            cp_cert = validate_chain(challenge.cert_chain, self.root, Role.CONTENT_PROVIDER)
        except CertificateError as exc:
            raise CardError("bad_challenge", str(exc)) from None
        if not verify(SignedBlob(challenge_payload(challenge.r, challenge.ts), challenge.signature), cp_cert):
            raise CardError("bad_challenge", "challenge signature does not verify")
        return challenge.ts

    def _key_for(self, fingerprint: str) -> pre.PreKeyPair:
        if fingerprint in self._pending:
            return self._pending[fingerprint]
        for entries in self._licenses.values():
            for stored in entries:
                if stored.fingerprint == fingerprint:
                    return stored.keypair
        raise CardError("no_pending_key", fingerprint)

    @_serialized
    def store_license(
        self,
        session: str,
        fingerprint: str,
        license_kem: pre.FirstLevelCiphertext,
        license_dem: bytes,
        signature: bytes,
    ) -> License:
        self._require(session)
        keypair = self._key_for(fingerprint)
        try:
            plaintext = hybrid_decrypt(license_kem, license_dem, keypair.secret.a1)
            lic = License.from_dict(self.group, parse_json(plaintext))
        except AuthenticationError as exc:
            raise CardError("decrypt_failed", str(exc)) from None
        except (LicenseError, ValueError) as exc:
            raise CardError("malformed", str(exc)) from None
        try:
            validate_chain([lic.issuer], self.root, Role.CONTENT_PROVIDER)
        except CertificateError as exc:
            raise CardError("unknown_issuer", str(exc)) from None
        if not verify(SignedBlob(plaintext, signature), lic.issuer):
            raise CardError("bad_signature")
        if lic.license_id in self._seen_license_ids:
            raise CardError("replayed_id", lic.license_id)
        if lic.ts <= self._card_ts:
            raise CardError("stale_ts", f"{lic.ts} <= {self._card_ts}")
        self._advance(lic.ts)
        self._seen_license_ids.add(lic.license_id)
        self._licenses.setdefault(lic.content_id, []).append(_Stored(lic, keypair, fingerprint))
        self._pending.pop(fingerprint, None)
        return lic

    # -- execution -------------------------------------------------------------

    @_serialized
    def list_content(self, session: str) -> list[str]:
        self._require(session)
        return sorted(self._licenses)

    @_serialized
    def authorize_execution(self, session: str, content_id: str, cd_chain: Sequence[Certificate]) -> Authorization:
        self._require(session)
        entries = self._licenses.get(content_id)
        if not entries:
            raise CardError("unknown_content", content_id)
        try:
            cd_cert = validate_chain(cd_chain, self.root, Role.CONTENT_DISTRIBUTOR_EPHEMERAL)
        except CertificateError as exc:
            raise CardError("not_a_cd", str(exc)) from None
        if cd_cert.pre_public is None:
            raise CardError("not_a_cd", "certificate carries no re-encryption public key")
        if cd_cert.cert_id in self._seen_cd_cert_ids:
            raise CardError("replayed_cert_id", cd_cert.cert_id)
        if cd_cert.ts <= self._card_ts:
            raise CardError("stale_ts", f"{cd_cert.ts} <= {self._card_ts}")
        self._advance(cd_cert.ts)
        self._seen_cd_cert_ids.add(cd_cert.cert_id)

        reason = None
        for stored in entries:
            decision = check_terms(stored.license.terms, self._card_ts)
            if decision:
                new_terms = consume(stored.license.terms, self._card_ts)
                stored.license = replace(stored.license, terms=new_terms)
                rk = pre.rekeygen(
                    stored.keypair.secret.a1,
                    cd_cert.pre_public.g_a2,
                    from_hint=stored.fingerprint,
                    to_hint=cd_cert.cert_id,
                )
                return Authorization(rk, stored.fingerprint)
            reason = decision.reason
        raise CardError("terms_denied", reason or "")

    def license_for(self, content_id: str) -> list[License]:
        """Stored licenses for ``content_id`` (inspection helper for tests and reports)."""
        with self._lock:
            return [s.license for s in self._licenses.get(content_id, [])]

    # -- command interface -------------------------------------------------------

    def handle_frame(self, data: bytes) -> bytes:
        """Process one framed ``card_command`` envelope and return the framed reply."""
        try:
            payload, rest = unframe(data)
            if rest:
                raise SchemaError("trailing bytes after command frame")
            env = Envelope.from_bytes(payload)
            if env.message_type is not MessageType.CARD_COMMAND:
                raise SchemaError("card accepts card_command envelopes only")
            reply = Envelope(MessageType.CARD_COMMAND, {"cmd": env.body["cmd"], **self._dispatch(env.body)})
        except CardError as exc:
            reply = Envelope.error("card", exc.reason, exc.detail)
        except (SchemaError, KeyError, ValueError, TypeError, EncodingError, CertificateError) as exc:
            reply = Envelope.error("card", "bad_command", str(exc))
        return frame(reply.to_bytes())

    def _dispatch(self, body: Mapping[str, Any]) -> dict[str, Any]:
        cmd = body["cmd"]
        args = body.get("args", {})
        g = self.group
        if cmd == "verify_pin":
            return {"session": self.verify_pin(str(args["pin"]))}
        if cmd == "begin_purchase":
            challenge = args.get("challenge")
            resp = self.begin_purchase(
                args["session"],
                b64d(args["r"]),
                str(args.get("rating", "unrated")),
                SignedChallenge.from_dict(g, challenge) if challenge else None,
            )
            return {
                "pk_tmp": b64e(resp.pk_tmp.to_bytes()),
                "signature": b64e(resp.signature),
                "cert_chain": chain_to_wire(resp.cert_chain),
                "rating": resp.rating,
            }
        if cmd == "store_license":
            kem = pre.decode_ciphertext(g, b64d(args["license_kem"]))
            if not isinstance(kem, pre.FirstLevelCiphertext):
                raise CardError("malformed", "license key must be first-level")
            lic = self.store_license(
                args["session"], str(args["fingerprint"]), kem, b64d(args["license_dem"]), b64d(args["signature"])
            )
            return {"content_id": lic.content_id}
        if cmd == "list_content":
            return {"content_ids": self.list_content(args["session"])}
        if cmd == "authorize_execution":
            auth = self.authorize_execution(
                args["session"], str(args["content_id"]), chain_from_wire(g, args["cert_chain"])
            )
            return {"rk": b64e(auth.rk.rk.to_bytes()), "fingerprint": auth.fingerprint}
        if cmd == "check_category":
            ok = self.check_authorization_category(args["session"], str(args["rating"]), int(args["now_ts"]))
            return {"allowed": ok}
        raise CardError("unknown_command", str(cmd))


class CardChannel:
    """Host-side handle that drives a card through framed command envelopes.

    Every command and reply is appended to ``transcript`` so tests can scan
    exactly what crossed the card boundary.
    """

    def __init__(self, card: Smartcard, transcript: Transcript | None = None) -> None:
        self._card = card
        self.group = card.group
        self.transcript = transcript if transcript is not None else Transcript("card")

    def _call(self, cmd: str, **args: Any) -> dict[str, Any]:
        req = Envelope(MessageType.CARD_COMMAND, {"cmd": cmd, "args": args})
        self.transcript.append("out", "card", req)
        payload, _ = unframe(self._card.handle_frame(frame(req.to_bytes())))
        reply = Envelope.from_bytes(payload)
        self.transcript.append("in", "card", reply)
        try:
            raise_for_error(reply)
        except RemoteError as exc:
            raise CardError(exc.reason, exc.detail) from None
        return dict(reply.body)

    def verify_pin(self, pin: str) -> str:
        return self._call("verify_pin", pin=pin)["session"]

    def begin_purchase(
        self, session: str, r: bytes, rating: str = "unrated", challenge: SignedChallenge | None = None
    ) -> PurchaseResponse:
        extra = {"challenge": challenge.to_dict()} if challenge is not None else {}
        out = self._call("begin_purchase", session=session, r=b64e(r), rating=rating, **extra)
        return PurchaseResponse(
            pre.PublicKey.from_bytes(self.group, b64d(out["pk_tmp"])),
            b64d(out["signature"]),
            tuple(chain_from_wire(self.group, out["cert_chain"])),
            out["rating"],
        )

    def store_license(self, session: str, fingerprint: str, license_kem: bytes, license_dem: bytes, signature: bytes) -> str:
        out = self._call(
            "store_license",
            session=session,
            fingerprint=fingerprint,
            license_kem=b64e(license_kem),
            license_dem=b64e(license_dem),
            signature=b64e(signature),
        )
        return out["content_id"]

    def list_content(self, session: str) -> list[str]:
        return list(self._call("list_content", session=session)["content_ids"])

    def authorize_execution(self, session: str, content_id: str, cd_chain: Sequence[Certificate]) -> Authorization:
        out = self._call(
            "authorize_execution", session=session, content_id=content_id, cert_chain=chain_to_wire(cd_chain)
        )
        return Authorization(pre.ReEncryptionKey(self.group.decode_g1(b64d(out["rk"]))), out["fingerprint"])

    def check_authorization_category(self, session: str, rating: str, now_ts: int) -> bool:
        return bool(self._call("check_category", session=session, rating=rating, now_ts=now_ts)["allowed"])
