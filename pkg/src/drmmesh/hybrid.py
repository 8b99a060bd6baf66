"""Symmetric content protection, signatures, certificates and KEM-DEM.

Everything that gets signed or sent is serialized with :func:`canonical_json`
(sorted keys, no whitespace, binary fields as unpadded base64url).
"""

from __future__ import annotations

import base64
import enum
import json
from collections.abc import Sequence
from dataclasses import dataclass, field, replace
from typing import Any

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives import hashes
from cryptography.hazmat.primitives.ciphers.aead import AESGCM
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

from . import pre
from .pairing import EncodingError, G1Element, G2Element, PairingGroup, RandomSource, Scalar

NONCE_SIZE = 12
KEY_SIZE = 32


class CryptoError(Exception):
    pass


class AuthenticationError(CryptoError):
    """AEAD tag check failed: wrong key or tampered ciphertext."""


class CertificateError(CryptoError):
    def __init__(self, reason: str, detail: str = "") -> None:
        super().__init__(f"{reason}: {detail}" if detail else reason)
        self.reason = reason


class SecretLeakError(TypeError):
    """Raised when a secret-bearing object reaches a serializer."""


# -- canonical encoding ----------------------------------------------------

def b64e(data: bytes) -> str:
    return base64.urlsafe_b64encode(data).rstrip(b"=").decode("ascii")


def b64d(text: str) -> bytes:
    if not isinstance(text, str):
        raise ValueError("expected base64url text")
    return base64.urlsafe_b64decode(text + "=" * (-len(text) % 4))


def _refuse(obj: Any) -> Any:
    if isinstance(obj, (Scalar, pre.SecretKey, pre.PreKeyPair, SigningKey)):
        raise SecretLeakError(f"{type(obj).__name__} must never be serialized")
    raise TypeError(f"{type(obj).__name__} is not canonically serializable")


def canonical_json(obj: Any) -> bytes:
    return json.dumps(
        obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False, allow_nan=False, default=_refuse
    ).encode("utf-8")


def parse_json(data: bytes) -> Any:
    return json.loads(data.decode("utf-8"))


# -- content keys and AEAD ---------------------------------------------------

@dataclass(frozen=True, repr=False)
class ContentKey:
    g2_seed: G2Element
    derived_key: bytes

    def __repr__(self) -> str:
        return "ContentKey(<hidden>)"


def kdf_content_key(seed: G2Element) -> ContentKey:
    hkdf = HKDF(algorithm=hashes.SHA256(), length=KEY_SIZE, salt=None, info=b"drmmesh content key v1")
    return ContentKey(seed, hkdf.derive(seed.to_bytes()))


def random_content_key(group: PairingGroup, rng: RandomSource) -> ContentKey:
    return kdf_content_key(group.random_g2(rng))


def encrypt_content(plaintext: bytes, ck: ContentKey, rng: RandomSource, aad: bytes = b"") -> bytes:
    nonce = rng.randbytes(NONCE_SIZE)
    return nonce + AESGCM(ck.derived_key).encrypt(nonce, plaintext, aad or None)


def decrypt_content(ciphertext: bytes, ck: ContentKey, aad: bytes = b"") -> bytes:
    if len(ciphertext) < NONCE_SIZE + 16:
        raise AuthenticationError("ciphertext too short")
    try:
        return AESGCM(ck.derived_key).decrypt(ciphertext[:NONCE_SIZE], ciphertext[NONCE_SIZE:], aad or None)
    except InvalidTag:
        raise AuthenticationError("content authentication failed") from None


# -- signatures ------------------------------------------------------------

@dataclass(frozen=True, repr=False)
class SigningKey:
    sk: Scalar
    verify_key: G1Element

    @classmethod
    def generate(cls, group: PairingGroup, rng: RandomSource) -> SigningKey:
        sk = group.random_nonzero_scalar(rng)
        return cls(sk, group.g ** sk)

    def __repr__(self) -> str:
        return "SigningKey(<hidden>)"

    def __reduce__(self):
        raise TypeError("signing keys are not serializable")


@dataclass(frozen=True)
class SignedBlob:
    payload: bytes
    signature: bytes
    signer_id: str = ""


def sign(payload: bytes, key: SigningKey, signer_id: str = "") -> SignedBlob:
    return SignedBlob(payload, key.verify_key.group.sign(key.sk, payload), signer_id)


def verify(blob: SignedBlob, cert: Certificate) -> bool:
    if blob.signer_id and blob.signer_id != cert.cert_id:
        return False
    return cert.verify_key.group.verify(cert.verify_key, blob.payload, blob.signature)


# -- certificates ----------------------------------------------------------

class Role(str, enum.Enum):
    ROOT = "root"
    SMARTCARD_PROVIDER = "smartcard_provider"
    SMARTCARD = "smartcard"
    CONTENT_PROVIDER = "content_provider"
    CONTENT_DISTRIBUTOR = "content_distributor"
    CONTENT_DISTRIBUTOR_EPHEMERAL = "content_distributor_ephemeral"
    BANK = "bank"


#: Which role may issue a certificate of a given role.
ISSUER_ROLE = {
    Role.SMARTCARD_PROVIDER: Role.ROOT,
    Role.CONTENT_PROVIDER: Role.ROOT,
    Role.CONTENT_DISTRIBUTOR: Role.ROOT,
    Role.BANK: Role.ROOT,
    Role.SMARTCARD: Role.SMARTCARD_PROVIDER,
    Role.CONTENT_DISTRIBUTOR_EPHEMERAL: Role.CONTENT_DISTRIBUTOR,
}


@dataclass(frozen=True)
class Certificate:
    cert_id: str
    role: Role
    subject: str
    ts: int
    verify_key: G1Element
    issuer_id: str
    pre_public: pre.PublicKey | None = None
    signature: bytes = field(default=b"", repr=False)

    def body(self) -> dict[str, Any]:
        return {
            "cert_id": self.cert_id,
            "role": self.role.value,
            "subject": self.subject,
            "ts": self.ts,
            "verify_key": b64e(self.verify_key.to_bytes()),
            "issuer": self.issuer_id,
            "pre_public": b64e(self.pre_public.to_bytes()) if self.pre_public else None,
        }

    def tbs_bytes(self) -> bytes:
        return canonical_json(self.body())

    def to_dict(self) -> dict[str, Any]:
        return {**self.body(), "signature": b64e(self.signature)}

    def to_bytes(self) -> bytes:
        return canonical_json(self.to_dict())

    @classmethod
    def from_dict(cls, group: PairingGroup, d: dict[str, Any]) -> Certificate:
        try:
            return cls(
                cert_id=str(d["cert_id"]),
                role=Role(d["role"]),
                subject=str(d["subject"]),
                ts=int(d["ts"]),
                verify_key=group.decode_g1(b64d(d["verify_key"])),
                issuer_id=str(d["issuer"]),
                pre_public=pre.PublicKey.from_bytes(group, b64d(d["pre_public"])) if d.get("pre_public") else None,
                signature=b64d(d["signature"]),
            )
        except (KeyError, ValueError, TypeError, EncodingError) as exc:
            raise CertificateError("malformed", str(exc)) from None


def issue_certificate(
    issuer_key: SigningKey,
    *,
    issuer_id: str | None,
    role: Role,
    subject: str,
    ts: int,
    verify_key: G1Element,
    cert_id: str,
    pre_public: pre.PublicKey | None = None,
) -> Certificate:
    """Sign a new certificate. ``issuer_id=None`` makes it self-issued (root)."""
    unsigned = Certificate(
        cert_id=cert_id,
        role=role,
        subject=subject,
        ts=ts,
        verify_key=verify_key,
        issuer_id=cert_id if issuer_id is None else issuer_id,
        pre_public=pre_public,
    )
    sig = issuer_key.verify_key.group.sign(issuer_key.sk, unsigned.tbs_bytes())
    return replace(unsigned, signature=sig)


def _check_sig(cert: Certificate, issuer: Certificate) -> bool:
    return issuer.verify_key.group.verify(issuer.verify_key, cert.tbs_bytes(), cert.signature)


def validate_root(root: Certificate) -> None:
    if root.role is not Role.ROOT or root.issuer_id != root.cert_id or not _check_sig(root, root):
        raise CertificateError("bad_root", root.cert_id)


def validate_chain(chain: Sequence[Certificate], root: Certificate, leaf_role: Role) -> Certificate:
    """Check ``chain`` (leaf first) up to ``root``; return the leaf.

    Each certificate must be signed by the next one (the last by ``root``), and
    every issuer must hold the role allowed to issue the subject's role.
    """
    if not chain:
        raise CertificateError("empty_chain")
    if chain[0].role is not leaf_role:
        raise CertificateError("role_mismatch", f"expected {leaf_role.value}, got {chain[0].role.value}")
    for i, cert in enumerate(chain):
        issuer = chain[i + 1] if i + 1 < len(chain) else root
        expected = ISSUER_ROLE.get(cert.role)
        if expected is None or issuer.role is not expected:
            raise CertificateError("role_mismatch", f"{cert.role.value} cannot be issued by {issuer.role.value}")
        if cert.issuer_id != issuer.cert_id:
            raise CertificateError("wrong_issuer", cert.cert_id)
        if not _check_sig(cert, issuer):
            raise CertificateError("bad_signature", cert.cert_id)
        if issuer is root:
            break
    else:  # pragma: no cover - loop always reaches root
        raise CertificateError("unanchored")
    return chain[0]


def chain_to_wire(chain: Sequence[Certificate]) -> list[dict[str, Any]]:
    return [c.to_dict() for c in chain]


def chain_from_wire(group: PairingGroup, items: Any) -> list[Certificate]:
    if not isinstance(items, list):
        raise CertificateError("malformed", "chain must be a list")
    return [Certificate.from_dict(group, d) for d in items]


# -- KEM-DEM ---------------------------------------------------------------

def hybrid_encrypt(
    payload: bytes, pk_z_a1: G2Element, rng: RandomSource
) -> tuple[pre.FirstLevelCiphertext, bytes]:
    """Encapsulate a fresh random G2 element and AEAD-encrypt ``payload`` under it."""
    if not payload:
        raise ValueError("payload must be nonempty")
    group = pk_z_a1.group
    m = group.random_g2(rng)
    kem = pre.encrypt_first(m, pk_z_a1, rng)
    dem = encrypt_content(payload, kdf_content_key(m), rng, aad=kem.to_bytes())
    return kem, dem


def hybrid_decrypt(kem: pre.FirstLevelCiphertext, dem: bytes, a1: Scalar) -> bytes:
    try:
        m = pre.decrypt_first(kem, a1)
    except pre.DecryptionError as exc:
        raise AuthenticationError(f"decapsulation failed: {exc}") from None
    return decrypt_content(dem, kdf_content_key(m), aad=kem.to_bytes())
