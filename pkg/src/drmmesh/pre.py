"""Unidirectional proxy re-encryption over a symmetric pairing group.

Keys are pairs ``pk = (Z^a1, g^a2)``, ``sk = (a1, a2)``. Second-level
ciphertexts ``(g^k, m Z^(a1 k))`` can be turned by anyone holding
``rk = g^(a1 b2)`` into first-level ciphertexts ``(Z^(b2 a1 k), m Z^(a1 k))``
that only the holder of ``b2`` can open. Directly produced first-level
ciphertexts ``(Z^(a1 k), m Z^k)`` open with ``a1``.

Note on naming: the delegatee's decryption exponent ``b2`` is the *second*
secret component of its key pair (``SecretKey.a2``).
"""

from __future__ import annotations

import enum
import hashlib
from dataclasses import dataclass

from .pairing import EncodingError, G1Element, G2Element, PairingGroup, RandomSource, Scalar


class PreError(Exception):
    pass


class DecryptionError(PreError):
    pass


@dataclass(frozen=True)
class PublicKey:
    z_a1: G2Element
    g_a2: G1Element

    def to_bytes(self) -> bytes:
        return self.z_a1.to_bytes() + self.g_a2.to_bytes()

    @classmethod
    def from_bytes(cls, group: PairingGroup, data: bytes) -> PublicKey:
        z_a1, rest = group.decode_prefix(data)
        g_a2 = group.decode(rest)
        if not isinstance(z_a1, G2Element) or not isinstance(g_a2, G1Element):
            raise EncodingError("public key must be (G2, G1)")
        return cls(z_a1, g_a2)

    def fingerprint(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()[:32]


@dataclass(frozen=True, repr=False)
class SecretKey:
    a1: Scalar
    a2: Scalar

    def __repr__(self) -> str:
        return "SecretKey(<hidden>)"

    def __reduce__(self):
        raise TypeError("secret keys are not serializable")


@dataclass(frozen=True)
class PreKeyPair:
    public: PublicKey
    secret: SecretKey

    def check(self, group: PairingGroup) -> bool:
        return (
            self.public.z_a1 == group.z ** self.secret.a1
            and self.public.g_a2 == group.g ** self.secret.a2
        )


@dataclass(frozen=True)
class ReEncryptionKey:
    rk: G1Element
    from_hint: str = ""
    to_hint: str = ""


class Origin(enum.IntEnum):
    # values double as the wire tag byte
    DIRECT = 1
    REENCRYPTED = 2


SECOND_LEVEL_TAG = 3


@dataclass(frozen=True)
class FirstLevelCiphertext:
    alpha: G2Element
    beta: G2Element
    origin: Origin = Origin.DIRECT

    def to_bytes(self) -> bytes:
        return bytes([int(self.origin)]) + self.alpha.to_bytes() + self.beta.to_bytes()


@dataclass(frozen=True)
class SecondLevelCiphertext:
    gamma: G1Element
    beta: G2Element

    def to_bytes(self) -> bytes:
        return bytes([SECOND_LEVEL_TAG]) + self.gamma.to_bytes() + self.beta.to_bytes()


def decode_ciphertext(group: PairingGroup, data: bytes) -> FirstLevelCiphertext | SecondLevelCiphertext:
    if not data:
        raise EncodingError("empty ciphertext")
    tag, body = data[0], data[1:]
    first, rest = group.decode_prefix(body)
    second = group.decode(rest)
    if tag == SECOND_LEVEL_TAG:
        if not isinstance(first, G1Element) or not isinstance(second, G2Element):
            raise EncodingError("second-level ciphertext must be (G1, G2)")
        return SecondLevelCiphertext(first, second)
    try:
        origin = Origin(tag)
    except ValueError:
        raise EncodingError(f"unknown ciphertext tag {tag}") from None
    if not isinstance(first, G2Element) or not isinstance(second, G2Element):
        raise EncodingError("first-level ciphertext must be (G2, G2)")
    return FirstLevelCiphertext(first, second, origin)


def keygen(
    group: PairingGroup,
    rng: RandomSource,
    *,
    a1: Scalar | int | None = None,
    a2: Scalar | int | None = None,
) -> PreKeyPair:
    """Generate ``pk = (Z^a1, g^a2)``. ``a1``/``a2`` may be pinned for test vectors."""
    s1 = group.random_nonzero_scalar(rng) if a1 is None else group.scalar(int(getattr(a1, "value", a1)))
    s2 = group.random_nonzero_scalar(rng) if a2 is None else group.scalar(int(getattr(a2, "value", a2)))
    return PreKeyPair(PublicKey(group.z ** s1, group.g ** s2), SecretKey(s1, s2))


def rekeygen(
    delegator_a1: Scalar,
    delegatee_g_b2: G1Element,
    *,
    from_hint: str = "",
    to_hint: str = "",
) -> ReEncryptionKey:
    if delegator_a1.is_zero():
        raise PreError("refusing to delegate with a zero secret")
    return ReEncryptionKey(delegatee_g_b2 ** delegator_a1, from_hint, to_hint)


def _k(group: PairingGroup, rng: RandomSource, k: Scalar | int | None) -> Scalar:
    if k is None:
        return group.random_nonzero_scalar(rng)
    k = group.scalar(int(getattr(k, "value", k)))
    if k.is_zero():
        raise PreError("encryption randomness must be nonzero")
    return k


def encrypt_first(
    m: G2Element, pk_z_a1: G2Element, rng: RandomSource, *, k: Scalar | int | None = None
) -> FirstLevelCiphertext:
    group = m.group
    k = _k(group, rng, k)
    return FirstLevelCiphertext(pk_z_a1 ** k, m * group.z ** k, Origin.DIRECT)


def encrypt_second(
    m: G2Element, pk_z_a1: G2Element, rng: RandomSource, *, k: Scalar | int | None = None
) -> SecondLevelCiphertext:
    group = m.group
    k = _k(group, rng, k)
    return SecondLevelCiphertext(group.g ** k, m * pk_z_a1 ** k)


def rerandomize(
    c: SecondLevelCiphertext, pk_z_a1: G2Element, rng: RandomSource, *, k: Scalar | int | None = None
) -> SecondLevelCiphertext:
    """Shift the randomness of a second-level ciphertext using only the public key.

    ``(g^k, m Z^(a1 k))`` becomes ``(g^(k+k'), m Z^(a1 (k+k')))``. Without this
    step every re-encryption of one stored ciphertext repeats its ``beta``.
    """
    group = c.gamma.group
    k = _k(group, rng, k)
    return SecondLevelCiphertext(c.gamma * group.g ** k, c.beta * pk_z_a1 ** k)


def reencrypt(c: SecondLevelCiphertext, rk: ReEncryptionKey) -> FirstLevelCiphertext:
    group = c.gamma.group
    return FirstLevelCiphertext(group.pairing(c.gamma, rk.rk), c.beta, Origin.REENCRYPTED)


def decrypt_first(c: FirstLevelCiphertext, secret_component: Scalar) -> G2Element:
    """Recover ``m = beta / alpha^(1/s)``.

    Pass ``a1`` for directly encrypted ciphertexts and the delegatee's ``a2``
    for re-encrypted ones.
    """
    if not isinstance(c, FirstLevelCiphertext):
        raise DecryptionError("only first-level ciphertexts can be decrypted")
    if c.alpha.group.fingerprint != c.beta.group.fingerprint:
        raise DecryptionError("malformed ciphertext: mixed groups")
    try:
        inv = secret_component.inverse()
    except ZeroDivisionError:
        raise DecryptionError("secret component is not invertible") from None
    return c.beta / c.alpha ** inv


def decrypt_second(c: SecondLevelCiphertext, a1: Scalar) -> G2Element:
    """Owner-side decryption of a second-level ciphertext: ``beta / e(gamma, g)^a1``."""
    group = c.gamma.group
    return c.beta / group.pairing(c.gamma, group.g) ** a1
