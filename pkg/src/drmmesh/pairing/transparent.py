"""Insecure exponent-arithmetic backend.

Every element is stored as its discrete logarithm modulo ``q``: ``g^x`` is
``x`` in G1 and ``Z^x`` is ``x`` in G2. Group multiplication is exponent
addition and the pairing is exponent multiplication, so every scheme equation
can be checked exactly with ordinary integers. Never use it for real secrets.
"""

from __future__ import annotations

import hashlib
import hmac

from .base import BackendId, EncodingError, G1Element, GroupTag, PairingGroup, Scalar

#: Order of the BLS12-381 prime-order subgroup. Used as the default modulus for
#: protocol-level runs so encodings have realistic widths.
LARGE_PRIME = 0x73EDA753299D7D483339D80809A1D80553BDA402FFFE5BFEFFFFFFFF00000001


def _is_prime(n: int) -> bool:
    from sympy import isprime

    return bool(isprime(n))


class TransparentGroup(PairingGroup):
    backend_id = BackendId.TRANSPARENT

    def __init__(self, q: int = 101) -> None:
        if q < 101:
            raise ValueError("transparent group order must be at least 101")
        if q != LARGE_PRIME and not _is_prime(q):
            raise ValueError(f"group order {q} is not prime")
        self.order = q
        super().__init__()

    def _raw_generator(self) -> int:
        return 1

    def _raw_g1_identity(self) -> int:
        return 0

    def _raw_g2_identity(self) -> int:
        return 0

    def _raw_g1_pow(self, raw: int, e: int) -> int:
        return raw * e % self.order

    def _raw_g1_mul(self, a: int, b: int) -> int:
        return (a + b) % self.order

    _raw_g2_pow = _raw_g1_pow
    _raw_g2_mul = _raw_g1_mul

    def _raw_g2_inv(self, a: int) -> int:
        return -a % self.order

    def _raw_pairing(self, a: int, b: int) -> int:
        return a * b % self.order

    def _raw_eq(self, tag: GroupTag, a: int, b: int) -> bool:
        return a == b

    def _raw_encode(self, tag: GroupTag, raw: int) -> bytes:
        return raw.to_bytes((raw.bit_length() + 7) // 8, "big")

    def _raw_decode(self, tag: GroupTag, payload: bytes) -> int:
        if payload[:1] == b"\x00":
            raise EncodingError("exponent encoding is not minimal")
        value = int.from_bytes(payload, "big")
        if value >= self.order:
            raise EncodingError("exponent out of range")
        return value

    def describe(self, element) -> str:
        return f"exp={element.raw}"

    # Keyed-hash stand-in for BLS: in this backend the public key *is* the
    # secret exponent, so the verifier can recompute the MAC.
    def _mac(self, key: int, message: bytes) -> bytes:
        width = (self.order.bit_length() + 7) // 8
        return hmac.new(key.to_bytes(width, "big"), b"drmmesh/sig\x00" + message, hashlib.sha256).digest()

    def sign(self, sk: Scalar, message: bytes) -> bytes:
        return self._mac(self._exponent(sk), message)

    def verify(self, pk: G1Element, message: bytes, signature: bytes) -> bool:
        self._own(pk)
        return hmac.compare_digest(self._mac(pk.raw, message), signature)
