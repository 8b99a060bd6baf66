"""BLS12-381 backend built on the ``mcl`` library (via ``pymcl``).

The scheme is written for a symmetric pairing ``e: G1 x G1 -> G2`` while
BLS12-381 is asymmetric. Each symmetric-G1 element therefore carries both
curve representations ``(x*P, x*Q)`` for the fixed generators ``P`` of the
curve's first group and ``Q`` of its twist; ``pairing(a, b)`` evaluates
``e(a.P, b.Q)``, which is symmetric in ``a`` and ``b``. Target-group elements
are plain GT values.
"""

from __future__ import annotations

import hashlib

import pymcl

from .base import BackendId, EncodingError, G1Element, GroupTag, PairingGroup, Scalar

_P_LEN = 48
_Q_LEN = 96
_GT_LEN = 576


def _fr(e: int) -> pymcl.Fr:
    return pymcl.Fr(str(e))


class ProductionGroup(PairingGroup):
    backend_id = BackendId.PRODUCTION

    def __init__(self) -> None:
        self.order = int(pymcl.r)
        self._r_minus_1 = _fr(self.order - 1)
        super().__init__()
        self._gt_one = self.g2_identity.raw

    def _raw_generator(self):
        return (pymcl.g1, pymcl.g2)

    def _raw_g1_identity(self):
        return (pymcl.G1(), pymcl.G2())

    def _raw_g2_identity(self):
        return pymcl.pairing(pymcl.g1, pymcl.g2) ** _fr(0)

    def _raw_g1_pow(self, raw, e: int):
        s = _fr(e)
        return (raw[0] * s, raw[1] * s)

    def _raw_g1_mul(self, a, b):
        return (a[0] + b[0], a[1] + b[1])

    def _raw_g2_pow(self, raw, e: int):
        return raw ** _fr(e)

    def _raw_g2_mul(self, a, b):
        return a * b

    def _raw_g2_inv(self, a):
        return ~a

    def _raw_pairing(self, a, b):
        return pymcl.pairing(a[0], b[1])

    def _raw_eq(self, tag: GroupTag, a, b) -> bool:
        if tag is GroupTag.G1:
            return a[0] == b[0] and a[1] == b[1]
        return a == b

    def _raw_encode(self, tag: GroupTag, raw) -> bytes:
        if tag is GroupTag.G1:
            return raw[0].serialize() + raw[1].serialize()
        return raw.serialize()

    def _in_subgroup(self, point) -> bool:
        return (point * self._r_minus_1 + point).is_zero()

    def _raw_decode(self, tag: GroupTag, payload: bytes):
        try:
            if tag is GroupTag.G1:
                if len(payload) != _P_LEN + _Q_LEN:
                    raise EncodingError("bad G1 payload length")
                p = pymcl.G1.deserialize(payload[:_P_LEN])
                q = pymcl.G2.deserialize(payload[_P_LEN:])
                if not (self._in_subgroup(p) and self._in_subgroup(q)):
                    raise EncodingError("point outside the prime-order subgroup")
                # both halves must carry the same exponent
                if pymcl.pairing(p, pymcl.g2) != pymcl.pairing(pymcl.g1, q):
                    raise EncodingError("inconsistent paired representation")
                return (p, q)
            if len(payload) != _GT_LEN:
                raise EncodingError("bad G2 payload length")
            x = pymcl.GT.deserialize(payload)
        except (RuntimeError, ValueError) as exc:
            raise EncodingError(f"mcl rejected encoding: {exc}") from None
        if x ** self._r_minus_1 * x != self._gt_one:
            raise EncodingError("target-group element outside the order-r subgroup")
        return x

    def describe(self, element) -> str:
        return element.to_bytes()[4:12].hex() + "..."

    # BLS short signatures on the native curve: sig = H(m)^sk in the first
    # curve group, verified against the twist half of the public key.
    def _hash_point(self, message: bytes):
        return pymcl.G1.hash(hashlib.sha256(b"drmmesh/sig\x00" + message).hexdigest())

    def sign(self, sk: Scalar, message: bytes) -> bytes:
        return (self._hash_point(message) * _fr(self._exponent(sk))).serialize()

    def verify(self, pk: G1Element, message: bytes, signature: bytes) -> bool:
        self._own(pk)
        if len(signature) != _P_LEN:
            return False
        try:
            sig = pymcl.G1.deserialize(signature)
        except (RuntimeError, ValueError):
            return False
        if sig.is_zero() or not self._in_subgroup(sig):
            return False
        return pymcl.pairing(sig, pymcl.g2) == pymcl.pairing(self._hash_point(message), pk.raw[1])
