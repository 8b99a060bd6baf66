"""Symmetric bilinear-group interface shared by every backend.

The rest of the package only talks to :class:`PairingGroup` and the element
types defined here. A backend supplies the raw arithmetic; elements keep a
reference to the group that produced them so mixed-backend arithmetic is
caught early instead of producing garbage.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass
from typing import Any, Protocol


class PairingError(Exception):
    """Base class for group/pairing failures."""


class BackendMismatchError(PairingError):
    """Operands belong to different groups or backends."""


class EncodingError(PairingError):
    """A byte string is not a valid element encoding for the active group."""


class BackendId(enum.IntEnum):
    TRANSPARENT = 1
    PRODUCTION = 2


class GroupTag(enum.IntEnum):
    G1 = 1
    G2 = 2


class RandomSource(Protocol):
    """Anything exposing ``randrange``/``randbytes`` (random.Random, SystemRandom)."""

    def randrange(self, start: int, stop: int = ..., step: int = ...) -> int: ...

    def randbytes(self, n: int) -> bytes: ...


class Scalar:
    """An integer modulo the group order.

    Scalars are almost always secrets (key components, encryption randomness),
    so the value is hidden from ``repr`` and refuses to be pickled.
    """

    __slots__ = ("value", "q")

    def __init__(self, value: int, q: int) -> None:
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "value", value % q)

    def __setattr__(self, name: str, value: Any) -> None:
        raise AttributeError("Scalar is immutable")

    def __repr__(self) -> str:
        return f"Scalar(<{self.q.bit_length()}-bit, hidden>)"

    def __reduce__(self):
        raise TypeError("secret scalars are not serializable")

    def __eq__(self, other: object) -> bool:
        if isinstance(other, Scalar):
            return self.q == other.q and self.value == other.value
        return NotImplemented

    def __hash__(self) -> int:
        return hash((self.q, self.value))

    def _coerce(self, other: Scalar | int) -> int:
        if isinstance(other, Scalar):
            if other.q != self.q:
                raise BackendMismatchError("scalars from different groups")
            return other.value
        return other

    def __add__(self, other: Scalar | int) -> Scalar:
        return Scalar(self.value + self._coerce(other), self.q)

    def __mul__(self, other: Scalar | int) -> Scalar:
        return Scalar(self.value * self._coerce(other), self.q)

    __radd__ = __add__
    __rmul__ = __mul__

    def __neg__(self) -> Scalar:
        return Scalar(-self.value, self.q)

    def is_zero(self) -> bool:
        return self.value == 0

    def inverse(self) -> Scalar:
        if self.value == 0:
            raise ZeroDivisionError("zero has no inverse mod q")
        return Scalar(pow(self.value, -1, self.q), self.q)


class _Element:
    __slots__ = ("group", "raw")
    tag: GroupTag

    def __init__(self, group: PairingGroup, raw: Any) -> None:
        object.__setattr__(self, "group", group)
        object.__setattr__(self, "raw", raw)

    def __setattr__(self, name: str, value: Any) -> None:
        raise AttributeError("group elements are immutable")

    def _check(self, other: _Element) -> None:
        if type(other) is not type(self):
            raise BackendMismatchError(f"expected {type(self).__name__}, got {type(other).__name__}")
        if other.group is not self.group and other.group.fingerprint != self.group.fingerprint:
            raise BackendMismatchError("elements come from different groups")

    def to_bytes(self) -> bytes:
        return self.group.encode(self)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, _Element) or type(other) is not type(self):
            return NotImplemented
        if other.group.fingerprint != self.group.fingerprint:
            return False
        return self.group._raw_eq(self.tag, self.raw, other.raw)

    def __hash__(self) -> int:
        return hash(self.to_bytes())

    def __repr__(self) -> str:
        return f"{type(self).__name__}({self.group.describe(self)})"


class G1Element(_Element):
    """Element of the source group (written multiplicatively)."""

    tag = GroupTag.G1

    def __pow__(self, s: Scalar | int) -> G1Element:
        return self.group.g1_pow(self, s)

    def __mul__(self, other: G1Element) -> G1Element:
        self._check(other)
        return self.group.g1_mul(self, other)


class G2Element(_Element):
    """Element of the target group (written multiplicatively)."""

    tag = GroupTag.G2

    def __pow__(self, s: Scalar | int) -> G2Element:
        return self.group.g2_pow(self, s)

    def __mul__(self, other: G2Element) -> G2Element:
        self._check(other)
        return self.group.g2_mul(self, other)

    def __truediv__(self, other: G2Element) -> G2Element:
        self._check(other)
        return self.group.g2_mul(self, self.group.g2_inv(other))


@dataclass(frozen=True)
class SystemParams:
    group_order_q: int
    generator_g: G1Element
    z: G2Element
    security_parameter_n: int
    backend_id: BackendId


# backend byte, group byte, 2-byte big-endian payload length
_HEADER = struct.Struct(">BBH")


class PairingGroup:
    """Abstract symmetric pairing group ``e: G1 x G1 -> G2``.

    Subclasses implement the ``_raw_*`` hooks on backend-native values.
    """

    backend_id: BackendId
    order: int

    def __init__(self) -> None:
        self.g = G1Element(self, self._raw_generator())
        self.z = self.pairing(self.g, self.g)
        self.g1_identity = G1Element(self, self._raw_g1_identity())
        self.g2_identity = G2Element(self, self._raw_g2_identity())

    @property
    def fingerprint(self) -> tuple[int, int]:
        return (int(self.backend_id), self.order)

    @property
    def params(self) -> SystemParams:
        return SystemParams(
            group_order_q=self.order,
            generator_g=self.g,
            z=self.z,
            security_parameter_n=self.order.bit_length(),
            backend_id=self.backend_id,
        )

    # -- scalars ----------------------------------------------------------
    def scalar(self, value: int) -> Scalar:
        return Scalar(value, self.order)

    def random_scalar(self, rng: RandomSource) -> Scalar:
        return Scalar(rng.randrange(self.order), self.order)

    def random_nonzero_scalar(self, rng: RandomSource) -> Scalar:
        return Scalar(rng.randrange(1, self.order), self.order)

    def _exponent(self, s: Scalar | int) -> int:
        if isinstance(s, Scalar):
            if s.q != self.order:
                raise BackendMismatchError("scalar modulus does not match group order")
            return s.value
        return s % self.order

    def hash_to_scalar(self, data: bytes) -> Scalar:
        import hashlib

        digest = hashlib.sha512(b"drmmesh/h2s\x00" + data).digest()
        return Scalar(int.from_bytes(digest, "big"), self.order)

    # -- group operations -------------------------------------------------
    def _own(self, *elements: _Element) -> None:
        for e in elements:
            if e.group is not self and e.group.fingerprint != self.fingerprint:
                raise BackendMismatchError("element belongs to a different group")

    def g1_pow(self, base: G1Element, s: Scalar | int) -> G1Element:
        self._own(base)
        return G1Element(self, self._raw_g1_pow(base.raw, self._exponent(s)))

    def g1_mul(self, a: G1Element, b: G1Element) -> G1Element:
        self._own(a, b)
        return G1Element(self, self._raw_g1_mul(a.raw, b.raw))

    def g2_pow(self, base: G2Element, s: Scalar | int) -> G2Element:
        self._own(base)
        return G2Element(self, self._raw_g2_pow(base.raw, self._exponent(s)))

    def g2_mul(self, a: G2Element, b: G2Element) -> G2Element:
        self._own(a, b)
        return G2Element(self, self._raw_g2_mul(a.raw, b.raw))

    def g2_inv(self, a: G2Element) -> G2Element:
        self._own(a)
        return G2Element(self, self._raw_g2_inv(a.raw))

    def pairing(self, a: G1Element, b: G1Element) -> G2Element:
        if not isinstance(a, G1Element) or not isinstance(b, G1Element):
            raise BackendMismatchError("pairing takes two G1 elements")
        self._own(a, b)
        return G2Element(self, self._raw_pairing(a.raw, b.raw))

    def random_g2(self, rng: RandomSource) -> G2Element:
        return self.g2_pow(self.z, self.random_nonzero_scalar(rng))

    # -- signatures -------------------------------------------------------
    def sign(self, sk: Scalar, message: bytes) -> bytes:
        raise NotImplementedError

    def verify(self, pk: G1Element, message: bytes, signature: bytes) -> bool:
        raise NotImplementedError

    # -- encoding ---------------------------------------------------------
    def encode(self, element: _Element) -> bytes:
        self._own(element)
        payload = self._raw_encode(element.tag, element.raw)
        return _HEADER.pack(int(self.backend_id), int(element.tag), len(payload)) + payload

    def decode(self, data: bytes) -> G1Element | G2Element:
        element, rest = self.decode_prefix(data)
        if rest:
            raise EncodingError(f"{len(rest)} trailing bytes after element")
        return element

    def decode_prefix(self, data: bytes) -> tuple[G1Element | G2Element, bytes]:
        """Decode one element from the front of ``data``; return it and the remainder."""
        if len(data) < _HEADER.size:
            raise EncodingError("truncated element header")
        backend, tag, length = _HEADER.unpack_from(data)
        if backend != self.backend_id:
            raise EncodingError(f"element encoded for backend {backend}, group is {int(self.backend_id)}")
        end = _HEADER.size + length
        if len(data) < end:
            raise EncodingError("truncated element payload")
        payload = data[_HEADER.size:end]
        try:
            tag = GroupTag(tag)
        except ValueError:
            raise EncodingError(f"unknown group tag {tag}") from None
        raw = self._raw_decode(tag, payload)
        cls = G1Element if tag is GroupTag.G1 else G2Element
        return cls(self, raw), data[end:]

    def decode_g1(self, data: bytes) -> G1Element:
        element = self.decode(data)
        if not isinstance(element, G1Element):
            raise EncodingError("expected a G1 element")
        return element

    def decode_g2(self, data: bytes) -> G2Element:
        element = self.decode(data)
        if not isinstance(element, G2Element):
            raise EncodingError("expected a G2 element")
        return element

    def encode_scalar(self, s: Scalar) -> bytes:
        """Fixed-width big-endian scalar bytes; used only by secret-scanning tests."""
        return s.value.to_bytes((self.order.bit_length() + 7) // 8, "big")

    def describe(self, element: _Element) -> str:
        return f"{self.backend_id.name.lower()}, {len(self._raw_encode(element.tag, element.raw))}B"

    # -- backend hooks ----------------------------------------------------
    def _raw_generator(self) -> Any:
        raise NotImplementedError

    def _raw_g1_identity(self) -> Any:
        raise NotImplementedError

    def _raw_g2_identity(self) -> Any:
        raise NotImplementedError

    def _raw_g1_pow(self, raw: Any, e: int) -> Any:
        raise NotImplementedError

    def _raw_g1_mul(self, a: Any, b: Any) -> Any:
        raise NotImplementedError

    def _raw_g2_pow(self, raw: Any, e: int) -> Any:
        raise NotImplementedError

    def _raw_g2_mul(self, a: Any, b: Any) -> Any:
        raise NotImplementedError

    def _raw_g2_inv(self, a: Any) -> Any:
        raise NotImplementedError

    def _raw_pairing(self, a: Any, b: Any) -> Any:
        raise NotImplementedError

    def _raw_eq(self, tag: GroupTag, a: Any, b: Any) -> bool:
        raise NotImplementedError

    def _raw_encode(self, tag: GroupTag, raw: Any) -> bytes:
        raise NotImplementedError

    def _raw_decode(self, tag: GroupTag, payload: bytes) -> Any:
        raise NotImplementedError
