"""Bilinear groups: a transparent test backend and a BLS12-381 backend."""

from __future__ import annotations

from .base import (
    BackendId,
    BackendMismatchError,
    EncodingError,
    G1Element,
    G2Element,
    PairingError,
    PairingGroup,
    RandomSource,
    Scalar,
    SystemParams,
)
from .transparent import LARGE_PRIME, TransparentGroup

__all__ = [
    "BackendId",
    "BackendMismatchError",
    "EncodingError",
    "G1Element",
    "G2Element",
    "LARGE_PRIME",
    "PairingError",
    "PairingGroup",
    "RandomSource",
    "Scalar",
    "SystemParams",
    "TransparentGroup",
    "g1_pow",
    "g2_pow",
    "make_group",
    "pairing",
    "random_scalar",
]


def make_group(backend: str = "transparent", q: int | None = None) -> PairingGroup:
    """Build a group by name. ``q`` only applies to the transparent backend."""
    if backend == "transparent":
        return TransparentGroup(q if q is not None else LARGE_PRIME)
    if backend == "production":
        from .production import ProductionGroup

        return ProductionGroup()
    raise ValueError(f"unknown backend {backend!r}")


def random_scalar(group: PairingGroup, rng: RandomSource) -> Scalar:
    return group.random_scalar(rng)


def g1_pow(base: G1Element, s: Scalar | int) -> G1Element:
    return base.group.g1_pow(base, s)


def g2_pow(base: G2Element, s: Scalar | int) -> G2Element:
    return base.group.g2_pow(base, s)


def pairing(a: G1Element, b: G1Element) -> G2Element:
    if a.group.fingerprint != b.group.fingerprint:
        raise BackendMismatchError("pairing operands come from different backends")
    return a.group.pairing(a, b)
