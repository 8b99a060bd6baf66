"""License data model and the pure evaluation/update rules for each model."""

from __future__ import annotations

import enum
from collections.abc import Mapping
from dataclasses import dataclass, replace
from decimal import ROUND_HALF_UP, Decimal
from fractions import Fraction
from typing import Any

from .hybrid import Certificate
from .pairing import PairingGroup


class LicenseError(Exception):
    pass


class LicenseDenied(LicenseError):
    def __init__(self, reason: str) -> None:
        super().__init__(reason)
        self.reason = reason


class UnknownContent(LicenseError):
    pass


class LicenseModel(str, enum.Enum):
    EXECUTE_AT_MOST_N = "execute_at_most_n"
    PAY_PER_EXECUTE = "pay_per_execute"
    EXECUTE_UNTIL = "execute_until"
    FLATRATE = "flatrate"

    @property
    def counted(self) -> bool:
        return self in (LicenseModel.EXECUTE_AT_MOST_N, LicenseModel.PAY_PER_EXECUTE)


@dataclass(frozen=True)
class LicenseTerms:
    model: LicenseModel
    n: int | None = None
    expiry_ts: int | None = None
    used: int = 0

    def __post_init__(self) -> None:
        if self.model is LicenseModel.PAY_PER_EXECUTE and self.n != 1:
            raise ValueError("pay-per-execute licenses carry exactly one execution")
        if self.model.counted:
            if self.n is None or self.n < 1:
                raise ValueError("counted licenses need n >= 1")
            if not 0 <= self.used <= self.n:
                raise ValueError("used must lie in [0, n]")
        if self.model is LicenseModel.EXECUTE_UNTIL and self.expiry_ts is None:
            raise ValueError("execute-until licenses need an expiry")

    @classmethod
    def pay_per_execute(cls) -> LicenseTerms:
        return cls(LicenseModel.PAY_PER_EXECUTE, n=1)

    def to_dict(self) -> dict[str, Any]:
        return {"model": self.model.value, "n": self.n, "expiry_ts": self.expiry_ts, "used": self.used}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> LicenseTerms:
        return cls(
            LicenseModel(d["model"]),
            n=None if d.get("n") is None else int(d["n"]),
            expiry_ts=None if d.get("expiry_ts") is None else int(d["expiry_ts"]),
            used=int(d.get("used", 0)),
        )


@dataclass(frozen=True)
class Decision:
    allowed: bool
    reason: str | None = None

    def __bool__(self) -> bool:
        return self.allowed


ALLOW = Decision(True)


def check_terms(terms: LicenseTerms, now_ts: int) -> Decision:
    """Decide whether one more execution is allowed at ``now_ts``. Pure."""
    if terms.model.counted:
        if terms.used >= terms.n:
            return Decision(False, "exhausted")
        return ALLOW
    if terms.model is LicenseModel.EXECUTE_UNTIL:
        # allowed only strictly before the end date
        if now_ts >= terms.expiry_ts:
            return Decision(False, "expired")
        return ALLOW
    return ALLOW


def consume(terms: LicenseTerms, now_ts: int) -> LicenseTerms:
    decision = check_terms(terms, now_ts)
    if not decision:
        raise LicenseDenied(decision.reason)
    if terms.model.counted:
        return replace(terms, used=terms.used + 1)
    return terms


@dataclass(frozen=True)
class License:
    license_id: str
    ts: int
    content_id: str
    terms: LicenseTerms
    issuer: Certificate

    def to_dict(self) -> dict[str, Any]:
        return {
            "id": self.license_id,
            "ts": self.ts,
            "content_id": self.content_id,
            "terms": self.terms.to_dict(),
            "issuer": self.issuer.to_dict(),
        }

    @classmethod
    def from_dict(cls, group: PairingGroup, d: Mapping[str, Any]) -> License:
        try:
            return cls(
                license_id=str(d["id"]),
                ts=int(d["ts"]),
                content_id=str(d["content_id"]),
                terms=LicenseTerms.from_dict(d["terms"]),
                issuer=Certificate.from_dict(group, d["issuer"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise LicenseError(f"malformed license: {exc}") from None


# -- pricing ---------------------------------------------------------------

@dataclass(frozen=True)
class PriceQuote:
    unit_price: int
    quantity: int
    discount_fraction: Fraction = Fraction(0)

    def __post_init__(self) -> None:
        if not 0 <= self.discount_fraction < 1:
            raise ValueError("discount must lie in [0, 1)")

    @property
    def total(self) -> int:
        exact = self.unit_price * self.quantity * (1 - self.discount_fraction)
        return int((Decimal(exact.numerator) / Decimal(exact.denominator)).quantize(Decimal(1), ROUND_HALF_UP))


def parse_discounts(table: Mapping[Any, Any] | None) -> dict[int, Fraction]:
    """Normalize a ``{min_quantity: fraction}`` table from JSON-ish input."""
    return {int(k): Fraction(str(v)) for k, v in (table or {}).items()}


def quote_price(
    catalog: Mapping[str, int],
    content_id: str,
    model: LicenseModel,
    quantity: int,
    discounts: Mapping[int, Fraction] | None = None,
) -> PriceQuote:
    """Price ``quantity`` units of ``content_id``.

    ``catalog`` maps content ids to unit prices in minor currency units. The
    discount is the entry with the largest threshold not above ``quantity``.
    """
    if quantity < 1:
        raise ValueError("quantity must be at least 1")
    if model is LicenseModel.PAY_PER_EXECUTE and quantity != 1:
        raise ValueError("pay-per-execute is sold one execution at a time")
    if content_id not in catalog:
        raise UnknownContent(content_id)
    eligible = [t for t in (discounts or {}) if t <= quantity]
    discount = discounts[max(eligible)] if eligible else Fraction(0)
    return PriceQuote(catalog[content_id], quantity, discount)
