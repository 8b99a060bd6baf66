"""Adversarial scenarios run against a :class:`~drmmesh.system.World`.

Each attack plays a dishonest client (or card holder) and reports whether the
system rejected it. An attack that goes through is a security failure.
"""

from __future__ import annotations

from collections.abc import Callable
from dataclasses import dataclass

from .client import ClientError, SecurityViolation, malicious_reuse_rk
from .hybrid import Role, SigningKey, b64d, issue_certificate
from .licenses import LicenseModel
from .pre import keygen
from .smartcard import CardError
from .system import User, World
from .wire import MessageType, Transcript


@dataclass(frozen=True)
class AttackResult:
    name: str
    rejected: bool
    stage: str
    reason: str

    def to_dict(self) -> dict[str, object]:
        return {"attack": self.name, "rejected": self.rejected, "stage": self.stage, "reason": self.reason}


def _buy(world: World, user: User, content_id: str, n: int = 10) -> None:
    world.purchase(user, content_id, LicenseModel.EXECUTE_AT_MOST_N, n)


def _first_content(world: World) -> str:
    for item in world.config["catalog"]:
        if item.get("rating", "unrated") == "unrated":
            return item["content_id"]
    return world.config["catalog"][0]["content_id"]


def _cd(world: World, i: int = 0) -> str:
    return list(world.distributors)[i % len(world.distributors)]


def _outcome(name: str, fn: Callable[[], None]) -> AttackResult:
    try:
        fn()
    except ClientError as exc:
        return AttackResult(name, True, exc.stage, exc.reason)
    except CardError as exc:
        return AttackResult(name, True, "card", exc.reason)
    except SecurityViolation as exc:
        return AttackResult(name, False, "", str(exc))
    return AttackResult(name, False, "", "accepted")


def stale_cd_cert(world: World, user: User) -> AttackResult:
    """Hold on to an old CD certificate and present it after a newer one was accepted."""
    cid = _first_content(world)
    _buy(world, user, cid)
    cd = _cd(world)
    old_chain = user.client.request_cert(cd)
    world.clock.advance(world.step_ms)
    world.execute(user, cd, cid)
    return _outcome("stale-cd-cert", lambda: world.execute(user, cd, cid, cert_chain=old_chain))


def reused_cert_id(world: World, user: User) -> AttackResult:
    """Present the same CD certificate a second time."""
    cid = _first_content(world)
    _buy(world, user, cid)
    cd = _cd(world)
    chain = user.client.request_cert(cd)
    world.execute(user, cd, cid, cert_chain=chain)
    return _outcome("reused-cert-id", lambda: world.execute(user, cd, cid, cert_chain=chain))


def rk_reuse(world: World, user: User) -> AttackResult:
    """Keep the re-encryption key leaked by one execution and try to play again without the card."""
    cid = _first_content(world)
    world.purchase(user, cid, LicenseModel.PAY_PER_EXECUTE, 1)
    cd = _cd(world)
    outcome = world.execute(user, cd, cid)
    entry = user.locker.get(outcome.authorization.fingerprint)

    def attempt() -> None:
        raise malicious_reuse_rk(user.client, outcome.authorization.rk, entry, outcome.cert_id, cid, cd)

    return _outcome("rk-reuse", attempt)


def license_replay(world: World, user: User) -> AttackResult:
    """Feed a license the card already stored back into it."""
    cid = _first_content(world)
    transcript = Transcript("license-replay")
    world.purchase(user, cid, LicenseModel.PAY_PER_EXECUTE, 1, transcript=transcript)
    reply = next(e.envelope for e in transcript.entries if e.envelope.message_type is MessageType.PURCHASE_COMPLETE_RESPONSE)
    fingerprint = user.locker.for_content(cid)[-1].fingerprint

    def attempt() -> None:
        session = user.channel.verify_pin(user.pin)
        user.channel.store_license(
            session, fingerprint, b64d(reply.body["license_kem"]), b64d(reply.body["license_dem"]),
            b64d(reply.body["license_signature"]),
        )

    return _outcome("license-replay", attempt)


def overspend_pt(world: World, user: User) -> AttackResult:
    """Pay twice with the same payment token."""
    cid = _first_content(world)
    token = world.pay(cid, LicenseModel.PAY_PER_EXECUTE, 1)
    world.purchase(user, cid, LicenseModel.PAY_PER_EXECUTE, 1, token=token)
    return _outcome("overspend-pt", lambda: world.purchase(user, cid, LicenseModel.PAY_PER_EXECUTE, 1, token=token))


def fake_cd_cert(world: World, user: User) -> AttackResult:
    """Present a self-made "distributor" certificate to harvest a re-encryption key."""
    cid = _first_content(world)
    _buy(world, user, cid)
    g = world.group
    key = SigningKey.generate(g, world.rng)
    mine = keygen(g, world.rng)
    ca = issue_certificate(key, issuer_id=None, role=Role.CONTENT_DISTRIBUTOR, subject="evil-cd",
                           ts=world.clock(), verify_key=key.verify_key, cert_id="evil-ca")
    fake = issue_certificate(key, issuer_id=ca.cert_id, role=Role.CONTENT_DISTRIBUTOR_EPHEMERAL, subject="evil-cd",
                             ts=world.clock(), verify_key=key.verify_key, cert_id="evil-1", pre_public=mine.public)
    return _outcome("fake-cd-cert", lambda: world.execute(user, _cd(world), cid, cert_chain=[fake, ca]))


ATTACKS: dict[str, Callable[[World, User], AttackResult]] = {
    "stale-cd-cert": stale_cd_cert,
    "reused-cert-id": reused_cert_id,
    "rk-reuse": rk_reuse,
    "license-replay": license_replay,
    "overspend-pt": overspend_pt,
    "fake-cd-cert": fake_cd_cert,
}


def run_attacks(world: World, names: list[str] | None = None, user: User | None = None) -> list[AttackResult]:
    user = user or world.user()
    return [ATTACKS[name](world, user) for name in (names or list(ATTACKS))]
