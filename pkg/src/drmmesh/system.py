"""Scenario configuration and a fully wired system of actors.

A :class:`World` holds one root CA, one smartcard provider, one content
provider, one bank, ``M`` content distributors and ``U`` users (card + client),
all connected through a simulated or socket transport and driven by a shared
simulated clock. Everything random comes from one seeded generator, so a
given config and seed always produce the same transcripts.
"""

from __future__ import annotations

import copy
import json
import random
from collections.abc import Iterable, Mapping
from dataclasses import dataclass
from importlib import resources
from typing import Any

import jsonschema

from .client import Client, ClientError, ExecuteOutcome, HashSink, KeyLocker, PurchaseOutcome, Sink, endpoint
from .distributor import ContentDistributor
from .hybrid import Certificate, Role, SigningKey, issue_certificate, validate_root
from .licenses import LicenseModel, parse_discounts, quote_price
from .pairing import PairingGroup, make_group
from .provider import Bank, ContentProvider, PaymentToken
from .smartcard import CardChannel, HolderAttributes, Smartcard
from .wire import ENDPOINTS, Fault, MessageType, SimTransport, SocketTransport, Transcript, serve

CONFIG_SCHEMA: dict[str, Any] = {
    "type": "object",
    "required": ["catalog", "users", "distributors"],
    "properties": {
        "backend": {"enum": ["transparent", "production"]},
        "seed": {"type": "integer"},
        "start_ts": {"type": "integer", "minimum": 0},
        "step_ms": {"type": "integer", "minimum": 1},
        "distributors": {"type": "integer", "minimum": 1},
        "rental_period_ms": {"type": "integer", "minimum": 1},
        "discounts": {"type": "object", "additionalProperties": {"type": "number", "minimum": 0, "exclusiveMaximum": 1}},
        "catalog": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "required": ["content_id", "unit_price"],
                "properties": {
                    "content_id": {"type": "string", "minLength": 1},
                    "title": {"type": "string"},
                    "rating": {"type": "string"},
                    "unit_price": {"type": "integer", "minimum": 0},
                    "size": {"type": "integer", "minimum": 1},
                    "text": {"type": "string", "minLength": 1},
                },
            },
        },
        "users": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "required": ["name", "pin", "date_of_birth"],
                "properties": {
                    "name": {"type": "string"},
                    "pin": {"type": "string", "pattern": "^[0-9]{4,8}$"},
                    "date_of_birth": {"type": "string", "format": "date"},
                    "home_country": {"type": "string"},
                },
            },
        },
        "licenses": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["model", "quantity"],
                "properties": {
                    "model": {"enum": [m.value for m in LicenseModel]},
                    "quantity": {"type": "integer", "minimum": 1},
                },
            },
        },
        "faults": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["action", "message_type"],
                "properties": {
                    "action": {"enum": ["drop", "duplicate", "reorder", "tamper"]},
                    "message_type": {"enum": [t.value for t in MessageType]},
                    "occurrence": {"type": "integer", "minimum": 1},
                    "field": {"type": "string"},
                },
            },
        },
    },
}


class ConfigError(ValueError):
    pass


def default_config() -> dict[str, Any]:
    text = resources.files("drmmesh").joinpath("scenarios/default.json").read_text("utf-8")
    return json.loads(text)


def load_config(data: Mapping[str, Any] | None = None) -> dict[str, Any]:
    cfg = copy.deepcopy(dict(data)) if data is not None else default_config()
    try:
        jsonschema.validate(cfg, CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        raise ConfigError(f"invalid scenario config: {exc.message}") from None
    ids = [c["content_id"] for c in cfg["catalog"]]
    if len(set(ids)) != len(ids):
        raise ConfigError("duplicate content ids in catalog")
    return cfg


class SimClock:
    """Millisecond clock that only moves when told to."""

    def __init__(self, start_ms: int) -> None:
        self._now = start_ms

    def __call__(self) -> int:
        return self._now

    def now(self) -> int:
        return self._now

    def set(self, ms: int) -> None:
        self._now = ms

    def advance(self, ms: int) -> int:
        self._now += ms
        return self._now


@dataclass
class User:
    name: str
    pin: str
    card: Smartcard
    channel: CardChannel
    client: Client

    @property
    def locker(self) -> KeyLocker:
        return self.client.locker


def _content_bytes(item: Mapping[str, Any], rng: random.Random) -> bytes:
    if "text" in item:
        return item["text"].encode("utf-8")
    return rng.randbytes(int(item.get("size", 4096)))


class World:
    def __init__(
        self,
        config: Mapping[str, Any] | None = None,
        *,
        backend: str | None = None,
        seed: int | None = None,
        mode: str = "sim",
        faults: Iterable[Fault] = (),
        group: PairingGroup | None = None,
        card_factory: type[Smartcard] = Smartcard,
    ) -> None:
        cfg = load_config(config)
        self.config = cfg
        self.backend = backend or cfg.get("backend", "transparent")
        self.seed = cfg.get("seed", 0) if seed is None else seed
        self.mode = mode
        self.group = group if group is not None else make_group(self.backend)
        g = self.group
        self.rng = random.Random(self.seed)
        rng = self.rng
        start = int(cfg.get("start_ts", 1_700_000_000_000))
        self.step_ms = int(cfg.get("step_ms", 1000))
        # certificates and cards are made at ``start``; the first protocol run comes one step later
        self.clock = SimClock(start + self.step_ms)

        def keyed(role: Role, name: str, issuer: tuple[SigningKey, Certificate] | None, **kw: Any):
            key = SigningKey.generate(g, rng)
            signer, issuer_id = (key, None) if issuer is None else (issuer[0], issuer[1].cert_id)
            cert = issue_certificate(
                signer, issuer_id=issuer_id, role=role, subject=name, ts=start,
                verify_key=key.verify_key, cert_id=f"{name}-{rng.randbytes(8).hex()}", **kw,
            )
            return key, cert

        self.root_key, self.root = keyed(Role.ROOT, "root-ca", None)
        validate_root(self.root)
        root = (self.root_key, self.root)
        self.sp_key, self.sp_cert = keyed(Role.SMARTCARD_PROVIDER, "card-provider", root)
        # one credential shared by every card
        self.card_key, self.card_cert = keyed(Role.SMARTCARD, "smartcard", (self.sp_key, self.sp_cert))
        self.bank_key, self.bank_cert = keyed(Role.BANK, "bank", root)
        self.cp_key, self.cp_cert = keyed(Role.CONTENT_PROVIDER, "cp", root)
        self.bank = Bank(self.bank_key, self.bank_cert, random.Random(rng.getrandbits(64)))

        self.discounts = parse_discounts(cfg.get("discounts"))
        self.cp = ContentProvider(
            g,
            signing_key=self.cp_key,
            cert=self.cp_cert,
            root=self.root,
            bank_cert=self.bank_cert,
            clock=self.clock,
            rng=random.Random(rng.getrandbits(64)),
            discounts=self.discounts,
            rental_period_ms=int(cfg.get("rental_period_ms", 24 * 3600 * 1000)),
        )
        self.contents: dict[str, bytes] = {}
        for item in cfg["catalog"]:
            data = _content_bytes(item, rng)
            self.contents[item["content_id"]] = data
            self.cp.ingest_content(
                item["content_id"], data, title=item.get("title", ""),
                rating=item.get("rating", "unrated"), unit_price=item["unit_price"],
            )

        self.distributors: dict[str, ContentDistributor] = {}
        for i in range(int(cfg["distributors"])):
            name = f"cd-{i + 1}"
            key, cert = keyed(Role.CONTENT_DISTRIBUTOR, name, root)
            self.distributors[name] = ContentDistributor(
                g, name=name, signing_key=key, cert=cert, clock=self.clock,
                rng=random.Random(rng.getrandbits(64)), fetch_content=self.cp.serve_encrypted_content,
            )

        self._servers: list[Any] = []
        faults = list(faults) or [Fault.from_dict(f) for f in cfg.get("faults", [])]
        self.transport = self._build_transport(faults)

        self.users: dict[str, User] = {}
        for u in cfg["users"]:
            holder = HolderAttributes.issue(self.sp_key, u["date_of_birth"], u.get("home_country", "DE"))
            card = card_factory(
                g,
                signing_key=self.card_key,
                cert_chain=(self.card_cert, self.sp_cert),
                root=self.root,
                pin=u["pin"],
                production_ts=start,
                rng=random.Random(rng.getrandbits(64)),
                holder=holder,
            )
            channel = CardChannel(card)
            client = Client(g, channel, KeyLocker(g), self.transport, random.Random(rng.getrandbits(64)))
            self.users[u["name"]] = User(u["name"], u["pin"], card, channel, client)

    def _build_transport(self, faults: list[Fault]) -> SimTransport | SocketTransport:
        handlers = {"cp": self.cp.handle, **{n: d.handle for n, d in self.distributors.items()}}
        if self.mode == "sim":
            transport = SimTransport(self.clock, faults)
            for peer, h in handlers.items():
                for path in ENDPOINTS:
                    transport.register(endpoint(peer, path), peer, h)
            return transport
        if self.mode != "service":
            raise ConfigError(f"unknown mode {self.mode!r}")
        if faults:
            raise ConfigError("fault injection is only available in sim mode")
        sock = SocketTransport(self.clock)
        for peer, h in handlers.items():
            server, _ = serve(h)
            self._servers.append(server)
            for path in ENDPOINTS:
                sock.register(endpoint(peer, path), peer, server.server_address[:2])
        return sock

    def close(self) -> None:
        for server in self._servers:
            server.shutdown()
            server.server_close()
        self._servers.clear()

    def __enter__(self) -> World:
        return self

    def __exit__(self, *exc: Any) -> None:
        self.close()

    # -- convenience drivers ------------------------------------------------------

    def user(self, name: str | None = None) -> User:
        return self.users[name] if name is not None else next(iter(self.users.values()))

    def pay(self, content_id: str, model: LicenseModel, quantity: int, *, short_by: int = 0) -> PaymentToken:
        quote = quote_price(self.cp.prices(), content_id, model, quantity, self.discounts)
        return self.bank.issue(quote.total - short_by)

    def purchase(
        self,
        user: User,
        content_id: str,
        model: LicenseModel = LicenseModel.EXECUTE_AT_MOST_N,
        quantity: int = 1,
        *,
        token: PaymentToken | None = None,
        transcript: Transcript | None = None,
    ) -> PurchaseOutcome:
        token = token if token is not None else self.pay(content_id, model, quantity)
        try:
            return user.client.purchase(content_id, model, quantity, token, user.pin, transcript=transcript)
        finally:
            self.clock.advance(self.step_ms)

    def execute(
        self,
        user: User,
        distributor: str,
        content_id: str,
        *,
        sink: Sink | None = None,
        transcript: Transcript | None = None,
        **kw: Any,
    ) -> ExecuteOutcome:
        try:
            return user.client.execute(
                content_id, user.pin, sink if sink is not None else HashSink(),
                distributor=distributor, transcript=transcript, **kw,
            )
        finally:
            self.clock.advance(self.step_ms)

    def try_execute(self, user: User, distributor: str, content_id: str, **kw: Any) -> ClientError | None:
        try:
            self.execute(user, distributor, content_id, **kw)
        except ClientError as exc:
            return exc
        return None

    def static_material(self) -> list[Any]:
        """Everything any observer legitimately sees in every run.

        Shared certificates, the public catalog, content bytes, protocol
        vocabulary. Linkage scans treat matches against this as expected.
        """
        certs = [self.root, self.sp_cert, self.card_cert, self.bank_cert, self.cp_cert]
        certs += [d.cert for d in self.distributors.values()]
        vocab = [m.value for m in LicenseModel] + [t.value for t in MessageType] + [r.value for r in Role]
        return [
            *(c.to_dict() for c in certs),
            *(d.cert.verify_key.to_bytes() for d in self.distributors.values()),
            self.cp.catalog(),
            *self.contents.values(),
            vocab,
        ]
