import itertools
import random
from datetime import date

import pytest

from drmmesh import pre
from drmmesh.hybrid import Role, SignedBlob, SigningKey, canonical_json, hybrid_encrypt, issue_certificate, sign, verify
from drmmesh.licenses import License, LicenseModel, LicenseTerms
from drmmesh.smartcard import (
    CardChannel,
    CardError,
    HolderAttributes,
    PIN_RETRY_LIMIT,
    Smartcard,
    birthday_ts,
    purchase_payload,
)
from drmmesh.system import World
from drmmesh.wire import Envelope, MessageType, Transcript, frame, observed_blobs, unframe


@pytest.fixture
def world():
    return World(seed=11)


def new_card(world, *, dob="1990-01-01", pin="1234", **kw):
    holder = HolderAttributes.issue(world.sp_key, dob, "DE")
    return Smartcard(
        world.group, signing_key=world.card_key, cert_chain=(world.card_cert, world.sp_cert), root=world.root,
        pin=pin, production_ts=1000, rng=random.Random(7), holder=holder, **kw,
    )


class Mint:
    """Crafts licenses and CD certificates with chosen timestamps and ids."""

    def __init__(self, world, rng=None):
        self.w = world
        self.rng = rng or random.Random(3)
        self.cd = world.distributors["cd-1"]
        self.n = 0

    def license(self, pk, ts, *, content_id="film-001", terms=None, lid=None, key=None, issuer=None):
        self.n += 1
        terms = terms or LicenseTerms(LicenseModel.EXECUTE_AT_MOST_N, n=3)
        lic = License(lid or f"lic-{self.n}", ts, content_id, terms, issuer or self.w.cp_cert)
        body = canonical_json(lic.to_dict())
        sig = sign(body, key or self.w.cp_key).signature
        kem, dem = hybrid_encrypt(body, pk.z_a1, self.rng)
        return kem, dem, sig

    def cd_chain(self, ts, cert_id=None):
        self.n += 1
        kp = pre.keygen(self.w.group, self.rng)
        cert = issue_certificate(
            self.cd._key, issuer_id=self.cd.cert.cert_id, role=Role.CONTENT_DISTRIBUTOR_EPHEMERAL, subject="cd-1",
            ts=ts, verify_key=self.cd._key.verify_key, cert_id=cert_id or f"eph-{self.n}", pre_public=kp.public,
        )
        return [cert, self.cd.cert], kp


def buy(card, mint, session, ts, **kw):
    resp = card.begin_purchase(session, b"r" * 32)
    kem, dem, sig = mint.license(resp.pk_tmp, ts, **kw)
    return resp, card.store_license(session, resp.fingerprint, kem, dem, sig)


# -- PIN state machine ---------------------------------------------------------------

def test_correct_pin_gives_session(world):
    card = new_card(world)
    assert card.verify_pin("1234")
    assert card.list_content(card.verify_pin("1234")) == []


def test_operation_without_session(world):
    card = new_card(world)
    with pytest.raises(CardError) as e:
        card.list_content("nope")
    assert e.value.reason == "no_session"


def test_lock_after_three_failures(world):
    card = new_card(world)
    for i in range(PIN_RETRY_LIMIT - 1):
        with pytest.raises(CardError) as e:
            card.verify_pin("0000")
        assert e.value.reason == "wrong_pin"
    with pytest.raises(CardError) as e:
        card.verify_pin("0000")
    assert e.value.reason == "locked"
    with pytest.raises(CardError) as e:
        card.verify_pin("1234")
    assert e.value.reason == "locked"
    assert card.locked


def lockout_model(trace, limit=3):
    failures, locked, results = 0, False, []
    for ok in trace:
        if locked:
            results.append("locked")
        elif ok:
            failures = 0
            results.append("session")
        else:
            failures += 1
            locked = failures >= limit
            results.append("locked" if locked else "wrong_pin")
    return results, locked


def test_lockout_exhaustive_enumeration(world):
    # every correct/wrong sequence up to length 7 against an independent model
    for length in range(8):
        for trace in itertools.product([True, False], repeat=length):
            card = new_card(world)
            got = []
            for ok in trace:
                try:
                    card.verify_pin("1234" if ok else "9999")
                    got.append("session")
                except CardError as exc:
                    got.append(exc.reason)
            expected, locked = lockout_model(trace)
            assert got == expected, trace
            assert card.locked == locked


def test_locked_card_refuses_everything(world):
    card = new_card(world)
    session = card.verify_pin("1234")
    for _ in range(3):
        with pytest.raises(CardError):
            card.verify_pin("0")
    for call in (lambda: card.list_content(session), lambda: card.begin_purchase(session, b"r")):
        with pytest.raises(CardError) as e:
            call()
        assert e.value.reason == "locked"


def test_wrong_pin_drops_open_session(world):
    card = new_card(world)
    session = card.verify_pin("1234")
    with pytest.raises(CardError):
        card.verify_pin("0")
    with pytest.raises(CardError):
        card.list_content(session)


# -- purchase --------------------------------------------------------------------

def test_begin_purchase_fresh_keys_and_signature(world):
    card = new_card(world)
    s = card.verify_pin("1234")
    a, b = card.begin_purchase(s, b"r1"), card.begin_purchase(s, b"r1")
    assert a.pk_tmp != b.pk_tmp
    assert verify(SignedBlob(purchase_payload(b"r1", a.pk_tmp, "unrated"), a.signature), world.card_cert)
    assert purchase_payload(b"r1", a.pk_tmp, "unrated") != purchase_payload(b"r2", a.pk_tmp, "unrated")
    assert not verify(SignedBlob(purchase_payload(b"r2", a.pk_tmp, "unrated"), a.signature), world.card_cert)


def test_pending_keys_bounded(world):
    card = new_card(world, max_pending=2)
    mint = Mint(world)
    s = card.verify_pin("1234")
    first = card.begin_purchase(s, b"r")
    card.begin_purchase(s, b"r")
    card.begin_purchase(s, b"r")
    kem, dem, sig = mint.license(first.pk_tmp, 2000)
    with pytest.raises(CardError) as e:
        card.store_license(s, first.fingerprint, kem, dem, sig)
    assert e.value.reason == "no_pending_key"


def test_store_license_advances_clock(world):
    card, mint = new_card(world), Mint(world)
    s = card.verify_pin("1234")
    _, lic = buy(card, mint, s, 5000)
    assert card.card_ts == 5000
    assert card.list_content(s) == ["film-001"]
    assert lic.ts <= card.card_ts


def test_store_license_replay_and_stale(world):
    card, mint = new_card(world), Mint(world)
    s = card.verify_pin("1234")
    resp = card.begin_purchase(s, b"r")
    kem, dem, sig = mint.license(resp.pk_tmp, 5000)
    card.store_license(s, resp.fingerprint, kem, dem, sig)
    with pytest.raises(CardError) as e:
        card.store_license(s, resp.fingerprint, kem, dem, sig)
    assert e.value.reason == "replayed_id"
    for ts in (5000, 4999):
        resp = card.begin_purchase(s, b"r")
        with pytest.raises(CardError) as e:
            card.store_license(s, resp.fingerprint, *mint.license(resp.pk_tmp, ts))
        assert e.value.reason == "stale_ts"
    assert card.card_ts == 5000


def test_store_license_bad_signature_and_issuer(world):
    card, mint = new_card(world), Mint(world)
    s = card.verify_pin("1234")
    resp = card.begin_purchase(s, b"r")
    kem, dem, _ = mint.license(resp.pk_tmp, 5000)
    with pytest.raises(CardError) as e:
        card.store_license(s, resp.fingerprint, kem, dem, b"\x00" * 32)
    assert e.value.reason == "bad_signature"
    rogue = SigningKey.generate(world.group, random.Random(1))
    rogue_cert = issue_certificate(rogue, issuer_id=None, role=Role.CONTENT_PROVIDER, subject="cp",
                                   ts=1, verify_key=rogue.verify_key, cert_id="rogue")
    with pytest.raises(CardError) as e:
        card.store_license(s, resp.fingerprint, *mint.license(resp.pk_tmp, 6000, key=rogue, issuer=rogue_cert))
    assert e.value.reason == "unknown_issuer"
    with pytest.raises(CardError) as e:
        card.store_license(s, resp.fingerprint, kem, dem[:-1] + b"\x00", _)
    assert e.value.reason == "decrypt_failed"


# -- execution ---------------------------------------------------------------------

def test_authorize_execution_issues_working_rk(world):
    card, mint = new_card(world), Mint(world)
    s = card.verify_pin("1234")
    resp, _ = buy(card, mint, s, 5000)
    chain, cd_kp = mint.cd_chain(6000)
    auth = card.authorize_execution(s, "film-001", chain)
    assert card.card_ts == 6000
    assert card.license_for("film-001")[0].terms.used == 1
    assert auth.fingerprint == resp.fingerprint
    m = world.group.random_g2(random.Random(2))
    c = pre.encrypt_second(m, resp.pk_tmp.z_a1, random.Random(3))
    assert pre.decrypt_first(pre.reencrypt(c, auth.rk), cd_kp.secret.a2) == m


def test_authorize_rejections(world):
    card, mint = new_card(world), Mint(world)
    s = card.verify_pin("1234")
    buy(card, mint, s, 5000)
    with pytest.raises(CardError) as e:
        card.authorize_execution(s, "nothing", mint.cd_chain(6000)[0])
    assert e.value.reason == "unknown_content"

    rogue = SigningKey.generate(world.group, random.Random(1))
    self_signed = issue_certificate(rogue, issuer_id=None, role=Role.CONTENT_DISTRIBUTOR_EPHEMERAL, subject="me",
                                    ts=7000, verify_key=rogue.verify_key, cert_id="me",
                                    pre_public=pre.keygen(world.group, random.Random(2)).public)
    with pytest.raises(CardError) as e:
        card.authorize_execution(s, "film-001", [self_signed])
    assert e.value.reason == "not_a_cd"

    chain, _ = mint.cd_chain(6000)
    card.authorize_execution(s, "film-001", chain)
    with pytest.raises(CardError) as e:
        card.authorize_execution(s, "film-001", chain)
    assert e.value.reason == "replayed_cert_id"
    with pytest.raises(CardError) as e:
        card.authorize_execution(s, "film-001", mint.cd_chain(5999)[0])
    assert e.value.reason == "stale_ts"


def test_cd_cert_without_pre_key_rejected(world):
    card, mint = new_card(world), Mint(world)
    s = card.verify_pin("1234")
    buy(card, mint, s, 5000)
    cd = world.distributors["cd-1"]
    bare = issue_certificate(cd._key, issuer_id=cd.cert.cert_id, role=Role.CONTENT_DISTRIBUTOR_EPHEMERAL,
                             subject="cd-1", ts=6000, verify_key=cd._key.verify_key, cert_id="bare")
    with pytest.raises(CardError) as e:
        card.authorize_execution(s, "film-001", [bare, cd.cert])
    assert e.value.reason == "not_a_cd"


@pytest.mark.parametrize("n", [1, 3, 10])
def test_n_times_with_interleaved_failures(world, n):
    card, mint = new_card(world), Mint(world)
    s = card.verify_pin("1234")
    buy(card, mint, s, 5000, terms=LicenseTerms(LicenseModel.EXECUTE_AT_MOST_N, n=n))
    ts, successes = 5000, 0
    for i in range(n + 3):
        ts += 10
        chain, _ = mint.cd_chain(ts)
        # a failed attempt (replayed + stale certificates) between every good one
        with pytest.raises(CardError):
            card.authorize_execution(s, "film-001", mint.cd_chain(ts - 20)[0])
        try:
            card.authorize_execution(s, "film-001", chain)
            successes += 1
        except CardError as exc:
            assert exc.reason == "terms_denied"
    assert successes == n


def test_execute_until_uses_card_clock(world):
    card, mint = new_card(world), Mint(world)
    s = card.verify_pin("1234")
    buy(card, mint, s, 5000, terms=LicenseTerms(LicenseModel.EXECUTE_UNTIL, expiry_ts=8000))
    card.authorize_execution(s, "film-001", mint.cd_chain(7999)[0])
    with pytest.raises(CardError) as e:
        card.authorize_execution(s, "film-001", mint.cd_chain(8000)[0])
    assert e.value.reason == "terms_denied"


def test_multiple_licenses_same_content(world):
    card, mint = new_card(world), Mint(world)
    s = card.verify_pin("1234")
    r1, _ = buy(card, mint, s, 5000, terms=LicenseTerms.pay_per_execute())
    r2, _ = buy(card, mint, s, 5001, terms=LicenseTerms.pay_per_execute())
    a1 = card.authorize_execution(s, "film-001", mint.cd_chain(6000)[0])
    a2 = card.authorize_execution(s, "film-001", mint.cd_chain(6001)[0])
    assert {a1.fingerprint, a2.fingerprint} == {r1.fingerprint, r2.fingerprint}
    with pytest.raises(CardError):
        card.authorize_execution(s, "film-001", mint.cd_chain(6002)[0])


# -- authorization categories -------------------------------------------------------

def test_category_checks(world):
    card = new_card(world, dob="2000-06-15")
    s = card.verify_pin("1234")
    eighteen = birthday_ts(date(2000, 6, 15), 18)
    assert not card.check_authorization_category(s, "X", eighteen - 1)
    assert card.check_authorization_category(s, "X", eighteen)
    assert card.check_authorization_category(s, "unrated", 0)


def test_birthday_leap_day():
    assert birthday_ts(date(2008, 2, 29), 18) == birthday_ts(date(2008, 3, 1), 18)
    assert birthday_ts(date(2000, 2, 29), 4) == birthday_ts(date(2004, 2, 29), 0)


def test_tampered_attributes(world):
    card = new_card(world)
    good = card._holder
    card._holder = HolderAttributes("1970-01-01", good.home_country, good.signature)
    s = card.verify_pin("1234")
    with pytest.raises(CardError) as e:
        card.check_authorization_category(s, "X", 10**13)
    assert e.value.reason == "invalid_attributes"
    # unrestricted content needs no attributes at all
    assert card.check_authorization_category(s, "unrated", 0)


def test_begin_purchase_denies_minor(world):
    card = new_card(world, dob="2010-01-01")
    s = card.verify_pin("1234")
    with pytest.raises(CardError) as e:
        card.begin_purchase(s, b"r", "X")
    assert e.value.reason == "category_denied"


# -- command interface ---------------------------------------------------------------

def test_channel_mirrors_direct_calls(world):
    card, mint = new_card(world), Mint(world)
    ch = CardChannel(card)
    s = ch.verify_pin("1234")
    resp = ch.begin_purchase(s, b"r" * 32)
    kem, dem, sig = mint.license(resp.pk_tmp, 5000)
    assert ch.store_license(s, resp.fingerprint, kem.to_bytes(), dem, sig) == "film-001"
    assert ch.list_content(s) == ["film-001"]
    chain, _ = mint.cd_chain(6000)
    assert ch.authorize_execution(s, "film-001", chain).fingerprint == resp.fingerprint
    assert ch.check_authorization_category(s, "unrated", 0)
    with pytest.raises(CardError) as e:
        ch.authorize_execution(s, "film-001", chain)
    assert e.value.reason == "replayed_cert_id"
    assert all(entry.envelope.message_type in (MessageType.CARD_COMMAND, MessageType.ERROR)
               for entry in ch.transcript.entries)


def test_handle_frame_rejects_garbage(world):
    card = new_card(world)
    for data in (frame(b"junk"), frame(Envelope(MessageType.CERT_REQUEST, {}).to_bytes()),
                 frame(Envelope(MessageType.CARD_COMMAND, {"cmd": "format_disk"}).to_bytes())):
        reply = Envelope.from_bytes(unframe(card.handle_frame(data))[0])
        assert reply.message_type is MessageType.ERROR


# -- secret containment --------------------------------------------------------------

def _secret_forms(group, scalars):
    forms = set()
    for s in scalars:
        be = group.encode_scalar(s)
        forms |= {be, be[::-1]}
    return forms


def test_no_secret_bytes_leave_the_card():
    # on the production curve no public value encodes a secret exponent, so a byte scan is meaningful
    w = World(backend="production", seed=5)
    user = w.user()
    t = Transcript("all")
    w.purchase(user, "song-042", LicenseModel.EXECUTE_AT_MOST_N, 2, transcript=t)
    w.execute(user, "cd-1", "song-042", transcript=t)
    w.execute(user, "cd-2", "song-042", transcript=t)
    card = user.card
    scalars = [w.card_key.sk]
    for entries in card._licenses.values():
        for stored in entries:
            scalars += [stored.keypair.secret.a1, stored.keypair.secret.a2]
    scalars += [kp.secret.a1 for kp in card._pending.values()]
    forms = _secret_forms(w.group, scalars)
    for transcript in (user.channel.transcript, t):
        blobs = observed_blobs(transcript) + [transcript.to_bytes()]
        for blob in blobs:
            for f in forms:
                assert f not in blob


# -- randomized trace ------------------------------------------------------------------

def test_randomized_replay_trace(world):
    """10^4 mixed operations: monotone clock, no id accepted twice, licenses never overdrawn."""
    rng = random.Random(2024)
    card, mint = new_card(world), Mint(world, rng)
    s = card.verify_pin("1234")
    accepted_ids: set[str] = set()
    submitted_licenses: list[tuple] = []
    submitted_chains: list[list] = []
    granted = {"film-001": 0, "song-042": 0}
    allowance = {"film-001": 0, "song-042": 0}
    for step in range(10_000):
        before = card.card_ts
        op = rng.random()
        if op < 0.3:
            replay = submitted_licenses and rng.random() < 0.3
            if replay:
                lid, ts, n, cid, args = rng.choice(submitted_licenses)
            else:
                resp = card.begin_purchase(s, rng.randbytes(8))
                lid, ts, n = f"L{step}", before + rng.randint(-2, 3), rng.randint(1, 3)
                cid = rng.choice(list(granted))
                args = (resp.fingerprint, *mint.license(resp.pk_tmp, ts, content_id=cid, lid=lid,
                                                         terms=LicenseTerms(LicenseModel.EXECUTE_AT_MOST_N, n=n)))
                submitted_licenses.append((lid, ts, n, cid, args))
            try:
                card.store_license(s, *args)
                ok = True
            except CardError as exc:
                ok = False
                assert exc.reason in ("replayed_id", "stale_ts", "no_pending_key")
            if ok:
                assert lid not in accepted_ids and ts > before
                accepted_ids.add(lid)
                allowance[cid] += n
        elif op < 0.9:
            if submitted_chains and rng.random() < 0.3:
                chain = rng.choice(submitted_chains)
            else:
                chain, _ = mint.cd_chain(before + rng.randint(-2, 3), cert_id=f"C{step}")
                submitted_chains.append(chain)
            cid = rng.choice(list(granted))
            try:
                card.authorize_execution(s, cid, chain)
                ok = True
            except CardError as exc:
                ok = False
                assert exc.reason in ("replayed_cert_id", "stale_ts", "terms_denied", "unknown_content")
                if exc.reason == "terms_denied":
                    # the certificate itself was fine, so it was consumed
                    assert card.card_ts == chain[0].ts > before
                    accepted_ids.add(chain[0].cert_id)
            if ok:
                assert chain[0].cert_id not in accepted_ids and chain[0].ts > before
                accepted_ids.add(chain[0].cert_id)
                granted[cid] += 1
        else:
            with pytest.raises(CardError):
                card.verify_pin("0000")
            s = card.verify_pin("1234")
        assert card.card_ts >= before
        for lics in card._licenses.values():
            assert all(st.license.ts <= card.card_ts for st in lics)
    assert len(accepted_ids) > 1000
    for cid in granted:
        assert granted[cid] <= allowance[cid]
        assert granted[cid] == sum(lic.terms.used for lic in card.license_for(cid))
