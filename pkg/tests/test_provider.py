import random
import threading

import pytest

from drmmesh import pre
from drmmesh.hybrid import decrypt_content, parse_json
from drmmesh.licenses import LicenseModel, UnknownContent
from drmmesh.provider import Bank, PaymentToken, PurchaseRejected, complete_request_body, content_aad
from drmmesh.system import World
from drmmesh.wire import Envelope, MessageType


@pytest.fixture
def world():
    return World(seed=21)


def card_response(world, r, rating="unrated"):
    card = world.user().card
    s = card.verify_pin(world.user().pin)
    return card, s, card.begin_purchase(s, r, rating)


def complete(world, session, resp, *, content_id="song-042", model=LicenseModel.EXECUTE_AT_MOST_N, quantity=1,
             token=None, rating="unrated", signature=None):
    token = token or world.pay(content_id, model, quantity)
    return world.cp.complete_purchase(
        session.session_id, list(resp.cert_chain), resp.pk_tmp, signature or resp.signature, rating,
        content_id, model, quantity, token,
    )


def test_ingest_distinct_keys_and_decrypts(world):
    a = world.cp.ingest_content("a", b"alpha", unit_price=1)
    b = world.cp.ingest_content("b", b"alpha", unit_price=1)
    assert a.ck.derived_key != b.ck.derived_key
    assert decrypt_content(a.encrypted_content, a.ck, aad=content_aad("a")) == b"alpha"
    with pytest.raises(ValueError):
        world.cp.ingest_content("a", b"again")
    with pytest.raises(ValueError):
        world.cp.ingest_content("c", b"")


def test_serve_encrypted_content(world):
    blob = world.cp.serve_encrypted_content("song-042")
    assert blob != world.contents["song-042"]
    assert world.contents["song-042"] not in blob
    assert world.cp.serve_encrypted_content("song-042") == blob
    with pytest.raises(UnknownContent):
        world.cp.serve_encrypted_content("nope")


def test_open_purchase_fresh_nonces(world):
    (s1, c1), (s2, _) = world.cp.open_purchase(), world.cp.open_purchase()
    assert s1.state == "challenged" and s2.state == "challenged"
    assert s1.r != s2.r and s1.session_id != s2.session_id
    assert c1.r == s1.r


def test_happy_path_yields_openable_license_and_key(world):
    session, _ = world.cp.open_purchase()
    card, s, resp = card_response(world, session.r)
    result = complete(world, session, resp, quantity=2)
    lic = card.store_license(s, resp.fingerprint, result.license_kem, result.license_dem, result.license_signature)
    assert lic.terms.n == 2 and lic.content_id == "song-042"
    assert session.state == "completed"
    # the content key is only recoverable by the pk_tmp owner
    kp = card._pending.get(resp.fingerprint) or card._licenses["song-042"][0].keypair
    seed = pre.decrypt_second(result.encrypted_ck, kp.secret.a1)
    assert seed == world.cp._catalog["song-042"].ck.g2_seed


def test_wrong_nonce_signature_rejected(world):
    session, _ = world.cp.open_purchase()
    _, _, resp = card_response(world, b"other nonce")
    with pytest.raises(PurchaseRejected) as e:
        complete(world, session, resp)
    assert e.value.reason == "bad_signature"


def test_session_is_one_shot(world):
    session, _ = world.cp.open_purchase()
    _, _, resp = card_response(world, session.r)
    complete(world, session, resp)
    with pytest.raises(PurchaseRejected) as e:
        complete(world, session, resp)
    assert e.value.reason == "replayed_session"


def test_session_timeout(world):
    session, _ = world.cp.open_purchase()
    _, _, resp = card_response(world, session.r)
    world.clock.advance(120_001)
    with pytest.raises(PurchaseRejected) as e:
        complete(world, session, resp)
    assert e.value.reason == "expired_session"


def test_payment_checks(world):
    token = world.pay("song-042", LicenseModel.EXECUTE_AT_MOST_N, 1)
    session, _ = world.cp.open_purchase()
    _, _, resp = card_response(world, session.r)
    complete(world, session, resp, token=token)

    cases = [
        (token, "double_spend"),
        (world.pay("song-042", LicenseModel.EXECUTE_AT_MOST_N, 1, short_by=1), "wrong_amount"),
        (PaymentToken("f" * 32, token.amount, b"\x00" * 32), "invalid_payment"),
    ]
    for tok, reason in cases:
        session, _ = world.cp.open_purchase()
        _, _, resp = card_response(world, session.r)
        with pytest.raises(PurchaseRejected) as e:
            complete(world, session, resp, token=tok)
        assert e.value.reason == reason


def test_rejected_payment_not_spent(world):
    token = world.pay("song-042", LicenseModel.EXECUTE_AT_MOST_N, 1)
    session, _ = world.cp.open_purchase()
    _, _, resp = card_response(world, b"wrong")
    with pytest.raises(PurchaseRejected):
        complete(world, session, resp, token=token)
    session, _ = world.cp.open_purchase()
    _, _, resp = card_response(world, session.r)
    complete(world, session, resp, token=token)


def test_unknown_content_and_rating_mismatch(world):
    session, _ = world.cp.open_purchase()
    _, _, resp = card_response(world, session.r)
    with pytest.raises(PurchaseRejected) as e:
        complete(world, session, resp, content_id="nope", token=world.bank.issue(1))
    assert e.value.reason == "unknown_content"
    # card approved "unrated" but the content is X-rated
    session, _ = world.cp.open_purchase()
    _, _, resp = card_response(world, session.r)
    with pytest.raises(PurchaseRejected) as e:
        complete(world, session, resp, content_id="late-007")
    assert e.value.reason == "rating_mismatch"


def test_discounted_price_enforced(world):
    token = world.pay("film-001", LicenseModel.EXECUTE_AT_MOST_N, 10)
    assert token.amount == 2700
    session, _ = world.cp.open_purchase()
    _, _, resp = card_response(world, session.r)
    complete(world, session, resp, content_id="film-001", quantity=10, token=token)


def test_issuance_ts_strictly_increases_on_frozen_clock(world):
    card = world.user().card
    s = card.verify_pin(world.user().pin)
    for _ in range(3):
        session, _ = world.cp.open_purchase()
        resp = card.begin_purchase(s, session.r)
        result = complete(world, session, resp)
        card.store_license(s, resp.fingerprint, result.license_kem, result.license_dem, result.license_signature)
    ts = [lic.ts for lic in card.license_for("song-042")]
    assert ts == sorted(set(ts)) and len(ts) == 3


def test_execute_until_expiry(world):
    session, _ = world.cp.open_purchase()
    card, s, resp = card_response(world, session.r)
    result = complete(world, session, resp, model=LicenseModel.EXECUTE_UNTIL, quantity=3)
    lic = card.store_license(s, resp.fingerprint, result.license_kem, result.license_dem, result.license_signature)
    assert lic.terms.expiry_ts == lic.ts + 3 * world.cp.rental_period_ms


def test_double_spend_concurrent(world):
    token = world.pay("song-042", LicenseModel.EXECUTE_AT_MOST_N, 1)
    card = world.user().card
    s = card.verify_pin(world.user().pin)
    attempts = []
    for _ in range(8):
        session, _ = world.cp.open_purchase()
        attempts.append((session, card.begin_purchase(s, session.r)))
    outcomes = []

    def go(session, resp):
        try:
            complete(world, session, resp, token=token)
            outcomes.append("ok")
        except PurchaseRejected as exc:
            outcomes.append(exc.reason)

    threads = [threading.Thread(target=go, args=a) for a in attempts]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert outcomes.count("ok") == 1
    assert outcomes.count("double_spend") == 7


def test_bank_tokens(world):
    bank = Bank(world.bank_key, world.bank_cert, random.Random(1))
    a, b = bank.issue(5), bank.issue(5)
    assert a.serial != b.serial
    assert PaymentToken.from_dict(a.to_dict()) == a
    with pytest.raises(ValueError):
        bank.issue(-1)


def test_license_plaintext_never_on_wire(world):
    session, _ = world.cp.open_purchase()
    _, _, resp = card_response(world, session.r)
    body = complete_request_body(resp.cert_chain, resp.pk_tmp, resp.signature, "unrated", "song-042",
                                 LicenseModel.EXECUTE_AT_MOST_N, 1, world.pay("song-042", LicenseModel.EXECUTE_AT_MOST_N, 1))
    [reply] = world.cp.handle(Envelope(MessageType.PURCHASE_COMPLETE_REQUEST, body, session.session_id))
    assert reply.message_type is MessageType.PURCHASE_COMPLETE_RESPONSE
    raw = reply.to_bytes()
    assert b"execute_at_most_n" not in raw and b'"terms"' not in raw
    parse_json(raw)


def test_handle_malformed(world):
    body = {k: "x" for k in ("cert_chain", "pk_tmp", "signature", "rating", "content_id", "model", "quantity",
                             "payment_token")}
    session, _ = world.cp.open_purchase()
    [reply] = world.cp.handle(Envelope(MessageType.PURCHASE_COMPLETE_REQUEST, body, session.session_id))
    assert reply.message_type is MessageType.ERROR
