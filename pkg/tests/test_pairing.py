import random
from collections import Counter

import pytest
from scipy.stats import chisquare

from drmmesh.pairing import (
    BackendMismatchError,
    EncodingError,
    G1Element,
    G2Element,
    TransparentGroup,
    g1_pow,
    g2_pow,
    make_group,
    pairing,
    random_scalar,
)


def test_random_scalar_is_deterministic_under_seed(group):
    a = random_scalar(group, random.Random(42))
    b = random_scalar(group, random.Random(42))
    assert a == b
    assert 0 <= a.value < group.order


def test_random_scalar_hits_every_residue(small_group):
    rng = random.Random(7)
    counts = Counter(random_scalar(small_group, rng).value for _ in range(10_000))
    assert set(counts) == set(range(101))
    # uniformity sanity check; threshold well below any plausible failure
    assert chisquare([counts[i] for i in range(101)]).pvalue > 1e-4


def test_g1_pow_exponent_zero_is_identity(group):
    assert g1_pow(group.g, 0) == group.g1_identity


def test_g1_pow_small_vector(small_group):
    assert g1_pow(G1Element(small_group, 2), small_group.scalar(3)) == G1Element(small_group, 6)


def test_power_law(group, rng):
    a, b = group.random_scalar(rng), group.random_scalar(rng)
    assert g1_pow(g1_pow(group.g, a), b) == g1_pow(group.g, a * b)
    assert g2_pow(g2_pow(group.z, a), b) == g2_pow(group.z, a * b)


def test_pairing_of_generator_is_z(group):
    assert pairing(group.g, group.g) == group.z
    assert group.z != group.g2_identity


def test_pairing_small_vector(small_group):
    assert pairing(G1Element(small_group, 2), G1Element(small_group, 3)) == G2Element(small_group, 6)


@pytest.mark.parametrize("trials", [100])
def test_bilinearity(group, trials):
    rng = random.Random(99)
    for _ in range(trials):
        a, b = group.random_scalar(rng), group.random_scalar(rng)
        assert pairing(g1_pow(group.g, a), g1_pow(group.g, b)) == g2_pow(group.z, a * b)


def test_bilinearity_matches_integer_oracle(small_group):
    for a in range(0, 101, 7):
        for b in range(0, 101, 11):
            got = pairing(G1Element(small_group, a), G1Element(small_group, b))
            assert got.raw == (a * b) % 101


def test_serialization_roundtrip(group):
    rng = random.Random(5)
    for _ in range(1000):
        s = group.random_scalar(rng)
        x, y = group.g ** s, group.z ** s
        assert group.decode(x.to_bytes()) == x
        assert group.decode(y.to_bytes()) == y


def test_transparent_encoding_layout(small_group):
    data = G1Element(small_group, 0x5A).to_bytes()
    # backend tag, group tag, 2-byte length, minimal big-endian exponent
    assert data == bytes([1, 1, 0, 1, 0x5A])
    assert G2Element(small_group, 0).to_bytes() == bytes([1, 2, 0, 0])


def test_decode_rejects_garbage(group):
    with pytest.raises(EncodingError):
        group.decode(b"\x01")
    with pytest.raises(EncodingError):
        group.decode(group.g.to_bytes() + b"\x00")
    other = 2 if group.backend_id == 1 else 1
    with pytest.raises(EncodingError):
        group.decode(bytes([other]) + group.g.to_bytes()[1:])


def test_transparent_decode_rejects_out_of_range(small_group):
    with pytest.raises(EncodingError):
        small_group.decode(bytes([1, 1, 0, 1, 101]))
    with pytest.raises(EncodingError):
        small_group.decode(bytes([1, 1, 0, 2, 0, 5]))


def test_production_decode_rejects_inconsistent_pair(production):
    a = (production.g ** 3).to_bytes()
    b = (production.g ** 4).to_bytes()
    # splice the first-curve half of one element with the twist half of another
    spliced = a[:4 + 48] + b[4 + 48:]
    with pytest.raises(EncodingError):
        production.decode(spliced)


def test_production_decode_rejects_bogus_gt(production):
    bad = production.z.to_bytes()[:4] + b"\x01" * 576
    with pytest.raises(EncodingError):
        production.decode(bad)


def test_backend_mismatch(small_group):
    other = make_group("transparent")
    with pytest.raises(BackendMismatchError):
        pairing(small_group.g, other.g)
    with pytest.raises(BackendMismatchError):
        small_group.z * other.z


def test_transparent_rejects_composite_order():
    with pytest.raises(ValueError):
        TransparentGroup(102)
    with pytest.raises(ValueError):
        TransparentGroup(97)


def test_params(group):
    p = group.params
    assert p.z == pairing(p.generator_g, p.generator_g)
    assert p.security_parameter_n == group.order.bit_length()


def test_scalar_repr_hides_value(small_group):
    s = small_group.scalar(42)
    assert "42" not in repr(s)
    import pickle

    with pytest.raises(TypeError):
        pickle.dumps(s)


def test_signatures(group, rng):
    sk = group.random_nonzero_scalar(rng)
    pk = group.g ** sk
    sig = group.sign(sk, b"payload")
    assert group.verify(pk, b"payload", sig)
    assert not group.verify(pk, b"payloae", sig)
    assert not group.verify(group.g ** group.random_nonzero_scalar(rng), b"payload", sig)
    assert not group.verify(pk, b"payload", sig[:-1] + bytes([sig[-1] ^ 1]))
