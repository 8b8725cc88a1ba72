import math
import random

import pytest
import sympy
from hypothesis import given, settings
from hypothesis import strategies as st

from origami import accumulator as acc
from origami.errors import (
    CannotSelfUpdateError,
    ElementIsMemberError,
    InvalidWitnessError,
    ParameterError,
)

# 1081 = 23 * 47, both safe primes. Carmichael lambda is 2 * 11 * 23, so the
# small primes below are invertible exponents and roots are unique.
TINY = acc.GroupParams(1081, 4)


def elem(p: int) -> acc.AccElement:
    return acc.AccElement(f"e{p}".encode(), p)


def test_bezout_identity_and_values() -> None:
    assert acc.bezout(7, 17) == (1, 5, -2)
    assert acc.bezout(7 * 13 * 17, 5) == (1, -2, 619)
    for x, y in [(240, 46), (17, 5), (1, 1), (0, 9), (12, 18)]:
        g, a, b = acc.bezout(x, y)
        assert g == math.gcd(x, y)
        assert a * x + b * y == g


def test_add_is_one_exponentiation() -> None:
    start = acc.Accumulator.fresh(TINY)
    after, w = acc.add(start, elem(7))
    # 4^7 mod 1081
    assert after.value == 169
    assert after.epoch == 1
    assert w.value == 4  # witness is the value before inclusion
    after, _ = acc.add(after, elem(13))
    after, _ = acc.add(after, elem(17))
    assert after.value == pow(4, 7 * 13 * 17, 1081) == 54


def test_delete_sets_value_to_witness() -> None:
    a = acc.Accumulator(TINY, 54, 3)  # holds 7, 13, 17
    w17 = acc.MembershipWitness(TINY, pow(4, 7 * 13, 1081), elem(17), 3)
    assert w17.value == 294
    after = acc.delete(a, elem(17), w17)
    assert after.value == 294
    assert after.epoch == 4


def test_delete_rejects_bad_witness() -> None:
    a = acc.Accumulator(TINY, 54, 3)
    bad = acc.MembershipWitness(TINY, 295, elem(17), 3)
    with pytest.raises(InvalidWitnessError):
        acc.delete(a, elem(17), bad)


def test_witness_update_on_delete_uses_bezout_pair() -> None:
    w7 = acc.MembershipWitness(TINY, 878, elem(7), 3)  # 4^(13*17)
    after = acc.Accumulator(TINY, 294, 4)  # 17 removed
    # 5*7 - 2*17 == 1, so the fresh witness is w^-2 * A'^5.
    direct = pow(878, -2, 1081) * pow(294, 5, 1081) % 1081
    assert direct == 384 == pow(4, 13, 1081)
    fresh = acc.update_witness_on_delete(w7, elem(17), after)
    assert fresh.value == 384
    assert fresh.at_epoch == 4
    assert acc.verify_membership(after, elem(7), fresh)


def test_witness_update_on_delete_of_self_refused() -> None:
    w7 = acc.MembershipWitness(TINY, 878, elem(7), 3)
    with pytest.raises(CannotSelfUpdateError):
        acc.update_witness_on_delete(w7, elem(7), acc.Accumulator(TINY, 878, 4))


def test_witness_update_on_add() -> None:
    w7 = acc.MembershipWitness(TINY, 4, elem(7), 1)
    fresh = acc.update_witness_on_add(w7, elem(13))
    assert fresh.value == pow(4, 13, 1081) == 384
    assert fresh.at_epoch == 2


def test_membership_verification_exact() -> None:
    a = acc.Accumulator(TINY, 54, 3)
    assert pow(878, 7, 1081) == 54
    assert acc.verify_membership(a, elem(7), acc.MembershipWitness(TINY, 878, elem(7), 3))
    assert acc.verify_membership(a, elem(13), acc.MembershipWitness(TINY, 726, elem(13), 3))
    assert not acc.verify_membership(a, elem(13), acc.MembershipWitness(TINY, 878, elem(13), 3))


def test_nonmembership_witness_exact() -> None:
    a = acc.Accumulator(TINY, 54, 3)
    u = acc.create_nonmembership_witness(a, elem(5), [7, 13, 17])
    assert u.a == -2
    assert u.b_elem == pow(4, 619, 1081) == 708
    # A^a * (g^b)^e == g
    assert pow(54, -2, 1081) * pow(708, 5, 1081) % 1081 == 4
    assert acc.verify_nonmembership(a, elem(5), u)
    assert not acc.verify_nonmembership(a, elem(11), u)


def test_nonmembership_refused_for_members() -> None:
    a = acc.Accumulator(TINY, 54, 3)
    with pytest.raises(ElementIsMemberError):
        acc.create_nonmembership_witness(a, elem(13), [7, 13, 17])


def test_swap_intermediate_and_check() -> None:
    before = pow(4, 7 * 13 * 17, 1081)
    after = pow(4, 7 * 13 * 19, 1081)
    assert acc.swap_intermediate(before, after, elem(17), elem(19), TINY) == 294
    assert acc.is_swap(before, after, elem(17), elem(19), TINY)
    assert not acc.is_swap(before, after, elem(13), elem(19), TINY)
    assert acc.is_addition(294, before, elem(17), TINY)
    assert acc.is_removal(before, 294, elem(17), TINY)


def test_group_params_validation() -> None:
    with pytest.raises(ParameterError):
        acc.GroupParams(1087, 4)  # prime modulus
    with pytest.raises(ParameterError):
        acc.GroupParams(1080, 7)  # even
    with pytest.raises(ParameterError):
        acc.GroupParams(1081, 23)  # shares a factor
    with pytest.raises(ParameterError):
        acc.trusted_setup(8, b"x")


def test_trusted_setup_is_deterministic() -> None:
    p1 = acc.trusted_setup(48, b"seed")
    p2 = acc.trusted_setup(48, b"seed")
    assert p1 == p2
    assert p1.modulus.bit_length() == 48
    assert acc.trusted_setup(48, b"other") != p1
    assert not sympy.isprime(p1.modulus)


def test_hash_to_prime_matches_independent_oracle() -> None:
    for i in range(40):
        raw = f"item-{i}".encode()
        e = acc.hash_to_prime(raw, bits=40)
        start = int.from_bytes(__import__("hashlib").sha256(raw).digest(), "big") >> (256 - 40)
        start |= 1
        want = start if sympy.isprime(start) else sympy.nextprime(start)
        assert e.prime == want


def test_hash_to_prime_full_width_is_prime() -> None:
    e = acc.hash_to_prime(b"channel")
    assert sympy.isprime(e.prime)
    assert e.prime.bit_length() <= 257
    with pytest.raises(ParameterError):
        acc.hash_to_prime(b"")


@given(st.integers(min_value=0, max_value=2**200))
def test_element_encoding_round_trips(v: int) -> None:
    data = acc.encode_element(v) + b"tail"
    back, end = acc.decode_element(data)
    assert back == v
    assert data[end:] == b"tail"


@pytest.mark.parametrize("n", [2, 3, 97, 561, 1105, 2**61 - 1, 2**64 + 1, 3215031751])
def test_primality_agrees_with_sympy(n: int) -> None:
    assert acc.is_probable_prime(n) == sympy.isprime(n)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.sampled_from([3, 5, 7, 11, 13, 17, 19, 29, 31, 37]), min_size=1, max_size=6, unique=True),
       st.data())
def test_witnesses_track_incremental_updates(primes, data) -> None:
    """Every live witness verifies after each add and delete; removed ones stop verifying."""
    a = acc.Accumulator.fresh(TINY)
    witnesses = {}
    for p in primes:
        a, w = acc.add(a, elem(p))
        witnesses = {q: acc.update_witness_on_add(v, elem(p)) for q, v in witnesses.items()}
        witnesses[p] = w
    victims = data.draw(st.lists(st.sampled_from(primes), unique=True, max_size=len(primes)))
    for p in victims:
        a = acc.delete(a, elem(p), witnesses.pop(p))
        witnesses = {q: acc.update_witness_on_delete(v, elem(p), a) for q, v in witnesses.items()}
    assert a.value == pow(4, math.prod(witnesses), 1081)
    for q, w in witnesses.items():
        assert acc.verify_membership(a, elem(q), w)


def random_sequence_run(rng: random.Random, params: acc.GroupParams, ops: int, max_live: int, bits: int = 24):
    """One random add/delete run checked against g^(product of live primes).

    Returns the number of checks made. Raises AssertionError on mismatch.
    """
    a = acc.Accumulator.fresh(params)
    live, dead = {}, {}
    checks = 0
    counter = 0
    for _ in range(ops):
        if live and (len(live) >= max_live or rng.random() < 0.4):
            e = rng.choice(sorted(live, key=lambda x: x.prime))
            w_old = live.pop(e)
            a = acc.delete(a, e, w_old)
            live = {k: acc.update_witness_on_delete(w, e, a) for k, w in live.items()}
            dead[e] = w_old
        else:
            counter += 1
            e = acc.hash_to_prime(f"{rng.random()}-{counter}".encode(), bits=bits)
            if e in live or any(e.prime == k.prime for k in live):
                continue
            a, w = acc.add(a, e)
            live = {k: acc.update_witness_on_add(v, e) for k, v in live.items()}
            live[e] = w
        for k, w in dead.items():
            assert not acc.verify_membership(a, k, w)
            checks += 1
        oracle = pow(params.generator, math.prod(k.prime for k in live), params.modulus)
        assert a.value == oracle
        for k, w in live.items():
            assert acc.verify_membership(a, k, w)
            checks += 1
        checks += 1
    return checks


def test_random_sequences_small() -> None:
    rng = random.Random(5)
    params = acc.trusted_setup(40, b"small")
    for _ in range(10):
        assert random_sequence_run(rng, params, 20, 8) > 0
