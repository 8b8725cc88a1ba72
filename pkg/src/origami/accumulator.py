"""Dynamic RSA accumulator committing to the set of open child channels.

The module is set-agnostic: it never stores which elements are accumulated.
Callers (the party runtime) keep elements and membership witnesses and refresh
them as the accumulator moves.

Moduli are desk-scale by default. Anything outside the simulator should use a
modulus of at least 2048 bits.
"""
from __future__ import annotations

import hashlib
import math
import random
from dataclasses import dataclass
from functools import lru_cache

from .errors import (
    CannotSelfUpdateError,
    ElementIsMemberError,
    InvalidWitnessError,
    ParameterError,
)

MIN_MODULUS_BITS = 16
HASH_BITS = 256
RECOMMENDED_MODULUS_BITS = 2048

# Fixed Miller-Rabin bases; deterministic below 3.3e24 and a strong probable-prime
# test above that.
_MR_BASES = (2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53, 59, 61, 67, 71)


def _small_primes(limit: int) -> list[int]:
    sieve = bytearray([1]) * limit
    sieve[:2] = b"\x00\x00"
    for i in range(2, int(limit ** 0.5) + 1):
        if sieve[i]:
            sieve[i * i::i] = bytearray(len(sieve[i * i::i]))
    return [i for i, flag in enumerate(sieve) if flag]


_SIEVE_LIMIT = 2000
_SMALL_PRIMES = frozenset(_small_primes(_SIEVE_LIMIT))
# One gcd against this product rejects most composites before any exponentiation.
_SMALL_PRODUCT = math.prod(_SMALL_PRIMES)


def is_probable_prime(n: int) -> bool:
    if n < 2:
        return False
    for p in _MR_BASES:
        if n % p == 0:
            return n == p
    if n < _SIEVE_LIMIT:
        return n in _SMALL_PRIMES
    if math.gcd(n, _SMALL_PRODUCT) != 1:
        return False
    d, s = n - 1, 0
    while d % 2 == 0:
        d //= 2
        s += 1
    for a in _MR_BASES:
        x = pow(a, d, n)
        if x == 1 or x == n - 1:
            continue
        for _ in range(s - 1):
            x = x * x % n
            if x == n - 1:
                break
        else:
            return False
    return True


def bezout(x: int, y: int) -> tuple[int, int, int]:
    """Extended Euclid: returns (g, a, b) with a*x + b*y == g == gcd(x, y)."""
    old_r, r = x, y
    old_a, a = 1, 0
    old_b, b = 0, 1
    while r:
        q = old_r // r
        old_r, r = r, old_r - q * r
        old_a, a = a, old_a - q * a
        old_b, b = b, old_b - q * b
    if old_r < 0:
        old_r, old_a, old_b = -old_r, -old_a, -old_b
    return old_r, old_a, old_b


@dataclass(frozen=True)
class GroupParams:
    modulus: int
    generator: int

    def __post_init__(self):
        n, g = self.modulus, self.generator
        if n < 9 or n % 2 == 0:
            raise ParameterError(f"modulus must be odd and >= 9, got {n}")
        if is_probable_prime(n):
            raise ParameterError("modulus must be composite")
        if not 1 < g < n:
            raise ParameterError("generator must satisfy 1 < g < modulus")
        if math.gcd(g, n) != 1:
            raise ParameterError("generator must be coprime to the modulus")

    @property
    def element_size(self) -> int:
        return (self.modulus.bit_length() + 7) // 8


def _random_safe_prime(rng: random.Random, bits: int) -> int:
    while True:
        q = rng.getrandbits(bits - 1) | (1 << (bits - 2)) | 1
        p = 2 * q + 1
        if is_probable_prime(q) and is_probable_prime(p):
            return p


def trusted_setup(bit_length: int, seed: bytes) -> GroupParams:
    """Derive (modulus, generator) deterministically from ``seed``.

    The modulus is a product of two distinct safe primes and the generator is a
    quadratic residue of large order. The factors never leave this function.
    Safe-prime search is slow past a few hundred bits; that is acceptable for a
    one-off setup but not for per-test use.
    """
    if bit_length < MIN_MODULUS_BITS:
        raise ParameterError(f"bit_length must be >= {MIN_MODULUS_BITS}, got {bit_length}")
    if isinstance(seed, str):
        seed = seed.encode()
    rng = random.Random(int.from_bytes(hashlib.sha256(b"origami/setup" + bytes(seed)).digest(), "big"))
    half = bit_length // 2
    while True:
        p = _random_safe_prime(rng, half)
        q = _random_safe_prime(rng, bit_length - half)
        if p != q and (p * q).bit_length() == bit_length:
            break
    n = p * q
    p1, q1 = (p - 1) // 2, (q - 1) // 2
    while True:
        h = rng.randrange(2, n - 1)
        if math.gcd(h, n) != 1:
            continue
        g = h * h % n
        if g != 1 and pow(g, p1, n) != 1 and pow(g, q1, n) != 1:
            return GroupParams(n, g)


@lru_cache(maxsize=65536)
def _next_prime_from(candidate: int) -> int:
    candidate |= 1
    if candidate < 3:
        candidate = 3
    while not is_probable_prime(candidate):
        candidate += 2
    return candidate


@dataclass(frozen=True)
class AccElement:
    raw: bytes
    prime: int


def hash_to_prime(raw: bytes, bits: int = HASH_BITS) -> AccElement:
    """Map ``raw`` to the first probable prime >= its SHA-256 value forced odd.

    ``bits`` truncates the hash to its top bits; only tests use anything but 256.
    """
    if not raw:
        raise ParameterError("hash_to_prime needs a non-empty byte string")
    if not 2 <= bits <= HASH_BITS:
        raise ParameterError(f"bits must be in [2, {HASH_BITS}]")
    value = int.from_bytes(hashlib.sha256(bytes(raw)).digest(), "big") >> (HASH_BITS - bits)
    return AccElement(bytes(raw), _next_prime_from(value))


@dataclass(frozen=True)
class Accumulator:
    params: GroupParams
    value: int
    epoch: int = 0

    @classmethod
    def fresh(cls, params: GroupParams) -> "Accumulator":
        return cls(params, params.generator, 0)

    @property
    def is_empty(self) -> bool:
        return self.value == self.params.generator


@dataclass(frozen=True)
class MembershipWitness:
    params: GroupParams
    value: int
    for_element: AccElement
    at_epoch: int


@dataclass(frozen=True)
class NonMembershipWitness:
    a: int
    b_elem: int
    for_element: AccElement


def add(acc: Accumulator, elem: AccElement) -> tuple[Accumulator, MembershipWitness]:
    n = acc.params.modulus
    new = Accumulator(acc.params, pow(acc.value, elem.prime, n), acc.epoch + 1)
    # The adder keeps the pre-add value: it is exactly the element's witness.
    return new, MembershipWitness(acc.params, acc.value, elem, acc.epoch + 1)


def verify_membership(acc: Accumulator, elem: AccElement, w: MembershipWitness) -> bool:
    if w.params != acc.params:
        return False
    return pow(w.value, elem.prime, acc.params.modulus) == acc.value


def delete(acc: Accumulator, elem: AccElement, witness: MembershipWitness) -> Accumulator:
    if not verify_membership(acc, elem, witness):
        raise InvalidWitnessError("witness does not verify against the accumulator")
    return Accumulator(acc.params, witness.value, acc.epoch + 1)


def update_witness_on_add(w: MembershipWitness, added: AccElement) -> MembershipWitness:
    return MembershipWitness(
        w.params, pow(w.value, added.prime, w.params.modulus), w.for_element, w.at_epoch + 1
    )


def update_witness_on_delete(
    w: MembershipWitness, deleted: AccElement, new_acc: Accumulator
) -> MembershipWitness:
    own = w.for_element.prime
    if deleted.prime == own:
        raise CannotSelfUpdateError("cannot refresh the witness of the deleted element")
    g, a, b = bezout(own, deleted.prime)
    if g != 1:
        raise ParameterError("element primes are not coprime")
    n = w.params.modulus
    # a*own + b*deleted == 1, so w^b * A'^a is the own-th root of A'.
    value = pow(w.value, b, n) * pow(new_acc.value, a, n) % n
    return MembershipWitness(w.params, value, w.for_element, new_acc.epoch)


def create_nonmembership_witness(
    acc: Accumulator, elem: AccElement, accumulated_primes
) -> NonMembershipWitness:
    product = math.prod(accumulated_primes)
    if product % elem.prime == 0:
        raise ElementIsMemberError("element prime divides the accumulated product")
    g, a, b = bezout(product, elem.prime)
    if g != 1:
        raise ElementIsMemberError("element prime shares a factor with the accumulated product")
    return NonMembershipWitness(a, pow(acc.params.generator, b, acc.params.modulus), elem)


def verify_nonmembership(acc: Accumulator, elem: AccElement, u: NonMembershipWitness) -> bool:
    n = acc.params.modulus
    try:
        lhs = pow(acc.value, u.a, n) * pow(u.b_elem, elem.prime, n) % n
    except ValueError:  # non-invertible base for a negative exponent
        return False
    return lhs == acc.params.generator


# Witness-free transition checks. Validators and the contract use these because
# they hold no witnesses; the new accumulator value itself acts as the root.

def is_addition(before: int, after: int, elem: AccElement, params: GroupParams) -> bool:
    return pow(before, elem.prime, params.modulus) == after


def is_removal(before: int, after: int, elem: AccElement, params: GroupParams) -> bool:
    return pow(after, elem.prime, params.modulus) == before


def is_swap(before: int, after: int, removed: AccElement, added: AccElement, params: GroupParams) -> bool:
    """True iff ``after`` is ``before`` with ``removed`` replaced by ``added``."""
    n = params.modulus
    if removed.prime == added.prime:
        return before == after
    mid = swap_intermediate(before, after, removed, added, params)
    return pow(mid, removed.prime, n) == before and pow(mid, added.prime, n) == after


def swap_intermediate(before: int, after: int, removed: AccElement, added: AccElement, params: GroupParams) -> int:
    """Recover the accumulator value between the removal and the addition of a swap.

    With a*e_removed + b*e_added == 1 the intermediate I satisfies
    I = before^a * after^b, since before = I^e_removed and after = I^e_added.
    """
    _, a, b = bezout(removed.prime, added.prime)
    n = params.modulus
    return pow(before, a, n) * pow(after, b, n) % n


def encode_element(value: int) -> bytes:
    """Length-prefixed (4-byte big-endian) big-endian magnitude."""
    if value < 0:
        raise ParameterError("group elements are non-negative")
    body = value.to_bytes((value.bit_length() + 7) // 8 or 1, "big")
    return len(body).to_bytes(4, "big") + body


def decode_element(data: bytes, offset: int = 0) -> tuple[int, int]:
    length = int.from_bytes(data[offset:offset + 4], "big")
    start = offset + 4
    if start + length > len(data):
        raise ParameterError("truncated group element")
    return int.from_bytes(data[start:start + length], "big"), start + length
