from dataclasses import replace

import pytest
from hypothesis import given
from hypothesis import strategies as st

from origami.errors import ParameterError, ProtocolError
from origami.state import (
    ZERO_ID,
    AddUserUpdate,
    FinalisabilityTuple,
    Ucs,
    canonical_encode,
    decode_finalisability,
    decode_state,
    decode_ucs,
    derive_channel_id,
    rotation_header,
    ucs_hash,
)
from origami.transitions import build_close, build_edit, build_remove_user

names = st.text(alphabet="abcdefghij", min_size=1, max_size=6)
sheets = st.dictionaries(names, st.integers(min_value=0, max_value=2**64 - 1), max_size=6)


@given(st.integers(min_value=0, max_value=2**64 - 1), sheets, st.binary(min_size=32, max_size=32), names)
def test_ucs_round_trip(nonce, sheet, cid, contract) -> None:
    u = Ucs(nonce, tuple(sheet.items()), cid, contract)
    assert decode_ucs(canonical_encode(u)) == u


@given(st.booleans(), st.integers(min_value=0, max_value=2**64 - 1), st.binary(min_size=32, max_size=32))
def test_finalisability_round_trip(flag, nonce, cid) -> None:
    f = FinalisabilityTuple(flag, nonce, cid)
    assert decode_finalisability(canonical_encode(f)) == f


def test_ucs_rejects_bad_fields() -> None:
    with pytest.raises(ParameterError):
        Ucs(0, (("a", 1), ("a", 2)), ZERO_ID, "c")
    with pytest.raises(ParameterError):
        Ucs(0, (("a", -1),), ZERO_ID, "c")
    with pytest.raises(ParameterError):
        Ucs(0, (), b"short", "c")


def test_decode_rejects_trailing_and_truncated() -> None:
    data = canonical_encode(Ucs(1, (("a", 5),), ZERO_ID, "c"))
    with pytest.raises(ParameterError):
        decode_ucs(data + b"\x00")
    with pytest.raises(ParameterError):
        decode_ucs(data[:-1])


def test_every_variety_round_trips(params, keys, opened) -> None:
    signers, _ = keys
    state, child, witness = opened
    recent = child.with_sheet((("alice", 25), ("bob", 25)), nonce=4)
    closed = build_close(state, child, recent, witness, {"alice": b"f" * 64}, {"bob": b"r" * 64})
    joined = child.with_sheet((("alice", 30), ("bob", 20), ("carol", 10)), nonce=2)
    edited, _ = build_edit(state, child, joined, witness, {"carol": b"s" * 64})
    removed = build_remove_user(state, "carol")
    for s in (state, closed, edited, removed):
        signed = s.signed_by(signers["alice"]).signed_by(signers["bob"])
        assert decode_state(canonical_encode(signed), params) == signed


def test_digest_ignores_signatures(keys, base3) -> None:
    signers, _ = keys
    signed = base3.signed_by(signers["alice"])
    assert signed.digest() == base3.digest()
    assert canonical_encode(signed) != canonical_encode(base3)


def test_digest_sensitive_to_every_part(base3) -> None:
    d = base3.digest()
    assert replace(base3, header="zed").digest() != d
    assert replace(base3, update=AddUserUpdate("carol", 101)).digest() != d
    assert replace(base3, ucs=base3.ucs.with_sheet(base3.ucs.balance_sheet, nonce=9)).digest() != d


def test_ucs_hash_is_stable() -> None:
    u = Ucs(0, (("alice", 3),), ZERO_ID, "origami:management")
    assert ucs_hash(u) == ucs_hash(Ucs(0, [["alice", 3]], bytes(32), "origami:management"))


def test_channel_ids_derive_from_parent_and_nonce() -> None:
    a = derive_channel_id(ZERO_ID, 4)
    assert len(a) == 32
    assert a != derive_channel_id(ZERO_ID, 5)
    assert a != derive_channel_id(a, 4)


def test_rotation_cycles_through_members() -> None:
    members = ("a", "b", "c")
    assert [rotation_header(members, n) for n in range(6)] == ["a", "b", "c", "a", "b", "c"]


def test_rotation_skips_ignored_without_shifting() -> None:
    members = ("a", "b", "c", "d")
    got = [rotation_header(members, n, {"b"}) for n in range(4)]
    assert got == ["a", "c", "c", "d"]
    with pytest.raises(ProtocolError):
        rotation_header(members, 0, set(members))
    with pytest.raises(ProtocolError):
        rotation_header((), 0)


@given(st.lists(names, min_size=1, max_size=7, unique=True), st.integers(min_value=0, max_value=10**6), st.data())
def test_rotation_never_names_skipped(members, nonce, data) -> None:
    skip = set(data.draw(st.lists(st.sampled_from(members), max_size=len(members) - 1)))
    head = rotation_header(members, nonce, skip)
    assert head in members and head not in skip
