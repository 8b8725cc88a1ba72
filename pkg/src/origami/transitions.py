"""Constructors for valid successor states of each update variety.

The returned states are unsigned; callers collect signatures through the
propagation flow. Builders never check validity themselves; validation does.
"""
from __future__ import annotations

from . import accumulator as acc
from .state import (
    MANAGEMENT_CONTRACT,
    ZERO_ID,
    AddUserUpdate,
    ChannelState,
    CloseUpdate,
    EditUpdate,
    FinalisabilityTuple,
    OpenUpdate,
    RemoveUserUpdate,
    Ucs,
    derive_channel_id,
    rotation_header,
    ucs_hash,
)


def _successor(prev: ChannelState, sheet, update, openings=None, ignored=frozenset()) -> ChannelState:
    ucs = Ucs(prev.nonce + 1, tuple(sheet), prev.channel_id, prev.ucs.contract_address)
    members = ucs.members
    header = rotation_header(members, ucs.nonce, set(ignored) & set(members)) if members else ""
    return ChannelState(ucs, openings if openings is not None else prev.openings, header, update)


def base_genesis(params: acc.GroupParams) -> ChannelState:
    """Empty base channel: no members, empty openings, channel id zero."""
    ucs = Ucs(0, (), ZERO_ID, MANAGEMENT_CONTRACT)
    return ChannelState(ucs, acc.Accumulator.fresh(params), "", OpenUpdate(ucs, ucs_hash(ucs)))


def child_genesis(opening: Ucs, params: acc.GroupParams) -> ChannelState:
    """Starting state of a group channel built from its committed nonce-0 UCS."""
    header = rotation_header(opening.members, 0)
    return ChannelState(opening, acc.Accumulator.fresh(params), header, OpenUpdate(opening, ucs_hash(opening)))


def build_add_user(prev: ChannelState, user: str, amount: int, proposer: str, fee: int,
                   ignored=frozenset()) -> ChannelState:
    sheet = [list(e) for e in prev.ucs.balance_sheet] + [[user, amount]]
    for e in sheet:
        if e[0] == proposer:
            e[1] += fee
    return _successor(prev, [tuple(e) for e in sheet], AddUserUpdate(user, amount), ignored=ignored)


def build_remove_user(prev: ChannelState, user: str, ignored=frozenset()) -> ChannelState:
    amount = prev.ucs.balance(user)
    sheet = [e for e in prev.ucs.balance_sheet if e[0] != user]
    return _successor(prev, sheet, RemoveUserUpdate(user, amount), ignored=ignored)


def new_child_ucs(prev: ChannelState, commitments, contract_address: str) -> Ucs:
    return Ucs(0, tuple(commitments), derive_channel_id(prev.channel_id, prev.nonce), contract_address)


def build_open(prev: ChannelState, child: Ucs, ignored=frozenset()):
    """Returns (state, witness for the child element)."""
    commits = child.balances()
    sheet = [(m, b - commits.get(m, 0)) for m, b in prev.ucs.balance_sheet]
    h = ucs_hash(child)
    openings, witness = acc.add(prev.openings, acc.hash_to_prime(h))
    return _successor(prev, sheet, OpenUpdate(child, h), openings, ignored), witness


def build_close(prev: ChannelState, last_committed: Ucs, recent: Ucs, witness: acc.MembershipWitness,
                fin_signatures=None, recent_signatures=None, ignored=frozenset()) -> ChannelState:
    credit = recent.balances()
    sheet = [(m, b + credit.get(m, 0)) for m, b in prev.ucs.balance_sheet]
    h = ucs_hash(last_committed)
    openings = acc.delete(prev.openings, acc.hash_to_prime(h), witness)
    fin = FinalisabilityTuple(True, recent.nonce, recent.channel_id)
    update = CloseUpdate(last_committed, recent, h, fin, dict(fin_signatures or {}), dict(recent_signatures or {}))
    return _successor(prev, sheet, update, openings, ignored)


def build_edit(prev: ChannelState, last_committed: Ucs, new_ucs: Ucs, witness: acc.MembershipWitness,
               new_signatures=None, ignored=frozenset()):
    """Returns (state, witness for the new child element)."""
    old_m, new_m = set(last_committed.members), set(new_ucs.members)
    mover = next(iter((new_m - old_m) | (old_m - new_m)))
    delta = new_ucs.total - last_committed.total
    sheet = [(m, b - delta if m == mover else b) for m, b in prev.ucs.balance_sheet]
    old_h, new_h = ucs_hash(last_committed), ucs_hash(new_ucs)
    mid = acc.delete(prev.openings, acc.hash_to_prime(old_h), witness)
    openings, new_witness = acc.add(mid, acc.hash_to_prime(new_h))
    update = EditUpdate(last_committed, new_ucs, old_h, new_h, dict(new_signatures or {}))
    return _successor(prev, sheet, update, openings, ignored), new_witness
