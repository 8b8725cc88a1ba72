"""Transition and signature rules for base and group channel states.

Every rule has a stable id. ``validate_transition`` and
``check_stage_signatures`` collect all violations instead of stopping at the
first one, so dispute logs and tests can see the full picture.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Optional

from . import accumulator as acc
from .errors import ParameterError
from .signing import TAG_FIN, TAG_STATE, TAG_UCS, Directory
from .state import (
    MANAGEMENT_CONTRACT,
    AddUserUpdate,
    ChannelState,
    CloseUpdate,
    EditUpdate,
    OpenUpdate,
    RemoveUserUpdate,
    derive_channel_id,
    rotation_header,
    ucs_hash,
)

KINDS = ("base", "group")
STAGES = ("pre-header", "post-header", "final")

TRANSITION_RULES = (
    "nonce-increment", "channel-id", "contract-address", "header",
    "new-ucs-nonce", "open-nonmember", "overcommit", "balance-debit", "open-channel-id",
    "new-ucs-hash", "openings-add", "child-contract-address",
    "finalisability-flag", "finalisability-nonce", "finalisability-channel-id",
    "recent-ucs-channel", "close-conservation", "committed-ucs-hash", "stale-committed-ucs",
    "unknown-child", "close-balance-credit", "openings-delete",
    "edit-channel-id", "edit-membership", "edit-balance", "openings-swap",
    "add-user-existing", "add-user-entry", "deposit-mismatch", "entrance-fee", "openings-unchanged",
    "remove-unknown-user", "remove-user-entry", "remove-amount", "remove-user-committed",
)
SIGNATURE_RULES = (
    "unknown-signer", "bad-signature", "missing-signature", "header-signature",
    "ucs-signatures", "child-signatures", "finalisability-signatures",
)


@dataclass(frozen=True)
class Deposit:
    user: str
    amount: int
    fee: int


@dataclass(frozen=True)
class Violation:
    rule: str
    detail: str


@dataclass(frozen=True)
class Verdict:
    violations: tuple = ()

    @property
    def accepted(self) -> bool:
        return not self.violations

    @property
    def rules(self) -> tuple[str, ...]:
        return tuple(v.rule for v in self.violations)

    def __add__(self, other: "Verdict") -> "Verdict":
        return Verdict(self.violations + other.violations)

    def __bool__(self):
        return self.accepted


@dataclass
class ValidationContext:
    """Everything a validator needs besides the two states.

    ``known_openings`` maps child channel id to the last committed UCS hash.
    It is ``None`` when the caller (the contract) cannot know the open children;
    the accumulator checks then carry the whole burden.
    """

    previous: ChannelState
    proposed: ChannelState
    channel_kind: str = "base"
    stage: str = "final"
    directory: Optional[Directory] = None
    proposer: Optional[str] = None
    known_openings: Optional[Mapping[bytes, bytes]] = None
    management_contract: str = MANAGEMENT_CONTRACT
    app_contracts: frozenset = frozenset()
    deposit: Optional[Deposit] = None
    entrance_fee: int = 0
    ignored: frozenset = frozenset()
    round_header: Optional[str] = None
    child_ignored: frozenset = frozenset()
    committed_members: frozenset = frozenset()

    def __post_init__(self):
        if self.channel_kind not in KINDS:
            raise ParameterError(f"channel kind must be one of {KINDS}, got {self.channel_kind!r}")
        if self.stage not in STAGES:
            raise ParameterError(f"stage must be one of {STAGES}, got {self.stage!r}")
        if not isinstance(self.previous, ChannelState) or not isinstance(self.proposed, ChannelState):
            raise ParameterError("validation works on ChannelState pairs")
        if self.channel_kind == "group" and self.deposit is not None:
            raise ParameterError("group channels take no on-chain deposit")

    def expected_round_header(self) -> Optional[str]:
        if self.round_header is not None:
            return self.round_header
        prev = self.previous
        if not prev.members:
            return None
        return rotation_header(prev.members, prev.nonce, self.ignored)


class _Collector:
    def __init__(self):
        self.items: list[Violation] = []

    def check(self, ok: bool, rule: str, detail: str):
        if not ok:
            self.items.append(Violation(rule, detail))

    def verdict(self) -> Verdict:
        return Verdict(tuple(self.items))


def _prime(h: bytes) -> acc.AccElement:
    return acc.hash_to_prime(h)


def validate_transition(ctx: ValidationContext) -> Verdict:
    prev, new = ctx.previous, ctx.proposed
    out = _Collector()
    out.check(new.nonce == prev.nonce + 1, "nonce-increment",
              f"nonce {new.nonce} does not follow {prev.nonce}")
    out.check(new.channel_id == prev.channel_id, "channel-id", "channel id changed")
    out.check(new.ucs.contract_address == ctx.management_contract, "contract-address",
              f"contract address {new.ucs.contract_address!r} is not the management contract")
    if new.members:
        expected = rotation_header(new.members, new.nonce, ctx.ignored & set(new.members))
        out.check(new.header == expected, "header", f"header {new.header!r}, expected {expected!r}")
    else:
        out.check(new.header == "", "header", "empty channel must not name a header")

    up = new.update
    if isinstance(up, OpenUpdate):
        _open_rules(ctx, up, out)
    elif isinstance(up, CloseUpdate):
        _close_rules(ctx, up, out)
    elif isinstance(up, EditUpdate):
        _edit_rules(ctx, up, out)
    elif isinstance(up, AddUserUpdate):
        _add_rules(ctx, up, out)
    elif isinstance(up, RemoveUserUpdate):
        _remove_rules(ctx, up, out)
    else:
        raise ParameterError(f"unknown update variety {type(up).__name__}")
    return out.verdict()


def _unchanged_openings(ctx: ValidationContext, out: _Collector):
    out.check(ctx.proposed.openings == ctx.previous.openings, "openings-unchanged",
              "membership updates must leave the openings accumulator untouched")


def _open_rules(ctx: ValidationContext, up: OpenUpdate, out: _Collector):
    prev, new = ctx.previous, ctx.proposed
    child = up.new_ucs
    out.check(child.nonce == 0, "new-ucs-nonce", f"child UCS nonce is {child.nonce}")
    prev_bal = prev.ucs.balances()
    outsiders = [m for m in child.members if m not in prev_bal]
    out.check(not outsiders, "open-nonmember", f"not channel members: {outsiders}")
    over = [m for m, c in child.balance_sheet if m in prev_bal and c > prev_bal[m]]
    out.check(not over, "overcommit", f"commitments exceed available balance for {over}")

    commits = child.balances()
    expected = []
    for m, b in prev.ucs.balance_sheet:
        if m in over:
            expected.append((m, None))
        else:
            expected.append((m, b - commits.get(m, 0)))
    got = new.ucs.balance_sheet
    same_order = [m for m, _ in got] == [m for m, _ in expected]
    debit_ok = same_order and all(
        want is None or have == want for (_, have), (_, want) in zip(got, expected)
    )
    out.check(debit_ok, "balance-debit", "parent balances not reduced exactly by the commitments")

    out.check(child.channel_id == derive_channel_id(prev.channel_id, prev.nonce), "open-channel-id",
              "child channel id is not derived from the parent id and nonce")
    out.check(up.new_ucs_hash == ucs_hash(child), "new-ucs-hash", "new UCS hash does not match the UCS")
    allowed = {ctx.management_contract} | set(ctx.app_contracts)
    out.check(child.contract_address in allowed, "child-contract-address",
              f"unknown child contract {child.contract_address!r}")
    params = prev.openings.params
    added = (
        new.openings.params == params
        and new.openings.epoch == prev.openings.epoch + 1
        and acc.is_addition(prev.openings.value, new.openings.value, _prime(up.new_ucs_hash), params)
    )
    out.check(added, "openings-add", "openings accumulator is not the previous one with the new hash added")


def _committed_rules(ctx: ValidationContext, last, last_hash: bytes, out: _Collector):
    out.check(last_hash == ucs_hash(last), "committed-ucs-hash",
              "last committed UCS hash does not match the UCS")
    if ctx.known_openings is None:
        return
    known = ctx.known_openings.get(last.channel_id)
    if known is None:
        out.check(False, "unknown-child", "no open child with this channel id")
    else:
        out.check(known == last_hash, "stale-committed-ucs",
                  "last committed UCS is not the one currently committed")


def _close_rules(ctx: ValidationContext, up: CloseUpdate, out: _Collector):
    prev, new = ctx.previous, ctx.proposed
    last, recent, fin = up.last_committed_ucs, up.recent_ucs, up.finalisability
    out.check(fin.finalisable, "finalisability-flag", "finalisable flag is not set")
    out.check(fin.nonce == recent.nonce, "finalisability-nonce",
              f"finalisability nonce {fin.nonce} differs from recent UCS nonce {recent.nonce}")
    out.check(fin.channel_id == last.channel_id, "finalisability-channel-id",
              "finalisability tuple names another channel")
    out.check(recent.channel_id == last.channel_id and recent.contract_address == last.contract_address,
              "recent-ucs-channel", "recent UCS does not describe the committed channel")
    out.check(recent.total == last.total, "close-conservation",
              f"child total moved from {last.total} to {recent.total}")
    _committed_rules(ctx, last, up.last_committed_ucs_hash, out)

    credit = recent.balances()
    got = new.ucs.balance_sheet
    expected = [(m, b + credit.get(m, 0)) for m, b in prev.ucs.balance_sheet]
    stray = set(credit) - set(prev.ucs.members)
    out.check(tuple(expected) == got and not stray, "close-balance-credit",
              "parent balances not credited exactly per the recent UCS")

    params = prev.openings.params
    removed = (
        new.openings.params == params
        and new.openings.epoch == prev.openings.epoch + 1
        and acc.is_removal(prev.openings.value, new.openings.value,
                           _prime(up.last_committed_ucs_hash), params)
    )
    out.check(removed, "openings-delete", "openings accumulator is not the previous one with the child removed")


def _edit_rules(ctx: ValidationContext, up: EditUpdate, out: _Collector):
    prev, new = ctx.previous, ctx.proposed
    last, child = up.last_committed_ucs, up.new_ucs
    _committed_rules(ctx, last, up.last_committed_ucs_hash, out)
    out.check(up.new_ucs_hash == ucs_hash(child), "new-ucs-hash", "new UCS hash does not match the UCS")
    out.check(child.channel_id == last.channel_id and child.contract_address == last.contract_address
              and child.nonce > last.nonce, "edit-channel-id",
              "new UCS is not a later UCS of the same child channel")

    old_m, new_m = set(last.members), set(child.members)
    joiners, leavers = new_m - old_m, old_m - new_m
    mover = None
    shape_ok = len(joiners) + len(leavers) == 1
    if shape_ok:
        mover = next(iter(joiners or leavers))
        shape_ok = mover in prev.ucs.balances()
    out.check(shape_ok, "edit-membership", "an edit must add or remove exactly one parent member")

    delta = child.total - last.total
    if shape_ok:
        expected = []
        for m, b in prev.ucs.balance_sheet:
            expected.append((m, b - delta if m == mover else b))
        ok = tuple(expected) == new.ucs.balance_sheet and all(b >= 0 for _, b in expected)
        ok = ok and ((mover in joiners and delta >= 0) or (mover in leavers and delta <= 0))
    else:
        ok = [m for m, _ in prev.ucs.balance_sheet] == list(new.ucs.members)
    out.check(ok, "edit-balance", "parent balances not adjusted by the child total delta")

    params = prev.openings.params
    swapped = (
        new.openings.params == params
        and new.openings.epoch == prev.openings.epoch + 2
        and acc.is_swap(prev.openings.value, new.openings.value,
                        _prime(up.last_committed_ucs_hash), _prime(up.new_ucs_hash), params)
    )
    out.check(swapped, "openings-swap", "openings accumulator does not swap the old hash for the new")


def _add_rules(ctx: ValidationContext, up: AddUserUpdate, out: _Collector):
    prev, new = ctx.previous, ctx.proposed
    out.check(up.user not in prev.ucs.balances(), "add-user-existing", f"{up.user} is already a member")
    if ctx.channel_kind == "base":
        d = ctx.deposit
        out.check(d is not None and d.user == up.user and d.amount == up.amount, "deposit-mismatch",
                  "amount does not match the on-chain deposit record")
        fee = d.fee if d is not None else 0
    else:
        fee = ctx.entrance_fee

    proposer = ctx.proposer
    if proposer is None:
        # Outside the flow (e.g. a broadcast) the proposer is whoever got the fee.
        prev_bal = prev.ucs.balances()
        got_now = new.ucs.balances()
        paid = [m for m in prev_bal if got_now.get(m) == prev_bal[m] + fee]
        proposer = paid[0] if len(paid) == 1 else (up.user if not prev_bal else None)
    expected = dict(prev.ucs.balance_sheet)
    expected[up.user] = up.amount
    got = new.ucs.balances()
    order_ok = list(new.ucs.members) == list(prev.ucs.members) + [up.user]
    entry_ok = order_ok
    for m, want in expected.items():
        if m == proposer and m != up.user:
            continue
        if m == proposer == up.user:
            want += fee
        entry_ok = entry_ok and got.get(m) == want
    out.check(entry_ok, "add-user-entry", "balance sheet is not the previous one plus the new entry")
    if proposer is not None and proposer != up.user:
        ok = proposer in expected and got.get(proposer) == expected[proposer] + fee
        out.check(ok, "entrance-fee", f"proposer {proposer} not credited the entrance fee {fee}")
    _unchanged_openings(ctx, out)


def _remove_rules(ctx: ValidationContext, up: RemoveUserUpdate, out: _Collector):
    prev, new = ctx.previous, ctx.proposed
    bal = prev.ucs.balances()
    out.check(up.user in bal, "remove-unknown-user", f"{up.user} is not a member")
    expected = tuple((m, b) for m, b in prev.ucs.balance_sheet if m != up.user)
    out.check(new.ucs.balance_sheet == expected, "remove-user-entry",
              "balance sheet is not the previous one minus the removed entry")
    out.check(up.user not in bal or up.amount == bal[up.user], "remove-amount",
              "amount differs from the removed member's balance")
    out.check(up.user not in ctx.committed_members, "remove-user-committed",
              f"{up.user} still has funds committed to an open child")
    _unchanged_openings(ctx, out)


# ---------------------------------------------------------------- signatures

def _child_participants(ctx: ValidationContext) -> set[str]:
    up = ctx.proposed.update
    if isinstance(up, OpenUpdate):
        return set(up.new_ucs.members)
    if isinstance(up, CloseUpdate):
        return set(up.recent_ucs.members) - set(ctx.child_ignored)
    return set()


def required_signers(ctx: ValidationContext) -> set[str]:
    up = ctx.proposed.update
    pre = _child_participants(ctx)
    if isinstance(up, RemoveUserUpdate) and up.user not in ctx.ignored:
        pre.add(up.user)
    if ctx.stage == "pre-header":
        return pre - set(ctx.ignored)
    if ctx.stage == "post-header":
        head = ctx.expected_round_header()
        return (pre | ({head} if head else set())) - set(ctx.ignored)
    everyone = set(ctx.previous.members) | set(ctx.proposed.members)
    if isinstance(up, EditUpdate):
        everyone -= set(ctx.child_ignored)
    return everyone - set(ctx.ignored)


def _verify_map(directory: Directory, tag: bytes, digest: bytes, sigs, who) -> list[str]:
    return sorted(a for a in who if not directory.verify(a, tag, digest, sigs.get(a)))


def check_stage_signatures(state: ChannelState, ctx: ValidationContext) -> Verdict:
    if ctx.directory is None:
        raise ParameterError("signature checks need a key directory")
    directory = ctx.directory
    out = _Collector()
    digest = state.digest()
    allowed = set(ctx.previous.members) | set(state.members)
    strangers = sorted(a for a in state.signatures if a not in allowed or not directory.knows(a))
    out.check(not strangers, "unknown-signer", f"signatures from non-members {strangers}")
    present = [a for a in state.signatures if a in allowed]
    bad = _verify_map(directory, TAG_STATE, digest, state.signatures, present)
    out.check(not bad, "bad-signature", f"signatures that do not verify: {bad}")

    need = required_signers(ctx)
    head = ctx.expected_round_header() if ctx.stage != "pre-header" else None
    if head in need:
        out.check(head in state.signatures and head not in bad, "header-signature",
                  f"round header {head} has not signed")
    missing = sorted(a for a in need - {head} if a not in state.signatures)
    out.check(not missing, "missing-signature", f"required signers missing: {missing}")

    uh = ucs_hash(state.ucs)
    ucs_bad = _verify_map(directory, TAG_UCS, uh, state.ucs_signatures, need)
    out.check(not ucs_bad, "ucs-signatures", f"UCS not signed by {ucs_bad}")

    up = state.update
    if isinstance(up, (OpenUpdate, EditUpdate)):
        who = set(up.new_ucs.members) - set(ctx.child_ignored)
        if ctx.stage == "pre-header" and isinstance(up, EditUpdate):
            who = set()
        child_bad = _verify_map(directory, TAG_UCS, up.new_ucs_hash, up.new_ucs_signatures, who)
        out.check(not child_bad, "child-signatures", f"new child UCS not signed by {child_bad}")
    elif isinstance(up, CloseUpdate):
        who = set(up.recent_ucs.members) - set(ctx.child_ignored)
        child_bad = _verify_map(directory, TAG_UCS, ucs_hash(up.recent_ucs), up.recent_ucs_signatures, who)
        out.check(not child_bad, "child-signatures", f"recent child UCS not signed by {child_bad}")
        fin_bad = _verify_map(directory, TAG_FIN, up.finalisability.digest(),
                              up.finalisability_signatures, who)
        out.check(not fin_bad, "finalisability-signatures", f"finalisability not signed by {fin_bad}")
    return out.verdict()


def validate_full(ctx: ValidationContext) -> Verdict:
    return validate_transition(ctx) + check_stage_signatures(ctx.proposed, ctx)


def missing_signers(state, who, directory: Directory) -> list[str]:
    """Addresses in ``who`` without a verifying state signature on ``state``."""
    digest = state.digest()
    return sorted(a for a in who if not directory.verify(a, TAG_STATE, digest, state.signatures.get(a)))
