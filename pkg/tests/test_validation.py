"""Rejection matrix: one valid transition per update variety, then single-field
mutations that must each trip exactly one named rule."""
from dataclasses import replace

import pytest

from origami import accumulator as acc
from origami.state import (
    MANAGEMENT_CONTRACT,
    FinalisabilityTuple,
    RemoveUserUpdate,
    derive_channel_id,
    rotation_header,
    sha256,
    ucs_hash,
)
from origami.transitions import (
    build_add_user,
    build_close,
    build_edit,
    build_open,
    build_remove_user,
    new_child_ucs,
)
from origami.validation import (
    SIGNATURE_RULES,
    TRANSITION_RULES,
    Deposit,
    ValidationContext,
    check_stage_signatures,
    required_signers,
    validate_transition,
)

from conftest import base_with

APP = "app:demo"
WRONG_HASH = sha256(b"not the child")


def with_sheet(state, **changes):
    sheet = tuple((m, changes.get(m, b)) for m, b in state.ucs.balance_sheet)
    return replace(state, ucs=state.ucs.with_sheet(sheet))


def with_update(state, **fields):
    return replace(state, update=replace(state.update, **fields))


def reheaded(state, nonce):
    ucs = state.ucs.with_sheet(state.ucs.balance_sheet, nonce=nonce)
    return replace(state, ucs=ucs, header=rotation_header(ucs.members, nonce))


# ------------------------------------------------------------------ fixtures per variety

def open_case(params):
    prev = base_with(params, {"alice": 100, "bob": 100, "carol": 100})
    child = new_child_ucs(prev, [("alice", 30), ("bob", 20)], MANAGEMENT_CONTRACT)
    new, _ = build_open(prev, child)
    ctx = dict(channel_kind="base", app_contracts=frozenset({APP}))

    def rebuilt_child(**fields):
        return build_open(prev, replace(child, **fields))[0]

    overdrawn = child.with_sheet((("alice", 130), ("bob", 20)))
    over_state = replace(
        with_update(new, new_ucs=overdrawn, new_ucs_hash=ucs_hash(overdrawn)),
        openings=acc.add(prev.openings, acc.hash_to_prime(ucs_hash(overdrawn)))[0],
    )
    over_state = with_sheet(over_state, alice=100)
    outsider = child.with_sheet((("alice", 30), ("zed", 0)))
    mutations = {
        "nonce-increment": reheaded(new, prev.nonce + 2),
        "channel-id": replace(new, ucs=replace(new.ucs, channel_id=derive_channel_id(b"x" * 32, 1))),
        "contract-address": replace(new, ucs=replace(new.ucs, contract_address="other")),
        "header": replace(new, header="bob" if new.header != "bob" else "carol"),
        "new-ucs-nonce": rebuilt_child(nonce=1),
        "open-nonmember": build_open(prev, outsider)[0],
        "overcommit": over_state,
        "balance-debit": with_sheet(new, alice=71),
        "open-channel-id": rebuilt_child(channel_id=derive_channel_id(prev.channel_id, 99)),
        "new-ucs-hash": replace(with_update(new, new_ucs_hash=WRONG_HASH),
                                openings=acc.add(prev.openings, acc.hash_to_prime(WRONG_HASH))[0]),
        "child-contract-address": rebuilt_child(contract_address="app:unknown"),
        "openings-add": replace(new, openings=prev.openings),
    }
    return prev, new, ctx, mutations


def close_case(params):
    base = base_with(params, {"alice": 100, "bob": 100, "carol": 100})
    child = new_child_ucs(base, [("alice", 30), ("bob", 20)], MANAGEMENT_CONTRACT)
    prev, witness = build_open(base, child)
    h = ucs_hash(child)
    recent = child.with_sheet((("alice", 25), ("bob", 25)), nonce=5)
    new = build_close(prev, child, recent, witness)
    ctx = dict(channel_kind="base", known_openings={child.channel_id: h})
    fin = new.update.finalisability
    mutations = {
        "finalisability-flag": with_update(new, finalisability=replace(fin, finalisable=False)),
        "finalisability-nonce": with_update(new, finalisability=replace(fin, nonce=4)),
        "finalisability-channel-id": with_update(new, finalisability=replace(fin, channel_id=bytes(32))),
        "recent-ucs-channel": with_update(new, recent_ucs=replace(recent, contract_address=APP)),
        "close-conservation": build_close(prev, child, recent.with_sheet((("alice", 30), ("bob", 25))), witness),
        "committed-ucs-hash": with_update(new, last_committed_ucs=replace(child, nonce=1)),
        "close-balance-credit": with_sheet(new, alice=96),
        "openings-delete": replace(new, openings=prev.openings),
        "contract-address": replace(new, ucs=replace(new.ucs, contract_address="other")),
    }
    ctx_mutations = {
        "unknown-child": {"known_openings": {}},
        "stale-committed-ucs": {"known_openings": {child.channel_id: WRONG_HASH}},
    }
    return prev, new, ctx, mutations, ctx_mutations


def edit_case(params):
    base = base_with(params, {"alice": 100, "bob": 100, "carol": 100})
    child = new_child_ucs(base, [("alice", 30), ("bob", 20)], MANAGEMENT_CONTRACT)
    prev, witness = build_open(base, child)
    joined = child.with_sheet((("alice", 30), ("bob", 20), ("carol", 10)), nonce=3)
    new, _ = build_edit(prev, child, joined, witness)
    ctx = dict(channel_kind="base")

    def swapped_to(new_hash):
        mid = acc.delete(prev.openings, acc.hash_to_prime(ucs_hash(child)), witness)
        return acc.add(mid, acc.hash_to_prime(new_hash))[0]

    two_joiners = child.with_sheet((("alice", 30), ("bob", 20), ("carol", 10), ("dave", 0)), nonce=3)
    mutations = {
        "new-ucs-hash": replace(with_update(new, new_ucs_hash=WRONG_HASH), openings=swapped_to(WRONG_HASH)),
        "edit-channel-id": build_edit(prev, child, replace(joined, nonce=0), witness)[0],
        "edit-membership": replace(
            with_update(new, new_ucs=two_joiners, new_ucs_hash=ucs_hash(two_joiners)),
            openings=swapped_to(ucs_hash(two_joiners)), ucs=replace(new.ucs, balance_sheet=prev.ucs.balance_sheet),
        ),
        "edit-balance": with_sheet(new, carol=91),
        "openings-swap": replace(new, openings=prev.openings),
        "committed-ucs-hash": with_update(new, last_committed_ucs=replace(child, nonce=1)),
        "header": replace(new, header="alice" if new.header != "alice" else "bob"),
    }
    return prev, new, ctx, mutations


def add_case(params):
    prev = base_with(params, {"alice": 100, "bob": 100})
    new = build_add_user(prev, "carol", 100, "alice", 2)
    ctx = dict(channel_kind="base", deposit=Deposit("carol", 100, 2), proposer="alice")
    mutations = {
        "deposit-mismatch": build_add_user(prev, "carol", 90, "alice", 2),
        "entrance-fee": build_add_user(prev, "carol", 100, "alice", 1),
        "add-user-entry": with_sheet(new, carol=101),
        "openings-unchanged": replace(new, openings=acc.add(prev.openings, acc.hash_to_prime(b"x"))[0]),
        "nonce-increment": reheaded(new, prev.nonce + 3),
        "channel-id": replace(new, ucs=replace(new.ucs, channel_id=sha256(b"elsewhere"))),
    }
    return prev, new, ctx, mutations


def remove_case(params):
    prev = base_with(params, {"alice": 100, "bob": 70, "carol": 100})
    new = build_remove_user(prev, "bob")
    ctx = dict(channel_kind="base")
    ghost = replace(prev, ucs=prev.ucs.with_sheet(prev.ucs.balance_sheet, nonce=prev.nonce + 1),
                    update=RemoveUserUpdate("zed", 0))
    ghost = replace(ghost, header=rotation_header(ghost.members, ghost.nonce))
    mutations = {
        "remove-amount": with_update(new, amount=69),
        "remove-user-entry": with_sheet(new, alice=99),
        "remove-unknown-user": ghost,
        "openings-unchanged": replace(new, openings=acc.add(prev.openings, acc.hash_to_prime(b"x"))[0]),
        "contract-address": replace(new, ucs=replace(new.ucs, contract_address=APP)),
    }
    ctx_mutations = {"remove-user-committed": {"committed_members": frozenset({"bob"})}}
    return prev, new, ctx, mutations, ctx_mutations


def _cases(params):
    out = {}
    for name, build in (("open", open_case), ("close", close_case), ("edit", edit_case),
                        ("add-user", add_case), ("remove-user", remove_case)):
        got = build(params)
        prev, new, ctx, muts = got[:4]
        ctx_muts = got[4] if len(got) > 4 else {}
        out[name] = (prev, new, ctx, muts, ctx_muts)
    return out


def rejection_matrix(params):
    """Rows of (variety, expected rule, rules actually reported). First row per variety is the valid one."""
    rows = []
    for name, (prev, new, ctx, muts, ctx_muts) in _cases(params).items():
        rows.append((name, None, validate_transition(ValidationContext(prev, new, **ctx)).rules))
        for rule, bad in muts.items():
            rows.append((name, rule, validate_transition(ValidationContext(prev, bad, **ctx)).rules))
        for rule, extra in ctx_muts.items():
            rows.append((name, rule, validate_transition(ValidationContext(prev, new, **{**ctx, **extra})).rules))
    return rows




@pytest.fixture(scope="module")
def matrix(params):
    return rejection_matrix(params)


def test_valid_transitions_accepted(matrix) -> None:
    for variety, rule, got in matrix:
        if rule is None:
            assert got == (), f"{variety}: valid transition rejected by {got}"


def test_each_mutation_trips_exactly_its_rule(matrix) -> None:
    for variety, rule, got in matrix:
        if rule is not None:
            assert got == (rule,), f"{variety}/{rule}: got {got}"


def test_matrix_coverage(matrix) -> None:
    per_variety = {}
    for variety, rule, _ in matrix:
        if rule is not None:
            per_variety.setdefault(variety, set()).add(rule)
    assert set(per_variety) == {"open", "close", "edit", "add-user", "remove-user"}
    assert all(len(r) >= 4 for r in per_variety.values())
    covered = set().union(*per_variety.values())
    assert covered <= set(TRANSITION_RULES)
    assert len(covered) >= 25


# ------------------------------------------------------------------ signatures

def _signed(state, signers, who):
    for a in who:
        state = state.signed_by(signers[a])
    return state


def test_final_stage_needs_everyone(params, keys) -> None:
    signers, directory = keys
    prev = base_with(params, {"alice": 100, "bob": 100, "carol": 100})
    new = build_remove_user(prev, "bob")
    ctx = ValidationContext(prev, new, directory=directory)
    assert required_signers(ctx) == {"alice", "bob", "carol"}
    ok = _signed(new, signers, ["alice", "bob", "carol"])
    assert check_stage_signatures(ok, ctx).accepted
    partial = _signed(new, signers, ["alice", "bob"])
    assert check_stage_signatures(partial, ctx).rules == ("missing-signature", "ucs-signatures")


def test_post_header_stage_needs_header(params, keys) -> None:
    signers, directory = keys
    prev = base_with(params, {"alice": 100, "bob": 100, "carol": 100})
    new = build_add_user(prev, "dave", 5, "alice", 0)
    ctx = ValidationContext(prev, new, stage="post-header", directory=directory,
                            deposit=Deposit("dave", 5, 0), proposer="alice")
    head = ctx.expected_round_header()
    assert required_signers(ctx) == {head}
    assert check_stage_signatures(_signed(new, signers, [head]), ctx).accepted
    other = next(m for m in prev.members if m != head)
    got = check_stage_signatures(_signed(new, signers, [other]), ctx).rules
    assert got == ("header-signature", "ucs-signatures")


def test_stranger_and_forged_signatures(params, keys) -> None:
    signers, directory = keys
    prev = base_with(params, {"alice": 100, "bob": 100})
    new = build_remove_user(prev, "bob")
    ok = _signed(new, signers, ["alice", "bob"])
    ctx = ValidationContext(prev, new, directory=directory)
    stranger = _signed(ok, signers, ["zed"])
    assert check_stage_signatures(stranger, ctx).rules == ("unknown-signer",)
    forged = replace(ok, signatures={**ok.signatures, "bob": signers["zed"].sign(b"state", new.digest())})
    assert check_stage_signatures(forged, ctx).rules == ("bad-signature",)


def test_child_and_finalisability_signatures(params, keys) -> None:
    signers, directory = keys
    base = base_with(params, {"alice": 100, "bob": 100, "carol": 100})
    child = new_child_ucs(base, [("alice", 30), ("bob", 20)], MANAGEMENT_CONTRACT)
    opened, witness = build_open(base, child)
    recent = child.with_sheet((("alice", 25), ("bob", 25)), nonce=5)
    fin = FinalisabilityTuple(True, 5, child.channel_id)
    fin_sigs = {a: signers[a].sign(b"fin", fin.digest()) for a in ("alice", "bob")}
    rec_sigs = {a: signers[a].sign(b"ucs", ucs_hash(recent)) for a in ("alice", "bob")}
    closed = build_close(opened, child, recent, witness, fin_sigs, rec_sigs)
    ctx = ValidationContext(opened, closed, directory=directory)
    full = _signed(closed, signers, ["alice", "bob", "carol"])
    assert check_stage_signatures(full, ctx).accepted

    no_fin = with_update(full, finalisability_signatures={"alice": fin_sigs["alice"]})
    assert check_stage_signatures(no_fin, ctx).rules == ("finalisability-signatures",)
    no_rec = with_update(full, recent_ucs_signatures={})
    assert check_stage_signatures(no_rec, ctx).rules == ("child-signatures",)
    # An expelled child member is waived.
    waived = ValidationContext(opened, closed, directory=directory, child_ignored=frozenset({"bob"}))
    lean = with_update(full, finalisability_signatures={"alice": fin_sigs["alice"]},
                       recent_ucs_signatures={"alice": rec_sigs["alice"]})
    assert check_stage_signatures(lean, waived).accepted


def test_ignored_members_not_required(params, keys) -> None:
    signers, directory = keys
    prev = base_with(params, {"alice": 100, "bob": 100, "carol": 100})
    new = build_add_user(prev, "dave", 5, "alice", 0, ignored={"carol"})
    ctx = ValidationContext(prev, new, directory=directory, ignored=frozenset({"carol"}),
                            deposit=Deposit("dave", 5, 0), proposer="alice")
    assert validate_transition(ctx).accepted
    assert check_stage_signatures(_signed(new, signers, ["alice", "bob", "dave"]), ctx).accepted


def test_signature_rule_ids_are_distinct() -> None:
    assert len(set(SIGNATURE_RULES)) == len(SIGNATURE_RULES)
    assert not set(SIGNATURE_RULES) & set(TRANSITION_RULES)
