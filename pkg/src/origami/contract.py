"""Simulated on-chain management contract.

Holds the escrow, the member registry, deposit storage (D) and refund
storage (R), and runs the dispute machines. Every public method taking a
``caller`` is a transaction and is logged in ``calls``; ``tick`` processes
deadlines and is not a transaction.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Optional

from .accumulator import GroupParams
from .app import AppRegistry, DemoAppState, app_missing_signers
from .signing import TAG_FIN, TAG_STATE, TAG_UCS, Directory
from .state import ZERO_ID, AddUserUpdate, ChannelState, RemoveUserUpdate, rotation_header, ucs_hash
from .transitions import base_genesis
from .validation import (
    Deposit,
    ValidationContext,
    check_stage_signatures,
    missing_signers,
    required_signers,
    validate_transition,
)


@dataclass
class DepositRecord:
    user: str
    amount: int
    fee: int
    opened_at: int
    n: int
    consumed: bool = False


@dataclass
class RefundRecord:
    user: str
    amount: int
    fee: int
    requested_at: int
    n: int
    status: str = "pending"


@dataclass
class DisputeRecord:
    id: int
    kind: str
    channel_id: bytes
    opener: str
    accused: str
    opened_at: int
    deadline: int
    previous: object
    proposal: object
    status: str = "open"
    answer: object = None
    challenge_deadline: Optional[int] = None
    genesis: object = None


@dataclass
class WithdrawalRecord:
    id: int
    user: str
    amount: int
    state: ChannelState
    requested_at: int
    deadline: int
    status: str = "pending"


@dataclass(frozen=True)
class CallResult:
    ok: bool
    op: str
    detail: str = ""
    ref: Optional[int] = None


@dataclass(frozen=True)
class ContractEvent:
    round: int
    kind: str
    channel_id: bytes
    data: dict = field(default_factory=dict)


@dataclass(frozen=True)
class CallRecord:
    round: int
    caller: str
    op: str
    args_digest: str
    ok: bool
    detail: str


def _args_digest(*parts) -> str:
    h = hashlib.sha256()
    for p in parts:
        if hasattr(p, "digest") and callable(p.digest):
            h.update(p.digest())
        else:
            h.update(repr(p).encode())
    return h.hexdigest()[:16]


class ManagementContract:
    def __init__(self, params: GroupParams, directory: Directory, ledger: dict, delta: int = 10,
                 penalty: Fraction = Fraction(1, 10), apps: AppRegistry = None, entrance_fee: int = 1):
        self.params = params
        self.directory = directory
        self.ledger = ledger
        self.delta = delta
        self.penalty = Fraction(penalty)
        self.apps = apps or AppRegistry()
        self.entrance_fee = entrance_fee
        self.genesis = base_genesis(params)

        self.escrow = 0
        self.registry: dict[str, int] = {}
        self.deposits: dict[str, DepositRecord] = {}
        self.refunds: dict[str, RefundRecord] = {}
        self.disputes: list[DisputeRecord] = []
        self.withdrawals: list[WithdrawalRecord] = []
        self.penalties: dict[str, int] = {}
        self.owed: dict[str, int] = {}
        self.penalty_claims: dict[str, int] = {}
        self.pool = 0
        self.ignored: dict[bytes, set] = {}
        self.designated: dict[bytes, tuple[int, str]] = {}
        self.app_members: dict[bytes, tuple] = {}
        self.app_ignored: dict[bytes, set] = {}
        self.app_rulings: dict[bytes, DemoAppState] = {}

        self.calls: list[CallRecord] = []
        self.events: list[ContractEvent] = []
        self.now = 0

    # ------------------------------------------------------------ reads

    def ignored_for(self, channel_id: bytes) -> frozenset:
        return frozenset(self.ignored.get(channel_id, ()))

    def app_ignored_for(self, channel_id: bytes) -> frozenset:
        return frozenset(self.app_ignored.get(channel_id, ()))

    def designated_header(self, channel_id: bytes, nonce: int) -> Optional[str]:
        entry = self.designated.get(channel_id)
        if entry and entry[0] == nonce:
            return entry[1]
        return None

    def round_header(self, state: ChannelState) -> Optional[str]:
        override = self.designated_header(state.channel_id, state.nonce)
        if override:
            return override
        if not state.members:
            return None
        return rotation_header(state.members, state.nonce, self.ignored_for(state.channel_id))

    def open_disputes(self, kind: str = None):
        return [d for d in self.disputes if d.status in ("open", "answered") and (kind is None or d.kind == kind)]

    def deposit_info(self, user: str) -> Optional[Deposit]:
        d = self.deposits.get(user)
        if d is None or d.consumed:
            return None
        return Deposit(d.user, d.amount, d.fee)

    # ------------------------------------------------------------ plumbing

    def _log(self, caller, op, args, ok, detail="", ref=None) -> CallResult:
        self.calls.append(CallRecord(self.now, caller, op, _args_digest(*args), ok, detail))
        return CallResult(ok, op, detail, ref)

    def _emit(self, kind, channel_id=ZERO_ID, **data):
        self.events.append(ContractEvent(self.now, kind, channel_id, data))

    def _kind(self, state: ChannelState) -> str:
        return "base" if state.channel_id == ZERO_ID else "group"

    def _anchor_problems(self, state: ChannelState) -> list[str]:
        """Why ``state`` cannot be trusted as a fully signed channel state."""
        if state.channel_id == ZERO_ID and state.nonce == 0:
            return [] if state.digest() == self.genesis.digest() else ["not the base genesis"]
        ign = self.ignored_for(state.channel_id)
        problems = []
        missing = missing_signers(state, set(state.members) - ign, self.directory)
        if missing:
            problems.append(f"unsigned by {missing}")
        if state.channel_id == ZERO_ID:
            absent = sorted(set(self.registry) - ign - set(state.members))
            if absent:
                problems.append(f"registered members {absent} absent")
        return problems

    def _context(self, previous, proposed, stage, proposer=None) -> ValidationContext:
        kind = self._kind(proposed)
        deposit = None
        if kind == "base" and isinstance(proposed.update, AddUserUpdate):
            deposit = self.deposit_info(proposed.update.user)
        return ValidationContext(
            previous, proposed, kind, stage, self.directory, proposer=proposer,
            known_openings=None, app_contracts=self.apps.addresses(), deposit=deposit,
            entrance_fee=self.entrance_fee, ignored=self.ignored_for(proposed.channel_id),
            round_header=self.designated_header(previous.channel_id, previous.nonce),
            child_ignored=self._child_ignored(proposed),
        )

    def _child_ignored(self, state: ChannelState) -> frozenset:
        up = state.update
        for name in ("recent_ucs", "new_ucs"):
            child = getattr(up, name, None)
            if child is not None:
                return self.app_ignored_for(child.channel_id) | self.ignored_for(child.channel_id)
        return frozenset()

    def _assess_penalty(self, accused: str, balance: int, opener: str) -> int:
        amount = int(self.penalty * balance)
        self.penalties[accused] = self.penalties.get(accused, 0) + amount
        self.owed[accused] = self.owed.get(accused, 0) + amount
        if amount:
            self.penalty_claims[opener] = self.penalty_claims.get(opener, 0) + amount
        return amount

    # ------------------------------------------------------------ funding

    def deposit(self, caller: str, amount: int, fee: int, now: int) -> CallResult:
        self.now = now
        args = (amount, fee)
        if amount <= 0 or fee <= 0:
            return self._log(caller, "deposit", args, False, "amounts must be positive")
        if caller in self.registry:
            return self._log(caller, "deposit", args, False, "already a member")
        prior = self.deposits.get(caller)
        if prior is not None and not prior.consumed:
            return self._log(caller, "deposit", args, False, "deposit already pending")
        if self.ledger.get(caller, 0) < amount + fee:
            return self._log(caller, "deposit", args, False, "insufficient ledger funds")
        self.ledger[caller] -= amount + fee
        self.escrow += amount + fee
        self.deposits[caller] = DepositRecord(caller, amount, fee, now, max(1, len(self.registry)))
        self.refunds.pop(caller, None)
        self._emit("add_request", user=caller, amount=amount, fee=fee)
        return self._log(caller, "deposit", args, True)

    def redeem_add_user(self, caller: str, previous: ChannelState, proposed: ChannelState, now: int) -> CallResult:
        self.now = now
        op, args = "redeem_add_user", (previous, proposed)
        up = proposed.update
        if not isinstance(up, AddUserUpdate) or proposed.channel_id != ZERO_ID:
            return self._log(caller, op, args, False, "not a base AddUser state")
        d = self.deposits.get(up.user)
        if d is None or d.consumed:
            return self._log(caller, op, args, False, "no deposit tuple for the user")
        if now - d.opened_at > d.n * self.delta:
            return self._log(caller, op, args, False, "redemption window closed")
        if caller not in self.registry and not (not self.registry and caller == up.user):
            return self._log(caller, op, args, False, "caller is not a member")
        problems = self._anchor_problems(previous)
        if problems:
            return self._log(caller, op, args, False, "; ".join(problems))
        ctx = self._context(previous, proposed, "final", proposer=caller)
        verdict = validate_transition(ctx) + check_stage_signatures(proposed, ctx)
        if not verdict.accepted:
            return self._log(caller, op, args, False, ",".join(verdict.rules))
        d.consumed = True
        self.registry[up.user] = up.amount
        self._emit("user_added", user=up.user, redeemer=caller, fee=d.fee)
        return self._log(caller, op, args, True)

    def request_refund(self, caller: str, now: int) -> CallResult:
        self.now = now
        d = self.deposits.get(caller)
        if d is None or d.consumed:
            return self._log(caller, "request_refund", (), False, "no deposit tuple")
        r = self.refunds.get(caller)
        if r is not None and r.status in ("pending", "cancelled"):
            return self._log(caller, "request_refund", (), False, f"refund already {r.status}")
        self.refunds[caller] = RefundRecord(caller, d.amount, d.fee, now, d.n)
        self._emit("refund_requested", user=caller)
        return self._log(caller, "request_refund", (), True)

    def cancel_refund(self, caller: str, user: str, state: ChannelState, now: int) -> CallResult:
        self.now = now
        op, args = "cancel_refund", (user, state)
        r = self.refunds.get(user)
        if r is None or r.status != "pending":
            return self._log(caller, op, args, False, "no pending refund")
        if now > r.requested_at + r.n * self.delta:
            self._emit("cancel_too_late", user=user)
            return self._log(caller, op, args, False, "cancel window closed")
        if state.channel_id != ZERO_ID or user not in state.members:
            return self._log(caller, op, args, False, "state does not show the user as a member")
        problems = self._anchor_problems(state)
        if problems:
            return self._log(caller, op, args, False, "; ".join(problems))
        r.status = "cancelled"
        self._emit("refund_cancelled", user=user)
        return self._log(caller, op, args, True)

    def withdraw_refund(self, caller: str, now: int) -> CallResult:
        self.now = now
        r = self.refunds.get(caller)
        d = self.deposits.get(caller)
        if r is None or r.status != "pending":
            return self._log(caller, "withdraw_refund", (), False, "no pending refund")
        if now <= r.requested_at + r.n * self.delta:
            return self._log(caller, "withdraw_refund", (), False, "refund window still open")
        if d is None or d.consumed:
            return self._log(caller, "withdraw_refund", (), False, "deposit already consumed")
        d.consumed = True
        r.status = "paid"
        payout = r.amount + r.fee
        self.escrow -= payout
        self.ledger[caller] = self.ledger.get(caller, 0) + payout
        self._emit("refund_paid", user=caller, amount=payout)
        return self._log(caller, "withdraw_refund", (), True)

    # ------------------------------------------------------------ leaving

    def withdraw_on_remove(self, caller: str, previous: ChannelState, removal: ChannelState, now: int) -> CallResult:
        self.now = now
        op, args = "withdraw_on_remove", (previous, removal)
        up = removal.update
        if not isinstance(up, RemoveUserUpdate) or removal.channel_id != ZERO_ID:
            return self._log(caller, op, args, False, "not a base RemoveUser state")
        if caller != up.user and caller not in self.registry:
            return self._log(caller, op, args, False, "caller may not withdraw for this user")
        if up.user not in self.registry:
            return self._log(caller, op, args, False, "user is not registered")
        if any(w.user == up.user and w.status == "pending" for w in self.withdrawals):
            return self._log(caller, op, args, False, "withdrawal already pending")
        problems = self._anchor_problems(previous)
        if problems:
            return self._log(caller, op, args, False, "; ".join(problems))
        ctx = self._context(previous, removal, "final")
        verdict = validate_transition(ctx) + check_stage_signatures(removal, ctx)
        if not verdict.accepted:
            return self._log(caller, op, args, False, ",".join(verdict.rules))
        w = WithdrawalRecord(len(self.withdrawals), up.user, up.amount, removal, now, now + self.delta)
        self.withdrawals.append(w)
        self._emit("withdrawal_requested", user=up.user, amount=up.amount, ref=w.id, state=removal)
        return self._log(caller, op, args, True, ref=w.id)

    def challenge_withdrawal(self, caller: str, ref: int, state: ChannelState, now: int) -> CallResult:
        self.now = now
        op, args = "challenge_withdrawal", (ref, state)
        if not 0 <= ref < len(self.withdrawals):
            return self._log(caller, op, args, False, "unknown withdrawal")
        w = self.withdrawals[ref]
        if w.status != "pending" or now > w.deadline:
            return self._log(caller, op, args, False, "withdrawal not challengeable")
        if state.channel_id != ZERO_ID or state.nonce <= w.state.nonce or w.user not in state.members:
            return self._log(caller, op, args, False, "state does not supersede the removal")
        problems = self._anchor_problems(state)
        if problems:
            return self._log(caller, op, args, False, "; ".join(problems))
        w.status = "voided"
        self._emit("withdrawal_voided", user=w.user, ref=ref)
        return self._log(caller, op, args, True)

    # ------------------------------------------------------------ header disputes

    def _find(self, ref: int, kind: str) -> Optional[DisputeRecord]:
        if 0 <= ref < len(self.disputes) and self.disputes[ref].kind == kind:
            return self.disputes[ref]
        return None

    def open_header_dispute(self, caller: str, previous: ChannelState, proposal: ChannelState, now: int) -> CallResult:
        self.now = now
        op, args = "open_header_dispute", (previous, proposal)
        ign = self.ignored_for(previous.channel_id)
        if caller not in previous.members or caller in ign:
            return self._log(caller, op, args, False, "opener is not an active member")
        problems = self._anchor_problems(previous)
        if problems:
            return self._log(caller, op, args, False, "; ".join(problems))
        if proposal.channel_id != previous.channel_id or proposal.nonce != previous.nonce + 1:
            return self._log(caller, op, args, False, "proposal does not follow the previous state")
        if not self.directory.verify(caller, TAG_STATE, proposal.digest(), proposal.signatures.get(caller)):
            return self._log(caller, op, args, False, "proposal not signed by the opener")
        accused = self.round_header(previous)
        if accused is None or accused == caller:
            return self._log(caller, op, args, False, "no other header to accuse")
        if any(d.channel_id == previous.channel_id and d.previous.nonce == previous.nonce
               for d in self.open_disputes("header")):
            return self._log(caller, op, args, False, "a header dispute is already open for this round")
        verdict = validate_transition(self._context(previous, proposal, "pre-header", proposer=caller))
        if not verdict.accepted:
            return self._log(caller, op, args, False, "invalid proposal: " + ",".join(verdict.rules))
        rec = DisputeRecord(len(self.disputes), "header", previous.channel_id, caller, accused, now,
                            now + self.delta, previous, proposal)
        self.disputes.append(rec)
        self._emit("header_dispute_opened", previous.channel_id, ref=rec.id, accused=accused, opener=caller,
                   proposal=proposal, previous=previous)
        return self._log(caller, op, args, True, ref=rec.id)

    def answer_header_dispute(self, caller: str, ref: int, predecessor: ChannelState, endorsed: ChannelState,
                              now: int) -> CallResult:
        self.now = now
        op, args = "answer_header_dispute", (ref, predecessor, endorsed)
        rec = self._find(ref, "header")
        if rec is None or rec.status != "open":
            return self._log(caller, op, args, False, "no open header dispute")
        if caller != rec.accused:
            return self._log(caller, op, args, False, "only the accused header may answer")
        if now > rec.deadline:
            return self._log(caller, op, args, False, "answer after the deadline")
        if not self.directory.verify(caller, TAG_STATE, endorsed.digest(), endorsed.signatures.get(caller)):
            return self._log(caller, op, args, False, "answer not endorsed by the header")
        problems = self._anchor_problems(predecessor)
        if problems or endorsed.channel_id != rec.channel_id or endorsed.nonce != predecessor.nonce + 1:
            return self._log(caller, op, args, False, "answer is not a successor of a signed state")
        if not validate_transition(self._context(predecessor, endorsed, "post-header")).accepted:
            return self._log(caller, op, args, False, "answer is not a valid transition")
        rec.status = "answered"
        rec.answer = endorsed
        rec.challenge_deadline = now + self.delta
        self._emit("header_dispute_answered", rec.channel_id, ref=ref, endorsed=endorsed, opener=rec.opener)
        return self._log(caller, op, args, True, ref=ref)

    def challenge_header_answer(self, caller: str, ref: int, state: ChannelState, now: int) -> CallResult:
        self.now = now
        op, args = "challenge_header_answer", (ref, state)
        rec = self._find(ref, "header")
        if rec is None or rec.status != "answered" or now > rec.challenge_deadline:
            return self._log(caller, op, args, False, "answer not challengeable")
        ans = rec.answer
        stale = (state.channel_id == rec.channel_id and ans.nonce <= state.nonce <= rec.previous.nonce
                 and state.digest() != ans.digest())
        if not stale or self._anchor_problems(state):
            return self._log(caller, op, args, False, "challenge does not prove the answer stale")
        self._expire_header(rec, "voided")
        return self._log(caller, op, args, True, ref=ref)

    def _expire_header(self, rec: DisputeRecord, status: str):
        rec.status = status
        prev = rec.previous
        bal = prev.ucs.balances().get(rec.accused, 0)
        amount = self._assess_penalty(rec.accused, bal, rec.opener)
        skip = self.ignored_for(rec.channel_id) | {rec.accused}
        nxt = rotation_header(prev.members, prev.nonce + 1, skip)
        self.designated[rec.channel_id] = (prev.nonce, nxt)
        self._emit("header_replaced", rec.channel_id, ref=rec.id, accused=rec.accused, penalty=amount,
                   next_header=nxt, nonce=prev.nonce)

    # ------------------------------------------------------------ member disputes

    def open_member_dispute(self, caller: str, previous: ChannelState, proposal: ChannelState, accused: str,
                            now: int) -> CallResult:
        self.now = now
        op, args = "open_member_dispute", (previous, proposal, accused)
        ign = self.ignored_for(previous.channel_id)
        if caller not in set(previous.members) | set(proposal.members) or caller in ign:
            return self._log(caller, op, args, False, "opener is not an active member")
        problems = self._anchor_problems(previous)
        if problems:
            return self._log(caller, op, args, False, "; ".join(problems))
        if proposal.channel_id != previous.channel_id or proposal.nonce != previous.nonce + 1:
            return self._log(caller, op, args, False, "proposal does not follow the previous state")
        ctx = self._context(previous, proposal, "post-header")
        verdict = validate_transition(ctx) + check_stage_signatures(proposal, ctx)
        if not verdict.accepted:
            return self._log(caller, op, args, False, "invalid proposal: " + ",".join(verdict.rules))
        final = ValidationContext(previous, proposal, ctx.channel_kind, "final", self.directory,
                                  ignored=ign, child_ignored=ctx.child_ignored)
        if accused not in required_signers(final) or accused in proposal.signatures:
            return self._log(caller, op, args, False, "accused owes no signature")
        if any(d.channel_id == previous.channel_id and d.accused == accused for d in self.open_disputes("member")):
            return self._log(caller, op, args, False, "dispute already open")
        rec = DisputeRecord(len(self.disputes), "member", previous.channel_id, caller, accused, now,
                            now + self.delta, previous, proposal)
        self.disputes.append(rec)
        self._emit("member_dispute_opened", previous.channel_id, ref=rec.id, accused=accused, opener=caller,
                   proposal=proposal, previous=previous)
        return self._log(caller, op, args, True, ref=rec.id)

    def answer_member_dispute(self, caller: str, ref: int, signature: bytes, ucs_signature: bytes,
                              now: int) -> CallResult:
        self.now = now
        op, args = "answer_member_dispute", (ref, signature)
        rec = self._find(ref, "member")
        if rec is None or rec.status != "open" or caller != rec.accused or now > rec.deadline:
            return self._log(caller, op, args, False, "no answerable dispute")
        prop = rec.proposal
        ok = (self.directory.verify(caller, TAG_STATE, prop.digest(), signature)
              and self.directory.verify(caller, TAG_UCS, ucs_hash(prop.ucs), ucs_signature))
        if not ok:
            return self._log(caller, op, args, False, "signature does not verify")
        rec.status = "answered"
        rec.answer = prop.with_signatures({caller: signature}, {caller: ucs_signature})
        self._emit("member_dispute_answered", rec.channel_id, ref=ref, accused=caller, state=rec.answer,
                   opener=rec.opener)
        return self._log(caller, op, args, True, ref=ref)

    def challenge_member_dispute(self, caller: str, ref: int, state: ChannelState, now: int) -> CallResult:
        self.now = now
        op, args = "challenge_member_dispute", (ref, state)
        rec = self._find(ref, "member")
        if rec is None or rec.status != "open" or now > rec.deadline:
            return self._log(caller, op, args, False, "dispute not challengeable")
        stale = (state.channel_id == rec.channel_id and state.nonce >= rec.proposal.nonce
                 and state.digest() != rec.proposal.digest())
        if not stale or self._anchor_problems(state):
            return self._log(caller, op, args, False, "challenge does not prove the proposal stale")
        rec.status = "dismissed"
        self._emit("member_dispute_dismissed", rec.channel_id, ref=ref)
        return self._log(caller, op, args, True, ref=ref)

    def _expire_member(self, rec: DisputeRecord):
        rec.status = "expired"
        self.ignored.setdefault(rec.channel_id, set()).add(rec.accused)
        bal = rec.previous.ucs.balances().get(rec.accused, 0)
        amount = self._assess_penalty(rec.accused, bal, rec.opener)
        self._emit("member_expelled", rec.channel_id, ref=rec.id, accused=rec.accused, penalty=amount)

    # ------------------------------------------------------------ app disputes

    def open_app_dispute(self, caller: str, genesis: DemoAppState, latest: DemoAppState, proposal: DemoAppState,
                         accused: str, now: int) -> CallResult:
        self.now = now
        op, args = "open_app_dispute", (genesis, latest, proposal, accused)
        address = genesis.ucs.contract_address
        if address not in self.apps:
            return self._log(caller, op, args, False, "unknown app contract")
        app_def = self.apps.get(address)
        try:
            expected = app_def.genesis(genesis.ucs)
        except Exception as exc:  # malformed opening UCS
            return self._log(caller, op, args, False, f"bad opening state: {exc}")
        if expected.digest() != genesis.digest() or app_missing_signers(genesis, self.directory):
            return self._log(caller, op, args, False, "opening state not signed by every player")
        cid = genesis.channel_id
        self.app_members.setdefault(cid, genesis.members)
        skip = self.app_ignored_for(cid)
        if latest.channel_id != cid or latest.members != genesis.members:
            return self._log(caller, op, args, False, "latest state belongs to another channel")
        if latest.nonce > 0 and app_missing_signers(latest, self.directory, skip):
            return self._log(caller, op, args, False, "latest state is not fully signed")
        if latest.nonce == 0 and latest.digest() != genesis.digest():
            return self._log(caller, op, args, False, "latest state is not fully signed")
        verdict = app_def.validate_app_transition(latest, proposal, skip)
        if not verdict.accepted:
            return self._log(caller, op, args, False, "invalid proposal: " + ",".join(verdict.rules))
        if not self.directory.verify(caller, TAG_STATE, proposal.digest(), proposal.signatures.get(caller)):
            return self._log(caller, op, args, False, "proposal not signed by the opener")
        if accused == caller or accused not in genesis.members or accused in skip or accused in proposal.signatures:
            return self._log(caller, op, args, False, "accused owes no signature")
        rec = DisputeRecord(len(self.disputes), "app", cid, caller, accused, now, now + self.delta,
                            latest, proposal, genesis=genesis)
        self.disputes.append(rec)
        self._emit("app_dispute_opened", cid, ref=rec.id, accused=accused, opener=caller, proposal=proposal,
                   previous=latest)
        return self._log(caller, op, args, True, ref=rec.id)

    def answer_app_dispute(self, caller: str, ref: int, signature: bytes, ucs_signature: bytes,
                           fin_signature: Optional[bytes], now: int) -> CallResult:
        self.now = now
        op, args = "answer_app_dispute", (ref, signature)
        rec = self._find(ref, "app")
        if rec is None or rec.status != "open" or caller != rec.accused or now > rec.deadline:
            return self._log(caller, op, args, False, "no answerable dispute")
        prop = rec.proposal
        ok = (self.directory.verify(caller, TAG_STATE, prop.digest(), signature)
              and self.directory.verify(caller, TAG_UCS, ucs_hash(prop.ucs), ucs_signature))
        if ok and prop.finalisability.finalisable:
            ok = self.directory.verify(caller, TAG_FIN, prop.finalisability.digest(), fin_signature)
        if not ok:
            return self._log(caller, op, args, False, "signature does not verify")
        rec.status = "answered"
        fins = {caller: fin_signature} if fin_signature else {}
        rec.answer = prop.with_signatures({caller: signature}, {caller: ucs_signature}, fins)
        self._emit("app_dispute_answered", rec.channel_id, ref=ref, accused=caller, state=rec.answer,
                   opener=rec.opener)
        return self._log(caller, op, args, True, ref=ref)

    def _expire_app(self, rec: DisputeRecord):
        rec.status = "expired"
        self.app_ignored.setdefault(rec.channel_id, set()).add(rec.accused)
        bal = rec.previous.ucs.balances().get(rec.accused, 0)
        amount = self._assess_penalty(rec.accused, bal, rec.opener)
        self.app_rulings[rec.channel_id] = rec.previous
        self._emit("app_ruled", rec.channel_id, ref=rec.id, accused=rec.accused, penalty=amount,
                   ruling=rec.previous)

    # ------------------------------------------------------------ time

    def tick(self, now: int) -> None:
        """Apply every deadline that has passed by ``now``."""
        self.now = now
        for rec in self.disputes:
            if rec.status == "open" and now > rec.deadline:
                if rec.kind == "header":
                    self._expire_header(rec, "expired")
                elif rec.kind == "member":
                    self._expire_member(rec)
                else:
                    self._expire_app(rec)
            elif rec.status == "answered" and rec.kind == "header" and now > rec.challenge_deadline:
                rec.status = "resolved"
                self._emit("header_dispute_resolved", rec.channel_id, ref=rec.id)
            elif rec.status == "answered" and rec.kind != "header":
                rec.status = "resolved"
        for w in self.withdrawals:
            if w.status == "pending" and now > w.deadline:
                take = min(self.owed.get(w.user, 0), w.amount)
                payout = w.amount - take
                if take:
                    self.owed[w.user] -= take
                    self.pool += take
                self.escrow -= payout
                self.ledger[w.user] = self.ledger.get(w.user, 0) + payout
                self.registry.pop(w.user, None)
                w.status = "paid"
                self._emit("withdrawal_paid", user=w.user, amount=payout, collected=take)

    def distribute_pool(self) -> dict[str, int]:
        """Pay collected penalties to dispute openers pro rata to the penalties they triggered."""
        total = sum(self.penalty_claims.values())
        paid = {}
        if not self.pool or not total:
            return paid
        remaining = self.pool
        claimants = sorted(self.penalty_claims)
        for i, who in enumerate(claimants):
            share = remaining if i == len(claimants) - 1 else self.pool * self.penalty_claims[who] // total
            share = min(share, remaining)
            remaining -= share
            paid[who] = share
            self.ledger[who] = self.ledger.get(who, 0) + share
        self.escrow -= self.pool
        self.pool = 0
        self._emit("pool_distributed", shares=paid)
        return paid

    def pop_events(self) -> list[ContractEvent]:
        out, self.events = self.events, []
        return out
