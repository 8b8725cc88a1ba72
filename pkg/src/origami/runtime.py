"""Per-party protocol engine.

A :class:`Party` is a single-threaded state machine. Each simulated round it
consumes the messages and contract events delivered to it, applies scripted
actions, advances its timers and returns its effects (messages to send and
contract calls to submit). It never touches another party or mutates the
contract directly, so parties can be stepped in parallel.

Propagation of one update on a supporting channel runs in up to three legs:
pre-signatures from child participants, the round header's endorsement, and
countersignatures from every other member, after which the proposer
broadcasts the fully signed state.
"""
from __future__ import annotations

import hashlib
import math
from collections import defaultdict
from dataclasses import dataclass, field, replace
from typing import Optional

from . import accumulator as acc
from .app import AppRegistry, DemoAppState, app_missing_signers
from .errors import ProtocolError
from .signing import TAG_FIN, TAG_MSG, TAG_UCS, Directory, Signer
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
    ucs_hash,
    variety,
)
from .transitions import (
    base_genesis,
    build_add_user,
    build_close,
    build_edit,
    build_open,
    build_remove_user,
    child_genesis,
    new_child_ucs,
)
from .validation import (
    SIGNATURE_RULES,
    Deposit,
    ValidationContext,
    check_stage_signatures,
    required_signers,
    validate_transition,
)

BEHAVIORS = ("silent", "forge", "alter-amounts", "stale-post", "double-redeem", "refund-while-member")


# ---------------------------------------------------------------- messages

def _fingerprint(value) -> bytes:
    h = hashlib.sha256()
    if isinstance(value, (ChannelState, DemoAppState)):
        h.update(value.digest())
        for attr in ("signatures", "ucs_signatures", "fin_signatures"):
            sigs = getattr(value, attr, None) or {}
            for k in sorted(sigs):
                h.update(k.encode() + sigs[k])
    elif isinstance(value, Ucs):
        h.update(ucs_hash(value))
    elif isinstance(value, bytes):
        h.update(value)
    elif isinstance(value, dict):
        for k in sorted(value):
            h.update(str(k).encode() + _fingerprint(value[k]))
    elif isinstance(value, (list, tuple)):
        for v in value:
            h.update(_fingerprint(v))
    else:
        h.update(repr(value).encode())
    return h.digest()


@dataclass(frozen=True)
class Message:
    sender: str
    recipient: str
    kind: str
    channel_id: bytes
    body: dict
    seq: int
    signature: bytes = b""

    def digest(self) -> bytes:
        head = f"{self.kind}|{self.sender}|{self.recipient}|{self.seq}|".encode()
        return hashlib.sha256(head + self.channel_id + _fingerprint(self.body)).digest()


@dataclass(frozen=True)
class Call:
    caller: str
    op: str
    kwargs: dict
    seq: int


@dataclass
class Effects:
    messages: list = field(default_factory=list)
    calls: list = field(default_factory=list)
    notes: list = field(default_factory=list)
    labels: dict = field(default_factory=dict)


@dataclass(frozen=True)
class RuntimeConfig:
    params: acc.GroupParams
    directory: Directory
    apps: AppRegistry
    delta: int = 10
    entrance_fee: int = 1
    header_timeout: int = 2
    member_timeout: int = 2
    autoplay: bool = True


# ---------------------------------------------------------------- views

@dataclass
class ChildRecord:
    ucs: Ucs
    element: acc.AccElement
    witness: Optional[acc.MembershipWitness]
    kind: str


@dataclass
class View:
    channel_id: bytes
    kind: str  # base | group | app
    parent_id: Optional[bytes]
    latest: object
    history: list
    children: dict = field(default_factory=dict)
    genesis: object = None
    closed: bool = False
    label: str = ""

    @property
    def members(self):
        return self.latest.members


@dataclass
class Intent:
    kind: str
    args: dict
    tries: int = 0


@dataclass
class Flow:
    channel_id: bytes
    intent: Optional[Intent]
    state: object
    previous: object
    phase: str
    since: int
    presigners: set = field(default_factory=set)
    header: Optional[str] = None
    disputed: set = field(default_factory=set)
    header_dispute: Optional[int] = None
    genesis: bool = False
    extra: dict = field(default_factory=dict)


@dataclass
class JoinPlan:
    amount: int
    fee: int
    via: Optional[str]
    deposited_at: int
    window: int
    refund_at: Optional[int] = None
    done: bool = False


class Party:
    def __init__(self, address: str, signer: Signer, cfg: RuntimeConfig, behaviors=(), labels=None):
        self.address = address
        self.signer = signer
        self.cfg = cfg
        self.behaviors = set(behaviors)
        self.armed_from = 0
        self.old_removals: list = []
        self.labels = labels if labels is not None else {}
        self.views: dict[bytes, View] = {}
        self.flows: dict[bytes, Flow] = {}
        self.intents: dict[bytes, list] = defaultdict(list)
        self.silent_until = -1
        self.was_silent = False
        self.join: Optional[JoinPlan] = None
        self.joined_previous: dict[bytes, tuple] = {}
        self.countersigned: dict[tuple, tuple] = {}
        self.endorsed: dict[tuple, object] = {}
        self.header_inbox: dict[bytes, list] = defaultdict(list)
        self.fin_collect: dict[bytes, dict] = {}
        self.pending_children: dict[bytes, tuple] = {}
        self.seq = 0
        self.now = 0
        self.chain = None
        self.fx = Effects()
        self.handled_events: set = set()
        self.redeemed: list = []
        self.group_join_wants: dict[bytes, int] = {}

    # ------------------------------------------------------------ plumbing

    def __repr__(self):
        return f"Party({self.address!r})"

    def _active(self, behavior: str) -> bool:
        return behavior in self.behaviors and self.now >= self.armed_from

    @property
    def silent(self) -> bool:
        return self.now < self.silent_until or self._active("silent")

    def _next_seq(self) -> int:
        self.seq += 1
        return self.seq

    def send(self, to: str, kind: str, channel_id: bytes, **body):
        if to == self.address:
            return
        msg = Message(self.address, to, kind, channel_id, body, self._next_seq())
        sig = self.signer.sign(TAG_MSG, msg.digest())
        self.fx.messages.append(replace(msg, signature=sig))

    def call(self, op: str, **kwargs):
        self.fx.calls.append(Call(self.address, op, kwargs, self._next_seq()))

    def note(self, what: str, /, **detail):
        self.fx.notes.append((what, detail))

    def label(self, cid: bytes) -> str:
        return self.labels.get(cid, cid.hex()[:8])

    def _ignored(self, view: View) -> frozenset:
        if view.kind == "app":
            return self.chain.app_ignored_for(view.channel_id)
        return self.chain.ignored_for(view.channel_id)

    def _child_ignored(self, child_id: bytes) -> frozenset:
        return self.chain.app_ignored_for(child_id) | self.chain.ignored_for(child_id)

    # ------------------------------------------------------------ entry point

    def step(self, now: int, messages, events, actions, chain) -> Effects:
        self.now = now
        self.chain = chain
        self.fx = Effects()
        for act in actions:
            if act["action"] == "go_silent":
                self.silent_until = now + int(act.get("args", {}).get("rounds", 1))
                self.note("silent", until=self.silent_until)
        if self.silent:
            self.was_silent = True
            if messages or events:
                self.note("dropped-while-silent", messages=len(messages), events=len(events))
            return self.fx
        if self.was_silent:
            self.was_silent = False
            self._wake()
        for ev in events:
            self._on_event(ev)
        for msg in messages:
            self._on_message(msg)
        self._run_header_duty()
        for act in actions:
            if act["action"] != "go_silent":
                self._apply_action(act)
        self._timers()
        for cid in sorted(self.views):
            self._pump(cid)
        return self.fx

    # ------------------------------------------------------------ validation helpers

    def _ctx(self, view: View, prev, new, stage: str, proposer=None) -> ValidationContext:
        deposit = None
        if view.kind == "base" and isinstance(new.update, AddUserUpdate):
            deposit = self._deposit_record(new.update.user)
        committed = frozenset().union(*[set(r.ucs.members) for r in view.children.values()]) \
            if view.children else frozenset()
        child_ignored = frozenset()
        up = new.update
        for name in ("recent_ucs", "new_ucs"):
            child = getattr(up, name, None)
            if child is not None and not isinstance(up, OpenUpdate):
                child_ignored = self._child_ignored(child.channel_id)
        return ValidationContext(
            prev, new, view.kind, stage, self.cfg.directory, proposer=proposer,
            known_openings={cid: ucs_hash(r.ucs) for cid, r in view.children.items()},
            app_contracts=self.cfg.apps.addresses(), deposit=deposit,
            entrance_fee=self.cfg.entrance_fee, ignored=self._ignored(view),
            round_header=self.chain.designated_header(view.channel_id, prev.nonce),
            child_ignored=child_ignored, committed_members=committed,
        )

    def _deposit_record(self, user: str) -> Optional[Deposit]:
        # Established AddUser states are checked after redemption too, so a
        # consumed record still counts here.
        d = self.chain.deposits.get(user)
        return Deposit(d.user, d.amount, d.fee) if d is not None else None

    def _check(self, view: View, prev, new, stage: str, proposer=None):
        """Returns the list of violated rule ids (empty when acceptable)."""
        if view.kind == "app":
            app_def = self.cfg.apps.get(view.genesis.ucs.contract_address)
            skip = self._ignored(view)
            rules = list(app_def.validate_app_transition(prev, new, skip).rules)
            if stage == "final":
                need = set(new.members) - set(skip)
            elif stage == "post-header" and app_def.mode == "header":
                need = {app_def.round_header(prev, skip), new.last_mover}
            else:
                need = {new.last_mover}
            missing = app_missing_signers(new, self.cfg.directory, skip, stage_signers=need)
            if missing:
                rules.append("missing-signature")
            return rules
        ctx = self._ctx(view, prev, new, stage, proposer)
        verdict = validate_transition(ctx) + check_stage_signatures(new, ctx)
        return list(verdict.rules)

    def _round_header(self, view: View) -> Optional[str]:
        if view.kind == "app":
            app_def = self.cfg.apps.get(view.genesis.ucs.contract_address)
            if app_def.mode == "turn":
                return None
            return app_def.round_header(view.latest, self._ignored(view))
        return self.chain.round_header(view.latest)

    def _final_signers(self, view: View, prev, new) -> set:
        if view.kind == "app":
            return set(new.members) - set(self._ignored(view))
        return required_signers(self._ctx(view, prev, new, "final"))

    # ------------------------------------------------------------ adoption

    def _adopt(self, view: View, state, source: str = "") -> bool:
        """Validate ``state`` as the successor of the latest state and store it."""
        prev = view.latest
        if state.nonce != prev.nonce + 1:
            return False
        rules = self._check(view, prev, state, "final")
        if rules:
            self.note("rejected-established", channel=self.label(view.channel_id), nonce=state.nonce,
                      rules=sorted(set(rules)), source=source)
            return False
        self._install(view, state)
        return True

    def _install(self, view: View, state):
        prev = view.latest
        view.latest = state
        view.history.append(state)
        self.note("established", channel=self.label(view.channel_id), nonce=state.nonce,
                  variety=variety(state.update) if isinstance(state, ChannelState) else "app-move",
                  digest=state.digest().hex()[:16])
        if isinstance(state, ChannelState):
            self._update_children(view, prev, state)
        self._after_established(view, prev, state)
        flow = self.flows.get(view.channel_id)
        if flow is not None and flow.state.nonce <= state.nonce:
            del self.flows[view.channel_id]
            if flow.state.digest() != state.digest() and flow.intent is not None:
                flow.intent.tries += 1
                if flow.intent.tries < 8:
                    self.intents[view.channel_id].insert(0, flow.intent)
                self.note("rebase", channel=self.label(view.channel_id), intent=flow.intent.kind)

    def _update_children(self, view: View, prev: ChannelState, state: ChannelState):
        params = self.cfg.params
        up = state.update
        if isinstance(up, OpenUpdate):
            elem = acc.hash_to_prime(up.new_ucs_hash)
            for rec in view.children.values():
                if rec.witness is not None:
                    rec.witness = acc.update_witness_on_add(rec.witness, elem)
            w = None
            if self.address in up.new_ucs.members:
                w = acc.MembershipWitness(params, prev.openings.value, elem, state.openings.epoch)
            kind = "group" if up.new_ucs.contract_address == MANAGEMENT_CONTRACT else "app"
            view.children[up.new_ucs.channel_id] = ChildRecord(up.new_ucs, elem, w, kind)
            if self.address in up.new_ucs.members:
                self.pending_children[up.new_ucs.channel_id] = (view.channel_id, up.new_ucs, kind)
                if up.new_ucs.members[0] == self.address:
                    self._create_child_genesis(view, up.new_ucs, kind)
        elif isinstance(up, CloseUpdate):
            cid = up.last_committed_ucs.channel_id
            elem = acc.hash_to_prime(up.last_committed_ucs_hash)
            view.children.pop(cid, None)
            for rec in view.children.values():
                if rec.witness is not None:
                    rec.witness = acc.update_witness_on_delete(rec.witness, elem, state.openings)
            child = self.views.get(cid)
            if child is not None:
                child.closed = True
            self.fin_collect.pop(cid, None)
        elif isinstance(up, EditUpdate):
            cid = up.new_ucs.channel_id
            old = acc.hash_to_prime(up.last_committed_ucs_hash)
            new = acc.hash_to_prime(up.new_ucs_hash)
            mid_value = acc.swap_intermediate(prev.openings.value, state.openings.value, old, new, params)
            mid = acc.Accumulator(params, mid_value, prev.openings.epoch + 1)
            rec = view.children.pop(cid, None)
            for other in view.children.values():
                if other.witness is not None:
                    w = acc.update_witness_on_delete(other.witness, old, mid)
                    other.witness = acc.update_witness_on_add(w, new)
            w = None
            if self.address in up.new_ucs.members:
                w = acc.MembershipWitness(params, mid_value, new, state.openings.epoch)
            view.children[cid] = ChildRecord(up.new_ucs, new, w, rec.kind if rec else "group")

    def _after_established(self, view: View, prev, state):
        if not isinstance(state, ChannelState):
            return
        up = state.update
        me = self.address
        if isinstance(up, AddUserUpdate) and view.kind == "base":
            if self._proposed_by_me(view, state):
                self.call("redeem_add_user", previous=prev, proposed=state)
                self.redeemed.append((prev, state))
            if up.user == me and self.join is not None:
                self.join.done = True
        elif isinstance(up, AddUserUpdate) and view.kind == "group":
            if self._proposed_by_me(view, state):
                self._queue(view.parent_id, Intent("edit", {"child": view.channel_id}))
        elif isinstance(up, RemoveUserUpdate):
            if up.user == me and view.kind == "base":
                self.call("withdraw_on_remove", previous=prev, removal=state)
                self.old_removals.append((prev, state))
                view.closed = True
            elif up.user == me and view.kind == "group":
                self._queue(view.parent_id, Intent("edit", {"child": view.channel_id, "leaver": True}))
                view.closed = True

    def _proposed_by_me(self, view: View, state) -> bool:
        flow = self.flows.get(view.channel_id)
        return flow is not None and flow.state.digest() == state.digest()

    def _queue(self, cid: bytes, intent: Intent):
        if cid is None:
            return
        self.intents[cid].append(intent)

    # ------------------------------------------------------------ child genesis

    def _deterministic_genesis(self, ucs0: Ucs, kind: str):
        if kind == "app":
            return self.cfg.apps.get(ucs0.contract_address).genesis(ucs0)
        return child_genesis(ucs0, self.cfg.params)

    def _create_child_genesis(self, parent: View, ucs0: Ucs, kind: str):
        state = self._deterministic_genesis(ucs0, kind).signed_by(self.signer)
        flow = Flow(ucs0.channel_id, None, state, None, "countersign", self.now, genesis=True,
                    extra={"parent": parent.channel_id, "kind": kind})
        self.flows[ucs0.channel_id] = flow
        self.note("child-genesis", channel=self.label(ucs0.channel_id), kind=kind)
        self._request_countersign(flow)
        self._maybe_finish(flow)

    def _open_child_view(self, cid: bytes, state):
        parent_id, ucs0, kind = self.pending_children.pop(cid)
        view = View(cid, kind, parent_id, state, [state], genesis=state, label=self.label(cid))
        self.views[cid] = view
        self.note("child-ready", channel=self.label(cid), kind=kind)

    # ------------------------------------------------------------ messages

    def _on_message(self, msg: Message):
        if not self.cfg.directory.verify(msg.sender, TAG_MSG, msg.digest(), msg.signature):
            self.note("dropped", reason="bad-message-signature", sender=msg.sender, kind=msg.kind)
            return
        handler = getattr(self, "_msg_" + msg.kind, None)
        if handler is None:
            self.note("dropped", reason="unknown-kind", sender=msg.sender, kind=msg.kind)
            return
        handler(msg)

    def _member_view(self, msg: Message) -> Optional[View]:
        view = self.views.get(msg.channel_id)
        if view is None or view.closed:
            self.note("dropped", reason="no-channel", sender=msg.sender, kind=msg.kind)
            return None
        members = set(view.latest.members)
        if msg.sender not in members:
            self.note("dropped", reason="non-member", sender=msg.sender, kind=msg.kind)
            return None
        return view

    def _msg_join_request(self, msg: Message):
        view = self.views.get(ZERO_ID)
        d = self.chain.deposit_info(msg.sender)
        if view is None or d is None or msg.sender in view.members:
            self.note("dropped", reason="no-deposit", sender=msg.sender, kind=msg.kind)
            return
        amount, fee = d.amount, d.fee
        if self._active("alter-amounts"):
            amount, fee = amount - max(1, amount // 10), fee + max(1, amount // 10)
        self._queue(ZERO_ID, Intent("add_user", {"user": msg.sender, "amount": amount, "fee": fee}))

    def _msg_group_join_request(self, msg: Message):
        view = self.views.get(msg.channel_id)
        if view is None or view.closed or view.kind != "group":
            self.note("dropped", reason="no-channel", sender=msg.sender, kind=msg.kind)
            return
        parent = self.views.get(view.parent_id)
        if parent is None or msg.sender not in parent.members:
            self.note("dropped", reason="non-member", sender=msg.sender, kind=msg.kind)
            return
        amount = int(msg.body["amount"])
        self._queue(msg.channel_id, Intent("add_user", {"user": msg.sender, "amount": amount,
                                                        "fee": self.cfg.entrance_fee}))

    def _msg_presign_request(self, msg: Message):
        view = self._member_view(msg)
        if view is None:
            return
        state = msg.body["state"]
        prev = view.latest
        if state.nonce != prev.nonce + 1:
            self.note("refused", reason="stale-nonce", channel=self.label(view.channel_id))
            return
        rules = validate_transition(self._ctx(view, prev, state, "pre-header", proposer=msg.sender)).rules
        if rules or not self._agree_child(state):
            self.note("refused", reason="invalid", rules=sorted(set(rules)), channel=self.label(view.channel_id))
            return
        reply = {"digest": state.digest(), "sig": state.signed_by(self.signer).signatures[self.address],
                 "ucs_sig": self.signer.sign(TAG_UCS, ucs_hash(state.ucs))}
        if isinstance(state.update, OpenUpdate):
            reply["child_sig"] = self.signer.sign(TAG_UCS, state.update.new_ucs_hash)
        self.send(msg.sender, "presign_reply", msg.channel_id, **reply)

    def _agree_child(self, state: ChannelState) -> bool:
        up = state.update
        if isinstance(up, CloseUpdate):
            child = self.views.get(up.recent_ucs.channel_id)
            return child is not None and child.latest.ucs == up.recent_ucs
        return True

    def _msg_presign_reply(self, msg: Message):
        flow = self.flows.get(msg.channel_id)
        if flow is None or flow.phase != "presign" or msg.body["digest"] != flow.state.digest():
            return
        if msg.sender not in flow.presigners:
            self.note("dropped", reason="unexpected-signer", sender=msg.sender, kind=msg.kind)
            return
        st = flow.state.with_signatures({msg.sender: msg.body["sig"]}, {msg.sender: msg.body["ucs_sig"]})
        if "child_sig" in msg.body and isinstance(st.update, OpenUpdate):
            up = st.update
            st = replace(st, update=replace(up, new_ucs_signatures={**up.new_ucs_signatures,
                                                                     msg.sender: msg.body["child_sig"]}))
        flow.state = st
        view = self.views[msg.channel_id]
        if not self._check(view, flow.previous, st, "pre-header"):
            self._to_header(flow)

    def _msg_proposal(self, msg: Message):
        view = self._member_view(msg)
        if view is None:
            return
        self.header_inbox[msg.channel_id].append(msg)

    def _run_header_duty(self):
        for cid in sorted(self.header_inbox):
            msgs = self.header_inbox.pop(cid)
            view = self.views.get(cid)
            if view is None or self._round_header(view) != self.address:
                continue
            if self._active("stale-post") and any(k[0] == cid for k in self.endorsed):
                self.note("adversary", behavior="stale-post", what="withholding endorsement")
                continue
            prev = view.latest
            key = (cid, prev.nonce + 1)
            winner = self.endorsed.get(key)
            losers = []
            for msg in msgs:
                state = msg.body["state"]
                if winner is not None:
                    if state.digest() != winner.digest():
                        losers.append(msg.sender)
                    continue
                if state.nonce != prev.nonce + 1:
                    continue
                if self._check(view, prev, state, "pre-header", proposer=msg.sender):
                    self.note("header-refused", channel=self.label(cid), proposer=msg.sender)
                    continue
                winner = state.signed_by(self.signer)
                self.endorsed[key] = winner
                self.note("endorsed", channel=self.label(cid), nonce=winner.nonce, proposer=msg.sender)
                self.send(msg.sender, "endorsed", cid, state=winner)
            for who in sorted(set(losers)):
                self.send(who, "chosen_alternative", cid, state=winner)

    def _msg_endorsed(self, msg: Message):
        flow = self.flows.get(msg.channel_id)
        state = msg.body["state"]
        if flow is None or flow.phase not in ("header", "header-dispute") or state.digest() != flow.state.digest():
            return
        if msg.sender != flow.header:
            self.note("dropped", reason="not-round-header", sender=msg.sender, kind=msg.kind)
            return
        self._endorsed(flow, state)

    def _endorsed(self, flow: Flow, state):
        view = self.views[flow.channel_id]
        if self._check(view, flow.previous, state, "post-header"):
            self.note("bad-endorsement", channel=self.label(flow.channel_id))
            return
        merged = state.with_signatures(flow.state.signatures, flow.state.ucs_signatures)
        flow.state = merged
        flow.phase = "countersign"
        flow.since = self.now
        self._request_countersign(flow)
        self._maybe_finish(flow)

    def _msg_chosen_alternative(self, msg: Message):
        flow = self.flows.get(msg.channel_id)
        if flow is None or flow.phase not in ("header", "header-dispute") or msg.sender != flow.header:
            return
        state = msg.body["state"]
        if state.nonce != flow.state.nonce:
            return
        self.note("lost-round", channel=self.label(msg.channel_id), nonce=state.nonce)
        # Keep the flow parked; it is rebased once the alternative is established.
        flow.phase = "lost"
        flow.since = self.now

    def _children_for_joiner(self, view: View) -> tuple:
        return tuple((cid, rec.ucs) for cid, rec in sorted(view.children.items()))

    def _request_countersign(self, flow: Flow):
        view = self.views.get(flow.channel_id)
        if flow.genesis:
            need = set(flow.state.members) - {self.address}
            prev = None
        else:
            need = self._final_signers(view, flow.previous, flow.state) - set(flow.state.signatures)
            prev = flow.previous
        body = {"state": flow.state, "previous": prev}
        if view is not None and view.kind != "app" and isinstance(flow.state.update, AddUserUpdate):
            body["children"] = self._children_for_joiner(view)
        for who in sorted(need):
            self.send(who, "countersign_request", flow.channel_id, **body)

    def _msg_countersign_request(self, msg: Message):
        state, prev = msg.body["state"], msg.body.get("previous")
        cid = msg.channel_id
        if prev is None:
            self._countersign_genesis(msg, state)
            return
        view = self.views.get(cid)
        if (view is None or view.closed) and isinstance(state, ChannelState) \
                and isinstance(state.update, AddUserUpdate) and state.update.user == self.address:
            view = self._joiner_view(msg, prev)
            if view is None:
                return
        elif view is None or view.closed or msg.sender not in set(view.latest.members) | set(state.members):
            self.note("dropped", reason="non-member", sender=msg.sender, kind=msg.kind)
            return
        if prev.nonce != view.latest.nonce or prev.digest() != view.latest.digest():
            if prev.nonce > view.latest.nonce:
                self._sync(view)
            self.note("refused", reason="different-previous", channel=self.label(cid))
            return
        key = (cid, state.nonce)
        signed = self.countersigned.get(key)
        header = (self._round_header(view), self._ignored(view))
        if signed and signed[0] != state.digest() and signed[1] == header:
            self.note("refused", reason="double-sign", channel=self.label(cid))
            return
        rules = self._check(view, prev, state, "post-header", proposer=msg.sender)
        if rules:
            self.note("refused", reason="invalid", rules=sorted(set(rules)), channel=self.label(cid))
            return
        self.countersigned[key] = (state.digest(), header)
        mine = state.signed_by(self.signer)
        reply = {"digest": state.digest(), "sig": mine.signatures[self.address],
                 "ucs_sig": mine.ucs_signatures[self.address]}
        if isinstance(state, DemoAppState) and state.finalisability.finalisable:
            reply["fin_sig"] = mine.fin_signatures[self.address]
        self.send(msg.sender, "signature_reply", cid, **reply)
        if self._active("refund-while-member") and isinstance(state, ChannelState) \
                and isinstance(state.update, AddUserUpdate) and state.update.user == self.address:
            self.call("request_refund")
            self.note("adversary", behavior="refund-while-member")

    def _joiner_view(self, msg: Message, prev: ChannelState) -> Optional[View]:
        cid = msg.channel_id
        if msg.sender not in prev.members:
            self.note("dropped", reason="non-member", sender=msg.sender, kind=msg.kind)
            return None
        children = dict(msg.body.get("children", ()))
        primes = [acc.hash_to_prime(ucs_hash(u)).prime for u in children.values()]
        params = self.cfg.params
        product = math.prod(primes)
        if pow(params.generator, product, params.modulus) != prev.openings.value:
            self.note("refused", reason="children-mismatch", channel=self.label(cid))
            return None
        if cid == ZERO_ID:
            kind, parent = "base", None
        else:
            parent_view = next((v for v in self.views.values() if cid in v.children), None)
            if parent_view is None:
                self.note("refused", reason="unknown-parent", channel=self.label(cid))
                return None
            kind, parent = "group", parent_view.channel_id
            if self.group_join_wants.get(cid) != msg.body["state"].update.amount:
                self.note("refused", reason="unrequested-join", channel=self.label(cid))
                return None
        recs = {c: ChildRecord(u, acc.hash_to_prime(ucs_hash(u)), None,
                               "group" if u.contract_address == MANAGEMENT_CONTRACT else "app")
                for c, u in children.items()}
        view = View(cid, kind, parent, prev, [prev], recs, label=self.label(cid))
        self.joined_previous[cid] = view
        return view

    def _countersign_genesis(self, msg: Message, state):
        cid = msg.channel_id
        pending = self.pending_children.get(cid)
        if pending is None or msg.sender != pending[1].members[0]:
            if cid not in self.views:
                self.note("dropped", reason="unknown-child", sender=msg.sender, kind=msg.kind)
            return
        _, ucs0, kind = pending
        expected = self._deterministic_genesis(ucs0, kind)
        if state.digest() != expected.digest():
            self.note("refused", reason="bad-genesis", channel=self.label(cid))
            return
        mine = state.signed_by(self.signer)
        self.send(msg.sender, "signature_reply", cid, digest=state.digest(),
                  sig=mine.signatures[self.address], ucs_sig=mine.ucs_signatures[self.address])

    def _msg_signature_reply(self, msg: Message):
        flow = self.flows.get(msg.channel_id)
        if flow is None or flow.phase != "countersign" or msg.body["digest"] != flow.state.digest():
            return
        fins = {msg.sender: msg.body["fin_sig"]} if "fin_sig" in msg.body else None
        if isinstance(flow.state, DemoAppState):
            flow.state = flow.state.with_signatures({msg.sender: msg.body["sig"]},
                                                    {msg.sender: msg.body["ucs_sig"]}, fins)
        else:
            flow.state = flow.state.with_signatures({msg.sender: msg.body["sig"]},
                                                    {msg.sender: msg.body["ucs_sig"]})
        self._maybe_finish(flow)

    def _maybe_finish(self, flow: Flow):
        if flow.genesis:
            st = flow.state
            if all(m in st.signatures for m in st.members):
                self._establish_genesis(flow)
            return
        view = self.views[flow.channel_id]
        if self._check(view, flow.previous, flow.state, "final"):
            return
        state = flow.state
        recipients = set(flow.previous.members) | set(state.members)
        for who in sorted(recipients):
            self.send(who, "established", flow.channel_id, state=state)
        self._install(view, state)

    def _establish_genesis(self, flow: Flow):
        st = flow.state
        del self.flows[flow.channel_id]
        for who in sorted(st.members):
            self.send(who, "established", flow.channel_id, state=st)
        self._open_child_view(flow.channel_id, st)

    def _msg_established(self, msg: Message):
        state = msg.body["state"]
        cid = msg.channel_id
        view = self.views.get(cid)
        if view is None or (view.closed and cid in self.joined_previous):
            if state.nonce == 0 and cid in self.pending_children:
                pending = self.pending_children[cid]
                expected = self._deterministic_genesis(pending[1], pending[2])
                complete = all(
                    self.cfg.directory.verify(m, b"state", expected.digest(), state.signatures.get(m))
                    for m in expected.members)
                if state.digest() == expected.digest() and complete:
                    self._open_child_view(cid, state)
                else:
                    self.note("dropped", reason="bad-genesis", sender=msg.sender, kind=msg.kind)
                return
            joined = self.joined_previous.pop(cid, None)
            if joined is not None and state.nonce == joined.latest.nonce + 1:
                if self._adopt(joined, state, "join"):
                    self.views[cid] = joined
                    self.note("joined", channel=self.label(cid))
                return
            self.note("dropped", reason="no-channel", sender=msg.sender, kind=msg.kind)
            return
        if msg.sender not in set(view.latest.members) | set(state.members):
            self.note("dropped", reason="non-member", sender=msg.sender, kind=msg.kind)
            return
        if state.nonce <= view.latest.nonce:
            return
        if state.nonce > view.latest.nonce + 1:
            self._sync(view)
            return
        self._adopt(view, state, msg.sender)

    # ------------------------------------------------------------ sync

    def _sync(self, view: View):
        for who in sorted(set(view.latest.members) - {self.address}):
            self.send(who, "sync_request", view.channel_id, nonce=view.latest.nonce)

    def _msg_sync_request(self, msg: Message):
        view = self.views.get(msg.channel_id)
        if view is None or msg.sender not in {m for s in view.history for m in s.members}:
            self.note("dropped", reason="non-member", sender=msg.sender, kind=msg.kind)
            return
        after = int(msg.body["nonce"])
        states = tuple(s for s in view.history if s.nonce > after)
        if states:
            self.send(msg.sender, "sync_reply", msg.channel_id, states=states)

    def _msg_sync_reply(self, msg: Message):
        view = self.views.get(msg.channel_id)
        if view is None:
            return
        for st in msg.body["states"]:
            if st.nonce == view.latest.nonce + 1 and not self._adopt(view, st, "sync"):
                break

    def _wake(self):
        self.note("woke")
        for cid in sorted(self.views):
            view = self.views[cid]
            if not view.closed:
                self._sync(view)
        for d in self.chain.open_disputes():
            if d.accused == self.address and d.status == "open":
                self._answer_dispute(d)

    # ------------------------------------------------------------ fin signatures for closing

    def _msg_fin_request(self, msg: Message):
        view = self._member_view(msg)
        if view is None:
            return
        state = msg.body["state"]
        if state.digest() != view.latest.digest():
            self.note("refused", reason="fin-not-latest", channel=self.label(view.channel_id))
            return
        if not self._closable(view):
            self.note("refused", reason="not-finalisable", channel=self.label(view.channel_id))
            return
        fin = FinalisabilityTuple(True, state.nonce, state.channel_id)
        self.send(msg.sender, "fin_reply", msg.channel_id, digest=fin.digest(),
                  sig=self.signer.sign(TAG_FIN, fin.digest()))

    def _closable(self, view: View) -> bool:
        if view.kind == "app":
            if view.channel_id in self.chain.app_rulings:
                return True
            app_def = self.cfg.apps.get(view.genesis.ucs.contract_address)
            return app_def.is_finalisable(view.latest)
        return not view.children and view.channel_id not in self.flows

    def _msg_fin_reply(self, msg: Message):
        pending = self.fin_collect.get(msg.channel_id)
        if pending is None or msg.body["digest"] != pending["fin"].digest():
            return
        pending["sigs"][msg.sender] = msg.body["sig"]

    # ------------------------------------------------------------ events

    def _on_event(self, ev):
        handler = getattr(self, "_ev_" + ev.kind, None)
        if handler is not None:
            handler(ev)

    def _base(self) -> Optional[View]:
        v = self.views.get(ZERO_ID)
        return v if v is not None and not v.closed else None

    def _first_active(self, view: View, exclude=()) -> Optional[str]:
        ign = self._ignored(view)
        for m in view.latest.members:
            if m not in ign and m not in exclude:
                return m
        return None

    def _ev_refund_requested(self, ev):
        self._watch_refund(ev.data["user"])

    def _watch_refund(self, user: str):
        base = self._base()
        if base is None:
            return
        r = self.chain.refunds.get(user)
        if r is None or r.status != "pending":
            return
        if user in base.members and self._first_active(base, exclude=(user,)) == self.address:
            self.call("cancel_refund", user=user, state=base.latest)
        else:
            self.intents[b"watch-refund"].append(Intent("watch", {"user": user}))

    def _ev_withdrawal_requested(self, ev):
        base = self._base()
        user, removal = ev.data["user"], ev.data["state"]
        if base is None or user == self.address:
            return
        if base.latest.nonce > removal.nonce and user in base.members \
                and self._first_active(base, exclude=(user,)) == self.address:
            self.call("challenge_withdrawal", ref=ev.data["ref"], state=base.latest)

    def _ev_header_dispute_opened(self, ev):
        if ev.data["accused"] == self.address:
            self._answer_dispute(self.chain.disputes[ev.data["ref"]])

    def _ev_member_dispute_opened(self, ev):
        if ev.data["accused"] == self.address:
            self._answer_dispute(self.chain.disputes[ev.data["ref"]])

    _ev_app_dispute_opened = _ev_member_dispute_opened

    def _answer_dispute(self, rec):
        if rec.status != "open":
            return
        view = self.views.get(rec.channel_id)
        if rec.kind == "header":
            key = (rec.channel_id, rec.previous.nonce + 1)
            if self._active("stale-post"):
                old = sorted(k for k in self.endorsed if k[0] == rec.channel_id and k[1] <= rec.previous.nonce)
                if old:
                    endorsed = self.endorsed[old[-1]]
                    pred = next((s for s in view.history if s.nonce == endorsed.nonce - 1), None) if view else None
                    if pred is not None:
                        self.note("adversary", behavior="stale-post", nonce=endorsed.nonce)
                        self.call("answer_header_dispute", ref=rec.id, predecessor=pred, endorsed=endorsed)
                        return
            endorsed = self.endorsed.get(key)
            if endorsed is None and view is not None:
                if self._check(view, rec.previous, rec.proposal, "pre-header", proposer=rec.opener):
                    return
                endorsed = rec.proposal.signed_by(self.signer)
                self.endorsed[key] = endorsed
            if endorsed is not None:
                self.call("answer_header_dispute", ref=rec.id, predecessor=rec.previous, endorsed=endorsed)
            return
        prop = rec.proposal
        if view is None:
            return
        if rec.kind == "member":
            kind = view.kind
            ctx = ValidationContext(rec.previous, prop, kind, "post-header", self.cfg.directory,
                                    deposit=self.chain.deposit_info(prop.update.user)
                                    if kind == "base" and isinstance(prop.update, AddUserUpdate) else None,
                                    app_contracts=self.cfg.apps.addresses(), entrance_fee=self.cfg.entrance_fee,
                                    ignored=self.chain.ignored_for(rec.channel_id),
                                    round_header=self.chain.designated_header(rec.channel_id, rec.previous.nonce))
            if validate_transition(ctx).rules:
                return
            mine = prop.signed_by(self.signer)
            self.call("answer_member_dispute", ref=rec.id, signature=mine.signatures[self.address],
                      ucs_signature=mine.ucs_signatures[self.address])
        else:
            app_def = self.cfg.apps.get(view.genesis.ucs.contract_address)
            if app_def.validate_app_transition(rec.previous, prop, self.chain.app_ignored_for(rec.channel_id)).rules:
                return
            mine = prop.signed_by(self.signer)
            self.call("answer_app_dispute", ref=rec.id, signature=mine.signatures[self.address],
                      ucs_signature=mine.ucs_signatures[self.address],
                      fin_signature=mine.fin_signatures.get(self.address))

    def _ev_header_dispute_answered(self, ev):
        flow = self.flows.get(ev.channel_id)
        endorsed = ev.data["endorsed"]
        view = self.views.get(ev.channel_id)
        if ev.data["opener"] != self.address or view is None:
            return
        if endorsed.nonce <= view.latest.nonce:
            stale = next((s for s in view.history if s.nonce == endorsed.nonce), None)
            if stale is not None and stale.digest() == endorsed.digest():
                stale = view.latest
            if stale is not None:
                self.call("challenge_header_answer", ref=ev.data["ref"], state=stale)
            return
        if flow is not None and flow.state.digest() == endorsed.digest():
            self._endorsed(flow, endorsed)
        elif flow is not None:
            flow.phase = "lost"

    def _ev_header_replaced(self, ev):
        flow = self.flows.get(ev.channel_id)
        if flow is not None and flow.phase in ("header", "header-dispute", "lost"):
            flow.phase = "presigned"
            self._to_header(flow)

    def _ev_member_dispute_answered(self, ev):
        flow = self.flows.get(ev.channel_id)
        state = ev.data["state"]
        if flow is not None and flow.phase == "countersign" and state.digest() == flow.state.digest():
            who = ev.data["accused"]
            flow.state = flow.state.with_signatures({who: state.signatures[who]}, {who: state.ucs_signatures[who]})
            self._maybe_finish(flow)

    def _ev_app_dispute_answered(self, ev):
        flow = self.flows.get(ev.channel_id)
        state = ev.data["state"]
        if flow is not None and flow.phase in ("header", "header-dispute") and ev.data["accused"] == flow.header \
                and state.digest() == flow.state.digest():
            self._endorsed(flow, state)
            return
        if flow is not None and flow.phase == "countersign" and state.digest() == flow.state.digest():
            who = ev.data["accused"]
            fins = {who: state.fin_signatures[who]} if who in state.fin_signatures else None
            flow.state = flow.state.with_signatures({who: state.signatures[who]},
                                                    {who: state.ucs_signatures[who]}, fins)
            self._maybe_finish(flow)

    def _ev_member_expelled(self, ev):
        for cid in sorted(self.flows):
            flow = self.flows.get(cid)
            if flow is None or flow.genesis or flow.phase != "countersign":
                continue
            view = self.views[cid]
            rules = set(self._check(view, flow.previous, flow.state, "final"))
            if rules - set(SIGNATURE_RULES):
                # The expulsion changed the expected header; rebuild the proposal.
                del self.flows[cid]
                if flow.intent is not None:
                    self.intents[cid].insert(0, flow.intent)
                self.note("rebuild", channel=self.label(cid), rules=sorted(rules))
            else:
                self._maybe_finish(flow)

    def _ev_app_ruled(self, ev):
        view = self.views.get(ev.channel_id)
        ruling = ev.data["ruling"]
        if view is None:
            return
        self.flows.pop(ev.channel_id, None)
        if ruling.nonce >= view.latest.nonce and ruling.digest() != view.latest.digest():
            view.latest = ruling
            view.history.append(ruling)
        self.note("app-ruled", channel=self.label(ev.channel_id), nonce=ruling.nonce)

    # ------------------------------------------------------------ actions

    def _apply_action(self, act: dict):
        kind, args = act["action"], act.get("args", {})
        handler = getattr(self, "_act_" + kind, None)
        if handler is None:
            raise ProtocolError(f"unknown action {kind!r}")
        self.note("action", action=kind)
        try:
            handler(args)
        except ProtocolError as exc:
            self.note("action-failed", action=kind, reason=str(exc))

    def _cid(self, label: str) -> bytes:
        for cid, name in self.labels.items():
            if name == label:
                return cid
        raise ProtocolError(f"unknown channel label {label!r}")

    def _act_deposit(self, args):
        amount, fee = int(args["amount"]), int(args["fee"])
        via = args.get("via")
        n = max(1, len(self.chain.registry))
        self.join = JoinPlan(amount, fee, via, self.now, n * self.cfg.delta)
        self.call("deposit", amount=amount, fee=fee)
        if via is None or via == self.address:
            self.views[ZERO_ID] = View(ZERO_ID, "base", None, base_genesis(self.cfg.params),
                                       [base_genesis(self.cfg.params)], label="base")
            self.intents[ZERO_ID].append(Intent("add_user", {"user": self.address, "amount": amount, "fee": fee}))
        else:
            self.send(via, "join_request", ZERO_ID, amount=amount, fee=fee)

    def _act_request_refund(self, args):
        self.call("request_refund")

    def _act_withdraw_refund(self, args):
        self.call("withdraw_refund")

    def _act_cancel_refund(self, args):
        base = self._base()
        if base is not None:
            self.call("cancel_refund", user=args["user"], state=base.latest)

    def _act_open_child(self, args):
        parent = self._cid(args.get("parent", "base"))
        commits = [(a, int(b)) for a, b in args["commitments"]]
        kind = args.get("kind", "group")
        contract = args.get("app", MANAGEMENT_CONTRACT) if kind == "app" else MANAGEMENT_CONTRACT
        self._queue(parent, Intent("open", {"commitments": commits, "contract": contract,
                                            "label": args.get("label")}))

    def _act_close_child(self, args):
        cid = self._cid(args["channel"])
        view = self.views.get(cid)
        if view is None or view.closed:
            self.note("refused", reason="not-in-channel", channel=args["channel"])
            return
        self._queue(view.parent_id, Intent("close", {"child": cid}))

    def _act_app_move(self, args):
        cid = self._cid(args["channel"])
        self._queue(cid, Intent("move", {}))

    def _act_join_group(self, args):
        cid = self._cid(args["channel"])
        self.group_join_wants[cid] = int(args["amount"])
        self.send(args["via"], "group_join_request", cid, amount=int(args["amount"]))

    def _act_leave_group(self, args):
        cid = self._cid(args["channel"])
        self._queue(cid, Intent("remove_user", {"user": self.address}))

    def _act_leave(self, args):
        self._queue(ZERO_ID, Intent("remove_user", {"user": self.address}))

    def _act_forge(self, args):
        what = args.get("what", "impersonate")
        target = args.get("to")
        cid = self._cid(args["channel"]) if "channel" in args else ZERO_ID
        if what == "impersonate":
            victim = args["as"]
            msg = Message(victim, target, "join_request", cid, {"amount": 1, "fee": 1}, self._next_seq())
            self.fx.messages.append(replace(msg, signature=self.signer.sign(TAG_MSG, msg.digest())))
        elif what == "established":
            base = self.views.get(cid)
            prev = base.latest if base else base_genesis(self.cfg.params)
            fake = build_add_user(prev, args.get("user", "ghost"), 10 ** 6, self.address, 0).signed_by(self.signer)
            self.send(target, "established", cid, state=fake)
        elif what == "redeem":
            prev = (self.views.get(ZERO_ID) or View(ZERO_ID, "base", None, base_genesis(self.cfg.params), [])).latest
            user = args.get("user", self.address)
            fake = build_add_user(prev, user, int(args.get("amount", 100)), self.address, 1).signed_by(self.signer)
            self.call("redeem_add_user", previous=prev, proposed=fake)
        self.note("adversary", behavior="forge", what=what)

    def _act_replay_withdrawal(self, args):
        for prev, removal in self.old_removals:
            self.call("withdraw_on_remove", previous=prev, removal=removal)
            self.note("adversary", behavior="stale-post", what="withdrawal")
            return

    def _act_open_dispute(self, args):
        """Manually open a header dispute over an arbitrary (possibly invalid) proposal."""
        cid = self._cid(args.get("channel", "base"))
        view = self.views[cid]
        prev = view.latest
        if args.get("invalid", False):
            bad = replace(build_remove_user(prev, self.address), header="nobody").signed_by(self.signer)
        else:
            bad = build_remove_user(prev, self.address).signed_by(self.signer)
        self.call("open_header_dispute", previous=prev, proposal=bad)

    # ------------------------------------------------------------ timers

    def _timers(self):
        for item in list(self.intents.get(b"watch-refund", [])):
            self.intents[b"watch-refund"].remove(item)
            self._watch_refund(item.args["user"])
        if self.join is not None and not self.join.done:
            j = self.join
            r = self.chain.refunds.get(self.address)
            if j.refund_at is None and self.now > j.deposited_at + j.window and self.address not in self.chain.registry:
                j.refund_at = self.now
                self.call("request_refund")
            elif j.refund_at is not None and r is not None and r.status == "pending" \
                    and self.now > r.requested_at + r.n * self.cfg.delta:
                self.call("withdraw_refund")
                j.done = True
        if self._active("double-redeem") and self.redeemed:
            prev, state = self.redeemed.pop(0)
            self.call("redeem_add_user", previous=prev, proposed=state)
            self.note("adversary", behavior="double-redeem")
        for cid in sorted(self.flows):
            self._flow_timer(self.flows[cid])
        for cid in sorted(self.fin_collect):
            self._fin_timer(cid)
        if self.cfg.autoplay:
            for cid in sorted(self.views):
                view = self.views[cid]
                if view.kind == "app" and not view.closed and cid not in self.flows and not self.intents[cid]:
                    if self._wants_to_move(view):
                        self.intents[cid].append(Intent("move", {"auto": True}))

    def _wants_to_move(self, view: View) -> bool:
        app_def = self.cfg.apps.get(view.genesis.ucs.contract_address)
        if view.channel_id in self.chain.app_rulings or app_def.is_finalisable(view.latest):
            return False
        if self.address in self._ignored(view):
            return False
        if app_def.mode == "turn":
            return view.latest.turn == self.address
        return True

    def _flow_timer(self, flow: Flow):
        waited = self.now - flow.since
        view = self.views.get(flow.channel_id)
        if flow.genesis:
            if waited > 2 + self.cfg.member_timeout and waited % (2 + self.cfg.member_timeout) == 1:
                self._request_countersign(flow)
            return
        if view is None:
            return
        if flow.phase == "presign" and waited > 2 + self.cfg.member_timeout:
            self.note("abandoned", channel=self.label(flow.channel_id), reason="presign-timeout")
            del self.flows[flow.channel_id]
        elif flow.phase == "header" and waited > 2 + self.cfg.header_timeout:
            if view.kind == "app":
                self._open_app_dispute(view, flow, flow.header)
            else:
                self.call("open_header_dispute", previous=flow.previous, proposal=flow.state)
            flow.phase = "header-dispute"
            flow.since = self.now
        elif flow.phase == "header-dispute" and waited > 4 * self.cfg.delta:
            self.note("abandoned", channel=self.label(flow.channel_id), reason="header-dispute")
            del self.flows[flow.channel_id]
        elif flow.phase == "lost" and waited > 4 + self.cfg.member_timeout:
            self.note("abandoned", channel=self.label(flow.channel_id), reason="lost-round")
            del self.flows[flow.channel_id]
            if flow.intent is not None:
                self.intents[flow.channel_id].insert(0, flow.intent)
        elif flow.phase == "countersign" and waited > 2 + self.cfg.member_timeout:
            need = self._final_signers(view, flow.previous, flow.state) - set(flow.state.signatures)
            for who in sorted(need - flow.disputed):
                if view.kind == "app":
                    self._open_app_dispute(view, flow, who)
                else:
                    self.call("open_member_dispute", previous=flow.previous, proposal=flow.state, accused=who)
                flow.disputed.add(who)
            if waited > 6 * self.cfg.delta:
                self.note("abandoned", channel=self.label(flow.channel_id), reason="countersign")
                del self.flows[flow.channel_id]

    def _open_app_dispute(self, view: View, flow: Flow, accused: str):
        self.call("open_app_dispute", genesis=view.genesis, latest=flow.previous, proposal=flow.state,
                  accused=accused)
        flow.disputed.add(accused)

    def _fin_timer(self, cid: bytes):
        pending = self.fin_collect[cid]
        child = self.views.get(cid)
        if child is None or child.closed:
            self.fin_collect.pop(cid)
            return
        need = set(child.latest.members) - self._ignored(child)
        if need <= set(pending["sigs"]):
            self.fin_collect.pop(cid)
            intent = pending["intent"]
            intent.args["fin_sigs"] = dict(pending["sigs"])
            intent.args["recent"] = child.latest
            self.intents[child.parent_id].insert(0, intent)
        elif self.now - pending["since"] > 4 + self.cfg.member_timeout:
            self.note("abandoned", channel=self.label(cid), reason="fin-signatures")
            self.fin_collect.pop(cid)

    # ------------------------------------------------------------ starting flows

    def _pump(self, cid: bytes):
        view = self.views.get(cid)
        if view is None or view.closed or cid in self.flows:
            return
        queue = self.intents.get(cid)
        while queue:
            intent = queue.pop(0)
            try:
                started = self._start(view, intent)
            except (ProtocolError, KeyError, ValueError) as exc:
                self.note("intent-failed", channel=self.label(cid), intent=intent.kind, reason=str(exc))
                continue
            if started is None:
                queue.insert(0, intent)
                return
            if started:
                return

    def _start(self, view: View, intent: Intent) -> Optional[bool]:
        """Start a flow for ``intent``; ``None`` means try again next round."""
        if self.address in self._ignored(view):
            return False
        if view.kind == "app":
            return self._start_move(view, intent)
        prev = view.latest
        ign = self._ignored(view)
        k, a = intent.kind, intent.args
        if k in ("add_user", "remove_user") and view.kind == "group" and view.children:
            raise ProtocolError("group membership changes wait until its children are closed")
        if k == "add_user":
            if a["user"] in prev.members:
                return False
            if view.kind == "base" and self.chain.deposit_info(a["user"]) is None:
                intent.tries += 1
                if intent.tries > 4 * self.cfg.delta:
                    raise ProtocolError("no deposit record for the joiner")
                return None  # the deposit lands at the end of the round
            if view.kind == "group":
                parent = self.views.get(view.parent_id)
                rec = parent.children.get(view.channel_id) if parent else None
                if rec is None or set(rec.ucs.members) != set(prev.members):
                    raise ProtocolError("previous membership change not yet committed in the parent")
                if parent.latest.ucs.balances().get(a["user"], 0) < a["amount"] + a["fee"]:
                    raise ProtocolError("joiner cannot fund the group entry")
            state = build_add_user(prev, a["user"], a["amount"], self.address, a["fee"], ign)
        elif k == "remove_user":
            if a["user"] not in prev.members:
                return False
            if view.kind == "group":
                parent = self.views.get(view.parent_id)
                rec = parent.children.get(view.channel_id) if parent else None
                if rec is None or set(rec.ucs.members) != set(prev.members):
                    raise ProtocolError("previous membership change not yet committed in the parent")
            state = build_remove_user(prev, a["user"], ign)
        elif k == "open":
            child = new_child_ucs(prev, a["commitments"], a["contract"])
            state, _ = build_open(prev, child, ign)
            if a.get("label"):
                self.fx.labels[ucs_hash(child)] = a["label"]
        elif k == "close":
            return self._start_close(view, intent)
        elif k == "edit":
            return self._start_edit(view, intent)
        else:
            raise ProtocolError(f"unknown intent {k}")
        return self._launch(view, intent, state)

    def _launch(self, view: View, intent: Intent, state) -> bool:
        prev = view.latest
        rules = validate_transition(self._ctx(view, prev, state, "pre-header", proposer=self.address)).rules
        if rules and not self._active("alter-amounts"):
            self.note("intent-invalid", channel=self.label(view.channel_id), intent=intent.kind,
                      rules=sorted(set(rules)))
            return False
        state = state.signed_by(self.signer)
        up = state.update
        if isinstance(up, OpenUpdate) and self.address in up.new_ucs.members:
            state = replace(state, update=replace(up, new_ucs_signatures={
                self.address: self.signer.sign(TAG_UCS, up.new_ucs_hash)}))
        flow = Flow(view.channel_id, intent, state, prev, "presign", self.now)
        flow.presigners = required_signers(self._ctx(view, prev, state, "pre-header")) - {self.address}
        self.flows[view.channel_id] = flow
        self.note("proposed", channel=self.label(view.channel_id), nonce=state.nonce, variety=variety(up))
        if flow.presigners:
            for who in sorted(flow.presigners):
                self.send(who, "presign_request", view.channel_id, state=state)
        else:
            self._to_header(flow)
        return True

    def _to_header(self, flow: Flow):
        view = self.views[flow.channel_id]
        head = self._round_header(view)
        flow.header = head
        if head is None or head == self.address:
            key = (flow.channel_id, flow.state.nonce)
            taken = self.endorsed.get(key)
            if taken is not None and taken.digest() != flow.state.digest():
                flow.phase = "lost"
                flow.since = self.now
                return
            self.endorsed[key] = flow.state
            flow.phase = "countersign"
            flow.since = self.now
            self._request_countersign(flow)
            self._maybe_finish(flow)
        else:
            flow.phase = "header"
            flow.since = self.now
            self.send(head, "proposal", flow.channel_id, state=flow.state)

    def _start_close(self, view: View, intent: Intent) -> bool:
        cid = intent.args["child"]
        rec = view.children.get(cid)
        child = self.views.get(cid)
        if rec is None or child is None or rec.witness is None:
            raise ProtocolError("cannot close a child this party does not hold")
        if "fin_sigs" not in intent.args or intent.args["recent"].digest() != child.latest.digest():
            if not self._closable(child):
                raise ProtocolError("child is not finalisable")
            latest = child.latest
            fin = FinalisabilityTuple(True, latest.nonce, cid)
            sigs = {self.address: self.signer.sign(TAG_FIN, fin.digest())}
            if isinstance(latest, DemoAppState) and latest.finalisability == fin:
                sigs.update(latest.fin_signatures)
            self.fin_collect[cid] = {"fin": fin, "sigs": sigs, "since": self.now, "intent": intent}
            need = set(latest.members) - self._ignored(child) - set(sigs)
            for who in sorted(need):
                self.send(who, "fin_request", cid, state=latest)
            self._fin_timer(cid)
            return False
        recent = intent.args["recent"]
        state = build_close(view.latest, rec.ucs, recent.ucs, rec.witness, intent.args["fin_sigs"],
                            dict(recent.ucs_signatures), self._ignored(view))
        return self._launch(view, intent, state)

    def _start_edit(self, view: View, intent: Intent) -> bool:
        cid = intent.args["child"]
        rec = view.children.get(cid)
        child = self.views.get(cid)
        if rec is None or rec.witness is None or child is None:
            raise ProtocolError("cannot edit a child this party does not hold")
        latest = child.latest
        if set(latest.members) == set(rec.ucs.members):
            return False
        state, _ = build_edit(view.latest, rec.ucs, latest.ucs, rec.witness, dict(latest.ucs_signatures),
                              self._ignored(view))
        return self._launch(view, intent, state)

    def _start_move(self, view: View, intent: Intent) -> bool:
        app_def = self.cfg.apps.get(view.genesis.ucs.contract_address)
        prev = view.latest
        if not self._wants_to_move(view):
            return False
        state = app_def.move(prev, self.address, self._ignored(view)).signed_by(self.signer)
        flow = Flow(view.channel_id, intent, state, prev, "presigned", self.now)
        self.flows[view.channel_id] = flow
        self.note("proposed", channel=self.label(view.channel_id), nonce=state.nonce, variety="app-move")
        self._to_header(flow)
        return True
