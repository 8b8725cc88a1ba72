"""Deterministic round-based simulation of parties, network and ledger.

Each round: messages sent in the previous round are delivered (sorted by
sender and sequence number), contract events from the previous round are
delivered to every party, scripted actions are applied, each party steps,
then contract calls are applied in (caller, sequence) order and the contract
clock ticks. Parties never see each other's effects within a round, so they
may be stepped on a thread pool without changing the outcome.
"""
from __future__ import annotations

import json
from collections import Counter, defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from . import accumulator as acc
from .app import AppContractSpec, AppRegistry, DemoAppState
from .contract import ManagementContract
from .errors import ParameterError
from .runtime import Party, RuntimeConfig
from .scenario import Scenario
from .signing import make_keys
from .state import ZERO_ID, ChannelState, RemoveUserUpdate, rotation_header, ucs_hash

SETTLE_ROUNDS = 3
SNAPSHOT_EVERY = 50


def _hex(b: bytes, n: int = 16) -> str:
    return b.hex()[:n]


def _plain(value, labels):
    """JSON-friendly rendering of event payloads and notes."""
    if isinstance(value, (ChannelState, DemoAppState)):
        return {"nonce": value.nonce, "digest": _hex(value.digest())}
    if isinstance(value, bytes):
        return labels.get(value, _hex(value))
    if isinstance(value, dict):
        return {str(k): _plain(v, labels) for k, v in sorted(value.items(), key=lambda kv: str(kv[0]))}
    if isinstance(value, (list, tuple, set, frozenset)):
        items = [_plain(v, labels) for v in value]
        return sorted(items, key=str) if isinstance(value, (set, frozenset)) else items
    if isinstance(value, (int, str, bool)) or value is None:
        return value
    return str(value)


@dataclass
class RunResult:
    scenario: Scenario
    seed: int
    rounds: int
    trace: list
    contract: ManagementContract
    parties: dict
    labels: dict
    initial_ledger: dict
    audit_failures: list = field(default_factory=list)
    assertions: list = field(default_factory=list)
    header_counts: dict = field(default_factory=dict)
    header_log: list = field(default_factory=list)
    snapshots: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.audit_failures and all(ok for _, ok, _ in self.assertions)

    @property
    def exit_code(self) -> int:
        return 0 if self.passed else 1

    def trace_text(self) -> str:
        return "".join(line + "\n" for line in self.trace)

    def call_counts(self) -> Counter:
        return Counter(c.op for c in self.contract.calls)


class World:
    """All simulation state for one scenario run."""

    def __init__(self, scenario: Scenario, seed: Optional[int] = None, workers: int = 1,
                 snapshot_every: int = SNAPSHOT_EVERY):
        self.scenario = scenario
        self.seed = scenario.seed if seed is None else seed
        self.workers = workers
        self.snapshot_every = snapshot_every
        self.snapshots: list[dict] = []
        g = scenario.genesis
        seed_bytes = str(self.seed).encode()
        self.params = acc.trusted_setup(g.modulus_bits, seed_bytes)
        names = list(scenario.parties)
        signers, self.directory = make_keys(names, seed_bytes)
        self.apps = AppRegistry([AppContractSpec(a.address, a.target, a.reward, a.mode) for a in g.apps])
        self.ledger = dict(scenario.parties)
        self.initial_ledger = dict(self.ledger)
        self.total = sum(self.ledger.values())
        self.contract = ManagementContract(self.params, self.directory, self.ledger, g.delta, g.penalty,
                                           self.apps, g.entrance_fee)
        cfg = RuntimeConfig(self.params, self.directory, self.apps, g.delta, g.entrance_fee,
                            g.header_timeout, g.member_timeout, g.autoplay)
        self.labels: dict[bytes, str] = {ZERO_ID: "base"}
        self.opening_labels: dict[bytes, str] = {}
        behaviors = defaultdict(set)
        armed = {}
        for a in scenario.adversaries:
            behaviors[a.party] |= set(a.behaviors)
            armed[a.party] = max(armed.get(a.party, 0), a.from_round)
        self.parties = {}
        for n in names:
            p = Party(n, signers[n], cfg, behaviors.get(n, ()), self.labels)
            p.armed_from = armed.get(n, 0)
            self.parties[n] = p
        self.honest = set(scenario.honest)
        self.trace: list[str] = []
        self.audit_failures: list[str] = []
        self.assertions: list = []
        self.header_counts: dict[str, Counter] = defaultdict(Counter)
        self.header_log: list[tuple[str, int, str]] = []
        self._counted_upto: dict[str, int] = {}
        self._record_seq = 0
        self._round = 0

    # ------------------------------------------------------------ trace

    def record(self, emitter: str, kind: str, digest: str = "", /, **detail):
        self._record_seq += 1
        rec = {"round": self._round, "seq": self._record_seq, "emitter": emitter, "kind": kind,
               "digest": digest, "detail": _plain(detail, self.labels)}
        self.trace.append(json.dumps(rec, sort_keys=True, separators=(",", ":")))

    # ------------------------------------------------------------ main loop

    def run(self, max_rounds: Optional[int] = None) -> RunResult:
        limit = max_rounds or self.scenario.max_rounds
        by_round = defaultdict(lambda: defaultdict(list))
        for step in self.scenario.timeline:
            by_round[step.round][step.party].append({"action": step.action, "args": step.args})
        last_scripted = max((s.round for s in self.scenario.timeline), default=0)
        checkpoints = defaultdict(list)
        for rnd, exp in self.scenario.checkpoints:
            checkpoints[rnd].append(exp)

        inflight = []
        events = []
        quiet = 0
        rnd = 0
        pool = ThreadPoolExecutor(self.workers) if self.workers > 1 else None
        try:
            for rnd in range(limit):
                self._round = rnd
                inbox = defaultdict(list)
                for msg in sorted(inflight, key=lambda m: (m.sender, m.seq)):
                    inbox[msg.recipient].append(msg)
                names = sorted(self.parties)

                def step(name):
                    return self.parties[name].step(rnd, inbox.get(name, []), events,
                                                   by_round[rnd].get(name, []), self.contract)

                results = list(pool.map(step, names)) if pool else [step(n) for n in names]
                inflight, calls = [], []
                for name, fx in zip(names, results):
                    for kind, detail in fx.notes:
                        self.record(name, kind, **detail)
                    for msg in fx.messages:
                        if msg.recipient not in self.parties:
                            self.record("network", "undeliverable", _hex(msg.digest()), to=msg.recipient)
                            continue
                        self.record(name, "send:" + msg.kind, _hex(msg.digest()), to=msg.recipient,
                                    channel=msg.channel_id)
                        inflight.append(msg)
                    calls.extend(fx.calls)
                    self.opening_labels.update(fx.labels)
                for call in sorted(calls, key=lambda c: (c.caller, c.seq)):
                    fn = getattr(self.contract, call.op)
                    res = fn(call.caller, now=rnd, **call.kwargs)
                    logged = self.contract.calls[-1]
                    self.record("contract", "call:" + call.op, logged.args_digest, caller=call.caller,
                                ok=res.ok, reason=res.detail)
                self._assign_labels()
                self.contract.tick(rnd)
                events = self.contract.pop_events()
                for ev in events:
                    self.record("contract", "event:" + ev.kind, "", channel=ev.channel_id, **ev.data)
                self._audit(rnd)
                for exp in checkpoints.get(rnd, []):
                    self._evaluate(exp, f"round {rnd}")
                if self.snapshot_every and rnd % self.snapshot_every == 0:
                    self._snapshot(rnd)
                busy = inflight or calls or events or self._busy()
                quiet = 0 if busy else quiet + 1
                if rnd > last_scripted and quiet >= SETTLE_ROUNDS:
                    break
        finally:
            if pool:
                pool.shutdown()
        self._round = rnd + 1
        paid = self.contract.distribute_pool()
        if paid:
            self.record("contract", "pool-distributed", "", shares=paid)
        for ev in self.contract.pop_events():
            self.record("contract", "event:" + ev.kind, "", channel=ev.channel_id, **ev.data)
        self._audit(rnd + 1)
        self._evaluate(self.scenario.expect, "final")
        self._safety()
        self.record("simnet", "summary", "", rounds=rnd + 1, audit_failures=len(self.audit_failures),
                    assertions_failed=sum(1 for _, ok, _ in self.assertions if not ok))
        return RunResult(self.scenario, self.seed, rnd + 1, self.trace, self.contract, self.parties,
                         dict(self.labels), self.initial_ledger, self.audit_failures, self.assertions,
                         {k: dict(v) for k, v in self.header_counts.items()}, list(self.header_log),
                         list(self.snapshots))

    def _snapshot(self, rnd: int):
        # Compact world summary so a long trace can be bisected by round.
        c = self.contract
        channels = {self.labels.get(cid, _hex(cid)): [v.latest.nonce, _hex(v.latest.digest())]
                    for cid, v in self.canonical().items()}
        snap = {"round": rnd, "ledger": dict(sorted(c.ledger.items())), "escrow": c.escrow,
                "pool": c.pool, "channels": dict(sorted(channels.items()))}
        self.snapshots.append(snap)
        self.record("simnet", "snapshot", "", **{k: v for k, v in snap.items() if k != "round"})

    def _busy(self) -> bool:
        for p in self.parties.values():
            if p.silent:
                continue
            if p.flows or p.fin_collect or any(q for k, q in p.intents.items() if k != b"watch-refund"):
                return True
            if p.join is not None and not p.join.done:
                return True
        c = self.contract
        return bool(c.open_disputes() or any(w.status == "pending" for w in c.withdrawals)
                    or any(r.status == "pending" for r in c.refunds.values()))

    def _assign_labels(self):
        # A child gets the label its opener chose once its opening UCS is committed.
        for name in sorted(self.parties):
            for view in self.parties[name].views.values():
                for cid, rec in view.children.items():
                    if cid not in self.labels and rec.ucs.nonce == 0:
                        label = self.opening_labels.get(ucs_hash(rec.ucs))
                        if label is not None and label not in self.labels.values():
                            self.labels[cid] = label

    # ------------------------------------------------------------ canonical views

    def canonical(self) -> dict:
        """Highest-nonce view of every channel across all parties."""
        best = {}
        for name in sorted(self.parties):
            for cid, view in self.parties[name].views.items():
                cur = best.get(cid)
                if cur is None or view.latest.nonce > cur.latest.nonce:
                    best[cid] = view
        return best

    def _value(self, canon, cid, committed=None, depth=0) -> int:
        view = canon.get(cid)
        if depth > 16:
            raise ParameterError("channel tree too deep")
        if view is None:
            return committed.total if committed is not None else 0
        latest = view.latest
        if committed is not None and set(latest.members) != set(committed.members):
            return committed.total
        if view.kind == "app":
            return latest.ucs.total
        total = latest.ucs.total
        for child_id, rec in sorted(view.children.items()):
            total += self._value(canon, child_id, rec.ucs, depth + 1)
        return total

    # ------------------------------------------------------------ audits

    def _audit(self, rnd: int):
        c = self.contract
        ledger_total = sum(c.ledger.values())
        if ledger_total + c.escrow != self.total:
            self.audit_failures.append(f"round {rnd}: ledger {ledger_total} + escrow {c.escrow} != {self.total}")
        canon = self.canonical()
        for name in sorted(self.parties):
            for cid, view in self.parties[name].views.items():
                top = canon[cid]
                if top.latest.nonce == view.latest.nonce and top.latest.digest() != view.latest.digest():
                    self.audit_failures.append(f"round {rnd}: fork in {self.labels.get(cid, _hex(cid))}")
                for child_id, rec in view.children.items():
                    if rec.witness is not None and not acc.verify_membership(view.latest.openings, rec.element,
                                                                             rec.witness):
                        self.audit_failures.append(
                            f"round {rnd}: {name} holds a stale witness for {self.labels.get(child_id, '?')}")
        base = canon.get(ZERO_ID)
        members = set(base.latest.members) if base else set()
        pending = sum(d.amount + d.fee for d in c.deposits.values() if not d.consumed and d.user not in members)
        unclaimed = 0
        for user in c.registry:
            if user in members:
                continue
            removal = next((s for s in reversed(base.history) if isinstance(s.update, RemoveUserUpdate)
                            and s.update.user == user), None) if base else None
            unclaimed += removal.update.amount if removal else 0
        tree = self._value(canon, ZERO_ID) if base else 0
        expected = pending + tree + unclaimed + c.pool
        if expected != c.escrow:
            self.audit_failures.append(
                f"round {rnd}: escrow {c.escrow} != deposits {pending} + channels {tree} + "
                f"removals {unclaimed} + pool {c.pool}")
        if base is not None:
            self._count_headers(base)

    def _count_headers(self, base):
        # Header of each established round, derived from the state it extended.
        seen = self.header_counts
        for cid, view in self.canonical().items():
            if view.kind == "app":
                continue
            label = self.labels.get(cid, _hex(cid))
            done = self._counted_upto.get(label, 0)
            for prev, state in zip(view.history, view.history[1:]):
                if state.nonce <= done:
                    continue
                done = state.nonce
                if not prev.members:
                    continue
                head = self.contract.designated_header(cid, prev.nonce) or rotation_header(
                    prev.members, prev.nonce, self.contract.ignored_for(cid))
                seen[label][head] += 1
                self.header_log.append((label, prev.nonce, head))
            self._counted_upto[label] = done

    # ------------------------------------------------------------ assertions

    def _assert(self, where, name, ok, detail=""):
        self.assertions.append((f"{where}: {name}", bool(ok), detail))

    def _evaluate(self, exp: dict, where: str):
        c = self.contract
        canon = self.canonical()
        by_label = {self.labels.get(cid): v for cid, v in canon.items()}
        events = [json.loads(line) for line in self.trace]
        ev_kinds = defaultdict(list)
        for e in events:
            if e["kind"].startswith("event:"):
                ev_kinds[e["kind"][6:]].append(e["detail"])
        for label, want in sorted(exp.get("members", {}).items()):
            view = by_label.get(label)
            got = sorted(view.latest.members) if view else None
            self._assert(where, f"members of {label}", got == sorted(want), f"got {got}, want {sorted(want)}")
        base = canon.get(ZERO_ID)
        open_labels = set()
        if base is not None:
            stack = [base]
            while stack:
                v = stack.pop()
                for cid in v.children:
                    open_labels.add(self.labels.get(cid, _hex(cid)))
                    if cid in canon:
                        stack.append(canon[cid])
        for label in exp.get("closed", []):
            self._assert(where, f"{label} closed", label in by_label and label not in open_labels,
                         f"open children: {sorted(open_labels)}")
        for label in exp.get("open", []):
            self._assert(where, f"{label} open", label in open_labels, f"open children: {sorted(open_labels)}")
        counts = Counter(call.op for call in c.calls)
        for op, n in sorted(exp.get("calls", {}).items()):
            self._assert(where, f"{n} {op} call(s)", counts.get(op, 0) == n, f"got {counts.get(op, 0)}")
        if exp.get("only_calls"):
            extra = sorted(op for op in counts if op not in exp.get("calls", {}))
            self._assert(where, "no other contract calls", not extra, f"unexpected calls {extra}")
        for r in exp.get("rejected", []):
            hit = [x for x in c.calls if x.op == r["op"] and not x.ok and x.caller == r.get("caller", x.caller)]
            self._assert(where, f"rejected {r['op']} by {r.get('caller', 'anyone')}", hit,
                         "no such rejected call")
        for who in exp.get("penalized", []):
            self._assert(where, f"{who} penalized", c.penalties.get(who, 0) > 0, f"penalties {c.penalties}")

        def event_for(kind, **match):
            return any(all(d.get(k) == v for k, v in match.items()) for d in ev_kinds[kind])

        for who in exp.get("refunded", []):
            self._assert(where, f"{who} refunded", event_for("refund_paid", user=who))
        for who in exp.get("refund_cancelled", []):
            self._assert(where, f"{who} refund cancelled", event_for("refund_cancelled", user=who))
        for who in exp.get("withdrawal_voided", []):
            self._assert(where, f"{who} withdrawal voided", event_for("withdrawal_voided", user=who))
        for who in exp.get("withdrawn", []):
            self._assert(where, f"{who} withdrew", event_for("withdrawal_paid", user=who))
        for e in exp.get("expelled", []):
            self._assert(where, f"{e['party']} expelled from {e['channel']}",
                         event_for("member_expelled", accused=e["party"], channel=e["channel"]))
        for label in exp.get("app_ruled", []):
            self._assert(where, f"{label} ruled on chain", event_for("app_ruled", channel=label))
        for label in exp.get("header_replaced", []):
            self._assert(where, f"header replaced in {label}", event_for("header_replaced", channel=label))
        for label in exp.get("answer_voided", []):
            voided = [d for d in c.disputes if d.kind == "header" and d.status == "voided"
                      and self.labels.get(d.channel_id) == label]
            self._assert(where, f"stale answer voided in {label}", voided)
        for op in exp.get("disputes_rejected", []):
            hit = [x for x in c.calls if x.op == op and not x.ok]
            self._assert(where, f"{op} rejected", hit, "no rejected dispute")
        for d in exp.get("dropped", []):
            hit = [e for e in events if e["emitter"] == d["party"] and e["kind"] == "dropped"
                   and e["detail"].get("reason") == d["reason"]]
            self._assert(where, f"{d['party']} dropped a message ({d['reason']})", hit)
        for who, rule in sorted(exp.get("ledger", {}).items()):
            got = c.ledger.get(who, 0)
            if isinstance(rule, int):
                ok, text = got == rule, f"== {rule}"
            else:
                ok, text = got >= self.initial_ledger[who] + int(rule.get("at_least_delta", 0)), str(rule)
            self._assert(where, f"ledger of {who} {text}", ok, f"got {got}")
        for label, want in sorted(exp.get("header_counts", {}).items()):
            got = dict(self.header_counts.get(label, {}))
            self._assert(where, f"header counts in {label}", got == want, f"got {got}")

    def _safety(self):
        """Honest parties are never penalized and are paid exactly what their signed states promise."""
        c = self.contract
        canon = self.canonical()
        for who in sorted(self.honest):
            self._assert("safety", f"{who} not penalized", c.penalties.get(who, 0) == 0,
                         f"penalty {c.penalties.get(who, 0)}")
            p = self.parties[who]
            for cid, view in p.views.items():
                if view.closed:
                    continue
                top = canon[cid].latest
                if who in top.members and view.latest.digest() != top.digest():
                    self._assert("safety", f"{who} holds the latest state of {self.labels.get(cid, '?')}",
                                 False, f"nonce {view.latest.nonce} vs {top.nonce}")
            for w in c.withdrawals:
                if w.user == who and w.status == "paid":
                    removal = w.state.update.amount
                    got = removal - min(removal, c.penalties.get(who, 0))
                    self._assert("safety", f"{who} withdrawal paid in full", got == removal, f"{got} of {removal}")
            r = c.refunds.get(who)
            if r is not None and r.status == "paid":
                paid = [e for e in c.calls if e.caller == who and e.op == "withdraw_refund" and e.ok]
                self._assert("safety", f"{who} refunded exactly c+f once", len(paid) == 1)


def run_scenario(scenario: Scenario, seed: Optional[int] = None, max_rounds: Optional[int] = None,
                 workers: int = 1, trace_out=None, snapshot_every: int = SNAPSHOT_EVERY) -> RunResult:
    world = World(scenario, seed, workers, snapshot_every)
    result = world.run(max_rounds)
    if trace_out is not None:
        Path(trace_out).write_text(result.trace_text())
    return result
