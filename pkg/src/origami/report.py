"""Run reports: a summary of one simulation, as text or JSON."""
from __future__ import annotations

import json
from collections import Counter
from dataclasses import asdict, dataclass, field

from .simnet import RunResult
from .state import ZERO_ID

# Which protocol phase each contract operation belongs to.
PHASES = {
    "deposit": "opening",
    "redeem_add_user": "opening",
    "request_refund": "opening",
    "cancel_refund": "opening",
    "withdraw_refund": "opening",
    "open_header_dispute": "update",
    "answer_header_dispute": "update",
    "challenge_header_answer": "update",
    "open_member_dispute": "update",
    "answer_member_dispute": "update",
    "challenge_member_dispute": "update",
    "open_app_dispute": "update",
    "answer_app_dispute": "update",
    "withdraw_on_remove": "closing",
    "challenge_withdrawal": "closing",
}


@dataclass
class RunReport:
    scenario: str
    seed: int
    rounds: int
    parties: int
    calls: dict
    rejected_calls: dict
    phases: dict
    disputes: dict
    penalties: dict
    ledger: dict
    base_balances: dict
    audit_failures: list
    assertions: list = field(default_factory=list)
    passed: bool = True

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2)

    def to_text(self) -> str:
        out = [f"scenario {self.scenario} (seed {self.seed}): {self.rounds} rounds"]
        out.append("on-chain transactions by phase:")
        for phase in ("opening", "update", "closing"):
            n = self.phases.get(phase, 0)
            out.append(f"  {phase:<8} {n:>4}  ({n / max(1, self.parties):.1f} per party)")
        out.append("contract calls:")
        for op, n in sorted(self.calls.items()):
            bad = self.rejected_calls.get(op, 0)
            out.append(f"  {op:<26} {n}" + (f" ({bad} rejected)" if bad else ""))
        d = self.disputes
        out.append("disputes: " + ", ".join(f"{k} {v}" for k, v in sorted(d.items())) if d else "disputes: none")
        if self.penalties:
            out.append("penalties: " + ", ".join(f"{k} {v}" for k, v in sorted(self.penalties.items())))
        out.append("ledger: " + ", ".join(f"{k} {v}" for k, v in sorted(self.ledger.items())))
        if self.base_balances:
            out.append("base channel: " + ", ".join(f"{k} {v}" for k, v in self.base_balances.items()))
        for line in self.audit_failures:
            out.append(f"AUDIT FAIL {line}")
        for name, ok, detail in self.assertions:
            out.append(f"{'PASS' if ok else 'FAIL'} {name}" + ("" if ok or not detail else f" ({detail})"))
        out.append("result: " + ("PASS" if self.passed else "FAIL"))
        return "\n".join(out)


def build_report(result: RunResult) -> RunReport:
    c = result.contract
    calls = Counter(x.op for x in c.calls)
    rejected = Counter(x.op for x in c.calls if not x.ok)
    phases = Counter()
    for op, n in calls.items():
        phases[PHASES.get(op, "other")] += n
    disputes = Counter()
    for d in c.disputes:
        disputes[f"{d.kind}-{d.status}"] += 1
    base = None
    for p in result.parties.values():
        v = p.views.get(ZERO_ID)
        if v is not None and (base is None or v.latest.nonce > base.latest.nonce):
            base = v
    balances = dict(base.latest.ucs.balance_sheet) if base else {}
    return RunReport(
        scenario=result.scenario.name, seed=result.seed, rounds=result.rounds,
        parties=len(result.scenario.parties),
        calls=dict(sorted(calls.items())), rejected_calls=dict(sorted(rejected.items())),
        phases={k: phases.get(k, 0) for k in ("opening", "update", "closing")},
        disputes=dict(sorted(disputes.items())),
        penalties={k: v for k, v in sorted(c.penalties.items()) if v},
        ledger=dict(sorted(c.ledger.items())), base_balances=balances,
        audit_failures=list(result.audit_failures),
        assertions=[list(a) for a in result.assertions], passed=result.passed,
    )


def recount_calls(trace_lines) -> Counter:
    """Contract-call tally recomputed from trace records alone."""
    counts = Counter()
    for line in trace_lines:
        rec = json.loads(line)
        if rec["kind"].startswith("call:"):
            counts[rec["kind"][5:]] += 1
    return counts


PENALTY_EVENTS = ("event:header_replaced", "event:member_expelled", "event:app_ruled")


def recount_disputes(trace_lines) -> Counter:
    """Disputes opened per kind, from the trace."""
    counts = Counter()
    for line in trace_lines:
        kind = json.loads(line)["kind"]
        if kind.startswith("event:") and kind.endswith("_dispute_opened"):
            counts[kind[6:-len("_dispute_opened")]] += 1
    return counts


def recount_penalties(trace_lines) -> Counter:
    """Penalty totals per accused party, from the trace."""
    totals = Counter()
    for line in trace_lines:
        rec = json.loads(line)
        if rec["kind"] in PENALTY_EVENTS and rec["detail"].get("penalty"):
            totals[rec["detail"]["accused"]] += rec["detail"]["penalty"]
    return totals
