"""Scenario files: loading and schema validation.

A scenario is a JSON object::

    {
      "format": "origami-scenario", "version": 1,
      "name": "...", "description": "...", "seed": 7,
      "parties": [{"name": "alice", "funds": 1000}, ...],
      "genesis": {"delta": 10, "penalty": "1/10", "entrance_fee": 1,
                  "modulus_bits": 64, "header_timeout": 2, "member_timeout": 2,
                  "autoplay": true,
                  "apps": [{"address": "app:count", "target": 4, "reward": 1, "mode": "turn"}]},
      "timeline": [{"round": 0, "party": "alice", "action": "deposit",
                    "args": {"amount": 100, "fee": 2, "via": "alice"}}, ...],
      "adversaries": [{"party": "mallory", "behaviors": ["silent"], "from_round": 40}],
      "expect": {...},
      "checkpoints": [{"round": 50, "expect": {...}}],
      "max_rounds": 400
    }

``load_scenario`` collects every problem before raising, so ``origami check``
can report them all at once.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

from .errors import ScenarioError
from .runtime import BEHAVIORS

FORMAT = "origami-scenario"
VERSION = 1

ACTIONS = {
    "deposit": {"amount", "fee"},
    "request_refund": set(),
    "withdraw_refund": set(),
    "cancel_refund": {"user"},
    "open_child": {"commitments"},
    "close_child": {"channel"},
    "app_move": {"channel"},
    "join_group": {"channel", "via", "amount"},
    "leave_group": {"channel"},
    "leave": set(),
    "go_silent": {"rounds"},
    "forge": {"what"},
    "replay_withdrawal": set(),
    "open_dispute": set(),
}

EXPECT_KEYS = {
    "members", "closed", "open", "calls", "only_calls", "rejected", "penalized", "refunded",
    "refund_cancelled", "expelled", "withdrawal_voided", "withdrawn", "app_ruled", "header_replaced",
    "dropped", "ledger", "header_counts", "answer_voided", "disputes_rejected",
}


@dataclass(frozen=True)
class AppConfig:
    address: str
    target: int = 5
    reward: int = 1
    mode: str = "turn"


@dataclass(frozen=True)
class Genesis:
    delta: int = 10
    penalty: Fraction = Fraction(1, 10)
    entrance_fee: int = 1
    modulus_bits: int = 64
    header_timeout: int = 2
    member_timeout: int = 2
    autoplay: bool = True
    apps: tuple = ()


@dataclass(frozen=True)
class Step:
    round: int
    party: str
    action: str
    args: dict


@dataclass(frozen=True)
class Adversary:
    party: str
    behaviors: tuple
    from_round: int = 0


@dataclass
class Scenario:
    name: str
    seed: int
    parties: dict
    genesis: Genesis
    timeline: list
    adversaries: list = field(default_factory=list)
    expect: dict = field(default_factory=dict)
    checkpoints: list = field(default_factory=list)
    max_rounds: int = 400
    description: str = ""

    @property
    def honest(self) -> list[str]:
        # Scripted silence is a deviation too, so those parties are not held to safety.
        bad = {a.party for a in self.adversaries} | {s.party for s in self.timeline if s.action == "go_silent"}
        return [p for p in self.parties if p not in bad]


def _int(problems, where, value, minimum=0):
    if isinstance(value, bool) or not isinstance(value, int) or value < minimum:
        problems.append(f"{where}: expected an integer >= {minimum}, got {value!r}")
        return minimum
    return value


def _parse_genesis(raw, problems) -> Genesis:
    if not isinstance(raw, dict):
        problems.append("genesis: expected an object")
        return Genesis()
    g = {}
    for key, minimum in (("delta", 1), ("entrance_fee", 0), ("modulus_bits", 16),
                         ("header_timeout", 1), ("member_timeout", 1)):
        if key in raw:
            g[key] = _int(problems, f"genesis.{key}", raw[key], minimum)
    if "penalty" in raw:
        try:
            pen = Fraction(str(raw["penalty"]))
            if not 0 <= pen <= 1:
                raise ValueError
            g["penalty"] = pen
        except (ValueError, ZeroDivisionError):
            problems.append(f"genesis.penalty: expected a fraction in [0, 1], got {raw['penalty']!r}")
    if "autoplay" in raw:
        g["autoplay"] = bool(raw["autoplay"])
    apps = []
    for i, a in enumerate(raw.get("apps", [])):
        if not isinstance(a, dict) or not isinstance(a.get("address"), str):
            problems.append(f"genesis.apps[{i}]: needs a string address")
            continue
        mode = a.get("mode", "turn")
        if mode not in ("turn", "header"):
            problems.append(f"genesis.apps[{i}].mode: unknown mode {mode!r}")
        apps.append(AppConfig(a["address"], _int(problems, f"genesis.apps[{i}].target", a.get("target", 5), 1),
                              _int(problems, f"genesis.apps[{i}].reward", a.get("reward", 1)), mode))
    g["apps"] = tuple(apps)
    return Genesis(**g)


def parse_scenario(raw) -> Scenario:
    problems: list[str] = []
    if not isinstance(raw, dict):
        raise ScenarioError("scenario must be a JSON object", ["top level is not an object"])
    if raw.get("format") != FORMAT:
        problems.append(f"format: expected {FORMAT!r}, got {raw.get('format')!r}")
    if raw.get("version") != VERSION:
        problems.append(f"version: expected {VERSION}, got {raw.get('version')!r}")
    name = raw.get("name")
    if not isinstance(name, str) or not name:
        problems.append("name: required non-empty string")
        name = "?"
    seed = _int(problems, "seed", raw.get("seed", 0))

    parties = {}
    for i, p in enumerate(raw.get("parties") or []):
        if isinstance(p, str):
            p = {"name": p}
        if not isinstance(p, dict) or not isinstance(p.get("name"), str) or not p["name"]:
            problems.append(f"parties[{i}]: needs a name")
            continue
        if p["name"] in parties:
            problems.append(f"parties[{i}]: duplicate party {p['name']!r}")
        parties[p["name"]] = _int(problems, f"parties[{i}].funds", p.get("funds", 1000))
    if not parties:
        problems.append("parties: at least one party is required")

    genesis = _parse_genesis(raw.get("genesis", {}), problems)
    max_rounds = _int(problems, "max_rounds", raw.get("max_rounds", 400), 1)

    timeline = []
    last_round = -1
    first_depositor = None
    for i, s in enumerate(raw.get("timeline") or []):
        where = f"timeline[{i}]"
        if not isinstance(s, dict):
            problems.append(f"{where}: expected an object")
            continue
        rnd = _int(problems, f"{where}.round", s.get("round"))
        if rnd < last_round:
            problems.append(f"{where}: round {rnd} is earlier than the previous entry's round {last_round}")
        last_round = max(last_round, rnd)
        if rnd >= max_rounds:
            problems.append(f"{where}: round {rnd} is beyond max_rounds {max_rounds}")
        party = s.get("party")
        if party not in parties:
            problems.append(f"{where} (round {rnd}): unknown party {party!r}")
        action = s.get("action")
        args = s.get("args", {})
        if action not in ACTIONS:
            problems.append(f"{where} (round {rnd}): unknown action {action!r}")
        elif not isinstance(args, dict):
            problems.append(f"{where} (round {rnd}): args must be an object")
        else:
            missing = sorted(ACTIONS[action] - set(args))
            if missing:
                problems.append(f"{where} (round {rnd}): action {action!r} is missing args {missing}")
            for key in ("via", "user", "as", "to"):
                if key in args and args[key] not in parties:
                    problems.append(f"{where} (round {rnd}): {key} names unknown party {args[key]!r}")
            if action == "open_child":
                for c in args.get("commitments", []):
                    if not (isinstance(c, list) and len(c) == 2 and c[0] in parties):
                        problems.append(f"{where} (round {rnd}): bad commitment {c!r}")
        args = dict(args) if isinstance(args, dict) else {}
        if action == "deposit":
            # Only the very first depositor founds the base channel; later joiners
            # default to asking that founder to redeem them.
            if first_depositor is None:
                first_depositor = args.get("via", party)
            elif "via" not in args:
                args["via"] = first_depositor
        timeline.append(Step(rnd, party, action, args))

    adversaries = []
    for i, a in enumerate(raw.get("adversaries") or []):
        if not isinstance(a, dict) or a.get("party") not in parties:
            problems.append(f"adversaries[{i}]: must bind behaviors to a declared party")
            continue
        behaviors = tuple(a.get("behaviors", ()))
        unknown = [b for b in behaviors if b not in BEHAVIORS]
        if unknown or not behaviors:
            problems.append(f"adversaries[{i}]: unknown or empty behaviors {unknown or behaviors}")
        adversaries.append(Adversary(a["party"], behaviors, _int(problems, f"adversaries[{i}].from_round",
                                                                   a.get("from_round", 0))))

    expect = raw.get("expect", {})
    checkpoints = raw.get("checkpoints", [])
    for where, exp in [("expect", expect)] + [(f"checkpoints[{i}].expect", c.get("expect", {}))
                                               for i, c in enumerate(checkpoints) if isinstance(c, dict)]:
        if not isinstance(exp, dict):
            problems.append(f"{where}: expected an object")
            continue
        unknown = sorted(set(exp) - EXPECT_KEYS)
        if unknown:
            problems.append(f"{where}: unknown assertion keys {unknown}")
    cps = []
    for i, c in enumerate(checkpoints):
        if not isinstance(c, dict):
            problems.append(f"checkpoints[{i}]: expected an object")
            continue
        cps.append((_int(problems, f"checkpoints[{i}].round", c.get("round")), c.get("expect", {})))

    if problems:
        raise ScenarioError(f"scenario {name!r} has {len(problems)} problem(s)", problems)
    return Scenario(name, seed, parties, genesis, timeline, adversaries, expect, cps, max_rounds,
                    raw.get("description", ""))


def load_scenario(path) -> Scenario:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except OSError as exc:
        raise ScenarioError(f"cannot read {path}", [str(exc)]) from None
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"{path} is not valid JSON", [f"line {exc.lineno}: {exc.msg}"]) from None
    return parse_scenario(raw)


def bundled_scenarios() -> list[Path]:
    return sorted((Path(__file__).parent / "scenarios").glob("*.json"))
