import json

import pytest

from origami.errors import ScenarioError
from origami.scenario import bundled_scenarios, load_scenario, parse_scenario


def minimal(**over):
    doc = {
        "format": "origami-scenario", "version": 1, "name": "tiny", "seed": 1,
        "parties": [{"name": "alice", "funds": 10}, {"name": "bob", "funds": 10}],
        "timeline": [{"round": 0, "party": "alice", "action": "deposit", "args": {"amount": 5, "fee": 1}}],
    }
    doc.update(over)
    return doc


def test_minimal_parses_with_defaults() -> None:
    s = parse_scenario(minimal())
    assert s.parties == {"alice": 10, "bob": 10}
    assert s.genesis.delta == 10
    assert s.honest == ["alice", "bob"]


def test_all_problems_reported_together() -> None:
    doc = minimal(version=2, timeline=[
        {"round": 5, "party": "alice", "action": "deposit", "args": {"amount": 5}},
        {"round": 3, "party": "mallory", "action": "fly", "args": {}},
    ])
    with pytest.raises(ScenarioError) as info:
        parse_scenario(doc)
    text = "\n".join(info.value.problems)
    assert "version" in text
    assert "round 5" in text and "missing args ['fee']" in text
    assert "round 3 is earlier" in text
    assert "unknown party 'mallory'" in text
    assert "unknown action 'fly'" in text


def test_adversaries_must_bind_declared_parties() -> None:
    with pytest.raises(ScenarioError):
        parse_scenario(minimal(adversaries=[{"party": "zed", "behaviors": ["silent"]}]))
    with pytest.raises(ScenarioError):
        parse_scenario(minimal(adversaries=[{"party": "bob", "behaviors": ["teleport"]}]))
    s = parse_scenario(minimal(adversaries=[{"party": "bob", "behaviors": ["silent"], "from_round": 4}]))
    assert s.adversaries[0].from_round == 4
    assert s.honest == ["alice"]


def test_unknown_expectation_keys_rejected() -> None:
    with pytest.raises(ScenarioError) as info:
        parse_scenario(minimal(expect={"vibes": 1}))
    assert "vibes" in info.value.problems[0]


def test_load_reports_bad_json(tmp_path) -> None:
    p = tmp_path / "bad.json"
    p.write_text("{not json")
    with pytest.raises(ScenarioError):
        load_scenario(p)
    with pytest.raises(ScenarioError):
        load_scenario(tmp_path / "missing.json")


def test_bundled_scenarios_all_parse() -> None:
    paths = bundled_scenarios()
    assert len(paths) >= 10
    names = set()
    for p in paths:
        s = load_scenario(p)
        names.add(s.name)
        assert len(s.parties) >= 6
        assert json.loads(p.read_text())["format"] == "origami-scenario"
    assert len(names) == len(paths)
