from dataclasses import replace

import pytest
from hypothesis import given
from hypothesis import strategies as st

from origami.app import AppContractSpec, AppRegistry, app_missing_signers
from origami.errors import ParameterError, ProtocolError
from origami.state import Ucs, derive_channel_id

CID = derive_channel_id(bytes(32), 3)


def opening(address="app:count", sheet=(("alice", 5), ("bob", 5))):
    return Ucs(0, sheet, CID, address)


def test_genesis_injects_opening_ucs() -> None:
    app_def = AppContractSpec("app:count", target=3)
    g = app_def.genesis(opening())
    assert g.ucs == opening()
    assert g.counter == 0 and g.turn == "alice"
    assert not g.finalisability.finalisable
    with pytest.raises(ParameterError):
        app_def.genesis(opening("app:other"))
    with pytest.raises(ParameterError):
        app_def.genesis(opening(sheet=(("alice", 5),)))


def test_turn_mode_moves() -> None:
    app_def = AppContractSpec("app:count", target=2, reward=2)
    g = app_def.genesis(opening())
    with pytest.raises(ProtocolError):
        app_def.move(g, "bob")
    s1 = app_def.move(g, "alice")
    assert s1.ucs.balances() == {"alice": 7, "bob": 3}
    assert s1.turn == "bob" and s1.nonce == 1
    s2 = app_def.move(s1, "bob")
    assert s2.finalisability.finalisable
    assert s2.finalisability.nonce == 2
    with pytest.raises(ProtocolError):
        app_def.move(s2, "alice")


def test_header_mode_lets_anyone_move() -> None:
    app_def = AppContractSpec("app:race", target=4, mode="header")
    g = app_def.genesis(opening("app:race"))
    s = app_def.move(g, "bob")
    assert app_def.validate_app_transition(g, s).accepted


def test_transition_checks() -> None:
    app_def = AppContractSpec("app:count", target=3)
    g = app_def.genesis(opening())
    good = app_def.move(g, "alice")
    assert app_def.validate_app_transition(g, good).accepted
    stolen = replace(good, ucs=good.ucs.with_sheet((("alice", 9), ("bob", 1))))
    assert app_def.validate_app_transition(g, stolen).rules == ("app-balances",)
    early = replace(good, finalisability=replace(good.finalisability, finalisable=True))
    assert app_def.validate_app_transition(g, early).rules == ("app-finalisability",)
    wrong_turn = replace(good, last_mover="bob")
    assert "app-turn" in app_def.validate_app_transition(g, wrong_turn).rules
    skipped = replace(good, counter=2)
    assert app_def.validate_app_transition(g, skipped).rules == ("app-counter",)


def test_signatures_and_finalisability(keys) -> None:
    signers, directory = keys
    app_def = AppContractSpec("app:count", target=1)
    g = app_def.genesis(opening())
    done = app_def.move(g, "alice")
    assert app_missing_signers(done, directory) == ["alice", "bob"]
    signed = done.signed_by(signers["alice"]).signed_by(signers["bob"])
    assert app_missing_signers(signed, directory) == []
    no_fin = replace(signed, fin_signatures={"alice": signed.fin_signatures["alice"]})
    assert app_missing_signers(no_fin, directory) == ["bob"]
    assert set(app_def.mark_finalisable(done, [signers["alice"]])) == {"alice"}
    with pytest.raises(ProtocolError):
        app_def.mark_finalisable(g, [signers["alice"]])


def test_registry_lookup() -> None:
    reg = AppRegistry([AppContractSpec("app:a"), AppContractSpec("app:b")])
    assert "app:a" in reg and "app:c" not in reg
    assert reg.addresses() == frozenset({"app:a", "app:b"})
    with pytest.raises(ParameterError):
        reg.get("app:c")


@given(st.integers(min_value=1, max_value=12), st.integers(min_value=0, max_value=4),
       st.integers(min_value=0, max_value=20), st.integers(min_value=0, max_value=20))
def test_moves_conserve_value(target, reward, a, b) -> None:
    app_def = AppContractSpec("app:count", target=target, reward=reward)
    s = app_def.genesis(opening(sheet=(("alice", a), ("bob", b), ("carol", 1))))
    while not app_def.is_finalisable(s):
        nxt = app_def.move(s, s.turn)
        assert app_def.validate_app_transition(s, nxt).accepted
        assert nxt.ucs.total == a + b + 1
        assert all(v >= 0 for _, v in nxt.ucs.balance_sheet)
        s = nxt
    assert s.counter == target
