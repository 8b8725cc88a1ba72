from dataclasses import replace

from origami.app import AppRegistry
from origami.contract import ManagementContract
from origami.runtime import BEHAVIORS, Message, Party, RuntimeConfig
from origami.signing import TAG_MSG
from origami.state import ZERO_ID


def setup(params, keys, behaviors=None):
    signers, directory = keys
    cfg = RuntimeConfig(params, directory, AppRegistry(), delta=5)
    chain = ManagementContract(params, directory, {"alice": 100, "bob": 100}, delta=5)
    behaviors = behaviors or {}
    parties = {a: Party(a, signers[a], cfg, behaviors.get(a, ())) for a in ("alice", "bob")}
    return parties, chain


def apply_calls(chain, fx, now):
    for call in fx.calls:
        getattr(chain, call.op)(call.caller, now=now, **call.kwargs)


def test_founder_deposit_opens_base_view(params, keys) -> None:
    parties, chain = setup(params, keys)
    fx = parties["alice"].step(0, [], [], [{"action": "deposit", "args": {"amount": 10, "fee": 1}}], chain)
    assert [c.op for c in fx.calls] == ["deposit"]
    assert ZERO_ID in parties["alice"].views
    apply_calls(chain, fx, 0)
    fx = parties["alice"].step(1, [], chain.pop_events(), [], chain)
    # With nobody else around the founder signs alone and redeems its own deposit.
    assert [c.op for c in fx.calls] == ["redeem_add_user"]
    apply_calls(chain, fx, 1)
    assert chain.registry == {"alice": 10}


def test_joiner_asks_via_member(params, keys) -> None:
    parties, chain = setup(params, keys)
    fx = parties["bob"].step(0, [], [], [{"action": "deposit", "args": {"amount": 10, "fee": 1, "via": "alice"}}],
                             chain)
    assert [m.kind for m in fx.messages] == ["join_request"]
    assert fx.messages[0].recipient == "alice"
    assert ZERO_ID not in parties["bob"].views


def test_message_with_bad_signature_dropped(params, keys) -> None:
    signers, _ = keys
    parties, chain = setup(params, keys)
    msg = Message("bob", "alice", "join_request", ZERO_ID, {"amount": 1, "fee": 1}, 1)
    forged = replace(msg, signature=signers["zed"].sign(TAG_MSG, msg.digest()))
    fx = parties["alice"].step(0, [forged], [], [], chain)
    assert ("dropped", {"reason": "bad-message-signature", "sender": "bob", "kind": "join_request"}) in fx.notes
    good = replace(msg, signature=signers["bob"].sign(TAG_MSG, msg.digest()))
    fx = parties["alice"].step(1, [good], [], [], chain)
    # alice has no base channel yet, so the request is dropped for another reason
    assert fx.notes[0][1]["reason"] == "no-deposit"


def test_message_digest_covers_body() -> None:
    a = Message("bob", "alice", "k", ZERO_ID, {"amount": 1}, 1)
    assert a.digest() != replace(a, body={"amount": 2}).digest()
    assert a.digest() != replace(a, seq=2).digest()
    assert a.digest() == Message("bob", "alice", "k", ZERO_ID, {"amount": 1}, 1).digest()


def test_silent_behavior_armed_from_round(params, keys) -> None:
    parties, chain = setup(params, keys, {"alice": ("silent",)})
    alice = parties["alice"]
    alice.armed_from = 3
    fx = alice.step(0, [], [], [{"action": "deposit", "args": {"amount": 10, "fee": 1}}], chain)
    assert fx.calls
    fx = alice.step(3, [], [], [{"action": "deposit", "args": {"amount": 10, "fee": 1}}], chain)
    assert not fx.calls and not fx.messages


def test_scripted_silence_expires(params, keys) -> None:
    parties, chain = setup(params, keys)
    bob = parties["bob"]
    bob.step(0, [], [], [{"action": "go_silent", "args": {"rounds": 2}}], chain)
    assert bob.silent
    bob.step(2, [], [], [], chain)
    assert not bob.silent


def test_behavior_names() -> None:
    assert set(BEHAVIORS) >= {"silent", "forge", "alter-amounts", "stale-post", "double-redeem"}
