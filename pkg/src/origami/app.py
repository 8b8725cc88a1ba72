"""Application-contract interface and the demo counting game.

An app channel runs its own state type on top of an Origami supporting
channel. The app state always carries the channel's UCS, which is what the
supporting channel sees when the app is opened, edited or closed.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Mapping

from .errors import ParameterError, ProtocolError
from .signing import TAG_FIN, TAG_STATE, TAG_UCS, Directory, Signer
from .state import FinalisabilityTuple, Ucs, Writer, rotation_header, sha256, ucs_hash, write_ucs, write_fin
from .validation import Verdict, Violation

MODES = ("turn", "header")


@dataclass(frozen=True)
class DemoAppState:
    ucs: Ucs
    counter: int
    turn: str
    last_mover: str
    finalisability: FinalisabilityTuple
    fin_signatures: Mapping = field(default_factory=dict)
    signatures: Mapping = field(default_factory=dict)
    ucs_signatures: Mapping = field(default_factory=dict)

    @property
    def nonce(self) -> int:
        return self.ucs.nonce

    @property
    def channel_id(self) -> bytes:
        return self.ucs.channel_id

    @property
    def members(self) -> tuple[str, ...]:
        return self.ucs.members

    def digest(self) -> bytes:
        w = Writer().raw(b"origami/app-state")
        write_ucs(w, self.ucs)
        w.u64(self.counter).text(self.turn).text(self.last_mover)
        write_fin(w, self.finalisability)
        return sha256(w.getvalue())

    def signed_by(self, signer: Signer) -> "DemoAppState":
        a = signer.address
        sigs = {**self.signatures, a: signer.sign(TAG_STATE, self.digest())}
        usigs = {**self.ucs_signatures, a: signer.sign(TAG_UCS, ucs_hash(self.ucs))}
        fsigs = dict(self.fin_signatures)
        if self.finalisability.finalisable:
            fsigs[a] = signer.sign(TAG_FIN, self.finalisability.digest())
        return replace(self, signatures=sigs, ucs_signatures=usigs, fin_signatures=fsigs)

    def with_signatures(self, signatures=None, ucs_signatures=None, fin_signatures=None) -> "DemoAppState":
        return replace(
            self,
            signatures={**self.signatures, **(signatures or {})},
            ucs_signatures={**self.ucs_signatures, **(ucs_signatures or {})},
            fin_signatures={**self.fin_signatures, **(fin_signatures or {})},
        )


def _next_player(members, mover: str, skip=frozenset()) -> str:
    members = list(members)
    i = members.index(mover)
    for step in range(1, len(members) + 1):
        cand = members[(i + step) % len(members)]
        if cand not in skip:
            return cand
    return mover


@dataclass(frozen=True)
class AppContractSpec:
    """Demo application contract: players take turns incrementing a counter.

    Each move moves ``reward`` coins (or whatever is left) from the next
    player to the mover. The game is finalisable once the counter reaches
    ``target``. In ``header`` mode any player may move and the Origami header
    scheme orders concurrent moves; in ``turn`` mode only ``state.turn`` may.
    """

    address: str
    target: int = 5
    reward: int = 1
    mode: str = "turn"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ParameterError(f"app mode must be one of {MODES}")
        if self.target < 1 or self.reward < 0:
            raise ParameterError("target must be positive and reward non-negative")

    def genesis(self, opening: Ucs) -> DemoAppState:
        """Opening-state injection: the app starts from the UCS committed in the parent."""
        if opening.contract_address != self.address:
            raise ParameterError("opening UCS is not governed by this app contract")
        if opening.nonce != 0 or len(opening.members) < 2:
            raise ParameterError("an app opens from a nonce-0 UCS with at least two players")
        first = opening.members[0]
        return DemoAppState(opening, 0, first, "", FinalisabilityTuple(False, 0, opening.channel_id))

    def is_finalisable(self, state: DemoAppState) -> bool:
        return state.counter >= self.target

    def flag_is_appropriate(self, state: DemoAppState) -> bool:
        fin = state.finalisability
        return (fin.finalisable == self.is_finalisable(state)
                and fin.nonce == state.nonce and fin.channel_id == state.channel_id)

    def round_header(self, state: DemoAppState, skip=frozenset()) -> str:
        return rotation_header(state.members, state.nonce, skip)

    def move(self, state: DemoAppState, mover: str, skip=frozenset()) -> DemoAppState:
        """Unsigned successor of ``state`` after ``mover`` plays."""
        if mover not in state.members:
            raise ProtocolError(f"{mover} does not play in this app channel")
        if self.mode == "turn" and mover != state.turn:
            raise ProtocolError(f"it is {state.turn}'s turn, not {mover}'s")
        if self.is_finalisable(state):
            raise ProtocolError("the game is already over")
        victim = _next_player(state.members, mover, skip)
        bal = state.ucs.balances()
        amount = min(self.reward, bal[victim]) if victim != mover else 0
        bal[mover] += amount
        bal[victim] -= amount
        sheet = tuple((m, bal[m]) for m in state.members)
        ucs = state.ucs.with_sheet(sheet, nonce=state.nonce + 1)
        counter = state.counter + 1
        fin = FinalisabilityTuple(counter >= self.target, ucs.nonce, ucs.channel_id)
        return DemoAppState(ucs, counter, victim, mover, fin)

    def validate_app_transition(self, prev: DemoAppState, new: DemoAppState, skip=frozenset()) -> Verdict:
        out = []

        def check(ok, rule, detail):
            if not ok:
                out.append(Violation(rule, detail))

        check(new.nonce == prev.nonce + 1, "app-nonce", "app nonce must grow by one")
        check(new.channel_id == prev.channel_id and new.ucs.contract_address == prev.ucs.contract_address
              and new.members == prev.members, "app-channel", "app UCS describes another channel")
        check(new.counter == prev.counter + 1, "app-counter", "counter must grow by exactly one")
        mover = new.last_mover
        legal = mover in prev.members and mover not in skip and not self.is_finalisable(prev)
        if self.mode == "turn":
            legal = legal and mover == prev.turn
        check(legal, "app-turn", f"{mover!r} may not move now")
        if legal:
            want = self.move(prev, mover, skip)
            check(new.ucs.balance_sheet == want.ucs.balance_sheet and new.turn == want.turn,
                  "app-balances", "balances or turn differ from the move rules")
        check(self.flag_is_appropriate(new), "app-finalisability", "finalisability flag is not appropriate")
        return Verdict(tuple(out))

    def mark_finalisable(self, state: DemoAppState, signers) -> dict[str, bytes]:
        """Finalisability signatures from every signer; refuses a premature flag."""
        if not (state.finalisability.finalisable and self.flag_is_appropriate(state)):
            raise ProtocolError("state is not finalisable")
        digest = state.finalisability.digest()
        return {s.address: s.sign(TAG_FIN, digest) for s in signers}


def app_missing_signers(state: DemoAppState, directory: Directory, skip=frozenset(), stage_signers=None) -> list[str]:
    """Players whose state, UCS or (when flagged) finalisability signature is missing."""
    who = set(state.members) - set(skip) if stage_signers is None else set(stage_signers)
    digest, uh = state.digest(), ucs_hash(state.ucs)
    fin_digest = state.finalisability.digest()
    missing = []
    for a in sorted(who):
        ok = (directory.verify(a, TAG_STATE, digest, state.signatures.get(a))
              and directory.verify(a, TAG_UCS, uh, state.ucs_signatures.get(a)))
        if ok and state.finalisability.finalisable:
            ok = directory.verify(a, TAG_FIN, fin_digest, state.fin_signatures.get(a))
        if not ok:
            missing.append(a)
    return missing


class AppRegistry:
    """App contracts known at genesis, keyed by address."""

    def __init__(self, specs=()):
        self._specs = {s.address: s for s in specs}

    def get(self, address: str) -> AppContractSpec:
        try:
            return self._specs[address]
        except KeyError:
            raise ParameterError(f"no app contract at {address!r}") from None

    def __contains__(self, address) -> bool:
        return address in self._specs

    def addresses(self) -> frozenset:
        return frozenset(self._specs)
