"""Channel state data model, canonical encoding and hashing.

Encoding rules: fields in declaration order, integers as 8-byte big-endian,
strings and byte strings 4-byte length-prefixed, lists count-prefixed, update
variants prefixed by a one-byte tag, group elements as length-prefixed
big-endian magnitudes. Signature maps are encoded sorted by address.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace
from typing import Mapping, Union

from .accumulator import Accumulator, GroupParams, decode_element, encode_element
from .errors import ParameterError, ProtocolError
from .signing import TAG_FIN, TAG_STATE, TAG_UCS, Directory, Signer

ZERO_ID = bytes(32)
MANAGEMENT_CONTRACT = "origami:management"
U64_MAX = (1 << 64) - 1

Address = str
Signatures = Mapping[str, bytes]


def sha256(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


class Writer:
    def __init__(self):
        self._parts: list[bytes] = []

    def u8(self, v: int):
        self._parts.append(bytes([v]))
        return self

    def u64(self, v: int):
        if not 0 <= v <= U64_MAX:
            raise ParameterError(f"integer {v} outside unsigned 64-bit range")
        self._parts.append(v.to_bytes(8, "big"))
        return self

    def raw(self, b: bytes):
        self._parts.append(bytes(b))
        return self

    def blob(self, b: bytes):
        self._parts.append(len(b).to_bytes(4, "big") + bytes(b))
        return self

    def text(self, s: str):
        return self.blob(s.encode("utf-8"))

    def boolean(self, v: bool):
        return self.u8(1 if v else 0)

    def element(self, v: int):
        self._parts.append(encode_element(v))
        return self

    def sigs(self, m: Signatures):
        self._parts.append(len(m).to_bytes(4, "big"))
        for addr in sorted(m):
            self.text(addr).blob(m[addr])
        return self

    def getvalue(self) -> bytes:
        return b"".join(self._parts)


class Reader:
    def __init__(self, data: bytes):
        self.data = bytes(data)
        self.pos = 0

    def _take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise ParameterError("truncated encoding")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u8(self) -> int:
        return self._take(1)[0]

    def u64(self) -> int:
        return int.from_bytes(self._take(8), "big")

    def raw(self, n: int) -> bytes:
        return self._take(n)

    def blob(self) -> bytes:
        return self._take(int.from_bytes(self._take(4), "big"))

    def text(self) -> str:
        return self.blob().decode("utf-8")

    def boolean(self) -> bool:
        v = self.u8()
        if v > 1:
            raise ParameterError("bad boolean byte")
        return v == 1

    def element(self) -> int:
        value, self.pos = decode_element(self.data, self.pos)
        return value

    def sigs(self) -> dict[str, bytes]:
        count = int.from_bytes(self._take(4), "big")
        return {self.text(): self.blob() for _ in range(count)}

    def done(self):
        if self.pos != len(self.data):
            raise ParameterError("trailing bytes after encoding")


@dataclass(frozen=True)
class Ucs:
    nonce: int
    balance_sheet: tuple
    channel_id: bytes
    contract_address: str

    def __post_init__(self):
        sheet = tuple((str(a), int(b)) for a, b in self.balance_sheet)
        object.__setattr__(self, "balance_sheet", sheet)
        object.__setattr__(self, "channel_id", bytes(self.channel_id))
        addrs = [a for a, _ in sheet]
        if len(set(addrs)) != len(addrs):
            raise ParameterError("duplicate address in balance sheet")
        if any(b < 0 or b > U64_MAX for _, b in sheet):
            raise ParameterError("balances must be unsigned 64-bit integers")
        if not 0 <= self.nonce <= U64_MAX:
            raise ParameterError("nonce out of range")
        if len(self.channel_id) != 32:
            raise ParameterError("channel id must be 32 bytes")

    @property
    def members(self) -> tuple[str, ...]:
        return tuple(a for a, _ in self.balance_sheet)

    def balance(self, address: str) -> int:
        for a, b in self.balance_sheet:
            if a == address:
                return b
        raise KeyError(address)

    def balances(self) -> dict[str, int]:
        return dict(self.balance_sheet)

    @property
    def total(self) -> int:
        return sum(b for _, b in self.balance_sheet)

    def with_sheet(self, sheet, nonce=None) -> "Ucs":
        return replace(self, balance_sheet=tuple(sheet), nonce=self.nonce if nonce is None else nonce)


@dataclass(frozen=True)
class FinalisabilityTuple:
    finalisable: bool
    nonce: int
    channel_id: bytes

    def digest(self) -> bytes:
        return sha256(canonical_encode(self))


@dataclass(frozen=True)
class OpenUpdate:
    new_ucs: Ucs
    new_ucs_hash: bytes
    new_ucs_signatures: Mapping = field(default_factory=dict)

    tag = 1


@dataclass(frozen=True)
class CloseUpdate:
    last_committed_ucs: Ucs
    recent_ucs: Ucs
    last_committed_ucs_hash: bytes
    finalisability: FinalisabilityTuple
    finalisability_signatures: Mapping = field(default_factory=dict)
    recent_ucs_signatures: Mapping = field(default_factory=dict)

    tag = 2


@dataclass(frozen=True)
class EditUpdate:
    last_committed_ucs: Ucs
    new_ucs: Ucs
    last_committed_ucs_hash: bytes
    new_ucs_hash: bytes
    new_ucs_signatures: Mapping = field(default_factory=dict)

    tag = 3


@dataclass(frozen=True)
class AddUserUpdate:
    user: str
    amount: int

    tag = 4


@dataclass(frozen=True)
class RemoveUserUpdate:
    user: str
    amount: int

    tag = 5


UpdatePayload = Union[OpenUpdate, CloseUpdate, EditUpdate, AddUserUpdate, RemoveUserUpdate]
VARIETY = {OpenUpdate: "open", CloseUpdate: "close", EditUpdate: "edit",
           AddUserUpdate: "add-user", RemoveUserUpdate: "remove-user"}


def variety(update) -> str:
    return VARIETY[type(update)]


@dataclass(frozen=True)
class ChannelState:
    ucs: Ucs
    openings: Accumulator
    header: str
    update: UpdatePayload
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
        """Digest every member signs: the state without any signature map."""
        w = Writer().raw(b"origami/state")
        _write_state_body(w, self, with_sigs=False)
        return sha256(w.getvalue())

    def signed_by(self, signer: Signer) -> "ChannelState":
        sigs = dict(self.signatures)
        sigs[signer.address] = signer.sign(TAG_STATE, self.digest())
        usigs = dict(self.ucs_signatures)
        usigs[signer.address] = signer.sign(TAG_UCS, ucs_hash(self.ucs))
        return replace(self, signatures=sigs, ucs_signatures=usigs)

    def with_signatures(self, signatures=None, ucs_signatures=None) -> "ChannelState":
        return replace(
            self,
            signatures={**self.signatures, **(signatures or {})},
            ucs_signatures={**self.ucs_signatures, **(ucs_signatures or {})},
        )


@dataclass(frozen=True)
class SignedEnvelope:
    payload_digest: bytes
    signer: str
    signature: bytes

    def verify(self, directory: Directory, tag: bytes = TAG_STATE) -> bool:
        return directory.verify(self.signer, tag, self.payload_digest, self.signature)


# ---------------------------------------------------------------- encoding

def write_ucs(w: Writer, u: Ucs):
    w.u64(u.nonce)
    w.raw(len(u.balance_sheet).to_bytes(4, "big"))
    for addr, bal in u.balance_sheet:
        w.text(addr).u64(bal)
    w.raw(u.channel_id).text(u.contract_address)


def _read_ucs(r: Reader) -> Ucs:
    nonce = r.u64()
    count = int.from_bytes(r.raw(4), "big")
    sheet = tuple((r.text(), r.u64()) for _ in range(count))
    return Ucs(nonce, sheet, r.raw(32), r.text())


def write_fin(w: Writer, f: FinalisabilityTuple):
    w.boolean(f.finalisable).u64(f.nonce).raw(f.channel_id)


def _read_fin(r: Reader) -> FinalisabilityTuple:
    return FinalisabilityTuple(r.boolean(), r.u64(), r.raw(32))


def _write_update(w: Writer, up, with_sigs: bool):
    w.u8(up.tag)
    if isinstance(up, OpenUpdate):
        write_ucs(w, up.new_ucs)
        w.raw(up.new_ucs_hash)
        if with_sigs:
            w.sigs(up.new_ucs_signatures)
    elif isinstance(up, CloseUpdate):
        write_ucs(w, up.last_committed_ucs)
        write_ucs(w, up.recent_ucs)
        w.raw(up.last_committed_ucs_hash)
        write_fin(w, up.finalisability)
        if with_sigs:
            w.sigs(up.finalisability_signatures).sigs(up.recent_ucs_signatures)
    elif isinstance(up, EditUpdate):
        write_ucs(w, up.last_committed_ucs)
        write_ucs(w, up.new_ucs)
        w.raw(up.last_committed_ucs_hash).raw(up.new_ucs_hash)
        if with_sigs:
            w.sigs(up.new_ucs_signatures)
    elif isinstance(up, (AddUserUpdate, RemoveUserUpdate)):
        w.text(up.user).u64(up.amount)
    else:
        raise ParameterError(f"unknown update payload {type(up).__name__}")


def _read_update(r: Reader):
    tag = r.u8()
    if tag == 1:
        return OpenUpdate(_read_ucs(r), r.raw(32), r.sigs())
    if tag == 2:
        last, recent, h, fin = _read_ucs(r), _read_ucs(r), r.raw(32), _read_fin(r)
        return CloseUpdate(last, recent, h, fin, r.sigs(), r.sigs())
    if tag == 3:
        last, new = _read_ucs(r), _read_ucs(r)
        return EditUpdate(last, new, r.raw(32), r.raw(32), r.sigs())
    if tag == 4:
        return AddUserUpdate(r.text(), r.u64())
    if tag == 5:
        return RemoveUserUpdate(r.text(), r.u64())
    raise ParameterError(f"unknown update tag {tag}")


def _write_state_body(w: Writer, s: ChannelState, with_sigs: bool):
    write_ucs(w, s.ucs)
    w.element(s.openings.value).u64(s.openings.epoch)
    w.text(s.header)
    _write_update(w, s.update, with_sigs)


def canonical_encode(value) -> bytes:
    w = Writer()
    if isinstance(value, Ucs):
        write_ucs(w, value)
    elif isinstance(value, FinalisabilityTuple):
        write_fin(w, value)
    elif isinstance(value, ChannelState):
        _write_state_body(w, value, with_sigs=True)
        w.sigs(value.signatures).sigs(value.ucs_signatures)
    else:
        raise ParameterError(f"cannot encode {type(value).__name__}")
    return w.getvalue()


def decode_ucs(data: bytes) -> Ucs:
    r = Reader(data)
    u = _read_ucs(r)
    r.done()
    return u


def decode_finalisability(data: bytes) -> FinalisabilityTuple:
    r = Reader(data)
    f = _read_fin(r)
    r.done()
    return f


def decode_state(data: bytes, params: GroupParams) -> ChannelState:
    r = Reader(data)
    ucs = _read_ucs(r)
    acc = Accumulator(params, r.element(), r.u64())
    header = r.text()
    update = _read_update(r)
    state = ChannelState(ucs, acc, header, update, r.sigs(), r.sigs())
    r.done()
    return state


def ucs_hash(ucs: Ucs) -> bytes:
    return sha256(canonical_encode(ucs))


def derive_channel_id(parent_id: bytes, parent_nonce: int) -> bytes:
    return sha256(bytes(parent_id) + parent_nonce.to_bytes(8, "big"))


def rotation_header(members, nonce: int, skip=frozenset()) -> str:
    """Header designated by a state with ``nonce`` over ``members``.

    Position is nonce mod len(members); members in ``skip`` (expelled by the
    contract) are passed over without shifting anyone else's position.
    """
    members = list(members)
    if not members:
        raise ProtocolError("cannot pick a header from an empty balance sheet")
    n = len(members)
    start = nonce % n
    for step in range(n):
        candidate = members[(start + step) % n]
        if candidate not in skip:
            return candidate
    raise ProtocolError("every member is expelled; no header available")


def next_header(current_state: ChannelState, skip=frozenset()) -> str:
    return rotation_header(current_state.ucs.members, current_state.ucs.nonce, skip)


def fin_digest(fin: FinalisabilityTuple) -> bytes:
    return fin.digest()


def sign_fin(signer: Signer, fin: FinalisabilityTuple) -> bytes:
    return signer.sign(TAG_FIN, fin.digest())


def sign_ucs(signer: Signer, ucs: Ucs) -> bytes:
    return signer.sign(TAG_UCS, ucs_hash(ucs))


def hexdigest(b: bytes) -> str:
    return bytes(b).hex()
