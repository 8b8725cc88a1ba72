"""Deterministic Ed25519 signing keyed by party address.

Each party holds a :class:`Signer`; everyone (including the contract) shares a
:class:`Directory` of public keys. Signatures always cover a 32-byte digest
prefixed with a domain tag so a state signature can never be replayed as a UCS
or message signature.
"""
from __future__ import annotations

import hashlib
from functools import lru_cache

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)
from cryptography.hazmat.primitives.serialization import Encoding, PublicFormat

TAG_STATE = b"state"
TAG_UCS = b"ucs"
TAG_FIN = b"fin"
TAG_MSG = b"msg"


def _signed_bytes(tag: bytes, digest: bytes) -> bytes:
    return b"origami/" + tag + b"/" + digest


class Signer:
    def __init__(self, address: str, private_key: Ed25519PrivateKey):
        self.address = address
        self._key = private_key

    @classmethod
    def derive(cls, address: str, seed: bytes) -> "Signer":
        secret = hashlib.sha256(b"origami/key/" + seed + b"/" + address.encode()).digest()
        return cls(address, Ed25519PrivateKey.from_private_bytes(secret))

    def public_bytes(self) -> bytes:
        return self._key.public_key().public_bytes(Encoding.Raw, PublicFormat.Raw)

    def sign(self, tag: bytes, digest: bytes) -> bytes:
        return self._key.sign(_signed_bytes(tag, digest))

    def __repr__(self):
        return f"Signer({self.address!r})"


@lru_cache(maxsize=1 << 16)
def _verify_cached(public: bytes, message: bytes, signature: bytes) -> bool:
    try:
        Ed25519PublicKey.from_public_bytes(public).verify(signature, message)
    except (InvalidSignature, ValueError):
        return False
    return True


class Directory:
    """Public-key registry. Unknown addresses never verify."""

    def __init__(self):
        self._keys: dict[str, bytes] = {}

    def register(self, address: str, public: bytes) -> None:
        self._keys[address] = public

    def knows(self, address: str) -> bool:
        return address in self._keys

    def verify(self, address: str, tag: bytes, digest: bytes, signature) -> bool:
        public = self._keys.get(address)
        if public is None or not isinstance(signature, (bytes, bytearray)):
            return False
        return _verify_cached(public, _signed_bytes(tag, digest), bytes(signature))


def make_keys(addresses, seed: bytes) -> tuple[dict[str, Signer], Directory]:
    signers = {a: Signer.derive(a, seed) for a in addresses}
    directory = Directory()
    for a, s in signers.items():
        directory.register(a, s.public_bytes())
    return signers, directory
