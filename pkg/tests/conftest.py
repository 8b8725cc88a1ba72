import pytest

from origami import accumulator as acc
from origami.signing import make_keys
from origami.state import MANAGEMENT_CONTRACT
from origami.transitions import base_genesis, build_add_user, build_open, new_child_ucs

PEOPLE = ("alice", "bob", "carol", "dave")


@pytest.fixture(scope="session")
def params() -> acc.GroupParams:
    return acc.trusted_setup(64, b"tests")


@pytest.fixture(scope="session")
def keys():
    return make_keys(PEOPLE + ("zed",), b"tests")


def base_with(params, balances):
    """Base channel holding ``balances`` in insertion order, unsigned."""
    state = base_genesis(params)
    for who, amount in balances.items():
        state = build_add_user(state, who, amount, who, 0)
    return state


@pytest.fixture
def base3(params):
    return base_with(params, {"alice": 100, "bob": 100, "carol": 100})


@pytest.fixture
def opened(base3):
    """(state after opening a group for alice and bob, child UCS, witness)."""
    child = new_child_ucs(base3, [("alice", 30), ("bob", 20)], MANAGEMENT_CONTRACT)
    state, witness = build_open(base3, child)
    return state, child, witness
