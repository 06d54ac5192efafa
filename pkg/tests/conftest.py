import pytest

from shardsim.crypto import KeyPair
from shardsim.ledger import OutPoint, Transaction, TxOutput, UtxoSet


@pytest.fixture
def alice():
    return KeyPair.from_seed("alice")


@pytest.fixture
def bob():
    return KeyPair.from_seed("bob")


@pytest.fixture
def funded(alice):
    """A UTXO set holding one 10-coin output owned by alice."""
    op = OutPoint(b"\x01" * 32, 0)
    return UtxoSet({op: TxOutput(alice.address, 10)}), op


def pay(key, op, *splits):
    return Transaction.create([op], [TxOutput(a, v) for a, v in splits], [key])
