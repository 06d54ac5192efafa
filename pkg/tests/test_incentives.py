from fractions import Fraction

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from shardsim.consensus.common import canonical
from shardsim.crypto import KeyPair, digest
from shardsim.incentives import (
    AccountBook,
    CommittedBlock,
    EpochTrace,
    Evidence,
    InvalidEvidence,
    ReputationWeights,
    RewardPolicy,
    SignedStatement,
    settle_block,
    slash,
    update_reputation,
)

KEYS = {i: KeyPair.from_seed("inc", i) for i in range(4)}
PUB = {i: k.public for i, k in KEYS.items()}


def signed(node, statement):
    return SignedStatement(statement, KEYS[node].sign(digest(canonical(statement))))


def test_pow_producer_reward():
    pol = RewardPolicy()
    book = settle_block(AccountBook.open([0, 1], pol), CommittedBlock(producer=1), pol)
    assert book.get(1).balance == 10 and book.get(0).balance == 0


def test_committee_split_with_leader_multiplier():
    pol = RewardPolicy(block_reward=12, leader_multiplier=2)
    blk = CommittedBlock(producer=0, committee=(0, 1, 2, 3), leader=0)
    book = settle_block(AccountBook.open(range(4), pol), blk, pol)
    assert book.get(0).balance == Fraction(24, 5)
    assert [book.get(i).balance for i in (1, 2, 3)] == [Fraction(12, 5)] * 3
    assert book.minted == 12


def test_zero_reward_unchanged():
    pol = RewardPolicy(block_reward=0)
    book = AccountBook.open(range(4), pol)
    assert settle_block(book, CommittedBlock(0, (0, 1)), pol) is book


def test_policy_validation():
    with pytest.raises(ValueError):
        RewardPolicy(block_reward=-1)
    with pytest.raises(ValueError):
        RewardPolicy(leader_multiplier=Fraction(1, 2))


def test_equivocation_slash():
    pol = RewardPolicy()
    book = AccountBook.open(range(4), pol)
    ev = Evidence(2, "equivocation", signed(2, ("vote", 7, b"a")), signed(2, ("vote", 7, b"b")))
    after = slash(book, ev, pol, PUB)
    assert after.get(2).deposit == 0 and after.burned == 100
    assert after.get(2).reputation == -5
    assert after.conserved(book)


def test_forged_evidence_rejected():
    pol = RewardPolicy()
    book = AccountBook.open(range(4), pol)
    forged = SignedStatement(("vote", 7, b"b"), b"\x00" * 32)
    with pytest.raises(InvalidEvidence):
        slash(book, Evidence(2, "equivocation", signed(2, ("vote", 7, b"a")), forged), pol, PUB)
    # signed by someone else
    with pytest.raises(InvalidEvidence):
        slash(book, Evidence(2, "equivocation", signed(1, ("vote", 7, b"a")), signed(2, ("vote", 7, b"b"))), pol, PUB)
    # different slots do not conflict
    with pytest.raises(InvalidEvidence):
        slash(book, Evidence(2, "equivocation", signed(2, ("vote", 7, b"a")), signed(2, ("vote", 8, b"b"))), pol, PUB)
    with pytest.raises(InvalidEvidence):
        slash(book, Evidence(2, "bogus"), pol, PUB)


def test_non_response_needs_quorum():
    pol = RewardPolicy()
    book = AccountBook.open(range(4), pol)
    atts = {p: signed(p, ("timeout", 3, 5)) for p in (0, 1)}
    with pytest.raises(InvalidEvidence):
        slash(book, Evidence(3, "non_response", attestations=atts), pol, PUB, quorum=3)
    after = slash(book, Evidence(3, "non_response", attestations=atts), pol, PUB, quorum=2)
    assert after.get(3).deposit == 90


def test_repeated_slashes_floor_at_zero():
    pol = RewardPolicy(slash_equivocation=60)
    book = AccountBook.open(range(4), pol)
    ev = Evidence(1, "equivocation", signed(1, ("x", 1, 1)), signed(1, ("x", 1, 2)))
    for _ in range(3):
        book = slash(book, ev, pol, PUB)
    assert book.get(1).deposit == 0 and book.get(1).exhausted
    assert book.burned == 100


def test_reputation_rules():
    w = ReputationWeights()
    book = AccountBook.open(range(3), RewardPolicy())
    tr = EpochTrace(participations={0: 3, 1: 3}, nodes=(0, 1, 2))
    after = update_reputation(book, tr, w)
    assert after.get(2).reputation == -1
    assert after.get(0).reputation == after.get(1).reputation == 3
    again = update_reputation(after, tr, w)
    assert again.get(0).reputation > after.get(0).reputation


def test_csv_export():
    book = AccountBook.open([1, 0], RewardPolicy())
    lines = book.to_csv().splitlines()
    assert lines[0] == "node,balance,deposit,reputation,exhausted"
    assert lines[1] == "0,0,100,0,0"


@settings(max_examples=40, deadline=None)
@given(
    blocks=st.lists(
        st.tuples(st.integers(0, 3), st.dictionaries(st.integers(0, 3), st.integers(0, 5))), max_size=12
    ),
    slashes=st.lists(st.integers(0, 3), max_size=4),
)
def test_conservation(blocks, slashes):
    pol = RewardPolicy(block_reward=7, leader_multiplier=3)
    start = AccountBook.open(range(4), pol)
    book = start
    for leader, parts in blocks:
        book = settle_block(book, CommittedBlock(leader, tuple(range(4)), parts, leader), pol)
    for v in slashes:
        ev = Evidence(v, "equivocation", signed(v, ("s", 0, 0)), signed(v, ("s", 0, 1)))
        book = slash(book, ev, pol, PUB)
    assert book.conserved(start)
    assert all(a.deposit >= 0 and a.balance >= 0 for a in book.accounts.values())


@given(p=st.integers(0, 10))
def test_identical_traces_equal_rewards(p):
    pol = RewardPolicy()
    blk = CommittedBlock(0, (0, 1, 2, 3), {1: p, 2: p, 0: 1}, leader=0)
    book = settle_block(AccountBook.open(range(4), pol), blk, pol)
    assert book.get(1) == book.get(2)
