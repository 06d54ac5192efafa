import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from shardsim.crypto import KeyPair
from shardsim.ledger import Block, OutPoint, TxOutput, UtxoSet, Transaction
from shardsim.reconfig import (
    BoundedCuckoo,
    Chronological,
    RandomReplacement,
    ShardRosterList,
    Snapshot,
    bootstrap_member,
    breach_study,
    corruption_safety_check,
    default_k,
    is_current_member,
    plan_reconfiguration,
    replacement_chain_mc,
    verify_snapshot,
)


def _roster(n=64, m=4):
    u = n // m
    return ShardRosterList(0, [list(range(c * u, (c + 1) * u)) for c in range(m)])


def test_random_replacement_default_k():
    k = default_k(64, 4)
    assert k == 4
    roster = _roster()
    newcomers = [list(range(1000 + 10 * c, 1000 + 10 * c + k)) for c in range(4)]
    new, ev = plan_reconfiguration(roster, newcomers, b"xi", RandomReplacement(k))
    for c in range(4):
        assert len(ev.replaced[c]) == 4
        assert len(new.shards[c]) == 16
        assert set(newcomers[c]) <= set(new.shards[c])
    assert new.epoch == 1 and all(new.joined[v] == 1 for g in newcomers for v in g)
    with pytest.raises(ValueError):
        plan_reconfiguration(roster, newcomers[:3], b"xi", RandomReplacement(k))
    with pytest.raises(ValueError):
        plan_reconfiguration(roster, [[0, 1, 2, 3]] + newcomers[1:], b"xi", RandomReplacement(k))


def test_default_k_floor():
    assert default_k(80, 4) == 4  # log2(20) = 4.32
    with pytest.raises(ValueError):
        default_k(2, 4)


def test_chronological_evicts_oldest():
    roster = ShardRosterList(2, [[1, 2, 3, 4]], joined={1: 1, 2: 2, 3: 1, 4: 2})
    _, ev = plan_reconfiguration(roster, [[7, 8]], b"x", Chronological(0.5))
    assert ev.replaced[0] == [1, 3]


def test_cuckoo_targets_active_half():
    roster = _roster(16, 4)
    roster.activeness = {v: (5 if v < 8 else 1) for v in range(16)}
    new, ev = plan_reconfiguration(roster, list(range(100, 106)), b"c", BoundedCuckoo())
    assert set(ev.joined) >= {0, 1}
    assert {c for c, vs in ev.joined.items() if any(v >= 100 for v in vs)} <= {0, 1}
    new.check()
    # I-committees stay within the cap
    assert all(len(new.shards[c]) <= 4 for c in (2, 3))


def test_departed_keys_inert():
    roster = _roster(16, 4)
    new, ev = plan_reconfiguration(roster, [[100 + c] for c in range(4)], b"x", RandomReplacement(1))
    gone = ev.departed[0]
    assert is_current_member(roster, gone, 0)
    assert not is_current_member(new, gone, 1)
    assert not is_current_member(new, 100, 0)  # wrong epoch


def _history(n_tx):
    k = KeyPair.from_seed("snap")
    utxo = UtxoSet()
    blocks = [Block.genesis()]
    for i in range(n_tx):
        op = OutPoint(bytes([i % 256]) * 31 + bytes([i // 256]), 0)
        tx = Transaction.create([op], [TxOutput(k.address, 1)], [k])
        utxo.add(tx.outpoint(0), tx.outputs[0])
        blocks.append(Block.child_of(blocks[-1], [tx]))
    return Snapshot(utxo, blocks)


def test_snapshot_verification():
    empty = Snapshot(UtxoSet(), [])
    assert verify_snapshot(empty, UtxoSet().state_root(), None)
    snap = _history(5)
    root, tip = snap.utxo.state_root(), snap.blocks[-1].hash
    assert verify_snapshot(snap, root, tip)
    bad = Snapshot(snap.utxo, snap.blocks[:-2] + snap.blocks[-1:])
    assert not verify_snapshot(bad, root, tip)
    assert not verify_snapshot(snap, b"\x00" * 32, tip)


def test_bootstrap_falls_back_and_meters():
    good = _history(4)
    root, tip = good.utxo.state_root(), good.blocks[-1].hash
    liar = Snapshot(UtxoSet(), good.blocks)
    rec = bootstrap_member(9, 0, [(1, liar), (2, good)], root, tip)
    assert rec.ok and rec.source == 2 and rec.rejected == [1]
    assert rec.bytes == liar.size() + good.size()
    assert not bootstrap_member(9, 0, [(1, liar)], root, tip).ok


def test_snapshot_size_linear():
    sizes = [_history(n).size() for n in (10, 20, 40)]
    d1, d2 = sizes[1] - sizes[0], sizes[2] - sizes[1]
    assert d2 == 2 * d1


def test_corruption_safety():
    assert corruption_safety_check(2500, 1000)
    assert not corruption_safety_check(1800, 1000)
    v = corruption_safety_check(2000, 1000)
    assert not v and v.margin == 0


def test_breach_study_inside_band():
    st_ = breach_study(80, 4, 16, 0.2, 2 / 3, epochs=50, seed=0)
    assert st_.consistent()
    assert 0 <= st_.ci_lo <= st_.frequency <= st_.ci_hi <= 1


def test_breach_study_rejects_bad_inputs():
    with pytest.raises(ValueError):
        breach_study(81, 4, 16, 0.2, 2 / 3)
    with pytest.raises(ValueError):
        breach_study(40, 4, 16, 0.2, 2 / 3)


def test_chain_mc_no_adversary():
    f = replacement_chain_mc(80, 4, 16, 0, 4, 2 / 3, 20, chains=50, seed=1)
    assert (f == 0).all()


@settings(max_examples=20, deadline=None)
@given(seed=st.binary(min_size=1, max_size=8), k=st.integers(1, 4))
def test_replacement_keeps_rosters_disjoint(seed, k):
    roster = _roster(32, 4)
    new, ev = plan_reconfiguration(roster, [[200 + 10 * c + i for i in range(k)] for c in range(4)], seed, RandomReplacement(k))
    new.check()
    assert all(len(c) == 8 for c in new.shards)
    assert len(ev.departed) == 4 * k
