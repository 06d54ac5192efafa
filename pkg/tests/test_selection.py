import random
from fractions import Fraction

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from shardsim.crypto import KeyPair
from shardsim.selection import (
    EpochStall,
    PowParams,
    QuotaNotMet,
    head_start_fairness,
    list_difference,
    measure_fairness,
    mine_batch,
    mine_round,
    select_permissioned,
    select_reference_committee,
    select_underlying_chain,
    threshold_vote,
    verify_solution,
)


def test_pow_params():
    assert PowParams(0.25, 8).difficulty == 64
    with pytest.raises(ValueError):
        PowParams(1.5)


def test_p_zero_never_succeeds():
    key = KeyPair.from_seed("m")
    rng = random.Random(0)
    assert all(mine_round(0, key, b"pz", PowParams(0.0), rng) is None for _ in range(200))


def test_batch_success_rate():
    keys = {v: KeyPair.from_seed("miner", v) for v in range(1000)}
    params = PowParams(0.001)
    rng = random.Random(3)
    hits = 0
    rounds = 2000
    for r in range(rounds):
        sols = mine_batch(keys, r.to_bytes(4, "little"), params, rng)
        assert all(verify_solution(s, r.to_bytes(4, "little"), params) for s in sols)
        hits += len(sols)
    mean = hits / rounds
    assert 0.93 < mean < 1.07  # sd of the mean is about 0.022 here


def test_stale_puzzle_rejected():
    key = KeyPair.from_seed("m")
    rng = random.Random(1)
    params = PowParams(0.5)
    sol = next(s for s in (mine_round(0, key, b"new", params, rng) for _ in range(100)) if s)
    assert verify_solution(sol, b"new", params)
    assert not verify_solution(sol, b"old", params)


@pytest.mark.parametrize("t,lo,hi", [(0.25, 0.27, 1 / 3 + 0.02), (1 / 3, 0.0, 0.52)])
def test_selfish_mining_bound(t, lo, hi):
    n = 120
    bad = int(n * t)
    out = select_underlying_chain(
        60_000, list(range(bad, n)), list(range(bad)), PowParams(0.001), quota=10, selfish=True, seed=5
    )
    assert lo <= out.stats["adversary_fraction"] <= hi


def test_no_adversary_no_blocks():
    out = select_underlying_chain(3000, list(range(50)), [], PowParams(0.01), quota=5, seed=1)
    assert out.stats["adversary_fraction"] == 0
    assert len(out.nodes) == 5


def test_quota_not_met_keeps_partial():
    with pytest.raises(QuotaNotMet) as exc:
        select_underlying_chain(10, [0, 1], [], PowParams(0.01), quota=50, seed=0)
    assert len(exc.value.partial.snodes) < 50


def test_threshold_vote():
    view = [1, 2, 3, 4, 5]
    assert threshold_vote(view, view, 2)
    assert not threshold_vote([1, 2, 9, 10, 11], view, 2)
    assert list_difference([1, 9], view) == 1


def test_reference_committee_censorship_fails():
    members = list(range(4))
    honest_view = [10, 11, 12, 13, 14, 15]
    views = {i: honest_view for i in members}

    def swap(leader, own):
        return own[:3] + [90, 91, 92]

    out = select_reference_committee(members, views, byzantine=[0], k_t=2, byzantine_proposal=swap)
    assert out.nodes == honest_view and out.stats["view"] == 1
    # every honest list stays within 2*k_t of the committed one
    for i in members[1:]:
        assert list_difference(out.nodes, views[i]) <= 4


def test_reference_committee_stall():
    views = {i: [i * 10 + j for j in range(5)] for i in range(4)}
    with pytest.raises(EpochStall):
        select_reference_committee(list(range(4)), views, k_t=0)


def test_permissioned():
    roster = [(i, KeyPair.from_seed("ca", i).public) for i in range(8)]
    assert len(select_permissioned(roster).snodes) == 8
    with pytest.raises(QuotaNotMet):
        select_permissioned([])
    with pytest.raises(ValueError):
        select_permissioned([(0, b"k"), (1, b"k")])


def test_fairness_examples():
    nodes = list(range(12))
    rep = measure_fairness(nodes, set(range(8)), Fraction(3, 4))
    assert rep.q_f == Fraction(2, 3) and rep.omega_d == Fraction(1, 9)
    assert measure_fairness(nodes, nodes, 0.75).omega_d <= 0
    with pytest.raises(ValueError):
        measure_fairness(nodes, nodes, 0.75, k_f=13)


def test_selfish_outcome_fairness():
    out = select_underlying_chain(
        60_000, list(range(30, 120)), list(range(30)), PowParams(0.001), quota=2000, selfish=True, seed=9
    )
    rep = measure_fairness(out, lambda v: v >= 30, Fraction(3, 4))
    assert rep.q_f >= Fraction(2, 3) - Fraction(3, 100)


def test_head_start_hurts_fairness():
    params = PowParams(0.05)
    om = [head_start_fairness(24, 6, 8, params, d, trials=150, seed=2) for d in (0, 5, 10)]
    assert om[1] > 0 and om[2] > 0
    assert om[0] < om[1] <= om[2] + Fraction(1, 50)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 1000))
def test_selected_nodes_distinct_per_roster(seed):
    rng = random.Random(seed)
    ids = rng.sample(range(1000), 10)
    roster = [(i, KeyPair.from_seed("r", i).public) for i in ids]
    out = select_permissioned(roster)
    assert len(set(out.nodes)) == len(out.nodes) == 10
