import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from shardsim.beacon import (
    FIELD_PRIME,
    HONEST,
    BeaconFailed,
    CommitReveal,
    Strategy,
    ThresholdShare,
    Transcript,
    bias_statistic,
    budgeted_withholding,
    interpolate_at_zero,
    last_revealer_parity,
    run_beacon,
    share_secret,
    verify_beacon,
)

COMMITTEE = list(range(7))


def test_modulus_is_prime_above_2_61():
    p = FIELD_PRIME
    assert p > 2**61
    # Miller-Rabin with the deterministic bases for 64-bit inputs
    d, s = p - 1, 0
    while d % 2 == 0:
        d, s = d // 2, s + 1
    for a in (2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37):
        x = pow(a, d, p)
        if x in (1, p - 1):
            continue
        assert any(pow(x, 2 ** r, p) == p - 1 for r in range(1, s))


@pytest.mark.parametrize("variant", [CommitReveal(), ThresholdShare(3)])
def test_honest_run_verifies(variant):
    a = run_beacon(COMMITTEE, 4, variant, seed=1)
    b = run_beacon(COMMITTEE, 4, variant, seed=1)
    assert a.xi == b.xi and len(a.xi) == 32
    assert verify_beacon(a.transcript)
    assert verify_beacon(a.transcript.to_json())
    assert run_beacon(COMMITTEE, 5, variant, seed=1).xi != a.xi


def test_withheld_secret_reconstructed():
    strat = Strategy(frozenset({2}), withhold_secret=True, withhold_shares=True)
    r = run_beacon(COMMITTEE, 0, ThresholdShare(3), strat)
    tr = r.transcript
    assert 2 not in tr.reveals and 2 not in tr.excluded
    assert verify_beacon(tr)


def test_reconstruction_needs_threshold():
    bad = frozenset({0, 1, 2, 3, 4})
    strat = Strategy(bad, withhold_secret=True, withhold_shares=True)
    tr = run_beacon(COMMITTEE, 0, ThresholdShare(3), strat).transcript
    assert sorted(tr.excluded) == sorted(bad)  # only 2 honest shares per secret
    assert verify_beacon(tr)


def test_tampering_detected():
    tr = run_beacon(COMMITTEE, 1, ThresholdShare(3), budgeted_withholding([0, 1])).transcript
    raw = tr.to_json()
    doc = json.loads(raw)
    dealer = next(iter(doc["shares"]))
    x = next(iter(doc["shares"][dealer]))
    doc["shares"][dealer][x][0] ^= 1
    assert not verify_beacon(json.dumps(doc).encode())
    assert not verify_beacon(raw[: len(raw) // 2])
    cr = run_beacon(COMMITTEE, 1, CommitReveal()).transcript
    cr.xi = bytes(32)
    assert not verify_beacon(cr)


def test_commit_reveal_zero_reveals_fails():
    strat = Strategy(frozenset(COMMITTEE), lambda m, xi: False)
    with pytest.raises(BeaconFailed):
        run_beacon(COMMITTEE, 0, CommitReveal(), strat)


def test_transcript_roundtrip():
    tr = run_beacon(COMMITTEE, 2, ThresholdShare(3), budgeted_withholding([6])).transcript
    back = Transcript.from_json(tr.to_json())
    assert back.to_json() == tr.to_json()


def test_commit_reveal_biased():
    rep = bias_statistic(COMMITTEE, CommitReveal(), last_revealer_parity(6), 4000)
    assert abs(rep.parity_z) > 10
    assert abs(rep.parity_z) == rep.max_abs_z


def test_threshold_unbiased_under_withholding():
    rep = bias_statistic(COMMITTEE, ThresholdShare(3), budgeted_withholding([5, 6]), 2000)
    assert rep.max_abs_z < 4.5  # 64 bits at 2000 trials; the full-size run lives in the acceptance suite


def test_null_case_unbiased():
    assert bias_statistic(COMMITTEE, CommitReveal(), HONEST, 2000, seed=3).max_abs_z < 4.5


def test_bias_needs_trials():
    with pytest.raises(ValueError):
        bias_statistic(COMMITTEE, CommitReveal(), HONEST, 10)


def test_threshold_validation():
    with pytest.raises(ValueError):
        ThresholdShare(0)
    with pytest.raises(ValueError):
        ThresholdShare(2, modulus=101)
    with pytest.raises(ValueError):
        run_beacon([0, 1], 0, ThresholdShare(3))


@settings(max_examples=40, deadline=None)
@given(secret=st.integers(0, FIELD_PRIME - 1), t=st.integers(1, 6), extra=st.integers(0, 4), seed=st.integers(0, 99))
def test_shamir_roundtrip(secret, t, extra, seed):
    import random

    xs = list(range(1, t + extra + 1))
    shares = share_secret(secret, t, xs, FIELD_PRIME, random.Random(seed))
    rng = random.Random(seed + 1)
    pick = rng.sample(xs, t)
    assert interpolate_at_zero([(x, shares[x]) for x in pick], FIELD_PRIME) == secret


@settings(max_examples=15, deadline=None)
@given(n_bad=st.integers(0, 7), t=st.integers(1, 7), seed=st.integers(0, 50))
def test_availability(n_bad, t, seed):
    bad = frozenset(range(n_bad))
    strat = Strategy(bad, withhold_secret=True, withhold_shares=True)
    tr = run_beacon(COMMITTEE, 0, ThresholdShare(t), strat, seed).transcript
    honest = len(COMMITTEE) - n_bad
    if honest >= t:
        assert tr.excluded == []
    else:
        assert sorted(tr.excluded) == sorted(bad)
    assert verify_beacon(tr)
