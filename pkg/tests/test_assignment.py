import itertools
from fractions import Fraction

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from shardsim.assignment import (
    FailureQuery,
    Model,
    Unreachable,
    assign,
    binomial_failure,
    epoch_failure_monte_carlo,
    failure_probability,
    failure_threshold,
    hypergeometric_failure,
    min_committee_size,
    permutation,
)


def enum_binomial(u, rho, q0):
    """Sum over all 2^u honest/bad patterns."""
    thr = failure_threshold(u, q0)
    tot = Fraction(0)
    for pat in itertools.product((0, 1), repeat=u):
        x = sum(pat)
        if x >= thr:
            tot += rho**x * (1 - rho) ** (u - x)
    return tot


def enum_hyper(n, u, bad, q0):
    thr = failure_threshold(u, q0)
    combos = list(itertools.combinations(range(n), u))
    hits = sum(1 for c in combos if sum(1 for v in c if v < bad) >= thr)
    return Fraction(hits, len(combos))


def test_assign_m1_is_permutation():
    nodes = list(range(7))
    out = assign(nodes, b"xi", 1, 7)
    assert out.anodes == (out.permutation,)
    assert sorted(out.permutation) == nodes


def test_assign_deterministic_and_checked():
    nodes = list(range(12))
    assert assign(nodes, b"a", 3, 4) == assign(nodes, b"a", 3, 4)
    assert assign(nodes, b"a", 3, 4) != assign(nodes, b"b", 3, 4)
    with pytest.raises(ValueError):
        assign(nodes, b"a", 3, 5)
    with pytest.raises(ValueError):
        assign([1, 1, 2], b"a", 1, 3)


def test_assign_uniform():
    n, m, trials = 12, 3, 10_000
    hits = [[0] * m for _ in range(n)]
    for t in range(trials):
        out = assign(list(range(n)), t.to_bytes(4, "little"), m, n // m)
        for g, grp in enumerate(out.anodes):
            for v in grp:
                hits[v][g] += 1
    p = 1 / m
    sigma = (trials * p * (1 - p)) ** 0.5
    for row in hits:
        for c in row:
            assert abs(c - trials * p) < 4 * sigma  # 3 sigma per cell; 36 cells


@given(st.binary(max_size=16), st.integers(0, 40))
def test_permutation_is_bijection(seed, size):
    assert sorted(permutation(seed, range(size))) == list(range(size))


def test_failure_examples():
    assert binomial_failure(4, Fraction(1, 4), Fraction(1, 2)) == Fraction(67, 256)
    assert float(binomial_failure(4, 0.25, 0.5)) == 0.26171875
    assert hypergeometric_failure(12, 4, Fraction(1, 4), Fraction(1, 2)) == Fraction(117, 495)
    assert binomial_failure(10, 0, Fraction(2, 3)) == 0
    assert hypergeometric_failure(30, 10, 0, Fraction(2, 3)) == 0


def test_against_enumeration_oracles():
    for u in range(1, 11):
        for rho in (Fraction(1, 10), Fraction(1, 4), Fraction(1, 3)):
            for q0 in (Fraction(1, 2), Fraction(2, 3)):
                assert binomial_failure(u, rho, q0) == enum_binomial(u, rho, q0)
    for n, u, bad in [(12, 4, 3), (10, 5, 2), (9, 6, 3), (14, 7, 4)]:
        for q0 in (Fraction(1, 2), Fraction(2, 3)):
            assert hypergeometric_failure(n, u, Fraction(bad, n), q0) == enum_hyper(n, u, bad, q0)


def test_non_integral_rho_n_rejected():
    with pytest.raises(ValueError):
        hypergeometric_failure(10, 4, Fraction(1, 4), Fraction(1, 2))


def test_models_converge():
    u, rho, q0 = 8, Fraction(1, 4), Fraction(2, 3)
    b = binomial_failure(u, rho, q0)
    gaps = [abs(hypergeometric_failure(k * u, u, rho, q0) - b) for k in (2, 10, 100)]
    assert gaps[0] > gaps[1] > gaps[2]


def test_failure_probability_dispatch():
    q = FailureQuery(12, 4, Fraction(1, 4), Fraction(1, 2), Model.BINOMIAL)
    assert failure_probability(q) == 0.26171875
    with pytest.raises(ValueError):
        FailureQuery(3, 4, 0.1, 0.5)
    with pytest.raises(ValueError):
        FailureQuery(10, 4, 1.5, 0.5)


def test_monte_carlo_m1_matches_exact():
    est = epoch_failure_monte_carlo(36, 1, 12, Fraction(1, 4), Fraction(2, 3), 50_000, seed=1)
    assert est.contains(float(hypergeometric_failure(36, 12, Fraction(1, 4), Fraction(2, 3))))


def test_monte_carlo_union_exceeds_single():
    single = float(hypergeometric_failure(36, 12, Fraction(1, 4), Fraction(2, 3)))
    est = epoch_failure_monte_carlo(36, 3, 12, Fraction(1, 4), Fraction(2, 3), 50_000, seed=2)
    assert est.lo > single


def test_monte_carlo_edges():
    assert epoch_failure_monte_carlo(20, 2, 5, 0, Fraction(2, 3), 1000).p == 0
    with pytest.raises(ValueError):
        epoch_failure_monte_carlo(20, 2, 5, 0.1, 0.5, 99)
    with pytest.raises(ValueError):
        epoch_failure_monte_carlo(20, 5, 5, 0.1, 0.5, 1000)


def test_min_committee_size():
    assert min_committee_size(0.25, Fraction(2, 3), 1) == 1
    assert min_committee_size(0, Fraction(2, 3), 1e-9) == 1
    u = min_committee_size(0.25, Fraction(2, 3), 1e-3)
    # scan oracle
    scan = next(v for v in range(1, 500) if binomial_failure(v, Fraction(1, 4), Fraction(2, 3)) <= Fraction(1, 1000))
    assert u == scan
    with pytest.raises(Unreachable):
        min_committee_size(0.4, Fraction(2, 3), 1e-3)


@settings(max_examples=30, deadline=None)
@given(u=st.integers(1, 30), num=st.integers(0, 12))
def test_binomial_is_probability(u, num):
    p = binomial_failure(u, Fraction(num, 24), Fraction(2, 3))
    assert 0 <= p <= 1
