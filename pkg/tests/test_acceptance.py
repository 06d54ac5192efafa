"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

Run with `pytest tests/test_acceptance.py -v` (the lines print even without -s).
"""
import itertools
import time
from fractions import Fraction

import pytest

from shardsim.assignment import binomial_failure, epoch_failure_monte_carlo, hypergeometric_failure
from shardsim.beacon import (
    CommitReveal,
    ThresholdShare,
    bias_statistic,
    budgeted_withholding,
    last_revealer_parity,
    run_beacon,
    verify_beacon,
)
from shardsim.consensus.pbft import fuzz_run
from shardsim.crypto import KeyPair
from shardsim.cross_shard import RelayScenario, cross_shard_fraction, fault_scenario
from shardsim.ledger import OutPoint, Transaction, TxOutput
from shardsim.reconfig import (
    RandomReplacement,
    ShardRosterList,
    breach_study,
    corruption_safety_check,
    default_k,
    plan_reconfiguration,
)
from shardsim.scenario import enumerate_combinations, omniledger_like, run, validate_config
from shardsim.selection import PowParams, select_underlying_chain


@pytest.fixture
def verdict(capsys):
    def emit(name, ok, detail):
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'} {name}: {detail}")
        assert ok, detail

    return emit


# -- enumeration oracles, independent of the closed forms --------------------------


def binomial_oracle(u, rho, q0):
    total = Fraction(0)
    for bits in itertools.product((0, 1), repeat=u):
        bad = sum(bits)
        if bad >= q0 * u:
            total += rho**bad * (1 - rho) ** (u - bad)
    return total


def hypergeometric_oracle(n, u, rho, q0):
    bad_nodes = int(rho * n)
    hits = combos = 0
    for c in itertools.combinations(range(n), u):
        combos += 1
        hits += sum(v < bad_nodes for v in c) >= q0 * u
    return Fraction(hits, combos)


def test_c1_pbft_safety(verdict):
    t0 = time.monotonic()
    conflicts = unexecuted = 0
    for seed in range(1000):
        out = fuzz_run(seed, u=4 if seed % 2 == 0 else 7)
        conflicts += out["conflicts"]
        unexecuted += out["unexecuted"]
    spends = sum(fault_scenario(10_000 + s)["double_spends"] for s in range(100))
    dt = time.monotonic() - t0
    ok = conflicts == 0 and spends == 0 and dt < 120
    verdict("c1", ok, f"1000 runs, conflicts={conflicts} double_spends={spends} unexecuted={unexecuted} {dt:.1f}s")


def test_c2_failure_formulas(verdict):
    q = Fraction(1, 2)
    b = binomial_failure(4, Fraction(1, 4), q)
    h = hypergeometric_failure(12, 4, Fraction(1, 4), q)
    err_b = abs(float(b) - 0.26171875) / 0.26171875
    err_h = abs(h - Fraction(117, 495)) / Fraction(117, 495)
    oracle_ok = b == binomial_oracle(4, Fraction(1, 4), q) and h == hypergeometric_oracle(12, 4, Fraction(1, 4), q)
    gaps = [abs(b - hypergeometric_failure(n, 4, Fraction(1, 4), q)) for n in (8, 40, 400)]
    shrinks = gaps[0] > gaps[1] > gaps[2]
    ok = err_b < 1e-12 and err_h < 1e-12 and oracle_ok and shrinks
    verdict("c2", ok, f"binomial={b} hyper={h} oracles={oracle_ok} gaps={[float(g) for g in gaps]}")


def test_c3_monte_carlo(verdict):
    t0 = time.monotonic()
    rho, q0 = Fraction(1, 4), Fraction(2, 3)
    single = hypergeometric_failure(36, 12, rho, q0)
    one = epoch_failure_monte_carlo(36, 1, 12, rho, q0, 100_000, seed=11)
    three = epoch_failure_monte_carlo(36, 3, 12, rho, q0, 100_000, seed=12)
    dt = time.monotonic() - t0
    ok = one.lo <= float(single) <= one.hi and three.p > float(single) and dt < 60
    verdict(
        "c3",
        ok,
        f"m=1 CI=[{one.lo:.4f},{one.hi:.4f}] exact={float(single):.4f}; m=3 p={three.p:.4f} {dt:.1f}s",
    )


@pytest.mark.parametrize("t,lo,hi", [(0.25, 0.27, 1 / 3 + 0.02), (1 / 3, 0.0, 0.5 + 0.02)])
def test_c4_selfish_mining(verdict, t, lo, hi):
    n = 120
    bad = round(n * t)
    out = select_underlying_chain(
        100_000, list(range(bad, n)), list(range(bad)), PowParams(0.001), quota=10, selfish=True, seed=4
    )
    frac = out.stats["adversary_fraction"]
    verdict(f"c4[t={t:.3f}]", lo <= frac <= hi, f"adversary fraction {frac:.4f} in [{lo:.3f},{hi:.3f}]")


def test_c5_cross_shard_fraction(verdict):
    f = cross_shard_fraction(16, 1_000_000, 2, 2, seed=5)
    target = 1 - 16**-3
    verdict("c5", abs(f - target) <= 1e-4, f"{f:.6f} vs {target:.6f}")


def test_c6_two_phase_commit_faults(verdict):
    t0 = time.monotonic()
    totals = {"double_spends": 0, "locked_past_expiry": 0, "unresolved": 0, "atomicity_breaches": 0}
    for seed in range(1000):
        res = fault_scenario(seed)
        for key in totals:
            totals[key] += res[key]
    dt = time.monotonic() - t0
    ok = all(v == 0 for v in totals.values()) and dt < 120
    verdict("c6", ok, f"1000 scenarios {totals} {dt:.1f}s")


def test_c7_relay(verdict):
    lam = 6
    k = KeyPair.from_seed("acceptance-relay")
    early = uncredited = forked_credit = 0
    for seed in range(100):
        op = OutPoint(seed.to_bytes(32, "big"), 0)
        tx = Transaction.create([op], [TxOutput(b"dest", 5)], [k])
        out = RelayScenario(lam=lam, seed=seed).run(tx)
        if not out.credited:
            uncredited += 1
        elif out.intervals < 2 * lam:
            early += 1
        rival = Transaction.create([op], [TxOutput(b"evil", 5)], [k])
        depth = 1 + seed % (lam - 1)
        f = RelayScenario(lam=lam, seed=seed).run(tx, fork_at_depth=depth, conflict=rival)
        forked_credit += f.credited or not f.forked
    ok = early == 0 and uncredited == 0 and forked_credit == 0
    verdict("c7", ok, f"early={early} uncredited={uncredited} credited_after_fork={forked_credit}")


def test_c8_beacon(verdict):
    committee = list(range(7))
    cr = bias_statistic(committee, CommitReveal(), last_revealer_parity(6), 10_000, seed=1)
    th = bias_statistic(committee, ThresholdShare(3), budgeted_withholding([5, 6]), 10_000, seed=2)
    # reconstruction: any withholding set leaving >= t honest dealers' shares available
    recon_fail = 0
    for size in range(0, 5):
        for bad in itertools.combinations(committee, size):
            r = run_beacon(committee, size * 100 + sum(bad), ThresholdShare(3), budgeted_withholding(bad))
            tr = r.transcript
            recon_fail += bool(tr.excluded) or not verify_beacon(tr)
    ok = abs(cr.parity_z) > 10 and th.max_abs_z < 4 and recon_fail == 0
    verdict("c8", ok, f"cr parity z={cr.parity_z:.1f} threshold max|z|={th.max_abs_z:.2f} recon_failures={recon_fail}")


def test_c9_reconfiguration(verdict):
    k = default_k(64, 4)
    roster = ShardRosterList(0, [list(range(c * 16, (c + 1) * 16)) for c in range(4)])
    groups = [list(range(100 + 10 * c, 100 + 10 * c + k)) for c in range(4)]
    _, ev = plan_reconfiguration(roster, groups, b"acceptance", RandomReplacement(k))
    per_shard = [len(ev.replaced[c]) for c in range(4)]
    strict = (
        bool(corruption_safety_check(2001, 1000))
        and not corruption_safety_check(2000, 1000)
        and not corruption_safety_check(1999, 1000)
    )
    st = breach_study(80, 4, 16, 0.2, 2 / 3, epochs=50, seed=0)
    ok = per_shard == [4, 4, 4, 4] and strict and st.consistent()
    verdict(
        "c9",
        ok,
        f"replaced={per_shard} strict_tau={strict} breach freq {st.frequency:.3f} in [{st.ci_lo:.3f},{st.ci_hi:.3f}]",
    )


def test_c10_taxonomy(verdict):
    count = enumerate_combinations()[0]
    cases = [
        (dict(isc="sync_bft", intra_proportion="2f+1"), ("message_model", "isc")),
        (dict(isc="pow", cstp="client_2pc", sr="none"), ("isc", "cstp")),
        (dict(total_proportion="third_to_half", rho=0.4), ("total_proportion", "intra_proportion")),
        (dict(admission="permissioned"), ("admission", "ns")),
        (dict(tau=2000), ("corruption_speed", "sr")),
    ]
    missed = [pair for kw, pair in cases if pair not in {v.pair for v in validate_config(omniledger_like(**kw))}]
    rep = run(omniledger_like(), 0).report
    ok = count == 216 and not missed and rep.epoch_failures == [] and rep.invariant_breaches == 0 and rep.committed > 0
    verdict("c10", ok, f"combinations={count} missed={missed} omniledger committed={rep.committed} failures={rep.epoch_failures}")


def test_c11_scaling(verdict):
    tput = []
    for m in (1, 2, 4, 8):
        rep = run(omniledger_like(m=m, u=4, reserve=4 * m, epochs=1), 0).report
        tput.append(rep.throughput_total)
    ratios = [b / a for a, b in zip(tput, tput[1:])]
    ok = all(1.8 <= r <= 2.2 for r in ratios)
    verdict("c11", ok, f"throughput={tput} ratios={[round(r, 3) for r in ratios]}")


def test_c12_replay(verdict):
    cfg = omniledger_like(rho=0.2, corruption_speed="immediate")
    a, b = run(cfg, 42), run(cfg, 42)
    same = a.report.to_json() == b.report.to_json() and a.events_jsonl() == b.events_jsonl()
    verdict("c12", same, f"report sha-equal={same} ({len(a.report.to_json())} bytes)")
