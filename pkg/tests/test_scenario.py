import csv
import io
import os
import subprocess
import sys
from pathlib import Path

import pytest

from shardsim.scenario import (
    ConfigError,
    InvariantBreach,
    ScenarioConfig,
    Unsupported,
    check_runnable,
    config_schema,
    enumerate_combinations,
    load_config,
    omniledger_like,
    parse_config,
    run,
    sweep,
    validate_config,
)

ROOT = Path(__file__).resolve().parents[1]


def pairs(cfg):
    return {v.pair for v in validate_config(cfg)}


def test_enumeration_counts():
    assert enumerate_combinations()[0] == 216
    assert enumerate_combinations({"isc": ["sync_bft", "pbft"]})[0] == 108
    assert enumerate_combinations({"message_model": ["sync"]})[0] == 72
    _, combos = enumerate_combinations()
    assert len({tuple(sorted(c.items())) for c in combos}) == 216
    with pytest.raises(KeyError):
        enumerate_combinations({"nope": ["x"]})
    with pytest.raises(ValueError):
        enumerate_combinations({"isc": ["raft"]})


def test_omniledger_like_is_valid():
    assert validate_config(omniledger_like()) == []


def test_partial_sync_with_sync_bft_rejected():
    cfg = omniledger_like(isc="sync_bft", intra_proportion="2f+1")
    assert ("message_model", "isc") in pairs(cfg)


def test_eventual_with_2pc_rejected():
    cfg = omniledger_like(isc="pow", cstp="client_2pc", sr="none")
    assert ("isc", "cstp") in pairs(cfg)


@pytest.mark.parametrize(
    "kw,pair",
    [
        (dict(total_proportion="third_to_half", rho=0.4), ("total_proportion", "intra_proportion")),
        (dict(rho=0.4), ("rho", "total_proportion")),
        (dict(cstp="relay"), ("isc", "cstp")),
        (dict(cstp="split"), ("cstp", "n_outputs")),
        (dict(admission="permissioned"), ("admission", "ns")),
        (dict(tx_model="account"), ("tx_model", "isc")),
        (dict(tau=2000), ("corruption_speed", "sr")),
        (dict(u=3), ("u", "intra_proportion")),
        (dict(reserve=2), ("sr", "reserve")),
        (dict(delay=9), ("delay", "delta")),
        (dict(message_model="async"), ("message_model", "isc")),
        (dict(isc="pow", cstp="relay"), ("isc", "sr")),
    ],
)
def test_violations_name_the_pair(kw, pair):
    assert pair in pairs(omniledger_like(**kw))


def test_schema_rejects_unknown_and_bad_enum():
    with pytest.raises(ConfigError):
        parse_config({"colour": "blue"})
    with pytest.raises(ConfigError):
        parse_config({"isc": "raft"})
    with pytest.raises(ConfigError):
        load_config("- 1\n- 2\n")
    cfg = load_config("m: 4\nrho: 0\n")
    assert cfg.m == 4 and isinstance(cfg.rho, float)
    assert load_config("") == ScenarioConfig()
    assert config_schema()["additionalProperties"] is False


def test_shipped_configs():
    for name in ("omniledger", "permissioned", "eventual_pow"):
        cfg = load_config((ROOT / "configs" / f"{name}.yaml").read_text())
        assert validate_config(cfg) == [], name
    bad = load_config((ROOT / "configs" / "invalid_sync_bft.yaml").read_text())
    assert validate_config(bad)


def test_unsupported_engines():
    with pytest.raises(Unsupported):
        check_runnable(omniledger_like(isc="hotstuff"))
    with pytest.raises(Unsupported):
        check_runnable(omniledger_like(message_model="sync"))


def test_invalid_config_does_not_run():
    with pytest.raises(ConfigError):
        run(omniledger_like(rho=0.45))


def test_smoke_run():
    res = run(omniledger_like())
    r = res.report
    assert r.committed > 0 and r.throughput_total > 0
    assert r.epoch_failures == [] and r.invariant_breaches == 0
    assert r.unresolved == 0
    assert sum(r.committed_per_shard) == r.committed
    assert abs(sum(r.throughput_per_shard) - r.throughput_total) < 1e-9
    assert len(r.reconfiguration) == 1
    assert res.accounts.minted > 0


def test_replay_is_byte_identical():
    cfg = omniledger_like(rho=0.2, corruption_speed="immediate")
    a, b = run(cfg, 7), run(cfg, 7)
    assert a.report.to_json() == b.report.to_json()
    assert a.events_jsonl() == b.events_jsonl()
    assert run(cfg, 8).report.to_json() != a.report.to_json()


def test_replay_across_processes():
    code = (
        "import hashlib,sys;from shardsim.scenario import omniledger_like,run;"
        "r=run(omniledger_like(m=2,epochs=1),3);"
        "sys.stdout.write(hashlib.sha256(r.report.to_json()+r.events_jsonl()).hexdigest())"
    )
    outs = set()
    for hs in ("1", "2"):
        env = dict(os.environ, PYTHONHASHSEED=hs)
        outs.add(subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True).stdout)
    assert len(outs) == 1


@pytest.mark.parametrize(
    "kw",
    [
        dict(admission="permissioned", ns="permissioned", rho=0.0),
        dict(ns="reference_committee"),
        dict(cstp="shard_2pc", sr="chronological"),
        dict(cstp="output_2pc", sr="bounded_cuckoo"),
        dict(cstp="split", n_outputs=1),
        dict(er="commit_reveal", selfish_mining=True),
        dict(sr="none"),
        dict(isc="pow", cstp="relay", sr="none", u=8, reserve=0, epochs=1, tx_per_shard=8),
    ],
)
def test_variants_run_clean(kw):
    r = run(omniledger_like(**kw)).report
    assert r.invariant_breaches == 0 and r.committed > 0


def test_selfish_mining_lowers_chain_quality():
    plain = run(omniledger_like(rho=0.3, epochs=1)).report
    selfish = run(omniledger_like(rho=0.3, epochs=1, selfish_mining=True)).report
    assert selfish.chain_quality <= plain.chain_quality


def test_sweep_rows_and_monotone_failures():
    tmpl = omniledger_like(corruption_speed="immediate", m=4, reserve=16, epochs=3)
    rows = list(csv.DictReader(io.StringIO(sweep(tmpl, "rho", [0, 0.1, 0.25]))))
    assert len(rows) == 3 and all(r["status"] == "ok" for r in rows)
    fails = [int(r["epoch_failures"]) for r in rows]
    assert fails == sorted(fails)
    assert sweep(tmpl, "rho", []) == ""


def test_sweep_records_cell_failures():
    rows = list(csv.DictReader(io.StringIO(sweep(omniledger_like(), "rho", [0.0, 0.45]))))
    assert rows[0]["status"] == "ok" and rows[1]["status"].startswith("error")
    with pytest.raises(ConfigError):
        sweep(omniledger_like(), "colour", [1])


def test_sweep_m_four_rows():
    rows = list(csv.DictReader(io.StringIO(sweep(omniledger_like(epochs=1, sr="none"), "m", [1, 2, 4, 8]))))
    assert [r["m"] for r in rows] == ["1", "2", "4", "8"]


def test_breach_bundle():
    cfg = omniledger_like()
    e = InvariantBreach("double-spend", cfg, 5, 123, {"op": "x"})
    assert e.bundle["seed"] == 5 and e.bundle["tick"] == 123 and e.bundle["config"]["m"] == 2
