"""Scenario configuration, composition checks and the deterministic run loop.

A run executes, per epoch, node selection, epoch randomness, node assignment
(or reconfiguration after the first epoch), then intra-shard consensus with
cross-shard processing over a synthetic workload. Reports serialise to
canonical JSON so that a replay of the same (config, seed) is byte-identical.
"""
from __future__ import annotations

import csv
import dataclasses
import io
import itertools
import json
import math
import random
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Any, Callable, Mapping, Optional, Sequence

import jsonschema
import numpy as np
import yaml

from .adversary import AdversaryConfig, CorruptionLedger, Timing
from .assignment import assign, failure_threshold, permutation
from .beacon import CommitReveal, ThresholdShare, run_beacon
from .consensus.common import conflicting_commits, max_faults
from .consensus.powchain import PowShard, default_valid, item_id
from .cross_shard import (
    ClientBehavior,
    CrossShardSystem,
    Mode,
    RelayTransaction,
    TxState,
    input_shard,
    relay_of,
    route_transaction,
    split_transaction,
)
from .crypto import KeyPair, digest, digest_many
from .incentives import AccountBook, CommittedBlock, RewardPolicy, settle_block
from .ledger import OutPoint, Transaction, TxOutput, UtxoSet, owner_shard
from .net import PartialSyncB, Synchronous
from .reconfig import (
    BoundedCuckoo,
    Chronological,
    RandomReplacement,
    ShardRosterList,
    Snapshot,
    bootstrap_member,
    corruption_safety_check,
    default_k,
    plan_reconfiguration,
)
from .selection import ChainRace, PowParams, puzzle_race, select_permissioned, select_reference_committee

# -- taxonomy ----------------------------------------------------------------------

# Leaves of each model tree, "others" excluded, in the order the product is taken.
TAXONOMY: dict[str, tuple[str, ...]] = {
    "message_model": ("sync", "partial_sync", "async"),
    "admission": ("permissioned", "permissionless_pow", "permissionless_pos"),
    "corruption_timing": ("adaptive",),
    "corruption_speed": ("mild",),
    # total proportion paired with the intra-shard model it allows
    "proportion": ("lt_third/3f+1", "lt_third/2f+1", "third_to_half/2f+1"),
    "tx_model": ("utxo", "account"),
    "isc": ("pow", "pos", "sync_bft", "pbft"),
}

BFT_ISC = ("sync_bft", "pbft", "hotstuff")
CHAIN_ISC = ("pow", "pos")
TWO_PHASE = {"client_2pc": Mode.CLIENT, "shard_2pc": Mode.INPUT_SHARDS, "output_2pc": Mode.OUTPUT_SHARD}


def enumerate_combinations(restrict: Optional[Mapping[str, Sequence[str]]] = None) -> tuple[int, list[dict]]:
    """All leaf combinations of the model trees, optionally restricted per tree.

    Only the total/intra-shard proportion pairing is filtered, which is already
    folded into the "proportion" tree.
    """
    restrict = restrict or {}
    unknown = set(restrict) - set(TAXONOMY)
    if unknown:
        raise KeyError(f"unknown taxonomy tree(s): {sorted(unknown)}")
    axes = []
    for name, leaves in TAXONOMY.items():
        keep = restrict.get(name, leaves)
        bad = set(keep) - set(leaves)
        if bad:
            raise ValueError(f"{name}: unknown leaves {sorted(bad)}")
        axes.append([x for x in leaves if x in keep])
    combos = [dict(zip(TAXONOMY, c)) for c in itertools.product(*axes)]
    return len(combos), combos


# -- configuration -------------------------------------------------------------------

ENUMS: dict[str, tuple[str, ...]] = {
    "message_model": ("sync", "partial_sync", "async"),
    "admission": ("permissioned", "permissionless_pow", "permissionless_pos"),
    "corruption_timing": ("adaptive", "static"),
    "corruption_speed": ("mild", "immediate"),
    "total_proportion": ("lt_third", "third_to_half"),
    "intra_proportion": ("3f+1", "2f+1"),
    "tx_model": ("utxo", "account"),
    "ns": ("underlying_chain", "reference_committee", "permissioned"),
    "er": ("commit_reveal", "threshold"),
    "isc": ("pbft", "hotstuff", "sync_bft", "pow", "pos"),
    "cstp": ("client_2pc", "shard_2pc", "output_2pc", "split", "relay"),
    "sr": ("random_replacement", "chronological", "bounded_cuckoo", "none"),
    "byzantine_behavior": ("silent", "equivocate", "forge"),
}


@dataclass
class ScenarioConfig:
    # system models
    message_model: str = "partial_sync"
    admission: str = "permissionless_pow"
    corruption_timing: str = "adaptive"
    corruption_speed: str = "mild"
    tau: int = 5000
    total_proportion: str = "lt_third"
    intra_proportion: str = "3f+1"
    tx_model: str = "utxo"
    # components
    ns: str = "underlying_chain"
    er: str = "threshold"
    isc: str = "pbft"
    cstp: str = "client_2pc"
    sr: str = "random_replacement"
    m: int = 2
    u: int = 4
    k: Optional[int] = None
    reserve: int = 8
    # adversary
    rho: float = 0.1
    byzantine_behavior: str = "silent"
    selfish_mining: bool = False
    # motivation mechanism
    block_reward: float = 10.0
    leader_multiplier: float = 2.0
    deposit: float = 100.0
    # run controls
    seed: int = 0
    epochs: int = 2
    epoch_ticks: int = 1000
    tx_per_shard: int = 20
    n_inputs: int = 2
    n_outputs: int = 2
    locality: float = 0.5
    arrival_window: float = 0.5
    delta: int = 3
    delay: int = 3
    gst: int = 0
    lam: int = 6
    k_t: int = 2
    timeout: int = 12
    lock_ttl: int = 300
    grace: int = 300
    pow_p: float = 0.02
    block_interval: int = 10
    bandwidth: int = 20000

    @property
    def n(self) -> int:
        return self.m * self.u + self.reserve

    @property
    def instant(self) -> bool:
        return self.isc not in CHAIN_ISC

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def replace(self, **kw) -> "ScenarioConfig":
        return dataclasses.replace(self, **kw)


_PY_TYPES = {int: "integer", float: "number", str: "string", bool: "boolean"}


def config_schema() -> dict:
    """JSON Schema of the config document; unknown keys are rejected."""
    props: dict[str, Any] = {}
    hints = {"int": int, "float": float, "str": str, "bool": bool, "Optional[int]": int}
    for f in dataclasses.fields(ScenarioConfig):
        typ = hints[f.type if isinstance(f.type, str) else f.type.__name__]
        spec: dict[str, Any] = {"type": _PY_TYPES[typ]}
        if f.type == "Optional[int]":
            spec = {"type": ["integer", "null"]}
        if f.name in ENUMS:
            spec["enum"] = list(ENUMS[f.name])
        if typ is int and f.name not in ("seed", "k"):
            spec["minimum"] = 0
        props[f.name] = spec
    return {
        "$schema": "https://json-schema.org/draft/2020-12/schema",
        "title": "ScenarioConfig",
        "type": "object",
        "properties": props,
        "additionalProperties": False,
    }


class ConfigError(ValueError):
    pass


def parse_config(doc: Mapping[str, Any]) -> ScenarioConfig:
    try:
        jsonschema.validate(dict(doc), config_schema())
    except jsonschema.ValidationError as e:
        where = "/".join(str(p) for p in e.absolute_path) or "<root>"
        raise ConfigError(f"{where}: {e.message}") from None
    vals = dict(doc)
    for f in dataclasses.fields(ScenarioConfig):
        if f.type == "float" and f.name in vals:
            vals[f.name] = float(vals[f.name])
    return ScenarioConfig(**vals)


def load_config(text: str) -> ScenarioConfig:
    """Parse YAML or JSON text (JSON is a subset of YAML)."""
    doc = yaml.safe_load(text)
    if doc is None:
        doc = {}
    if not isinstance(doc, dict):
        raise ConfigError("config must be a mapping")
    return parse_config(doc)


def omniledger_like(**kw) -> ScenarioConfig:
    """Partially synchronous BFT shards, PoW admission, adaptive mild adversary,
    UTXO ledger, client-driven two-phase commit, random replacement."""
    return ScenarioConfig(**kw)


# -- validation --------------------------------------------------------------------


@dataclass(frozen=True)
class Violation:
    pair: tuple[str, str]
    reason: str

    def __str__(self) -> str:
        return f"{self.pair[0]} x {self.pair[1]}: {self.reason}"


def validate_config(cfg: ScenarioConfig) -> list[Violation]:
    """Every composition constraint that `cfg` breaks; empty means valid."""
    out: list[Violation] = []

    def bad(a: str, b: str, why: str) -> None:
        out.append(Violation((a, b), why))

    for name, leaves in ENUMS.items():
        if getattr(cfg, name) not in leaves:
            bad(name, name, f"unknown value {getattr(cfg, name)!r}")
    if out:
        return out

    if cfg.isc in ("pbft", "hotstuff"):
        if cfg.intra_proportion != "3f+1":
            bad("isc", "intra_proportion", "partially synchronous BFT needs u = 3f+1")
        if cfg.total_proportion != "lt_third":
            bad("isc", "total_proportion", "3f+1 committees need a total proportion below 1/3")
        if cfg.message_model == "async":
            bad("message_model", "isc", "deterministic BFT cannot be live without any delay bound")
    if cfg.isc == "sync_bft":
        if cfg.intra_proportion != "2f+1":
            bad("isc", "intra_proportion", "synchronous BFT runs with u = 2f+1")
        if cfg.message_model != "sync":
            bad("message_model", "isc", "synchronous BFT needs a synchronous network")
    if cfg.total_proportion == "third_to_half" and cfg.intra_proportion == "3f+1":
        bad("total_proportion", "intra_proportion", "a 3f+1 committee cannot absorb a total share above 1/3")
    lo, hi = (0.0, 1 / 3) if cfg.total_proportion == "lt_third" else (1 / 3, 0.5)
    if not lo <= cfg.rho < hi:
        bad("rho", "total_proportion", f"rho={cfg.rho} outside [{lo:.4g}, {hi:.4g})")

    if cfg.instant:
        if cfg.cstp == "relay":
            bad("isc", "cstp", "instant (committee) shards use two-phase commit or split, not relay")
        if cfg.cstp == "split" and cfg.n_outputs != 1:
            bad("cstp", "n_outputs", "split handles single-output transactions only")
        if cfg.message_model == "partial_sync" and cfg.intra_proportion == "2f+1":
            bad("message_model", "intra_proportion", "2f+1 committees are only safe under synchrony")
    else:
        if cfg.cstp != "relay":
            bad("isc", "cstp", "eventual shards have no committee; cross-shard needs relay")
        if cfg.sr != "none":
            bad("isc", "sr", "eventual shards have no committee to reconfigure")

    if cfg.admission == "permissioned" and cfg.ns != "permissioned":
        bad("admission", "ns", "a permissioned network selects nodes from its CA roster")
    if cfg.admission != "permissioned" and cfg.ns == "permissioned":
        bad("admission", "ns", "permissionless admission needs a Sybil-resistant selection")
    if cfg.tx_model != "utxo":
        bad("tx_model", "isc", "the simulated ledger is UTXO only")

    if cfg.corruption_speed == "mild":
        verdict = corruption_safety_check(cfg.tau, cfg.epoch_ticks)
        if not verdict:
            bad("corruption_speed", "sr", f"need tau > 2*epoch_ticks (margin {verdict.margin})")
    if cfg.u < 1 or cfg.m < 1:
        bad("m", "u", "need m >= 1 and u >= 1")
    elif cfg.instant and cfg.intra_proportion == "3f+1" and cfg.u < 4:
        bad("u", "intra_proportion", "3f+1 with f >= 1 needs u >= 4")
    if cfg.sr == "random_replacement":
        k = default_k(cfg.n, cfg.m) if cfg.k is None else cfg.k
        if k > cfg.u:
            bad("sr", "u", f"k={k} exceeds committee size")
        if cfg.m * k > cfg.reserve:
            bad("sr", "reserve", f"intake {cfg.m * k} exceeds reserve {cfg.reserve}")
    if not 0 <= cfg.locality <= 1 or not 0 < cfg.arrival_window <= 1:
        bad("locality", "arrival_window", "fractions must lie in [0, 1]")
    if cfg.n_inputs < 1 or cfg.n_outputs < 1:
        bad("n_inputs", "n_outputs", "transactions need inputs and outputs")
    if cfg.delay > cfg.delta or cfg.delay < 1:
        bad("delay", "delta", "actual delay must lie in [1, delta]")
    return out


class Unsupported(Exception):
    """Valid composition that the run loop cannot execute."""


def check_runnable(cfg: ScenarioConfig) -> None:
    if cfg.isc in ("hotstuff", "sync_bft"):
        raise Unsupported(f"isc={cfg.isc} runs standalone only; the composed run loop drives PBFT committees")
    if cfg.message_model != "partial_sync" and cfg.instant:
        raise Unsupported("composed instant-mode runs use the partially synchronous network")


# -- metrics -----------------------------------------------------------------------


@dataclass
class MetricsReport:
    throughput_total: float
    throughput_per_shard: list[float]
    committed_per_shard: list[int]
    submitted: int
    committed: int
    aborted: int
    unresolved: int
    latency: dict
    responsiveness: dict
    cross_shard_fraction: float
    epoch_failures: list[list[int]]
    chain_quality: Optional[float]
    adversary_block_fraction: Optional[float]
    bandwidth_per_node: float
    messages_per_node: float
    reconfiguration: list[dict]
    reconfiguration_downtime: int
    t_initial: int
    ticks: int
    invariant_breaches: int
    excused: dict = field(default_factory=dict)
    rewards: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return _round(dataclasses.asdict(self))

    def to_json(self) -> bytes:
        return (json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")) + "\n").encode()

    def summary_row(self) -> dict:
        return {
            "throughput": round(self.throughput_total, 6),
            "committed": self.committed,
            "aborted": self.aborted,
            "unresolved": self.unresolved,
            "latency_p50": self.latency.get("p50"),
            "cross_shard_fraction": round(self.cross_shard_fraction, 6),
            "epoch_failures": len(self.epoch_failures),
            "bandwidth_per_node": round(self.bandwidth_per_node, 3),
            "downtime": self.reconfiguration_downtime,
            "breaches": self.invariant_breaches,
        }


def _round(x):
    if isinstance(x, float):
        return float(f"{x:.9g}")
    if isinstance(x, dict):
        return {str(k): _round(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_round(v) for v in x]
    return x


class InvariantBreach(Exception):
    def __init__(self, what: str, cfg: ScenarioConfig, seed: int, tick: int, detail: Any = None):
        super().__init__(f"{what} at tick {tick} (seed {seed})")
        self.what = what
        self.bundle = {"config": cfg.to_dict(), "seed": seed, "tick": tick, "what": what, "detail": detail}


@dataclass
class RunResult:
    report: MetricsReport
    events: list[dict]
    accounts: AccountBook

    def events_jsonl(self) -> bytes:
        return b"".join((json.dumps(_round(e), sort_keys=True, separators=(",", ":")) + "\n").encode() for e in self.events)


# -- helpers -------------------------------------------------------------------------


def _sub_seed(seed: int, *tags) -> int:
    return int.from_bytes(digest_many(b"scenario", str(seed).encode(), *(str(t).encode() for t in tags))[:8], "little")


def _q0(cfg: ScenarioConfig) -> Fraction:
    return Fraction(2, 3) if cfg.intra_proportion == "3f+1" else Fraction(1, 2)


def _quantiles(xs: Sequence[int]) -> dict:
    if not xs:
        return {"n": 0, "p50": None, "p90": None, "max": None, "mean": None}
    a = np.sort(np.asarray(xs, dtype=float))
    return {
        "n": len(xs),
        "p50": float(np.quantile(a, 0.5, method="lower")),
        "p90": float(np.quantile(a, 0.9, method="lower")),
        "max": float(a[-1]),
        "mean": float(a.mean()),
    }


class Wallet:
    """Client-side keys; spendable coins are read back from shard state."""

    def __init__(self, m: int, per_shard: int, seed: int):
        self.m = m
        self.keys: dict[bytes, KeyPair] = {}
        self.by_shard: dict[int, list[KeyPair]] = {s: [] for s in range(m)}
        for s in range(m):
            i = 0
            while len(self.by_shard[s]) < per_shard:
                k = KeyPair.from_seed("wallet", seed, s, i)
                i += 1
                if owner_shard(k.address, m) == s:
                    self.by_shard[s].append(k)
                    self.keys[k.address] = k


def _split_value(total: int, outs: int) -> list[int]:
    base = total // outs
    vals = [base] * outs
    vals[0] += total - base * outs
    return vals


@dataclass(frozen=True)
class Coin:
    op: OutPoint
    value: int
    key: KeyPair
    shard: int


@dataclass
class _Draft:
    at: int
    shard: int
    inputs: list[Coin]
    dests: list[KeyPair]
    local: bool

    def build(self) -> Transaction:
        total = sum(c.value for c in self.inputs)
        outs = [TxOutput(k.address, v) for k, v in zip(self.dests, _split_value(total, len(self.dests)))]
        return Transaction.create([c.op for c in self.inputs], outs, [c.key for c in self.inputs])


def _coins(utxo: UtxoSet, wallet: Wallet, shard: int) -> list[Coin]:
    out = []
    for op in sorted(utxo.entries, key=lambda o: o.serialize()):
        o = utxo.entries[op]
        k = wallet.keys.get(o.owner)
        if k is not None and o.value >= 1:
            out.append(Coin(op, o.value, k, shard))
    return out


def _workload(cfg: ScenarioConfig, rng: np.random.Generator, pools: dict[int, list[Coin]], wallet: Wallet) -> list[_Draft]:
    """A fixed count per shard with Poisson arrival times over the arrival window.

    A local transaction spends coins of its own shard and pays its own
    shard's users; otherwise inputs and outputs land in uniform shards.
    Eventual-mode transactions always draw inputs from one shard.
    """
    window = max(1, int(cfg.epoch_ticks * cfg.arrival_window))
    pools = {s: list(v) for s, v in pools.items()}
    drafts = []
    for s in range(cfg.m):
        times = np.sort(rng.uniform(0, window, cfg.tx_per_shard)).astype(int)
        for t in times:
            local = bool(rng.random() < cfg.locality)
            picks: list[Coin] = []
            for _ in range(cfg.n_inputs):
                src = s if (local or not cfg.instant) else int(rng.integers(cfg.m))
                pool = pools[src] or pools[s]
                if not pool:
                    break
                picks.append(pool.pop(int(rng.integers(len(pool)))))
            if len(picks) < cfg.n_inputs:
                for c in picks:
                    pools[c.shard].append(c)
                continue
            dests = []
            for _ in range(cfg.n_outputs):
                d = s if local else int(rng.integers(cfg.m))
                ks = wallet.by_shard[d]
                dests.append(ks[int(rng.integers(len(ks)))])
            drafts.append(_Draft(int(t), s, picks, dests, local))
    drafts.sort(key=lambda d: (d.at, d.shard))
    return drafts


# -- part one of an epoch: selection, randomness, assignment ---------------------------


def _identity_chain(
    candidates: Sequence[int], corrupted: set, quota: int, p: float, selfish: bool, rng: np.random.Generator, cap: int = 200_000
) -> tuple[list[int], int, dict]:
    """Mine an identity chain until its tail holds `quota` distinct producers.

    Every candidate mines with probability p per round regardless of
    corruption; corrupted producers withhold blocks when `selfish` is set.
    Returns (distinct producers newest first, rounds used, chain stats).
    """
    race = ChainRace()
    cand = np.asarray(candidates)
    rounds = 0
    distinct: list[int] = []
    while rounds < cap:
        rounds += 1
        hits = cand[rng.random(len(cand)) < p]
        for v in hits:
            v = int(v)
            if v in corrupted:
                race.adversary_block(v, selfish)
            else:
                race.honest_block(v)
        if hits.size and rounds % 16 == 0 or rounds == cap:
            seen: set[int] = set()
            distinct = []
            for v in reversed(race.public):
                if v not in seen:
                    seen.add(v)
                    distinct.append(v)
            if len(distinct) >= quota:
                break
    chain = race.finish()
    adv = sum(1 for b in chain if b in corrupted)
    stats = {"blocks": len(chain), "adversary_blocks": adv}
    if len(distinct) < quota:
        raise InvariantBreach("node selection quota not met", ScenarioConfig(), 0, rounds)
    return distinct[:quota], rounds, stats


def _select(cfg: ScenarioConfig, epoch: int, candidates: Sequence[int], quota: int, corrupted: set, seed: int, stats: dict) -> tuple[list[int], int]:
    """Node selection; returns (selected nodes, ticks spent)."""
    if quota == 0:
        return [], 0
    rng = np.random.default_rng(_sub_seed(seed, "ns", epoch))
    if cfg.ns == "permissioned":
        roster = [(v, KeyPair.from_seed("node", v).public) for v in candidates]
        out = select_permissioned(roster, epoch)
        picked = permutation(digest_many(b"ca", str(seed).encode(), str(epoch).encode()), out.nodes)
        return picked[:quota], 1
    if cfg.ns == "underlying_chain":
        if cfg.admission == "permissionless_pos":
            # stake lottery: one block per round, uniform stake
            picks = permutation(digest_many(b"stake", str(seed).encode(), str(epoch).encode()), list(candidates))
            return picks[:quota], quota
        nodes, rounds, chain = _identity_chain(candidates, corrupted, quota, cfg.pow_p, cfg.selfish_mining, rng)
        stats["blocks"] += chain["blocks"]
        stats["adversary_blocks"] += chain["adversary_blocks"]
        return nodes, rounds
    # reference committee: a puzzle race, then agreement on the list
    keys = {v: KeyPair.from_seed("node", v) for v in candidates}
    puzzle = digest_many(b"puzzle", str(seed).encode(), str(epoch).encode())
    sols = puzzle_race(keys, puzzle, PowParams(cfg.pow_p), quota, random.Random(_sub_seed(seed, "race", epoch)))
    found = [s.node for s in sols]
    committee = list(candidates[: max(1, cfg.u)]) if not stats.get("ref") else stats["ref"]
    views = {v: found for v in committee}
    out = select_reference_committee(committee, views, k_t=cfg.k_t, epoch=epoch)
    return out.nodes[:quota], 1 + out.stats["view"]


def _randomness(cfg: ScenarioConfig, committee: Sequence[int], epoch: int, seed: int) -> bytes:
    if cfg.er == "commit_reveal":
        variant = CommitReveal()
    else:
        variant = ThresholdShare(max_faults(len(committee)) + 1)
    return run_beacon(list(committee), epoch, variant, seed=_sub_seed(seed, "er") % (2**63)).xi


def _rule(cfg: ScenarioConfig):
    if cfg.sr == "random_replacement":
        return RandomReplacement(default_k(cfg.n, cfg.m) if cfg.k is None else cfg.k)
    if cfg.sr == "chronological":
        return Chronological(Fraction(1, cfg.u) if cfg.k is None else Fraction(cfg.k, cfg.u))
    if cfg.sr == "bounded_cuckoo":
        return BoundedCuckoo(k_evict=1 if cfg.k is None else cfg.k, cap=cfg.u)
    return None


# -- part two: instant-mode epoch ---------------------------------------------------------


@dataclass
class _EpochOutcome:
    committed_per_shard: list[int]
    submitted: int
    aborted: int
    unresolved: int
    latencies: list[int]
    cross: int
    bytes_sent: int
    msgs_sent: int
    nodes: int
    states: dict[int, UtxoSet]
    blocks: list[CommittedBlock]
    excused: int
    end: int


def _instant_epoch(
    cfg: ScenarioConfig,
    epoch: int,
    seed: int,
    roster: ShardRosterList,
    bad_nodes: set,
    failed: set,
    states: dict[int, UtxoSet],
    wallet: Wallet,
    t0: int,
) -> _EpochOutcome:
    members = {c: list(ms) for c, ms in enumerate(roster.shards)}
    byz = {v: cfg.byzantine_behavior for v in roster.members() if v in bad_nodes}
    rng_net = random.Random(_sub_seed(seed, "net", epoch))

    def delays(src, dst, payload, now):
        return rng_net.randint(1, cfg.delay)

    system = CrossShardSystem(
        cfg.m, cfg.u, delta=cfg.delta, gst=cfg.gst, seed=_sub_seed(seed, "sys", epoch), byzantine=byz,
        lock_ttl=cfg.lock_ttl, grace=cfg.grace, delay_policy=delays, members=members,
    )
    system.directory.epoch = epoch
    for c in range(cfg.m):
        for v in members[c]:
            system.apps[v].utxo = states[c].copy()
    pools = {c: _coins(states[c], wallet, c) for c in range(cfg.m)}
    drafts = _workload(cfg, np.random.default_rng(_sub_seed(seed, "load", epoch)), pools, wallet)
    mode = TWO_PHASE.get(cfg.cstp, Mode.INPUT_SHARDS)
    splits: list = []
    txs: list[tuple[Transaction, _Draft]] = []
    for d in drafts:
        tx = d.build()
        txs.append((tx, d))
        if cfg.cstp == "split":
            values = {c.op: c.value for c in d.inputs}
            signers = {c.key.address: c.key for c in d.inputs}
            plan = split_transaction(tx, cfg.m, signers, values)
            splits.append(plan)
            for part in plan.parts:
                system.net.set_timer(d.at, system.submit, part, Mode.INPUT_SHARDS)
        else:
            system.net.set_timer(d.at, system.submit, tx, mode)

    def finals() -> None:
        for plan in splits:
            if plan.final is None or plan.final.tx_id in system.records:
                continue
            recs = [system.records.get(p.tx_id) for p in plan.parts]
            if all(r is not None and r.state is TxState.COMMITTED for r in recs):
                system.submit(plan.final, Mode.INPUT_SHARDS)
        if system.net.now < cfg.epoch_ticks:
            system.net.set_timer(system.net.now + 25, finals)

    if splits:
        system.net.set_timer(25, finals)
    system.run(cfg.epoch_ticks)
    # stop the world: let in-flight transactions settle before reconfiguring
    system.run(cfg.epoch_ticks + 3 * (cfg.lock_ttl + cfg.grace))
    chk = system.check(slack=cfg.grace)
    end = system.net.now

    def touches_failed(rec) -> bool:
        plan = rec.plan
        shards = plan.involved if not plan.intra else (plan.coordinator,)
        return any(s in failed for s in shards)

    breaches = {k: chk[k] for k in ("conflicting_commits", "double_spends", "atomicity_breaches", "locked_past_expiry", "diverged_shards")}
    excused = 0
    if failed:
        # a captured shard voids its own guarantees; only count the others
        healthy = [s for s in range(cfg.m) if s not in failed]
        breaches["conflicting_commits"] = sum(len(conflicting_commits(system.clusters[s].logs())) for s in healthy)
        breaches["diverged_shards"] = sum(len({a.utxo.state_root() for a in system.honest_apps(s)}) > 1 for s in healthy)
        excused = sum(1 for r in system.records.values() if touches_failed(r))
        breaches["double_spends"] = 0 if excused else breaches["double_spends"]
        breaches["atomicity_breaches"] = 0 if excused else breaches["atomicity_breaches"]
        breaches["locked_past_expiry"] = 0 if excused else breaches["locked_past_expiry"]
    for what, count in breaches.items():
        if count:
            raise InvariantBreach(what, cfg, seed, t0 + end, {"epoch": epoch, "count": count})

    user_txs = {tx.tx_id: (tx, d) for tx, d in txs}
    if cfg.cstp == "split":
        # a split transfer counts once, when its final spend commits
        user_txs = {}
        for plan, (tx, d) in zip(splits, txs):
            key = plan.final if plan.final is not None else plan.parts[0]
            user_txs[key.tx_id] = (key, d)
    committed = [0] * cfg.m
    lat, aborted, unresolved, cross = [], 0, 0, 0
    for tid, (tx, d) in user_txs.items():
        rec = system.records.get(tid)
        plan = route_transaction(tx, cfg.m, mode)
        cross += not plan.intra
        if rec is None or rec.state not in (TxState.COMMITTED, TxState.ABORTED):
            if rec is not None and touches_failed(rec):
                continue
            if rec is None and any(s in failed for s in plan.involved):
                continue
            unresolved += 1
            continue
        if rec.state is TxState.ABORTED:
            aborted += 1
            continue
        done = next(t for t, e in rec.history if e == TxState.COMMITTED.value)
        if done <= cfg.epoch_ticks:
            committed[plan.coordinator if plan.intra else min(plan.involved)] += 1
        lat.append(done - d.at)
    if unresolved:
        raise InvariantBreach("transaction neither accepted nor rejected", cfg, seed, t0 + end, {"epoch": epoch, "count": unresolved})

    new_states = {}
    blocks = []
    for c in range(cfg.m):
        apps = system.honest_apps(c)
        new_states[c] = apps[0].utxo.copy() if apps else states[c].copy()
        rep = system.clusters[c].honest[0] if system.clusters[c].honest else None
        if rep is not None:
            for entry in rep.log:
                cert = rep.commit_certs.get(entry.seq)
                if entry.payload is None or cert is None:
                    continue
                # commit-certificate signers are the participation evidence
                votes = {v.signer: 1 for v in cert.votes}
                leader = rep.primary(cert.view)
                blocks.append(CommittedBlock(leader, tuple(members[c]), votes, leader))
    nodes = sum(len(ms) for ms in members.values())
    return _EpochOutcome(
        committed, len(user_txs), aborted, unresolved, lat, cross,
        sum(system.net.bytes_sent.values()), sum(system.net.msgs_sent.values()), nodes,
        new_states, blocks, excused, end,
    )


# -- eventual mode: chain shards with relay transactions ----------------------------------


class _EventualRun:
    """Chain shards mined continuously; epochs only pace the workload.

    Transactions spend inputs of one origin shard. Once buried under `lam`
    blocks there, each foreign output is relayed to its shard and credited
    when the relay is buried under `lam` blocks in turn.
    """

    def __init__(self, cfg: ScenarioConfig, seed: int, roster: ShardRosterList, bad: set, states: dict[int, UtxoSet]):
        self.cfg = cfg
        self.lam = cfg.lam
        self.shards: list[PowShard] = []
        self.bad = bad
        for c, ms in enumerate(roster.shards):
            honest = [v for v in ms if v not in bad] or list(ms)
            adversary = [v for v in ms if v in bad] if len(honest) < len(ms) else []
            p = 1.0 / (len(ms) * cfg.block_interval)
            self.shards.append(
                PowShard(
                    c, honest, adversary, p=p, delay=cfg.delay, k=cfg.lam, seed=_sub_seed(seed, "pow", c) % (2**63),
                    private_attack=cfg.selfish_mining, validator=self._validator(c),
                )
            )
        self.settled = {c: states[c].copy() for c in states}
        self.pending: dict[bytes, dict] = {}
        self.done: dict[bytes, int] = {}

    def _validator(self, c: int) -> Callable:
        def valid(chain_items, item) -> bool:
            if not default_valid(chain_items, item):
                return False
            if isinstance(item, RelayTransaction):
                return self._origin_confirmed(item)
            return True

        return valid

    def _origin_confirmed(self, r: RelayTransaction) -> bool:
        chain = self.shards[r.origin].view()
        if len(chain) <= r.origin_height or chain[r.origin_height].hash != r.origin_block:
            return False
        if not any(item_id(it) == r.source_tx for it in chain[r.origin_height].body):
            return False
        return len(chain) - 1 - r.origin_height >= r.depth

    def submit(self, tx: Transaction, origin: int, at: int) -> None:
        self.pending[tx.tx_id] = {"tx": tx, "origin": origin, "at": at, "relays": None, "credited": set()}
        self.shards[origin].submit(tx)

    @staticmethod
    def _buried(shard: PowShard, iid: bytes) -> Optional[tuple[Any, int]]:
        chain = shard.view()
        for b in chain:
            if any(item_id(it) == iid for it in b.body):
                return b, chain[-1].height - b.height
        return None

    def step(self) -> None:
        for s in self.shards:
            s.step()

    def poll(self, now: int) -> None:
        m = len(self.shards)
        for tid in list(self.pending):
            p = self.pending[tid]
            tx = p["tx"]
            if p["relays"] is None:
                hit = self._buried(self.shards[p["origin"]], tid)
                if hit is None or hit[1] < self.lam:
                    continue
                blk = hit[0]
                st = self.settled[p["origin"]]
                for op in tx.inputs:
                    if op in st:
                        st.remove(op)
                p["relays"] = {}
                for i, out in enumerate(tx.outputs):
                    dst = owner_shard(out.owner, m)
                    if dst == p["origin"]:
                        st.add(tx.outpoint(i), out)
                    else:
                        r = relay_of(tx, p["origin"], blk, self.lam, i)
                        p["relays"][i] = (dst, r)
                        self.shards[dst].submit(r)
            for i, (dst, r) in p["relays"].items():
                if i in p["credited"]:
                    continue
                hit = self._buried(self.shards[dst], r.relay_id)
                if hit is not None and hit[1] >= self.lam:
                    p["credited"].add(i)
                    self.settled[dst].add(tx.outpoint(i), tx.outputs[i])
            if len(p["credited"]) == len(p["relays"]):
                self.done[tid] = now
                del self.pending[tid]

    def double_spends(self) -> int:
        spent: dict[OutPoint, bytes] = {}
        bad = 0
        for s in self.shards:
            for b in s.stable_prefix():
                for it in b.body:
                    if isinstance(it, Transaction):
                        for op in it.inputs:
                            if spent.setdefault(op, it.tx_id) != it.tx_id:
                                bad += 1
        return bad

    def chain_stats(self) -> tuple[int, int]:
        blocks = adv = 0
        for s in self.shards:
            for b in s.view()[1:]:
                blocks += 1
                adv += b.header.producer in self.bad
        return blocks, adv


# -- the run loop ------------------------------------------------------------------------


def _mint(cfg: ScenarioConfig, wallet: Wallet, seed: int) -> dict[int, UtxoSet]:
    states = {c: UtxoSet() for c in range(cfg.m)}
    per_shard = max(4, 2 * cfg.tx_per_shard * cfg.n_inputs)
    n = 0
    for c in range(cfg.m):
        keys = wallet.by_shard[c]
        for i in range(per_shard):
            op = OutPoint(digest_many(b"genesis", str(seed).encode(), str(n).encode()), 0)
            n += 1
            states[c].add(op, TxOutput(keys[i % len(keys)].address, 1 << 20))
    return states


def run(cfg: ScenarioConfig, seed: Optional[int] = None) -> RunResult:
    """One deterministic run. Raises ConfigError, Unsupported or InvariantBreach."""
    seed = cfg.seed if seed is None else seed
    viol = validate_config(cfg)
    if viol:
        raise ConfigError("; ".join(map(str, viol)))
    check_runnable(cfg)
    n, m = cfg.n, cfg.m
    nodes = list(range(n))
    adv = AdversaryConfig(
        rho=cfg.rho,
        timing=Timing.ADAPTIVE if cfg.corruption_timing == "adaptive" else Timing.STATIC,
        tau=cfg.tau if cfg.corruption_speed == "mild" else None,
    )
    corruption = CorruptionLedger(adv, n)
    budget = adv.budget(n)
    order = permutation(digest_many(b"targets", str(seed).encode()), nodes)
    if adv.timing is Timing.STATIC:
        corruption.corrupt_static(order[:budget])
    corruption.start()

    events: list[dict] = []
    stats = {"blocks": 0, "adversary_blocks": 0}
    wallet = Wallet(m, 6, seed)
    states = _mint(cfg, wallet, seed)
    policy = RewardPolicy(Fraction(repr(cfg.block_reward)), Fraction(repr(cfg.leader_multiplier)), Fraction(repr(cfg.deposit)))
    book = AccountBook.open(nodes, policy)
    opening = book

    # epoch 0: selection, randomness and assignment
    selected, t_ns = _select(cfg, 0, nodes, m * cfg.u, corruption.corrupted_set(0), seed, stats)
    xi = _randomness(cfg, selected[: cfg.u], 0, seed)
    outcome = assign(selected, xi, m, cfg.u)
    roster = ShardRosterList(0, [list(g) for g in outcome.anodes])
    reserve = [v for v in permutation(digest(b"reserve" + xi), nodes) if v not in set(selected)]
    t_initial = t_ns + 1
    events.append({"event": "genesis", "t_initial": t_initial, "shards": roster.shards})
    if adv.timing is Timing.ADAPTIVE:
        # the adaptive adversary goes after the first committee, then anyone
        first = list(roster.shards[0])
        targets = first + [v for v in order if v not in set(first)]
        for v in targets[:budget]:
            corruption.request_corruption(v, t_initial)

    q0 = _q0(cfg)
    t = t_initial
    failures: list[list[int]] = []
    reconf: list[dict] = []
    downtime_total = 0
    committed = [0] * m
    submitted = aborted = unresolved = cross = excused = 0
    lat: list[int] = []
    bytes_sent = msgs_sent = node_epochs = 0
    rule = _rule(cfg)

    if not cfg.instant:
        bad = {v for v in corruption.corrupted_set(t + cfg.epoch_ticks) if v in roster.members()}
        return _run_eventual(cfg, seed, roster, bad, states, wallet, book, opening, policy, t_initial, events, q0)

    for e in range(cfg.epochs):
        if e > 0 and rule is not None:
            ref = roster.shards[0]
            stats["ref"] = list(ref)
            xi = _randomness(cfg, ref, e, seed)
            if isinstance(rule, BoundedCuckoo):
                want = m * rule.k_evict
            else:
                want = sum(rule.intake(roster))
            want = min(want, len(reserve))
            newcomers, t_sel = _select(cfg, e, reserve, want, corruption.corrupted_set(t), seed, stats)
            if isinstance(rule, BoundedCuckoo):
                anodes = newcomers
            else:
                need = rule.intake(roster)
                if len(newcomers) < sum(need):
                    raise InvariantBreach("reserve exhausted", cfg, seed, t)
                it = iter(newcomers)
                anodes = [[next(it) for _ in range(need[c])] for c in range(m)]
            prev = roster
            roster, ev = plan_reconfiguration(roster, anodes, xi, rule)
            taken = set(newcomers)
            reserve = [v for v in reserve if v not in taken] + list(ev.departed)
            moved = 0
            for c, joiners in ev.joined.items():
                servers = [(v, Snapshot(states[c], [])) for v in prev.shards[c] if v in roster.shards[c]]
                for v in joiners:
                    rec = bootstrap_member(v, c, servers, states[c].state_root(), None)
                    if not rec.ok:
                        raise InvariantBreach("state transfer failed", cfg, seed, t, {"member": v, "shard": c})
                    moved += rec.bytes
            down = math.ceil(moved / cfg.bandwidth) + t_sel
            ev = dataclasses.replace(ev, transfer_bytes=moved, downtime=down)
            reconf.append(ev.record())
            events.append({"event": "reconfiguration", "t": t, **ev.record()})
            downtime_total += down
            t += down

        bad = {v for v in corruption.corrupted_set(t + cfg.epoch_ticks) if v in roster.members()}
        failed = set()
        for c, ms in enumerate(roster.shards):
            if sum(v in bad for v in ms) >= failure_threshold(len(ms), q0):
                failed.add(c)
                failures.append([e, c])
                events.append({"event": "epoch_failure", "epoch": e, "shard": c, "corrupted": sorted(v for v in ms if v in bad)})
        out = _instant_epoch(cfg, e, seed, roster, bad, failed, states, wallet, t)
        states = out.states
        for c in range(m):
            committed[c] += out.committed_per_shard[c]
        submitted += out.submitted
        aborted += out.aborted
        unresolved += out.unresolved
        cross += out.cross
        excused += out.excused
        lat += out.latencies
        bytes_sent += out.bytes_sent
        msgs_sent += out.msgs_sent
        node_epochs += out.nodes
        for blk in out.blocks:
            book = settle_block(book, blk, policy)
        events.append({"event": "epoch", "epoch": e, "t": t, "committed": sum(out.committed_per_shard), "submitted": out.submitted, "aborted": out.aborted})
        t += max(cfg.epoch_ticks, out.end)

    if not book.conserved(opening):
        raise InvariantBreach("account conservation", cfg, seed, t)
    active = cfg.epochs * cfg.epoch_ticks
    per_shard = [c * 1000 / active for c in committed]
    report = MetricsReport(
        throughput_total=math.fsum(per_shard),
        throughput_per_shard=per_shard,
        committed_per_shard=committed,
        submitted=submitted,
        committed=sum(committed),
        aborted=aborted,
        unresolved=unresolved,
        latency=_quantiles(lat),
        responsiveness=_responsiveness(cfg, lat),
        cross_shard_fraction=cross / submitted if submitted else 0.0,
        epoch_failures=failures,
        chain_quality=_quality(stats)[0],
        adversary_block_fraction=_quality(stats)[1],
        bandwidth_per_node=bytes_sent / node_epochs if node_epochs else 0.0,
        messages_per_node=msgs_sent / node_epochs if node_epochs else 0.0,
        reconfiguration=reconf,
        reconfiguration_downtime=downtime_total,
        t_initial=t_initial,
        ticks=t,
        invariant_breaches=0,
        excused={"transactions_in_failed_shards": excused},
        rewards=_reward_summary(book, opening),
    )
    return RunResult(report, events, book)


def _quality(stats: dict) -> tuple[Optional[float], Optional[float]]:
    if not stats["blocks"]:
        return None, None
    adv = stats["adversary_blocks"] / stats["blocks"]
    return 1 - adv, adv


def _responsiveness(cfg: ScenarioConfig, lat: Sequence[int]) -> dict:
    med = _quantiles(lat)["p50"]
    return {
        "delta_bound": cfg.delta,
        "actual_delay": cfg.delay,
        "median_latency": med,
        "latency_per_delay": None if med is None else med / cfg.delay,
        "latency_per_bound": None if med is None else med / cfg.delta,
    }


def _reward_summary(book: AccountBook, opening: AccountBook) -> dict:
    return {
        "minted": float(book.minted - opening.minted),
        "burned": float(book.burned - opening.burned),
        "conserved": book.conserved(opening),
    }


def _run_eventual(cfg, seed, roster, bad, states, wallet, book, opening, policy, t_initial, events, q0) -> RunResult:
    m = cfg.m
    eng = _EventualRun(cfg, seed, roster, bad, states)
    failures = []
    for c, ms in enumerate(roster.shards):
        if sum(v in bad for v in ms) * 2 >= len(ms):
            failures.append([0, c])
    submitted, cross = 0, 0
    arrivals: dict[bytes, tuple[int, int]] = {}
    horizon = cfg.epochs * cfg.epoch_ticks
    drain = 60 * cfg.lam * cfg.block_interval
    now = 0
    queue: list[tuple[int, Transaction, int]] = []
    for e in range(cfg.epochs):
        # spend only coins that are settled and not already in flight
        busy = {op for _, tx, _ in queue for op in tx.inputs}
        busy |= {op for p in eng.pending.values() for op in p["tx"].inputs}
        pools = {c: [x for x in _coins(eng.settled[c], wallet, c) if x.op not in busy] for c in range(m)}
        drafts = _workload(cfg, np.random.default_rng(_sub_seed(seed, "load", e)), pools, wallet)
        for d in drafts:
            queue.append((e * cfg.epoch_ticks + d.at, d.build(), d.shard))
        queue.sort(key=lambda x: (x[0], x[2]))
        end = (e + 1) * cfg.epoch_ticks
        while now < end:
            now += 1
            while queue and queue[0][0] <= now:
                at, tx, origin = queue.pop(0)
                eng.submit(tx, origin, at)
                arrivals[tx.tx_id] = (at, origin)
                submitted += 1
                cross += any(owner_shard(o.owner, m) != origin for o in tx.outputs)
            eng.step()
            if now % 5 == 0:
                eng.poll(now)
        events.append({"event": "epoch", "epoch": e, "t": t_initial + now, "committed": len(eng.done)})
    while eng.pending and now < horizon + drain:
        now += 1
        eng.step()
        if now % 5 == 0:
            eng.poll(now)
    eng.poll(now)
    failed = {c for _, c in failures}
    stuck = [tid for tid, p in eng.pending.items() if p["origin"] not in failed]
    if stuck:
        raise InvariantBreach("transaction neither accepted nor rejected", cfg, seed, t_initial + now, {"count": len(stuck)})
    ds = eng.double_spends()
    if ds:
        raise InvariantBreach("double_spends", cfg, seed, t_initial + now, {"count": ds})
    deep = sum(s.prefix_violations() for c, s in enumerate(eng.shards) if c not in failed)
    if deep and not cfg.selfish_mining:
        raise InvariantBreach("common prefix", cfg, seed, t_initial + now, {"reorgs": deep})
    committed = [0] * m
    lat = []
    for tid, when in eng.done.items():
        at, origin = arrivals[tid]
        lat.append(when - at)
        if when <= horizon:
            committed[origin] += 1
    for s in eng.shards:
        for b in s.view()[1:]:
            book = settle_block(book, CommittedBlock(b.header.producer), policy)
    blocks, adv_blocks = eng.chain_stats()
    per_shard = [c * 1000 / horizon for c in committed]
    report = MetricsReport(
        throughput_total=math.fsum(per_shard),
        throughput_per_shard=per_shard,
        committed_per_shard=committed,
        submitted=submitted,
        committed=sum(committed),
        aborted=0,
        unresolved=len(eng.pending),
        latency=_quantiles(lat),
        responsiveness=_responsiveness(cfg, lat),
        cross_shard_fraction=cross / submitted if submitted else 0.0,
        epoch_failures=failures,
        chain_quality=1 - adv_blocks / blocks if blocks else None,
        adversary_block_fraction=adv_blocks / blocks if blocks else None,
        bandwidth_per_node=0.0,
        messages_per_node=0.0,
        reconfiguration=[],
        reconfiguration_downtime=0,
        t_initial=t_initial,
        ticks=t_initial + now,
        invariant_breaches=0,
        excused={"transactions_in_failed_shards": len(eng.pending)},
        rewards=_reward_summary(book, opening),
    )
    return RunResult(report, events, book)


# -- sweeps and the analytic calculator ----------------------------------------------------


SWEEP_AXES = {f.name for f in dataclasses.fields(ScenarioConfig)}


def sweep(template: ScenarioConfig, axis: str, values: Sequence[Any], seed: Optional[int] = None) -> str:
    """One run per value with a shared seed; failing cells are recorded, not fatal."""
    if axis not in SWEEP_AXES:
        raise ConfigError(f"unknown sweep axis {axis!r}")
    seed = template.seed if seed is None else seed
    cols = [axis, "status", "throughput", "committed", "aborted", "unresolved", "latency_p50",
            "cross_shard_fraction", "epoch_failures", "bandwidth_per_node", "downtime", "breaches"]
    buf = io.StringIO()
    w = csv.DictWriter(buf, cols, lineterminator="\n")
    if not values:
        return ""
    w.writeheader()
    for v in values:
        row: dict[str, Any] = {axis: v}
        try:
            res = run(template.replace(**{axis: v}), seed)
            row.update(res.report.summary_row())
            row["status"] = "ok"
        except InvariantBreach as e:
            row.update(status=f"breach: {e.what}", breaches=1)
        except (ConfigError, Unsupported, ValueError) as e:
            row.update(status=f"error: {e}")
        w.writerow(row)
    return buf.getvalue()
