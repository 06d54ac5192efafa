"""Epoch transitions: which members leave each shard, who replaces them, and
how a newcomer obtains the shard state."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from .assignment import HashStream, epoch_failure_monte_carlo, failure_threshold, permutation
from .consensus.common import canonical
from .crypto import digest
from .ledger import Block, UtxoSet, payload_root


# -- rosters --------------------------------------------------------------------


@dataclass
class ShardRosterList:
    epoch: int
    shards: list[list[int]]
    joined: dict[int, int] = field(default_factory=dict)  # node -> epoch it joined its shard
    activeness: dict[int, int] = field(default_factory=dict)  # node -> committed proposals this epoch
    leaders: list[int] = field(default_factory=list)

    def __post_init__(self) -> None:
        for c in self.shards:
            for v in c:
                self.joined.setdefault(v, self.epoch)
        if not self.leaders:
            self.leaders = [0] * len(self.shards)
        self.check()

    @property
    def m(self) -> int:
        return len(self.shards)

    def members(self) -> set[int]:
        return {v for c in self.shards for v in c}

    def shard_of(self, node: int) -> Optional[int]:
        for i, c in enumerate(self.shards):
            if node in c:
                return i
        return None

    def check(self) -> None:
        seen: set[int] = set()
        for c in self.shards:
            for v in c:
                if v in seen:
                    raise ValueError(f"node {v} sits in two shards")
                seen.add(v)

    def shard_activeness(self, c: int) -> int:
        return sum(self.activeness.get(v, 0) for v in self.shards[c])


def is_current_member(roster: ShardRosterList, node: int, epoch: int) -> bool:
    """Signatures for `epoch` only count from that epoch's members."""
    return epoch == roster.epoch and node in roster.members()


# -- rules ------------------------------------------------------------------------


def default_k(n: int, m: int) -> int:
    """log2(n/m), rounded down; power-of-two configurations give it exactly."""
    if n < m or m < 1:
        raise ValueError("need n >= m >= 1")
    return max(1, int(math.floor(math.log2(n / m))))


@dataclass(frozen=True)
class RandomReplacement:
    k: int

    def intake(self, roster: ShardRosterList) -> list[int]:
        return [self.k] * roster.m


@dataclass(frozen=True)
class Chronological:
    fraction: float = 0.5

    def __post_init__(self) -> None:
        if not 0 < self.fraction <= 1:
            raise ValueError("fraction must lie in (0, 1]")

    def count(self, u: int) -> int:
        return math.ceil(self.fraction * u - 1e-12)

    def intake(self, roster: ShardRosterList) -> list[int]:
        return [self.count(len(c)) for c in roster.shards]


@dataclass(frozen=True)
class BoundedCuckoo:
    k_evict: int = 1
    cap: Optional[int] = None  # size limit for I-committees; None means the nominal u

    def intake(self, roster: ShardRosterList) -> None:
        return None  # any number of newcomers


ReconfigRule = Union[RandomReplacement, Chronological, BoundedCuckoo]


@dataclass
class ReconfigEvent:
    epoch: int
    rule: str
    replaced: dict[int, list[int]]
    joined: dict[int, list[int]]
    departed: list[int]
    transfer_bytes: int = 0
    downtime: int = 0

    def record(self) -> dict:
        return {
            "epoch": self.epoch,
            "rule": self.rule,
            "replaced": {str(c): v for c, v in self.replaced.items()},
            "transfer_bytes": self.transfer_bytes,
            "downtime": self.downtime,
        }


def shard_seed(c: int, xi: bytes) -> bytes:
    return digest(c.to_bytes(8, "little") + xi)


def plan_reconfiguration(
    roster: ShardRosterList,
    anodes: Sequence,
    xi: bytes,
    rule: ReconfigRule,
) -> tuple[ShardRosterList, ReconfigEvent]:
    """Rosters for epoch e+1.

    For RandomReplacement and Chronological `anodes` holds one group of
    newcomers per shard; for BoundedCuckoo it is a flat list.
    """
    nxt = roster.epoch + 1
    shards = [list(c) for c in roster.shards]
    replaced: dict[int, list[int]] = {}
    joined: dict[int, list[int]] = {}
    departed: list[int] = []
    current = roster.members()

    if isinstance(rule, (RandomReplacement, Chronological)):
        need = rule.intake(roster)
        if len(anodes) != roster.m:
            raise ValueError(f"expected {roster.m} newcomer groups, got {len(anodes)}")
        for c, group in enumerate(anodes):
            group = list(group)
            if len(group) != need[c]:
                raise ValueError(f"shard {c} takes {need[c]} newcomers, got {len(group)}")
            if current.intersection(group):
                raise ValueError("newcomer already holds a seat")
            if isinstance(rule, RandomReplacement):
                if rule.k > len(shards[c]):
                    raise ValueError("k exceeds committee size")
                leaving = permutation(shard_seed(c, xi), shards[c])[: rule.k]
            else:
                # oldest first; ties broken by the shard's seeded order
                order = {v: i for i, v in enumerate(permutation(shard_seed(c, xi), shards[c]))}
                leaving = sorted(shards[c], key=lambda v: (roster.joined.get(v, 0), order[v]))[: need[c]]
            keep = [v for v in shards[c] if v not in leaving]
            shards[c] = keep + group
            replaced[c] = sorted(leaving)
            joined[c] = group
            departed += leaving
    elif isinstance(rule, BoundedCuckoo):
        anodes = list(anodes)
        if current.intersection(anodes):
            raise ValueError("newcomer already holds a seat")
        u = rule.cap or max(len(c) for c in roster.shards)
        ranked = sorted(range(roster.m), key=lambda c: (-roster.shard_activeness(c), c))
        half = max(1, roster.m // 2)
        a_set, i_set = ranked[:half], ranked[half:] or ranked[:half]
        s = HashStream(digest(b"cuckoo" + xi))
        for v in anodes:
            c = a_set[s.below(len(a_set))]
            shards[c].append(v)
            joined.setdefault(c, []).append(v)
        for c in a_set:
            olds = [v for v in shards[c] if v in current]
            evict = permutation(shard_seed(c, xi), olds)[: rule.k_evict]
            replaced[c] = sorted(evict)
            shards[c] = [v for v in shards[c] if v not in evict]
            for v in evict:
                dst = i_set[s.below(len(i_set))]
                shards[dst].append(v)
                joined.setdefault(dst, []).append(v)
        # keep I-committees bounded: their oldest members leave beyond the cap
        for c in i_set:
            if c in a_set:
                continue
            extra = len(shards[c]) - u
            if extra > 0:
                newcomers = set(joined.get(c, []))
                olds = sorted((v for v in shards[c] if v not in newcomers), key=lambda v: (roster.joined.get(v, 0), v))
                drop = olds[:extra]
                shards[c] = [v for v in shards[c] if v not in drop]
                replaced.setdefault(c, []).extend(sorted(drop))
                departed += drop
    else:
        raise TypeError(f"unknown rule {rule!r}")

    join_ep = {v: e for v, e in roster.joined.items() if v not in departed}
    for c, vs in joined.items():
        for v in vs:
            join_ep[v] = nxt
    new = ShardRosterList(nxt, shards, join_ep, {}, [0] * roster.m)
    return new, ReconfigEvent(nxt, type(rule).__name__, replaced, joined, sorted(departed))


# -- state transfer ------------------------------------------------------------------


@dataclass
class Snapshot:
    utxo: UtxoSet
    blocks: list[Block]

    def size(self) -> int:
        return len(self.utxo.serialize()) + sum(len(b.header.serialize()) + len(canonical(list(b.body))) for b in self.blocks)


@dataclass
class TransferRecord:
    member: int
    shard: int
    source: Optional[int]
    bytes: int
    attempts: int
    rejected: list[int]
    utxo: Optional[UtxoSet] = None

    @property
    def ok(self) -> bool:
        return self.source is not None


def verify_snapshot(snap: Snapshot, state_root: bytes, tip_hash: Optional[bytes]) -> bool:
    if snap.utxo.state_root() != state_root:
        return False
    blocks = snap.blocks
    if not blocks:
        return tip_hash is None
    for a, b in zip(blocks, blocks[1:]):
        if b.header.prev_hash != a.hash or b.height != a.height + 1:
            return False
    if any(b.header.payload_root != payload_root(b.body) for b in blocks):
        return False
    return blocks[-1].hash == tip_hash


def bootstrap_member(
    member: int,
    shard: int,
    servers: Sequence[tuple[int, Snapshot]],
    state_root: bytes,
    tip_hash: Optional[bytes],
) -> TransferRecord:
    """Fetch the shard state from the listed members in turn until one verifies.

    Every byte received counts, including rejected snapshots.
    """
    total, rejected = 0, []
    for attempt, (src, snap) in enumerate(servers, 1):
        total += snap.size()
        if verify_snapshot(snap, state_root, tip_hash):
            return TransferRecord(member, shard, src, total, attempt, rejected, snap.utxo.copy())
        rejected.append(src)
    return TransferRecord(member, shard, None, total, len(servers), rejected)


# -- corruption timing -----------------------------------------------------------------


@dataclass(frozen=True)
class SafetyVerdict:
    ok: bool
    margin: int  # tau - 2*T_epoch; must be strictly positive

    def __bool__(self) -> bool:
        return self.ok


def corruption_safety_check(tau: int, t_epoch: int) -> SafetyVerdict:
    margin = tau - 2 * t_epoch
    return SafetyVerdict(margin > 0, margin)


# -- long-run breach frequency -----------------------------------------------------------


def replacement_chain_mc(
    n: int, m: int, u: int, bad: int, k: int, q0: float, epochs: int, chains: int = 2000, seed: int = 0
) -> np.ndarray:
    """Breach frequency over `epochs` for many independent replacement chains.

    A vectorised re-implementation of the random-replacement process, used as
    the reference distribution: each epoch every shard swaps k uniformly chosen
    seats for uniformly chosen reserve nodes. Returns one frequency per chain.
    """
    rng = np.random.default_rng(seed)
    thr = failure_threshold(u, q0)
    nodes = np.argsort(rng.random((chains, n)), axis=1)
    seats = nodes[:, : m * u].reshape(chains, m, u).copy()
    reserve = nodes[:, m * u :].copy()
    counts = np.zeros(chains)
    rows = np.arange(chains)[:, None, None]
    cols = np.arange(m)[None, :, None]
    for _ in range(epochs):
        out_idx = np.argsort(rng.random((chains, m, u)), axis=2)[:, :, :k]
        in_idx = np.argsort(rng.random(reserve.shape), axis=1)[:, : m * k]
        incoming = np.take_along_axis(reserve, in_idx, axis=1).reshape(chains, m, k)
        leaving = np.take_along_axis(seats, out_idx, axis=2)
        seats[rows, cols, out_idx] = incoming
        np.put_along_axis(reserve, in_idx, leaving.reshape(chains, m * k), axis=1)
        counts += ((seats < bad).sum(axis=2) >= thr).any(axis=1)
    return counts / epochs


@dataclass
class BreachStudy:
    epochs: int
    breaches: int
    per_epoch: list[bool]
    mc_p: float  # stationary per-epoch breach probability
    ci_lo: float  # 95% band of the breach frequency over `epochs` epochs
    ci_hi: float

    @property
    def frequency(self) -> float:
        return self.breaches / self.epochs

    def consistent(self) -> bool:
        return self.ci_lo <= self.frequency <= self.ci_hi


def breach_study(
    n: int,
    m: int,
    u: int,
    rho: float,
    q0: float,
    epochs: int = 50,
    k: Optional[int] = None,
    seed: int = 0,
    mc_trials: int = 100_000,
    chains: int = 2000,
) -> BreachStudy:
    """Random replacement over many epochs with a fixed corrupted pool.

    `n` nodes, `rho*n` of them corrupted, fill m committees of u; the rest wait
    in reserve and the k leavers per shard rejoin the reserve. Consecutive
    epochs share most members, so the reference band comes from simulated
    chains of the same length rather than from independent epochs.
    """
    bad = round(rho * n)
    if abs(bad - rho * n) > 1e-9:
        raise ValueError("rho*n must be an integer")
    if m * u > n:
        raise ValueError("m*u exceeds n")
    k = default_k(n, m) if k is None else k
    if m * k > n - m * u:
        raise ValueError("reserve too small for the intake")
    rng = np.random.default_rng(seed)
    nodes = [int(v) for v in rng.permutation(n)]
    corrupted = set(range(bad))
    roster = ShardRosterList(0, [nodes[c * u : (c + 1) * u] for c in range(m)])
    reserve = nodes[m * u :]
    thr = failure_threshold(u, q0)
    rule = RandomReplacement(k)
    flags = []
    for e in range(epochs):
        xi = digest(b"epoch-randomness" + seed.to_bytes(8, "little") + e.to_bytes(8, "little"))
        picks = permutation(digest(b"intake" + xi), reserve)[: m * k]
        groups = [picks[c * k : (c + 1) * k] for c in range(m)]
        roster, ev = plan_reconfiguration(roster, groups, xi, rule)
        taken = set(picks)
        reserve = [v for v in reserve if v not in taken] + ev.departed
        flags.append(any(sum(v in corrupted for v in c) >= thr for c in roster.shards))
    mc = epoch_failure_monte_carlo(n, m, u, rho, q0, mc_trials, seed + 1)
    freqs = replacement_chain_mc(n, m, u, bad, k, q0, epochs, chains, seed + 2)
    lo, hi = np.quantile(freqs, [0.025, 0.975])
    return BreachStudy(epochs, sum(flags), flags, mc.p, float(lo), float(hi))
