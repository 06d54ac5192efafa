"""Node selection: PoW puzzles, selfish mining on an underlying chain, the
reference-committee threshold vote, and CA rosters.

Mining is a Bernoulli trial per node per round. A trial hashes
(puzzle, nonce, public key) and succeeds when the top `lambda_bits` bits of the
hash fall under D = p * 2**lambda_bits, so every solution re-verifies.
"""
from __future__ import annotations

import enum
import hashlib
import random
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Iterable, Mapping, Optional, Sequence, Union

import numpy as np

from .crypto import KeyPair, digest_many

Number = Union[Fraction, float, int]


@dataclass(frozen=True)
class PowParams:
    p: float
    lambda_bits: int = 32

    def __post_init__(self) -> None:
        if not 0 <= self.p <= 1:
            raise ValueError("p must lie in [0, 1]")
        if not 1 <= self.lambda_bits <= 256:
            raise ValueError("lambda_bits must lie in [1, 256]")

    @property
    def difficulty(self) -> int:
        return int(Fraction(repr(self.p)) * (1 << self.lambda_bits))


@dataclass(frozen=True)
class Solution:
    node: int
    public: bytes
    puzzle: bytes
    nonce: int
    hash: bytes


def _pow_hash(puzzle: bytes, nonce: int, public: bytes) -> bytes:
    # fixed-width fields, so plain concatenation is unambiguous
    return hashlib.sha256(puzzle + public + nonce.to_bytes(8, "little")).digest()


def _under(h: bytes, params: PowParams) -> bool:
    top = int.from_bytes(h, "big") >> (256 - params.lambda_bits)
    return top < params.difficulty


def mine_round(
    node: int, key: KeyPair, puzzle: bytes, params: PowParams, rng: random.Random
) -> Optional[Solution]:
    """One mining trial for `node`; returns a solution or None."""
    if params.difficulty == 0:
        return None
    nonce = rng.getrandbits(64)
    h = _pow_hash(puzzle, nonce, key.public)
    if _under(h, params):
        return Solution(node, key.public, puzzle, nonce, h)
    return None


def mine_batch(
    keys: Mapping[int, KeyPair], puzzle: bytes, params: PowParams, rng: random.Random
) -> list[Solution]:
    """One trial for every node in `keys` (in key order); same hash as mine_round."""
    d = params.difficulty
    if d == 0:
        return []
    shift = 256 - params.lambda_bits
    base = hashlib.sha256(puzzle)
    out = []
    for v, key in keys.items():
        nonce = rng.getrandbits(64)
        h = base.copy()
        h.update(key.public)
        h.update(nonce.to_bytes(8, "little"))
        hd = h.digest()
        if int.from_bytes(hd, "big") >> shift < d:
            out.append(Solution(v, key.public, puzzle, nonce, hd))
    return out


def verify_solution(sol: Solution, puzzle: bytes, params: PowParams) -> bool:
    """Re-hash check; a solution for any other puzzle is stale."""
    if sol.puzzle != puzzle:
        return False
    h = _pow_hash(puzzle, sol.nonce, sol.public)
    return h == sol.hash and _under(h, params)


class Method(enum.Enum):
    UNDERLYING_CHAIN = "underlying_chain"
    REFERENCE_COMMITTEE = "reference_committee"
    PERMISSIONED = "permissioned"


@dataclass(frozen=True)
class Seat:
    node: int
    public: bytes
    evidence: object = None


@dataclass(frozen=True)
class SelectionOutcome:
    snodes: tuple[Seat, ...]
    method: Method
    epoch: int
    stats: Mapping = field(default_factory=dict, compare=False)

    @property
    def nodes(self) -> list[int]:
        return [s.node for s in self.snodes]


class QuotaNotMet(Exception):
    def __init__(self, msg: str, partial: SelectionOutcome):
        super().__init__(msg)
        self.partial = partial


# -- underlying chain with an optional selfish miner -----------------------


@dataclass
class ChainRace:
    """Public chain of producer ids plus the adversary's private branch."""

    public: list = field(default_factory=list)
    private: list = field(default_factory=list)
    fork: int = 0
    overrides: int = 0
    orphaned_honest: int = 0

    def adversary_block(self, producer: int, selfish: bool) -> None:
        if not selfish:
            self.public.append(producer)
            return
        if not self.private:
            self.fork = len(self.public)
        self.private.append(producer)

    def honest_block(self, producer: int) -> None:
        self.public.append(producer)
        if not self.private:
            return
        lead = len(self.private) - (len(self.public) - self.fork)
        if lead < 0:
            self.private = []
        elif lead <= 1:
            # a tie (lead 0) is won outright since the adversary controls
            # which branch honest miners see first
            self._publish()

    def _publish(self) -> None:
        self.orphaned_honest += len(self.public) - self.fork
        self.public = self.public[: self.fork] + self.private
        self.private = []
        self.overrides += 1

    def finish(self) -> list:
        if self.private and len(self.private) > len(self.public) - self.fork:
            self._publish()
        self.private = []
        return self.public


def select_underlying_chain(
    rounds: int,
    honest: Sequence[int],
    adversary: Sequence[int],
    params: PowParams,
    quota: int,
    selfish: bool = False,
    seed: int = 0,
    epoch: int = 0,
) -> SelectionOutcome:
    """Producers of the last `quota` blocks of the winning chain.

    The per-round success counts are binomial draws; within a round blocks are
    processed in random order.
    """
    rng = np.random.default_rng(seed)
    race = ChainRace()
    h_hits = rng.binomial(len(honest), params.p, size=rounds)
    a_hits = rng.binomial(len(adversary), params.p, size=rounds) if adversary else np.zeros(rounds, int)
    for r in np.flatnonzero(h_hits + a_hits):
        events = [True] * int(a_hits[r]) + [False] * int(h_hits[r])
        if len(events) > 1:
            rng.shuffle(events)
        for adv in events:
            if adv:
                race.adversary_block(int(adversary[rng.integers(len(adversary))]), selfish)
            else:
                race.honest_block(int(honest[rng.integers(len(honest))]))
    chain = race.finish()
    bad = set(adversary)
    adv_blocks = sum(1 for b in chain if b in bad)
    stats = {
        "blocks": len(chain),
        "adversary_blocks": adv_blocks,
        "adversary_fraction": adv_blocks / len(chain) if chain else 0.0,
        "overrides": race.overrides,
        "orphaned_honest": race.orphaned_honest,
    }
    tail = chain[-quota:] if quota else []
    seats = tuple(Seat(n, b"", ("block", len(chain) - len(tail) + i + 1)) for i, n in enumerate(tail))
    out = SelectionOutcome(seats, Method.UNDERLYING_CHAIN, epoch, stats)
    if len(chain) < quota:
        raise QuotaNotMet(f"{len(chain)} blocks mined, quota {quota}", out)
    return out


def selfish_mining_revenue(alpha: float, gamma: float = 1.0) -> float:
    """Closed-form long-run revenue share of a selfish miner with power alpha."""
    a, g = alpha, gamma
    num = a * (1 - a) ** 2 * (4 * a + g * (1 - 2 * a)) - a**3
    return num / (1 - a * (1 + (2 - a) * a))


# -- reference committee ---------------------------------------------------


def puzzle_race(
    keys: Mapping[int, KeyPair],
    puzzle: bytes,
    params: PowParams,
    quota: int,
    rng: random.Random,
    head_start: Mapping[int, int] | None = None,
    max_rounds: int = 100_000,
) -> list[Solution]:
    """Mine until `quota` distinct nodes hold solutions, in arrival order.

    `head_start[v]` grants node v that many extra rounds before everyone else
    starts (an adversary that learned the puzzle early).
    """
    head_start = head_start or {}
    lead = max(head_start.values(), default=0)
    found: dict[int, Solution] = {}
    order: list[Solution] = []
    for r in range(max_rounds):
        for v in sorted(keys):
            if v in found:
                continue
            if r < lead - head_start.get(v, 0):
                continue
            sol = mine_round(v, keys[v], puzzle, params, rng)
            if sol is not None:
                found[v] = sol
                order.append(sol)
                if len(order) == quota:
                    return order
    return order


def list_difference(a: Sequence, b: Sequence) -> int:
    """Entries of `a` that are missing from `b`."""
    sb = set(b)
    return sum(1 for x in a if x not in sb)


def threshold_vote(proposal: Sequence, view: Sequence, k_t: int) -> bool:
    return list_difference(proposal, view) <= k_t


@dataclass
class EpochStall(Exception):
    views_tried: int

    def __str__(self) -> str:
        return f"reference committee stalled after {self.views_tried} views"


def select_reference_committee(
    members: Sequence[int],
    views: Mapping[int, Sequence[int]],
    byzantine: Iterable[int] = (),
    k_t: int = 2,
    byzantine_proposal: Callable[[int, Sequence[int]], Sequence[int]] | None = None,
    epoch: int = 0,
    max_views: Optional[int] = None,
) -> SelectionOutcome:
    """Agree on the new-node list inside the reference committee.

    Leaders rotate by view. An honest leader proposes its own view; a Byzantine
    leader proposes `byzantine_proposal(leader, its_view)`. Honest members vote
    yes iff the proposal differs from their own view by at most `k_t` entries;
    Byzantine members always vote yes. A proposal commits with 2f+1 yes votes.
    """
    u = len(members)
    f = (u - 1) // 3
    quorum = 2 * f + 1
    bad = set(byzantine)
    tries = max_views if max_views is not None else u
    for v in range(tries):
        leader = members[v % u]
        own = list(views[leader])
        if leader in bad and byzantine_proposal is not None:
            proposal = list(byzantine_proposal(leader, own))
        else:
            proposal = own
        yes = sum(1 for i in members if i in bad or threshold_vote(proposal, views[i], k_t))
        if yes >= quorum:
            seats = tuple(Seat(n, b"") for n in proposal)
            return SelectionOutcome(seats, Method.REFERENCE_COMMITTEE, epoch, {"view": v, "yes": yes})
    raise EpochStall(tries)


def select_permissioned(roster: Sequence[tuple[int, bytes]], epoch: int = 0) -> SelectionOutcome:
    """Pass-through of a CA-issued roster of (node, public key) pairs."""
    keys = [k for _, k in roster]
    if len(set(keys)) != len(keys):
        raise ValueError("duplicate public key in roster")
    if len({n for n, _ in roster}) != len(roster):
        raise ValueError("duplicate node id in roster")
    out = SelectionOutcome(tuple(Seat(n, k, "ca") for n, k in roster), Method.PERMISSIONED, epoch)
    if not roster:
        raise QuotaNotMet("empty roster", out)
    return out


# -- fairness ----------------------------------------------------------------


@dataclass(frozen=True)
class FairnessReport:
    beta: Fraction
    q_f: Fraction
    omega_d: Fraction
    k_f: int
    selected: int

    def holds(self, omega: Number) -> bool:
        """True when Q_f >= (1 - omega) * beta for this sample."""
        return self.q_f >= (1 - Fraction(omega)) * self.beta



def measure_fairness(
    outcome: SelectionOutcome | Sequence[int],
    honest: Callable[[int], bool] | Iterable[int],
    beta: Number,
    k_f: int = 1,
) -> FairnessReport:
    nodes = outcome.nodes if isinstance(outcome, SelectionOutcome) else list(outcome)
    if len(nodes) < k_f:
        raise ValueError(f"need at least k_f={k_f} selected nodes, got {len(nodes)}")
    if not callable(honest):
        hs = set(honest)
        honest = hs.__contains__
    beta = Fraction(repr(beta)) if isinstance(beta, float) else Fraction(beta)
    if beta <= 0:
        raise ValueError("beta must be positive")
    q_f = Fraction(sum(1 for v in nodes if honest(v)), len(nodes))
    return FairnessReport(beta, q_f, 1 - q_f / beta, k_f, len(nodes))


def head_start_fairness(
    n: int,
    n_bad: int,
    quota: int,
    params: PowParams,
    head_start: int,
    trials: int,
    seed: int = 0,
) -> Fraction:
    """Mean omega_d over `trials` puzzle races where the adversary starts early."""
    keys = {v: KeyPair.from_seed("miner", v) for v in range(n)}
    bad = set(range(n_bad))
    beta = Fraction(n - n_bad, n)
    rng = random.Random(seed)
    total = Fraction(0)
    for t in range(trials):
        puzzle = digest_many(b"puzzle", t.to_bytes(8, "little"), seed.to_bytes(8, "little"))
        sols = puzzle_race(keys, puzzle, params, quota, rng, {v: head_start for v in bad})
        if len(sols) < quota:
            raise QuotaNotMet("race did not fill quota", SelectionOutcome((), Method.REFERENCE_COMMITTEE, 0))
        total += measure_fairness([s.node for s in sols], lambda v: v not in bad, beta).omega_d
    return total / trials
