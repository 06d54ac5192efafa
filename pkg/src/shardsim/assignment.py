"""Node assignment: seeded permutation into groups, and committee failure odds.

The binomial and hypergeometric tails are evaluated with exact rational
arithmetic and converted to float once at the end.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Sequence, Union

import numpy as np

from .crypto import digest

Number = Union[int, float, Fraction]


class HashStream:
    """Counter-mode keyed-hash byte stream used as a deterministic PRNG."""

    def __init__(self, seed: bytes):
        self.seed = seed
        self.counter = 0
        self._buf = b""

    def _refill(self) -> None:
        self._buf += digest(self.seed + self.counter.to_bytes(8, "little"))
        self.counter += 1

    def next_u64(self) -> int:
        if len(self._buf) < 8:
            self._refill()
        x, self._buf = self._buf[:8], self._buf[8:]
        return int.from_bytes(x, "little")

    def below(self, bound: int) -> int:
        """Uniform integer in [0, bound) by rejection sampling."""
        if bound <= 0:
            raise ValueError("bound must be positive")
        limit = (1 << 64) - ((1 << 64) % bound)
        while True:
            x = self.next_u64()
            if x < limit:
                return x % bound


def permutation(seed: bytes, items: Sequence) -> list:
    """Fisher-Yates shuffle driven by a hash stream over `seed`."""
    out = list(items)
    s = HashStream(seed)
    for i in range(len(out) - 1, 0, -1):
        j = s.below(i + 1)
        out[i], out[j] = out[j], out[i]
    return out


def assignment_seed(xi: bytes) -> bytes:
    return digest((0).to_bytes(8, "little") + xi)


@dataclass(frozen=True)
class AssignmentOutcome:
    anodes: tuple[tuple, ...]
    seed: bytes
    permutation: tuple

    @property
    def m(self) -> int:
        return len(self.anodes)


def assign(snodes: Sequence, xi: bytes, m: int, k: int) -> AssignmentOutcome:
    if m < 1 or k < 0:
        raise ValueError("need m >= 1 and k >= 0")
    if len(snodes) != m * k:
        raise ValueError(f"expected {m * k} selected nodes, got {len(snodes)}")
    if len(set(snodes)) != len(snodes):
        raise ValueError("duplicate node in selection")
    seed = assignment_seed(xi)
    perm = permutation(seed, snodes)
    groups = tuple(tuple(perm[j * k : (j + 1) * k]) for j in range(m))
    return AssignmentOutcome(groups, seed, tuple(perm))


class Model(enum.Enum):
    BINOMIAL = "binomial"
    HYPERGEOMETRIC = "hypergeometric"
    MONTE_CARLO = "montecarlo"


def _frac(x: Number) -> Fraction:
    if isinstance(x, Fraction):
        return x
    if isinstance(x, float):
        # decimal intent: 0.2 means 1/5, not the nearest binary double
        return Fraction(repr(x))
    return Fraction(x)


def failure_threshold(u: int, q0: Number) -> int:
    """Smallest adversarial count that breaches honest fraction `q0`."""
    return math.ceil(u * (1 - _frac(q0)))


def binomial_failure(u: int, rho: Number, q0: Number) -> Fraction:
    rho = _frac(rho)
    lo = failure_threshold(u, q0)
    return sum(
        (math.comb(u, x) * rho**x * (1 - rho) ** (u - x) for x in range(lo, u + 1)),
        Fraction(0),
    )


def hypergeometric_failure(n: int, u: int, rho: Number, q0: Number) -> Fraction:
    bad = _frac(rho) * n
    if bad.denominator != 1:
        raise ValueError(f"rho*n = {bad} is not an integer")
    bad = int(bad)
    good = n - bad
    lo = failure_threshold(u, q0)
    num = sum(math.comb(bad, x) * math.comb(good, u - x) for x in range(lo, u + 1))
    return Fraction(num, math.comb(n, u))


@dataclass(frozen=True)
class FailureQuery:
    n: int
    u: int
    rho: Number
    q0: Number
    model: Model = Model.HYPERGEOMETRIC
    trials: int = 100_000
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0 <= _frac(self.rho) <= 1:
            raise ValueError("rho must lie in [0, 1]")
        if not 0 < _frac(self.q0) <= 1:
            raise ValueError("q0 must lie in (0, 1]")
        if self.u < 1:
            raise ValueError("committee size must be >= 1")
        if self.model is not Model.BINOMIAL and self.u > self.n:
            raise ValueError("committee larger than pool")


def failure_probability(q: FailureQuery) -> float:
    if q.model is Model.BINOMIAL:
        return float(binomial_failure(q.u, q.rho, q.q0))
    if q.model is Model.HYPERGEOMETRIC:
        return float(hypergeometric_failure(q.n, q.u, q.rho, q.q0))
    return epoch_failure_monte_carlo(q.n, 1, q.u, q.rho, q.q0, q.trials, q.seed).p


@dataclass(frozen=True)
class MonteCarloEstimate:
    p: float
    lo: float
    hi: float
    trials: int
    failures: int

    def contains(self, x: float) -> bool:
        return self.lo <= x <= self.hi

    @property
    def half_width(self) -> float:
        return (self.hi - self.lo) / 2


def epoch_failure_monte_carlo(
    n: int, m: int, u: int, rho: Number, q0: Number, trials: int, seed: int = 0
) -> MonteCarloEstimate:
    """Fraction of trials in which any of `m` committees breaches `q0`.

    All m committees are drawn together without replacement from the same pool,
    so later committees see the composition left by earlier ones.
    """
    if trials < 100:
        raise ValueError("need at least 100 trials")
    if m * u > n:
        raise ValueError("m*u exceeds pool size")
    bad = _frac(rho) * n
    if bad.denominator != 1:
        raise ValueError(f"rho*n = {bad} is not an integer")
    bad = int(bad)
    thr = failure_threshold(u, q0)
    rng = np.random.default_rng(seed)
    failures = 0
    chunk = 20_000
    done = 0
    while done < trials:
        t = min(chunk, trials - done)
        # rank-based draw: the first m*u positions of a random permutation
        keys = rng.random((t, n))
        order = np.argpartition(keys, m * u - 1, axis=1)[:, : m * u] if m * u < n else np.argsort(keys, axis=1)
        is_bad = order < bad
        per_committee = is_bad.reshape(t, m, u).sum(axis=2)
        failures += int(np.count_nonzero((per_committee >= thr).any(axis=1)))
        done += t
    p = failures / trials
    half = 1.959963984540054 * math.sqrt(p * (1 - p) / trials)
    return MonteCarloEstimate(p, max(0.0, p - half), min(1.0, p + half), trials, failures)


class Unreachable(Exception):
    pass


def min_committee_size(
    rho: Number,
    q0: Number,
    target: float,
    model: Model = Model.BINOMIAL,
    n: int | None = None,
    u_max: int = 2048,
) -> int:
    """Smallest committee size whose failure probability is <= target.

    Failure odds are saw-toothed in u (the ceiling in the breach threshold), so
    a bisection can skip the true minimum; sizes are scanned upward instead.
    """
    if not 0 < target <= 1:
        raise ValueError("target must lie in (0, 1]")
    r, q = _frac(rho), _frac(q0)
    if r > 0 and r >= 1 - q:
        raise Unreachable(f"rho={rho} >= 1-Q0: failure odds do not vanish with u")
    if model is Model.HYPERGEOMETRIC and n is None:
        raise ValueError("hypergeometric sizing needs the pool size n")
    tgt = _frac(target)
    cap = u_max if n is None else min(u_max, n)
    for u in range(1, cap + 1):
        if model is Model.HYPERGEOMETRIC:
            p = hypergeometric_failure(n, u, r, q)
        else:
            p = binomial_failure(u, r, q)
        if p <= tgt:
            return u
    raise Unreachable(f"no committee size up to {cap} reaches {target}")
