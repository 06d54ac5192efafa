"""Corruption scheduling under static/adaptive timing and mild/immediate speed."""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Optional


class Timing(enum.Enum):
    STATIC = "static"
    ADAPTIVE = "adaptive"


class Behavior(enum.Enum):
    EQUIVOCATE = "equivocate"
    WITHHOLD = "withhold"
    SELFISH_MINE = "selfish_mine"
    DELAY_MAX = "delay_max"
    CENSOR_NODES = "censor_nodes"
    REPLAY_CERT = "replay_cert"
    FLOOD_SHARD = "flood_shard"


class BudgetExceeded(Exception):
    pass


class CorruptionRejected(Exception):
    pass


@dataclass(frozen=True)
class AdversaryConfig:
    rho: float = 0.0
    timing: Timing = Timing.ADAPTIVE
    tau: Optional[int] = 0  # None means immediate corruption
    behaviors: frozenset = frozenset()
    flood_rate: float = 0.0

    def __post_init__(self) -> None:
        if not 0 <= self.rho < 0.5:
            raise ValueError("rho must lie in [0, 1/2)")
        if self.tau is not None and self.tau < 0:
            raise ValueError("tau must be >= 0")
        object.__setattr__(
            self, "behaviors", frozenset(Behavior(b) if isinstance(b, str) else b for b in self.behaviors)
        )

    @property
    def corruption_delay(self) -> int:
        return 0 if self.tau is None else self.tau

    def budget(self, n: int) -> int:
        return math.floor(Fraction(self.rho).limit_denominator(10**6) * n)


@dataclass
class CorruptionLedger:
    """Tracks per-node state: honest, pending(effective_at) or corrupted."""

    config: AdversaryConfig
    n: int
    started: bool = False
    effective_at: dict[int, int] = field(default_factory=dict)

    def start(self) -> None:
        self.started = True

    def request_corruption(self, node: int, now: int) -> int:
        """Schedule `node` for corruption; returns the tick it takes effect."""
        if self.config.timing is Timing.STATIC and self.started:
            raise CorruptionRejected("static adversary cannot pick targets after start")
        if node in self.effective_at:
            return self.effective_at[node]
        if len(self.effective_at) >= self.config.budget(self.n):
            raise BudgetExceeded(f"corruption budget {self.config.budget(self.n)} reached")
        at = now + self.config.corruption_delay
        self.effective_at[node] = at
        return at

    def corrupt_static(self, nodes: Iterable[int]) -> None:
        for v in nodes:
            self.request_corruption(v, 0)

    def corrupted_set(self, t: int) -> set[int]:
        return {v for v, at in self.effective_at.items() if at <= t}

    def is_corrupted(self, node: int, t: int) -> bool:
        at = self.effective_at.get(node)
        return at is not None and at <= t

    def status(self, node: int, t: int) -> str:
        at = self.effective_at.get(node)
        if at is None:
            return "honest"
        return "corrupted" if at <= t else "pending"
