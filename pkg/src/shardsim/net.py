"""Deterministic discrete-event network.

Time is integer ticks. Message delays are chosen by an adversary-controlled
delay policy and then clamped to what the configured message-transmission
model allows. Protocol code talks to the network through a `Port`, which does
not expose the delay bound.
"""
from __future__ import annotations

import heapq
import random
from dataclasses import dataclass, field
from typing import Any, Callable, Optional, Union

NodeId = int


@dataclass(frozen=True)
class Synchronous:
    round_length: int = 1

    def __post_init__(self) -> None:
        if self.round_length < 1:
            raise ValueError("round length must be >= 1")


@dataclass(frozen=True)
class PartialSyncA:
    delta: int

    def __post_init__(self) -> None:
        if self.delta < 1:
            raise ValueError("delta must be >= 1")


@dataclass(frozen=True)
class PartialSyncB:
    delta: int
    gst: int = 0

    def __post_init__(self) -> None:
        if self.delta < 1 or self.gst < 0:
            raise ValueError("need delta >= 1 and gst >= 0")


NetModel = Union[Synchronous, PartialSyncA, PartialSyncB]


@dataclass
class Clock:
    now: int = 0

    def advance_to(self, t: int) -> None:
        if t < self.now:
            raise ValueError(f"clock cannot go backwards ({t} < {self.now})")
        self.now = t


@dataclass
class Envelope:
    src: NodeId
    dst: NodeId
    payload: Any
    sent_at: int
    deliver_at: int
    seq: int = 0
    size: int = 0

    @property
    def kind(self) -> str:
        return type(self.payload).__name__


# (src, dst, payload, now) -> requested delay in ticks
DelayPolicy = Callable[[NodeId, NodeId, Any, int], int]


def uniform_delay(rng: random.Random, lo: int, hi: int) -> DelayPolicy:
    def policy(src, dst, payload, now):
        return rng.randint(lo, hi)

    return policy


def payload_size(payload: Any) -> int:
    size = getattr(payload, "wire_size", None)
    if callable(size):
        return size()
    return 64 if size is None else int(size)


_DELIVERY, _TIMER = 0, 1


class Network:
    def __init__(
        self,
        model: NetModel,
        delay_policy: Optional[DelayPolicy] = None,
        seed: int = 0,
        trace: bool = False,
    ):
        self.model = model
        self.rng = random.Random(seed)
        hi = model.delta if not isinstance(model, Synchronous) else 1
        self.delay_policy = delay_policy or uniform_delay(self.rng, 1, hi)
        self.clock = Clock()
        self.handlers: dict[NodeId, Callable[[Envelope], None]] = {}
        self.crashed: set[NodeId] = set()
        self._queue: list = []
        self._seq = 0
        self.audit: list[tuple[int, str, NodeId, NodeId]] = []
        self.trace_lines: Optional[list[str]] = [] if trace else None
        self.bytes_sent: dict[NodeId, int] = {}
        self.msgs_sent: dict[NodeId, int] = {}
        self.delivered = 0

    @property
    def now(self) -> int:
        return self.clock.now

    def register(self, node: NodeId, handler: Callable[[Envelope], None]) -> "Port":
        self.handlers[node] = handler
        return Port(self, node)

    def crash(self, node: NodeId) -> None:
        self.crashed.add(node)

    def deliver_at(self, sent_at: int, requested: int) -> int:
        delay = max(1, int(requested))
        m = self.model
        if isinstance(m, Synchronous):
            return (sent_at // m.round_length + 1) * m.round_length
        if isinstance(m, PartialSyncA):
            return sent_at + min(delay, m.delta)
        if sent_at >= m.gst:
            return sent_at + min(delay, m.delta)
        return sent_at + delay

    def send(self, src: NodeId, dst: NodeId, payload: Any, delay: Optional[int] = None) -> Optional[Envelope]:
        if src in self.crashed:
            raise RuntimeError(f"crashed node {src} cannot send")
        now = self.clock.now
        if dst not in self.handlers:
            self.audit.append((now, "unknown-recipient", src, dst))
            return None
        if delay is None:
            delay = self.delay_policy(src, dst, payload, now)
        env = Envelope(src, dst, payload, now, self.deliver_at(now, delay), self._seq, payload_size(payload))
        self._seq += 1
        heapq.heappush(self._queue, (env.deliver_at, _DELIVERY, env.seq, env))
        self.bytes_sent[src] = self.bytes_sent.get(src, 0) + env.size
        self.msgs_sent[src] = self.msgs_sent.get(src, 0) + 1
        return env

    def broadcast(self, src: NodeId, dsts, payload: Any) -> None:
        for d in dsts:
            self.send(src, d, payload)

    def set_timer(self, at: int, callback: Callable[..., None], *args) -> None:
        at = max(at, self.clock.now)
        heapq.heappush(self._queue, (at, _TIMER, self._seq, (callback, args)))
        self._seq += 1

    def pending(self) -> int:
        return len(self._queue)

    def next_event_time(self) -> Optional[int]:
        return self._queue[0][0] if self._queue else None

    def advance(self, until: int) -> list[Envelope]:
        """Deliver every event due at or before `until`, in (tick, sequence) order."""
        if until < self.clock.now:
            raise ValueError("cannot advance into the past")
        out = []
        q = self._queue
        while q and q[0][0] <= until:
            t, kind, _, obj = heapq.heappop(q)
            self.clock.advance_to(t)
            if kind == _TIMER:
                cb, args = obj
                cb(*args)
                continue
            env = obj
            if env.dst in self.crashed:
                self.audit.append((t, "to-crashed", env.src, env.dst))
                continue
            out.append(env)
            self.delivered += 1
            if self.trace_lines is not None:
                self.trace_lines.append(f"{t}\t{env.src}\t{env.dst}\t{env.kind}\t{env.size}")
            self.handlers[env.dst](env)
        self.clock.advance_to(until)
        return out

    def run_until_idle(self, limit: int) -> None:
        while self._queue and self._queue[0][0] <= limit:
            self.advance(self._queue[0][0])


@dataclass
class Port:
    """Protocol-facing handle: send, broadcast, timers and the current tick."""

    net: Network = field(repr=False)
    node: NodeId

    @property
    def now(self) -> int:
        return self.net.clock.now

    def send(self, dst: NodeId, payload: Any) -> None:
        self.net.send(self.node, dst, payload)

    def broadcast(self, dsts, payload: Any) -> None:
        for d in dsts:
            self.net.send(self.node, d, payload)

    def set_timer(self, at: int, callback: Callable[..., None], *args) -> None:
        self.net.set_timer(at, callback, *args)
