"""Four-round synchronous echo consensus for committees of u = 2f+1.

Round 1 the leader proposes; round 2 every member echoes what it received;
round 3 a member that saw f+1 echoes of one value and no conflicting echo
sends Accept, otherwise Pending with the conflicting pair as evidence; round 4
a member commits a value once it holds f+1 Accepts for it.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Optional, Sequence

from ..crypto import KeyPair
from ..net import Envelope, Network, Synchronous
from .common import LogEntry, Vote, check_votes, max_faults, payload_digest, sign_statement


@dataclass(frozen=True)
class Propose:
    slot: int
    value: Any
    sender: int
    sig: bytes = b""

    def statement(self):
        return ("propose", self.slot, payload_digest(self.value))


@dataclass(frozen=True)
class Echo:
    slot: int
    value: Any
    leader_sig: bytes
    sender: int
    sig: bytes = b""

    def statement(self):
        return ("echo", self.slot, payload_digest(self.value))


@dataclass(frozen=True)
class Accept:
    slot: int
    digest: bytes
    sender: int
    sig: bytes = b""

    def statement(self):
        return ("accept", self.slot, self.digest)


@dataclass(frozen=True)
class Pending:
    slot: int
    digests: tuple[bytes, bytes]
    sender: int
    sig: bytes = b""

    def statement(self):
        return ("pending", self.slot, self.digests)


class EchoMember:
    def __init__(self, node: int, members: Sequence[int], keys: dict[int, KeyPair], net: Network, shard: int = 0):
        if not isinstance(net.model, Synchronous):
            raise ValueError("echo consensus needs the synchronous network model")
        self.id = node
        self.members = list(members)
        self.u = len(self.members)
        self.f = max_faults(self.u, sync=True)
        self.key = keys[node]
        self.roster = {m: keys[m].public for m in self.members}
        self.shard = shard
        self.port = net.register(node, self.on_envelope)
        self.echoes: dict[int, dict[bytes, set[int]]] = {}
        self.values: dict[bytes, Any] = {}
        self.accepts: dict[int, dict[bytes, set[int]]] = {}
        self.echoed: set[int] = set()
        self.voted: set[int] = set()
        self.log: list[LogEntry] = []
        self.committed_slots: dict[int, bytes] = {}
        self.evidence: list[tuple] = []

    def leader(self, slot: int) -> int:
        return self.members[slot % self.u]

    def sign(self, msg):
        return type(msg)(**{**msg.__dict__, "sig": sign_statement(self.key, msg.statement())})

    def valid(self, msg) -> bool:
        pub = self.roster.get(msg.sender)
        return pub is not None and check_votes(msg.statement(), [Vote(msg.sender, msg.sig)], {msg.sender: pub}, 1)

    def send_all(self, msg) -> None:
        self.port.broadcast([m for m in self.members if m != self.id], msg)
        self.on_message(msg)

    def propose(self, slot: int, value: Any) -> None:
        self.send_all(self.sign(Propose(slot, value, self.id)))

    def on_envelope(self, env: Envelope) -> None:
        self.on_message(env.payload)

    def on_message(self, msg) -> None:
        if not self.valid(msg):
            return
        if isinstance(msg, Propose):
            if msg.sender == self.leader(msg.slot) and msg.slot not in self.echoed:
                self.echoed.add(msg.slot)
                self.send_all(self.sign(Echo(msg.slot, msg.value, msg.sig, self.id)))
        elif isinstance(msg, Echo):
            d = payload_digest(msg.value)
            prop = Propose(msg.slot, msg.value, self.leader(msg.slot), msg.leader_sig)
            if not self.valid(prop):
                return
            self.values[d] = msg.value
            self.echoes.setdefault(msg.slot, {}).setdefault(d, set()).add(msg.sender)
            # decide one round after echoes land
            self.port.set_timer(self.port.now + 1, self.decide, msg.slot)
        elif isinstance(msg, Accept):
            self.accepts.setdefault(msg.slot, {}).setdefault(msg.digest, set()).add(msg.sender)
            box = self.accepts[msg.slot][msg.digest]
            if len(box) >= self.f + 1 and msg.slot not in self.committed_slots and msg.digest in self.values:
                self.committed_slots[msg.slot] = msg.digest
                self.log.append(LogEntry(self.shard, msg.slot, msg.digest, self.values[msg.digest]))
        elif isinstance(msg, Pending):
            self.evidence.append(("pending", msg.slot, msg.sender))

    def decide(self, slot: int) -> None:
        if slot in self.voted:
            return
        seen = self.echoes.get(slot, {})
        if len(seen) > 1:
            self.voted.add(slot)
            a, b = sorted(seen)[:2]
            self.evidence.append(("equivocation", slot, self.leader(slot)))
            self.send_all(self.sign(Pending(slot, (a, b), self.id)))
            return
        for d, who in seen.items():
            if len(who) >= self.f + 1:
                self.voted.add(slot)
                self.send_all(self.sign(Accept(slot, d, self.id)))


class EquivocatingEchoLeader(EchoMember):
    def propose(self, slot: int, value: Any) -> None:
        others = [m for m in self.members if m != self.id]
        half = len(others) // 2
        for group, v in ((others[:half], value), (others[half:], ("conflict", value))):
            self.port.broadcast(group, self.sign(Propose(slot, v, self.id)))


def run_echo(
    values: Sequence[Any],
    u: int = 3,
    byzantine: Optional[dict[int, str]] = None,
    seed: int = 0,
) -> dict[int, list[LogEntry]]:
    """Run one slot per value with rotating leaders; returns honest logs."""
    byzantine = byzantine or {}
    net = Network(Synchronous(1), seed=seed)
    members = list(range(u))
    keys = {m: KeyPair.from_seed("echo", m) for m in members}
    nodes = {
        m: (EquivocatingEchoLeader if byzantine.get(m) == "equivocate" else EchoMember)(m, members, keys, net)
        for m in members
    }
    for slot, v in enumerate(values):
        net.set_timer(slot * 4, nodes[members[slot % u]].propose, slot, v)
    net.run_until_idle(4 * len(values) + 10)
    return {m: n.log for m, n in nodes.items() if m not in byzantine}
