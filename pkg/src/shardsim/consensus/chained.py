"""Chained (pipelined) BFT in the HotStuff style.

Each round has one leader, `members[round % u]`. A proposal carries the QC of
its parent, so one round of votes certifies a block and advances the lock and
commit of its ancestors. A block is final once it heads a chain of
`chain_depth` blocks on consecutive rounds, each certified by the next.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Optional, Sequence

from ..crypto import KeyPair, digest
from ..net import Envelope, Network
from .common import LogEntry, Vote, canonical, check_votes, max_faults, quorum_size, sign_statement

GENESIS = b"\x00" * 32


@dataclass(frozen=True)
class QC:
    block: bytes
    round: int
    votes: tuple[Vote, ...] = ()

    def wire_size(self) -> int:
        # aggregated signature: charged as constant size
        return 96


GENESIS_QC = QC(GENESIS, 0)


@dataclass(frozen=True)
class Block:
    round: int
    parent: bytes
    justify: QC
    payload: Any
    proposer: int
    hash: bytes = field(init=False, compare=False)

    def __post_init__(self) -> None:
        h = digest(canonical(("block", self.round, self.parent, self.justify.block, self.justify.round, self.payload, self.proposer)))
        object.__setattr__(self, "hash", h)


@dataclass(frozen=True)
class Proposal:
    block: Block
    sender: int
    sig: bytes = b""

    def statement(self):
        return ("proposal", self.block.hash)

    def wire_size(self) -> int:
        return 160 + len(canonical(self.block.payload))


@dataclass(frozen=True)
class VoteMsg:
    block: bytes
    round: int
    sender: int
    sig: bytes = b""

    def statement(self):
        return ("vote", self.block, self.round)


@dataclass(frozen=True)
class NewRound:
    round: int
    high_qc: QC
    sender: int
    sig: bytes = b""

    def statement(self):
        return ("new-round", self.round, self.high_qc.block, self.high_qc.round)


class ChainedReplica:
    def __init__(
        self,
        node: int,
        members: Sequence[int],
        keys: dict[int, KeyPair],
        net: Network,
        shard: int = 0,
        timeout: int = 20,
        chain_depth: int = 3,
        max_round: int = 50,
    ):
        self.id = node
        self.members = list(members)
        self.u = len(self.members)
        self.f = max_faults(self.u)
        self.q = quorum_size(self.u, self.f)
        self.key = keys[node]
        self.roster = {m: keys[m].public for m in self.members}
        self.shard = shard
        self.timeout = timeout
        self.depth = chain_depth
        self.max_round = max_round
        self.port = net.register(node, self.on_envelope)
        self.blocks: dict[bytes, Block] = {}
        self.high_qc = GENESIS_QC
        self.locked_round = 0
        self.last_voted = 0
        self.round = 0
        self.committed: list[Block] = []
        self.committed_hashes: set[bytes] = {GENESIS}
        self.votes: dict[tuple[bytes, int], dict[int, Vote]] = {}
        self.new_rounds: dict[int, dict[int, QC]] = {}
        self.proposed: set[int] = set()
        self.pending: list[Any] = []
        self.commit_round: dict[bytes, int] = {}

    def leader(self, r: int) -> int:
        return self.members[r % self.u]

    def others(self):
        return [m for m in self.members if m != self.id]

    def sign(self, msg):
        return type(msg)(**{**msg.__dict__, "sig": sign_statement(self.key, msg.statement())})

    def valid_sig(self, msg) -> bool:
        pub = self.roster.get(msg.sender)
        return pub is not None and check_votes(msg.statement(), [Vote(msg.sender, msg.sig)], {msg.sender: pub}, 1)

    def valid_qc(self, qc: QC) -> bool:
        if qc == GENESIS_QC:
            return True
        return check_votes(("vote", qc.block, qc.round), qc.votes, self.roster, self.q)

    # -- rounds ------------------------------------------------------------------

    def start(self) -> None:
        self.enter_round(1)

    def enter_round(self, r: int) -> None:
        if r <= self.round or r > self.max_round:
            return
        self.round = r
        self.port.set_timer(self.port.now + self.timeout, self.on_timeout, r)
        if self.leader(r) == self.id and self.high_qc.round == r - 1:
            self.propose(r)

    def on_timeout(self, r: int) -> None:
        if self.round != r:
            return
        msg = self.sign(NewRound(r + 1, self.high_qc, self.id))
        nxt = self.leader(r + 1)
        if nxt == self.id:
            self.on_newround(msg)
        else:
            self.port.send(nxt, msg)
        self.enter_round(r + 1)

    def propose(self, r: int) -> None:
        if r in self.proposed:
            return
        self.proposed.add(r)
        payload = self.pending.pop(0) if self.pending else None
        b = Block(r, self.high_qc.block, self.high_qc, payload, self.id)
        msg = self.sign(Proposal(b, self.id))
        self.port.broadcast(self.others(), msg)
        self.on_proposal(msg)

    # -- handlers ----------------------------------------------------------------

    def on_envelope(self, env: Envelope) -> None:
        msg = env.payload
        if not self.valid_sig(msg):
            return
        if isinstance(msg, Proposal):
            self.on_proposal(msg)
        elif isinstance(msg, VoteMsg):
            self.on_vote(msg)
        elif isinstance(msg, NewRound):
            self.on_newround(msg)

    def extends(self, h: bytes, ancestor: bytes) -> bool:
        while h != ancestor:
            b = self.blocks.get(h)
            if b is None:
                return False
            h = b.parent
        return True

    def on_proposal(self, m: Proposal) -> None:
        b = m.block
        if m.sender != self.leader(b.round) or b.proposer != m.sender:
            return
        if b.parent != b.justify.block or not self.valid_qc(b.justify) or b.justify.round >= b.round:
            return
        self.blocks[b.hash] = b
        self.update_qc(b.justify)
        locked_ok = self.extends(b.hash, self.locked_block) or b.justify.round > self.locked_round
        if b.round > self.last_voted and b.round >= self.round and locked_ok:
            self.last_voted = b.round
            vote = self.sign(VoteMsg(b.hash, b.round, self.id))
            nxt = self.leader(b.round + 1)
            if nxt == self.id:
                self.on_vote(vote)
            else:
                self.port.send(nxt, vote)
        self.enter_round(b.round)

    @property
    def locked_block(self) -> bytes:
        return self._locked_block if hasattr(self, "_locked_block") else GENESIS

    def update_qc(self, qc: QC) -> None:
        if qc.round > self.high_qc.round:
            self.high_qc = qc
        b2 = self.blocks.get(qc.block)
        if b2 is None:
            return
        b1 = self.blocks.get(b2.justify.block)
        if b1 is not None and b2.justify.round > self.locked_round:
            self.locked_round = b2.justify.round
            self._locked_block = b1.hash
        # walk back `depth` consecutive direct links
        chain = [b2]
        while len(chain) < self.depth:
            par = self.blocks.get(chain[-1].parent)
            if par is None or par.round != chain[-1].round - 1:
                return
            chain.append(par)
        self.commit(chain[-1])

    def commit(self, b: Block) -> None:
        if b.hash in self.committed_hashes:
            return
        path = []
        h = b.hash
        while h not in self.committed_hashes:
            blk = self.blocks.get(h)
            if blk is None:
                return
            path.append(blk)
            h = blk.parent
        for blk in reversed(path):
            self.committed.append(blk)
            self.committed_hashes.add(blk.hash)
            self.commit_round[blk.hash] = self.round

    def on_vote(self, m: VoteMsg) -> None:
        if self.leader(m.round + 1) != self.id:
            return
        box = self.votes.setdefault((m.block, m.round), {})
        box[m.sender] = Vote(m.sender, m.sig)
        if len(box) == self.q:
            qc = QC(m.block, m.round, tuple(box[k] for k in sorted(box)))
            self.update_qc(qc)
            if self.round < m.round + 1:
                self.enter_round(m.round + 1)
            elif self.round == m.round + 1:
                self.propose(m.round + 1)

    def on_newround(self, m: NewRound) -> None:
        if self.leader(m.round) != self.id or not self.valid_qc(m.high_qc):
            return
        box = self.new_rounds.setdefault(m.round, {})
        box[m.sender] = m.high_qc
        self.update_qc(m.high_qc)
        if len(box) >= self.q and self.round <= m.round:
            if self.round < m.round:
                self.enter_round(m.round)
            self.propose(m.round)

    def log(self) -> list[LogEntry]:
        return [LogEntry(self.shard, i + 1, b.hash, b.payload) for i, b in enumerate(self.committed)]


class EquivocatingLeader(ChainedReplica):
    """Proposes two different blocks per led round and votes for everything."""

    def propose(self, r: int) -> None:
        if r in self.proposed:
            return
        self.proposed.add(r)
        others = self.others()
        half = len(others) // 2
        for group, payload in ((others[:half], ("a", r)), (others[half:], ("b", r))):
            b = Block(r, self.high_qc.block, self.high_qc, payload, self.id)
            self.blocks[b.hash] = b
            self.port.broadcast(group, self.sign(Proposal(b, self.id)))
            self.vote_for(b)

    def vote_for(self, b: Block) -> None:
        vote = self.sign(VoteMsg(b.hash, b.round, self.id))
        nxt = self.leader(b.round + 1)
        if nxt == self.id:
            self.on_vote(vote)
        else:
            self.port.send(nxt, vote)

    def on_proposal(self, m: Proposal) -> None:
        self.blocks[m.block.hash] = m.block
        self.vote_for(m.block)
        super().on_proposal(m)


class SilentChained(ChainedReplica):
    def on_envelope(self, env: Envelope) -> None:
        pass

    def enter_round(self, r: int) -> None:
        pass


class ChainedCluster:
    def __init__(
        self,
        net: Network,
        members: Sequence[int],
        byzantine: Optional[dict[int, str]] = None,
        timeout: int = 20,
        chain_depth: int = 3,
        max_round: int = 50,
    ):
        kinds = {"equivocate": EquivocatingLeader, "silent": SilentChained}
        self.members = list(members)
        self.byzantine = dict(byzantine or {})
        keys = {m: KeyPair.from_seed("chained", m) for m in self.members}
        self.replicas = {
            m: kinds.get(self.byzantine.get(m), ChainedReplica)(m, self.members, keys, net, 0, timeout, chain_depth, max_round)
            for m in self.members
        }

    def start(self, payloads: Sequence = ()) -> None:
        for r in self.replicas.values():
            r.pending = list(payloads)
        for r in self.replicas.values():
            r.start()

    @property
    def honest(self) -> list[ChainedReplica]:
        return [r for m, r in self.replicas.items() if m not in self.byzantine]

    def logs(self) -> dict[int, list[LogEntry]]:
        return {r.id: r.log() for r in self.honest}
