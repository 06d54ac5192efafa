"""Weak-consistency shard chains: Bernoulli PoW mining with the longest-chain rule.

Each honest miner keeps its own view of the block tree; a mined block reaches
the other miners after `delay` rounds. Ties keep the first-seen tip. The
optional adversary mines a private branch and releases it as soon as it is
longer than the best public chain.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable, Optional, Sequence

import numpy as np

from ..ledger import Block, OutPoint, Transaction
from .common import payload_digest


def item_id(item: Any) -> bytes:
    tx_id = getattr(item, "tx_id", None)
    return tx_id if isinstance(tx_id, bytes) else payload_digest(item)


def default_valid(chain_items: Sequence[Any], item: Any) -> bool:
    """No duplicates; a Transaction may not spend an outpoint an earlier one spent."""
    iid = item_id(item)
    spent: set[OutPoint] = set()
    for it in chain_items:
        if item_id(it) == iid:
            return False
        if isinstance(it, Transaction):
            spent.update(it.inputs)
    if isinstance(item, Transaction) and spent.intersection(item.inputs):
        return False
    return True


@dataclass
class Miner:
    node: int
    tip: bytes
    known: set = field(default_factory=set)


class PowShard:
    def __init__(
        self,
        shard: int,
        honest: Sequence[int],
        adversary: Sequence[int] = (),
        p: float = 0.01,
        delay: int = 1,
        k: int = 6,
        seed: int = 0,
        private_attack: bool = False,
        give_up: int = 2,
        validator: Callable[[Sequence[Any], Any], bool] = default_valid,
    ):
        if not honest:
            raise ValueError("need at least one honest miner")
        self.shard = shard
        self.k = k
        self.p = p
        self.delay = max(1, delay)
        self.rng = np.random.default_rng(seed)
        self.validator = validator
        g = Block.genesis(shard)
        self.genesis = g
        self.blocks: dict[bytes, Block] = {g.hash: g}
        self.mined_at: dict[bytes, int] = {g.hash: 0}
        self.miners = {v: Miner(v, g.hash, {g.hash}) for v in honest}
        self.adversary = list(adversary)
        self.private_attack = private_attack
        self.give_up = give_up
        self.private_tip = g.hash
        self.inbox: dict[int, list[bytes]] = {}
        self.mempool: list[Any] = []
        self.round = 0
        self.reorgs: list[tuple[int, int, int]] = []  # (round, miner, depth)
        self.max_reorg = 0

    # -- tree helpers --------------------------------------------------------

    def height(self, h: bytes) -> int:
        return self.blocks[h].height

    def chain_to(self, h: bytes) -> list[Block]:
        out = []
        while True:
            b = self.blocks[h]
            out.append(b)
            if b.height == 0:
                break
            h = b.header.prev_hash
        return out[::-1]

    def ancestor_at(self, h: bytes, height: int) -> bytes:
        while self.height(h) > height:
            h = self.blocks[h].header.prev_hash
        return h

    def common_height(self, a: bytes, b: bytes) -> int:
        ha, hb = self.height(a), self.height(b)
        a = self.ancestor_at(a, min(ha, hb))
        b = self.ancestor_at(b, min(ha, hb))
        while a != b:
            a = self.blocks[a].header.prev_hash
            b = self.blocks[b].header.prev_hash
        return self.height(a)

    def items_on(self, h: bytes) -> list[Any]:
        return [it for b in self.chain_to(h) for it in b.body]

    # -- views ---------------------------------------------------------------

    @property
    def observer(self) -> Miner:
        return self.miners[min(self.miners)]

    def view(self, miner: Optional[int] = None) -> list[Block]:
        m = self.observer if miner is None else self.miners[miner]
        return self.chain_to(m.tip)

    def tip_height(self, miner: Optional[int] = None) -> int:
        m = self.observer if miner is None else self.miners[miner]
        return self.height(m.tip)

    def stable_prefix(self, miner: Optional[int] = None) -> list[Block]:
        chain = self.view(miner)
        return chain[: max(1, len(chain) - self.k)]

    def depth_of(self, iid: bytes, miner: Optional[int] = None) -> Optional[int]:
        """Blocks on top of the block holding item `iid` in the miner's chain."""
        chain = self.view(miner)
        for b in chain:
            if any(item_id(it) == iid for it in b.body):
                return chain[-1].height - b.height
        return None

    def best_public_tip(self) -> bytes:
        return max((m.tip for m in self.miners.values()), key=lambda h: (self.height(h), h == self.observer.tip))

    # -- mining ---------------------------------------------------------------

    def submit(self, item: Any) -> None:
        self.mempool.append(item)

    def _make_block(self, parent: bytes, producer: int) -> Block:
        on_chain = self.items_on(parent) if self.mempool else []
        body = []
        for it in self.mempool:
            if self.validator(on_chain + body, it):
                body.append(it)
        b = Block.child_of(self.blocks[parent], body, producer)
        self.blocks[b.hash] = b
        self.mined_at[b.hash] = self.round
        return b

    def receive(self, m: Miner, h: bytes) -> None:
        if h in m.known:
            return
        # make sure ancestors are known too
        a = h
        while a not in m.known:
            m.known.add(a)
            a = self.blocks[a].header.prev_hash
        if self.height(h) > self.height(m.tip):
            old = m.tip
            ch = self.common_height(old, h)
            depth = self.height(old) - ch
            if depth > 0:
                self.reorgs.append((self.round, m.node, depth))
                self.max_reorg = max(self.max_reorg, depth)
            m.tip = h

    def broadcast(self, h: bytes, delay: Optional[int] = None) -> None:
        at = self.round + (self.delay if delay is None else delay)
        self.inbox.setdefault(at, []).append(h)

    def step(self) -> list[Block]:
        self.round += 1
        for h in self.inbox.pop(self.round, []):
            for m in self.miners.values():
                self.receive(m, h)
        mined = []
        hits = self.rng.random(len(self.miners)) < self.p
        for m, hit in zip(list(self.miners.values()), hits):
            if hit:
                b = self._make_block(m.tip, m.node)
                self.receive(m, b.hash)
                self.broadcast(b.hash)
                mined.append(b)
        if self.adversary:
            a_hits = int(np.count_nonzero(self.rng.random(len(self.adversary)) < self.p))
            mined += self._adversary_round(a_hits)
        return mined

    def _adversary_round(self, hits: int) -> list[Block]:
        public = self.best_public_tip()
        if not self.private_attack:
            # plain mining on the best public tip
            out = []
            for _ in range(hits):
                b = self._make_block(public, self.adversary[0])
                public = b.hash
                self.broadcast(b.hash)
                out.append(b)
            return out
        if self.height(self.private_tip) < self.height(public) - self.give_up or self.private_tip == self.genesis.hash:
            self.private_tip = public
        out = []
        for _ in range(hits):
            b = self._make_block(self.private_tip, self.adversary[0])
            self.private_tip = b.hash
            out.append(b)
        if self.height(self.private_tip) > self.height(public):
            self.broadcast(self.private_tip, delay=1)
        return out

    def run(self, rounds: int) -> None:
        for _ in range(rounds):
            self.step()

    def inject_fork(self, base_height: int, length: int, body: Sequence[Any] = (), producer: int = -1) -> bytes:
        """Build `length` blocks off the observer's chain at `base_height` and deliver them.

        `body` goes in the first fork block. The tip reaches every miner next round.
        """
        base = self.ancestor_at(self.observer.tip, base_height)
        h = base
        for i in range(length):
            items = list(body) if i == 0 else []
            b = Block.child_of(self.blocks[h], items, producer & 0xFFFFFFFF)
            self.blocks[b.hash] = b
            self.mined_at[b.hash] = self.round
            h = b.hash
        self.broadcast(h, delay=1)
        return h

    def prefix_violations(self) -> int:
        """Reorgs deeper than k, i.e. rewrites of a previously stable prefix."""
        return sum(1 for _, _, d in self.reorgs if d > self.k)

    def growth_rate(self) -> float:
        return self.tip_height() / max(1, self.round)
