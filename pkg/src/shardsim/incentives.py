"""Reward, deposit and reputation accounting over run traces.

Everything here is a pure fold: each operation takes a book and returns a new
one. Amounts are exact fractions so conservation can be checked with `==`.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Iterable, Mapping, Optional, Sequence

from .consensus.common import canonical
from .crypto import digest, verify


@dataclass(frozen=True)
class ReputationWeights:
    participate: Fraction = Fraction(1)
    idle: Fraction = Fraction(1)
    misbehave: Fraction = Fraction(5)


@dataclass(frozen=True)
class RewardPolicy:
    block_reward: Fraction = Fraction(10)
    leader_multiplier: Fraction = Fraction(2)
    deposit: Fraction = Fraction(100)
    slash_equivocation: Fraction = Fraction(100)
    slash_non_response: Fraction = Fraction(10)
    weights: ReputationWeights = field(default_factory=ReputationWeights)

    def __post_init__(self) -> None:
        for name in ("block_reward", "leader_multiplier", "deposit", "slash_equivocation", "slash_non_response"):
            object.__setattr__(self, name, Fraction(getattr(self, name)))
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.leader_multiplier < 1:
            raise ValueError("leader multiplier must be at least 1")


@dataclass(frozen=True)
class Account:
    balance: Fraction = Fraction(0)
    deposit: Fraction = Fraction(0)
    reputation: Fraction = Fraction(0)
    exhausted: bool = False  # a slash hit an empty or short deposit


@dataclass(frozen=True)
class AccountBook:
    accounts: Mapping[int, Account] = field(default_factory=dict)
    minted: Fraction = Fraction(0)
    burned: Fraction = Fraction(0)

    @classmethod
    def open(cls, nodes: Iterable[int], policy: RewardPolicy) -> "AccountBook":
        return cls({n: Account(deposit=policy.deposit) for n in nodes})

    def get(self, node: int) -> Account:
        return self.accounts.get(node, Account())

    def with_account(self, node: int, acct: Account, minted=0, burned=0) -> "AccountBook":
        if acct.balance < 0 or acct.deposit < 0:
            raise ValueError("negative account")
        accts = dict(self.accounts)
        accts[node] = acct
        return AccountBook(accts, self.minted + minted, self.burned + burned)

    def total(self) -> Fraction:
        return sum((a.balance + a.deposit for a in self.accounts.values()), Fraction(0))

    def conserved(self, before: "AccountBook") -> bool:
        """Holdings moved only by what was minted and burned since `before`."""
        return self.total() - before.total() == (self.minted - before.minted) - (self.burned - before.burned)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["node", "balance", "deposit", "reputation", "exhausted"])
        for n in sorted(self.accounts):
            a = self.accounts[n]
            w.writerow([n, _fmt(a.balance), _fmt(a.deposit), _fmt(a.reputation), int(a.exhausted)])
        return buf.getvalue()


def _fmt(x: Fraction) -> str:
    return str(x.numerator) if x.denominator == 1 else f"{float(x):.6f}"


@dataclass(frozen=True)
class CommittedBlock:
    """What settlement needs to know about a committed block.

    For chain shards only `producer` matters. For committee shards
    `participants` counts the votes each member contributed to the block's
    certificates and `leader` gets the multiplier.
    """

    producer: int
    committee: Sequence[int] = ()
    participants: Mapping[int, int] = field(default_factory=dict)
    leader: Optional[int] = None


def settle_block(book: AccountBook, block: CommittedBlock, policy: RewardPolicy) -> AccountBook:
    reward = policy.block_reward
    if reward == 0:
        return book
    if not block.committee:
        a = book.get(block.producer)
        return book.with_account(block.producer, replace(a, balance=a.balance + reward), minted=reward)
    leader = block.producer if block.leader is None else block.leader
    # members without recorded evidence count once if no evidence was given at all
    evidence = block.participants or {n: 1 for n in block.committee}
    weights = {}
    for n in block.committee:
        w = Fraction(evidence.get(n, 0))
        weights[n] = w * policy.leader_multiplier if n == leader else w
    total = sum(weights.values())
    if total == 0:
        return book
    out = book
    for n in sorted(weights):
        share = reward * weights[n] / total
        if share:
            a = out.get(n)
            out = out.with_account(n, replace(a, balance=a.balance + share), minted=share)
    return out


@dataclass(frozen=True)
class SignedStatement:
    statement: tuple
    sig: bytes

    def valid(self, public: bytes) -> bool:
        return verify(public, digest(canonical(self.statement)), self.sig)


@dataclass(frozen=True)
class Evidence:
    """Equivocation: two signed statements from `node` for the same slot.

    Non-response: `attestations` are signed timeout statements from peers.
    """

    node: int
    kind: str  # "equivocation" | "non_response"
    first: Optional[SignedStatement] = None
    second: Optional[SignedStatement] = None
    attestations: Mapping[int, SignedStatement] = field(default_factory=dict)


class InvalidEvidence(ValueError):
    pass


def check_evidence(ev: Evidence, keys: Mapping[int, bytes], quorum: int = 1) -> None:
    if ev.kind == "equivocation":
        a, b = ev.first, ev.second
        if a is None or b is None:
            raise InvalidEvidence("missing statement")
        pub = keys.get(ev.node)
        if pub is None or not (a.valid(pub) and b.valid(pub)):
            raise InvalidEvidence("bad signature")
        # same slot (everything but the last field), different content
        if a.statement[:-1] != b.statement[:-1] or a.statement == b.statement:
            raise InvalidEvidence("statements do not conflict")
    elif ev.kind == "non_response":
        good = 0
        for peer, st in ev.attestations.items():
            pub = keys.get(peer)
            if peer != ev.node and pub is not None and st.valid(pub) and st.statement[:2] == ("timeout", ev.node):
                good += 1
        if good < quorum:
            raise InvalidEvidence("not enough timeout attestations")
    else:
        raise InvalidEvidence(f"unknown evidence kind {ev.kind!r}")


def slash(
    book: AccountBook, ev: Evidence, policy: RewardPolicy, keys: Mapping[int, bytes], quorum: int = 1
) -> AccountBook:
    """Burn part of the offender's deposit. Raises InvalidEvidence on forgeries."""
    check_evidence(ev, keys, quorum)
    amount = policy.slash_equivocation if ev.kind == "equivocation" else policy.slash_non_response
    a = book.get(ev.node)
    taken = min(amount, a.deposit)
    new = replace(
        a,
        deposit=a.deposit - taken,
        reputation=a.reputation - policy.weights.misbehave,
        exhausted=a.exhausted or taken < amount,
    )
    return book.with_account(ev.node, new, burned=taken)


@dataclass(frozen=True)
class EpochTrace:
    """Per-node event counts for one epoch."""

    participations: Mapping[int, int] = field(default_factory=dict)
    misbehaviours: Mapping[int, int] = field(default_factory=dict)
    nodes: Sequence[int] = ()


def update_reputation(book: AccountBook, trace: EpochTrace, weights: ReputationWeights) -> AccountBook:
    nodes = set(trace.nodes) | set(trace.participations) | set(trace.misbehaviours)
    out = book
    for n in sorted(nodes):
        p = trace.participations.get(n, 0)
        delta = weights.participate * p - weights.misbehave * trace.misbehaviours.get(n, 0)
        if p == 0:
            delta -= weights.idle
        a = out.get(n)
        out = out.with_account(n, replace(a, reputation=a.reputation + delta))
    return out
