"""Cross-shard transaction processing.

Instant mode runs two-phase commit over PBFT shard committees:

* prepare: every input shard orders the transaction, locks the inputs it can
  vouch for and has each replica sign an availability verdict per input;
  2f+1 matching signatures form an AvailabilityCertificate bound to the tx id;
* decide: one shard, the anchor, orders the decision. With the client or the
  input shards coordinating, the anchor is the lowest-numbered input shard;
  with the output shard coordinating, it is that output shard. The first
  ordered decision for a tx id is final. If no complete certificate set has
  been ordered by the deadline, the anchor orders an expiry, which is an abort;
* commit: the anchor's replicas sign the decision and send it to every involved
  shard, which orders it once 2f+1 signatures are collected and then spends,
  creates or unlocks.

Non-anchor input shards also release their locks on their own once the
deadline plus a grace period has passed. Atomicity therefore relies on the
anchor's decision arriving within that grace period, which holds after GST.

Eventual mode uses relay transactions between PoW shard chains.
"""
from __future__ import annotations

import enum
import itertools
import math
import random
from dataclasses import dataclass, field
from typing import Any, Callable, Optional, Sequence

import numpy as np

from .consensus.common import Vote, check_votes, conflicting_commits, payload_digest, quorum_size, sign_statement
from .consensus.pbft import PbftCluster, Replica, Request
from .consensus.powchain import PowShard, item_id
from .crypto import KeyPair, address_of, digest, verify
from .ledger import OutPoint, Transaction, TxOutput, UtxoSet, VerdictKind, owner_shard, validate_transaction
from .net import Network, PartialSyncB


class Mode(enum.Enum):
    CLIENT = "client"
    INPUT_SHARDS = "input_shards"
    OUTPUT_SHARD = "output_shard"


class TxState(enum.Enum):
    PENDING = "pending"
    LOCKED = "locked"
    COMMITTED = "committed"
    ABORTED = "aborted"


ACCEPT = "accept"


# -- routing -------------------------------------------------------------------


def input_shard(tx: Transaction, i: int, m: int) -> int:
    """Home shard of input i: the shard of the address that signs for it."""
    return owner_shard(tx.input_owner(i), m)


@dataclass(frozen=True)
class DispatchPlan:
    input_shards: tuple[int, ...]
    output_shards: tuple[int, ...]
    coordinator: Optional[int]
    mode: Mode
    intra: bool

    @property
    def involved(self) -> tuple[int, ...]:
        return tuple(sorted(set(self.input_shards) | set(self.output_shards) | ({self.coordinator} - {None})))


def route_transaction(tx: Transaction, m: int, mode: Mode = Mode.INPUT_SHARDS, shards: Optional[set] = None) -> DispatchPlan:
    ins = tuple(sorted({input_shard(tx, i, m) for i in range(len(tx.inputs))}))
    outs = tuple(sorted({owner_shard(o.owner, m) for o in tx.outputs}))
    known = set(range(m)) if shards is None else set(shards)
    for s in ins + outs:
        if s not in known:
            raise ValueError(f"unknown shard id {s}")
    intra = len(set(ins) | set(outs)) == 1
    if intra:
        return DispatchPlan(ins, outs, ins[0], mode, True)
    anchor = owner_shard(tx.outputs[0].owner, m) if mode is Mode.OUTPUT_SHARD else ins[0]
    return DispatchPlan(ins, outs, anchor, mode, False)


def is_cross_shard(shards: Sequence[int]) -> bool:
    return len(set(shards)) > 1


def cross_shard_fraction(m: int, trials: int, n_in: int = 2, n_out: int = 2, seed: int = 0) -> float:
    """Share of random transactions touching more than one shard under uniform homing.

    Owner digests are drawn as uniform 32-byte strings and homed with the same
    low-bits rule as `home_shard`.
    """
    rng = np.random.default_rng(seed)
    k = n_in + n_out
    bits = math.ceil(math.log2(m)) if m > 1 else 0
    done, cross = 0, 0
    while done < trials:
        t = min(200_000, trials - done)
        last = rng.integers(0, 256, size=(t, k, 4), dtype=np.uint32)
        # low 32 bits of the big-endian integer
        low = (last[..., 0] << 24) | (last[..., 1] << 16) | (last[..., 2] << 8) | last[..., 3]
        shard = (low & ((1 << bits) - 1)) % m if bits else np.zeros((t, k), dtype=np.uint32)
        cross += int(np.count_nonzero((shard != shard[:, :1]).any(axis=1)))
        done += t
    return cross / trials


# -- certificates ----------------------------------------------------------------


def avail_statement(tx_id: bytes, op: OutPoint, verdict: str, epoch: int):
    return ("avail", tx_id, op, verdict, epoch)


def decision_statement(tx_id: bytes, decision: str, epoch: int):
    return ("decision", tx_id, decision, epoch)


@dataclass(frozen=True)
class AvailabilityCertificate:
    tx_id: bytes
    outpoint: OutPoint
    verdict: str
    votes: tuple[Vote, ...]
    epoch: int
    shard: int

    @property
    def accept(self) -> bool:
        return self.verdict == ACCEPT

    def valid(self, roster: dict[int, bytes], q: int, tx_id: Optional[bytes] = None) -> bool:
        if tx_id is not None and tx_id != self.tx_id:
            return False
        return check_votes(avail_statement(self.tx_id, self.outpoint, self.verdict, self.epoch), self.votes, roster, q)


@dataclass(frozen=True)
class DecisionCertificate:
    tx_id: bytes
    decision: str
    votes: tuple[Vote, ...]
    epoch: int
    shard: int

    def valid(self, roster: dict[int, bytes], q: int) -> bool:
        return check_votes(decision_statement(self.tx_id, self.decision, self.epoch), self.votes, roster, q)


# -- messages between shards and clients -------------------------------------------


@dataclass(frozen=True)
class AvailVote:
    tx_id: bytes
    outpoint: OutPoint
    verdict: str
    epoch: int
    shard: int
    vote: Vote


@dataclass(frozen=True)
class DecisionVote:
    tx_id: bytes
    decision: str
    epoch: int
    shard: int
    vote: Vote


# -- shard commands (ordered by the shard's consensus) ------------------------------


@dataclass(frozen=True)
class IntraTx:
    tx: Transaction


@dataclass(frozen=True)
class PrepareTx:
    tx: Transaction
    anchor: int
    involved: tuple[int, ...]
    deadline: int
    grace: int
    collectors: tuple[int, ...]


@dataclass(frozen=True)
class DecideTx:
    tx: Transaction
    certs: tuple[AvailabilityCertificate, ...]
    involved: tuple[int, ...]


@dataclass(frozen=True)
class ExpireTx:
    tx: Transaction
    involved: tuple[int, ...]


@dataclass(frozen=True)
class FinalizeTx:
    tx: Transaction
    cert: DecisionCertificate


@dataclass(frozen=True)
class ReleaseTx:
    tx_id: bytes


@dataclass
class Directory:
    """Epoch rosters of every shard, known to all parties."""

    members: dict[int, list[int]]
    keys: dict[int, KeyPair]
    epoch: int = 0

    def roster(self, shard: int) -> dict[int, bytes]:
        return {v: self.keys[v].public for v in self.members[shard]}

    def quorum(self, shard: int) -> int:
        return quorum_size(len(self.members[shard]))

    @property
    def m(self) -> int:
        return len(self.members)


class CertCollector:
    """Aggregates per-input availability votes into certificates."""

    def __init__(self, directory: Directory):
        self.dir = directory
        self.votes: dict[tuple, dict[int, Vote]] = {}
        self.certs: dict[bytes, dict[OutPoint, AvailabilityCertificate]] = {}

    def add(self, v: AvailVote) -> Optional[AvailabilityCertificate]:
        roster = self.dir.roster(v.shard)
        if v.vote.signer not in roster:
            return None
        if not check_votes(avail_statement(v.tx_id, v.outpoint, v.verdict, v.epoch), [v.vote], roster, 1):
            return None
        key = (v.tx_id, v.outpoint, v.verdict, v.epoch, v.shard)
        box = self.votes.setdefault(key, {})
        box[v.vote.signer] = v.vote
        have = self.certs.setdefault(v.tx_id, {})
        if len(box) >= self.dir.quorum(v.shard) and v.outpoint not in have:
            cert = AvailabilityCertificate(v.tx_id, v.outpoint, v.verdict, tuple(box[k] for k in sorted(box)), v.epoch, v.shard)
            have[v.outpoint] = cert
            return cert
        return None

    def ready(self, tx: Transaction) -> Optional[tuple[AvailabilityCertificate, ...]]:
        have = self.certs.get(tx.tx_id, {})
        rejects = [c for c in have.values() if not c.accept]
        if rejects:
            return (rejects[0],)
        if all(op in have for op in tx.inputs):
            return tuple(have[op] for op in tx.inputs)
        return None


class DecisionCollector:
    def __init__(self, directory: Directory):
        self.dir = directory
        self.votes: dict[tuple, dict[int, Vote]] = {}
        self.done: set[bytes] = set()

    def add(self, v: DecisionVote) -> Optional[DecisionCertificate]:
        roster = self.dir.roster(v.shard)
        if v.vote.signer not in roster or v.tx_id in self.done:
            return None
        if not check_votes(decision_statement(v.tx_id, v.decision, v.epoch), [v.vote], roster, 1):
            return None
        box = self.votes.setdefault((v.tx_id, v.decision, v.epoch, v.shard), {})
        box[v.vote.signer] = v.vote
        if len(box) >= self.dir.quorum(v.shard):
            self.done.add(v.tx_id)
            return DecisionCertificate(v.tx_id, v.decision, tuple(box[k] for k in sorted(box)), v.epoch, v.shard)
        return None


# -- per-replica shard state machine -------------------------------------------------


@dataclass
class LockRecord:
    tx_id: bytes
    outpoint: OutPoint
    expires_at: int
    released: Optional[str] = None


class ShardApp:
    """Replicated state of one shard, as held by one replica."""

    def __init__(self, shard: int, system: "CrossShardSystem", lying: bool = False):
        self.shard = shard
        self.sys = system
        self.lying = lying
        self.utxo = UtxoSet()
        self.decided: dict[bytes, str] = {}
        self.finalized: dict[bytes, str] = {}
        self.prepared: dict[bytes, PrepareTx] = {}
        self.locks: list[LockRecord] = []
        self.spent: dict[OutPoint, bytes] = {}
        self.breaches: list[tuple] = []
        self.certs = CertCollector(system.directory)
        self.decisions = DecisionCollector(system.directory)
        self.executed_tx: list[bytes] = []

    @property
    def m(self) -> int:
        return self.sys.directory.m

    def local_inputs(self, tx: Transaction) -> list[OutPoint]:
        if not tx.witnesses:
            return []
        return [op for i, op in enumerate(tx.inputs) if input_shard(tx, i, self.m) == self.shard]

    def local_outputs(self, tx: Transaction) -> list[int]:
        return [i for i, o in enumerate(tx.outputs) if owner_shard(o.owner, self.m) == self.shard]

    # -- ordered execution -----------------------------------------------------

    def execute(self, rep: Replica, payload: Any) -> None:
        if isinstance(payload, IntraTx):
            self.exec_intra(rep, payload.tx)
        elif isinstance(payload, PrepareTx):
            self.exec_prepare(rep, payload)
        elif isinstance(payload, DecideTx):
            self.exec_decide(rep, payload)
        elif isinstance(payload, ExpireTx):
            self.exec_expire(rep, payload)
        elif isinstance(payload, FinalizeTx):
            self.exec_finalize(rep, payload)
        elif isinstance(payload, ReleaseTx):
            self.exec_release(rep, payload.tx_id)

    def _spend(self, op: OutPoint, tx_id: bytes) -> None:
        prev = self.spent.get(op)
        if prev is not None and prev != tx_id:
            self.breaches.append(("double-spend", op, prev, tx_id))
        self.spent[op] = tx_id
        self.utxo.remove(op)

    def exec_intra(self, rep: Replica, tx: Transaction) -> None:
        if tx.tx_id in self.finalized:
            return
        v = validate_transaction(tx, self.utxo)
        if v.ok:
            for op in tx.inputs:
                self._spend(op, tx.tx_id)
            for i, out in enumerate(tx.outputs):
                self.utxo.add(tx.outpoint(i), out)
            self.finalized[tx.tx_id] = "commit"
        else:
            self.finalized[tx.tx_id] = "abort"
        self.sys.note(self.shard, rep, tx.tx_id, self.finalized[tx.tx_id])

    def input_verdict(self, tx: Transaction, i: int) -> str:
        op = tx.inputs[i]
        out = self.utxo.get(op)
        if out is None:
            return "reject:" + VerdictKind.MISSING_INPUT.value
        holder = self.utxo.lock_holder(op)
        if holder is not None and holder != tx.tx_id:
            return "reject:" + VerdictKind.LOCKED.value
        w = tx.witnesses[i]
        if address_of(w.public) != out.owner or not verify(w.public, tx.tx_id, w.sig):
            return "reject:" + VerdictKind.BAD_SIGNATURE.value
        return ACCEPT

    def exec_prepare(self, rep: Replica, cmd: PrepareTx) -> None:
        tx = cmd.tx
        if tx.tx_id in self.prepared or tx.tx_id in self.finalized:
            return
        self.prepared[tx.tx_id] = cmd
        expiry = cmd.deadline if cmd.anchor == self.shard else cmd.deadline + cmd.grace
        for i, op in enumerate(tx.inputs):
            if input_shard(tx, i, self.m) != self.shard:
                continue
            verdict = self.input_verdict(tx, i)
            if verdict == ACCEPT:
                self.utxo.lock(op, tx.tx_id, expiry)
                self.locks.append(LockRecord(tx.tx_id, op, expiry))
            if self.lying:
                verdict = ACCEPT
            st = avail_statement(tx.tx_id, op, verdict, self.sys.directory.epoch)
            vote = AvailVote(tx.tx_id, op, verdict, self.sys.directory.epoch, self.shard, Vote(rep.id, sign_statement(rep.key, st)))
            for dst in cmd.collectors:
                if dst == rep.id:
                    self.on_message(rep, vote)
                else:
                    rep.port.send(dst, vote)
        self.sys.note(self.shard, rep, tx.tx_id, "locked")
        # fallback release, ordered through consensus like everything else
        if cmd.anchor == self.shard:
            rep.port.set_timer(cmd.deadline, self.request_expire, rep, tx, cmd.involved)
        else:
            rep.port.set_timer(cmd.deadline + cmd.grace, self.request_release, rep, tx.tx_id)

    def request_expire(self, rep: Replica, tx: Transaction, involved) -> None:
        if tx.tx_id not in self.decided:
            self.sys.clusters[self.shard].submit(ExpireTx(tx, involved), payload_digest(("expire", tx.tx_id)), rep.id)

    def request_release(self, rep: Replica, tx_id: bytes) -> None:
        if tx_id not in self.finalized:
            self.sys.clusters[self.shard].submit(ReleaseTx(tx_id), payload_digest(("release", tx_id, self.shard)), rep.id)

    def valid_certs(self, tx: Transaction, certs: Sequence[AvailabilityCertificate]) -> Optional[str]:
        """'commit', 'abort', or None when the set proves nothing yet."""
        d = self.sys.directory
        good = {}
        for c in certs:
            if c.tx_id != tx.tx_id or c.outpoint not in tx.inputs:
                self.sys.replays_rejected += 1
                continue
            if not c.valid(d.roster(c.shard), d.quorum(c.shard), tx.tx_id):
                continue
            idx = tx.inputs.index(c.outpoint)
            if not tx.witnesses or input_shard(tx, idx, self.m) != c.shard:
                continue
            if not c.accept:
                return "abort"
            good[c.outpoint] = c
        if all(op in good for op in tx.inputs):
            return "commit"
        return None

    def exec_decide(self, rep: Replica, cmd: DecideTx) -> None:
        tx = cmd.tx
        if tx.tx_id in self.decided:
            return
        d = self.valid_certs(tx, cmd.certs)
        if d is None:
            return
        self.decide(rep, tx, d, cmd.involved)

    def exec_expire(self, rep: Replica, cmd: ExpireTx) -> None:
        if cmd.tx.tx_id in self.decided:
            return
        self.decide(rep, cmd.tx, "abort", cmd.involved)

    def decide(self, rep: Replica, tx: Transaction, decision: str, involved) -> None:
        self.decided[tx.tx_id] = decision
        self.sys.note(self.shard, rep, tx.tx_id, "decided-" + decision)
        if decision == "abort":
            self.unlock(tx.tx_id, "abort")
        ep = self.sys.directory.epoch
        vote = DecisionVote(tx.tx_id, decision, ep, self.shard, Vote(rep.id, sign_statement(rep.key, decision_statement(tx.tx_id, decision, ep))))
        for s in involved:
            for dst in self.sys.directory.members[s]:
                if dst == rep.id:
                    self.on_message(rep, vote)
                else:
                    rep.port.send(dst, vote)

    def unlock(self, tx_id: bytes, why: str) -> None:
        for lk in self.locks:
            if lk.tx_id == tx_id and lk.released is None:
                if self.utxo.unlock(lk.outpoint, tx_id):
                    lk.released = why
                elif lk.outpoint not in self.utxo:
                    lk.released = "spent"

    def exec_finalize(self, rep: Replica, cmd: FinalizeTx) -> None:
        tx, cert = cmd.tx, cmd.cert
        if tx.tx_id in self.finalized or cert.tx_id != tx.tx_id:
            return
        d = self.sys.directory
        if not cert.valid(d.roster(cert.shard), d.quorum(cert.shard)):
            return
        self.finalized[tx.tx_id] = cert.decision
        if cert.decision == "commit":
            for op in self.local_inputs(tx):
                holder = self.utxo.lock_holder(op)
                if op not in self.utxo or holder not in (None, tx.tx_id):
                    self.breaches.append(("atomicity", op, tx.tx_id))
                    continue
                self._spend(op, tx.tx_id)
                for lk in self.locks:
                    if lk.tx_id == tx.tx_id and lk.outpoint == op:
                        lk.released = "spent"
            for i in self.local_outputs(tx):
                self.utxo.add(tx.outpoint(i), tx.outputs[i])
        else:
            self.unlock(tx.tx_id, "abort")
        self.sys.note(self.shard, rep, tx.tx_id, "final-" + cert.decision)

    def exec_release(self, rep: Replica, tx_id: bytes) -> None:
        if tx_id in self.finalized:
            return
        self.unlock(tx_id, "expired")

    # -- messages from other shards and clients ---------------------------------

    def on_message(self, rep: Replica, msg: Any) -> None:
        if isinstance(msg, AvailVote):
            self.certs.add(msg)
            self.maybe_decide(rep, msg.tx_id)
        elif isinstance(msg, DecisionVote):
            cert = self.decisions.add(msg)
            if cert is not None:
                tx = self.sys.txs[cert.tx_id]
                rid = payload_digest(("finalize", cert.tx_id, self.shard))
                self.sys.clusters[self.shard].submit(FinalizeTx(tx, cert), rid, rep.id)

    def maybe_decide(self, rep: Replica, tx_id: bytes) -> None:
        tx = self.sys.txs.get(tx_id)
        plan = self.sys.plans.get(tx_id)
        if tx is None or plan is None or plan.coordinator != self.shard or plan.mode is Mode.CLIENT:
            return
        certs = self.certs.ready(tx)
        if certs is not None:
            rid = payload_digest(("decide", tx_id))
            self.sys.clusters[self.shard].submit(DecideTx(tx, certs, plan.involved), rid, rep.id)


# -- clients -------------------------------------------------------------------------


class ClientBehavior(enum.Enum):
    HONEST = "honest"
    WITHHOLD = "withhold"  # never forwards the certificates
    CRASH = "crash"  # stops right after the prepare phase starts
    REPLAY = "replay"  # swaps in a certificate minted for another transaction


class Client:
    def __init__(self, node: int, system: "CrossShardSystem", behavior: ClientBehavior = ClientBehavior.HONEST):
        self.id = node
        self.sys = system
        self.behavior = behavior
        self.collector = CertCollector(system.directory)
        self.sent: set[bytes] = set()
        self.port = system.net.register(node, self.on_envelope)

    def on_envelope(self, env) -> None:
        msg = env.payload
        if not isinstance(msg, AvailVote):
            return
        self.collector.add(msg)
        tx = self.sys.txs.get(msg.tx_id)
        if tx is None or tx.tx_id in self.sent:
            return
        certs = self.collector.ready(tx)
        if certs is None or self.behavior is ClientBehavior.WITHHOLD:
            return
        if self.behavior is ClientBehavior.REPLAY:
            stolen = self.sys.foreign_certificates(tx)
            if stolen:
                certs = tuple(stolen.get(op) or self.collector.certs[tx.tx_id].get(op) for op in tx.inputs)
                certs = tuple(c for c in certs if c is not None)
        self.sent.add(tx.tx_id)
        plan = self.sys.plans[tx.tx_id]
        self.sys.clusters[plan.coordinator].submit(DecideTx(tx, certs, plan.involved), payload_digest(("decide", tx.tx_id)), self.id)


# -- the whole instant-mode system --------------------------------------------------


@dataclass
class CrossTxRecord:
    tx: Transaction
    mode: Mode
    deadline: int
    state: TxState = TxState.PENDING
    history: list[tuple[int, str]] = field(default_factory=list)
    plan: Optional[DispatchPlan] = None


class CrossShardSystem:
    def __init__(
        self,
        m: int,
        u: int = 4,
        delta: int = 3,
        gst: int = 0,
        seed: int = 0,
        byzantine: Optional[dict[int, str]] = None,
        lying: Sequence[int] = (),
        lock_ttl: int = 400,
        grace: int = 400,
        delay_policy=None,
        net: Optional[Network] = None,
        node_base: int = 0,
        members: Optional[dict[int, list[int]]] = None,
    ):
        self.m = m
        self.u = u
        self.lock_ttl = lock_ttl
        self.grace = grace
        self.rng = random.Random(seed)
        self.net = net or Network(PartialSyncB(delta, gst), delay_policy, seed=seed)
        if members is None:
            members = {s: list(range(node_base + s * u, node_base + (s + 1) * u)) for s in range(m)}
        elif sorted(members) != list(range(m)):
            raise ValueError("members must map every shard 0..m-1")
        keys = {v: KeyPair.from_seed("replica", v) for ms in members.values() for v in ms}
        self.directory = Directory(members, keys)
        self.apps: dict[int, ShardApp] = {}
        self.byzantine = dict(byzantine or {})
        lying = set(lying)
        for s in range(m):
            for v in members[s]:
                self.apps[v] = ShardApp(s, self, lying=v in lying)
        self.clusters = {
            s: PbftCluster(
                self.net, members[s], s, {v: b for v, b in self.byzantine.items() if v in members[s]},
                timeout=4 * delta, app=self._exec, keys=keys, on_other=self._other,
            )
            for s in range(m)
        }
        self.txs: dict[bytes, Transaction] = {}
        self.plans: dict[bytes, DispatchPlan] = {}
        self.records: dict[bytes, CrossTxRecord] = {}
        self.clients: dict[int, Client] = {}
        self.replays_rejected = 0
        self._genesis = itertools.count()
        self._client_ids = itertools.count(node_base + 500_000)

    def _exec(self, rep: Replica, entry, req: Optional[Request]) -> None:
        if req is not None:
            self.apps[rep.id].execute(rep, req.payload)

    def _other(self, rep: Replica, msg: Any) -> None:
        self.apps[rep.id].on_message(rep, msg)

    def honest_apps(self, shard: int) -> list[ShardApp]:
        return [self.apps[v] for v in self.directory.members[shard] if v not in self.byzantine and not self.apps[v].lying]

    # -- setup ---------------------------------------------------------------

    def mint(self, key: KeyPair, value: int) -> OutPoint:
        """Genesis output owned by `key`, placed in the key's home shard."""
        n = next(self._genesis)
        op = OutPoint(digest(b"genesis" + n.to_bytes(8, "little")), 0)
        s = owner_shard(key.address, self.m)
        for v in self.directory.members[s]:
            self.apps[v].utxo.add(op, TxOutput(key.address, value))
        return op

    def key_in_shard(self, shard: int, tag: Any) -> KeyPair:
        for i in itertools.count():
            k = KeyPair.from_seed("user", tag, i)
            if owner_shard(k.address, self.m) == shard:
                return k
        raise AssertionError

    def new_client(self, behavior: ClientBehavior = ClientBehavior.HONEST) -> Client:
        c = Client(next(self._client_ids), self, behavior)
        self.clients[c.id] = c
        return c

    # -- submission ------------------------------------------------------------

    def submit(self, tx: Transaction, mode: Mode = Mode.INPUT_SHARDS, client: Optional[Client] = None) -> CrossTxRecord:
        if tx.tx_id in self.records:
            # resubmission of a known tx is a no-op
            return self.records[tx.tx_id]
        plan = route_transaction(tx, self.m, mode)
        client = client or self.new_client()
        now = self.net.now
        rec = CrossTxRecord(tx, mode, now + self.lock_ttl, plan=plan)
        rec.history.append((now, "submitted"))
        self.txs[tx.tx_id] = tx
        self.plans[tx.tx_id] = plan
        self.records[tx.tx_id] = rec
        if plan.intra:
            self.clusters[plan.coordinator].submit(IntraTx(tx), payload_digest(("intra", tx.tx_id)), client.id)
            return rec
        if mode is Mode.CLIENT:
            collectors = (client.id,)
        else:
            collectors = tuple(self.directory.members[plan.coordinator])
        cmd = PrepareTx(tx, plan.coordinator, plan.involved, rec.deadline, self.grace, collectors)
        # the anchor always orders the prepare so that it arms the expiry timer
        for s in sorted(set(plan.input_shards) | {plan.coordinator}):
            self.clusters[s].submit(cmd, payload_digest(("prepare", tx.tx_id, s)), client.id)
        if client.behavior is ClientBehavior.CRASH:
            self.net.crash(client.id)
        return rec

    def foreign_certificates(self, tx: Transaction) -> dict[OutPoint, AvailabilityCertificate]:
        """Accept certificates for tx's inputs that were minted for other transactions."""
        found: dict[OutPoint, AvailabilityCertificate] = {}
        pools = [c.collector for c in self.clients.values()] + [a.certs for a in self.apps.values()]
        for pool in pools:
            for other_id, certs in pool.certs.items():
                if other_id == tx.tx_id:
                    continue
                for op, cert in certs.items():
                    if op in tx.inputs and cert.accept:
                        found.setdefault(op, cert)
        return found

    # -- progress tracking -------------------------------------------------------

    def note(self, shard: int, rep: Replica, tx_id: bytes, event: str) -> None:
        rec = self.records.get(tx_id)
        if rec is None or rep.id in self.byzantine or self.apps[rep.id].lying:
            return
        # first honest replica to get there stamps the event
        tag = f"{event}@{shard}"
        if all(e != tag for _, e in rec.history):
            rec.history.append((self.net.now, tag))
        if event == "locked" and rec.state is TxState.PENDING:
            rec.state = TxState.LOCKED
        done = self._terminal(rec)
        if done is not None and rec.state not in (TxState.COMMITTED, TxState.ABORTED):
            rec.state = done
            rec.history.append((self.net.now, done.value))

    def _terminal(self, rec: CrossTxRecord) -> Optional[TxState]:
        plan = rec.plan
        tid = rec.tx.tx_id
        outcomes = set()
        shards = plan.involved if not plan.intra else (plan.coordinator,)
        for s in shards:
            apps = self.honest_apps(s)
            if not apps:
                return None
            # ordered by the shard, so one honest replica having it is enough
            fin = next((a.finalized[tid] for a in apps if tid in a.finalized), None)
            if fin is None:
                return None
            outcomes.add(fin)
        if outcomes == {"commit"}:
            return TxState.COMMITTED
        if outcomes == {"abort"}:
            return TxState.ABORTED
        return None

    def run(self, until: int) -> None:
        self.net.run_until_idle(until)

    # -- invariants ----------------------------------------------------------------

    def check(self, slack: int = 200) -> dict[str, Any]:
        """Global invariants. A lock counts as stuck once it outlives its expiry by `slack` ticks."""
        now = self.net.now
        double_spends = 0
        spent_by: dict[OutPoint, bytes] = {}
        for s in range(self.m):
            for app in self.honest_apps(s):
                double_spends += sum(1 for b in app.breaches if b[0] == "double-spend")
            apps = self.honest_apps(s)
            if apps:
                for op, t in apps[0].spent.items():
                    if op in spent_by and spent_by[op] != t:
                        double_spends += 1
                    spent_by[op] = t
        atomicity = sum(1 for s in range(self.m) for a in self.honest_apps(s) for b in a.breaches if b[0] == "atomicity")
        stuck_locks = 0
        for s in range(self.m):
            for app in self.honest_apps(s):
                for op, lk in app.utxo.locks.items():
                    if lk.expires_at + slack <= now:
                        stuck_locks += 1
        # replicas of one shard must agree on their UTXO state
        diverged = 0
        for s in range(self.m):
            roots = {a.utxo.state_root() for a in self.honest_apps(s)}
            diverged += len(roots) > 1
        unresolved = [r for r in self.records.values() if r.state not in (TxState.COMMITTED, TxState.ABORTED)]
        partial = 0
        for r in self.records.values():
            if r.plan.intra:
                continue
            fins = {a.finalized.get(r.tx.tx_id) for s in r.plan.involved for a in self.honest_apps(s)}
            if "commit" in fins and "abort" in fins:
                partial += 1
        conflicts = sum(len(conflicting_commits(c.logs())) for c in self.clusters.values())
        return {
            "conflicting_commits": conflicts,
            "double_spends": double_spends,
            "atomicity_breaches": atomicity + partial,
            "locked_past_expiry": stuck_locks,
            "diverged_shards": diverged,
            "unresolved": len(unresolved),
            "committed": sum(r.state is TxState.COMMITTED for r in self.records.values()),
            "aborted": sum(r.state is TxState.ABORTED for r in self.records.values()),
            "replays_rejected": self.replays_rejected,
        }

    def lifecycle(self) -> list[dict]:
        return [
            {"tx_id": r.tx.tx_id.hex(), "mode": r.mode.value, "events": [(t, e) for t, e in r.history]}
            for r in self.records.values()
        ]


# -- transaction split ----------------------------------------------------------------


class Unsupported(Exception):
    pass


class RecoveryNeeded(Exception):
    """Some split parts committed but the final spend cannot run."""

    def __init__(self, residual: list[OutPoint]):
        super().__init__(f"{len(residual)} intermediate outputs need recovery")
        self.residual = residual


@dataclass
class SplitPlan:
    parts: list[Transaction]
    final: Optional[Transaction]
    intermediate_keys: list[KeyPair]

    @property
    def all(self) -> list[Transaction]:
        return self.parts + ([self.final] if self.final is not None else [])

    def residual(self, committed: set[bytes]) -> list[OutPoint]:
        if self.final is None:
            return []
        done = [p for p in self.parts if p.tx_id in committed]
        if len(done) == len(self.parts):
            return []
        return [p.outpoint(0) for p in done]

    def settle(self, committed: set[bytes]) -> None:
        res = self.residual(committed)
        if res:
            raise RecoveryNeeded(res)


def _key_in_shard(shard: int, m: int, tag: Any) -> KeyPair:
    for i in itertools.count():
        k = KeyPair.from_seed("intermediate", repr(tag), i)
        if owner_shard(k.address, m) == shard:
            return k
    raise AssertionError("unreachable")


def split_transaction(
    tx: Transaction,
    m: int,
    signers: dict[bytes, KeyPair],
    values: dict[OutPoint, int],
) -> SplitPlan:
    """Rewrite a single-output tx as one move per input into the output shard
    plus a final spend inside that shard.

    `signers` maps input owner addresses to their keys and `values` gives the
    value of each spent outpoint. Intermediate keys are minted on the client's
    behalf and are homed in the output shard.
    """
    if len(tx.outputs) != 1:
        raise Unsupported("only single-output transactions can be split")
    out_shard = owner_shard(tx.outputs[0].owner, m)
    if all(input_shard(tx, i, m) == out_shard for i in range(len(tx.inputs))):
        return SplitPlan([tx], None, [])
    parts, keys = [], []
    for i, op in enumerate(tx.inputs):
        owner = tx.input_owner(i)
        k = _key_in_shard(out_shard, m, (tx.tx_id, i))
        parts.append(Transaction.create([op], [TxOutput(k.address, values[op])], [signers[owner]]))
        keys.append(k)
    final = Transaction.create([p.outpoint(0) for p in parts], list(tx.outputs), keys)
    return SplitPlan(parts, final, keys)


def run_split(system: CrossShardSystem, plan: SplitPlan, ticks: int = 2000, mode: Mode = Mode.INPUT_SHARDS) -> dict[bytes, TxState]:
    """Submit the parts, wait, then submit the final spend if every part committed."""
    for p in plan.parts:
        system.submit(p, mode)
    system.run(system.net.now + ticks)
    states = {p.tx_id: system.records[p.tx_id].state for p in plan.parts}
    committed = {t for t, s in states.items() if s is TxState.COMMITTED}
    if plan.final is not None and len(committed) == len(plan.parts):
        system.submit(plan.final, mode)
        system.run(system.net.now + ticks)
        states[plan.final.tx_id] = system.records[plan.final.tx_id].state
    return states


# -- eventual mode: relay transactions ------------------------------------------------


@dataclass(frozen=True)
class RelayTransaction:
    origin: int
    origin_block: bytes
    origin_height: int
    source_tx: bytes
    credit: TxOutput
    depth: int
    index: int = 0  # output of the source tx being credited

    @property
    def relay_id(self) -> bytes:
        return payload_digest(("relay", self.origin, self.origin_block, self.source_tx, self.index))

    @property
    def tx_id(self) -> bytes:
        return self.relay_id


def relay_of(tx: Transaction, origin: int, block, lam: int, index: int = 0) -> RelayTransaction:
    return RelayTransaction(origin, block.hash, block.height, tx.tx_id, tx.outputs[index], lam, index)


@dataclass
class RelayOutcome:
    included_round: Optional[int] = None
    relay_round: Optional[int] = None
    credit_round: Optional[int] = None
    origin_intervals: int = 0
    dest_intervals: int = 0
    forked: bool = False

    @property
    def credited(self) -> bool:
        return self.credit_round is not None

    @property
    def intervals(self) -> int:
        return self.origin_intervals + self.dest_intervals


class RelayScenario:
    """One origin and one destination PoW shard; a single-input single-output
    transfer moves from the first to the second through a relay transaction."""

    def __init__(self, lam: int = 6, miners: int = 8, p: float = 0.02, delay: int = 1, seed: int = 0):
        if lam < 1:
            raise ValueError("relay confirmation depth must be at least 1")
        self.lam = lam
        self.origin = PowShard(0, list(range(miners)), p=p, delay=delay, k=lam, seed=seed)
        self.dest = PowShard(1, list(range(miners, 2 * miners)), p=p, delay=delay, k=lam, seed=seed + 1, validator=self._dest_valid)
        self.outcome = RelayOutcome()
        self.relay: Optional[RelayTransaction] = None

    def origin_confirmed(self, r: RelayTransaction) -> bool:
        chain = self.origin.view()
        if len(chain) <= r.origin_height or chain[r.origin_height].hash != r.origin_block:
            return False
        blk = chain[r.origin_height]
        if not any(item_id(it) == r.source_tx for it in blk.body):
            return False
        return len(chain) - 1 - r.origin_height >= r.depth

    def _dest_valid(self, chain_items, item) -> bool:
        if isinstance(item, RelayTransaction):
            if any(isinstance(it, RelayTransaction) and it.relay_id == item.relay_id for it in chain_items):
                return False
            return self.origin_confirmed(item)
        return True

    def _holder(self, shard: PowShard, iid: bytes):
        for b in shard.view():
            if any(item_id(it) == iid for it in b.body):
                return b
        return None

    def run(
        self,
        tx: Transaction,
        rounds: int = 5000,
        fork_at_depth: Optional[int] = None,
        conflict: Optional[Transaction] = None,
        horizon: int = 600,
    ) -> RelayOutcome:
        """Drive both chains until the credit is spendable or `rounds` elapse.

        With `fork_at_depth`, once the tx is buried that deep an adversarial
        branch carrying `conflict` replaces its block; the run then stops
        `horizon` rounds later.
        """
        out = self.outcome
        self.origin.submit(tx)
        fork_round = None
        for _ in range(rounds):
            if fork_round is not None and self.origin.round - fork_round >= horizon:
                break
            self.origin.step()
            self.dest.step()
            now = self.origin.round
            blk = self._holder(self.origin, tx.tx_id)
            if blk is not None and out.included_round is None:
                out.included_round = now
            if blk is not None and fork_at_depth is not None and not out.forked:
                depth = self.origin.tip_height() - blk.height
                if depth >= fork_at_depth:
                    self.origin.inject_fork(blk.height - 1, depth + 3, [conflict] if conflict is not None else [])
                    out.forked = True
                    fork_round = now
            if self.relay is None and blk is not None:
                depth = self.origin.tip_height() - blk.height
                if depth >= self.lam:
                    self.relay = relay_of(tx, 0, blk, self.lam)
                    out.relay_round = now
                    out.origin_intervals = depth
                    self.dest.submit(self.relay)
            if self.relay is not None:
                rb = self._holder(self.dest, self.relay.relay_id)
                if rb is not None:
                    d = self.dest.tip_height() - rb.height
                    if d >= self.lam:
                        out.credit_round = now
                        out.dest_intervals = d
                        break
        return out


# -- randomized fault injection ---------------------------------------------------------


def fault_scenario(seed: int, ticks: int = 4000) -> dict[str, Any]:
    """One randomized 2PC run: pre-GST delays, a Byzantine replica per shard,
    misbehaving clients, replays and conflicting concurrent transactions."""
    rng = random.Random(seed)
    m = rng.choice([2, 3, 4])
    gst = rng.randint(0, 120)
    delta = 3

    def delays(src, dst, payload, now):
        return rng.randint(1, 40) if now < gst else rng.randint(1, delta)

    byz, lying = {}, []
    for s in range(m):
        r = rng.random()
        v = s * 4 + rng.randrange(4)
        if r < 0.25:
            byz[v] = rng.choice(["silent", "equivocate", "forge"])
        elif r < 0.35:
            lying.append(v)
    sys_ = CrossShardSystem(m, 4, delta=delta, gst=gst, seed=seed, byzantine=byz, lying=lying, delay_policy=delays)
    users = [sys_.key_in_shard(rng.randrange(m), (seed, i)) for i in range(4)]
    coins = [(k, sys_.mint(k, rng.randint(1, 9))) for k in users for _ in range(2)]
    value = {op: sys_.apps[sys_.directory.members[owner_shard(k.address, m)][0]].utxo.get(op).value for k, op in coins}
    seen: set[bytes] = set()
    for _ in range(rng.randint(2, 5)):
        picks = rng.sample(coins, rng.randint(1, 2))
        dest = rng.choice(users)
        tx = Transaction.create([op for _, op in picks], [TxOutput(dest.address, sum(value[op] for _, op in picks))], [k for k, _ in picks])
        if tx.tx_id in seen:
            continue
        seen.add(tx.tx_id)
        behavior = rng.choices(list(ClientBehavior), weights=[5, 1, 1, 1])[0]
        sys_.net.set_timer(rng.randint(0, 60), sys_.submit, tx, rng.choice(list(Mode)), sys_.new_client(behavior))
    sys_.run(ticks)
    res = sys_.check()
    res["seed"] = seed
    return res
