"""PBFT with view change, run as envelope-driven replicas on the simulated network.

Every replica (the primary included) broadcasts Prepare after accepting a
PrePrepare. An entry is prepared with a quorum of Prepares and committed with a
quorum of Commits; committed entries execute strictly in sequence order.

View change: a replica whose timer fires broadcasts ViewChange(v+1, S*, C, U).
Other replicas check it and acknowledge it to the new primary, which accepts a
ViewChange once it holds 2f-1 acknowledgements for it and sends NewView after
accepting a quorum of them. NewView re-proposes, for every sequence above the
highest S*, the prepared entry from the highest view, or the empty proposal.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Any, Callable, Optional, Sequence

from ..crypto import KeyPair
from ..net import Envelope, Network, Port
from .common import (
    LogEntry,
    Vote,
    canonical,
    check_votes,
    max_faults,
    payload_digest,
    quorum_size,
    sign_statement,
)

WINDOW = 256  # sequence numbers accepted above the last executed one
# with a known delay bound, a capped doubling suffices to resynchronise views
MAX_BACKOFF = 4


@dataclass(frozen=True)
class Request:
    rid: bytes
    payload: Any


@dataclass(frozen=True)
class CommitCert:
    view: int
    seq: int
    digest: bytes
    votes: tuple[Vote, ...]


@dataclass(frozen=True)
class PreparedCert:
    view: int
    seq: int
    digest: bytes
    request: Optional[Request]
    votes: tuple[Vote, ...]


@dataclass(frozen=True)
class PrePrepare:
    view: int
    seq: int
    digest: bytes
    request: Optional[Request]
    sender: int
    sig: bytes = field(default=b"", compare=False)

    def statement(self):
        return ("pre-prepare", self.view, self.seq, self.digest)

    def wire_size(self) -> int:
        return 96 + len(canonical(self.request))


@dataclass(frozen=True)
class Prepare:
    view: int
    seq: int
    digest: bytes
    sender: int
    sig: bytes = field(default=b"", compare=False)

    def statement(self):
        return ("prepare", self.view, self.seq, self.digest)


@dataclass(frozen=True)
class Commit:
    view: int
    seq: int
    digest: bytes
    sender: int
    sig: bytes = field(default=b"", compare=False)

    def statement(self):
        return ("commit", self.view, self.seq, self.digest)


@dataclass(frozen=True)
class ViewChange:
    new_view: int
    s_star: int
    cert: Optional[CommitCert]
    prepared: tuple[PreparedCert, ...]
    sender: int
    sig: bytes = field(default=b"", compare=False)

    def statement(self):
        return ("view-change", self.new_view, self.s_star, self.cert, self.prepared, self.sender)

    @property
    def vc_digest(self) -> bytes:
        return payload_digest(self.statement())

    def wire_size(self) -> int:
        return 96 + 40 * (len(self.cert.votes) if self.cert else 0) + 120 * len(self.prepared)


@dataclass(frozen=True)
class ViewChangeAck:
    new_view: int
    vc_sender: int
    vc_digest: bytes
    sender: int
    sig: bytes = field(default=b"", compare=False)

    def statement(self):
        return ("vc-ack", self.new_view, self.vc_sender, self.vc_digest)


@dataclass(frozen=True)
class NewView:
    new_view: int
    view_changes: tuple[ViewChange, ...]
    entries: tuple[tuple[int, bytes, Optional[Request]], ...]
    sender: int
    sig: bytes = field(default=b"", compare=False)

    def statement(self):
        return ("new-view", self.new_view, tuple(v.vc_digest for v in self.view_changes), self.entries)

    def wire_size(self) -> int:
        return 96 + sum(v.wire_size() for v in self.view_changes) + 80 * len(self.entries)


@dataclass(frozen=True)
class FetchLog:
    from_seq: int
    upto: int
    sender: int


@dataclass(frozen=True)
class LogReply:
    items: tuple[tuple[CommitCert, Optional[Request]], ...]
    sender: int


PROTOCOL = (PrePrepare, Prepare, Commit, ViewChange, ViewChangeAck, NewView)


def _signed(key: KeyPair, msg):
    return type(msg)(**{**msg.__dict__, "sig": sign_statement(key, msg.statement())})


def new_view_entries(vcs: Sequence[ViewChange]) -> tuple[int, tuple]:
    """Highest S* among `vcs` and the entries NewView must re-propose above it."""
    h = max(v.s_star for v in vcs)
    best: dict[int, PreparedCert] = {}
    for v in vcs:
        for pc in v.prepared:
            if pc.seq > h and (pc.seq not in best or pc.view > best[pc.seq].view):
                best[pc.seq] = pc
    top = max(best, default=h)
    entries = []
    for s in range(h + 1, top + 1):
        pc = best.get(s)
        if pc is None:
            entries.append((s, payload_digest(None), None))
        else:
            entries.append((s, pc.digest, pc.request))
    return h, tuple(entries)


class Replica:
    """Honest PBFT replica."""

    def __init__(
        self,
        node: int,
        members: Sequence[int],
        keys: dict[int, KeyPair],
        net: Network,
        shard: int = 0,
        timeout: int = 20,
        app: Optional[Callable[["Replica", LogEntry, Optional[Request]], None]] = None,
        on_other: Optional[Callable[["Replica", Any], None]] = None,
    ):
        self.id = node
        self.on_other = on_other
        self.members = list(members)
        self.u = len(self.members)
        self.f = max_faults(self.u)
        self.q = quorum_size(self.u, self.f)
        self.key = keys[node]
        self.roster = {m: keys[m].public for m in self.members}
        self.shard = shard
        self.timeout = timeout
        self.app = app
        self.port: Port = net.register(node, self.on_envelope)
        self.view = 0
        self.in_vc = False
        self.vc_target = 0
        self.backoff = 0
        self.log: list[LogEntry] = []
        self.executed_upto = 0
        self.commit_certs: dict[int, CommitCert] = {}
        self.requests_by_seq: dict[int, Optional[Request]] = {}
        self.accepted: dict[tuple[int, int], tuple[bytes, Optional[Request]]] = {}
        self.prepares: dict[tuple, dict[int, Vote]] = {}
        self.commits: dict[tuple, dict[int, Vote]] = {}
        self.sent_commit: set[tuple] = set()
        self.prepared: dict[int, PreparedCert] = {}
        self.committed: dict[int, tuple[bytes, Optional[Request], CommitCert]] = {}
        self.pending: dict[bytes, Request] = {}
        self.executed_rids: set[bytes] = set()
        self.proposed: dict[int, set[bytes]] = {}
        self.next_seq = 1
        self.evidence: list[tuple] = []
        self.rejected: list[tuple[str, int]] = []
        self.vcs: dict[int, dict[int, ViewChange]] = {}
        self.acks: dict[tuple[int, int, bytes], set[int]] = {}
        self.new_view_sent: set[int] = set()
        self.future: list[Envelope] = []
        self._timer_token: Optional[tuple] = None
        self.view_changes = 0

    # -- helpers ---------------------------------------------------------

    def primary(self, view: int) -> int:
        return self.members[view % self.u]

    @property
    def is_primary(self) -> bool:
        return self.primary(self.view) == self.id and not self.in_vc

    def others(self):
        return [m for m in self.members if m != self.id]

    def broadcast(self, msg) -> None:
        self.port.broadcast(self.others(), msg)
        self.handle(msg)

    def sign(self, msg):
        return _signed(self.key, msg)

    def valid_sig(self, msg) -> bool:
        pub = self.roster.get(msg.sender)
        if pub is None:
            return False
        return check_votes(msg.statement(), [Vote(msg.sender, msg.sig)], {msg.sender: pub}, 1)

    # -- entry points ------------------------------------------------------

    def on_envelope(self, env: Envelope) -> None:
        self.handle(env.payload)

    def handle(self, msg) -> None:
        if isinstance(msg, Request):
            self.on_request(msg)
            return
        if isinstance(msg, FetchLog):
            self.on_fetch(msg)
            return
        if isinstance(msg, LogReply):
            self.on_log_reply(msg)
            return
        if not isinstance(msg, PROTOCOL):
            if self.on_other is not None:
                self.on_other(self, msg)
            return
        if not self.valid_sig(msg):
            self.rejected.append((type(msg).__name__, msg.sender))
            return
        if isinstance(msg, (PrePrepare, Prepare, Commit)):
            if msg.view > self.view or (msg.view == self.view and self.in_vc):
                self.future.append(msg)
                return
            if msg.view < self.view:
                return
        getattr(self, "on_" + type(msg).__name__.lower())(msg)

    def on_request(self, req: Request) -> None:
        if req.rid in self.executed_rids or req.rid in self.pending:
            return
        self.pending[req.rid] = req
        self.arm_timer()
        if self.is_primary:
            self.propose(req)

    # -- normal case -----------------------------------------------------------

    def propose(self, req: Optional[Request]) -> None:
        done = self.proposed.setdefault(self.view, set())
        if req is not None:
            if req.rid in done:
                return
            done.add(req.rid)
        s = self.next_seq
        self.next_seq += 1
        self.broadcast(self.sign(PrePrepare(self.view, s, payload_digest(req), req, self.id)))

    def on_preprepare(self, m: PrePrepare) -> None:
        if m.sender != self.primary(m.view):
            return
        if m.digest != payload_digest(m.request):
            self.rejected.append(("digest", m.sender))
            return
        if not self.executed_upto < m.seq <= self.executed_upto + WINDOW:
            return
        key = (m.view, m.seq)
        have = self.accepted.get(key)
        if have is not None:
            if have[0] != m.digest:
                self.evidence.append(("equivocation", m.sender, m.view, m.seq, have[0], m.digest))
            return
        self.accept(m.view, m.seq, m.digest, m.request)

    def accept(self, view: int, seq: int, d: bytes, req: Optional[Request]) -> None:
        self.accepted[(view, seq)] = (d, req)
        if req is not None and req.rid not in self.executed_rids:
            self.pending.setdefault(req.rid, req)
            self.arm_timer()
        self.broadcast(self.sign(Prepare(view, seq, d, self.id)))
        self.check_prepared(view, seq, d)
        self.check_committed(view, seq, d)

    def on_prepare(self, m: Prepare) -> None:
        self.prepares.setdefault((m.view, m.seq, m.digest), {})[m.sender] = Vote(m.sender, m.sig)
        self.check_prepared(m.view, m.seq, m.digest)

    def check_prepared(self, v: int, s: int, d: bytes) -> None:
        acc = self.accepted.get((v, s))
        if acc is None or acc[0] != d:
            return
        votes = self.prepares.get((v, s, d), {})
        if len(votes) < self.q:
            return
        cur = self.prepared.get(s)
        if cur is None or cur.view < v:
            self.prepared[s] = PreparedCert(v, s, d, acc[1], tuple(votes[k] for k in sorted(votes)))
        if (v, s, d) not in self.sent_commit:
            self.sent_commit.add((v, s, d))
            self.broadcast(self.sign(Commit(v, s, d, self.id)))

    def on_commit(self, m: Commit) -> None:
        self.commits.setdefault((m.view, m.seq, m.digest), {})[m.sender] = Vote(m.sender, m.sig)
        self.check_committed(m.view, m.seq, m.digest)

    def check_committed(self, v: int, s: int, d: bytes) -> None:
        acc = self.accepted.get((v, s))
        if acc is None or acc[0] != d or s in self.committed or s <= self.executed_upto:
            return
        votes = self.commits.get((v, s, d), {})
        if len(votes) < self.q:
            return
        cert = CommitCert(v, s, d, tuple(votes[k] for k in sorted(votes)))
        self.committed[s] = (d, acc[1], cert)
        self.try_execute()

    def try_execute(self) -> None:
        progressed = False
        while self.executed_upto + 1 in self.committed:
            s = self.executed_upto + 1
            d, req, cert = self.committed.pop(s)
            self.execute(s, d, req, cert)
            progressed = True
        if progressed:
            self.backoff = 0
            self.arm_timer(force=True)
            if self.is_primary:
                for req in list(self.pending.values()):
                    self.propose(req)

    def execute(self, s: int, d: bytes, req: Optional[Request], cert: CommitCert) -> None:
        entry = LogEntry(self.shard, s, d, None if req is None else req.payload)
        self.log.append(entry)
        self.executed_upto = s
        self.commit_certs[s] = cert
        self.requests_by_seq[s] = req
        if req is not None:
            self.pending.pop(req.rid, None)
            if req.rid in self.executed_rids:
                return
            self.executed_rids.add(req.rid)
        if self.app is not None:
            self.app(self, entry, req)

    # -- timers ------------------------------------------------------------------

    def arm_timer(self, force: bool = False) -> None:
        if not self.pending and not self.in_vc:
            self._timer_token = None
            return
        token = (self.view, self.executed_upto, self.in_vc, self.vc_target)
        if self._timer_token == token and not force:
            return
        self._timer_token = token
        wait = self.timeout * 2 ** min(self.backoff, MAX_BACKOFF)
        self.port.set_timer(self.port.now + wait, self.on_timer, token)

    def on_timer(self, token) -> None:
        if token != self._timer_token:
            return
        self._timer_token = None
        if not self.pending and not self.in_vc:
            return
        # we may just be behind: ask peers for committed entries as well
        self.port.broadcast(self.others(), FetchLog(self.executed_upto + 1, self.executed_upto + WINDOW, self.id))
        if self.in_vc and len(self.vcs.get(self.vc_target, {})) < self.q:
            # nobody else is changing view yet; escalating alone would strand us ahead
            if self.pending:
                self.arm_timer(force=True)
            return
        self.start_view_change(max(self.view, self.vc_target) + 1)

    # -- view change ---------------------------------------------------------------

    def start_view_change(self, nv: int) -> None:
        # never step back: a view-change already sent for a higher view may be in some NewView
        if nv <= self.view or nv <= self.vc_target:
            return
        self.in_vc = True
        self.vc_target = nv
        self.backoff += 1
        self.view_changes += 1
        s_star = self.executed_upto
        cert = self.commit_certs.get(s_star)
        prepared = tuple(self.prepared[s] for s in sorted(self.prepared) if s > s_star)
        self.arm_timer(force=True)
        self.broadcast(self.sign(ViewChange(nv, s_star, cert, prepared, self.id)))

    def valid_view_change(self, vc: ViewChange) -> bool:
        if vc.s_star > 0:
            c = vc.cert
            if c is None or c.seq != vc.s_star:
                return False
            if not check_votes(("commit", c.view, c.seq, c.digest), c.votes, self.roster, self.q):
                return False
        elif vc.cert is not None:
            return False
        for pc in vc.prepared:
            if pc.seq <= vc.s_star or pc.view >= vc.new_view or pc.digest != payload_digest(pc.request):
                return False
            if not check_votes(("prepare", pc.view, pc.seq, pc.digest), pc.votes, self.roster, self.q):
                return False
        return True

    def on_viewchange(self, vc: ViewChange) -> None:
        if vc.new_view <= self.view:
            return
        if not self.valid_view_change(vc):
            self.rejected.append(("view-change", vc.sender))
            return
        self.vcs.setdefault(vc.new_view, {})[vc.sender] = vc
        p = self.primary(vc.new_view)
        if vc.sender != self.id and p != self.id and p != vc.sender:
            ack = self.sign(ViewChangeAck(vc.new_view, vc.sender, vc.vc_digest, self.id))
            self.port.send(p, ack)
        # join rule: f+1 replicas are already ahead of us
        # join rule: f+1 others are ahead of us
        ahead = {}
        for v, by in self.vcs.items():
            if v > self.view:
                for s in by:
                    if s != self.id:
                        ahead[s] = max(ahead.get(s, v), v)
        if len(ahead) >= self.f + 1:
            # highest view that f+1 others have reached
            target = sorted(ahead.values(), reverse=True)[self.f]
            self.start_view_change(target)
        if p == self.id:
            self.try_new_view(vc.new_view)

    def on_viewchangeack(self, a: ViewChangeAck) -> None:
        if self.primary(a.new_view) != self.id or a.sender in (a.vc_sender, self.id):
            return
        self.acks.setdefault((a.new_view, a.vc_sender, a.vc_digest), set()).add(a.sender)
        self.try_new_view(a.new_view)

    def accepted_view_changes(self, nv: int) -> list[ViewChange]:
        need = max(0, 2 * self.f - 1)
        out = []
        for s, vc in sorted(self.vcs.get(nv, {}).items()):
            if s == self.id or len(self.acks.get((nv, s, vc.vc_digest), ())) >= need:
                out.append(vc)
        return out

    def try_new_view(self, nv: int) -> None:
        if nv in self.new_view_sent or nv <= self.view:
            return
        if not (self.in_vc and self.vc_target == nv):
            return
        vcs = self.accepted_view_changes(nv)
        if len(vcs) < self.q:
            return
        self.new_view_sent.add(nv)
        _, entries = new_view_entries(vcs)
        self.broadcast(self.sign(NewView(nv, tuple(vcs), entries, self.id)))

    def on_newview(self, m: NewView) -> None:
        nv = m.new_view
        if m.sender != self.primary(nv) or nv < max(self.view, self.vc_target) or (nv == self.view and not self.in_vc):
            return
        senders = {vc.sender for vc in m.view_changes}
        if len(senders) < self.q or len(senders) != len(m.view_changes):
            self.rejected.append(("new-view", m.sender))
            return
        for vc in m.view_changes:
            if vc.new_view != nv or not self.valid_sig(vc) or not self.valid_view_change(vc):
                self.rejected.append(("new-view", m.sender))
                return
        h, entries = new_view_entries(m.view_changes)
        if entries != m.entries:
            self.rejected.append(("new-view", m.sender))
            return
        self.enter_view(nv, h, entries)

    def enter_view(self, nv: int, h: int, entries) -> None:
        self.view = nv
        self.in_vc = False
        self.vc_target = nv
        self.vcs = {v: by for v, by in self.vcs.items() if v > nv}
        top = max([h, self.executed_upto] + [s for s, _, _ in entries])
        self.next_seq = top + 1
        if self.executed_upto < h:
            self.port.broadcast(self.others(), FetchLog(self.executed_upto + 1, h, self.id))
        for s, d, req in entries:
            if s > self.executed_upto + WINDOW:
                break
            self.accept(nv, s, d, req)
            if req is not None:
                self.proposed.setdefault(nv, set()).add(req.rid)
        self.arm_timer(force=True)
        future, self.future = self.future, []
        for msg in future:
            self.handle(msg)
        if self.is_primary:
            for req in list(self.pending.values()):
                self.propose(req)

    # -- state transfer ----------------------------------------------------------

    def on_fetch(self, m: FetchLog) -> None:
        if m.sender not in self.roster:
            return
        items = tuple(
            (self.commit_certs[s], self.requests_by_seq[s])
            for s in range(m.from_seq, min(m.upto, self.executed_upto) + 1)
        )
        if items:
            self.port.send(m.sender, LogReply(items, self.id))

    def on_log_reply(self, m: LogReply) -> None:
        for cert, req in m.items:
            s = cert.seq
            if s <= self.executed_upto or s in self.committed:
                continue
            if cert.digest != payload_digest(req):
                continue
            if not check_votes(("commit", cert.view, s, cert.digest), cert.votes, self.roster, self.q):
                continue
            self.committed[s] = (cert.digest, req, cert)
        self.try_execute()


# -- Byzantine replicas ------------------------------------------------------------


class SilentReplica(Replica):
    """Crash-like: receives everything, sends nothing."""

    def on_envelope(self, env: Envelope) -> None:
        pass


class EquivocatingReplica(Replica):
    """As primary, sends conflicting PrePrepares to the two halves of the committee.

    As any replica, votes Prepare and Commit for every digest it hears of.
    """

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.echoed: set[tuple] = set()

    def on_envelope(self, env: Envelope) -> None:
        msg = env.payload
        if isinstance(msg, Request) and self.primary(self.view) == self.id:
            self.equivocate(msg)
            return
        key = (getattr(msg, "view", None), getattr(msg, "seq", None), getattr(msg, "digest", None))
        if isinstance(msg, (PrePrepare, Prepare)) and self.valid_sig(msg) and key not in self.echoed:
            self.echoed.add(key)
            for kind in (Prepare, Commit):
                vote = self.sign(kind(msg.view, msg.seq, msg.digest, self.id))
                self.port.broadcast(self.others(), vote)
        super().on_envelope(env)

    def equivocate(self, req: Request) -> None:
        alt = Request(req.rid + b"'", ("conflict", req.payload))
        s = self.next_seq
        self.next_seq += 1
        others = self.others()
        half = len(others) // 2
        for group, r in ((others[:half], req), (others[half:], alt)):
            pp = self.sign(PrePrepare(self.view, s, payload_digest(r), r, self.id))
            self.port.broadcast(group, pp)


class ForgingReplica(Replica):
    """Starts view changes carrying a forged commit certificate for a far sequence."""

    def start_view_change(self, nv: int) -> None:
        fake = CommitCert(self.view, self.executed_upto + 5, b"\x00" * 32, tuple(Vote(m, b"\x01" * 32) for m in self.members))
        vc = self.sign(ViewChange(nv, fake.seq, fake, (), self.id))
        self.port.broadcast(self.others(), vc)
        super().start_view_change(nv)


BYZANTINE = {
    "silent": SilentReplica,
    "equivocate": EquivocatingReplica,
    "forge": ForgingReplica,
}


class PbftCluster:
    """One committee: replicas, keys, and a client endpoint on a shared network."""

    _clients = itertools.count(10**6)

    def __init__(
        self,
        net: Network,
        members: Sequence[int],
        shard: int = 0,
        byzantine: Optional[dict[int, str]] = None,
        timeout: int = 20,
        app: Optional[Callable] = None,
        keys: Optional[dict[int, KeyPair]] = None,
        on_other: Optional[Callable] = None,
    ):
        self.net = net
        self.members = list(members)
        self.shard = shard
        self.keys = keys or {m: KeyPair.from_seed("replica", m) for m in self.members}
        self.byzantine = dict(byzantine or {})
        self.replicas: dict[int, Replica] = {}
        for m in self.members:
            cls = BYZANTINE[self.byzantine[m]] if m in self.byzantine else Replica
            self.replicas[m] = cls(m, self.members, self.keys, net, shard, timeout, app, on_other)
        self.client = next(self._clients)
        while self.client in net.handlers:
            self.client = next(self._clients)
        net.register(self.client, lambda env: None)
        self._count = 0

    def submit(self, payload: Any, rid: Optional[bytes] = None, src: Optional[int] = None) -> Request:
        self._count += 1
        if rid is None:
            rid = payload_digest((self.shard, self.client, self._count, payload))
        req = Request(rid, payload)
        self.net.broadcast(self.client if src is None else src, self.members, req)
        return req

    @property
    def honest(self) -> list[Replica]:
        return [r for m, r in self.replicas.items() if m not in self.byzantine]

    def logs(self) -> dict[int, list[LogEntry]]:
        return {r.id: r.log for r in self.honest}

    def executed(self, rid: bytes) -> bool:
        return all(rid in r.executed_rids for r in self.honest)


def fuzz_run(seed: int, u: int = 4, requests: int = 6, limit: int = 20000) -> dict[str, Any]:
    """One randomized adversarial schedule.

    Up to f replicas misbehave; before GST a random victim's traffic is held
    back for the full pre-GST bound and other messages get random delays, which
    forces view changes. Returns conflict and liveness counts.
    """
    import random

    from ..net import PartialSyncB
    from .common import conflicting_commits

    rng = random.Random(seed)
    f = max_faults(u)
    members = list(range(u))
    kinds = sorted(BYZANTINE)
    bad = rng.sample(members, rng.randint(0, f))
    byz = {v: rng.choice(kinds) for v in bad}
    delta = rng.choice([2, 3, 5])
    gst = rng.randint(0, 200)
    victim = rng.choice(members)
    hold = rng.randint(delta, 80)

    def delays(src, dst, payload, now):
        if now >= gst:
            return rng.randint(1, delta)
        if src == victim or dst == victim:
            return hold
        return rng.randint(1, hold)

    net = Network(PartialSyncB(delta, gst), delays, seed=seed)
    cluster = PbftCluster(net, members, byzantine=byz, timeout=4 * delta)
    reqs = []
    for i in range(requests):
        net.set_timer(rng.randint(0, gst + 20), lambda i=i: reqs.append(cluster.submit(("op", seed, i))))
    net.run_until_idle(limit)
    honest = cluster.honest
    return {
        "conflicts": len(conflicting_commits(cluster.logs())),
        "unexecuted": sum(not cluster.executed(r.rid) for r in reqs),
        "views": max(r.view for r in honest),
        "byzantine": byz,
        "ticks": net.now,
    }
