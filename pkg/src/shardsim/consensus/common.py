"""Pieces shared by the committee consensus plug-ins."""
from __future__ import annotations

import dataclasses
import enum
import math
from dataclasses import dataclass
from typing import Any, Iterable, Mapping, Sequence

from ..crypto import KeyPair, digest, verify
from ..ledger import enc_bytes, enc_int, enc_list


def max_faults(u: int, sync: bool = False) -> int:
    """Largest f tolerated by a committee of u: u >= 3f+1, or u >= 2f+1 if synchronous."""
    return (u - 1) // 2 if sync else (u - 1) // 3


def quorum_size(u: int, f: int | None = None) -> int:
    """Smallest vote count any two of which share f+1 members.

    ceil((u+f+1)/2), which is 2f+1 when u = 3f+1.
    """
    if f is None:
        f = max_faults(u)
    return math.ceil((u + f + 1) / 2)


def canonical(x: Any) -> bytes:
    """Deterministic byte encoding of payloads built from plain values and dataclasses."""
    if x is None:
        return b"N"
    if isinstance(x, bool):
        return b"B1" if x else b"B0"
    if isinstance(x, int):
        return b"I" + enc_int(x & (2**64 - 1)) + (b"-" if x < 0 else b"")
    if isinstance(x, (bytes, bytearray)):
        return b"Y" + enc_bytes(bytes(x))
    if isinstance(x, str):
        return b"S" + enc_bytes(x.encode())
    if isinstance(x, enum.Enum):
        return b"E" + canonical(x.value)
    if isinstance(x, (list, tuple)):
        return b"L" + enc_list([canonical(i) for i in x])
    if isinstance(x, (set, frozenset)):
        return b"T" + enc_list(sorted(canonical(i) for i in x))
    if isinstance(x, Mapping):
        return b"M" + enc_list(sorted(canonical(k) + canonical(v) for k, v in x.items()))
    tx_id = getattr(x, "tx_id", None)
    if isinstance(tx_id, bytes) and hasattr(x, "serialize"):
        return b"X" + enc_bytes(x.serialize())
    if dataclasses.is_dataclass(x):
        fields = [canonical(getattr(x, f.name)) for f in dataclasses.fields(x) if f.compare]
        return b"D" + enc_bytes(type(x).__name__.encode()) + enc_list(fields)
    raise TypeError(f"no canonical encoding for {type(x).__name__}")


def payload_digest(payload: Any) -> bytes:
    return digest(canonical(payload))


@dataclass(frozen=True)
class Vote:
    """A member's signature over a statement."""

    signer: int
    sig: bytes


def sign_statement(key: KeyPair, statement: Any) -> bytes:
    return key.sign(digest(canonical(statement)))


def check_votes(
    statement: Any,
    votes: Iterable[Vote],
    roster: Mapping[int, bytes],
    need: int,
) -> bool:
    """True when at least `need` distinct roster members validly signed `statement`."""
    msg = digest(canonical(statement))
    ok = set()
    for v in votes:
        pub = roster.get(v.signer)
        if pub is not None and v.signer not in ok and verify(pub, msg, v.sig):
            ok.add(v.signer)
    return len(ok) >= need


@dataclass(frozen=True)
class LogEntry:
    shard: int
    seq: int
    digest: bytes
    payload: Any = dataclasses.field(compare=False, default=None)


BOTTOM = None  # the empty proposal


def logs_consistent(logs: Sequence[Sequence[LogEntry]]) -> bool:
    """Every pair of logs agrees position by position (one is a prefix of the other)."""
    for a in logs:
        for b in logs:
            for x, y in zip(a, b):
                if x.seq != y.seq or x.digest != y.digest:
                    return False
    return True


def conflicting_commits(logs: Mapping[int, Sequence[LogEntry]]) -> list[tuple[int, int, int]]:
    """(seq, replica_a, replica_b) triples where two replicas committed different digests."""
    seen: dict[int, tuple[int, bytes]] = {}
    out = []
    for rid, log in sorted(logs.items()):
        for e in log:
            prev = seen.get(e.seq)
            if prev is None:
                seen[e.seq] = (rid, e.digest)
            elif prev[1] != e.digest:
                out.append((e.seq, prev[0], rid))
    return out
