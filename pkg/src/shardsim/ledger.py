"""UTXO transactions, blocks, chains and shard homing.

Canonical serialization (see docs/serialization.md): integers are 8-byte
little-endian, byte strings are a 4-byte little-endian length followed by the
raw bytes, lists are a 4-byte little-endian count followed by the elements.
Fields are written in declaration order.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

from .crypto import KeyPair, address_of, digest, verify

MAX_VALUE = 2**64 - 1


def enc_int(x: int) -> bytes:
    return x.to_bytes(8, "little")


def enc_bytes(b: bytes) -> bytes:
    return len(b).to_bytes(4, "little") + b


def enc_list(items: Sequence[bytes]) -> bytes:
    return len(items).to_bytes(4, "little") + b"".join(items)


@dataclass(frozen=True, order=True)
class OutPoint:
    tx_id: bytes
    index: int

    def __post_init__(self) -> None:
        if self.index < 0:
            raise ValueError("outpoint index must be non-negative")

    def serialize(self) -> bytes:
        return enc_bytes(self.tx_id) + enc_int(self.index)

    def __repr__(self) -> str:
        return f"OutPoint({self.tx_id[:4].hex()}..:{self.index})"


@dataclass(frozen=True)
class TxOutput:
    owner: bytes
    value: int

    def __post_init__(self) -> None:
        if not 0 <= self.value <= MAX_VALUE:
            raise ValueError(f"output value out of range: {self.value}")

    def serialize(self) -> bytes:
        return enc_bytes(self.owner) + enc_int(self.value)


@dataclass(frozen=True)
class Witness:
    """Public key and signature authorising one input."""

    public: bytes
    sig: bytes


@dataclass(frozen=True)
class Transaction:
    inputs: tuple[OutPoint, ...]
    outputs: tuple[TxOutput, ...]
    witnesses: tuple[Witness, ...] = ()
    tx_id: bytes = field(init=False, compare=False)

    def __post_init__(self) -> None:
        if not self.inputs or not self.outputs:
            raise ValueError("transaction needs at least one input and one output")
        if len(set(self.inputs)) != len(self.inputs):
            raise ValueError("duplicate input in transaction")
        if self.witnesses and len(self.witnesses) != len(self.inputs):
            raise ValueError("one witness per input required")
        object.__setattr__(self, "tx_id", digest(self.serialize_body()))

    @classmethod
    def create(
        cls,
        inputs: Iterable[OutPoint],
        outputs: Iterable[TxOutput],
        keys: Iterable[KeyPair],
    ) -> "Transaction":
        inputs, outputs, keys = tuple(inputs), tuple(outputs), tuple(keys)
        if len(keys) != len(inputs):
            raise ValueError("one key per input required")
        body = cls(inputs, outputs)
        wits = tuple(Witness(k.public, k.sign(body.tx_id)) for k in keys)
        return cls(inputs, outputs, wits)

    def serialize_body(self) -> bytes:
        return enc_list([i.serialize() for i in self.inputs]) + enc_list(
            [o.serialize() for o in self.outputs]
        )

    def serialize(self) -> bytes:
        wits = [enc_bytes(w.public) + enc_bytes(w.sig) for w in self.witnesses]
        return self.serialize_body() + enc_list(wits)

    def outpoint(self, index: int) -> OutPoint:
        return OutPoint(self.tx_id, index)

    def input_owner(self, i: int) -> bytes:
        return address_of(self.witnesses[i].public)

    @property
    def output_value(self) -> int:
        return sum(o.value for o in self.outputs)

    def __repr__(self) -> str:
        return f"Tx({self.tx_id[:4].hex()}, {len(self.inputs)}in/{len(self.outputs)}out)"


class VerdictKind(enum.Enum):
    VALID = "valid"
    MISSING_INPUT = "missing_input"
    LOCKED = "locked"
    VALUE_MISMATCH = "value_mismatch"
    BAD_SIGNATURE = "bad_signature"


@dataclass(frozen=True)
class Verdict:
    kind: VerdictKind
    outpoint: Optional[OutPoint] = None

    @property
    def ok(self) -> bool:
        return self.kind is VerdictKind.VALID


VALID = Verdict(VerdictKind.VALID)


@dataclass
class Lock:
    tx_id: bytes
    expires_at: int


class UtxoSet:
    """Unspent outputs plus a lock table with lazily evaluated expiry."""

    def __init__(self, entries: Optional[dict[OutPoint, TxOutput]] = None):
        self.entries: dict[OutPoint, TxOutput] = dict(entries or {})
        self.locks: dict[OutPoint, Lock] = {}

    def __contains__(self, op: OutPoint) -> bool:
        return op in self.entries

    def __len__(self) -> int:
        return len(self.entries)

    def get(self, op: OutPoint) -> Optional[TxOutput]:
        return self.entries.get(op)

    def add(self, op: OutPoint, out: TxOutput) -> None:
        if op in self.entries:
            raise KeyError(f"{op} already present")
        self.entries[op] = out

    def remove(self, op: OutPoint) -> TxOutput:
        self.locks.pop(op, None)
        return self.entries.pop(op)

    def lock_holder(self, op: OutPoint, now: Optional[int] = None) -> Optional[bytes]:
        lk = self.locks.get(op)
        if lk is None:
            return None
        if now is not None and lk.expires_at <= now:
            return None
        return lk.tx_id

    def lock(self, op: OutPoint, tx_id: bytes, expires_at: int) -> None:
        if op not in self.entries:
            raise KeyError(f"cannot lock missing {op}")
        self.locks[op] = Lock(tx_id, expires_at)

    def unlock(self, op: OutPoint, tx_id: Optional[bytes] = None) -> bool:
        lk = self.locks.get(op)
        if lk is None or (tx_id is not None and lk.tx_id != tx_id):
            return False
        del self.locks[op]
        return True

    def expire(self, now: int) -> list[OutPoint]:
        """Drop locks whose expiry has passed; returns the released outpoints."""
        gone = [op for op, lk in self.locks.items() if lk.expires_at <= now]
        for op in gone:
            del self.locks[op]
        return gone

    def apply(self, tx: Transaction) -> None:
        for op in tx.inputs:
            self.remove(op)
        for i, out in enumerate(tx.outputs):
            self.add(tx.outpoint(i), out)

    def total_value(self) -> int:
        return sum(o.value for o in self.entries.values())

    def serialize(self) -> bytes:
        items = sorted(self.entries.items())
        return enc_list([op.serialize() + out.serialize() for op, out in items])

    def state_root(self) -> bytes:
        return digest(self.serialize())

    def copy(self) -> "UtxoSet":
        c = UtxoSet(self.entries)
        c.locks = {op: Lock(lk.tx_id, lk.expires_at) for op, lk in self.locks.items()}
        return c


def validate_transaction(
    tx: Transaction,
    utxo: UtxoSet,
    now: Optional[int] = None,
    check_signatures: bool = True,
) -> Verdict:
    total_in = 0
    for i, op in enumerate(tx.inputs):
        out = utxo.get(op)
        if out is None:
            return Verdict(VerdictKind.MISSING_INPUT, op)
        holder = utxo.lock_holder(op, now)
        if holder is not None and holder != tx.tx_id:
            return Verdict(VerdictKind.LOCKED, op)
        if check_signatures:
            if not tx.witnesses:
                return Verdict(VerdictKind.BAD_SIGNATURE, op)
            w = tx.witnesses[i]
            if address_of(w.public) != out.owner or not verify(w.public, tx.tx_id, w.sig):
                return Verdict(VerdictKind.BAD_SIGNATURE, op)
        total_in += out.value
    if total_in != tx.output_value:
        return Verdict(VerdictKind.VALUE_MISMATCH)
    return VALID


def home_shard(ident: bytes, m: int) -> int:
    """Shard owning `ident`: the low ceil(log2 m) bits of the id, reduced mod m."""
    if m < 1:
        raise ValueError("shard count must be >= 1")
    if m == 1:
        return 0
    bits = math.ceil(math.log2(m))
    return (int.from_bytes(ident, "big") & ((1 << bits) - 1)) % m


def output_shard(out: TxOutput, m: int) -> int:
    return home_shard(digest(out.owner), m)


def owner_shard(owner: bytes, m: int) -> int:
    return home_shard(digest(owner), m)


def payload_root(items: Sequence[object]) -> bytes:
    ids = [getattr(it, "tx_id", None) or digest(repr(it).encode()) for it in items]
    return digest(enc_list([enc_bytes(i) for i in ids]))


GENESIS_HASH = bytes(32)


@dataclass(frozen=True)
class BlockHeader:
    prev_hash: bytes
    payload_root: bytes
    shard: int
    epoch: int
    height: int
    producer: int

    def serialize(self) -> bytes:
        return (
            enc_bytes(self.prev_hash)
            + enc_bytes(self.payload_root)
            + enc_int(self.shard)
            + enc_int(self.epoch)
            + enc_int(self.height)
            + enc_int(self.producer)
        )

    @property
    def hash(self) -> bytes:
        return digest(self.serialize())


@dataclass(frozen=True)
class Block:
    header: BlockHeader
    body: tuple = ()

    @property
    def hash(self) -> bytes:
        return self.header.hash

    @property
    def height(self) -> int:
        return self.header.height

    @classmethod
    def genesis(cls, shard: int = 0, epoch: int = 0) -> "Block":
        return cls(BlockHeader(GENESIS_HASH, payload_root(()), shard, epoch, 0, MAX_VALUE))

    @classmethod
    def child_of(cls, parent: "Block", body: Sequence = (), producer: int = 0, epoch: Optional[int] = None) -> "Block":
        hdr = BlockHeader(
            parent.hash,
            payload_root(body),
            parent.header.shard,
            parent.header.epoch if epoch is None else epoch,
            parent.height + 1,
            producer,
        )
        return cls(hdr, tuple(body))


class Chain:
    """Hash-linked block list; `k` is the truncation depth for the stable prefix."""

    def __init__(self, genesis: Optional[Block] = None, k: int = 0):
        self.blocks: list[Block] = [genesis or Block.genesis()]
        self.k = k

    def __len__(self) -> int:
        return len(self.blocks)

    @property
    def tip(self) -> Block:
        return self.blocks[-1]

    @property
    def height(self) -> int:
        return self.tip.height

    def append(self, block: Block) -> None:
        if block.header.prev_hash != self.tip.hash:
            raise ValueError("block does not extend the tip")
        if block.height != self.tip.height + 1:
            raise ValueError("height must be parent height + 1")
        self.blocks.append(block)

    def stable_prefix(self) -> list[Block]:
        return self.blocks[: max(1, len(self.blocks) - self.k)]

    def is_linked(self) -> bool:
        if self.blocks[0].height != 0:
            return False
        return all(
            b.header.prev_hash == a.hash and b.height == a.height + 1
            for a, b in zip(self.blocks, self.blocks[1:])
        )
