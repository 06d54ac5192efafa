"""Simulated cryptographic primitives.

Signatures are keyed hashes checked against a process-wide simulated PKI.
Honest and Byzantine code alike only ever sign with keys they own, so the
ideal-authentication assumption holds by construction.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

DIGEST_SIZE = 32

# public key -> secret; append-only
_PKI: dict[bytes, bytes] = {}


def digest(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


def digest_many(*parts: bytes) -> bytes:
    h = hashlib.sha256()
    for p in parts:
        h.update(len(p).to_bytes(4, "little"))
        h.update(p)
    return h.digest()


@dataclass(frozen=True)
class KeyPair:
    secret: bytes
    public: bytes = field(init=False)

    def __post_init__(self) -> None:
        pub = digest(b"pk" + self.secret)
        object.__setattr__(self, "public", pub)
        _PKI.setdefault(pub, self.secret)

    @classmethod
    def from_seed(cls, *parts: bytes | str | int) -> "KeyPair":
        enc = [p if isinstance(p, bytes) else str(p).encode() for p in parts]
        return cls(digest_many(b"keypair", *enc))

    @property
    def address(self) -> bytes:
        return address_of(self.public)

    def sign(self, msg: bytes) -> bytes:
        return sign(self.secret, msg)


def address_of(public: bytes) -> bytes:
    return digest(b"addr" + public)


def sign(secret: bytes, msg: bytes) -> bytes:
    return hashlib.sha256(secret + b"|" + msg).digest()


def verify(public: bytes, msg: bytes, sig: bytes) -> bool:
    secret = _PKI.get(public)
    if secret is None or len(sig) != DIGEST_SIZE:
        return False
    return hashlib.sha256(secret + b"|" + msg).digest() == sig
