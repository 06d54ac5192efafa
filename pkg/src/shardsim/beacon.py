"""Epoch randomness: a commit-reveal beacon and a threshold-share beacon.

The commit-reveal variant is kept as the biasable baseline: whoever reveals
last sees the tentative output and may abort. The threshold-share variant has
every member Shamir-share a secret with salted hash commitments per share, so a
withheld secret is rebuilt from the honest shares and aborting buys nothing.
"""
from __future__ import annotations

import json
import math
import random
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Union

from .crypto import digest, digest_many

# smallest prime above 2**61
FIELD_PRIME = 2**61 + 15


class BeaconFailed(Exception):
    pass


@dataclass(frozen=True)
class CommitReveal:
    commit_window: int = 1
    reveal_window: int = 1


@dataclass(frozen=True)
class ThresholdShare:
    threshold: int
    modulus: int = FIELD_PRIME

    def __post_init__(self) -> None:
        if self.threshold < 1:
            raise ValueError("threshold must be >= 1")
        if self.modulus < 2**61:
            raise ValueError("field modulus must be at least 2**61")


Variant = Union[CommitReveal, ThresholdShare]


@dataclass
class Transcript:
    """Public record of one beacon run; `xi` must be reproducible from it."""

    kind: str
    epoch: int
    members: list[int]
    threshold: int = 0
    modulus: int = 0
    commitments: dict = field(default_factory=dict)
    reveals: dict = field(default_factory=dict)
    shares: dict = field(default_factory=dict)
    excluded: list[int] = field(default_factory=list)
    xi: bytes = b""

    def to_json(self) -> bytes:
        def hx(b):
            return b.hex()

        doc = {
            "kind": self.kind,
            "epoch": self.epoch,
            "members": self.members,
            "threshold": self.threshold,
            "modulus": self.modulus,
            "commitments": {str(k): [hx(c) for c in v] for k, v in sorted(self.commitments.items())},
            "reveals": {str(k): hx(v) if isinstance(v, bytes) else v for k, v in sorted(self.reveals.items())},
            "shares": {
                str(d): {str(j): [s, hx(salt)] for j, (s, salt) in sorted(row.items())}
                for d, row in sorted(self.shares.items())
            },
            "excluded": self.excluded,
            "xi": hx(self.xi),
        }
        return json.dumps(doc, sort_keys=True, separators=(",", ":")).encode()

    @classmethod
    def from_json(cls, raw: bytes) -> "Transcript":
        doc = json.loads(raw)
        kind = doc["kind"]
        reveals = {}
        for k, v in doc["reveals"].items():
            reveals[int(k)] = bytes.fromhex(v) if isinstance(v, str) else int(v)
        return cls(
            kind=kind,
            epoch=doc["epoch"],
            members=list(doc["members"]),
            threshold=doc["threshold"],
            modulus=doc["modulus"],
            commitments={int(k): [bytes.fromhex(c) for c in v] for k, v in doc["commitments"].items()},
            reveals=reveals,
            shares={
                int(d): {int(j): (s, bytes.fromhex(salt)) for j, (s, salt) in row.items()}
                for d, row in doc["shares"].items()
            },
            excluded=list(doc["excluded"]),
            xi=bytes.fromhex(doc["xi"]),
        )


@dataclass(frozen=True)
class EpochRandomness:
    xi: bytes
    epoch: int
    transcript: Transcript


# -- adversary strategies ----------------------------------------------------


@dataclass
class Strategy:
    """Which members the adversary runs and how they behave.

    `reveal(member, tentative_xi)` decides whether a corrupted commit-reveal
    member publishes; `withhold_shares` makes corrupted members refuse to help
    reconstruct withheld secrets.
    """

    corrupted: frozenset = frozenset()
    reveal: Callable[[int, Optional[bytes]], bool] = lambda member, xi: True
    withhold_secret: bool = False
    withhold_shares: bool = False


def last_revealer_parity(member: int, target: int = 0) -> Strategy:
    """Corrupt the last revealer and abort whenever the output parity is wrong."""

    def reveal(m, tentative):
        return tentative is None or tentative[-1] & 1 == target

    return Strategy(frozenset({member}), reveal)


def budgeted_withholding(members: Sequence[int]) -> Strategy:
    return Strategy(frozenset(members), lambda m, xi: False, withhold_secret=True, withhold_shares=True)


HONEST = Strategy()


# -- field helpers -------------------------------------------------------------


def share_secret(secret: int, threshold: int, xs: Sequence[int], p: int, rng: random.Random) -> dict[int, int]:
    coeffs = [secret % p] + [rng.randrange(p) for _ in range(threshold - 1)]
    out = {}
    for x in xs:
        acc = 0
        for c in reversed(coeffs):
            acc = (acc * x + c) % p
        out[x] = acc
    return out


def interpolate_at_zero(points: Sequence[tuple[int, int]], p: int) -> int:
    total = 0
    for i, (xi, yi) in enumerate(points):
        num, den = 1, 1
        for j, (xj, _) in enumerate(points):
            if i != j:
                num = num * (-xj) % p
                den = den * (xi - xj) % p
        total = (total + yi * num * pow(den, -1, p)) % p
    return total


def _share_commit(dealer: int, x: int, value: int, salt: bytes) -> bytes:
    return digest_many(b"share", dealer.to_bytes(8, "little"), x.to_bytes(8, "little"), value.to_bytes(8, "little"), salt)


def _cr_commit(member: int, value: bytes) -> bytes:
    return digest_many(b"cr", member.to_bytes(8, "little"), value)


def _secret_bytes(s: int) -> bytes:
    return s.to_bytes(8, "big")


# -- protocol runs -------------------------------------------------------------


def run_beacon(
    committee: Sequence[int],
    epoch: int,
    variant: Variant,
    strategy: Strategy = HONEST,
    seed: int = 0,
) -> EpochRandomness:
    rng = random.Random(digest_many(b"beacon", seed.to_bytes(8, "little"), epoch.to_bytes(8, "little")))
    if isinstance(variant, CommitReveal):
        return _run_commit_reveal(list(committee), epoch, strategy, rng)
    return _run_threshold(list(committee), epoch, variant, strategy, rng)


def _cr_output(reveals: dict[int, bytes]) -> bytes:
    return digest(b"".join(reveals[m] for m in sorted(reveals)))


def _run_commit_reveal(members, epoch, strategy, rng) -> EpochRandomness:
    values = {m: rng.randbytes(32) for m in members}
    commits = {m: [_cr_commit(m, values[m])] for m in members}
    reveals: dict[int, bytes] = {}
    # honest members reveal first; corrupted members reveal last, in id order
    order = [m for m in members if m not in strategy.corrupted] + [m for m in members if m in strategy.corrupted]
    for m in order:
        if m in strategy.corrupted:
            trial = dict(reveals)
            trial[m] = values[m]
            if not strategy.reveal(m, _cr_output(trial)):
                continue
        reveals[m] = values[m]
    if not reveals:
        raise BeaconFailed("no member revealed")
    tr = Transcript("commit_reveal", epoch, members, commitments=commits, reveals=reveals)
    tr.excluded = [m for m in members if m not in reveals]
    tr.xi = _cr_output(reveals)
    return EpochRandomness(tr.xi, epoch, tr)


def _run_threshold(members, epoch, variant: ThresholdShare, strategy, rng) -> EpochRandomness:
    p, t = variant.modulus, variant.threshold
    if t > len(members):
        raise ValueError("threshold exceeds committee size")
    xs = {m: i + 1 for i, m in enumerate(members)}
    secrets, salts, dealt = {}, {}, {}
    commits = {}
    for d in members:
        secrets[d] = rng.randrange(p)
        dealt[d] = share_secret(secrets[d], t, list(xs.values()), p, rng)
        salts[d] = {x: rng.randbytes(16) for x in xs.values()}
        commits[d] = [_share_commit(d, x, dealt[d][x], salts[d][x]) for x in sorted(xs.values())]
    # inclusion set is fixed here, before any secret is opened
    reveals: dict[int, int] = {}
    for d in members:
        if d in strategy.corrupted and strategy.withhold_secret:
            continue
        reveals[d] = secrets[d]
    shares: dict[int, dict[int, tuple[int, bytes]]] = {}
    excluded = []
    for d in members:
        if d in reveals:
            continue
        row = {}
        for m in members:
            if m in strategy.corrupted and strategy.withhold_shares:
                continue
            x = xs[m]
            row[x] = (dealt[d][x], salts[d][x])
        shares[d] = row
        if len(row) < t:
            excluded.append(d)
    tr = Transcript(
        "threshold_share", epoch, members, threshold=t, modulus=p,
        commitments=commits, reveals=reveals, shares=shares, excluded=excluded,
    )
    tr.xi = _threshold_output(tr)
    return EpochRandomness(tr.xi, epoch, tr)


def _reconstruct(tr: Transcript, dealer: int) -> Optional[int]:
    row = tr.shares.get(dealer, {})
    pts = sorted((x, s) for x, (s, _) in row.items())
    if len(pts) < tr.threshold:
        return None
    return interpolate_at_zero(pts[: tr.threshold], tr.modulus)


def _threshold_output(tr: Transcript) -> bytes:
    parts = []
    for d in sorted(tr.members):
        if d in tr.reveals:
            parts.append(_secret_bytes(tr.reveals[d]))
        else:
            s = _reconstruct(tr, d)
            if s is not None:
                parts.append(_secret_bytes(s))
    return digest(b"".join(parts))


# -- verification --------------------------------------------------------------


def verify_beacon(transcript: Union[Transcript, bytes]) -> bool:
    try:
        tr = Transcript.from_json(transcript) if isinstance(transcript, (bytes, bytearray)) else transcript
        if tr.kind == "commit_reveal":
            return _verify_cr(tr)
        if tr.kind == "threshold_share":
            return _verify_threshold(tr)
    except (KeyError, ValueError, TypeError, IndexError, AttributeError):
        return False
    return False


def _verify_cr(tr: Transcript) -> bool:
    if set(tr.commitments) != set(tr.members) or not tr.reveals:
        return False
    for m, v in tr.reveals.items():
        if _cr_commit(m, v) != tr.commitments[m][0]:
            return False
    if sorted(tr.excluded) != sorted(set(tr.members) - set(tr.reveals)):
        return False
    return tr.xi == _cr_output(tr.reveals)


def _verify_threshold(tr: Transcript) -> bool:
    p, t, u = tr.modulus, tr.threshold, len(tr.members)
    if p < 2**61 or not 1 <= t <= u or set(tr.commitments) != set(tr.members):
        return False
    if any(len(c) != u for c in tr.commitments.values()):
        return False
    for d, row in tr.shares.items():
        if d in tr.reveals:
            return False
        for x, (s, salt) in row.items():
            if not 1 <= x <= u or _share_commit(d, x, s, salt) != tr.commitments[d][x - 1]:
                return False
        pts = sorted((x, s) for x, (s, _) in row.items())
        if len(pts) > t:
            # every further share must sit on the polynomial fixed by the first t
            base = pts[:t]
            for x, s in pts[t:]:
                if _eval_through(base, x, p) != s:
                    return False
    for d in tr.members:
        if d not in tr.reveals and d not in tr.shares:
            return False
    want_excluded = sorted(d for d in tr.shares if len(tr.shares[d]) < t)
    if sorted(tr.excluded) != want_excluded:
        return False
    return tr.xi == _threshold_output(tr)


def _eval_through(points: Sequence[tuple[int, int]], x: int, p: int) -> int:
    total = 0
    for i, (xi, yi) in enumerate(points):
        num, den = 1, 1
        for j, (xj, _) in enumerate(points):
            if i != j:
                num = num * (x - xj) % p
                den = den * (xi - xj) % p
        total = (total + yi * num * pow(den, -1, p)) % p
    return total


# -- bias measurement ------------------------------------------------------------


@dataclass(frozen=True)
class BiasReport:
    trials: int
    z: tuple[float, ...]

    @property
    def max_abs_z(self) -> float:
        return max(abs(v) for v in self.z)

    @property
    def parity_z(self) -> float:
        return self.z[0]


def bit_z_scores(outputs: Sequence[bytes], bits: int = 64) -> tuple[float, ...]:
    """z-score of each low-order bit's frequency of ones against a fair coin."""
    n = len(outputs)
    ints = [int.from_bytes(x, "big") for x in outputs]
    sd = math.sqrt(n * 0.25)
    return tuple((sum((v >> b) & 1 for v in ints) - n / 2) / sd for b in range(bits))


def bias_statistic(
    committee: Sequence[int],
    variant: Variant,
    strategy: Strategy,
    trials: int,
    seed: int = 0,
    bits: int = 64,
) -> BiasReport:
    """Per-bit z-scores over `trials` beacon outputs; bit 0 is the parity bit."""
    if trials < 1000:
        raise ValueError("need at least 1000 trials")
    outs = [run_beacon(committee, e, variant, strategy, seed).xi for e in range(trials)]
    return BiasReport(trials, bit_z_scores(outs, bits))
