"""Digests, signatures, a simulated (n, t) threshold scheme and collector selection.

The threshold scheme is a trusted-dealer simulation: partial signatures are
HMACs under per-validator share secrets and an aggregate is a MAC under the
dealer's group secret, minted only when at least ``t`` distinct valid partials
are presented.  Aggregates are 32 bytes for every ``n`` and every signer
subset, and unique per message digest (like BLS threshold signatures).
"""
from __future__ import annotations

import bisect
import hashlib
import hmac
import random
from dataclasses import dataclass, field
from itertools import accumulate
from typing import Iterable, Protocol, Sequence

DIGEST_SIZE = 32
ZERO_DIGEST = bytes(DIGEST_SIZE)


class CryptoError(Exception):
    pass


class ParameterError(CryptoError, ValueError):
    pass


class InsufficientQuorum(CryptoError):
    pass


class DigestMismatch(CryptoError):
    pass


def digest(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


def _mac(key: bytes, data: bytes) -> bytes:
    return hmac.new(key, data, hashlib.sha256).digest()


@dataclass(frozen=True)
class KeyPair:
    validator_index: int
    secret: bytes = field(repr=False)
    public: bytes

    @classmethod
    def from_secret(cls, index: int, secret: bytes) -> "KeyPair":
        return cls(index, secret, digest(b"pk" + secret))

    def sign(self, message: bytes) -> bytes:
        return _mac(self.secret, message)

    def verify(self, message: bytes, signature: bytes) -> bool:
        return hmac.compare_digest(self.sign(message), signature)


@dataclass(frozen=True)
class PartialSig:
    signer: int
    message_digest: bytes
    blob: bytes


@dataclass(frozen=True)
class ThresholdSig:
    blob: bytes

    def encode(self) -> bytes:
        return self.blob


class ThresholdScheme(Protocol):
    """What the consensus engine needs from a threshold signature scheme."""

    n: int
    t: int

    def partial_sign(self, signer: int, message_digest: bytes) -> PartialSig: ...

    def verify_partial(self, partial: PartialSig) -> bool: ...

    def aggregate(self, partials: Iterable[PartialSig]) -> ThresholdSig: ...

    def verify_threshold(self, sig: ThresholdSig, message_digest: bytes) -> bool: ...


@dataclass(frozen=True)
class ThresholdKeySet:
    n: int
    t: int
    shares: tuple[bytes, ...] = field(repr=False)
    group_public: bytes
    _group_secret: bytes = field(repr=False)
    # individual signing keys, held here so any party can check a signature
    # against the signer's index (stands in for public-key verification)
    keypairs: tuple[KeyPair, ...] = field(repr=False, default=())

    @property
    def f(self) -> int:
        return self.n - self.t

    def partial_sign(self, signer: int, message_digest: bytes) -> PartialSig:
        return PartialSig(signer, message_digest, _mac(self.shares[signer], b"part" + message_digest))

    def verify_partial(self, partial: PartialSig) -> bool:
        if not 0 <= partial.signer < self.n:
            return False
        expected = _mac(self.shares[partial.signer], b"part" + partial.message_digest)
        return hmac.compare_digest(expected, partial.blob)

    def aggregate(self, partials: Iterable[PartialSig]) -> ThresholdSig:
        return ts_aggregate(partials, self)

    def verify_threshold(self, sig: ThresholdSig, message_digest: bytes) -> bool:
        return hmac.compare_digest(_mac(self._group_secret, b"ts" + message_digest), sig.blob)

    def verify_signature(self, signer: int, message: bytes, signature: bytes) -> bool:
        if not 0 <= signer < len(self.keypairs):
            return False
        return self.keypairs[signer].verify(message, signature)

    def genesis_sig(self, message_digest: bytes) -> ThresholdSig:
        """Dealer-issued aggregate for the epoch anchor block (no votes exist for it)."""
        return ThresholdSig(_mac(self._group_secret, b"ts" + message_digest))


def keygen_dealer(n: int, t: int, seed: int) -> tuple[ThresholdKeySet, list[KeyPair]]:
    """Deterministically deal threshold shares and signing keys for ``n`` validators."""
    if not (isinstance(n, int) and isinstance(t, int)) or n < 1 or not 1 <= t <= n:
        raise ParameterError(f"invalid threshold parameters n={n!r}, t={t!r}")
    rng = random.Random(f"dealer:{seed}:{n}:{t}")
    group_secret = rng.randbytes(32)
    shares = tuple(rng.randbytes(32) for _ in range(n))
    keypairs = [KeyPair.from_secret(i, rng.randbytes(32)) for i in range(n)]
    keyset = ThresholdKeySet(
        n=n,
        t=t,
        shares=shares,
        group_public=digest(b"group" + group_secret),
        _group_secret=group_secret,
        keypairs=tuple(keypairs),
    )
    return keyset, keypairs


def ts_aggregate(partials: Iterable[PartialSig], keyset: ThresholdKeySet) -> ThresholdSig:
    partials = list(partials)
    digests = {p.message_digest for p in partials}
    if len(digests) > 1:
        raise DigestMismatch("partial signatures cover different digests")
    signers = set()
    for p in partials:
        if not keyset.verify_partial(p):
            raise CryptoError(f"invalid partial signature from {p.signer}")
        signers.add(p.signer)
    if len(signers) < keyset.t:
        raise InsufficientQuorum(f"{len(signers)} distinct signers, need {keyset.t}")
    (d,) = digests
    return ThresholdSig(_mac(keyset._group_secret, b"ts" + d))


class _Encodable(Protocol):
    def encode(self) -> bytes: ...


def _selection_hash(cert: _Encodable, v: int) -> int:
    return int.from_bytes(digest(cert.encode() + v.to_bytes(8, "big")), "big")


def select_collector(prev_cert: _Encodable, v: int, n: int) -> int:
    """Collector index for round ``v``: H(cert_bytes || v as u64 big-endian) mod n."""
    if n < 1:
        raise ParameterError("n must be positive")
    return _selection_hash(prev_cert, v) % n


def select_collector_weighted(prev_cert: _Encodable, v: int, stakes: Sequence[int]) -> int:
    """Stake-weighted collector: index ``i`` whose cumulative-stake interval
    (sum_{j<i}, sum_{j<=i}] contains ``(H mod D) + 1``."""
    if not stakes or any((not isinstance(d, int)) or d <= 0 for d in stakes):
        raise ParameterError("stakes must be a non-empty list of positive integers")
    cumulative = list(accumulate(stakes))
    x = _selection_hash(prev_cert, v) % cumulative[-1] + 1
    return bisect.bisect_left(cumulative, x)
