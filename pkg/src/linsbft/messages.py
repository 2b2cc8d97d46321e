"""Consensus messages and their canonical wire encoding.

Every message starts with a one-byte tag, integers are big-endian and
variable-length fields are prefixed with a u32 length.  A message's
``sender_sig`` covers its encoding with the signature field left out.
"""
from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field
from functools import cached_property

from .chain import Block, _lp
from .crypto import KeyPair, PartialSig, ThresholdKeySet, ThresholdSig


class Tag(enum.IntEnum):
    PROPOSE = 1
    VOTE = 2
    CERT = 3
    STATE = 4
    SYNC_REQ = 5
    SYNC_RESP = 6


_U64x2 = struct.Struct(">QQ")
_U32 = struct.Struct(">I")


@dataclass(frozen=True)
class VoteCertificate:
    l: int
    v: int
    block_hash: bytes
    ts: ThresholdSig

    def encode(self) -> bytes:
        return _U64x2.pack(self.l, self.v) + self.block_hash + _lp(self.ts.encode())

    @property
    def rank(self) -> tuple[int, int]:
        """Ordering key for "highest": height, then round."""
        return (self.l, self.v)

    def verify(self, keyset: ThresholdKeySet) -> bool:
        return keyset.verify_threshold(self.ts, self.block_hash)

    def with_round(self, v: int) -> "VoteCertificate":
        return VoteCertificate(self.l, v, self.block_hash, self.ts)


class _Signed:
    tag: Tag
    sender: int
    sender_sig: bytes

    def body(self) -> bytes:  # pragma: no cover - overridden
        raise NotImplementedError

    @cached_property
    def signed_body(self) -> bytes:
        return bytes([self.tag]) + self.body() + _U32.pack(self.sender)

    def encode(self) -> bytes:
        return self.signed_body + _lp(self.sender_sig)

    @cached_property
    def wire_size(self) -> int:
        return len(self.signed_body) + 4 + len(self.sender_sig)

    def verify_sender(self, keyset: ThresholdKeySet) -> bool:
        return keyset.verify_signature(self.sender, self.signed_body, self.sender_sig)


def _sealed(cls, key: KeyPair, **fields):
    unsigned = cls(sender=key.validator_index, sender_sig=b"", **fields)
    return cls(sender=key.validator_index, sender_sig=key.sign(unsigned.signed_body), **fields)


@dataclass(frozen=True, eq=False)
class Proposal(_Signed):
    l: int
    v: int
    block: Block
    cert: VoteCertificate
    cert_endorsement: bytes
    sender: int
    sender_sig: bytes = field(repr=False)
    tag = Tag.PROPOSE

    def body(self) -> bytes:
        return (
            _U64x2.pack(self.l, self.v)
            + _lp(self.block.encode())
            + _lp(self.cert.encode())
            + _lp(self.cert_endorsement)
        )

    @classmethod
    def make(cls, key: KeyPair, l: int, v: int, block: Block, cert: VoteCertificate) -> "Proposal":
        return _sealed(cls, key, l=l, v=v, block=block, cert=cert, cert_endorsement=key.sign(cert.encode()))

    def fault_height(self) -> int:
        # a proposal is the act of the collector of the round that precedes it
        return self.l - 1 if self.v == 0 else self.l


@dataclass(frozen=True, eq=False)
class Vote(_Signed):
    l: int
    v: int
    block_partial: PartialSig
    cert: VoteCertificate
    sender: int
    sender_sig: bytes = field(repr=False)
    tag = Tag.VOTE

    def body(self) -> bytes:
        p = self.block_partial
        return (
            _U64x2.pack(self.l, self.v)
            + _U32.pack(p.signer)
            + p.message_digest
            + _lp(p.blob)
            + _lp(self.cert.encode())
        )

    @property
    def block_hash(self) -> bytes:
        return self.block_partial.message_digest

    @classmethod
    def make(cls, key: KeyPair, keyset: ThresholdKeySet, l: int, v: int, block_hash: bytes, cert: VoteCertificate) -> "Vote":
        partial = keyset.partial_sign(key.validator_index, block_hash)
        return _sealed(cls, key, l=l, v=v, block_partial=partial, cert=cert)

    def fault_height(self) -> int:
        return self.l


@dataclass(frozen=True, eq=False)
class CertMsg(_Signed):
    cert: VoteCertificate
    sender: int
    sender_sig: bytes = field(repr=False)
    tag = Tag.CERT

    def body(self) -> bytes:
        return self.cert.encode()

    @classmethod
    def make(cls, key: KeyPair, cert: VoteCertificate) -> "CertMsg":
        return _sealed(cls, key, cert=cert)

    def fault_height(self) -> int:
        return self.cert.l


@dataclass(frozen=True, eq=False)
class StateMsg(_Signed):
    cert: VoteCertificate
    l: int
    v: int
    sender: int
    sender_sig: bytes = field(repr=False)
    tag = Tag.STATE

    def body(self) -> bytes:
        return _lp(self.cert.encode()) + _U64x2.pack(self.l, self.v)

    @classmethod
    def make(cls, key: KeyPair, cert: VoteCertificate, l: int, v: int) -> "StateMsg":
        return _sealed(cls, key, cert=cert, l=l, v=v)

    def fault_height(self) -> int:
        return self.l


@dataclass(frozen=True, eq=False)
class SyncRequest(_Signed):
    from_height: int
    want: bytes
    sender: int
    sender_sig: bytes = field(repr=False)
    tag = Tag.SYNC_REQ

    def body(self) -> bytes:
        return struct.pack(">Q", self.from_height) + self.want

    @classmethod
    def make(cls, key: KeyPair, from_height: int, want: bytes) -> "SyncRequest":
        return _sealed(cls, key, from_height=from_height, want=want)

    def fault_height(self) -> int:
        return self.from_height


@dataclass(frozen=True, eq=False)
class SyncResponse(_Signed):
    """A certified chain segment in height order, plus the responder's
    uncertified current block and round."""

    blocks: tuple[Block, ...]
    certs: tuple[VoteCertificate | None, ...]
    tip: Block | None
    l: int
    v: int
    sender: int
    sender_sig: bytes = field(repr=False)
    tag = Tag.SYNC_RESP

    def body(self) -> bytes:
        out = _U32.pack(len(self.blocks))
        for blk, cert in zip(self.blocks, self.certs):
            out += _lp(blk.encode()) + _lp(cert.encode() if cert is not None else b"")
        out += _lp(self.tip.encode() if self.tip is not None else b"")
        return out + _U64x2.pack(self.l, self.v)

    @classmethod
    def make(cls, key: KeyPair, blocks, certs, tip, l: int, v: int) -> "SyncResponse":
        return _sealed(cls, key, blocks=tuple(blocks), certs=tuple(certs), tip=tip, l=l, v=v)

    def fault_height(self) -> int:
        return self.l


Message = Proposal | Vote | CertMsg | StateMsg | SyncRequest | SyncResponse
