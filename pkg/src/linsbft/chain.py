"""Blocks, the per-validator block graph, epochs and rewards."""
from __future__ import annotations

import enum
import random
import struct
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from .crypto import ZERO_DIGEST, digest


class ChainError(Exception):
    pass


class IncompleteGraph(ChainError):
    """Ancestry cannot be resolved because a parent block is missing."""


class SafetyViolation(ChainError):
    """Finalizing a block would fork the finalized chain."""


class ConfigurationError(ChainError, ValueError):
    pass


class TxKind(enum.IntEnum):
    TRANSFER = 0
    JOIN = 1
    LEAVE = 2


def _lp(data: bytes) -> bytes:
    return struct.pack(">I", len(data)) + data


@dataclass(frozen=True)
class Tx:
    """An opaque payload with a fee; JOIN/LEAVE carry a participant-set change."""

    kind: TxKind
    fee: int = 0
    payload: bytes = b""
    identity: bytes = b""
    deposit: int = 0

    def encode(self) -> bytes:
        out = struct.pack(">BQ", self.kind, self.fee) + _lp(self.payload)
        if self.kind != TxKind.TRANSFER:
            out += _lp(self.identity) + struct.pack(">Q", self.deposit)
        return out

    @classmethod
    def join(cls, identity: bytes, deposit: int, fee: int = 0) -> "Tx":
        return cls(TxKind.JOIN, fee, b"", identity, deposit)

    @classmethod
    def leave(cls, identity: bytes, fee: int = 0) -> "Tx":
        return cls(TxKind.LEAVE, fee, b"", identity, 0)


@dataclass(frozen=True, eq=False)
class Block:
    height: int
    round: int
    prehash: bytes
    proposer: int
    txs: tuple[Tx, ...] = ()
    hash: bytes = field(init=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "hash", digest(self.encode()))

    def encode(self) -> bytes:
        """Canonical encoding; this is the hashing preimage."""
        head = struct.pack(">QQ", self.height, self.round) + self.prehash + struct.pack(">I", self.proposer)
        return head + struct.pack(">I", len(self.txs)) + b"".join(_lp(tx.encode()) for tx in self.txs)

    @property
    def join_leave(self) -> list[Tx]:
        return [tx for tx in self.txs if tx.kind != TxKind.TRANSFER]

    @property
    def fees(self) -> int:
        return sum(tx.fee for tx in self.txs)

    def __eq__(self, other):
        return isinstance(other, Block) and other.hash == self.hash

    def __hash__(self):
        return hash(self.hash)

    def __repr__(self):
        return f"Block(h={self.height}, r={self.round}, {self.hash[:4].hex()}<-{self.prehash[:4].hex()}, by={self.proposer})"


def make_genesis() -> Block:
    return Block(height=0, round=0, prehash=ZERO_DIGEST, proposer=0, txs=())


class BlockGraph:
    """Blocks indexed by hash, rooted at an anchor block that counts as finalized."""

    def __init__(self, anchor: Block | None = None):
        anchor = anchor or make_genesis()
        self.anchor = anchor
        self.blocks: dict[bytes, Block] = {anchor.hash: anchor}
        self.children: dict[bytes, list[bytes]] = {anchor.hash: []}
        self.finalized: dict[int, bytes] = {anchor.height: anchor.hash}
        self.finalized_head = anchor.height

    def __contains__(self, block_hash: bytes) -> bool:
        return block_hash in self.blocks

    def get(self, block_hash: bytes) -> Block | None:
        return self.blocks.get(block_hash)

    def add(self, block: Block) -> None:
        if block.hash in self.blocks:
            return
        if block.prehash not in self.blocks:
            raise IncompleteGraph(f"parent of {block!r} is not stored")
        parent = self.blocks[block.prehash]
        if block.height != parent.height + 1:
            raise ChainError(f"{block!r} does not sit one height above its parent")
        self.blocks[block.hash] = block
        self.children[block.hash] = []
        self.children[block.prehash].append(block.hash)

    def parent(self, block: Block) -> Block:
        try:
            return self.blocks[block.prehash]
        except KeyError:
            raise IncompleteGraph(f"parent of {block!r} is missing") from None

    def is_finalized(self, block: Block) -> bool:
        return self.finalized.get(block.height) == block.hash

    def finalized_chain(self) -> list[Block]:
        return [self.blocks[self.finalized[h]] for h in range(self.anchor.height, self.finalized_head + 1)]


def ancestor_at(b: Block, height: int, graph: BlockGraph) -> Block:
    if height > b.height:
        raise ValueError(f"height {height} above block height {b.height}")
    if height < graph.anchor.height:
        raise IncompleteGraph(f"height {height} is below the graph anchor")
    cur = b
    while cur.height > height:
        cur = graph.parent(cur)
    return cur


def conflicts(a: Block, b: Block, graph: BlockGraph) -> bool:
    """True iff neither block is an ancestor of the other."""
    if a.height < b.height:
        a, b = b, a
    return ancestor_at(a, b.height, graph).hash != b.hash


class Order(enum.Enum):
    LARGER = "larger"
    SMALLER = "smaller"
    EQUAL = "equal"
    INCOMPARABLE = "incomparable"


def larger_than(a: Block, b: Block) -> Order:
    """Compare siblings by proposal round; blocks with different parents are incomparable."""
    if a.prehash != b.prehash:
        return Order.INCOMPARABLE
    if a.round > b.round:
        return Order.LARGER
    if a.round < b.round:
        return Order.SMALLER
    if a.hash == b.hash:
        return Order.EQUAL
    # equal rounds, different blocks: neither is larger
    return Order.INCOMPARABLE


def outranks(a: Block, b: Block) -> bool:
    """Strict total order on siblings used by the lock rules: round, then hash."""
    return a.prehash == b.prehash and (a.round, a.hash) > (b.round, b.hash)


def finalize(b: Block, graph: BlockGraph) -> list[Block]:
    """Finalize ``b`` and its unfinalized ancestors; returns them in height order."""
    pending: list[Block] = []
    cur = b
    while True:
        known = graph.finalized.get(cur.height)
        if known is not None:
            if known != cur.hash:
                raise SafetyViolation(
                    f"{cur!r} conflicts with finalized block {known[:4].hex()} at height {cur.height}"
                )
            break
        if cur.height <= graph.finalized_head:
            raise SafetyViolation(f"{cur!r} is below the finalized head but not on the finalized chain")
        pending.append(cur)
        cur = graph.parent(cur)
    pending.reverse()
    for blk in pending:
        graph.finalized[blk.height] = blk.hash
        graph.finalized_head = blk.height
    return pending


@dataclass
class EpochConfig:
    epoch_index: int
    epoch_length_heights: int
    validator_set: list[bytes]
    stakes: list[int]
    keyset_seed: int
    f: int
    start_height: int = 0

    def __post_init__(self):
        n = len(self.validator_set)
        if n < 4 * self.f + 1:
            raise ConfigurationError(f"{n} validators cannot tolerate f={self.f} (need n >= 4f+1)")
        if len(self.stakes) != n:
            raise ConfigurationError("one stake per validator is required")
        if self.epoch_length_heights < 1:
            raise ConfigurationError("epoch length must be positive")

    @property
    def n(self) -> int:
        return len(self.validator_set)

    @property
    def end_height(self) -> int:
        return self.start_height + self.epoch_length_heights

    def is_boundary(self, height: int) -> bool:
        return height > 0 and height % self.epoch_length_heights == 0


def epoch_transition(graph: BlockGraph, current: EpochConfig) -> EpochConfig:
    """Next epoch's configuration from the join/leave requests finalized in this one."""
    if graph.finalized_head < current.end_height:
        raise ChainError(f"epoch ends at height {current.end_height} but only {graph.finalized_head} is finalized")
    deposits = dict(zip(current.validator_set, current.stakes))
    for height in range(current.start_height + 1, current.end_height + 1):
        block = graph.blocks[graph.finalized[height]]
        for tx in block.join_leave:
            if tx.kind == TxKind.JOIN:
                deposits[tx.identity] = deposits.get(tx.identity, 0) + tx.deposit
            else:
                deposits.pop(tx.identity, None)
    ranked = sorted(deposits.items(), key=lambda kv: (-kv[1], kv[0]))[: current.n]
    if len(ranked) < 4 * current.f + 1:
        raise ConfigurationError(f"only {len(ranked)} candidates remain; need {4 * current.f + 1}")
    seed = int.from_bytes(digest(b"epoch-seed" + struct.pack(">QQ", current.keyset_seed, current.epoch_index)), "big")
    return EpochConfig(
        epoch_index=current.epoch_index + 1,
        epoch_length_heights=current.epoch_length_heights,
        validator_set=[ident for ident, _ in ranked],
        stakes=[stake for _, stake in ranked],
        keyset_seed=seed % (1 << 63),
        f=current.f,
        start_height=current.end_height,
    )


@dataclass
class FeeSchedule:
    coinbase: int = 10


@dataclass
class RewardLedger:
    balances: dict[int, int] = field(default_factory=dict)
    total: int = 0

    def credit(self, who: int, amount: int) -> None:
        self.balances[who] = self.balances.get(who, 0) + amount
        self.total += amount


def assign_reward(b: Block, ledger: RewardLedger, fee_schedule: FeeSchedule) -> RewardLedger:
    """Credit the proposer of a finalized block with its fees plus the coinbase."""
    ledger.credit(b.proposer, b.fees + fee_schedule.coinbase)
    return ledger


def filler_txs(count: int, tag: Sequence[int], fee: int = 1) -> tuple[Tx, ...]:
    """Deterministic transfer payloads for a block identified by ``tag``."""
    rng = random.Random(":".join(map(str, tag)))
    return tuple(Tx(TxKind.TRANSFER, fee, rng.randbytes(16)) for _ in range(count))


def tx_ids(blocks: Iterable[Block]) -> set[bytes]:
    return {digest(tx.encode()) for blk in blocks for tx in blk.txs}
