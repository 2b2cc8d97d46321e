"""Per-validator LinSBFT state machine.

The engine is sans-I/O: a :class:`Validator` owns its :class:`ValidatorState`
and :class:`BlockGraph`, each handler updates them and returns the list of
actions (sends, timers, finalizations, evidence) for the caller to perform.
Time only enters through the ``now`` argument.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence, Union

from .chain import (
    Block,
    BlockGraph,
    ChainError,
    IncompleteGraph,
    Tx,
    ancestor_at,
    conflicts,
    filler_txs,
    finalize,
    outranks,
    tx_ids,
)
from .crypto import KeyPair, digest, PartialSig, ThresholdKeySet, select_collector, select_collector_weighted
from .messages import CertMsg, Message, Proposal, StateMsg, SyncRequest, SyncResponse, Vote, VoteCertificate

log = logging.getLogger(__name__)

TIMEOUT_CAP = 16

PROPOSE_TIMER = "p"
COLLECT_TIMER = "c"
SYNC_TIMER = "s"


def timeout_collect(i: int, delta: int, cap: int = TIMEOUT_CAP) -> int:
    """TO_c(i) = 2^i * delta, saturating at 2^cap * delta."""
    if i < 0:
        raise ValueError("round index must be non-negative")
    return (1 << min(i, cap)) * delta


def timeout_propose(i: int, delta: int, cap: int = TIMEOUT_CAP) -> int:
    """TO_p(i) = 2^i * 2 * delta, the sum of the collect and relay timeouts."""
    return 2 * timeout_collect(i, delta, cap)


def dur(h: int, h_prime: int, r_prime: int, delta_t_f: int, delta: int) -> int:
    """Least time needed to get from the start of height h to round (h', r')."""
    if h_prime < h or r_prime < 0:
        raise ValueError("dur needs h' >= h and r' >= 0")
    return (h_prime - h) * delta_t_f + ((1 << r_prime) - 1) * 2 * delta


@dataclass(frozen=True, order=True)
class RoundId:
    l: int
    v: int

    def __post_init__(self):
        if self.l < 0 or self.v < 0:
            raise ValueError("round ids are non-negative")


# ---------------------------------------------------------------- actions


@dataclass(frozen=True)
class SendTo:
    target: int
    message: Message


@dataclass(frozen=True)
class Broadcast:
    message: Message


@dataclass(frozen=True)
class SetTimer:
    kind: str
    rid: RoundId
    duration: int


@dataclass(frozen=True)
class FinalizeBlock:
    block: Block

    @property
    def hash(self) -> bytes:
        return self.block.hash


@dataclass(frozen=True)
class RequestSync:
    peer: int
    from_height: int
    message: SyncRequest


@dataclass(frozen=True)
class RecordEvidence:
    kind: str
    culprit: int
    detail: str


@dataclass(frozen=True)
class Note:
    """Trace-only record of an internal step; carries no protocol effect."""

    event: str
    detail: dict


OutputAction = Union[SendTo, Broadcast, SetTimer, FinalizeBlock, RequestSync, RecordEvidence, Note]


# ---------------------------------------------------------------- configuration


@dataclass(frozen=True)
class EngineParams:
    n: int
    f: int
    delta: int
    timeout_scale: int = 3
    delta_t_f: int | None = None
    state_period: int | None = None
    block_txs: int = 4
    all_to_all: bool = False
    weighted: bool = False

    @property
    def quorum(self) -> int:
        return self.n - self.f

    @property
    def timer_delta(self) -> int:
        """Base of the timeout schedule (Δ in the timeout formulas)."""
        return self.timeout_scale * self.delta

    @property
    def round_time(self) -> int:
        return self.delta_t_f if self.delta_t_f is not None else 3 * self.delta

    @property
    def period(self) -> int:
        return self.state_period if self.state_period is not None else self.n * self.delta


@dataclass
class EpochContext:
    """What every validator of one epoch shares: parameters, keys, anchor."""

    params: EngineParams
    keyset: ThresholdKeySet
    anchor: Block
    anchor_cert: VoteCertificate
    stakes: Sequence[int] = ()
    scripted_txs: Sequence[tuple[int, Tx]] = ()
    end_height: int | None = None
    prior_txs: frozenset[bytes] = frozenset()


# ---------------------------------------------------------------- state


@dataclass
class SyncState:
    cert: VoteCertificate
    target: RoundId
    peers: list[int]
    attempt: int = 0
    pending: list[Message] = field(default_factory=list)


@dataclass
class ValidatorState:
    me: int
    h: int
    r: int = 0
    r_prev: int = 0
    B: Block | None = None
    plocks: dict[int, Block] = field(default_factory=dict)
    vlocks: dict[int, Block] = field(default_factory=dict)
    vlock_time: dict[int, int] = field(default_factory=dict)
    certs: dict[bytes, VoteCertificate] = field(default_factory=dict)
    highest_cert: VoteCertificate | None = None
    voted: dict[tuple[int, int], bytes] = field(default_factory=dict)
    voted_blocks: dict[int, list[Block]] = field(default_factory=dict)
    proposed: set[tuple[int, int]] = field(default_factory=set)
    vote_pool: dict[tuple[int, int], dict[bytes, dict[int, PartialSig]]] = field(default_factory=dict)
    certified_rounds: set[tuple[int, int]] = field(default_factory=set)
    timers: set[tuple[str, int, int]] = field(default_factory=set)
    broadcast_flags: set[bytes] = field(default_factory=set)
    seen_proposals: dict[tuple[int, int, int], bytes] = field(default_factory=dict)
    state_reports: dict[int, StateMsg] = field(default_factory=dict)
    sync: SyncState | None = None
    sync_seq: int = 0
    finalized_head: int = 0
    final_txs: set[bytes] = field(default_factory=set)
    deferred_cert: VoteCertificate | None = None

    def vl(self, height: int) -> Block | None:
        return self.vlocks.get(height)


# ---------------------------------------------------------------- pure rules


def succeeds(cert: VoteCertificate, state: ValidatorState, graph: BlockGraph) -> bool:
    """Whether ``cert`` shows that its receiver has fallen behind.

    Raises IncompleteGraph when the certified block or its ancestry is unknown;
    the caller then fetches the missing blocks before deciding.
    """
    h = state.h
    x = graph.get(cert.block_hash)
    if x is None:
        raise IncompleteGraph("certified block is not stored")
    if x.height < h - 1:
        return False
    vl1 = state.vlocks[h - 1]
    anc = ancestor_at(x, h - 1, graph)
    if anc.hash != vl1.hash:
        # (iii): the chain through the certified block wins at h-1
        return may_switch(state, anc, vl1, x.height >= h)
    if x.height > h:
        return True  # (i)
    if x.height == h:
        # (ii): a certified block at h the validator did not vote for
        return not voted_for(state, x) and may_lock(state, x, cert.v)
    return False


def may_switch(state: ValidatorState, new: Block, old: Block, certified_child: bool) -> bool:
    """Whether the lock at h-1 may move from ``old`` to its sibling ``new``.

    A larger sibling the validator never voted for may take over.  A sibling
    with a certified child always may: two siblings can never both have
    certified children, so that child's parent is the only one that can
    still be finalized.
    """
    if new.prehash != old.prehash:
        return False
    return certified_child or (outranks(new, old) and not voted_for(state, new))


def may_lock(state: ValidatorState, x: Block, cert_round: int) -> bool:
    """Vote-lock guard: no vote for another block at x's height in a round
    after the one x was certified in."""
    return all(
        bh == x.hash for (l, v), bh in state.voted.items() if l == x.height and v > cert_round
    )


def voted_for(state: ValidatorState, x: Block) -> bool:
    return any(b.hash == x.hash for b in state.voted_blocks.get(x.height, []))


def check_lemma1(state: ValidatorState) -> bool:
    """Propose-lock and vote-lock never disagree at one height."""
    return all(state.plocks[l].hash == b.hash for l, b in state.vlocks.items() if l in state.plocks)


# ---------------------------------------------------------------- validator


class Validator:
    """One validator: its state, its block graph and the protocol handlers."""

    def __init__(self, ctx: EpochContext, key: KeyPair, now: int = 0):
        self.ctx = ctx
        self.params = ctx.params
        self.keyset = ctx.keyset
        self.key = key
        self.graph = BlockGraph(ctx.anchor)
        a = ctx.anchor
        s = ValidatorState(me=key.validator_index, h=a.height + 1, finalized_head=a.height)
        s.vlocks[a.height] = a
        s.plocks[a.height] = a
        s.vlock_time[a.height] = now
        s.certs[a.hash] = ctx.anchor_cert
        s.highest_cert = ctx.anchor_cert
        s.final_txs = set(ctx.prior_txs)
        self.state = s
        self.next_state_tick = now + self.params.period
        self._collectors: dict[tuple[bytes, int], int] = {}

    @property
    def me(self) -> int:
        return self.state.me

    # -------------------------------------------------------- helpers

    def collector(self, l: int, v: int) -> int | None:
        """C_{l,v}, or None when the seed block at l-2 is not locked locally."""
        a = self.ctx.anchor.height
        if l <= a + 1:
            return (l + v) % self.params.n
        seed = self.state.vlocks.get(l - 2)
        if seed is None:
            return None
        cached = self._collectors.get((seed.hash, v))
        if cached is not None:
            return cached
        cert = self.state.certs.get(seed.hash)
        if cert is None:
            return None
        # every cert for one block carries the same signature; fixing the
        # round to the block's own round makes the seed identical everywhere
        norm = VoteCertificate(seed.height, seed.round, seed.hash, cert.ts)
        if self.params.weighted:
            c = select_collector_weighted(norm, v, self.ctx.stakes)
        else:
            c = select_collector(norm, v, self.params.n)
        self._collectors[(seed.hash, v)] = c
        return c

    def _timer(self, kind: str, l: int, v: int, duration: int) -> SetTimer:
        self.state.timers.add((kind, l, v))
        return SetTimer(kind, RoundId(l, v), duration)

    def _can_vote(self, l: int, block: Block) -> bool:
        s = self.state
        if l == s.h:
            return block.height == l and block.prehash == s.vlocks[l - 1].hash
        if l == s.h - 1:
            return block.hash == s.vlocks[l].hash
        return False

    def _send_vote(self, l: int, v: int, block: Block) -> list[OutputAction]:
        s = self.state
        if (l, v) in s.voted or not self._can_vote(l, block):
            return []
        s.voted[(l, v)] = block.hash
        s.voted_blocks.setdefault(l, []).append(block)
        vote = Vote.make(self.key, self.keyset, l, v, block.hash, s.highest_cert)
        if self.params.all_to_all:
            return [Broadcast(vote)]
        c = self.collector(l, v)
        return [] if c is None else [SendTo(c, vote)]

    def _refresh_highest(self) -> None:
        s = self.state
        best = s.certs.get(s.vlocks[s.h - 1].hash)
        pl = s.plocks.get(s.h)
        if pl is not None and pl.hash in s.certs:
            cand = s.certs[pl.hash]
            if best is None or cand.rank > best.rank:
                best = cand
        if best is not None:
            s.highest_cert = best

    def _record_cert(self, cert: VoteCertificate) -> None:
        """Remember a verified certificate and apply the propose-lock rule."""
        s = self.state
        known = s.certs.get(cert.block_hash)
        if known is None or cert.v > known.v:
            s.certs[cert.block_hash] = cert
        x = self.graph.get(cert.block_hash)
        if x is not None and x.height == s.h and x.prehash == s.vlocks[s.h - 1].hash:
            cur = s.plocks.get(s.h)
            if cur is None or (cur.hash != x.hash and (outranks(x, cur) or cur.hash not in s.certs)):
                s.plocks[s.h] = x
        # a later-round certificate for a locked block also refreshes the
        # one reported in State messages
        self._refresh_highest()

    def _fresh_block(self, l: int, v: int, parent_hash: bytes) -> Block:
        s = self.state
        used = set(s.final_txs)
        cur = self.graph.get(parent_hash)
        while cur is not None and cur.height > s.finalized_head:
            used |= tx_ids([cur])
            cur = self.graph.get(cur.prehash)
        txs = [tx for hmin, tx in self.ctx.scripted_txs if hmin <= l and digest(tx.encode()) not in used]
        txs.extend(filler_txs(self.params.block_txs, (self.ctx.anchor.height, l, v, s.me)))
        return Block(height=l, round=v, prehash=parent_hash, proposer=s.me, txs=tuple(txs))

    def _finalize_upto(self, height: int) -> list[OutputAction]:
        s = self.state
        if self.ctx.end_height is not None:
            height = min(height, self.ctx.end_height)
        if height <= s.finalized_head:
            return []
        newly = finalize(s.vlocks[height], self.graph)
        s.finalized_head = self.graph.finalized_head
        s.final_txs |= tx_ids(newly)
        return [FinalizeBlock(b) for b in newly]

    def _gc(self) -> None:
        s = self.state
        low = s.h - 1
        for table in (s.vote_pool, s.voted):
            for key in [k for k in table if k[0] < low]:
                del table[key]
        for key in [k for k in s.seen_proposals if k[0] < low]:
            del s.seen_proposals[key]
        for key in [k for k in s.voted_blocks if k < low]:
            del s.voted_blocks[key]
        s.certified_rounds = {k for k in s.certified_rounds if k[0] >= low}
        s.proposed = {k for k in s.proposed if k[0] >= low}

    def _dur_ok(self, l: int, v: int, now: int) -> bool:
        s = self.state
        base = max(s.h - 2, self.ctx.anchor.height)
        need = dur(base, max(l, base), v, self.params.round_time, self.params.timer_delta)
        return now - s.vlock_time[base] >= need

    # -------------------------------------------------------- procedures

    def start(self, now: int) -> list[OutputAction]:
        """Enter the first round after the anchor; its leader proposes."""
        s = self.state
        acts = self._enter_prepare(s.h, 0, None, now)
        if self.collector(s.h - 1, 0) == s.me:
            acts += self.enter_propose(s.h, 0, now, cert=self.ctx.anchor_cert)
        return acts

    def _enter_prepare(self, l: int, v: int, block: Block | None, now: int) -> list[OutputAction]:
        s = self.state
        acts: list[OutputAction] = []
        if l == s.h:
            acts.append(Note("round", {"l": l, "v": v}))
        if block is not None:
            acts += self._send_vote(l, v, block)
        td = self.params.timer_delta
        acts.append(self._timer(PROPOSE_TIMER, l, v, timeout_propose(v, td)))
        if self.collector(l, v) == s.me:
            acts.append(self._timer(COLLECT_TIMER, l, v, timeout_collect(v, td)))
        return acts

    def enter_propose(self, l: int, v: int, now: int, cert: VoteCertificate | None = None) -> list[OutputAction]:
        """Broadcast at most one proposal for R_{l,v}.

        Round 0 proposals carry the certificate just formed for height l-1 and
        extend its block; later rounds carry the highest certificate.  A
        propose-locked block is always proposed again instead of a new one.
        """
        s = self.state
        if (l, v) in s.proposed or not s.h - 1 <= l <= s.h + 1:
            return []
        if v == 0:
            if cert is None:
                return []
            parent_hash = cert.block_hash
            blk = s.plocks.get(l)
            if blk is None or blk.prehash != parent_hash:
                blk = self._fresh_block(l, v, parent_hash)
        else:
            cert = s.highest_cert
            if l == s.h - 1:
                blk = s.vlocks[l]
            elif l == s.h:
                blk = s.plocks.get(l)
                if blk is None or blk.prehash != s.vlocks[l - 1].hash:
                    blk = self._fresh_block(l, v, s.vlocks[l - 1].hash)
            else:
                return []
        s.proposed.add((l, v))
        prop = Proposal.make(self.key, l, v, blk, cert)
        return [Note("propose", {"l": l, "v": v, "block": blk.hash.hex()[:16]}), Broadcast(prop)]

    def _advance(self, x: Block, nxt: Block, cert_v: int, now: int) -> list[OutputAction]:
        """Pipeline step: x is certified at h, nxt extends it at h+1."""
        s = self.state
        h = s.h
        s.vlocks[h] = x
        s.plocks[h] = x
        s.vlock_time[h] = now
        s.r_prev = s.r
        s.h = h + 1
        s.r = 0
        s.B = nxt
        s.plocks[h + 1] = nxt
        self._refresh_highest()
        acts: list[OutputAction] = [Note("advance", {"h": s.h, "via": "proposal", "cert_v": cert_v})]
        acts += self._finalize_upto(s.h - 2)
        self._gc()
        return acts + self._enter_prepare(s.h, 0, nxt, now)

    def _install(self, x: Block, now: int, tip: Block | None = None, target: RoundId | None = None) -> list[OutputAction] | None:
        """Adopt the certified chain ending at x, subject to the lock rules.

        Returns None when nothing may change.  Raises IncompleteGraph when a
        block or certificate on the chain is missing locally.
        """
        s, g = self.state, self.graph
        h = s.h
        if x.height < h - 1:
            return None
        lo = max(self.ctx.anchor.height, h - 2)
        chain = {i: ancestor_at(x, i, g) for i in range(lo, x.height + 1)}
        if h - 2 >= lo and chain[h - 2].hash != s.vlocks[h - 2].hash:
            return None
        old = s.vlocks[h - 1]
        changed = chain[h - 1].hash != old.hash
        if changed and not may_switch(s, chain[h - 1], old, x.height >= h):
            return None
        top = x.height
        for i in range(h - 1, x.height + 1):
            if chain[i].hash not in s.certs:
                raise IncompleteGraph(f"no certificate for height {i}")
        # a block with a certified child is the only one at its height that
        # can still be finalized, so the vote-lock guard only gates the top
        if x.height >= h and not may_lock(s, x, s.certs[x.hash].v):
            top -= 1
        if top < h - 1 or (top == h - 1 and not changed):
            return None
        for i in range(h - 1, top + 1):
            if i == h - 1 and not changed:
                continue
            s.vlocks[i] = chain[i]
            s.plocks[i] = chain[i]
            s.vlock_time[i] = now
        acts: list[OutputAction] = []
        if top == h - 1:
            # only the lock at h-1 moved to a larger sibling
            s.B = None
            s.plocks.pop(h, None)
            if tip is not None and tip.height == h and tip.prehash == chain[h - 1].hash:
                g.add(tip)
                s.B = tip
                s.plocks[h] = tip
            self._refresh_highest()
            return [Note("relock", {"l": h - 1, "block": chain[h - 1].hash.hex()[:16]})]
        s.r_prev = s.r if top == h else 0
        s.h = top + 1
        s.r = target.v if target is not None and target.l == s.h else 0
        s.B = None
        for i in [k for k in s.plocks if k >= s.h]:
            del s.plocks[i]
        if tip is not None and tip.height == s.h and tip.prehash == s.vlocks[s.h - 1].hash:
            g.add(tip)
            s.B = tip
            s.plocks[s.h] = tip
        self._refresh_highest()
        acts.append(Note("advance", {"h": s.h, "via": "sync"}))
        acts += self._finalize_upto(s.h - 2)
        self._gc()
        return acts + self._enter_prepare(s.h, s.r, s.B, now)

    def _catch_up(self, cert: VoteCertificate, msg: Message | None, peer: int | None, target: RoundId, now: int) -> list[OutputAction] | None:
        """Handle a certificate that may show this validator is behind.

        Returns None when the message should be processed normally, otherwise
        the actions taken (the message is re-handled or parked until a
        synchronization completes).
        """
        s = self.state
        x = self.graph.get(cert.block_hash)
        if x is None:
            if cert.l >= s.h - 1:
                return self.synchronize(cert, target, peer, msg, now)
            return None
        try:
            if not succeeds(cert, s, self.graph):
                return None
            acts = self._install(x, now, target=target)
        except IncompleteGraph:
            return self.synchronize(cert, target, peer, msg, now)
        if acts is None:
            return None
        if msg is not None:
            acts += self.handle(msg, now)
        return acts

    def synchronize(self, cert: VoteCertificate, target: RoundId, peer: int | None, msg: Message | None, now: int) -> list[OutputAction]:
        """Fetch the chain behind ``cert``, parking ``msg`` until it arrives."""
        s = self.state
        if s.sync is not None and cert.rank <= s.sync.cert.rank:
            if msg is not None and len(s.sync.pending) < 8:
                s.sync.pending.append(msg)
            return []
        pending = s.sync.pending if s.sync is not None else []
        if msg is not None:
            pending = (pending + [msg])[-8:]
        n = self.params.n
        first = [peer] if peer is not None and peer != s.me else []
        peers = first + [(s.me + k) % n for k in range(1, n) if (s.me + k) % n not in first]
        s.sync_seq += 1
        s.sync = SyncState(cert, target, peers, 0, pending)
        return self._sync_send(now)

    def _sync_send(self, now: int) -> list[OutputAction]:
        s = self.state
        sy = s.sync
        peer = sy.peers[sy.attempt]
        lo = max(self.ctx.anchor.height + 1, s.h - 1)
        req = SyncRequest.make(self.key, lo, sy.cert.block_hash)
        return [
            Note("sync_request", {"peer": peer, "from": lo, "cert_l": sy.cert.l}),
            RequestSync(peer, lo, req),
            self._timer(SYNC_TIMER, s.sync_seq, sy.attempt, 2 * self.params.timer_delta),
        ]

    def _sync_next_peer(self, now: int) -> list[OutputAction]:
        s = self.state
        s.sync.attempt += 1
        if s.sync.attempt >= len(s.sync.peers):
            s.sync = None
            return [Note("sync_abandoned", {})]
        return self._sync_send(now)

    # -------------------------------------------------------- handlers

    def handle(self, msg: Message, now: int) -> list[OutputAction]:
        acts = self._dispatch(msg, now)
        return acts + self._deferred_propose(now)

    def _deferred_propose(self, now: int) -> list[OutputAction]:
        # a collector can certify a block before it has reached that height;
        # its round-0 proposal waits until it has the block and the height
        s = self.state
        c = s.deferred_cert
        if c is None or c.l > s.h or c.block_hash not in self.graph:
            return []
        s.deferred_cert = None
        return self.enter_propose(c.l + 1, 0, now, cert=c)

    def _dispatch(self, msg: Message, now: int) -> list[OutputAction]:
        if isinstance(msg, Proposal):
            return self.on_proposal(msg, now)
        if isinstance(msg, Vote):
            return self.on_vote(msg, now)
        if isinstance(msg, CertMsg):
            if not msg.verify_sender(self.keyset):
                return [RecordEvidence("bad-signature", msg.sender, "cert message")]
            return self.on_cert(msg.cert, now, peer=msg.sender)
        if isinstance(msg, StateMsg):
            return self.on_state_msg(msg, now)
        if isinstance(msg, SyncRequest):
            return self.on_sync_request(msg, now)
        if isinstance(msg, SyncResponse):
            return self.on_sync_response(msg, now)
        raise TypeError(f"unknown message {msg!r}")

    def on_proposal(self, p: Proposal, now: int) -> list[OutputAction]:
        s, ks = self.state, self.keyset
        if not (p.verify_sender(ks) and p.cert.verify(ks) and ks.verify_signature(p.sender, p.cert.encode(), p.cert_endorsement)):
            return [RecordEvidence("invalid-proposal", p.sender, f"l={p.l} v={p.v}")]
        if p.block.height != p.l or p.block.round > p.v:
            return [RecordEvidence("malformed-proposal", p.sender, f"l={p.l} v={p.v}")]
        if p.v == 0 and (p.cert.l != p.l - 1 or p.block.prehash != p.cert.block_hash):
            return [RecordEvidence("malformed-proposal", p.sender, f"l={p.l} v=0 does not extend its cert")]
        if p.l < s.h - 1:
            return []
        key = (p.l, p.v, p.sender)
        seen = s.seen_proposals.get(key)
        if seen is not None and seen != p.block.hash:
            return [RecordEvidence("equivocation", p.sender, f"two blocks for l={p.l} v={p.v}")]
        s.seen_proposals[key] = p.block.hash
        expected = self.collector(p.l - 1, p.cert.v) if p.v == 0 else self.collector(p.l, p.v - 1)
        if expected is not None and expected != p.sender:
            return [RecordEvidence("wrong-proposer", p.sender, f"l={p.l} v={p.v} expected {expected}")]
        self._record_cert(p.cert)
        acts = self._catch_up(p.cert, p, p.sender, RoundId(p.l, p.v), now)
        if acts is not None:
            return acts
        x = self.graph.get(p.cert.block_hash)
        if x is None or conflicts(x, s.vlocks[s.h - 1], self.graph):
            return []
        return self._handle_proposal(p, now)

    def _handle_proposal(self, p: Proposal, now: int) -> list[OutputAction]:
        s, g = self.state, self.graph
        h = s.h
        if p.l == h + 1 and p.v == 0 and p.cert.l == h:
            # (a) certificate for height h: lock, move on, vote at h+1
            x = g.get(p.cert.block_hash)
            if x is None or x.prehash != s.vlocks[h - 1].hash:
                return []
            if not may_lock(s, x, p.cert.v):
                return []
            g.add(p.block)
            return self._advance(x, p.block, p.cert.v, now)
        if p.l == h and (p.v == s.r + 1 or (p.v == s.r and (h, s.r) not in s.voted)):
            # (b) a new round at the current height; proposals never unlock
            if p.block.prehash != s.vlocks[h - 1].hash:
                return []
            g.add(p.block)
            s.r = p.v
            s.B = p.block
            s.plocks.setdefault(h, p.block)
            return self._enter_prepare(h, s.r, p.block, now)
        if p.l == h and p.v > s.r and s.B is None and p.block.prehash == s.vlocks[h - 1].hash:
            # a later round's block gives a validator that has none something
            # to vote for when its own round changes; the round stays put
            g.add(p.block)
            s.B = p.block
            s.plocks.setdefault(h, p.block)
            return [Note("adopt", {"l": h, "v": p.v})]
        if p.l == h - 1 and p.v == s.r_prev + 1:
            # (c) help finish the previous height, only for the locked block
            if p.block.hash != s.vlocks[h - 1].hash:
                return []
            s.r_prev = p.v
            return self._enter_prepare(h - 1, p.v, s.vlocks[h - 1], now)
        return []

    def on_vote(self, vt: Vote, now: int) -> list[OutputAction]:
        s, ks = self.state, self.keyset
        part = vt.block_partial
        if not (vt.verify_sender(ks) and part.signer == vt.sender and ks.verify_partial(part) and vt.cert.verify(ks)):
            return [RecordEvidence("invalid-vote", vt.sender, f"l={vt.l} v={vt.v}")]
        if vt.l < s.h - 1 or (vt.l, vt.v) in s.certified_rounds:
            return []
        c = self.collector(vt.l, vt.v)
        if c is not None and c != s.me:
            return []
        acts: list[OutputAction] = []
        x = self.graph.get(vt.cert.block_hash)
        try:
            future = vt.cert.l >= s.h if x is None else succeeds(vt.cert, s, self.graph)
        except IncompleteGraph:
            future = True
        if future:
            if not self._dur_ok(vt.l, vt.v, now):
                return [Note("vote_rejected", {"l": vt.l, "v": vt.v, "from": vt.sender})]
            if c == s.me and vt.cert.block_hash not in s.broadcast_flags:
                s.broadcast_flags.add(vt.cert.block_hash)
                acts.append(Note("cert_broadcast", {"l": vt.cert.l, "v": vt.cert.v}))
                acts.append(Broadcast(CertMsg.make(self.key, vt.cert)))
            more = self._catch_up(vt.cert, vt, vt.sender, RoundId(vt.l, vt.v), now)
            if more is not None:
                return acts + more
        elif x is None or conflicts(x, s.vlocks[s.h - 1], self.graph):
            return acts
        return acts + self._pool_vote(vt, now)

    def _pool_vote(self, vt: Vote, now: int) -> list[OutputAction]:
        s = self.state
        key = (vt.l, vt.v)
        if vt.l < s.h - 1 or key in s.certified_rounds:
            return []
        pool = s.vote_pool.setdefault(key, {}).setdefault(vt.block_hash, {})
        if vt.sender in pool:
            return []
        pool[vt.sender] = vt.block_partial
        if len(pool) < self.params.quorum:
            return []
        cert = VoteCertificate(vt.l, vt.v, vt.block_hash, self.keyset.aggregate(pool.values()))
        s.certified_rounds.add(key)
        self._record_cert(cert)
        acts: list[OutputAction] = [Note("cert", {"l": vt.l, "v": vt.v})]
        if vt.l > s.h or vt.block_hash not in self.graph:
            s.deferred_cert = cert
            return acts
        return acts + self.enter_propose(vt.l + 1, 0, now, cert=cert)

    def on_cert(self, c: VoteCertificate, now: int, peer: int | None = None) -> list[OutputAction]:
        if not c.verify(self.keyset):
            return [RecordEvidence("invalid-cert", -1 if peer is None else peer, f"l={c.l} v={c.v}")]
        self._record_cert(c)
        return self._catch_up(c, None, peer, RoundId(c.l + 1, 0), now) or []

    def on_timer(self, kind: str, rid: RoundId, now: int) -> list[OutputAction]:
        s = self.state
        key = (kind, rid.l, rid.v)
        if key not in s.timers:
            return []
        s.timers.discard(key)
        if kind == PROPOSE_TIMER:
            if rid.l == s.h and rid.v == s.r:
                s.r += 1
                return self._enter_prepare(s.h, s.r, s.B, now)
            if rid.l == s.h - 1 and rid.v == s.r_prev:
                s.r_prev += 1
                return self._enter_prepare(rid.l, s.r_prev, s.vlocks[rid.l], now)
            return []
        if kind == COLLECT_TIMER:
            if (rid.l, rid.v) in s.certified_rounds or rid.l < s.h - 1:
                return []
            return self.enter_propose(rid.l, rid.v + 1, now)
        if kind == SYNC_TIMER:
            if s.sync is not None and rid.l == s.sync_seq and rid.v == s.sync.attempt:
                return self._sync_next_peer(now)
            return []
        raise ValueError(f"unknown timer kind {kind!r}")

    def on_state_msg(self, sm: StateMsg, now: int) -> list[OutputAction]:
        s, ks = self.state, self.keyset
        if not (sm.verify_sender(ks) and sm.cert.verify(ks)):
            return [RecordEvidence("invalid-state", sm.sender, f"l={sm.l} v={sm.v}")]
        prev = s.state_reports.get(sm.sender)
        if prev is None or (sm.l, sm.v) >= (prev.l, prev.v):
            s.state_reports[sm.sender] = sm
        self._record_cert(sm.cert)
        acts = self._catch_up(sm.cert, None, sm.sender, RoundId(sm.l, sm.v), now)
        if acts is not None:
            return acts
        h, q = s.h, self.params.quorum
        reports = [s.state_reports[i] for i in sorted(s.state_reports)]
        same: dict[bytes, int] = {}
        for rep in reports:
            if rep.cert.l == h:
                same[rep.cert.block_hash] = same.get(rep.cert.block_hash, 0) + 1
        for bh in sorted(same):
            x = self.graph.get(bh)
            if same[bh] >= q and x is not None:
                try:
                    moved = self._install(x, now)
                except IncompleteGraph:
                    moved = None
                if moved is not None:
                    return moved
        larger = sorted(rep.v for rep in reports if rep.l == h and rep.v > s.r)
        if len(larger) >= q:
            s.r = larger[0]
            return [Note("round_jump", {"l": h, "v": s.r})] + self._enter_prepare(h, s.r, s.B, now)
        return []

    def emit_state_tick(self, now: int) -> list[OutputAction]:
        """Broadcast the periodic State message once per elapsed period."""
        if now < self.next_state_tick:
            return []
        period = self.params.period
        self.next_state_tick += period * ((now - self.next_state_tick) // period + 1)
        s = self.state
        return [Broadcast(StateMsg.make(self.key, s.highest_cert, s.h, s.r))]

    def on_sync_request(self, req: SyncRequest, now: int) -> list[OutputAction]:
        s, g = self.state, self.graph
        if not req.verify_sender(self.keyset):
            return [RecordEvidence("bad-signature", req.sender, "sync request")]
        top = g.get(req.want)
        if top is None or top.height < self.ctx.anchor.height:
            top = s.vlocks[s.h - 1]
        lo = max(req.from_height, self.ctx.anchor.height + 1)
        blocks = [ancestor_at(top, i, g) for i in range(lo, top.height + 1)]
        certs = [s.certs.get(b.hash) for b in blocks]
        tip = s.B if s.B is not None and s.B.prehash == top.hash else None
        resp = SyncResponse.make(self.key, blocks, certs, tip, s.h, s.r)
        return [SendTo(req.sender, resp)]

    def on_sync_response(self, resp: SyncResponse, now: int) -> list[OutputAction]:
        s, g, ks = self.state, self.graph, self.keyset
        if not resp.verify_sender(ks):
            return [RecordEvidence("bad-signature", resp.sender, "sync response")]
        sy = s.sync
        if sy is None or resp.sender != sy.peers[sy.attempt]:
            return []
        for blk, cert in zip(resp.blocks, resp.certs):
            if cert is not None and (cert.block_hash != blk.hash or cert.l != blk.height or not cert.verify(ks)):
                return [RecordEvidence("bad-sync", resp.sender, "certificate does not match block")] + self._sync_next_peer(now)
            try:
                g.add(blk)
            except IncompleteGraph:
                continue
            except ChainError:
                break
            if cert is not None:
                self._record_cert(cert)
        x = g.get(sy.cert.block_hash)
        if x is None:
            return self._sync_next_peer(now)
        tip = resp.tip
        if tip is not None and (tip.prehash not in g or tip.height != g.get(tip.prehash).height + 1):
            tip = None
        try:
            ahead = succeeds(sy.cert, s, g)
            acts = self._install(x, now, tip=tip, target=sy.target) if ahead else []
        except IncompleteGraph:
            return self._sync_next_peer(now)
        s.sync = None
        acts = [Note("sync_done", {"h": s.h, "peer": resp.sender})] + (acts or [])
        for m in sy.pending:
            acts += self.handle(m, now)
        return acts
