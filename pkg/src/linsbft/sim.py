"""Seeded discrete-event network simulator with partial synchrony and faults.

Time is an integer tick count.  Events are ordered by (fire_time, seq) where
seq is a global insertion counter, so a run is a pure function of its inputs.
"""
from __future__ import annotations

import heapq
import json
import random
from dataclasses import dataclass, field
from typing import Callable, Iterable

from .chain import Block, SafetyViolation, Tx, TxKind
from .engine import (
    Broadcast,
    FinalizeBlock,
    Note,
    RecordEvidence,
    RequestSync,
    RoundId,
    SendTo,
    SetTimer,
    Validator,
)
from .faults import Crash, Equivocate, FaultSchedule, FutureVoteSpam, SelectiveSend, Silent
from .messages import CertMsg, Proposal, StateMsg, SyncRequest, SyncResponse, Vote


MSG_KIND = {
    Proposal: "propose",
    Vote: "vote",
    CertMsg: "cert",
    StateMsg: "state",
    SyncRequest: "sync_req",
    SyncResponse: "sync_resp",
}


@dataclass(frozen=True)
class DropRule:
    """Scripted loss: drops messages matching every given field."""

    kind: str | None = None
    l: int | None = None
    v: int | None = None
    sender: int | None = None
    target: int | None = None

    def matches(self, kind: str, msg, sender: int, target: int) -> bool:
        if self.kind is not None and self.kind != kind:
            return False
        if self.sender is not None and self.sender != sender:
            return False
        if self.target is not None and self.target != target:
            return False
        l = getattr(msg, "l", None)
        v = getattr(msg, "v", None)
        if isinstance(msg, CertMsg):
            l, v = msg.cert.l, msg.cert.v
        if self.l is not None and self.l != l:
            return False
        return self.v is None or self.v == v


@dataclass
class DelayModel:
    """Post-GST delay is uniform in [1, delta]; before GST the policy applies."""

    gst: int
    delta: int
    pre_gst_max: int | None = None
    drop_prob: float = 0.1
    reorder: bool = False
    drops: list[DropRule] = field(default_factory=list)

    def __post_init__(self):
        if self.pre_gst_max is None:
            self.pre_gst_max = 20 * self.delta


def deliver(model: DelayModel, rng: random.Random, send_time: int, sender_honest: bool = True) -> int | None:
    """Delivery time of a message sent at ``send_time``, or None if dropped."""
    if send_time >= model.gst:
        return send_time + rng.randint(1, model.delta)
    if rng.random() < model.drop_prob:
        return None
    if model.reorder:
        # late messages overtake early ones often enough to break FIFO
        return send_time + rng.choice((0, model.pre_gst_max))
    return send_time + rng.randint(0, model.pre_gst_max)


@dataclass
class MessageMeter:
    """Honest, post-GST, non-self traffic."""

    gst: int
    count: int = 0
    bytes: int = 0
    by_kind: dict[str, int] = field(default_factory=dict)
    by_height: dict[int, int] = field(default_factory=dict)
    bytes_by_height: dict[int, int] = field(default_factory=dict)

    def record(self, now: int, msg) -> None:
        if now < self.gst:
            return
        kind = MSG_KIND[type(msg)]
        size = msg.wire_size
        height = msg.fault_height()
        self.count += 1
        self.bytes += size
        self.by_kind[kind] = self.by_kind.get(kind, 0) + 1
        self.by_height[height] = self.by_height.get(height, 0) + 1
        self.bytes_by_height[height] = self.bytes_by_height.get(height, 0) + size


@dataclass
class Violation:
    kind: str
    time: int
    validator: int
    detail: str


class Trace:
    """Line-delimited {time, actor, event, detail} records."""

    def __init__(self, enabled: bool = True):
        self.enabled = enabled
        self.records: list[tuple[int, int, str, dict]] = []

    def add(self, time: int, actor: int, event: str, detail: dict) -> None:
        if self.enabled:
            self.records.append((time, actor, event, detail))

    def lines(self) -> Iterable[str]:
        for time, actor, event, detail in self.records:
            yield json.dumps({"time": time, "actor": actor, "event": event, "detail": detail}, sort_keys=False)

    def dump(self, path) -> None:
        with open(path, "w") as fh:
            for line in self.lines():
                fh.write(line + "\n")

    def text(self) -> str:
        return "".join(line + "\n" for line in self.lines())


class LockChecker:
    """Online checks of the three lock lemmas after every transition."""

    def __init__(self, n: int, anchor_height: int):
        self.anchor = anchor_height
        self.frozen: list[dict[int, bytes]] = [{} for _ in range(n)]
        self.frozen_upto = [anchor_height - 1] * n
        self.agreed: dict[int, tuple[bytes, int]] = {}
        self.checks = 0

    def check(self, v: Validator) -> list[str]:
        s = v.state
        i = s.me
        out = []
        self.checks += 1
        for l in (s.h - 2, s.h - 1, s.h):
            if l in s.plocks and l in s.vlocks and s.plocks[l].hash != s.vlocks[l].hash:
                out.append(f"lemma1: plock/vlock differ at height {l}")
        frozen = self.frozen[i]
        for l in range(self.frozen_upto[i] + 1, s.h - 1):
            blk = s.vlocks.get(l)
            if blk is None:
                out.append(f"lemma2: no vote-lock at height {l} below h-1")
                continue
            frozen[l] = blk.hash
            first = self.agreed.setdefault(l, (blk.hash, i))
            if first[0] != blk.hash:
                out.append(f"lemma3: vote-lock at {l} differs from validator {first[1]}")
        self.frozen_upto[i] = max(self.frozen_upto[i], s.h - 2)
        for l in range(max(self.anchor, s.h - 4), s.h - 1):
            blk = s.vlocks.get(l)
            if l in frozen and (blk is None or blk.hash != frozen[l]):
                out.append(f"lemma2: vote-lock at {l} changed after it became permanent")
        return out


@dataclass
class SimStats:
    finalized: dict[int, dict[int, bytes]] = field(default_factory=dict)
    finalize_time: dict[int, dict[int, int]] = field(default_factory=dict)
    certs_formed: list[tuple[int, int, int, int]] = field(default_factory=list)
    cert_broadcasts: list[tuple[int, int, int]] = field(default_factory=list)
    round_entries: list[tuple[int, int, int, int]] = field(default_factory=list)
    advances: list[tuple[int, int, int, str, int]] = field(default_factory=list)
    pipeline_ok: int = 0
    pipeline_bad: int = 0
    evidence: list[tuple[int, int, str, int]] = field(default_factory=list)
    syncs: int = 0


class Simulation:
    """Runs a set of validators over the network model."""

    def __init__(
        self,
        validators: list[Validator],
        delay: DelayModel,
        faults: FaultSchedule,
        seed: int,
        start_time: int = 0,
        trace: Trace | None = None,
        check_locks: bool = True,
    ):
        self.validators = validators
        self.n = len(validators)
        self.delay = delay
        self.faults = faults
        self.rng = random.Random(f"net:{seed}")
        self.adv_rng = random.Random(f"adv:{seed}")
        self.now = start_time
        self.start_time = start_time
        self.trace = trace or Trace(enabled=False)
        self.meter = MessageMeter(delay.gst)
        self.stats = SimStats(finalized={i: {} for i in range(self.n)}, finalize_time={i: {} for i in range(self.n)})
        self.violations: list[Violation] = []
        self.checker = LockChecker(self.n, validators[0].ctx.anchor.height) if check_locks else None
        self.dead = [False] * self.n
        self.global_final: dict[int, bytes] = {}
        self._queue: list = []
        self._seq = 0
        self._equivocated: dict[tuple[int, int, int], Proposal] = {}
        self._started = False

    # ------------------------------------------------------------ queue

    def _push(self, time: int, event: tuple) -> None:
        heapq.heappush(self._queue, (time, self._seq, event))
        self._seq += 1

    def start(self) -> None:
        if self._started:
            return
        self._started = True
        for v in self.validators:
            self._check_crash(v.me)
            if not self.dead[v.me]:
                self._execute(v.me, v.start(self.now))
            self._push(v.next_state_tick, ("tick", v.me))
        for spec in self.faults.spammers():
            self._push(self.now + self.delay.delta, ("spam", spec.validator))

    # ------------------------------------------------------------ faults

    def _check_crash(self, i: int) -> None:
        at = self.faults.crash_height(i)
        if at is not None and not self.dead[i] and self.validators[i].state.h >= at:
            self.dead[i] = True
            self.trace.add(self.now, i, "crash", {"h": self.validators[i].state.h})

    def honest(self, i: int, height: int) -> bool:
        return not self.dead[i] and self.faults.behavior(i, height) is None

    def _targets(self, i: int, behavior, dst: list[int], height: int) -> list[int]:
        if isinstance(behavior, SelectiveSend):
            allowed = behavior.targets
            if allowed is None:
                honest = self.faults.honest_at(height)
                allowed = tuple(honest[: len(honest) // 2])
            return [d for d in dst if d in allowed]
        return dst

    def _alternate(self, p: Proposal) -> Proposal:
        key = (p.l, p.v, p.sender)
        alt = self._equivocated.get(key)
        if alt is None:
            extra = Tx(TxKind.TRANSFER, 0, b"equivocation:" + p.block.hash)
            blk = Block(p.block.height, p.block.round, p.block.prehash, p.block.proposer, p.block.txs + (extra,))
            alt = Proposal.make(self.validators[p.sender].key, p.l, p.v, blk, p.cert)
            self._equivocated[key] = alt
        return alt

    # ------------------------------------------------------------ sending

    def _send(self, src: int, dsts: list[int], msg) -> None:
        height = msg.fault_height()
        behavior = self.faults.behavior(src, height)
        if isinstance(behavior, Crash):
            return
        if isinstance(behavior, Silent):
            return
        dsts = self._targets(src, behavior, dsts, height)
        if isinstance(behavior, Equivocate) and isinstance(msg, Proposal):
            others = [d for d in dsts if d != src]
            half = len(others) // 2
            alt = self._alternate(msg)
            # the first validator of the second half sees both versions
            self._route(src, [d for d in dsts if d == src] + others[: half + 1], msg, behavior is None)
            self._route(src, others[half:], alt, False)
            return
        self._route(src, dsts, msg, behavior is None)

    def _route(self, src: int, dsts: list[int], msg, honest: bool) -> None:
        kind = MSG_KIND[type(msg)]
        for dst in dsts:
            if dst == src:
                self._push(self.now, ("msg", dst, src, msg))
                continue
            if honest:
                self.meter.record(self.now, msg)
            if self.delay.drops and any(r.matches(kind, msg, src, dst) for r in self.delay.drops):
                continue
            at = deliver(self.delay, self.rng, self.now, honest)
            if at is not None:
                self._push(at, ("msg", dst, src, msg))

    def _execute(self, i: int, actions) -> None:
        for act in actions:
            if isinstance(act, SendTo):
                self._send(i, [act.target], act.message)
            elif isinstance(act, Broadcast):
                self._send(i, list(range(self.n)), act.message)
            elif isinstance(act, SetTimer):
                self._push(self.now + act.duration, ("timer", i, act.kind, act.rid))
            elif isinstance(act, RequestSync):
                self.stats.syncs += 1
                self._send(i, [act.peer], act.message)
            elif isinstance(act, FinalizeBlock):
                self._on_finalize(i, act.block)
            elif isinstance(act, RecordEvidence):
                self.stats.evidence.append((self.now, i, act.kind, act.culprit))
                self.trace.add(self.now, i, "evidence", {"kind": act.kind, "culprit": act.culprit, "detail": act.detail})
            elif isinstance(act, Note):
                self._on_note(i, act)

    def _on_note(self, i: int, note: Note) -> None:
        d = note.detail
        if note.event == "cert":
            self.stats.certs_formed.append((self.now, i, d["l"], d["v"]))
        elif note.event == "cert_broadcast":
            if self.honest(i, d["l"]):
                self.stats.cert_broadcasts.append((self.now, i, d["l"]))
        elif note.event == "round":
            self.stats.round_entries.append((self.now, i, d["l"], d["v"]))
        elif note.event == "advance":
            self.stats.advances.append((self.now, i, d["h"], d["via"], d.get("cert_v", -1)))
        self.trace.add(self.now, i, note.event, d)

    def _on_finalize(self, i: int, blk: Block) -> None:
        self.stats.finalized[i][blk.height] = blk.hash
        self.stats.finalize_time[i][blk.height] = self.now
        self.trace.add(self.now, i, "finalize", {"height": blk.height, "hash": blk.hash.hex()})
        known = self.global_final.setdefault(blk.height, blk.hash)
        if known != blk.hash:
            self._violate("safety", i, f"conflicting finalization at height {blk.height}")
        # 2-chain pipelining: finalizing l happens while accepting a proposal at l+2
        last = self.stats.advances[-1] if self.stats.advances else None
        if last is not None and last[0] == self.now and last[1] == i and last[3] == "proposal" and last[2] == blk.height + 2:
            self.stats.pipeline_ok += 1
        else:
            self.stats.pipeline_bad += 1

    def _violate(self, kind: str, i: int, detail: str) -> None:
        self.violations.append(Violation(kind, self.now, i, detail))
        self.trace.add(self.now, i, "violation", {"kind": kind, "detail": detail})

    # ------------------------------------------------------------ events

    def _spam(self, i: int) -> None:
        v = self.validators[i]
        beh = self.faults.behavior(i, v.state.h)
        if isinstance(beh, FutureVoteSpam) and not self.dead[i]:
            s = v.state
            blk = s.B or s.vlocks[s.h - 1]
            sent = 0
            for k in range(beh.rate * 4):
                if sent >= beh.rate:
                    break
                l = s.h + (k % 2)
                rnd = s.r + 1 + k // 2
                c = v.collector(l, rnd)
                if c is None or c == i:
                    continue
                vote = Vote.make(v.key, v.keyset, l, rnd, blk.hash, s.highest_cert)
                self._route(i, [c], vote, False)
                sent += 1
        self._push(self.now + self.delay.delta, ("spam", i))

    def step(self) -> bool:
        if not self._queue:
            return False
        time, _, event = heapq.heappop(self._queue)
        self.now = time
        kind = event[0]
        i = event[1]
        if self.dead[i]:
            return True
        v = self.validators[i]
        try:
            if kind == "msg":
                acts = v.handle(event[3], time)
            elif kind == "timer":
                acts = v.on_timer(event[2], event[3], time)
            elif kind == "tick":
                acts = v.emit_state_tick(time)
                self._push(v.next_state_tick, ("tick", i))
            else:
                self._spam(i)
                return True
            self._execute(i, acts)
        except SafetyViolation as exc:
            self._violate("safety", i, str(exc))
            return True
        if self.checker is not None:
            for problem in self.checker.check(v):
                self._violate(problem.split(":")[0], i, problem)
        self._check_crash(i)
        return True

    def live_validators(self) -> list[int]:
        return [i for i in range(self.n) if self.faults.crash_height(i) is None]

    def min_final(self) -> int:
        return min(self.validators[i].state.finalized_head for i in self.live_validators())

    def run_until(self, height: int | None = None, max_time: int | None = None, stop_on_violation: bool = True) -> str:
        """Advance until every live validator finalized ``height``, the clock
        passes ``max_time``, or the queue empties.  Returns the stop reason."""
        self.start()
        while True:
            if height is not None and self.min_final() >= height:
                return "height"
            if stop_on_violation and self.violations:
                return "violation"
            if not self._queue:
                return "quiescent"
            if max_time is not None and self._queue[0][0] > max_time:
                self.now = max_time
                return "time"
            self.step()
