"""A lock-step network for driving engine handlers directly in tests.

Messages are delivered in FIFO order, one tick apart, and timers never fire
unless a test fires them.  Tests hold back or drop messages with filters.
"""
from collections import deque

from linsbft.chain import Block, make_genesis
from linsbft.crypto import keygen_dealer
from linsbft.engine import Broadcast, EngineParams, EpochContext, RequestSync, SendTo, Validator
from linsbft.messages import Proposal, Vote, VoteCertificate


class Cluster:
    def __init__(self, n=5, f=1, delta=10, seed=0, **params):
        self.ks, self.keys = keygen_dealer(n, n - f, seed)
        self.anchor = make_genesis()
        self.anchor_cert = VoteCertificate(0, 0, self.anchor.hash, self.ks.genesis_sig(self.anchor.hash))
        self.params = EngineParams(n, f, delta, **params)
        self.ctx = EpochContext(self.params, self.ks, self.anchor, self.anchor_cert)
        self.vals = [Validator(self.ctx, k) for k in self.keys]
        self.n = n
        self.queue = deque()
        self.held = []
        self.now = 0
        self.log = []

    def execute(self, i, acts):
        for a in acts:
            self.log.append((i, a))
            if isinstance(a, SendTo):
                self.queue.append((i, a.target, a.message))
            elif isinstance(a, Broadcast):
                for j in range(self.n):
                    self.queue.append((i, j, a.message))
            elif isinstance(a, RequestSync):
                self.queue.append((i, a.peer, a.message))
        return acts

    def start(self):
        for v in self.vals:
            self.execute(v.me, v.start(self.now))

    def deliver(self, hold=lambda src, dst, msg: False, until=lambda: False, limit=100_000):
        """Deliver queued messages; held ones go to ``self.held``."""
        steps = 0
        while self.queue and not until() and steps < limit:
            src, dst, msg = self.queue.popleft()
            if hold(src, dst, msg):
                self.held.append((src, dst, msg))
                continue
            self.now += 1
            steps += 1
            self.execute(dst, self.vals[dst].handle(msg, self.now))

    def run_to_height(self, h):
        """Run the ordinary pipeline until every validator sits at R_{h,0}
        and has voted there.  Proposals for h+1 are held back."""
        self.start()
        self.deliver(hold=lambda s, d, m: isinstance(m, Proposal) and m.l > h)
        assert all(v.state.h == h and v.state.r == 0 for v in self.vals), [(v.state.h, v.state.r) for v in self.vals]

    def held_proposal(self, l, v=0):
        for _, _, m in self.held:
            if isinstance(m, Proposal) and (m.l, m.v) == (l, v):
                return m
        raise LookupError(f"no held proposal for ({l}, {v})")

    def cert_for(self, block: Block, v: int, signers=None) -> VoteCertificate:
        signers = range(self.ks.t) if signers is None else signers
        parts = [self.ks.partial_sign(i, block.hash) for i in signers]
        return VoteCertificate(block.height, v, block.hash, self.ks.aggregate(parts))

    def vote(self, i, l, v, block, cert=None):
        cert = cert or self.vals[i].state.highest_cert
        return Vote.make(self.keys[i], self.ks, l, v, block.hash, cert)

    def propose(self, i, l, v, block, cert):
        return Proposal.make(self.keys[i], l, v, block, cert)
