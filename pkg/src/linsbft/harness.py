"""Scenarios, run orchestration, metrics and property checkers."""
from __future__ import annotations

import json
import math
import random
from dataclasses import asdict, dataclass, field
from typing import Callable, Hashable, Iterable, Mapping, Sequence

import yaml

from .chain import (
    Block,
    ConfigurationError,
    EpochConfig,
    FeeSchedule,
    RewardLedger,
    Tx,
    assign_reward,
    epoch_transition,
    make_genesis,
    tx_ids,
)
from .crypto import keygen_dealer
from .engine import EngineParams, EpochContext, Validator, timeout_propose
from .faults import (
    Crash,
    Equivocate,
    FaultSchedule,
    FaultSpec,
    FutureVoteSpam,
    ScheduleError,
    SelectiveSend,
    Silent,
)
from .messages import VoteCertificate
from .sim import DelayModel, DropRule, Simulation, Trace


# one tick is read as one millisecond when reporting throughput
TICKS_PER_SECOND = 1000


class ScenarioError(ValueError):
    pass


@dataclass
class Scenario:
    n: int = 5
    f: int = 1
    delta: int = 10
    gst: int = 0
    delta_t_f: int | None = None
    seed: int = 0
    target_height: int = 10
    block_txs: int = 4
    epoch_length: int | None = None
    stakes: list[int] | None = None
    faults: list[FaultSpec] = field(default_factory=list)
    state_period: int | None = None
    timeout_scale: int = 3
    pre_gst_max: int | None = None
    drop_prob: float = 0.1
    reorder: bool = False
    drops: list[DropRule] = field(default_factory=list)
    weighted: bool = False
    all_to_all: bool = False
    txs: list[dict] = field(default_factory=list)
    max_time: int | None = None
    check_locks: bool = True
    name: str = "scenario"

    def __post_init__(self):
        if self.f < 0 or self.n < 4 * self.f + 1:
            raise ScenarioError(f"n={self.n} cannot tolerate f={self.f}; need n >= 4f+1")
        if self.target_height < 3:
            raise ScenarioError("target_height must be at least 3")
        if self.delta < 1:
            raise ScenarioError("delta must be a positive tick count")
        if self.stakes is not None and len(self.stakes) != self.n:
            raise ScenarioError("one stake per validator is required")
        try:
            FaultSchedule(self.faults, self.n, self.f)
        except ScheduleError as exc:
            raise ScenarioError(str(exc)) from None

    @property
    def params(self) -> EngineParams:
        return EngineParams(
            n=self.n,
            f=self.f,
            delta=self.delta,
            timeout_scale=self.timeout_scale,
            delta_t_f=self.delta_t_f,
            state_period=self.state_period,
            block_txs=self.block_txs,
            all_to_all=self.all_to_all,
            weighted=self.weighted,
        )

    @property
    def timeout_lambda(self) -> int:
        """The single timeout knob of the evaluation, mapped to TO_p(0)."""
        return timeout_propose(0, self.params.timer_delta)

    def liveness_bound(self) -> int:
        """50 * (Δt_f + TO_p envelope); the envelope is TO_p(4) on the timer base."""
        p = self.params
        return 50 * (p.round_time + timeout_propose(4, p.timer_delta))

    def time_budget(self) -> int:
        if self.max_time is not None:
            return self.max_time
        per_height = self.params.round_time + timeout_propose(6, self.params.timer_delta)
        return self.gst + (self.target_height + 5) * per_height

    @classmethod
    def from_dict(cls, d: Mapping) -> "Scenario":
        d = dict(d)
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ScenarioError(f"unknown scenario keys: {sorted(unknown)}")
        d["faults"] = [FaultSpec.from_dict(x) for x in d.get("faults") or []]
        d["drops"] = [DropRule(**x) for x in d.get("drops") or []]
        try:
            return cls(**d)
        except TypeError as exc:
            raise ScenarioError(str(exc)) from None

    @classmethod
    def from_yaml(cls, text: str) -> "Scenario":
        data = yaml.safe_load(text) or {}
        if not isinstance(data, dict):
            raise ScenarioError("a scenario file holds a mapping")
        return cls.from_dict(data)

    @classmethod
    def load(cls, path) -> "Scenario":
        with open(path) as fh:
            return cls.from_yaml(fh.read())

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d["faults"] = [s.to_dict() for s in self.faults]
        d["drops"] = [asdict(r) for r in self.drops]
        return d

    def replace(self, **changes) -> "Scenario":
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d.update(changes)
        return Scenario(**d)


@dataclass
class HeightStats:
    rounds_used: int
    honest_msgs: int
    honest_bytes: int
    finalize_latency_ticks: int | None


@dataclass
class RunReport:
    name: str
    seed: int
    n: int
    f: int
    gst: int
    target_height: int
    stop_reason: str
    final_time: int
    heights: dict[int, HeightStats]
    safety_ok: bool
    liveness_ok: bool | None
    locks_ok: bool
    all_final_time: int | None
    msgs_per_height: float
    bytes_per_height: float
    view_change_mean: float
    cert_broadcasters_max: int
    pipeline_ok: int
    pipeline_bad: int
    evidence: int
    syncs: int
    violations: list[str]
    epochs: list[dict] = field(default_factory=list)
    rewards: dict[str, int] = field(default_factory=dict)
    txs_per_height: float = 0.0
    heights_per_sim_second: float = 0.0
    chains: dict[str, dict[int, str]] = field(default_factory=dict, repr=False)

    @property
    def ok(self) -> bool:
        return self.safety_ok and self.locks_ok and self.liveness_ok is not False

    def to_dict(self, with_chains: bool = False) -> dict:
        d = asdict(self)
        d["heights"] = {str(k): v for k, v in sorted(d["heights"].items())}
        d["rewards"] = {str(k): v for k, v in sorted(self.rewards.items())}
        if with_chains:
            d["chains"] = {str(i): {str(h): x for h, x in sorted(c.items())} for i, c in sorted(self.chains.items())}
        else:
            d.pop("chains")
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def summary(self) -> str:
        rows = [
            ("scenario", self.name),
            ("seed", self.seed),
            ("n / f", f"{self.n} / {self.f}"),
            ("stop", self.stop_reason),
            ("finalized heights", len(self.heights)),
            ("safety", "ok" if self.safety_ok else "VIOLATED"),
            ("locks", "ok" if self.locks_ok else "VIOLATED"),
            ("liveness", {True: "ok", False: "FAILED", None: "n/a"}[self.liveness_ok]),
            ("msgs / height", f"{self.msgs_per_height:.2f}"),
            ("rounds / height", f"{self.view_change_mean:.3f}"),
            ("txs / height", f"{self.txs_per_height:.2f}"),
            ("heights / sim s", f"{self.heights_per_sim_second:.2f}"),
        ]
        width = max(len(k) for k, _ in rows)
        return "\n".join(f"{k.ljust(width)}  {v}" for k, v in rows)


# ------------------------------------------------------------------ checkers


@dataclass
class SafetyVerdict:
    ok: bool
    conflict: tuple[int, Hashable, Hashable] | None = None  # (height, validator a, validator b)


def check_safety(chains: Mapping[Hashable, Mapping[int, bytes | str]]) -> SafetyVerdict:
    """Pairwise comparison of finalized chains: no two validators may finalize
    different blocks at the same height."""
    ids = sorted(chains)
    for ai, a in enumerate(ids):
        for b in ids[ai + 1 :]:
            ca, cb = chains[a], chains[b]
            for height in sorted(set(ca) & set(cb)):
                if ca[height] != cb[height]:
                    return SafetyVerdict(False, (height, a, b))
    return SafetyVerdict(True)


def check_liveness(report: RunReport, bound: int) -> bool | None:
    """True if every live validator finalized the target within ``bound`` ticks
    after GST; None when the run ended before GST (not applicable)."""
    if report.final_time < report.gst:
        return None
    if report.all_final_time is None:
        return False
    return report.all_final_time - report.gst <= bound


@dataclass
class ComplexityVerdict:
    ns: list[int]
    msgs_per_height: list[float]
    ratios: list[float]
    linear: bool
    in_band: bool


def measure_complexity(reports: Sequence[RunReport], ratio_band=(1.8, 2.3)) -> ComplexityVerdict:
    """Growth of honest messages per height across an n-sweep."""
    reports = sorted(reports, key=lambda r: r.n)
    ns = [r.n for r in reports]
    mph = [r.msgs_per_height for r in reports]
    ratios = [b / a for a, b in zip(mph, mph[1:])]
    linear = all(ratio_band[0] <= x <= ratio_band[1] for x in ratios)
    in_band = all(3 * n <= m <= 8 * n for n, m in zip(ns, mph))
    return ComplexityVerdict(ns, mph, ratios, linear, in_band)


@dataclass
class ViewChangeStats:
    heights: int
    mean: float
    stderr: float


def view_change_stats(reports: Iterable[RunReport]) -> ViewChangeStats:
    rounds = [hs.rounds_used for r in reports for hs in r.heights.values()]
    if not rounds:
        return ViewChangeStats(0, float("nan"), float("nan"))
    mean = sum(rounds) / len(rounds)
    var = sum((x - mean) ** 2 for x in rounds) / max(1, len(rounds) - 1)
    return ViewChangeStats(len(rounds), mean, math.sqrt(var / len(rounds)))


# ------------------------------------------------------------------ running


def _identities(n: int) -> list[bytes]:
    return [f"validator-{i:03d}".encode() for i in range(n)]


def _scripted_txs(s: Scenario) -> list[tuple[int, Tx]]:
    out = []
    for d in s.txs:
        kind = d.get("kind", "join")
        ident = str(d["identity"]).encode()
        if kind == "join":
            tx = Tx.join(ident, int(d.get("deposit", 0)), int(d.get("fee", 0)))
        elif kind == "leave":
            tx = Tx.leave(ident, int(d.get("fee", 0)))
        else:
            raise ScenarioError(f"unknown tx kind {kind!r}")
        out.append((int(d.get("height", 1)), tx))
    return out


class _EpochRun:
    def __init__(self, sim: Simulation, config: EpochConfig, anchor: Block):
        self.sim = sim
        self.config = config
        self.anchor = anchor


def build_simulation(
    s: Scenario,
    config: EpochConfig,
    anchor: Block,
    start_time: int,
    trace: Trace | None,
    prior_txs: frozenset[bytes] = frozenset(),
    end_height: int | None = None,
) -> Simulation:
    n = config.n
    keyset, keypairs = keygen_dealer(n, n - s.f, config.keyset_seed)
    anchor_cert = VoteCertificate(anchor.height, anchor.round, anchor.hash, keyset.genesis_sig(anchor.hash))
    ctx = EpochContext(
        params=s.params,
        keyset=keyset,
        anchor=anchor,
        anchor_cert=anchor_cert,
        stakes=tuple(config.stakes),
        scripted_txs=tuple(_scripted_txs(s)),
        end_height=end_height,
        prior_txs=prior_txs,
    )
    validators = [Validator(ctx, kp, now=start_time) for kp in keypairs]
    delay = DelayModel(
        gst=s.gst,
        delta=s.delta,
        pre_gst_max=s.pre_gst_max,
        drop_prob=s.drop_prob,
        reorder=s.reorder,
        drops=list(s.drops),
    )
    faults = FaultSchedule(s.faults, n, s.f)
    return Simulation(
        validators,
        delay,
        faults,
        seed=s.seed * 1_000_003 + config.epoch_index,
        start_time=start_time,
        trace=trace,
        check_locks=s.check_locks,
    )


def run_scenario(s: Scenario, trace: Trace | None = None) -> RunReport:
    """Run a scenario (one simulation per epoch) and compute its report."""
    trace = trace if trace is not None else Trace(enabled=False)
    stakes = list(s.stakes) if s.stakes is not None else [100] * s.n
    config = EpochConfig(
        epoch_index=0,
        epoch_length_heights=s.epoch_length or s.target_height,
        validator_set=_identities(s.n),
        stakes=stakes,
        keyset_seed=s.seed,
        f=s.f,
    )
    anchor = make_genesis()
    budget = s.time_budget()
    now = 0
    runs: list[_EpochRun] = []
    prior: frozenset[bytes] = frozenset()
    epochs_meta = []
    stop = "height"
    while True:
        end = min(config.end_height, s.target_height) if s.epoch_length else None
        goal = end if end is not None else s.target_height
        sim = build_simulation(s, config, anchor, now, trace, prior, end)
        stop = sim.run_until(height=goal, max_time=budget)
        runs.append(_EpochRun(sim, config, anchor))
        epochs_meta.append(
            {
                "epoch": config.epoch_index,
                "start_height": config.start_height,
                "validators": [v.decode() for v in config.validator_set],
                "stakes": list(config.stakes),
                "keyset_seed": config.keyset_seed,
            }
        )
        now = sim.now
        if stop != "height" or goal >= s.target_height:
            break
        live = sim.live_validators()[0]
        graph = sim.validators[live].graph
        anchor = graph.blocks[graph.finalized[goal]]
        prior = prior | frozenset(tx_ids(graph.finalized_chain()))
        try:
            config = epoch_transition(graph, config)
        except ConfigurationError:
            stop = "configuration"
            break
    return _report(s, runs, stop, epochs_meta)


def _report(s: Scenario, runs: list[_EpochRun], stop: str, epochs_meta: list[dict]) -> RunReport:
    violations: list[str] = []
    chains: dict[str, dict[int, str]] = {}
    heights: dict[int, HeightStats] = {}
    msgs = 0
    nbytes = 0
    pipeline_ok = pipeline_bad = evidence = syncs = 0
    cert_b_max = 0
    all_final_time: int | None = None
    final_time = 0
    rewards: dict[str, int] = {}
    txs = 0
    fee = FeeSchedule()
    for run in runs:
        sim = run.sim
        final_time = sim.now
        for v in sim.violations:
            violations.append(f"{v.kind}@{v.time} validator {v.validator}: {v.detail}")
        idents = [ident.decode() for ident in run.config.validator_set]
        for i in range(sim.n):
            # identities are stable across epochs, indices are not
            ident = idents[i]
            c = chains.setdefault(ident, {})
            for h, bh in sim.stats.finalized[i].items():
                if h in c and c[h] != bh.hex():
                    violations.append(f"safety: validator {ident} finalized two blocks at {h}")
                c[h] = bh.hex()
        msgs += sim.meter.count
        nbytes += sim.meter.bytes
        pipeline_ok += sim.stats.pipeline_ok
        pipeline_bad += sim.stats.pipeline_bad
        evidence += len(sim.stats.evidence)
        syncs += sim.stats.syncs
        per_h: dict[int, set[int]] = {}
        for _, i, l in sim.stats.cert_broadcasts:
            per_h.setdefault(l, set()).add(i)
        cert_b_max = max([cert_b_max] + [len(x) for x in per_h.values()])
        heights.update(_height_stats(sim, run.anchor.height))
        live = sim.live_validators()
        lo = run.anchor.height + 1
        hi = min(sim.validators[i].state.finalized_head for i in live)
        if stop == "height" and run is runs[-1]:
            all_final_time = max(sim.stats.finalize_time[i].get(hi, sim.now) for i in live)
        graph = sim.validators[live[0]].graph
        epoch_ledger = RewardLedger()
        for h in range(lo, hi + 1):
            blk = graph.blocks[graph.finalized[h]]
            assign_reward(blk, epoch_ledger, fee)
            if h <= s.target_height:
                txs += len(blk.txs)
        for i, amount in sorted(epoch_ledger.balances.items()):
            rewards[idents[i]] = rewards.get(idents[i], 0) + amount
    verdict = check_safety(chains)
    if not verdict.ok:
        violations.append(f"safety: chains of {verdict.conflict[1]} and {verdict.conflict[2]} differ at {verdict.conflict[0]}")
    safety_ok = verdict.ok and not any(v.startswith("safety") for v in violations)
    locks_ok = not any(v.startswith("lemma") for v in violations)
    finalized = [h for h in heights if h <= s.target_height]
    count = max(1, len(finalized))
    rounds = [heights[h].rounds_used for h in finalized]
    report = RunReport(
        name=s.name,
        seed=s.seed,
        n=s.n,
        f=s.f,
        gst=s.gst,
        target_height=s.target_height,
        stop_reason=stop,
        final_time=final_time,
        heights=heights,
        safety_ok=safety_ok,
        liveness_ok=None,
        locks_ok=locks_ok,
        all_final_time=all_final_time,
        msgs_per_height=msgs / count,
        bytes_per_height=nbytes / count,
        view_change_mean=(sum(rounds) / len(rounds)) if rounds else float("nan"),
        cert_broadcasters_max=cert_b_max,
        pipeline_ok=pipeline_ok,
        pipeline_bad=pipeline_bad,
        evidence=evidence,
        syncs=syncs,
        violations=violations,
        epochs=epochs_meta,
        rewards=rewards,
        txs_per_height=txs / count,
        heights_per_sim_second=len(finalized) * TICKS_PER_SECOND / max(1, final_time),
        chains=chains,
    )
    report.liveness_ok = check_liveness(report, s.liveness_bound())
    return report


def _height_stats(sim: Simulation, anchor_height: int) -> dict[int, HeightStats]:
    live = sim.live_validators()
    top = min(sim.validators[i].state.finalized_head for i in live)
    cert_round: dict[int, int] = {}
    for _, i, h, via, cert_v in sim.stats.advances:
        if via == "proposal" and cert_v >= 0:
            l = h - 1
            cert_round[l] = min(cert_round.get(l, cert_v), cert_v)
    for _, i, l, v in sim.stats.certs_formed:
        if sim.faults.behavior(i, l) is None and l not in cert_round:
            cert_round[l] = v
    entry: dict[int, int] = {}
    for t, _, l, v in sim.stats.round_entries:
        entry.setdefault(l, t)
    out = {}
    for l in range(anchor_height + 1, top + 1):
        done = [sim.stats.finalize_time[i].get(l) for i in live]
        latency = None
        if all(x is not None for x in done) and l in entry:
            latency = max(done) - entry[l]
        out[l] = HeightStats(
            rounds_used=cert_round.get(l, 0) + 1,
            honest_msgs=sim.meter.by_height.get(l, 0),
            honest_bytes=sim.meter.bytes_by_height.get(l, 0),
            finalize_latency_ticks=latency,
        )
    return out


# ------------------------------------------------------------------ adversaries


ADVERSARY_KINDS = ("crash", "selective_send", "equivocate", "future_vote_spam")


def random_fault_schedule(n: int, f: int, heights: int, rng: random.Random, kinds: Sequence[str] = ADVERSARY_KINDS) -> list[FaultSpec]:
    """Faults whose holders change from height segment to height segment,
    never more than f at once.  A crash takes its slot for the rest of the run."""
    specs: list[FaultSpec] = []
    crashed: list[int] = []
    h = 1
    while h <= heights and f > 0:
        length = rng.randint(1, 4)
        budget = f - len(crashed)
        pool = [i for i in range(n) if i not in crashed]
        chosen = rng.sample(pool, rng.randint(0, budget)) if budget > 0 else []
        for v in sorted(chosen):
            kind = rng.choice(kinds)
            if kind == "crash":
                specs.append(FaultSpec(v, Crash(at_height=h)))
                crashed.append(v)
            elif kind == "selective_send":
                specs.append(FaultSpec(v, SelectiveSend(), h, h + length))
            elif kind == "equivocate":
                specs.append(FaultSpec(v, Equivocate(), h, h + length))
            else:
                specs.append(FaultSpec(v, FutureVoteSpam(rate=rng.randint(1, 8)), h, h + length))
        h += length
    return specs


def silent_collectors_schedule(n: int, f: int, heights: int, rng: random.Random) -> list[FaultSpec]:
    """At every height a fresh random set of f validators stays silent."""
    specs = []
    for h in range(1, heights + 1):
        for v in sorted(rng.sample(range(n), f)):
            specs.append(FaultSpec(v, Silent(), h, h + 1))
    return specs


def minimize_faults(s: Scenario, failing: Callable[[RunReport], bool]) -> Scenario:
    """Delta-debug the fault list: drop chunks of adversary actions while the
    run still fails, and return the smallest failing scenario found."""
    faults = list(s.faults)
    chunk = max(1, len(faults) // 2)
    while faults and chunk >= 1:
        reduced = False
        for start in range(0, len(faults), chunk):
            trial = faults[:start] + faults[start + chunk :]
            cand = s.replace(faults=trial)
            if failing(run_scenario(cand)):
                faults = trial
                reduced = True
                break
        if not reduced:
            if chunk == 1:
                break
            chunk //= 2
    return s.replace(faults=faults)
