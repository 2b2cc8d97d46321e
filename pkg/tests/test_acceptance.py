"""Acceptance suite: one test per criterion, each recording a pass/fail line.

Runs take a few minutes in total.  Sweeps are seeded so that any failure is
reproducible by re-running the single scenario that tripped it.
"""
import math
import random
from functools import lru_cache
from pathlib import Path

from linsbft.crypto import keygen_dealer, select_collector_weighted
from linsbft.engine import dur, timeout_collect, timeout_propose
from linsbft.faults import FaultSpec, FutureVoteSpam
from linsbft.harness import (
    ADVERSARY_KINDS,
    Scenario,
    measure_complexity,
    random_fault_schedule,
    run_scenario,
    silent_collectors_schedule,
    view_change_stats,
)
from linsbft.messages import VoteCertificate
from linsbft.sim import Trace

SCENARIOS = Path(__file__).resolve().parent.parent / "scenarios"
DELTA = 10


def _random_run(seed: int, target: int, max_gst_deltas: int) -> tuple[Scenario, object]:
    rng = random.Random(seed)
    n = rng.choice([5, 9])
    f = (n - 1) // 4
    gst = rng.choice([0, rng.randint(1, max_gst_deltas) * DELTA])
    s = Scenario(n=n, f=f, delta=DELTA, gst=gst, seed=seed, target_height=target,
                 faults=random_fault_schedule(n, f, target + 2, rng))
    return s, run_scenario(s)


@lru_cache(maxsize=None)
def _safety_runs():
    return [_random_run(seed, 12, 30) for seed in range(1000)]


@lru_cache(maxsize=None)
def _liveness_runs():
    return [_random_run(10_000 + seed, 50, 100) for seed in range(100)]


# ---------------------------------------------------------------- 1 safety


def test_safety_no_conflicting_finalization(verdict):
    runs = _safety_runs()
    kinds = {type(spec.behavior).__name__ for s, _ in runs for spec in s.faults}
    bad = [s.seed for s, r in runs if not r.safety_ok]
    ok = verdict(1, "safety", not bad and len(runs) >= 1000,
                 f"{len(runs)} runs, behaviors {sorted(kinds)}, forks in seeds {bad[:5]}")
    assert len(kinds) == len(ADVERSARY_KINDS)
    assert ok


# ---------------------------------------------------------------- 2 liveness


def test_liveness_after_gst(verdict):
    runs = _liveness_runs()
    late = [(s.seed, r.stop_reason) for s, r in runs if r.liveness_ok is not True or r.stop_reason != "height"]
    worst = max((r.all_final_time - r.gst) / s.liveness_bound() for s, r in runs if r.all_final_time is not None)
    ok = verdict(2, "liveness", not late,
                 f"{len(runs)} runs to height 50, worst finish {worst:.3f} of bound, failures {late[:5]}")
    assert ok


# ---------------------------------------------------------------- 3 linear communication


def test_linear_message_growth(verdict):
    ns = (5, 9, 17, 33)
    lin = measure_complexity([run_scenario(Scenario(n=n, f=(n - 1) // 4, seed=1, target_height=30)) for n in ns])
    quad = measure_complexity(
        [run_scenario(Scenario(n=n, f=(n - 1) // 4, seed=1, target_height=30, all_to_all=True)) for n in ns]
    )
    # the quadratic control climbs toward 4 as the n-independent terms fade
    control = all(x > 2.3 for x in quad.ratios) and quad.ratios == sorted(quad.ratios) and 3.3 <= quad.ratios[-1] <= 4.7
    ok = verdict(3, "linear communication", lin.linear and control,
                 f"ratios {[round(x, 2) for x in lin.ratios]}, all-to-all {[round(x, 2) for x in quad.ratios]}")
    assert ok


# ---------------------------------------------------------------- 4 view-change expectation


def _silent_collector_stats(n: int, heights: int, runs: int):
    f = (n - 1) // 4
    reps = []
    for seed in range(runs):
        rng = random.Random(f"l4:{seed}")
        faults = silent_collectors_schedule(n, f, heights + 2, rng)
        reps.append(run_scenario(Scenario(n=n, f=f, delta=DELTA, seed=seed, target_height=heights, faults=faults)))
    return view_change_stats(reps), f / n


def test_view_change_expectation(verdict):
    st5, p5 = _silent_collector_stats(5, 200, 10)
    st13, p13 = _silent_collector_stats(13, 100, 10)
    geo5, geo13 = 1 / (1 - p5), 1 / (1 - p13)
    ok5 = st5.heights >= 1000 and abs(st5.mean - geo5) <= 3 * st5.stderr
    ok13 = st13.heights >= 1000 and abs(st13.mean - geo13) <= 3 * st13.stderr and st13.mean < 4 / 3 + 3 * st13.stderr
    ok = verdict(4, "view-change expectation", ok5 and ok13,
                 f"p=1/5: {st5.mean:.4f} vs {geo5:.4f} (se {st5.stderr:.4f}, {st5.heights} heights); "
                 f"p=3/13: {st13.mean:.4f} vs {geo13:.4f} (se {st13.stderr:.4f}, {st13.heights} heights)")
    assert ok


# ---------------------------------------------------------------- 5 lock lemmas


def test_lock_lemmas_hold_everywhere(verdict):
    # the simulator checks the three lemmas after every transition of every run
    runs = _safety_runs() + _liveness_runs()
    bad = [(s.seed, r.violations[:2]) for s, r in runs if not r.locks_ok]
    ok = verdict(5, "lock lemmas", not bad and all(s.check_locks for s, _ in runs), f"{len(runs)} runs, violations {bad[:3]}")
    assert ok


# ---------------------------------------------------------------- 6 formulas


def test_formula_conformance(verdict):
    tf = 3 * DELTA
    checks = {
        "TO_c(0)": timeout_collect(0, DELTA) == DELTA,
        "TO_p(0)": timeout_propose(0, DELTA) == 2 * DELTA,
        "TO_p(3)": timeout_propose(3, DELTA) == 16 * DELTA,
        "DUR(8,10,2)": dur(8, 10, 2, tf, DELTA) == 2 * tf + 6 * DELTA,
    }
    ok = verdict(6, "formulas", all(checks.values()), ", ".join(f"{k} {'ok' if v else 'wrong'}" for k, v in checks.items()))
    assert ok


# ---------------------------------------------------------------- 7 pipelining


def test_pipelined_finalization(verdict):
    s = Scenario(n=5, f=1, delta=DELTA, seed=7, target_height=52)
    trace = Trace()
    r = run_scenario(s, trace)
    recs = trace.records
    missing = []
    for k, (t, actor, event, detail) in enumerate(recs):
        if event != "finalize" or not 1 <= detail["height"] <= 50:
            continue
        l = detail["height"]
        # the same validator, at the same instant, accepted the proposal for l+2 carrying Cert_{l+1,0}
        trigger = [
            p for p in recs[:k]
            if p[0] == t and p[1] == actor and p[2] == "advance"
            and p[3] == {"h": l + 2, "via": "proposal", "cert_v": 0}
        ]
        if not trigger:
            missing.append((actor, l))
    finals = {(rec[1], rec[3]["height"]) for rec in recs if rec[2] == "finalize" and rec[3]["height"] <= 50}
    complete = all((i, l) in finals for i in range(s.n) for l in range(1, 51))
    ok = verdict(7, "pipelining", r.ok and complete and not missing,
                 f"{len(finals)} finalizations over 50 heights, untriggered {missing[:5]}")
    assert ok


# ---------------------------------------------------------------- 8 future-vote bound


def test_future_vote_spam_bound(verdict):
    seen = {}
    for n in (5, 9, 17, 33):
        f = (n - 1) // 4
        faults = [FaultSpec(i, FutureVoteSpam(rate=n)) for i in range(f)]
        r = run_scenario(Scenario(n=n, f=f, delta=DELTA, gst=300, seed=0, target_height=20, faults=faults))
        seen[n] = (r.cert_broadcasters_max, r.ok)
    ok = verdict(8, "future-vote bound", all(c <= 4 and good for c, good in seen.values()),
                 f"max CERT broadcasters per height by n: { {n: c for n, (c, _) in seen.items()} }")
    assert ok


# ---------------------------------------------------------------- 9 epochs


def test_epoch_transition_and_weighted_selection(verdict):
    s = Scenario.load(SCENARIOS / "epochs.yaml")
    r = run_scenario(s)
    first, second = r.epochs[0], r.epochs[1]
    # oracle: apply the scripted requests to the initial set and sort by deposit
    deposits = dict(zip(first["validators"], first["stakes"]))
    for tx in s.txs:
        if tx["kind"] == "join":
            deposits[tx["identity"]] = tx["deposit"]
        else:
            deposits.pop(tx["identity"])
    expect = [v for v, _ in sorted(deposits.items(), key=lambda kv: (-kv[1], kv[0]))[: s.n]]
    set_ok = r.ok and second["validators"] == expect and first["keyset_seed"] != second["keyset_seed"]

    stakes = second["stakes"]
    total, trials = sum(stakes), 12_000
    ks, _ = keygen_dealer(s.n, s.n - s.f, 0)
    rng = random.Random(11)
    counts = [0] * len(stakes)
    for _ in range(trials):
        h = rng.randbytes(32)
        counts[select_collector_weighted(VoteCertificate(rng.randrange(1, 100), 0, h, ks.genesis_sig(h)), rng.randrange(4), stakes)] += 1
    freq_ok = all(abs(c - trials * w / total) <= 3 * math.sqrt(trials * (w / total) * (1 - w / total)) for c, w in zip(counts, stakes))
    ok = verdict(9, "epoch transition", set_ok and freq_ok,
                 f"next set {second['validators']}, counts {counts} for stakes {stakes}")
    assert ok


# ---------------------------------------------------------------- 10 determinism


def test_same_seed_byte_identical(verdict):
    scenarios = [Scenario.load(SCENARIOS / "adversarial.yaml"), Scenario.load(SCENARIOS / "epochs.yaml")]
    rng = random.Random(5)
    scenarios.append(Scenario(n=9, f=2, gst=200, seed=5, target_height=20, reorder=True,
                              faults=random_fault_schedule(9, 2, 22, rng)))
    same = []
    for s in scenarios:
        outs = []
        for _ in range(2):
            tr = Trace()
            rep = run_scenario(s, tr)
            outs.append((tr.text(), rep.to_json()))
        same.append(outs[0] == outs[1] and len(outs[0][0]) > 0)
    ok = verdict(10, "determinism", all(same), f"{sum(same)}/{len(same)} scenarios replayed byte for byte")
    assert ok
