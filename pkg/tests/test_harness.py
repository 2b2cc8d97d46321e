import json
import random
from pathlib import Path

import pytest

from linsbft.cli import check_trace, main, read_trace
from linsbft.faults import Crash, FaultSpec, Silent
from linsbft.harness import (
    HeightStats,
    Scenario,
    check_liveness,
    check_safety,
    measure_complexity,
    minimize_faults,
    random_fault_schedule,
    run_scenario,
    view_change_stats,
)
from linsbft.sim import Trace

SCENARIOS = Path(__file__).resolve().parent.parent / "scenarios"


# ---------------------------------------------------------------- checkers


def test_check_safety_agreeing_chains():
    chains = {"a": {1: "x", 2: "y"}, "b": {1: "x"}, "c": {1: "x", 2: "y", 3: "z"}}
    assert check_safety(chains).ok


def test_check_safety_forged_fork():
    chains = {"a": {1: "x", 2: "y"}, "b": {1: "x", 2: "q"}}
    v = check_safety(chains)
    assert not v.ok and v.conflict == (2, "a", "b")


def test_check_liveness_not_applicable_before_gst():
    r = run_scenario(Scenario(n=5, f=1, gst=10_000, max_time=500, target_height=10))
    assert r.stop_reason == "time"
    assert check_liveness(r, 10**9) is None
    assert r.liveness_ok is None and "n/a" in r.summary()


def test_check_liveness_bound():
    r = run_scenario(Scenario(n=5, f=1, target_height=10))
    assert check_liveness(r, r.all_final_time - r.gst)
    assert not check_liveness(r, r.all_final_time - r.gst - 1)


def test_ordinary_heights_within_a_few_delta():
    s = Scenario(n=5, f=1, target_height=20)
    r = run_scenario(s)
    assert r.ok and all(hs.rounds_used == 1 for hs in r.heights.values())
    # each height is finalized two pipeline steps after it was entered
    for hs in r.heights.values():
        assert hs.finalize_latency_ticks is not None
        assert hs.finalize_latency_ticks <= 3 * s.params.round_time


def test_crash_run_within_envelope():
    s = Scenario(n=5, f=1, target_height=15, faults=[FaultSpec(0, Crash(at_height=2))])
    r = run_scenario(s)
    assert r.ok and r.liveness_ok
    assert r.all_final_time - r.gst <= s.liveness_bound()


def _fake(n, mph):
    r = run_scenario(Scenario(n=5, f=1, target_height=3))
    r.n, r.msgs_per_height = n, mph
    return r


def test_measure_complexity_linear_and_quadratic():
    lin = measure_complexity([_fake(n, 4.0 * n) for n in (5, 9, 17, 33)])
    assert lin.linear and lin.in_band
    quad = measure_complexity([_fake(n, n * n) for n in (5, 9, 17, 33)])
    assert not quad.linear and all(x > 3 for x in quad.ratios)


def test_no_fault_sweep_within_3n_8n():
    # oracle: the ordinary-case message pattern bounds honest messages per height by [3n, 8n]
    reps = [run_scenario(Scenario(n=n, f=(n - 1) // 4, seed=1, target_height=30)) for n in (5, 9, 17, 33)]
    v = measure_complexity(reps)
    assert v.in_band, list(zip(v.ns, [round(m, 2) for m in v.msgs_per_height]))


def test_view_change_stats_exact_one_without_faults():
    st = view_change_stats([run_scenario(Scenario(n=5, f=1, target_height=15, seed=s)) for s in range(3)])
    assert st.mean == 1.0 and st.stderr == 0.0 and st.heights == 45


def test_view_change_stats_known_values():
    r = _fake(5, 1.0)
    r.heights = {1: HeightStats(1, 0, 0, None), 2: HeightStats(3, 0, 0, None)}
    st = view_change_stats([r])
    assert st.mean == 2.0 and st.heights == 2


def test_minimize_faults_keeps_culprit():
    base = Scenario(n=5, f=1, target_height=14, seed=2)
    probe = Trace()
    run_scenario(base, probe)
    h = 4
    (col,) = [r[1] for r in probe.records if r[2] == "propose" and (r[3]["l"], r[3]["v"]) == (h + 1, 0)]
    culprit = FaultSpec(col, Silent(), h, h + 1)
    decoys = [FaultSpec((col + k) % 5, Silent(), 8 + k, 9 + k) for k in range(1, 5)]
    s = base.replace(faults=decoys[:2] + [culprit] + decoys[2:])

    def failing(rep):
        return rep.heights[h].rounds_used >= 2

    assert failing(run_scenario(s))
    assert minimize_faults(s, failing).faults == [culprit]
    assert minimize_faults(s, lambda rep: False).faults == s.faults


def test_random_schedule_deterministic():
    a = random_fault_schedule(9, 2, 20, random.Random(3))
    b = random_fault_schedule(9, 2, 20, random.Random(3))
    assert a == b


# ---------------------------------------------------------------- scenarios


def test_yaml_round_trip():
    s = Scenario.load(SCENARIOS / "adversarial.yaml")
    assert Scenario.from_dict(s.to_dict()) == s


def test_lock_scenario_no_fork():
    s = Scenario.load(SCENARIOS / "lock.yaml")
    trace = Trace()
    r = run_scenario(s, trace)
    assert r.ok and r.stop_reason == "height"
    early = [rec for rec in trace.records if rec[2] == "finalize" and rec[3]["height"] == 5]
    first_time = min(rec[0] for rec in early)
    # validator 0 missed the certificate for height 5 and finalized it later
    v0 = next(rec[0] for rec in early if rec[1] == 0)
    assert v0 > first_time
    assert len({rec[3]["hash"] for rec in early}) == 1


def test_epoch_scenario_rotates_set():
    r = run_scenario(Scenario.load(SCENARIOS / "epochs.yaml"))
    assert r.ok and len(r.epochs) == 3
    first, second = r.epochs[0], r.epochs[1]
    assert "newbie" in second["validators"] and "validator-004" not in second["validators"]
    assert second["validators"] == sorted(second["validators"], key=lambda v: -second["stakes"][second["validators"].index(v)])
    assert first["keyset_seed"] != second["keyset_seed"]
    # every finalized block pays its fees plus the coinbase; each tx pays 1
    assert sum(r.rewards.values()) == 30 * 10 + round(r.txs_per_height * 30)


def test_report_json_reproducible():
    s = Scenario(n=5, f=1, target_height=6, seed=9)
    assert run_scenario(s).to_json() == run_scenario(s).to_json()


# ---------------------------------------------------------------- cli


def test_cli_run_and_check(tmp_path, capsys):
    out = tmp_path / "report.jsonl"
    code = main(["run", "--scenario", str(SCENARIOS / "ordinary.yaml"), "--seed", "3", "--out", str(out)])
    assert code == 0
    lines = [json.loads(l) for l in out.read_text().splitlines()]
    assert lines[-1]["record"] == "summary" and lines[-1]["ok"]
    assert sum(1 for l in lines if l["record"] == "height") == 20
    trace = tmp_path / "report.jsonl.trace.jsonl"
    assert main(["check", "--trace", str(trace)]) == 0
    assert "msgs / height" in capsys.readouterr().out


def test_cli_check_detects_forged_fork(tmp_path):
    trace = tmp_path / "t.jsonl"
    run_scenario(Scenario(n=5, f=1, target_height=5), t := Trace())
    t.dump(trace)
    recs = read_trace(trace)
    assert check_trace(recs) == []
    fin = next(r for r in recs if r["event"] == "finalize" and r["actor"] == 1)
    fin["detail"]["hash"] = "00" * 32
    trace.write_text("".join(json.dumps(r) + "\n" for r in recs))
    assert main(["check", "--trace", str(trace)]) == 1


def test_cli_sweep(capsys):
    assert main(["sweep", "--n", "5,9", "--target", "8"]) == 0
    assert "ratios:" in capsys.readouterr().out


def test_cli_bad_scenario(tmp_path):
    bad = tmp_path / "bad.yaml"
    bad.write_text("n: 4\nf: 1\n")
    assert main(["run", "--scenario", str(bad), "--out", str(tmp_path / "r")]) == 2


def test_cli_failing_run_writes_counterexample(tmp_path):
    # too little time to reach the target: a liveness failure
    sc = tmp_path / "short.yaml"
    sc.write_text(
        "n: 5\nf: 1\ntarget_height: 30\nmax_time: 150\n"
        "faults:\n  - {validator: 1, behavior: silent, from_height: 2, to_height: 3}\n"
        "  - {validator: 2, behavior: silent, from_height: 5, to_height: 6}\n"
    )
    out = tmp_path / "r.jsonl"
    assert main(["run", "--scenario", str(sc), "--out", str(out)]) == 1
    small = Scenario.load(tmp_path / "r.jsonl.counterexample.yaml")
    assert len(small.faults) == 0
    assert (tmp_path / "r.jsonl.counterexample.trace.jsonl").stat().st_size > 0
