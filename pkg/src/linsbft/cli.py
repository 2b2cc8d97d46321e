"""Command line front end: run a scenario, sweep n, check a trace."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import yaml

from .harness import (
    RunReport,
    Scenario,
    ScenarioError,
    check_safety,
    measure_complexity,
    minimize_faults,
    run_scenario,
)
from .sim import Trace

log = logging.getLogger("linsbft")


def _report_lines(report: RunReport) -> list[str]:
    lines = []
    for h, hs in sorted(report.heights.items()):
        rec = {"record": "height", "height": h}
        rec.update(hs.__dict__)
        lines.append(json.dumps(rec, sort_keys=True))
    summary = {"record": "summary", "ok": report.ok}
    summary.update(report.to_dict())
    summary.pop("heights")
    lines.append(json.dumps(summary, sort_keys=True))
    return lines


def _write_lines(path: Path, lines) -> None:
    with open(path, "w") as fh:
        for line in lines:
            fh.write(line + "\n")


def _sibling(path: Path, suffix: str) -> Path:
    return path.with_name(path.name + suffix)


def cmd_run(args) -> int:
    s = Scenario.load(args.scenario)
    if args.seed is not None:
        s = s.replace(seed=args.seed)
    trace = Trace()
    report = run_scenario(s, trace)
    out = Path(args.out)
    _write_lines(out, _report_lines(report))
    trace.dump(_sibling(out, ".trace.jsonl"))
    print(report.summary())
    for v in report.violations:
        print(f"violation: {v}")
    if report.ok:
        return 0
    log.info("run failed, minimizing the fault schedule")
    small = minimize_faults(s, lambda r: not r.ok)
    cex_trace = Trace()
    run_scenario(small, cex_trace)
    with open(_sibling(out, ".counterexample.yaml"), "w") as fh:
        yaml.safe_dump(small.to_dict(), fh, sort_keys=False)
    cex_trace.dump(_sibling(out, ".counterexample.trace.jsonl"))
    print(f"counterexample: {len(small.faults)} of {len(s.faults)} fault entries kept")
    return 1


def cmd_sweep(args) -> int:
    ns = [int(x) for x in args.n.split(",") if x]
    base = Scenario.load(args.scenario) if args.scenario else Scenario()
    reports = []
    ok = True
    for n in ns:
        f = (n - 1) // 4 if args.f is None else args.f
        s = base.replace(n=n, f=f, seed=args.seed, target_height=args.target, all_to_all=args.all_to_all, stakes=None, faults=[])
        r = run_scenario(s)
        reports.append(r)
        ok = ok and r.ok
        print(f"n={n:3d} f={f:2d} msgs/height={r.msgs_per_height:8.2f} rounds/height={r.view_change_mean:.3f} {'ok' if r.ok else 'FAILED'}")
    verdict = measure_complexity(reports)
    print("ratios: " + " ".join(f"{x:.2f}" for x in verdict.ratios))
    print(f"linear: {verdict.linear}  within [3n, 8n]: {verdict.in_band}")
    if args.out:
        _write_lines(Path(args.out), [json.dumps({"record": "sweep", **verdict.__dict__}, sort_keys=True)])
    return 0 if ok and (verdict.linear or args.all_to_all) else 1


def read_trace(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def check_trace(records: list[dict]) -> list[str]:
    """Offline checks over a trace: finalized chains agree and no online
    check recorded a violation."""
    problems = []
    chains: dict[int, dict[int, str]] = {}
    for rec in records:
        if rec["event"] == "finalize":
            d = rec["detail"]
            c = chains.setdefault(rec["actor"], {})
            if d["height"] in c and c[d["height"]] != d["hash"]:
                problems.append(f"validator {rec['actor']} finalized two blocks at {d['height']}")
            c[d["height"]] = d["hash"]
        elif rec["event"] == "violation":
            problems.append(f"{rec['detail']['kind']} at {rec['time']} by {rec['actor']}: {rec['detail']['detail']}")
    verdict = check_safety(chains)
    if not verdict.ok:
        h, a, b = verdict.conflict
        problems.append(f"validators {a} and {b} finalized different blocks at {h}")
    return problems


def cmd_check(args) -> int:
    records = read_trace(args.trace)
    problems = check_trace(records)
    finals = sum(1 for r in records if r["event"] == "finalize")
    print(f"{len(records)} records, {finals} finalizations")
    for p in problems:
        print(f"violation: {p}")
    print("ok" if not problems else "FAILED")
    return 0 if not problems else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="linsbft", description="Simulate and check a linear BFT consensus protocol.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="cmd", required=True)

    r = sub.add_parser("run", help="run one scenario")
    r.add_argument("--scenario", required=True)
    r.add_argument("--seed", type=int)
    r.add_argument("--out", required=True, help="report path; the trace goes next to it")
    r.set_defaults(func=cmd_run)

    s = sub.add_parser("sweep", help="message complexity across validator counts")
    s.add_argument("--n", default="5,9,17,33")
    s.add_argument("--f", type=int, help="faults tolerated (default (n-1)//4)")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--target", type=int, default=30)
    s.add_argument("--scenario", help="base scenario for timing parameters")
    s.add_argument("--all-to-all", action="store_true", help="baseline that broadcasts every vote")
    s.add_argument("--out")
    s.set_defaults(func=cmd_sweep)

    c = sub.add_parser("check", help="check a recorded trace")
    c.add_argument("--trace", required=True)
    c.set_defaults(func=cmd_check)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ScenarioError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
