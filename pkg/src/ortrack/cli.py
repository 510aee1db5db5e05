"""Command-line entry point: simulate, montecarlo, eval, validate.

Exit codes: 0 success, 1 tool or input error, 2 unresolved safety finding
(a case that raised a critical retention or count alert and never made it
through reconciliation). The split lets CI distinguish "the tool broke"
from "the protocol found something".

All file outputs are written atomically (temp file + rename) and all
diagnostics go to standard error; standard output carries result JSON only.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
import tempfile

from . import decision, kernel, reconcile
from .protocol import AlertKind, CasePhase

OUT_DIR_ENV = "ORTRACK_OUT"

SAFE_PHASES = {CasePhase.RECONCILED.value, CasePhase.AWAITING_SPD.value,
               CasePhase.COMPLETE.value}

CRITICAL_KINDS = {AlertKind.RSB_SUSPECTED.value, AlertKind.COUNT_MISMATCH.value,
                  AlertKind.MANUAL_OVERRIDE.value}


def _write_atomic(path: str, text: str) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".out-", suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as handle:
            handle.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _out_dir(flag_value: str | None) -> str:
    return os.environ.get(OUT_DIR_ENV) or flag_value or "out"


def _load_scenario_file(path: str, seed: int | None) -> kernel.Scenario:
    with open(path, "r") as handle:
        scenario = kernel.load_scenario(handle.read())
    if seed is not None:
        scenario = dataclasses.replace(scenario, seed=seed)
    return scenario


def safety_findings(trace: kernel.Trace) -> list[str]:
    """Cases with a critical finding that never reached reconciliation."""
    critical_cases = {r.get("case") for r in trace.records
                      if r["type"] == "alert" and r["kind"] in CRITICAL_KINDS}
    findings = []
    for record in trace.records:
        if record["type"] != "case":
            continue
        if record["case_id"] in critical_cases and record["phase"] not in SAFE_PHASES:
            findings.append(record["case_id"])
    return findings


def run_summary(trace: kernel.Trace) -> dict:
    """Order-independent statistics for one run."""
    alert_counts: dict[str, int] = {}
    outcome_counts: dict[str, int] = {}
    for record in trace.records:
        if record["type"] == "alert":
            alert_counts[record["kind"]] = alert_counts.get(record["kind"], 0) + 1
        elif record["type"] == "case":
            outcome = record["outcomes"][-1] if record["outcomes"] else "NeverReconciled"
            outcome_counts[outcome] = outcome_counts.get(outcome, 0) + 1
    return {
        "alert_counts": alert_counts,
        "outcome_counts": outcome_counts,
        "retained_at_reconcile": kernel.reconciled_with_retained_item(trace),
        "retained_at_complete": kernel.completed_with_retained_item(trace),
        "safety_findings": safety_findings(trace),
    }


def _merge_counts(into: dict, add: dict) -> None:
    for key, value in add.items():
        into[key] = into.get(key, 0) + value


def batch_summary(scenario: kernel.Scenario, runs: int, seed_base: int) -> dict:
    """Run independent seeds and reduce their statistics by seed order."""
    by_seed = {}
    for i in range(runs):
        seed = seed_base + i
        trace = kernel.run(dataclasses.replace(scenario, seed=seed))
        by_seed[seed] = run_summary(trace)
    alert_counts: dict[str, int] = {}
    outcome_counts: dict[str, int] = {}
    retained = 0
    retained_complete = 0
    finding_runs = 0
    for seed in sorted(by_seed):
        summary = by_seed[seed]
        _merge_counts(alert_counts, summary["alert_counts"])
        _merge_counts(outcome_counts, summary["outcome_counts"])
        retained += summary["retained_at_reconcile"]
        retained_complete += summary["retained_at_complete"]
        finding_runs += bool(summary["safety_findings"])
    return {
        "scenario": scenario.name,
        "runs": runs,
        "seed_base": seed_base,
        "miss_rate": retained / runs,
        "retained_at_reconcile_runs": retained,
        "retained_at_complete_runs": retained_complete,
        "runs_with_safety_finding": finding_runs,
        "alert_counts": alert_counts,
        "outcome_counts": outcome_counts,
    }


# --------------------------------------------------------------------------
# Subcommands


def cmd_simulate(args: argparse.Namespace) -> int:
    scenario = _load_scenario_file(args.scenario, args.seed)
    trace = kernel.run(scenario)
    out_dir = _out_dir(args.out)
    reconcile.persist(trace, os.path.join(out_dir, "trace.ndjson"))
    for spec in scenario.cases:
        report = reconcile.generate_report(trace, spec.case_id)
        _write_atomic(os.path.join(out_dir, f"report_{spec.case_id}.json"),
                      json.dumps(report.to_json(), sort_keys=True, indent=2) + "\n")
        _write_atomic(os.path.join(out_dir, f"report_{spec.case_id}.csv"),
                      report.to_csv())
    findings = safety_findings(trace)
    if findings:
        print(f"unresolved safety finding in: {', '.join(findings)}", file=sys.stderr)
        return 2
    return 0


def cmd_montecarlo(args: argparse.Namespace) -> int:
    scenario = _load_scenario_file(args.scenario, None)
    seed_base = args.seed_base if args.seed_base is not None else scenario.seed
    summary = batch_summary(scenario, args.runs, seed_base)
    text = json.dumps(summary, sort_keys=True, indent=2) + "\n"
    out_dir = os.environ.get(OUT_DIR_ENV) or args.out
    if out_dir:
        _write_atomic(os.path.join(out_dir, "summary.json"), text)
    sys.stdout.write(text)
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    with open(args.needs) as handle:
        needs_text = handle.read()
    with open(args.correlation) as handle:
        correlation_text = handle.read()
    with open(args.scores) as handle:
        scores_text = handle.read()

    qfd = decision.qfd_from_csv(needs_text, correlation_text)
    weights = decision.qfd_weights(qfd)
    top = decision.select_top_k(weights, min(args.top_k, len(weights)))

    concepts, criteria, values = decision.load_matrix_csv(scores_text, "concept")
    if criteria != qfd.characteristics:
        raise decision.DimensionMismatchError(
            "score columns do not match the correlation characteristics")
    matrix = decision.PughMatrix(
        concepts=concepts, criteria=criteria, mode=decision.PughMode.WEIGHTED,
        scores=dict(zip(concepts, values)),
        weights=[weights[c] for c in criteria])
    ranking = decision.pugh_rank(matrix)

    plot = None
    if args.qualitative:
        with open(args.qualitative) as handle:
            q_concepts, _, q_values = decision.load_matrix_csv(handle.read(), "concept")
        qualitative = {c: sum(row) for c, row in zip(q_concepts, q_values)}
        plot = [[c, x, y] for c, x, y
                in decision.two_axis_plot_data(dict(ranking), qualitative)]

    result = {
        "weights": weights,
        "top_k": top,
        "flagged_characteristics": qfd.flagged_characteristics(),
        "ranking": [[concept, total] for concept, total in ranking],
        "plot": plot,
    }
    text = json.dumps(result, sort_keys=True, indent=2) + "\n"
    if args.out:
        _write_atomic(args.out, text)
    sys.stdout.write(text)
    return 0


def cmd_validate(args: argparse.Namespace) -> int:
    _load_scenario_file(args.scenario, None)
    print(f"{args.scenario}: ok", file=sys.stderr)
    return 0


# --------------------------------------------------------------------------
# Argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ortrack",
        description="Surgical-equipment tracking simulator and concept evaluator")
    sub = parser.add_subparsers(dest="command", required=True)

    p_sim = sub.add_parser("simulate", help="run one scenario, write trace and reports")
    p_sim.add_argument("scenario")
    p_sim.add_argument("--seed", type=int, default=None, help="override scenario seed")
    p_sim.add_argument("--out", default=None, help="output directory (default ./out)")
    p_sim.set_defaults(func=cmd_simulate)

    p_mc = sub.add_parser("montecarlo", help="run many seeds, emit aggregate statistics")
    p_mc.add_argument("scenario")
    p_mc.add_argument("--runs", type=int, required=True)
    p_mc.add_argument("--seed-base", type=int, default=None)
    p_mc.add_argument("--out", default=None)
    p_mc.set_defaults(func=cmd_montecarlo)

    p_eval = sub.add_parser("eval", help="run the concept-evaluation pipeline")
    p_eval.add_argument("needs", help="needs CSV (need,importance)")
    p_eval.add_argument("correlation", help="needs x characteristics CSV")
    p_eval.add_argument("scores", help="concepts x characteristics CSV")
    p_eval.add_argument("--qualitative", default=None,
                        help="concepts x qualitative criteria CSV")
    p_eval.add_argument("--top-k", type=int, default=5)
    p_eval.add_argument("--out", default=None, help="output JSON file")
    p_eval.set_defaults(func=cmd_eval)

    p_val = sub.add_parser("validate", help="check a scenario file")
    p_val.add_argument("scenario")
    p_val.set_defaults(func=cmd_validate)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (kernel.ParseError, kernel.ValidationError) as exc:
        print(f"scenario error: {exc}", file=sys.stderr)
        return 1
    except (decision.DimensionMismatchError, decision.DegenerateInputError,
            decision.KeyMismatchError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return 1
    except (OSError, reconcile.TraceIOError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
