"""Command-line front end: every experiment as a subcommand.

Feedback functions are given as ``power:p``, ``const:c``, or
``table:v1,v2,...;tail=repeat|extrapolate``; waiting-time models as
``exponential``, ``detuniform:base=b,jitter=j``, ``gamma:shape=k``, or
``empirical:v1,v2,...``.  Every run writes ``effective_config.json`` next to
its results; re-running with ``--config`` on that file reproduces the outputs
bit for bit.  Exit codes: 0 success, 1 failed ``--check``, 2 usage or
configuration error.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys

from . import dispersion, montecarlo, race as race_mod, urn as urn_mod
from .experiments import ExperimentSpec, run_experiment
from .increments import parse_feedback, parse_model

_CHECK_SIGMAS = 3.0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="urnrace",
        description="Simulate competing birth processes and feedback urns, "
                    "and verify their ranking and dispersion behavior.")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    def common(p):
        p.add_argument("--config", help="JSON file of default option values "
                                        "(flags override it)")
        p.add_argument("--out", default=".", help="output directory")
        p.add_argument("--seed", type=int, default=0, help="master seed")
        p.add_argument("--workers", type=int, default=1,
                       help="worker processes (never changes results)")
        p.add_argument("--check", action="store_true",
                       help="exit 1 when the subcommand's acceptance check fails")

    p = sub.add_parser("race", help="simulate one race and dump its event log")
    common(p)
    p.add_argument("--agents", type=int, default=2)
    p.add_argument("--initial", default=None, help="comma-separated initial values")
    p.add_argument("--feedback", default="const:1")
    p.add_argument("--model", default="exponential")
    p.add_argument("--t-max", type=float, default=None)
    p.add_argument("--events", type=int, default=None)
    p.add_argument("--format", choices=("jsonl", "csv"), default="jsonl")

    p = sub.add_parser("urn", help="run one urn and export its trajectory")
    common(p)
    p.add_argument("--agents", type=int, default=2)
    p.add_argument("--initial", default=None, help="comma-separated initial counts")
    p.add_argument("--feedback", default="const:1")
    p.add_argument("--steps", type=int, default=1000)

    p = sub.add_parser("coverage", help="permutation coverage of an urn")
    common(p)
    p.add_argument("--agents", type=int, default=3)
    p.add_argument("--feedback", default="power:0.4")
    p.add_argument("--steps", type=int, default=1_000_000)
    p.add_argument("--replicates", type=int, default=100)
    p.add_argument("--policy", choices=("weak", "strict"), default="weak")
    p.add_argument("--engine", choices=("lockstep", "sequential"), default=None)
    p.add_argument("--min-full-fraction", type=float, default=0.99,
                   help="--check passes when at least this fraction of "
                        "replicates realize every permutation")

    p = sub.add_parser("xi", help="mean rank weights of race snapshots")
    common(p)
    p.add_argument("--agents", type=int, default=2)
    p.add_argument("--feedback", default="const:1")
    p.add_argument("--model", default="exponential")
    p.add_argument("--t", default="50", help="comma-separated observation times")
    p.add_argument("--replicates", type=int, default=10_000)
    p.add_argument("--shift-max", type=float, default=None,
                   help="draw per-agent shifts uniformly from [0, M] per replicate")
    p.add_argument("--shifts", default=None,
                   help="comma-separated fixed per-agent shifts")

    p = sub.add_parser("couple", help="urn recursion vs. exponential race jump chain")
    common(p)
    p.add_argument("--feedback", default="power:1")
    p.add_argument("--initial", default="1,1")
    p.add_argument("--k", type=int, default=2)
    p.add_argument("--replicates", type=int, default=100_000)
    p.add_argument("--p-threshold", type=float, default=0.001)

    p = sub.add_parser("regime", help="divergence verdict for the dispersion series")
    common(p)
    p.add_argument("--feedback", default="power:0.5")
    p.add_argument("--model", default="exponential")
    p.add_argument("--lambda", dest="lam", default="1",
                   help="comma-separated window widths")
    p.add_argument("--j-max", type=int, default=None)
    p.add_argument("--expect", choices=("diverges", "converges"), default=None,
                   help="--check compares the verdict against this")
    p.add_argument("--fixation-agents", type=int, default=None,
                   help="also probe leader fixation of the urn with this many bins")
    p.add_argument("--checkpoints", default="10000,100000")
    p.add_argument("--replicates", type=int, default=100)

    p = sub.add_parser("petrov", help="concentration-dispersion boundedness table")
    common(p)
    p.add_argument("--feedback", default="const:1")
    p.add_argument("--model", default="exponential")
    p.add_argument("--n-grid", default="100,1000,10000")
    p.add_argument("--lambda", dest="lam", type=float, default=1.0)
    p.add_argument("--samples", type=int, default=100_000)
    p.add_argument("--symmetrized", action="store_true")
    p.add_argument("--band", type=float, default=2.0,
                   help="--check passes when max/min product stays below this")

    p = sub.add_parser("unimodal-fuzz", help="randomized exact trials of the "
                                             "shift inequality")
    common(p)
    p.add_argument("--trials", type=int, default=10_000)
    p.add_argument("--case", choices=("increasing", "unimodal", "both"),
                   default="both")
    return parser


def _apply_config_file(parser, argv):
    """Load --config JSON as parser defaults; explicit flags still override."""
    probe = argparse.ArgumentParser(add_help=False)
    probe.add_argument("--config")
    known, _ = probe.parse_known_args(argv[1:] if argv else [])
    if not known.config:
        return
    with open(known.config) as fh:
        values = json.load(fh)
    file_sub = values.pop("subcommand", None)
    if file_sub is not None and argv and file_sub != argv[0]:
        raise ValueError(f"config file was written by subcommand {file_sub!r}, "
                         f"but {argv[0]!r} was invoked")
    values.pop("config", None)
    for action in parser._subparsers._group_actions[0].choices.values():
        known_flags = {a.dest for a in action._actions}
        action.set_defaults(**{k: v for k, v in values.items() if k in known_flags})


def _echo_config(args, outdir):
    os.makedirs(outdir, exist_ok=True)
    payload = {k: v for k, v in vars(args).items() if k != "config"}
    path = os.path.join(outdir, "effective_config.json")
    with open(path, "w", newline="\n") as fh:
        json.dump(payload, fh, sort_keys=True, indent=2)
        fh.write("\n")
    return path


def _parse_csv_values(text, cast):
    return [cast(v) for v in text.split(",") if v.strip()]


def dispatch(argv=None):
    """Parse, validate, run, and report; returns the process exit code."""
    argv = list(sys.argv[1:]) if argv is None else list(argv)
    parser = build_parser()
    try:
        _apply_config_file(parser, argv)
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if exc.code is not None else 2
    except (OSError, ValueError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2

    handler = {
        "race": _cmd_race,
        "urn": _cmd_urn,
        "coverage": _cmd_coverage,
        "xi": _cmd_xi,
        "couple": _cmd_couple,
        "regime": _cmd_regime,
        "petrov": _cmd_petrov,
        "unimodal-fuzz": _cmd_unimodal_fuzz,
    }[args.subcommand]
    try:
        _echo_config(args, args.out)
        return handler(args)
    except (ValueError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main(argv=None):
    return dispatch(argv)


def _results_path(args, name="results.jsonl"):
    return os.path.join(args.out, name)


def _cmd_race(args):
    feedback = parse_feedback(args.feedback)
    model = parse_model(args.model, feedback=feedback)
    initial = (_parse_csv_values(args.initial, int) if args.initial
               else [0] * args.agents)
    if args.events is not None:
        horizon = race_mod.EventHorizon(args.events)
    else:
        horizon = race_mod.TimeHorizon(args.t_max if args.t_max is not None else 10.0)
    config = race_mod.RaceConfig(args.agents, tuple(initial), model, horizon,
                                 seed=args.seed)
    traj = race_mod.simulate_race(config)
    path = _results_path(args, f"race_events.{args.format}")
    if args.format == "jsonl":
        race_mod.dump_events_jsonl(traj, path)
    else:
        race_mod.dump_events_csv(traj, path)
    print(f"final values: {traj.final_values}  events: {traj.event_count}  "
          f"exploded: {traj.exploded}")
    print(f"wrote {path}")
    return 0


def _cmd_urn(args):
    feedback = parse_feedback(args.feedback)
    initial = (_parse_csv_values(args.initial, int) if args.initial
               else [1] * args.agents)
    state = urn_mod.UrnState(tuple(initial))
    recorder = urn_mod.UrnTrajectoryRecorder(state)
    rng = montecarlo.derive_rng(args.seed, 0)
    final = urn_mod.run_urn(state, feedback, args.steps, rng, observer=recorder)
    path = _results_path(args, "urn_trajectory.csv")
    recorder.write_csv(path)
    print(f"final counts: {final.counts}")
    print(f"wrote {path}")
    return 0


def _cmd_coverage(args):
    params = {"agents": args.agents, "feedback": args.feedback,
              "steps": args.steps, "policy": args.policy}
    if args.engine:
        params["engine"] = args.engine
    spec = ExperimentSpec("coverage", params, args.replicates, args.seed,
                          output_path=_results_path(args))
    result = run_experiment(spec, workers=args.workers)
    s = result.summary
    print(f"full coverage in {s['full_count']}/{s['replicates']} replicates "
          f"(policy {s['policy']}, {s['steps']} steps)")
    merged_hits = s["merged"]["first_hit"]
    print(f"merged first hits (lexicographic): {merged_hits}")
    print(f"wrote {spec.output_path}")
    if args.check and s["full_fraction"] < args.min_full_fraction:
        print(f"check FAILED: full fraction {s['full_fraction']:.3f} < "
              f"{args.min_full_fraction}", file=sys.stderr)
        return 1
    return 0


def _cmd_xi(args):
    params = {"agents": args.agents, "feedback": args.feedback,
              "family": args.model, "times": _parse_csv_values(args.t, float)}
    if args.shifts:
        params["shift_mode"] = "fixed"
        params["shifts"] = _parse_csv_values(args.shifts, float)
    elif args.shift_max is not None:
        params["shift_mode"] = "uniform"
        params["shift_max"] = args.shift_max
    spec = ExperimentSpec("xi_convergence", params, args.replicates, args.seed,
                          output_path=_results_path(args))
    result = run_experiment(spec, workers=args.workers)
    target = result.summary["target"]
    print(f"target 1/A! = {target:.6f}")
    worst = 0.0
    for row in result.rows:
        dev = abs(row["mean"] - target)
        sigma = dev / row["stderr"] if row["stderr"] > 0 else math.inf
        worst = max(worst, sigma)
        print(f"pi={tuple(row['permutation'])} t={row['time']:g} "
              f"mean={row['mean']:.6f} +/- {row['stderr']:.6f}")
    print(f"wrote {spec.output_path}")
    if args.check and worst > _CHECK_SIGMAS:
        print(f"check FAILED: worst deviation {worst:.2f} sigma > {_CHECK_SIGMAS}",
              file=sys.stderr)
        return 1
    return 0


def _cmd_couple(args):
    params = {"feedback": args.feedback,
              "initial": _parse_csv_values(args.initial, int), "k": args.k}
    spec = ExperimentSpec("coupling", params, args.replicates, args.seed,
                          output_path=_results_path(args))
    result = run_experiment(spec, workers=args.workers)
    s = result.summary
    print(f"chi-square {s['chi_square']:.3f} on {s['degrees_of_freedom']} dof, "
          f"p = {s['p_value']:.5f} ({s['arithmetic']} enumeration)")
    print(f"wrote {spec.output_path}")
    if args.check and s["p_value"] <= args.p_threshold:
        print(f"check FAILED: p = {s['p_value']:.5f} <= {args.p_threshold}",
              file=sys.stderr)
        return 1
    return 0


def _cmd_regime(args):
    params = {"feedback": args.feedback, "family": args.model,
              "lambda": _parse_csv_values(args.lam, float)}
    if args.j_max:
        params["j_max"] = args.j_max
    if args.fixation_agents:
        params["fixation"] = {"agents": args.fixation_agents,
                              "checkpoints": _parse_csv_values(args.checkpoints, int)}
    spec = ExperimentSpec("regime", params, args.replicates, args.seed,
                          output_path=_results_path(args))
    result = run_experiment(spec, workers=args.workers)
    s = result.summary
    print(s["verdict"])
    for lam, verdict in s["verdicts"].items():
        print(f"  lambda={lam}: {verdict}")
    if "fixation" in s:
        f = s["fixation"]
        print(f"leader agreement between steps {f['checkpoints']}: "
              f"{f['agreement_count']}/{f['replicates']}")
    print(f"wrote {spec.output_path}")
    if args.check and args.expect and s["verdict"] != args.expect:
        print(f"check FAILED: verdict {s['verdict']} != expected {args.expect}",
              file=sys.stderr)
        return 1
    return 0


def _cmd_petrov(args):
    params = {"feedback": args.feedback, "family": args.model,
              "n_grid": _parse_csv_values(args.n_grid, int), "lambda": args.lam,
              "samples": args.samples, "symmetrized": args.symmetrized}
    spec = ExperimentSpec("petrov", params, 1, args.seed,
                          output_path=_results_path(args))
    result = run_experiment(spec, workers=args.workers)
    print(f"{'n':>10} {'Q_hat':>12} {'sum_D':>12} {'product':>12}")
    for row in result.rows:
        print(f"{row['n']:>10} {row['q_hat']:>12.6f} {row['sum_d']:>12.4f} "
              f"{row['product']:>12.6f}" + ("  (vacuous)" if row["vacuous"] else ""))
    print(f"wrote {spec.output_path}")
    spread = result.summary.get("product_spread")
    if args.check and spread is not None and spread > args.band:
        print(f"check FAILED: product spread {spread:.3f} > band {args.band}",
              file=sys.stderr)
        return 1
    return 0


def _cmd_unimodal_fuzz(args):
    shapes = ("increasing", "unimodal") if args.case == "both" else (args.case,)
    failed = False
    reports = {}
    for shape in shapes:
        report = dispersion.run_unimodal_fuzz(args.trials, args.seed, shape=shape)
        reports[shape] = report.to_json()
        status = "ok" if report.passed else f"{len(report.violations)} VIOLATIONS"
        print(f"{shape}: {report.trials} trials, {status}")
        failed = failed or not report.passed
    path = _results_path(args, "unimodal_fuzz.json")
    with open(path, "w", newline="\n") as fh:
        json.dump(reports, fh, sort_keys=True, indent=2)
        fh.write("\n")
    print(f"wrote {path}")
    if args.check and failed:
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
