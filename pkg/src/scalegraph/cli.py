"""Command-line entry point.

Three commands map to the experiment suite and the protocol simulator:

  shard-size    required shard size per network size (CSV)
  failure-prob  observed vs analytic failure probability sweeps (CSV)
  protocol      run a scenario file, dump the trace, check assertions

Every run writes a manifest (<out>.manifest.json) holding the resolved
parameter set; `scalegraph replay manifest.json` re-executes it and
reproduces the output byte for byte.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from fractions import Fraction
from typing import Any, Dict, List, Optional

from . import __version__
from .scenario import (
    ScenarioError,
    evaluate_assertions,
    load_scenario,
    run_scenario,
)
from .security_sim import (
    RESULT_CSV_HEADER,
    ExperimentConfig,
    InfeasibleParameters,
    compare_to_analytic,
    find_required_shard_size,
    result_csv_row,
    run_experiment,
)

DEFAULT_SEED_ENV = "SCALEGRAPH_SEED"


def _resolve_seed(value: Optional[int]) -> int:
    if value is not None:
        return value
    env = os.environ.get(DEFAULT_SEED_ENV)
    return int(env) if env is not None else 0


def _parse_int_list(text: str) -> List[int]:
    """Comma list ('11,21,31') or range ('11:101:10', end inclusive)."""
    if ":" in text:
        parts = [int(p) for p in text.split(":")]
        if len(parts) == 2:
            start, stop = parts
            step = 1
        elif len(parts) == 3:
            start, stop, step = parts
        else:
            raise ValueError(f"bad range spec {text!r}")
        return list(range(start, stop + 1, step))
    return [int(p) for p in text.split(",") if p]


def _write_output(path: str, content: str) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(content)


def _write_manifest(command: str, params: Dict[str, Any], outputs: List[str], duration: float) -> str:
    manifest = {
        "command": command,
        "version": __version__,
        "params": params,
        "outputs": outputs,
        "duration_seconds": round(duration, 3),
    }
    path = outputs[0] + ".manifest.json"
    _write_output(path, json.dumps(manifest, indent=2) + "\n")
    return path


# --- command implementations -------------------------------------------------------


def _exec_shard_size(params: Dict[str, Any]) -> Dict[str, str]:
    F = Fraction(params["byzantine_fraction"])
    lines = ["N,m,F,f,iterations,r,status,seed"]
    for n in params["nodes"]:
        m = params["shards_per_node"] * n
        status = "ok"
        r_text = ""
        try:
            r, total = find_required_shard_size(
                N=n,
                F=F,
                f_model=params["tolerance"],
                seed=params["seed"],
                repetitions=params["repetitions"],
                iterations=params["iterations"],
                m=m,
                bits=params["bits"],
            )
            r_text = str(r)
            iterations_text = str(total)
        except (InfeasibleParameters, ValueError) as exc:
            status = "infeasible"
            iterations_text = "0"
            print(f"N={n}: {exc}", file=sys.stderr)
        lines.append(
            f"{n},{m},{F},{params['tolerance']},{iterations_text},"
            f"{r_text},{status},{params['seed']}"
        )
    return {params["out"]: "\n".join(lines) + "\n"}


def _exec_failure_prob(params: Dict[str, Any]) -> Dict[str, str]:
    F = Fraction(params["byzantine_fraction"])
    header = RESULT_CSV_HEADER + ",analytic_at_m,analytic_at_n,analytic_at_n_over_r"
    lines = [header]
    base = ExperimentConfig(
        N=params["nodes"],
        m=params["shards"],
        r=params.get("shard_size") or 1,
        F=F,
        f_model=params["tolerance"],
        repetitions=params["repetitions"],
        iterations=params["iterations"],
        seed=params["seed"],
        bits=params["bits"],
    )
    if params.get("shard_sizes"):
        rows = compare_to_analytic(base, params["shard_sizes"], workers=params["workers"])
        for row, r in zip(rows, params["shard_sizes"]):
            config = ExperimentConfig(
                N=base.N, m=base.m, r=r, F=F, f_model=base.f_model,
                repetitions=base.repetitions, iterations=base.iterations,
                seed=base.seed, bits=base.bits,
            )
            total = config.total_iterations
            compromised = round(row.observed * total)
            lines.append(
                f"{base.N},{base.m},{r},{F},{base.f_model},{total},{compromised},"
                f"{row.observed!r},{row.stderr!r},{base.seed},"
                f"{row.analytic_at_m!r},{row.analytic_at_n!r},{row.analytic_at_n_over_r!r}"
            )
    else:
        from .security_sim import failure_probability, hypergeometric_p

        r = params["shard_size"]
        p = hypergeometric_p(base.N, base.byzantine_count, r, base.f_model)
        for m in params["shard_counts"]:
            config = ExperimentConfig(
                N=base.N, m=m, r=r, F=F, f_model=base.f_model,
                repetitions=base.repetitions, iterations=base.iterations,
                seed=base.seed, bits=base.bits,
            )
            result = run_experiment(config, workers=params["workers"])
            lines.append(
                result_csv_row(result)
                + f",{failure_probability(p, m)!r},{failure_probability(p, base.N)!r},"
                f"{failure_probability(p, base.N / r)!r}"
            )
    return {params["out"]: "\n".join(lines) + "\n"}


def _exec_protocol(params: Dict[str, Any]) -> Dict[str, str]:
    sc = load_scenario(params["scenario"])
    if params.get("seed") is not None:
        sc.seed = params["seed"]
    trace, world = run_scenario(sc)
    results = evaluate_assertions(trace, world)
    report_lines = [r.line() for r in results]
    if world.sim.horizon_exceeded:
        report_lines.append("[WARN] horizon exceeded with unresolved transactions")
    report = "\n".join(report_lines) + ("\n" if report_lines else "")
    outputs = {params["out"]: trace.to_jsonl()}
    report_path = params["out"] + ".report.txt"
    outputs[report_path] = report
    params["_assertions_failed"] = any(not r.ok for r in results)
    return outputs


_EXECUTORS = {
    "shard-size": _exec_shard_size,
    "failure-prob": _exec_failure_prob,
    "protocol": _exec_protocol,
}


def _run_command(command: str, params: Dict[str, Any]) -> int:
    start = time.time()
    outputs = _EXECUTORS[command](params)
    for path, content in outputs.items():
        _write_output(path, content)
    failed = params.pop("_assertions_failed", False)
    manifest_path = _write_manifest(command, params, list(outputs), time.time() - start)
    for path in outputs:
        print(f"wrote {path}")
    print(f"wrote {manifest_path}")
    if command == "protocol":
        report_path = params["out"] + ".report.txt"
        with open(report_path, "r", encoding="utf-8") as fh:
            sys.stdout.write(fh.read())
    return 1 if failed else 0


# --- argument parsing ----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="scalegraph",
        description="Sharded-ledger security experiments and protocol simulator",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    shard = sub.add_parser("shard-size", help="required shard size per network size")
    shard.add_argument("--nodes", required=True, help="network sizes, e.g. 1000,2000")
    shard.add_argument("--byzantine-fraction", required=True, help="e.g. 1/5")
    shard.add_argument("--tolerance", choices=["1/2", "1/3"], default="1/2")
    shard.add_argument("--shards-per-node", type=int, default=2, help="m = this * N")
    shard.add_argument("--repetitions", type=int, default=20)
    shard.add_argument("--iterations", type=int, default=5000)
    shard.add_argument("--bits", type=int, default=32)
    shard.add_argument("--seed", type=int)
    shard.add_argument("--workers", type=int, default=1)
    shard.add_argument("--out", required=True)

    prob = sub.add_parser("failure-prob", help="failure probability sweeps")
    prob.add_argument("--nodes", type=int, required=True)
    prob.add_argument("--shards", type=int, required=True, help="m for shard-size sweeps")
    prob.add_argument("--byzantine-fraction", required=True)
    prob.add_argument("--tolerance", choices=["1/2", "1/3"], default="1/2")
    prob.add_argument("--shard-sizes", help="sweep r, e.g. 11:101:10")
    prob.add_argument("--shard-counts", help="sweep m, e.g. 1000,4000,16000")
    prob.add_argument("--shard-size", type=int, help="fixed r for m sweeps")
    prob.add_argument("--repetitions", type=int, default=100)
    prob.add_argument("--iterations", type=int, default=5000)
    prob.add_argument("--bits", type=int, default=32)
    prob.add_argument("--seed", type=int)
    prob.add_argument("--workers", type=int, default=1)
    prob.add_argument("--out", required=True)

    proto = sub.add_parser("protocol", help="run a scenario file")
    proto.add_argument("scenario", help="path to scenario JSON")
    proto.add_argument("--seed", type=int, help="override scenario seed")
    proto.add_argument("--out", required=True, help="trace output (JSON lines)")

    rep = sub.add_parser("replay", help="re-run a command from its manifest")
    rep.add_argument("manifest", help="path to a .manifest.json file")

    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)

    try:
        if args.command == "shard-size":
            params = {
                "nodes": _parse_int_list(args.nodes),
                "byzantine_fraction": args.byzantine_fraction,
                "tolerance": args.tolerance,
                "shards_per_node": args.shards_per_node,
                "repetitions": args.repetitions,
                "iterations": args.iterations,
                "bits": args.bits,
                "seed": _resolve_seed(args.seed),
                "workers": args.workers,
                "out": args.out,
            }
            return _run_command("shard-size", params)

        if args.command == "failure-prob":
            if not args.shard_sizes and not args.shard_counts:
                parser.error("need --shard-sizes or --shard-counts")
            if args.shard_counts and not args.shard_size:
                parser.error("--shard-counts requires --shard-size")
            params = {
                "nodes": args.nodes,
                "shards": args.shards,
                "byzantine_fraction": args.byzantine_fraction,
                "tolerance": args.tolerance,
                "shard_sizes": _parse_int_list(args.shard_sizes) if args.shard_sizes else None,
                "shard_counts": _parse_int_list(args.shard_counts) if args.shard_counts else None,
                "shard_size": args.shard_size,
                "repetitions": args.repetitions,
                "iterations": args.iterations,
                "bits": args.bits,
                "seed": _resolve_seed(args.seed),
                "workers": args.workers,
                "out": args.out,
            }
            return _run_command("failure-prob", params)

        if args.command == "protocol":
            scenario_doc = None
            with open(args.scenario, "r", encoding="utf-8") as fh:
                try:
                    scenario_doc = json.load(fh)
                except json.JSONDecodeError as exc:
                    print(
                        f"schema error: {args.scenario}:{exc.lineno}: {exc.msg}",
                        file=sys.stderr,
                    )
                    return 2
            params = {
                "scenario": scenario_doc,
                "scenario_path": args.scenario,
                "seed": args.seed,
                "out": args.out,
            }
            return _run_command("protocol", params)

        if args.command == "replay":
            with open(args.manifest, "r", encoding="utf-8") as fh:
                manifest = json.load(fh)
            command = manifest["command"]
            if command not in _EXECUTORS:
                print(f"unknown command in manifest: {command}", file=sys.stderr)
                return 2
            return _run_command(command, dict(manifest["params"]))

    except ScenarioError as exc:
        print(f"schema error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2

    parser.error("unknown command")
    return 2


if __name__ == "__main__":
    sys.exit(main())
