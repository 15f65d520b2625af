"""Command-line interface: run workflows, verify, replay, and explain.

Commands
    run              execute a workflow against a scenario or ad-hoc inputs
    verify           check an audit trail's hash chain
    replay           recompute a deterministic-mode decision from its trail
    explain          render the explainability report for a finished run
    validate-config  check a workflow definition without running it

Exit codes: 0 success, 1 failed check or unexpected error, 2 quorum not
met, 3 configuration problem (including rerun into an existing trail),
4 reasoner failure with fallback disallowed.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from typing import Optional, Sequence

from .audit import explain_document, explain_report, replay, verify_chain
from .errors import (
    AuditError,
    ConfigError,
    ConsortiumError,
    QuorumNotMet,
    ReasonerFailed,
    ReasonerOutputInvalid,
    ReplayDivergence,
    StorageError,
)
from .hashing import canonical_json
from .orchestrator import DEFAULT_GLOBAL_TIMEOUT_S, execute_run
from .workflows import (
    build_context,
    build_http_registry,
    load_backend_configs,
    load_scenario,
    load_workflow,
)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_QUORUM = 2
EXIT_CONFIG = 3
EXIT_REASONER = 4


def _split_pairs(pairs: Sequence[str], flag: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for pair in pairs:
        key, sep, value = pair.partition("=")
        if not sep or not key:
            raise ConfigError(f"{flag} expects key=value, got {pair!r}")
        if key in out:
            raise ConfigError(f"{flag} repeats key {key!r}")
        out[key] = value
    return out


def render_summary(decision_doc: dict) -> str:
    """Render the human summary from a decision document alone."""
    lines = [
        f"run {decision_doc['run_id']} "
        f"({decision_doc['schema_kind']}, {decision_doc['consolidation_mode']} mode)"
    ]
    for entry in decision_doc["entries"]:
        cites = ",".join(entry["provenance"]) or "none"
        flags = f" flags: {','.join(entry['flags'])}" if entry["flags"] else ""
        lines.append(
            f"  {entry['target']} = {entry['value']} "
            f"[{entry['confidence']}] cites: {cites}{flags}"
        )
    discarded = decision_doc["discarded"]
    if discarded:
        reasons: dict[str, int] = {}
        for item in discarded:
            reasons[item["reason"]] = reasons.get(item["reason"], 0) + 1
        breakdown = ", ".join(f"{r}: {n}" for r, n in sorted(reasons.items()))
        lines.append(f"discarded: {len(discarded)} ({breakdown})")
    else:
        lines.append("discarded: none")
    return "\n".join(lines)


def cmd_run(args: argparse.Namespace) -> int:
    definition = load_workflow(args.workflow)
    deterministic_only = args.deterministic_only
    if args.scenario:
        scenario = load_scenario(args.scenario)
        context = scenario.context
        registry = scenario.registry()
        deterministic_only = deterministic_only or scenario.deterministic_only
    else:
        context = build_context(
            _split_pairs(args.text, "--text"),
            _split_pairs(args.image, "--image"),
            _split_pairs(args.meta, "--meta"),
        )
        if not args.backends:
            raise ConfigError("--backends is required when no --scenario is given")
        registry = build_http_registry(
            load_backend_configs(args.backends), seed=args.seed
        )
    task = definition.build_task(
        context, run_id=args.run_id, quorum=args.quorum
    )
    os.makedirs(args.out, exist_ok=True)
    result = execute_run(
        task,
        registry,
        args.out,
        deterministic_only=deterministic_only,
        global_timeout_s=args.timeout,
    )
    with open(result.decision_path, encoding="utf-8") as handle:
        decision_doc = json.loads(handle.read())
    print(render_summary(decision_doc))
    print(f"decision: {result.decision_path}")
    print(f"trail: {result.trail_path}")
    return EXIT_OK


def cmd_verify(args: argparse.Namespace) -> int:
    broken = verify_chain(args.trail)
    if broken is None:
        print(f"{args.trail}: chain intact")
        return EXIT_OK
    print(f"{args.trail}: chain broken at seq {broken}")
    return EXIT_FAILURE


def cmd_replay(args: argparse.Namespace) -> int:
    try:
        replay(args.trail)
    except ReplayDivergence as exc:
        print(f"{args.trail}: replay diverged")
        for path in exc.diff:
            print(f"  {path}")
        return EXIT_FAILURE
    print(f"{args.trail}: replay reproduced the decision")
    return EXIT_OK


def cmd_explain(args: argparse.Namespace) -> int:
    if args.json:
        print(canonical_json(explain_document(args.trail)))
    else:
        print(explain_report(args.trail), end="")
    return EXIT_OK


def cmd_validate_config(args: argparse.Namespace) -> int:
    definition = load_workflow(args.workflow)
    print(
        f"{args.workflow}: ok "
        f"(workflow {definition.workflow_id}, "
        f"{len(definition.consortium)} members, quorum {definition.quorum})"
    )
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="consortium",
        description="Run multi-model consortium workflows with governed "
        "consolidation and auditable decisions.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="execute a workflow end to end")
    run.add_argument("--workflow", required=True, help="workflow definition file")
    run.add_argument("--out", required=True, help="output directory for artifacts")
    run.add_argument("--scenario", help="scripted scenario fixture file")
    run.add_argument(
        "--backends", help="backend endpoint config file (live runs)"
    )
    run.add_argument(
        "--text",
        action="append",
        default=[],
        metavar="ID=PATH",
        help="text input file bound to a source id",
    )
    run.add_argument(
        "--image",
        action="append",
        default=[],
        metavar="ID=PATH",
        help="image input file bound to a source id",
    )
    run.add_argument(
        "--meta",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="metadata entry",
    )
    run.add_argument("--run-id", help="override the derived run id")
    run.add_argument("--quorum", type=int, help="override the workflow quorum")
    run.add_argument(
        "--timeout",
        type=float,
        default=DEFAULT_GLOBAL_TIMEOUT_S,
        help="global fan-out timeout in seconds",
    )
    run.add_argument(
        "--deterministic-only",
        action="store_true",
        help="skip the reasoner; consolidate deterministically",
    )
    run.add_argument(
        "--seed",
        type=int,
        default=0,
        help="seed for retry backoff jitter on live backends",
    )
    run.set_defaults(func=cmd_run)

    verify = sub.add_parser("verify", help="verify a trail's hash chain")
    verify.add_argument("trail", help="audit trail file")
    verify.set_defaults(func=cmd_verify)

    replay_cmd = sub.add_parser(
        "replay", help="recompute a deterministic decision from its trail"
    )
    replay_cmd.add_argument("trail", help="audit trail file")
    replay_cmd.set_defaults(func=cmd_replay)

    explain = sub.add_parser("explain", help="render the explainability report")
    explain.add_argument("trail", help="audit trail file")
    explain.add_argument(
        "--json", action="store_true", help="emit the machine-readable document"
    )
    explain.set_defaults(func=cmd_explain)

    validate = sub.add_parser(
        "validate-config", help="validate a workflow definition"
    )
    validate.add_argument("workflow", help="workflow definition file")
    validate.set_defaults(func=cmd_validate_config)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except QuorumNotMet as exc:
        print(f"error: quorum not met ({exc.got} of {exc.needed} ok)", file=sys.stderr)
        return EXIT_QUORUM
    except (ConfigError, StorageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ReasonerFailed, ReasonerOutputInvalid) as exc:
        print(f"error: reasoner failed without fallback: {exc}", file=sys.stderr)
        return EXIT_REASONER
    except AuditError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ConsortiumError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
