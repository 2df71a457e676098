"""Command-line driver.

Subcommands: run (concrete execution), analyze (views, with or without
shortcuts), check (analysis + independent soundness check), compare
(precision of one policy's views against another's), generate (seeded
test programs).  Exit codes are part of the interface and documented in
the README; all output is byte-deterministic for fixed inputs.

Set DS_LOG=debug|info|warning to see driver logging on stderr.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from .analysis import (
    AnalysisSettings,
    IterationCapExceededError,
    NonEnumerableKeyError,
    initial_views,
    successors,
    views_to_json,
)
from .concrete import ConcreteValue, initial_state, run_concrete, state_to_json_line, value_to_json
from .domain import (
    AbstractValue,
    DomainMismatchError,
    EnvMismatchError,
    KSetDomain,
    PrimitiveDomain,
    SignDomain,
    join_value,
    value_from_primitive,
)
from .engine import ShortcutPolicy, analyze_with_shortcuts, compare_precision
from .generator import generate_program
from .lang import (
    UNDEF,
    Bool,
    Int,
    LangError,
    Program,
    Str,
    format_instr,
    format_program,
    parse_program,
    validate,
)
from .oracle import OracleCaps, check_soundness
from .sealed import Budgets

logger = logging.getLogger("dsa.cli")


class CliError(Exception):
    """A configuration problem: bad flags, unreadable files, bad input
    JSON, a program that does not parse or validate."""


# ---------------------------------------------------------------------------
# shared helpers

def _setup_logging() -> None:
    level_name = os.environ.get("DS_LOG", "").strip().upper()
    level = getattr(logging, level_name, None) if level_name else None
    logging.basicConfig(
        level=level if isinstance(level, int) else logging.WARNING,
        format="%(name)s %(levelname)s %(message)s",
        stream=sys.stderr,
    )


def _load_program(path: str) -> Program:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise CliError(f"cannot read program: {exc}") from exc
    try:
        program = parse_program(text)
    except LangError as exc:
        raise CliError(f"{path}: {exc}") from exc
    errors = [d for d in validate(program) if not d.warning]
    if errors:
        listing = "; ".join(f"label {d.label}: {d.message}" for d in errors)
        raise CliError(f"{path}: {listing}")
    return program


def _load_inputs_raw(spec: str | None) -> dict:
    if not spec:
        return {}
    s = spec.strip()
    if s.startswith("{"):
        text = s
    else:
        try:
            text = Path(spec).read_text()
        except OSError as exc:
            raise CliError(f"cannot read inputs: {exc}") from exc
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CliError(f"inputs are not valid JSON: {exc}") from exc
    if not isinstance(obj, dict):
        raise CliError("inputs must be a JSON object mapping variable names to values")
    return obj


def _concrete_value(name: str, raw: object) -> ConcreteValue:
    if isinstance(raw, bool):
        return Bool(raw)
    if isinstance(raw, int):
        return Int(raw)
    if isinstance(raw, str):
        return Str(raw)
    if raw is None:
        return UNDEF
    raise CliError(f"input {name!r}: expected an int, string, bool, or null")


def _abstract_value(domain: PrimitiveDomain, name: str, raw: object) -> AbstractValue:
    if isinstance(raw, dict):
        try:
            return AbstractValue(domain, domain.prims_from_json(raw))
        except (KeyError, TypeError, ValueError) as exc:
            raise CliError(f"input {name!r}: bad abstract value: {exc}") from exc
    if isinstance(raw, list):
        if not raw:
            raise CliError(f"input {name!r}: empty list denotes no value")
        parts = [value_from_primitive(domain, _concrete_value(name, r)) for r in raw]
        v = parts[0]
        for p in parts[1:]:
            v = join_value(v, p)
        return v
    return value_from_primitive(domain, _concrete_value(name, raw))


def _parse_domain(spec: str) -> PrimitiveDomain:
    if spec == "sign":
        return SignDomain()
    if spec == "kset":
        return KSetDomain()
    if spec.startswith("kset:"):
        try:
            k = int(spec.split(":", 1)[1])
        except ValueError as exc:
            raise CliError(f"bad domain {spec!r}") from exc
        if k < 1:
            raise CliError("kset bound must be at least 1")
        return KSetDomain(k)
    raise CliError(f"unknown domain {spec!r} (expected sign or kset[:k])")


def _emit(args: argparse.Namespace, text: str) -> None:
    if getattr(args, "out", None):
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)


def _json_text(obj: object) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


# ---------------------------------------------------------------------------
# subcommands

def _cmd_run(args: argparse.Namespace) -> int:
    program = _load_program(args.program)
    raw = _load_inputs_raw(args.inputs)
    bindings = {name: _concrete_value(name, v) for name, v in sorted(raw.items())}
    result = run_concrete(program, initial_state(program, bindings), args.budget_steps)
    payload = {
        "outcome": result.outcome,
        "steps": result.steps,
        "value": value_to_json(result.value) if result.value is not None else None,
        "reason": result.reason,
        "final": json.loads(state_to_json_line(result.trace[-1])),
    }
    if args.trace:
        payload["trace"] = [json.loads(state_to_json_line(s)) for s in result.trace]
    if args.format == "json":
        _emit(args, _json_text(payload))
    else:
        lines = []
        if args.trace:
            lines.extend(state_to_json_line(s) for s in result.trace)
        summary = f"{result.outcome} after {result.steps} steps"
        if result.outcome == "halt":
            summary += f": {json.dumps(value_to_json(result.value), sort_keys=True)}"
        elif result.reason:
            summary += f": {result.reason}"
        lines.append(summary)
        _emit(args, "\n".join(lines) + "\n")
    return {"halt": 0, "stuck": 1, "budget": 4}[result.outcome]


def _analysis_pieces(args: argparse.Namespace) -> tuple[Program, PrimitiveDomain, dict[str, AbstractValue]]:
    program = _load_program(args.program)
    domain = _parse_domain(args.domain)
    raw = _load_inputs_raw(args.inputs)
    bindings = {name: _abstract_value(domain, name, v) for name, v in sorted(raw.items())}
    return program, domain, bindings


def _run_engine(args: argparse.Namespace, program: Program, domain: PrimitiveDomain, bindings: dict[str, AbstractValue], policy: ShortcutPolicy):
    settings = AnalysisSettings(domain=domain)
    budgets = Budgets(max_steps=args.budget_steps, wall_ms=args.timeout_ms)
    return analyze_with_shortcuts(program, initial_views(program, domain, bindings), settings, policy, budgets)


def _views_graph(program: Program, result) -> str:
    settings = AnalysisSettings(domain=next(iter(result.views.values())).domain)
    lines = ["digraph views {", "  rankdir=LR;", '  node [shape=box, fontname="monospace"];']
    for label in sorted(result.views):
        instr = format_instr(program.instruction_at(label)).replace('"', '\\"')
        lines.append(f'  l{label} [label="{label}: {instr}"];')
    for label in sorted(result.views):
        targets = sorted({to for to, _ in successors(program, label, result.views[label], settings)})
        for to in targets:
            lines.append(f"  l{label} -> l{to};")
    lines.append("}")
    return "\n".join(lines) + "\n"


def _cmd_analyze(args: argparse.Namespace) -> int:
    program, domain, bindings = _analysis_pieces(args)
    policy = ShortcutPolicy.from_name(args.policy)
    try:
        result = _run_engine(args, program, domain, bindings, policy)
    except (NonEnumerableKeyError, IterationCapExceededError, EnvMismatchError) as exc:
        print(f"analysis failed: {exc}", file=sys.stderr)
        return 1
    if args.emit_graph:
        Path(args.emit_graph).write_text(_views_graph(program, result))
    payload = {
        "policy": policy.value,
        "iterations": result.iterations,
        "metrics": result.metrics.to_json(),
        "views": views_to_json(result.views),
        "events": [e.to_json() for e in result.events],
        "diagnostics": sorted(set(result.diagnostics)),
    }
    if args.format == "json":
        _emit(args, _json_text(payload))
    else:
        lines = [f"policy {policy.value}: fixpoint after {result.iterations} rounds"]
        m = result.metrics
        lines.append(
            f"transitions={m.abstract_transitions} sealed_steps={m.sealed_steps} shortcuts={m.shortcuts_taken}"
        )
        for label in sorted(result.views):
            lines.append(f"view {label}: {json.dumps(views_to_json(result.views)[str(label)], sort_keys=True)}")
        _emit(args, "\n".join(lines) + "\n")
    return 0


def _cmd_check(args: argparse.Namespace) -> int:
    program, domain, bindings = _analysis_pieces(args)
    policy = ShortcutPolicy.from_name(args.policy)
    entry = initial_views(program, domain, bindings)[program.entry]
    try:
        result = _run_engine(args, program, domain, bindings, policy)
    except (NonEnumerableKeyError, IterationCapExceededError, EnvMismatchError) as exc:
        print(f"analysis failed: {exc}", file=sys.stderr)
        return 1
    caps = OracleCaps(int_cap=args.cap_int, step_budget=args.budget_steps)
    report = check_soundness(program, entry, result.views, caps)
    payload = {"policy": policy.value, "soundness": report.to_json()}
    if args.format == "json":
        _emit(args, _json_text(payload))
    else:
        lines = [
            f"policy {policy.value}: checked {report.states_checked} concrete states"
            f" from {report.initial_states} entry states"
        ]
        for v in report.violations:
            lines.append(f"violation at label {v.label} [{v.kind}]: {v.detail}")
        for s in report.skipped:
            lines.append(f"skipped: {s}")
        lines.append("ok" if report.ok else f"{len(report.violations)} violations")
        _emit(args, "\n".join(lines) + "\n")
    return 0 if report.ok else 2


def _cmd_compare(args: argparse.Namespace) -> int:
    program, domain, bindings = _analysis_pieces(args)
    try:
        left = _run_engine(args, program, domain, bindings, ShortcutPolicy.from_name(args.left))
        right = _run_engine(args, program, domain, bindings, ShortcutPolicy.from_name(args.right))
        report = compare_precision(left.views, right.views)
    except DomainMismatchError as exc:
        print(f"cannot compare: {exc}", file=sys.stderr)
        return 3
    except (NonEnumerableKeyError, IterationCapExceededError, EnvMismatchError) as exc:
        print(f"analysis failed: {exc}", file=sys.stderr)
        return 1
    payload = {"left": args.left, "right": args.right, "precision": report.to_json()}
    if args.format == "json":
        _emit(args, _json_text(payload))
    else:
        lines = [f"{args.left} vs {args.right}"]
        for label, verdict in sorted(report.per_label.items()):
            lines.append(f"view {label}: {verdict}")
        lines.append(json.dumps(report.counts, sort_keys=True))
        _emit(args, "\n".join(lines) + "\n")
    return 0


def _cmd_generate(args: argparse.Namespace) -> int:
    domain = _parse_domain(args.domain)
    if args.max_lines < 2:
        raise CliError("--max-lines must be at least 2")
    program, views = generate_program(
        args.seed,
        max_lines=args.max_lines,
        max_calls=args.max_calls,
        use_objects=not args.no_objects,
        domain=domain,
        concrete_initial=args.concrete_initial,
        straight_line=args.straight_line,
    )
    entry = views[program.entry]
    inputs = {
        loc.name: domain.prims_to_json(v.prims)
        for loc, v in sorted(entry.memory.items(), key=lambda kv: kv[0].sort_key())
    }
    if args.format == "json":
        _emit(args, _json_text({"program": format_program(program), "inputs": inputs}))
    else:
        header = f"# inputs: {json.dumps(inputs, sort_keys=True)}"
        _emit(args, header + "\n" + format_program(program))
    return 0


# ---------------------------------------------------------------------------
# parser

def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dsa", description="Static analysis with sealed-execution shortcuts.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common_output(p: argparse.ArgumentParser) -> None:
        p.add_argument("--format", choices=("json", "text"), default="json")
        p.add_argument("--out", help="write output to this file instead of stdout")

    p_run = sub.add_parser("run", help="execute a program concretely")
    p_run.add_argument("--program", required=True)
    p_run.add_argument("--inputs", help="JSON object (inline or a file path) of concrete input values")
    p_run.add_argument("--budget-steps", type=int, default=100_000)
    p_run.add_argument("--trace", action="store_true", help="include every visited state")
    common_output(p_run)
    p_run.set_defaults(func=_cmd_run)

    def common_analysis(p: argparse.ArgumentParser) -> None:
        p.add_argument("--program", required=True)
        p.add_argument("--inputs", help="JSON object (inline or a file path) of entry bindings")
        p.add_argument("--domain", default="sign", help="sign or kset[:k]")
        p.add_argument("--budget-steps", type=int, default=100_000, help="per-sealed-run step budget")
        p.add_argument("--timeout-ms", type=int, default=5000, help="per-sealed-run wall-clock budget")

    p_an = sub.add_parser("analyze", help="compute per-label views")
    common_analysis(p_an)
    p_an.add_argument("--policy", choices=[p.value for p in ShortcutPolicy], default="off")
    p_an.add_argument("--emit-graph", help="also write a DOT graph of view transitions to this file")
    common_output(p_an)
    p_an.set_defaults(func=_cmd_analyze)

    p_ck = sub.add_parser("check", help="analyze, then check soundness against concrete runs")
    common_analysis(p_ck)
    p_ck.add_argument("--policy", choices=[p.value for p in ShortcutPolicy], default="every-view")
    p_ck.add_argument("--cap-int", type=int, default=4, help="enumeration range for open integer categories")
    common_output(p_ck)
    p_ck.set_defaults(func=_cmd_check)

    p_cp = sub.add_parser("compare", help="compare the precision of two policies' views")
    common_analysis(p_cp)
    p_cp.add_argument("--left", choices=[p.value for p in ShortcutPolicy], default="every-view")
    p_cp.add_argument("--right", choices=[p.value for p in ShortcutPolicy], default="off")
    common_output(p_cp)
    p_cp.set_defaults(func=_cmd_compare)

    p_gen = sub.add_parser("generate", help="generate a seeded test program")
    p_gen.add_argument("--seed", type=int, required=True)
    p_gen.add_argument("--max-lines", type=int, default=20)
    p_gen.add_argument("--max-calls", type=int, default=2)
    p_gen.add_argument("--no-objects", action="store_true")
    p_gen.add_argument("--concrete-initial", action="store_true")
    p_gen.add_argument("--straight-line", action="store_true")
    p_gen.add_argument("--domain", default="sign")
    common_output(p_gen)
    p_gen.set_defaults(func=_cmd_generate)

    return parser


def main(argv: list[str] | None = None) -> int:
    _setup_logging()
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
