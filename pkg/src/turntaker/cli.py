"""Simulate turn-taking dialogues and measure the resulting logs.

Exit codes: 0 ok, 2 input error, 3 simulation failure, 4 decision mismatch on replay.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import tempfile
from dataclasses import fields
from pathlib import Path
from typing import Any, Sequence

from .engine import EngineInputError, TurnEngine
from .metrics import (
    DEFAULT_BIN_MS,
    AggregateReport,
    MetricsError,
    aggregate,
    compare,
    format_compare,
    format_histogram,
    format_records,
    format_table,
)
from .model import (
    ConfigError,
    EngineConfig,
    EngineEvent,
    LogFormatError,
    LogRecord,
    Policy,
    Session,
    decode_log,
    encode_log,
    is_input,
)
from .oracle import reference_decisions
from .simulator import (
    DEFAULT_CORPUS_ID,
    LatencyModel,
    Scenario,
    ScenarioError,
    SimulationError,
    default_corpus,
    dialogue_seed,
    run_dialogue,
)

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_SIMULATION = 3
EXIT_MISMATCH = 4

ENGINE_FIELDS = {f.name for f in fields(EngineConfig)}
LATENCY_FIELDS = {f.name for f in fields(LatencyModel)}


class InputError(Exception):
    """Bad user input; reported with exit code 2."""


# ---------------------------------------------------------------------------
# Files
# ---------------------------------------------------------------------------


def write_atomic(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as handle:
            handle.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _read_json(path: Path) -> Any:
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise InputError(f"{path}: cannot read ({exc.strerror})") from None
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from None


def load_scenario_file(path: Path) -> Scenario:
    try:
        return Scenario.from_dict(_read_json(path))
    except ScenarioError as exc:
        raise InputError(f"{path}: {exc}") from None


def load_scenarios(paths: Sequence[str]) -> list[Scenario]:
    out = []
    for raw in paths:
        path = Path(raw)
        if path.is_dir():
            files = sorted(path.glob("*.json"))
            if not files:
                raise InputError(f"{path}: no scenario files")
            out.extend(load_scenario_file(f) for f in files)
        else:
            out.append(load_scenario_file(path))
    ids = [s.id for s in out]
    duplicates = sorted({i for i in ids if ids.count(i) > 1})
    if duplicates:
        raise InputError(f"duplicate scenario id(s): {', '.join(duplicates)}")
    return out


def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="flat JSON file with EngineConfig and LatencyModel fields")
    group = parser.add_argument_group("configuration overrides (flags > --config file > defaults)")
    for cls in (EngineConfig, LatencyModel):
        for f in fields(cls):
            default = getattr(cls(), f.name)
            if f.name == "timeout_schedule":
                group.add_argument(
                    _flag(f.name), dest=f.name, default=None,
                    help=f"JSON list of [p_ts, ms] pairs (default {json.dumps([list(x) for x in default])})",
                )
            elif isinstance(default, bool):
                group.add_argument(
                    _flag(f.name), dest=f.name, default=None, type=_parse_bool, metavar="{true,false}",
                    help=f"default {str(default).lower()}",
                )
            else:
                group.add_argument(
                    _flag(f.name), dest=f.name, default=None, type=type(default), help=f"default {default}"
                )


def _parse_bool(text: str) -> bool:
    lowered = text.lower()
    if lowered in ("true", "1", "yes"):
        return True
    if lowered in ("false", "0", "no"):
        return False
    raise argparse.ArgumentTypeError(f"expected true or false, got {text!r}")


def resolve_config(args: argparse.Namespace) -> tuple[EngineConfig, LatencyModel]:
    """Defaults, then the --config file, then individual flags."""
    values: dict[str, Any] = {}
    if getattr(args, "config", None):
        data = _read_json(Path(args.config))
        if not isinstance(data, dict):
            raise InputError(f"{args.config}: expected a JSON object")
        unknown = sorted(set(data) - ENGINE_FIELDS - LATENCY_FIELDS)
        if unknown:
            raise InputError(f"{args.config}: unknown field(s) {', '.join(unknown)}")
        values.update(data)
    for name in ENGINE_FIELDS | LATENCY_FIELDS:
        value = getattr(args, name, None)
        if value is None:
            continue
        if name == "timeout_schedule":
            try:
                value = json.loads(value)
            except json.JSONDecodeError as exc:
                raise InputError(f"--timeout-schedule: {exc.msg}") from None
        values[name] = value
    try:
        config = EngineConfig.from_dict({k: v for k, v in values.items() if k in ENGINE_FIELDS})
        latency = LatencyModel.from_dict({k: v for k, v in values.items() if k in LATENCY_FIELDS})
    except (ConfigError, ValueError, TypeError) as exc:
        raise InputError(f"configuration: {exc}") from None
    return config, latency


def resolved_dict(config: EngineConfig, latency: LatencyModel) -> dict[str, Any]:
    return {**config.to_dict(), **latency.to_dict()}


def read_logs(paths: Sequence[str]) -> list[tuple[Path, list[LogRecord]]]:
    files: list[Path] = []
    for raw in paths:
        path = Path(raw)
        if path.is_dir():
            found = sorted(path.rglob("*.log"))
            if not found:
                raise InputError(f"{path}: no .log files")
            files.extend(found)
        else:
            files.append(path)
    out = []
    for path in files:
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as exc:
            raise InputError(f"{path}: cannot read ({exc.strerror})") from None
        try:
            out.append((path, decode_log(text)))
        except LogFormatError as exc:
            raise InputError(f"{path}:{exc.line_no}: {exc}") from None
    return out


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_run(args: argparse.Namespace) -> int:
    config, latency = resolve_config(args)
    if args.scenario:
        scenarios = load_scenarios(args.scenario)
        corpus_id = args.corpus_id or "custom"
    else:
        scenarios = default_corpus()
        corpus_id = args.corpus_id or DEFAULT_CORPUS_ID
    policies = [Policy.PROPOSED, Policy.BASELINE] if args.policy == "both" else [Policy(args.policy)]
    out = Path(args.out)
    outputs: dict[Path, str] = {}
    reports: list[AggregateReport] = []
    for policy in policies:
        logs = []
        for scenario in sorted(scenarios, key=lambda s: s.id):
            seed = scenario.seed if args.seed is None else dialogue_seed(args.seed, scenario.id)
            try:
                log = run_dialogue(scenario, policy, config, latency, seed, corpus_id)
            except (SimulationError, EngineInputError) as exc:
                print(f"error: simulation of {scenario.id} ({policy.value}) failed: {exc}", file=sys.stderr)
                return EXIT_SIMULATION
            logs.append(log)
            outputs[out / policy.value / f"{scenario.id}.log"] = encode_log(log)
        report = aggregate(logs, bin_ms=args.bin_ms)
        reports.append(report)
        outputs[out / policy.value / "report.jsonl"] = format_records([report])
    deltas = compare(reports[0], reports[1]) if len(reports) == 2 else []
    summary = format_table(reports)
    if deltas:
        summary += "\n" + format_compare(deltas, reports[0].policy, reports[1].policy)
    outputs[out / "report.txt"] = summary
    outputs[out / "report.jsonl"] = format_records(reports, deltas)
    for path, text in outputs.items():
        write_atomic(path, text)
    if not args.quiet:
        sys.stdout.write(summary)
    return EXIT_OK


def _recorded(log: Sequence[LogRecord]) -> tuple[list, list[list[EngineEvent]], list[int], list[list[int]]]:
    """Inputs, the decisions recorded after each, and 1-based line numbers of both."""
    inputs, decided, input_lines, decision_lines = [], [], [], []
    for line, record in enumerate(log, start=1):
        if is_input(record):
            inputs.append(record)
            decided.append([])
            input_lines.append(line)
            decision_lines.append([])
        elif isinstance(record, EngineEvent):
            if not inputs:
                raise InputError(f"line {line}: decision before any input")
            decided[-1].append(record)
            decision_lines[-1].append(line)
    return inputs, decided, input_lines, decision_lines


def _first_divergence(
    got: Sequence[Sequence[EngineEvent]], want: Sequence[Sequence[EngineEvent]], input_lines, decision_lines
) -> tuple[int, int] | None:
    """``(input index, log line)`` of the first difference."""
    for i, (g, w) in enumerate(zip(got, want)):
        if list(g) != list(w):
            for k, (a, b) in enumerate(zip(g, w)):
                if a != b:
                    return i, decision_lines[i][k]
            k = min(len(g), len(w))
            return i, decision_lines[i][k] if k < len(w) else input_lines[i]
    return None


def cmd_replay(args: argparse.Namespace) -> int:
    config_override, latency = resolve_config(args)
    status = EXIT_OK
    for path, log in read_logs(args.logs):
        session = log[0] if log and isinstance(log[0], Session) else None
        if session is not None:
            try:
                config = EngineConfig.from_dict(json.loads(session.config))
            except (ConfigError, ValueError, TypeError) as exc:
                raise InputError(f"{path}:1: bad session config: {exc}") from None
            policy = Policy(session.policy)
            silence = session.baseline_silence_ms
        else:
            config, policy, silence = config_override, Policy(args.policy), latency.baseline_silence_ms
        inputs, recorded, input_lines, decision_lines = _recorded(log)
        checks = {}
        try:
            checks["engine"] = TurnEngine(config, policy, silence).run(inputs)
        except EngineInputError as exc:
            print(f"{path}: engine rejected the input stream: {exc}", file=sys.stderr)
            return EXIT_INPUT
        checks["oracle"] = reference_decisions(inputs, config, policy, silence)
        for name, got in checks.items():
            where = _first_divergence(got, recorded, input_lines, decision_lines)
            if where is not None:
                index, line = where
                print(f"{path}:{line}: {name} diverges at input event {index}", file=sys.stderr)
                status = EXIT_MISMATCH
                break
        else:
            if not args.quiet:
                print(f"{path}: ok ({len(inputs)} inputs)")
    return status


def _reports(paths: Sequence[str], bin_ms: int) -> list[AggregateReport]:
    logs = read_logs(paths)
    by_policy: dict[str, list] = {}
    corpora = set()
    for path, log in logs:
        if not log or not isinstance(log[0], Session):
            raise InputError(f"{path}: missing session header")
        by_policy.setdefault(log[0].policy, []).append(log)
        corpora.add(log[0].corpus_id)
    if len(corpora) > 1:
        raise InputError(f"logs from different corpora: {', '.join(sorted(corpora))}")
    try:
        return [aggregate(by_policy[p], bin_ms=bin_ms) for p in sorted(by_policy, reverse=True)]
    except MetricsError as exc:
        raise InputError(str(exc)) from None


def _emit(text: str, out: str | None) -> None:
    if out:
        write_atomic(Path(out), text)
    else:
        sys.stdout.write(text)


def cmd_report(args: argparse.Namespace) -> int:
    reports = _reports(args.logs, args.bin_ms)
    if args.format == "histogram":
        if args.policy:
            reports = [r for r in reports if r.policy == args.policy]
        if len(reports) != 1:
            raise InputError("histogram export needs logs of exactly one policy (use --policy)")
        _emit(format_histogram(reports[0].response), args.out)
        return EXIT_OK
    deltas = compare(reports[0], reports[1]) if len(reports) == 2 else []
    if args.format == "json":
        _emit(format_records(reports, deltas), args.out)
    else:
        text = format_table(reports)
        if deltas:
            text += "\n" + format_compare(deltas, reports[0].policy, reports[1].policy)
        _emit(text, args.out)
    return EXIT_OK


def cmd_compare(args: argparse.Namespace) -> int:
    (a,) = _single(_reports([args.a], args.bin_ms), args.a)
    (b,) = _single(_reports([args.b], args.bin_ms), args.b)
    try:
        deltas = compare(a, b)
    except MetricsError as exc:
        raise InputError(str(exc)) from None
    if args.format == "json":
        _emit(format_records([a, b], deltas), args.out)
    else:
        _emit(format_compare(deltas, f"a:{a.policy}", f"b:{b.policy}"), args.out)
    return EXIT_OK


def _single(reports: list[AggregateReport], where: str) -> list[AggregateReport]:
    if len(reports) != 1:
        raise InputError(f"{where}: expected logs of a single policy")
    return reports


def cmd_dump_config(args: argparse.Namespace) -> int:
    config, latency = resolve_config(args)
    sys.stdout.write(json.dumps(resolved_dict(config, latency), indent=2) + "\n")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="turntaker", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="simulate scenarios and write logs plus a report")
    run.add_argument("--scenario", action="append", help="scenario JSON file or directory (repeatable); default: bundled corpus")
    run.add_argument("--policy", choices=["proposed", "baseline", "both"], default="proposed")
    run.add_argument("--seed", type=int, default=None, help="master seed; per-dialogue seeds are derived from it and the scenario id")
    run.add_argument("--out", required=True, help="output directory")
    run.add_argument("--corpus-id", default=None)
    run.add_argument("--bin-ms", type=int, default=DEFAULT_BIN_MS)
    run.add_argument("--quiet", action="store_true")
    add_config_flags(run)
    run.set_defaults(func=cmd_run)

    replay = sub.add_parser("replay", help="re-check recorded decisions against the engine and the reference interpreter")
    replay.add_argument("logs", nargs="+", help="log files or directories")
    replay.add_argument("--mode", choices=["check"], default="check")
    replay.add_argument("--policy", choices=["proposed", "baseline"], default="proposed", help="for logs without a session header")
    replay.add_argument("--quiet", action="store_true")
    add_config_flags(replay)
    replay.set_defaults(func=cmd_replay)

    report = sub.add_parser("report", help="response-time and interruption report")
    report.add_argument("logs", nargs="+", help="log files or directories")
    report.add_argument("--format", choices=["table", "json", "histogram"], default="table")
    report.add_argument("--bin-ms", type=int, default=DEFAULT_BIN_MS)
    report.add_argument("--policy", choices=["proposed", "baseline"], default=None)
    report.add_argument("--out", default=None)
    report.set_defaults(func=cmd_report)

    cmp_ = sub.add_parser("compare", help="per-metric delta and ratio between two log sets")
    cmp_.add_argument("a")
    cmp_.add_argument("b")
    cmp_.add_argument("--format", choices=["table", "json"], default="table")
    cmp_.add_argument("--bin-ms", type=int, default=DEFAULT_BIN_MS)
    cmp_.add_argument("--out", default=None)
    cmp_.set_defaults(func=cmd_compare)

    dump = sub.add_parser("dump-config", help="print the fully resolved configuration")
    add_config_flags(dump)
    dump.set_defaults(func=cmd_dump_config)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "bin_ms", 1) <= 0:
        parser.error("--bin-ms must be positive")
    try:
        return args.func(args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
