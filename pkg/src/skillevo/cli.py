"""Command-line entry points (``python -m skillevo <command>``).

Exit codes: 0 success, 1 usage or bad input, 2 a task failed or a check
did not hold, 3 internal error.
"""

from __future__ import annotations

import argparse
import csv
import glob
import io
import json
import os
import sys
from pathlib import Path
from typing import Any, Sequence, TextIO

from .bundle import load_bundle, validate_bundle, write_bundle
from .errors import (
    BundleError,
    ContractError,
    FixtureMissing,
    MalformedTrace,
    NotABundle,
    SkillEvoError,
    TaskSpecError,
)
from .evaluation import (
    export_report,
    iteration_stats,
    read_records,
    report_from_records,
    run_benchmark,
    transfer_evaluate,
)
from .evolution import EvolutionConfig, render_summary, run_evolution
from .policy import load_scripted, make_remote
from .scenarios import BASELINE_COMMANDS, load_replay_dir, make_script_runner
from .solver import make_solver
from .tasks import load_corpus, load_task
from .trace import SEALED, TraceLog, parse_trace, strip_wall_time

EXIT_OK, EXIT_USAGE, EXIT_TASK_FAILED, EXIT_INTERNAL = 0, 1, 2, 3
SEALED_DIR = ".sealed"
CONFIRM_WORD = "unseal"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # argparse exits 2 by default; usage is 1 here
        self.print_usage(sys.stderr)
        raise UsageError(message)


TARGETS = {
    "solver": lambda: make_solver(BASELINE_COMMANDS, session_id="gen-solver"),
    "runner": lambda: make_script_runner(),
    "ignore-skills": lambda: make_solver(BASELINE_COMMANDS, ignore_skills=True, session_id="gen-ignore"),
}


def _target(name: str):
    if name not in TARGETS:
        raise UsageError(f"unknown target {name!r}; choose from {', '.join(TARGETS)}")
    return TARGETS[name]()


def _load_config(path: str | None, mode: str | None, seed: int | None) -> EvolutionConfig:
    data: dict[str, Any] = {}
    if path:
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {path}: {exc}") from None
    if mode:
        data["mode"] = mode
    if seed is not None:
        data["seed"] = seed
    try:
        return EvolutionConfig.from_mapping(data)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad config: {exc}") from None


def _policies(args: argparse.Namespace):
    if args.scripted:
        root = Path(args.scripted)
        gen = load_scripted(root / "generator", "generator") if (root / "generator").is_dir() else None
        ver = load_scripted(root / "verifier", "verifier") if (root / "verifier").is_dir() else None
        return gen, ver
    if args.generator_endpoint:
        gen = make_remote(args.generator_endpoint, "generator", args.auth_env, seed=args.seed or 0)
        ver = make_remote(args.verifier_endpoint or args.generator_endpoint, "verifier", args.auth_env,
                          seed=args.seed or 0)
        return gen, ver
    raise UsageError("evolve needs --scripted DIR or --generator-endpoint URL")


def _write_trace(log: TraceLog, out: Path) -> Path:
    path = log.write(out / "trace.jsonl")
    sealed = out / SEALED_DIR
    sealed.mkdir(exist_ok=True)
    os.chmod(sealed, 0o700)
    log.write(sealed / "trace.jsonl", unseal=True)
    return path


def cmd_evolve(args: argparse.Namespace, out: TextIO) -> int:
    cfg = _load_config(args.config, args.mode, args.seed)
    spec = load_task(args.task)
    gen, ver = _policies(args)
    dest = Path(args.out or f"runs/{spec.task_id}")
    dest.mkdir(parents=True, exist_ok=True)
    log = TraceLog(spec.task_id)
    outcome = run_evolution(spec, cfg, gen, ver, spec.oracle_suite, trace=log, target=_target(args.target))
    _write_trace(log, dest)
    (dest / "evolution_summary.md").write_text(render_summary(outcome), encoding="utf-8")
    if outcome.final is not None:
        write_bundle(outcome.final, dest / "skill")
    out.write(f"{spec.task_id}: {outcome.state.status}, {len(log)} events, output in {dest}\n")
    return EXIT_OK if outcome.final_score == 1 else EXIT_TASK_FAILED


def _load_skills(directory: str | None) -> dict:
    if not directory:
        return {}
    root = Path(directory)
    if not root.is_dir():
        raise UsageError(f"{root} is not a directory")
    try:
        return {p.name: load_bundle(p) for p in sorted(root.iterdir()) if (p / "SKILL.md").is_file()}
    except BundleError as exc:
        raise UsageError(f"bad skill bundle under {root}: {exc}") from None


def _emit_records(records: Sequence, path: str | None) -> None:
    if path:
        Path(path).write_bytes(export_report(records, "jsonl"))


def cmd_bench(args: argparse.Namespace, out: TextIO) -> int:
    tasks = load_corpus(args.corpus)
    bundles = _load_skills(args.skills)
    report = run_benchmark(tasks, bundles, _target(args.target), args.runs, workers=args.workers,
                           condition="evolved" if bundles else "no_skill")
    out.write(export_report(report, "table_text").decode())
    _emit_records(report.records, args.records)
    return EXIT_OK if all(r.passed for r in report.records) else EXIT_TASK_FAILED


def cmd_transfer(args: argparse.Namespace, out: TextIO) -> int:
    bundles = _load_skills(args.skills)
    tasks = load_corpus(args.corpus)
    targets = [_target(t.strip()) for t in args.targets.split(",") if t.strip()]
    if not targets:
        raise UsageError("--targets needs at least one target")
    results = transfer_evaluate(bundles, args.source, targets, tasks, args.runs, workers=args.workers)
    records = []
    for res in results:
        out.write(f"target {res.target}: transferred {res.transferred.mean}, no_skill {res.no_skill.mean}, "
                  f"delta {res.delta}\n")
        records += list(res.transferred.records) + list(res.no_skill.records)
    _emit_records(records, args.records)
    return EXIT_OK if all(res.delta > 0 for res in results) else EXIT_TASK_FAILED


def cmd_stats(args: argparse.Namespace, out: TextIO) -> int:
    paths = sorted(glob.glob(args.traces))
    traces = []
    for p in paths:
        with open(p, encoding="utf-8") as fh:
            try:
                traces.append(parse_trace(fh))
            except MalformedTrace as exc:
                raise UsageError(f"{p}: {exc}") from None
    stats = iteration_stats(traces)
    out.write(export_report(stats, args.format).decode())
    return EXIT_OK


def cmd_validate(args: argparse.Namespace, out: TextIO) -> int:
    bundle = load_bundle(args.bundle, strict=False)
    report = validate_bundle(bundle)
    out.write(report.to_lines() or "ok\n")
    return EXIT_OK if report.passed else EXIT_TASK_FAILED


def cmd_replay(args: argparse.Namespace, out: TextIO) -> int:
    expected = Path(args.trace).read_text(encoding="utf-8")
    scenario = load_replay_dir(args.scripted)
    log = TraceLog(scenario.spec.task_id)
    scenario.run(log)
    got = log.to_text(unseal=False)
    unseal = f'"{SEALED}"' not in expected
    same = strip_wall_time(expected) == strip_wall_time(log.to_text(unseal=unseal))
    if same:
        out.write(f"replay matches ({len(log)} events)\n")
        return EXIT_OK
    out.write("replay diverged\n")
    if args.diff_out:
        Path(args.diff_out).write_text(got, encoding="utf-8")
    return EXIT_TASK_FAILED


def _confirm(stdin: TextIO, out: TextIO) -> bool:
    out.write(f"Unsealing reveals hidden oracle scores. Type '{CONFIRM_WORD}' to continue: ")
    out.flush()
    return stdin.readline().strip() == CONFIRM_WORD


def _rows_table(rows: list[dict[str, Any]], fmt: str) -> str:
    fields: list[str] = []
    for row in rows:
        fields += [k for k in row if k not in fields]
    if fmt == "jsonl":
        return "".join(json.dumps(r, separators=(",", ":")) + "\n" for r in rows)
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
        return buf.getvalue()
    widths = {f: max([len(f)] + [len(str(r.get(f, ""))) for r in rows]) for f in fields}
    lines = ["  ".join(f.ljust(widths[f]) for f in fields).rstrip()]
    lines += ["  ".join(str(r.get(f, "")).ljust(widths[f]) for f in fields).rstrip() for r in rows]
    return "\n".join(lines) + "\n"


def cmd_report(args: argparse.Namespace, out: TextIO, stdin: TextIO) -> int:
    path = Path(args.records)
    if args.unseal:
        if not _confirm(stdin, out):
            out.write("\nnot confirmed; nothing unsealed\n")
            return EXIT_USAGE
        out.write("\n")
        path = path.parent / SEALED_DIR / path.name
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise UsageError(f"cannot read {path}: {exc.strerror}") from None
    first = next((ln for ln in text.splitlines() if ln.strip()), "{}")
    if "kind" in json.loads(first):
        try:
            events = parse_trace(text.splitlines())
        except MalformedTrace as exc:
            raise UsageError(str(exc)) from None
        rows = [{"step": e.step, "kind": e.kind, "task": e.task_id, **e.payload} for e in events]
        for row in rows:
            row.pop("text", None)  # diagnostics are long free text; keep the table readable
        out.write(_rows_table(rows, "jsonl" if args.format == "jsonl" else args.format))
        return EXIT_OK
    records = read_records(text)
    fmt = {"table": "table_text"}.get(args.format, args.format)
    if fmt != "table_text":
        out.write(export_report(records, fmt).decode())
    else:
        for condition in sorted({r.condition for r in records}):
            out.write(export_report(report_from_records(condition, records), fmt).decode())
    return EXIT_OK if all(r.passed for r in records) else EXIT_TASK_FAILED


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="python -m skillevo", description="Co-evolve, benchmark and analyse skill bundles.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    e = sub.add_parser("evolve", help="evolve a skill for one task")
    e.add_argument("task", help="task.spec file or task directory")
    e.add_argument("--config", help="JSON file with EvolutionConfig fields (N or K, M, beta, ...)")
    e.add_argument("--mode", choices=("full", "no_verifier", "no_evolution", "no_skill"))
    e.add_argument("--seed", type=int)
    e.add_argument("--scripted", help="directory with generator/ and verifier/ numbered responses")
    e.add_argument("--generator-endpoint")
    e.add_argument("--verifier-endpoint")
    e.add_argument("--auth-env", help="environment variable holding the endpoint bearer secret")
    e.add_argument("--target", default="solver", help=f"oracle target policy: {', '.join(TARGETS)}")
    e.add_argument("--out", help="output directory (default runs/<task id>)")

    b = sub.add_parser("bench", help="pass rate of a corpus with or without skills")
    b.add_argument("corpus")
    b.add_argument("--skills", help="directory of <task id>/ skill bundles")
    b.add_argument("--runs", type=int, default=1)
    b.add_argument("--workers", type=int, default=10)
    b.add_argument("--target", default="solver")
    b.add_argument("--records", help="write run records (jsonl) here")

    t = sub.add_parser("transfer", help="evaluate bundles under other target policies")
    t.add_argument("skills")
    t.add_argument("--targets", required=True, help=f"comma-separated: {', '.join(TARGETS)}")
    t.add_argument("--corpus", required=True)
    t.add_argument("--source", default="source")
    t.add_argument("--runs", type=int, default=1)
    t.add_argument("--workers", type=int, default=10)
    t.add_argument("--records")

    s = sub.add_parser("stats", help="verification-cycle statistics over trajectory logs")
    s.add_argument("traces", help="glob of trajectory logs")
    s.add_argument("--format", choices=("table_text", "csv", "jsonl"), default="table_text")

    v = sub.add_parser("validate-skill", help="lint a skill bundle directory")
    v.add_argument("bundle")

    r = sub.add_parser("replay", help="re-run a scripted evolution and compare its trajectory")
    r.add_argument("trace")
    r.add_argument("--scripted", required=True)
    r.add_argument("--diff-out", help="write the replayed trajectory here when it diverges")

    rep = sub.add_parser("report", help="render run records or a trajectory log")
    rep.add_argument("records")
    rep.add_argument("--format", choices=("csv", "jsonl", "table"), default="table")
    rep.add_argument("--unseal", action="store_true", help="show sealed oracle fields (asks for confirmation)")
    return p


def main(argv: Sequence[str] | None = None, *, stdout: TextIO | None = None, stdin: TextIO | None = None) -> int:
    out = stdout or sys.stdout
    inp = stdin or sys.stdin
    try:
        args = build_parser().parse_args(argv)
        handlers = {"evolve": cmd_evolve, "bench": cmd_bench, "transfer": cmd_transfer, "stats": cmd_stats,
                    "validate-skill": cmd_validate, "replay": cmd_replay}
        if args.command == "report":
            return cmd_report(args, out, inp)
        return handlers[args.command](args, out)
    except UsageError as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_USAGE
    except (TaskSpecError, ContractError, NotABundle, FixtureMissing, FileNotFoundError,
            NotADirectoryError) as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_USAGE
    except SkillEvoError as exc:
        sys.stderr.write(f"error: {type(exc).__name__}: {exc}\n")
        return EXIT_INTERNAL
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
