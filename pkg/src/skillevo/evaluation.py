"""Benchmark pass rates, transfer deltas and iteration statistics."""

from __future__ import annotations

import csv
import io
import json
import time
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from decimal import Decimal, localcontext
from fractions import Fraction
from typing import Any, Iterable, Mapping, Sequence

from .bundle import SkillBundle
from .errors import ContractError, SkillEvoError, UnmappedTask
from .oracle import Oracle
from .policy import PolicyHandle
from .sandbox import TaskSpec
from .trace import TrajectoryEvent

DEFAULT_WORKERS = 10
NO_SKILL = "no_skill"


def _frac(text: Any) -> Fraction:
    return text if isinstance(text, Fraction) else Fraction(str(text))


def _fstr(value: Fraction) -> str:
    return f"{value.numerator}/{value.denominator}"


def to_decimal(value: Fraction, places: int = 12) -> Decimal:
    """Presentation-only conversion of an exact rational."""
    with localcontext() as ctx:
        ctx.prec = 40
        return (Decimal(value.numerator) / Decimal(value.denominator)).quantize(Decimal(1).scaleb(-places))


@dataclass(frozen=True)
class RunRecord:
    task_id: str
    condition: str
    run_index: int
    oracle_score: Fraction
    passed: bool
    elapsed_s: float = 0.0
    detail: str = ""

    def __post_init__(self) -> None:
        if self.passed != (self.oracle_score == 1):
            raise ValueError("passed must equal (oracle_score == 1)")

    @classmethod
    def scored(cls, task_id: str, condition: str, run_index: int, score: Fraction, elapsed_s: float = 0.0,
               detail: str = "") -> RunRecord:
        return cls(task_id, condition, run_index, score, score == 1, elapsed_s, detail)

    def to_record(self) -> dict[str, Any]:
        return {"task": self.task_id, "condition": self.condition, "run": self.run_index,
                "score": _fstr(self.oracle_score), "passed": self.passed, "elapsed_s": self.elapsed_s,
                "detail": self.detail}

    @classmethod
    def from_record(cls, rec: Mapping[str, Any]) -> RunRecord:
        return cls.scored(str(rec["task"]), str(rec["condition"]), int(rec["run"]), _frac(rec["score"]),
                          float(rec.get("elapsed_s", 0.0)), str(rec.get("detail", "")))


@dataclass(frozen=True)
class PassRateReport:
    condition: str
    per_run_rates: tuple[Fraction, ...]
    task_count: int
    run_count: int
    records: tuple[RunRecord, ...] = field(default=(), compare=False)

    @property
    def mean(self) -> Fraction | None:
        if not self.per_run_rates:
            return None
        return sum(self.per_run_rates, Fraction(0)) / len(self.per_run_rates)

    @property
    def variance(self) -> Fraction | None:
        """Sample variance (n - 1 denominator); 0 for a single run."""
        rates = self.per_run_rates
        if not rates:
            return None
        if len(rates) == 1:
            return Fraction(0)
        m = self.mean
        return sum(((r - m) ** 2 for r in rates), Fraction(0)) / (len(rates) - 1)

    @property
    def std(self) -> Decimal | None:
        var = self.variance
        if var is None:
            return None
        with localcontext() as ctx:
            ctx.prec = 40
            return (Decimal(var.numerator) / Decimal(var.denominator)).sqrt()

    @property
    def single_run(self) -> bool:
        """Flag: std is a convention (0), not an estimate."""
        return self.run_count == 1

    @property
    def passed_total(self) -> tuple[int, int]:
        return sum(r.passed for r in self.records), len(self.records)


def report_from_records(condition: str, records: Sequence[RunRecord]) -> PassRateReport:
    records = tuple(r for r in records if r.condition == condition)
    tasks = sorted({r.task_id for r in records})
    runs = sorted({r.run_index for r in records})
    rates = []
    for run in runs:
        in_run = [r for r in records if r.run_index == run]
        rates.append(Fraction(sum(r.passed for r in in_run), len(in_run)))
    return PassRateReport(condition, tuple(rates), len(tasks), len(runs), records)


def _one(task: TaskSpec, bundle: SkillBundle | None, target: PolicyHandle, condition: str, run_index: int,
         timeout_multiplier: float, sandbox_root: Any) -> RunRecord:
    start = time.monotonic()
    try:
        if task.oracle_suite is None:
            raise ContractError(f"task {task.task_id} has no hidden suite")
        score = Oracle(task.oracle_suite, sandbox_root=sandbox_root).evaluate(
            bundle, task, target, timeout_multiplier=timeout_multiplier, hint=bundle is not None)
    except (SkillEvoError, OSError) as exc:
        return RunRecord.scored(task.task_id, condition, run_index, Fraction(0), time.monotonic() - start,
                                f"error: {type(exc).__name__}: {exc}")
    return RunRecord.scored(task.task_id, condition, run_index, score.score, time.monotonic() - start)


def run_benchmark(tasks: Sequence[TaskSpec], bundles: Mapping[str, SkillBundle | None], target: PolicyHandle,
                  runs: int = 1, *, condition: str | None = None, workers: int = DEFAULT_WORKERS,
                  timeout_multiplier: float = 1.0, sandbox_root: Any = None) -> PassRateReport:
    """Evaluate every task ``runs`` times and aggregate exact pass rates.

    A task whose bundle is present gets it installed plus the availability
    hint. Per-task failures become failed records with a ``detail``.
    """
    if runs < 1:
        raise ValueError("runs must be at least 1")
    if condition is None:
        condition = "evolved" if any(bundles.get(t.task_id) for t in tasks) else NO_SKILL
    jobs = [(task, bundles.get(task.task_id), run) for run in range(runs) for task in tasks]
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        records = list(pool.map(lambda job: _one(job[0], job[1], target, condition, job[2], timeout_multiplier,
                                                 sandbox_root), jobs))
    return report_from_records(condition, records)


@dataclass(frozen=True)
class TransferResult:
    target: str
    transferred: PassRateReport
    no_skill: PassRateReport

    @property
    def delta(self) -> Fraction:
        return (self.transferred.mean or Fraction(0)) - (self.no_skill.mean or Fraction(0))


def transfer_evaluate(bundles: Mapping[str, SkillBundle | None], source_label: str,
                      targets: Sequence[PolicyHandle], tasks: Sequence[TaskSpec], runs: int = 1,
                      **kwargs: Any) -> list[TransferResult]:
    out = []
    for target in targets:
        moved = run_benchmark(tasks, bundles, target, runs, condition=f"transferred:{source_label}", **kwargs)
        bare = run_benchmark(tasks, {}, target, runs, condition=NO_SKILL, **kwargs)
        out.append(TransferResult(target.session_id, moved, bare))
    return out


# --- iteration statistics ----------------------------------------------------


@dataclass(frozen=True)
class TaskIterations:
    verification_cycles: int
    oracle_rounds: int
    converged: bool


@dataclass(frozen=True)
class IterationStats:
    per_task: Mapping[str, TaskIterations]
    cycle_histogram: Mapping[int, int]
    round_histogram: Mapping[int, int]

    @property
    def mean_cycles(self) -> Fraction | None:
        if not self.per_task:
            return None
        return Fraction(sum(t.verification_cycles for t in self.per_task.values()), len(self.per_task))

    @property
    def mean_oracle_rounds(self) -> Fraction | None:
        if not self.per_task:
            return None
        return Fraction(sum(t.oracle_rounds for t in self.per_task.values()), len(self.per_task))


def _count_trace(events: Sequence[TrajectoryEvent]) -> TaskIterations:
    kinds = Counter(e.kind for e in events)
    cycles = kinds["diagnostic_appended"] + kinds["checklist_blocked"] + kinds["oracle_evaluated"]
    return TaskIterations(cycles, kinds["oracle_evaluated"], kinds["early_exit"] > 0)


def iteration_stats(traces: Iterable[Sequence[TrajectoryEvent]]) -> IterationStats:
    """Cycle and oracle-round counts per task; events are grouped by task id."""
    per_task: dict[str, list[TrajectoryEvent]] = {}
    for index, trace in enumerate(traces):
        for event in trace:
            per_task.setdefault(event.task_id or f"trace-{index}", []).append(event)
    counted = {task: _count_trace(events) for task, events in per_task.items()}
    cycles = Counter(t.verification_cycles for t in counted.values())
    rounds = Counter(t.oracle_rounds for t in counted.values())
    return IterationStats(counted, dict(sorted(cycles.items())), dict(sorted(rounds.items())))


# --- per-domain breakdown ----------------------------------------------------


@dataclass(frozen=True)
class DomainRow:
    domain: str
    passed: int
    total: int
    baseline_passed: int = 0
    baseline_total: int = 0

    @property
    def rate(self) -> Fraction:
        return Fraction(self.passed, self.total) if self.total else Fraction(0)

    @property
    def baseline_rate(self) -> Fraction | None:
        return Fraction(self.baseline_passed, self.baseline_total) if self.baseline_total else None

    @property
    def delta(self) -> Fraction | None:
        base = self.baseline_rate
        return None if base is None else self.rate - base


def domain_breakdown(records: Sequence[RunRecord], domain_map: Mapping[str, str], *,
                     baseline: str | None = None) -> list[DomainRow]:
    """Group records by domain; records of ``baseline`` condition fill the delta columns."""
    for r in records:
        if r.task_id not in domain_map:
            raise UnmappedTask(r.task_id)
    rows: dict[str, list[int]] = {}
    for r in records:
        cell = rows.setdefault(domain_map[r.task_id], [0, 0, 0, 0])
        offset = 2 if baseline is not None and r.condition == baseline else 0
        cell[offset] += r.passed
        cell[offset + 1] += 1
    return [DomainRow(d, *cells) for d, cells in sorted(rows.items())]


# --- serialization -----------------------------------------------------------

FORMATS = ("table_text", "csv", "jsonl")
_REPORT_FIELDS = ("condition", "run", "rate", "task_count", "run_count")


def _report_rows(report: PassRateReport) -> list[dict[str, Any]]:
    return [{"condition": report.condition, "run": idx, "rate": _fstr(rate), "task_count": report.task_count,
             "run_count": report.run_count} for idx, rate in enumerate(report.per_run_rates)]


def _stats_rows(stats: IterationStats) -> list[dict[str, Any]]:
    return [{"task": task, "verification_cycles": t.verification_cycles, "oracle_rounds": t.oracle_rounds,
             "converged": t.converged} for task, t in sorted(stats.per_task.items())]


def export_report(report: PassRateReport | IterationStats | Sequence[RunRecord], fmt: str) -> bytes:
    if fmt not in FORMATS:
        raise ValueError(f"format must be one of {FORMATS}")
    if isinstance(report, PassRateReport):
        rows, fields = _report_rows(report), list(_REPORT_FIELDS)
        if not rows:
            rows_meta = {"condition": report.condition, "task_count": report.task_count,
                         "run_count": report.run_count}
        else:
            rows_meta = None
    elif isinstance(report, IterationStats):
        rows, fields, rows_meta = _stats_rows(report), ["task", "verification_cycles", "oracle_rounds",
                                                        "converged"], None
    else:
        rows = [r.to_record() for r in report]
        fields, rows_meta = ["task", "condition", "run", "score", "passed", "elapsed_s", "detail"], None

    if fmt == "jsonl":
        lines = [json.dumps(row, separators=(",", ":")) for row in rows]
        if rows_meta is not None:
            lines = [json.dumps({"meta": rows_meta}, separators=(",", ":"))]
        return "".join(line + "\n" for line in lines).encode()
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
        return buf.getvalue().encode()
    return _table(report, rows, fields).encode()


def _table(report: Any, rows: list[dict[str, Any]], fields: list[str]) -> str:
    out = []
    if isinstance(report, PassRateReport):
        mean, std = report.mean, report.std
        out.append(f"condition: {report.condition}  tasks: {report.task_count}  runs: {report.run_count}")
        if mean is not None:
            flag = " (single run)" if report.single_run else ""
            out.append(f"mean: {to_decimal(mean, 4)}  std: {std.quantize(Decimal('0.0001'))}{flag}")
    elif isinstance(report, IterationStats):
        if report.mean_cycles is not None:
            out.append(f"mean verification cycles: {to_decimal(report.mean_cycles, 2)}  "
                       f"mean oracle rounds: {to_decimal(report.mean_oracle_rounds, 2)}")
    widths = [max([len(f)] + [len(str(r[f])) for r in rows]) for f in fields]
    out.append("  ".join(f.ljust(w) for f, w in zip(fields, widths)).rstrip())
    for r in rows:
        out.append("  ".join(str(r[f]).ljust(w) for f, w in zip(fields, widths)).rstrip())
    return "\n".join(out) + "\n"


def import_report(data: bytes, fmt: str, kind: str = "pass_rate") -> Any:
    """Inverse of :func:`export_report` for ``csv`` and ``jsonl``.

    ``kind`` is ``pass_rate``, ``iteration_stats`` or ``records``.
    """
    text = data.decode()
    if fmt == "jsonl":
        rows = [json.loads(line) for line in text.splitlines() if line.strip()]
    elif fmt == "csv":
        rows = list(csv.DictReader(io.StringIO(text)))
    else:
        raise ValueError("only csv and jsonl are machine-readable")

    if kind == "records":
        return tuple(RunRecord.from_record(_typed_record(r)) for r in rows)
    if kind == "iteration_stats":
        per_task = {r["task"]: TaskIterations(int(r["verification_cycles"]), int(r["oracle_rounds"]),
                                              _bool(r["converged"])) for r in rows}
        cycles = Counter(t.verification_cycles for t in per_task.values())
        rounds = Counter(t.oracle_rounds for t in per_task.values())
        return IterationStats(per_task, dict(sorted(cycles.items())), dict(sorted(rounds.items())))
    if kind != "pass_rate":
        raise ValueError(f"unknown report kind {kind!r}")
    if len(rows) == 1 and "meta" in rows[0]:
        meta = rows[0]["meta"]
        return PassRateReport(meta["condition"], (), int(meta["task_count"]), int(meta["run_count"]))
    if not rows:
        return PassRateReport("", (), 0, 0)
    rows.sort(key=lambda r: int(r["run"]))
    return PassRateReport(rows[0]["condition"], tuple(_frac(r["rate"]) for r in rows),
                          int(rows[0]["task_count"]), int(rows[0]["run_count"]))


def _bool(value: Any) -> bool:
    return value if isinstance(value, bool) else str(value).lower() == "true"


def _typed_record(row: Mapping[str, Any]) -> dict[str, Any]:
    return {**row, "passed": _bool(row["passed"])}


def read_records(text: str) -> list[RunRecord]:
    """Parse line-delimited flat run records."""
    return [RunRecord.from_record(json.loads(line)) for line in text.splitlines() if line.strip()]
