"""Trajectory events and their line-delimited log format.

One JSON object per line: ``step``, ``kind``, ``task`` and the flattened
payload. Oracle scores are sealed (redacted) unless written with
``unseal=True``.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Any, Iterable, Iterator, Mapping

from .errors import MalformedTrace

EVENT_KINDS = (
    "skill_generated",
    "rollout_done",
    "suite_run",
    "diagnostic_appended",
    "oracle_evaluated",
    "bit_appended",
    "suite_escalated",
    "checklist_blocked",
    "context_cap_hit",
    "snapshot_saved",
    "early_exit",
)
SEALED_FIELDS = {"oracle_evaluated": ("score", "passed", "total"), "snapshot_saved": ("score",)}
WALL_FIELDS = frozenset({"elapsed_s"})
SEALED = "<sealed>"
_RESERVED = {"step", "kind", "task"}


def _flat(value: Any) -> Any:
    if isinstance(value, Fraction):
        return f"{value.numerator}/{value.denominator}"
    if isinstance(value, (list, tuple, set, frozenset)):
        return ",".join(str(v) for v in (sorted(value) if isinstance(value, (set, frozenset)) else value))
    if value is None or isinstance(value, (str, int, float, bool)):
        return value
    return str(value)


@dataclass(frozen=True)
class TrajectoryEvent:
    step: int
    kind: str
    task_id: str
    payload: Mapping[str, Any] = field(default_factory=dict)

    def to_record(self, unseal: bool = False) -> dict[str, Any]:
        record: dict[str, Any] = {"step": self.step, "kind": self.kind, "task": self.task_id}
        sealed = () if unseal else SEALED_FIELDS.get(self.kind, ())
        for key, value in self.payload.items():
            record[key] = SEALED if key in sealed else _flat(value)
        return record

    def to_line(self, unseal: bool = False) -> str:
        return json.dumps(self.to_record(unseal), sort_keys=False, separators=(",", ":"))


class TraceLog:
    """Append-only event recorder with a logical step counter."""

    def __init__(self, task_id: str = "") -> None:
        self.task_id = task_id
        self.events: list[TrajectoryEvent] = []

    def emit(self, kind: str, **payload: Any) -> TrajectoryEvent:
        if kind not in EVENT_KINDS:
            raise ValueError(f"unknown event kind {kind!r}")
        bad = _RESERVED & payload.keys()
        if bad:
            raise ValueError(f"payload keys {sorted(bad)} are reserved")
        event = TrajectoryEvent(len(self.events) + 1, kind, self.task_id, {k: _flat(v) for k, v in payload.items()})
        self.events.append(event)
        return event

    def __len__(self) -> int:
        return len(self.events)

    def __iter__(self) -> Iterator[TrajectoryEvent]:
        return iter(self.events)

    def of_kind(self, kind: str) -> list[TrajectoryEvent]:
        return [e for e in self.events if e.kind == kind]

    def to_text(self, unseal: bool = False) -> str:
        return "".join(e.to_line(unseal) + "\n" for e in self.events)

    def write(self, path: str | os.PathLike[str], unseal: bool = False) -> Path:
        dest = Path(path)
        dest.parent.mkdir(parents=True, exist_ok=True)
        dest.write_text(self.to_text(unseal), encoding="utf-8")
        if unseal:
            os.chmod(dest, 0o600)
        return dest


def parse_trace(lines: Iterable[str]) -> list[TrajectoryEvent]:
    events = []
    last_step = 0
    for lineno, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
        except json.JSONDecodeError as exc:
            raise MalformedTrace(lineno, f"not JSON ({exc.msg})") from None
        if not isinstance(record, dict):
            raise MalformedTrace(lineno, "record is not an object")
        step, kind = record.get("step"), record.get("kind")
        if not isinstance(step, int) or isinstance(step, bool):
            raise MalformedTrace(lineno, "missing integer 'step'")
        if kind not in EVENT_KINDS:
            raise MalformedTrace(lineno, f"unknown event kind {kind!r}")
        task = record.get("task", "")
        if not isinstance(task, str):
            raise MalformedTrace(lineno, "'task' must be a string")
        payload = {k: v for k, v in record.items() if k not in _RESERVED}
        if any(isinstance(v, (dict, list)) for v in payload.values()):
            raise MalformedTrace(lineno, "payload must be a flat record")
        if events and events[-1].task_id == task and step <= last_step:
            raise MalformedTrace(lineno, "steps must strictly increase within a task")
        last_step = step
        events.append(TrajectoryEvent(step, kind, task, payload))
    return events


def read_trace(path: str | os.PathLike[str]) -> list[TrajectoryEvent]:
    with open(path, encoding="utf-8") as fh:
        return parse_trace(fh)


def strip_wall_time(text: str) -> str:
    """Drop wall-clock fields so two logs can be compared byte for byte."""
    out = []
    for line in text.splitlines():
        if not line.strip():
            continue
        record = json.loads(line)
        out.append(json.dumps({k: v for k, v in record.items() if k not in WALL_FIELDS}, separators=(",", ":")))
    return "".join(line + "\n" for line in out)
