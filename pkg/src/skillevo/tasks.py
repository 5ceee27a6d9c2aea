"""Task definition files and corpus directories.

A ``task.spec`` file holds flat ``key: value`` lines. The instruction may
span lines with ``instruction: |`` followed by an indented block::

    task_id: fit-period
    domain_tag: astronomy
    fixture: fixture
    output_globs: answer.txt, report.md
    oracle_suite: hidden.suite
    timeout_s: 600
    instruction: |
      Estimate the orbital period ...

``fixture`` and ``oracle_suite`` are relative to the spec file. The hidden
manifest is sealed on load; its path never enters the returned
:class:`TaskSpec`.
"""

from __future__ import annotations

import os
from pathlib import Path
from typing import Mapping

from .errors import TaskSpecError
from .oracle import SealedStore, seal_manifest
from .sandbox import TaskSpec

SPEC_FILE = "task.spec"
_KEYS = {"task_id", "domain_tag", "fixture", "output_globs", "oracle_suite", "timeout_s", "instruction"}


def parse_task_text(text: str) -> dict[str, str]:
    fields: dict[str, str] = {}
    lines = text.splitlines()
    i = 0
    while i < len(lines):
        line = lines[i]
        i += 1
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        key, sep, value = line.partition(":")
        key = key.strip()
        if not sep or key not in _KEYS:
            raise TaskSpecError(f"line {i}: expected one of {sorted(_KEYS)} as 'key: value'")
        if key in fields:
            raise TaskSpecError(f"line {i}: duplicate key {key!r}")
        value = value.strip()
        if value == "|":
            block = []
            while i < len(lines) and (not lines[i].strip() or lines[i][:1] in (" ", "\t")):
                block.append(lines[i])
                i += 1
            indent = min((len(b) - len(b.lstrip()) for b in block if b.strip()), default=0)
            value = "\n".join(b[indent:] for b in block).strip("\n") + "\n"
        fields[key] = value
    return fields


def task_from_fields(fields: Mapping[str, str], base: Path, store: SealedStore | None = None) -> TaskSpec:
    missing = [k for k in ("task_id", "instruction", "output_globs") if not fields.get(k)]
    if missing:
        raise TaskSpecError(f"missing required keys: {missing}")
    fixture = base / fields["fixture"] if fields.get("fixture") else None
    oracle = None
    if fields.get("oracle_suite"):
        path = base / fields["oracle_suite"]
        try:
            oracle = seal_manifest(path.read_text(encoding="utf-8"), store)
        except OSError as exc:
            raise TaskSpecError(f"cannot read hidden suite for {fields['task_id']}: {exc.strerror}") from None
    globs = tuple(g.strip() for g in fields["output_globs"].split(",") if g.strip())
    try:
        timeout = float(fields.get("timeout_s", "600"))
        return TaskSpec(fields["task_id"], fields["instruction"], fixture, globs, oracle, timeout,
                        fields.get("domain_tag"))
    except ValueError as exc:
        raise TaskSpecError(f"{fields['task_id']}: {exc}") from None


def load_task(path: str | os.PathLike[str], store: SealedStore | None = None) -> TaskSpec:
    """Load a ``task.spec`` file, or a directory containing one."""
    p = Path(path)
    if p.is_dir():
        p = p / SPEC_FILE
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as exc:
        raise TaskSpecError(f"cannot read {p}: {exc.strerror}") from None
    return task_from_fields(parse_task_text(text), p.parent, store)


def load_corpus(directory: str | os.PathLike[str], store: SealedStore | None = None) -> list[TaskSpec]:
    """Every ``*/task.spec`` under ``directory``, sorted by task id."""
    root = Path(directory)
    if not root.is_dir():
        raise TaskSpecError(f"{root} is not a directory")
    tasks = [load_task(p, store) for p in sorted(root.glob(f"*/{SPEC_FILE}"))]
    ids = [t.task_id for t in tasks]
    if len(set(ids)) != len(ids):
        raise TaskSpecError("duplicate task ids in corpus")
    return sorted(tasks, key=lambda t: t.task_id)


def write_task(directory: str | os.PathLike[str], task_id: str, instruction: str, outputs: list[str], *,
               fixture_files: Mapping[str, str] | None = None, hidden_manifest: str | None = None,
               domain: str | None = None, timeout_s: float = 600.0) -> Path:
    """Lay out a task directory in the format :func:`load_task` reads."""
    root = Path(directory) / task_id
    (root / "fixture").mkdir(parents=True, exist_ok=True)
    for rel, content in (fixture_files or {}).items():
        dest = root / "fixture" / rel
        dest.parent.mkdir(parents=True, exist_ok=True)
        dest.write_text(content, encoding="utf-8")
    lines = [f"task_id: {task_id}"]
    if domain:
        lines.append(f"domain_tag: {domain}")
    lines += ["fixture: fixture", f"output_globs: {', '.join(outputs)}", f"timeout_s: {timeout_s:g}"]
    if hidden_manifest is not None:
        (root / "hidden.suite").write_text(hidden_manifest, encoding="utf-8")
        os.chmod(root / "hidden.suite", 0o600)
        lines.append("oracle_suite: hidden.suite")
    lines.append("instruction: |")
    lines += ["  " + line if line else "" for line in instruction.rstrip("\n").splitlines()]
    (root / SPEC_FILE).write_text("\n".join(lines) + "\n", encoding="utf-8")
    return root
