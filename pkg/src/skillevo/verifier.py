"""Surrogate test suites: format, execution, reward, diagnostics, isolation.

A suite is a declarative manifest, one assertion per line::

    assertion_id <TAB> kind <TAB> target <TAB> expectation

Fields escape backslash, tab, newline and carriage return with ``\\``,
``\\t``, ``\\n`` and ``\\r``.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from decimal import Decimal, InvalidOperation
from fractions import Fraction
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

from .bundle import SkillBundle
from .errors import (
    BackendUnavailable,
    ContractError,
    EmptySuite,
    IsolationViolation,
    MalformedSuite,
    SandboxEscape,
)
from .policy import Message, PolicyHandle, request_with_retry
from .sandbox import RolloutArtifacts, check_confinement, run_command

ASSERTION_KINDS = ("file_exists", "content_equals", "content_matches", "numeric_within", "command_succeeds")
PROVENANCES = ("initial", "escalated", "scripted")
COMMAND_TIMEOUT_S = 30.0

_ESCAPES = {"\\": "\\\\", "\t": "\\t", "\n": "\\n", "\r": "\\r"}
_UNESCAPES = {"\\": "\\", "t": "\t", "n": "\n", "r": "\r"}


def escape_field(text: str) -> str:
    return "".join(_ESCAPES.get(c, c) for c in text)


def unescape_field(text: str) -> str:
    out, i = [], 0
    while i < len(text):
        c = text[i]
        if c == "\\" and i + 1 < len(text) and text[i + 1] in _UNESCAPES:
            out.append(_UNESCAPES[text[i + 1]])
            i += 2
        else:
            out.append(c)
            i += 1
    return "".join(out)


@dataclass(frozen=True)
class Assertion:
    assertion_id: str
    kind: str
    target: str
    expectation: str = ""

    def __post_init__(self) -> None:
        if not self.assertion_id or self.assertion_id.startswith("#") or any(
                c.isspace() for c in self.assertion_id):
            raise MalformedSuite(f"bad assertion id {self.assertion_id!r}")
        if self.kind not in ASSERTION_KINDS:
            raise MalformedSuite(f"unknown assertion kind {self.kind!r}")
        if not self.target:
            raise MalformedSuite(f"assertion {self.assertion_id} has no target")
        if self.kind == "numeric_within":
            parse_numeric_expectation(self.expectation)
        if self.kind == "command_succeeds" and self.expectation.strip():
            try:
                int(self.expectation)
            except ValueError:
                raise MalformedSuite(f"{self.assertion_id}: exit status must be an integer") from None

    def to_line(self) -> str:
        return "\t".join(escape_field(f) for f in (self.assertion_id, self.kind, self.target, self.expectation))


def parse_numeric_expectation(text: str) -> tuple[Decimal, Decimal]:
    value, sep, tol = text.partition(",")
    try:
        if not sep:
            raise InvalidOperation
        v, t = Decimal(value.strip()), Decimal(tol.strip())
    except InvalidOperation:
        raise MalformedSuite(f"numeric_within expects 'value,tolerance', got {text!r}") from None
    if t < 0 or not v.is_finite() or not t.is_finite():
        raise MalformedSuite(f"bad numeric_within operand {text!r}")
    return v, t


def parse_manifest_lines(source: str) -> tuple[Assertion, ...]:
    assertions, seen = [], set()
    # fields escape \n and \r, so only those end a record (not every Unicode line break)
    for lineno, line in enumerate(source.split("\n"), 1):
        line = line.removesuffix("\r")
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) == 3:
            parts.append("")
        if len(parts) != 4:
            raise MalformedSuite(f"line {lineno}: expected 4 tab-separated fields, got {len(parts)}")
        a = Assertion(*(unescape_field(p) for p in parts))
        if a.assertion_id in seen:
            raise MalformedSuite(f"line {lineno}: duplicate assertion id {a.assertion_id}")
        seen.add(a.assertion_id)
        assertions.append(a)
    return tuple(assertions)


def format_manifest(assertions: Iterable[Assertion]) -> str:
    return "".join(a.to_line() + "\n" for a in assertions)


@dataclass(frozen=True)
class TestSuite:
    __test__ = False  # keep pytest from collecting this class

    version: int
    assertions: tuple[Assertion, ...]
    provenance: str = "scripted"

    def __post_init__(self) -> None:
        object.__setattr__(self, "assertions", tuple(self.assertions))
        if not self.assertions:
            raise MalformedSuite("a suite needs at least one assertion")
        if self.provenance not in PROVENANCES:
            raise ValueError(f"unknown provenance {self.provenance!r}")

    @classmethod
    def parse(cls, source: str, version: int = 0, provenance: str = "scripted") -> TestSuite:
        return cls(version, parse_manifest_lines(source), provenance)

    @property
    def source(self) -> str:
        return format_manifest(self.assertions)

    def __len__(self) -> int:
        return len(self.assertions)


@dataclass(frozen=True)
class AssertionOutcome:
    assertion_id: str
    passed: bool
    detail: str = ""


@dataclass(frozen=True)
class SuiteResult:
    suite_version: int
    per_assertion: tuple[AssertionOutcome, ...]

    @property
    def passed_count(self) -> int:
        return sum(1 for o in self.per_assertion if o.passed)

    @property
    def total(self) -> int:
        return len(self.per_assertion)

    @property
    def failed(self) -> tuple[AssertionOutcome, ...]:
        return tuple(o for o in self.per_assertion if not o.passed)


def surrogate_reward(result: SuiteResult) -> Fraction:
    if result.total == 0:
        raise EmptySuite("cannot score an empty suite")
    return Fraction(result.passed_count, result.total)


def percent(value: Fraction) -> str:
    """Integer percentage for display only; never compare on it."""
    return f"{round(value * 100)}%"


# --- evaluation --------------------------------------------------------------


def _lookup(target: str, artifacts: RolloutArtifacts, workdir: Path | None) -> bytes | None:
    if target in artifacts.outputs:
        return artifacts.outputs[target]
    if workdir is None:
        return None
    path = (workdir / target).resolve()
    root = workdir.resolve()
    if root not in path.parents or not path.is_file():
        return None
    return path.read_bytes()


_NUMBER_RE = re.compile(r"[-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?")


def _first_number(text: str) -> Decimal | None:
    try:
        return Decimal(text.strip())
    except InvalidOperation:
        pass
    m = _NUMBER_RE.search(text)
    return Decimal(m.group(0)) if m else None


def evaluate_assertion(a: Assertion, artifacts: RolloutArtifacts, workdir: Path | None) -> tuple[bool, str]:
    if a.kind == "command_succeeds":
        if workdir is None:
            return False, "no workdir available to run the command"
        check_confinement(a.target, workdir)
        want = int(a.expectation) if a.expectation.strip() else 0
        output, status, timed_out = run_command(a.target, workdir, COMMAND_TIMEOUT_S)
        if timed_out:
            return False, f"command timed out after {COMMAND_TIMEOUT_S:g}s"
        if status != want:
            return False, f"exit status {status} (expected {want}): {output.strip()[-500:]}"
        return True, ""

    data = _lookup(a.target, artifacts, workdir)
    if data is None:
        return False, f"{a.target} not found"
    if a.kind == "file_exists":
        return True, ""
    if a.kind == "content_equals":
        want = a.expectation.encode("utf-8")
        if data == want:
            return True, ""
        return False, f"{a.target} content differs ({len(data)} bytes vs {len(want)} expected)"
    text = data.decode("utf-8", errors="replace")
    if a.kind == "content_matches":
        if re.search(a.expectation, text, re.MULTILINE):
            return True, ""
        return False, f"{a.target} does not match /{a.expectation}/"
    # numeric_within, compared in exact decimal arithmetic
    value, tol = parse_numeric_expectation(a.expectation)
    got = _first_number(text)
    if got is None:
        return False, f"{a.target} holds no number"
    diff = abs(got - value)
    if diff <= tol:
        return True, ""
    return False, f"{a.target}: {got} differs from {value} by {diff} (tolerance {tol})"


def run_suite(suite: TestSuite, artifacts: RolloutArtifacts, workdir: str | Path | None = None) -> SuiteResult:
    """Evaluate every assertion once; a crashing assertion counts as failed."""
    wd = Path(workdir) if workdir is not None else None
    outcomes = []
    for a in suite.assertions:
        try:
            ok, detail = evaluate_assertion(a, artifacts, wd)
        except SandboxEscape as exc:
            ok, detail = False, f"assertion refused: {exc}"
        except Exception as exc:  # AssertionRuntimeFault: recorded, never aborts the suite
            ok, detail = False, f"assertion crashed: {type(exc).__name__}: {exc}"
        outcomes.append(AssertionOutcome(a.assertion_id, ok, detail))
    return SuiteResult(suite.version, tuple(outcomes))


# --- isolation ---------------------------------------------------------------

VERIFIER_FIELDS = frozenset({"instruction", "artifacts", "prev_suite", "result"})
_sealed_lines: set[str] = set()


def register_sealed(lines: Iterable[str]) -> None:
    """Record hidden-suite records that must never reach a generator payload."""
    _sealed_lines.update(line for line in lines if line)


def _contains_sealed(text: str) -> bool:
    return any(line in text for line in _sealed_lines)


def isolation_guard(role: str, proposed: Mapping[str, Any], *, allow_transcript: bool = False) -> dict[str, Any]:
    """Approve a payload about to cross into a policy session, or raise."""
    if role == "verifier":
        allowed = VERIFIER_FIELDS | ({"transcript"} if allow_transcript else set())
        for name, value in proposed.items():
            if name not in allowed:
                raise IsolationViolation(name, "the verifier only sees instruction, outputs and its own suites")
            if isinstance(value, (SkillBundle, Message)):
                raise IsolationViolation(name, f"{type(value).__name__} values are not verifier-visible")
            if isinstance(value, (list, tuple)) and any(isinstance(v, (Message, SkillBundle)) for v in value):
                raise IsolationViolation(name, "generator messages or skill content are not verifier-visible")
        if "instruction" not in proposed:
            raise IsolationViolation("instruction", "missing")
        return dict(proposed)

    if role == "generator":
        for name, value in proposed.items():
            if name != "messages":
                raise IsolationViolation(name, "generator payloads carry messages only")
            for msg in value:
                if not isinstance(msg, Message):
                    raise IsolationViolation(name, "non-message entry")
                if msg.kind == "oracle_bit" and msg.body not in ("0", "1"):
                    raise IsolationViolation(name, "oracle feedback must be a single bit")
                if _contains_sealed(msg.body):
                    raise IsolationViolation(name, "hidden test content present")
        return dict(proposed)
    raise ValueError(f"unknown role {role!r}")


def render_outputs(outputs: Mapping[str, bytes]) -> str:
    if not outputs:
        return "Output files: (none)"
    parts = ["Output files:"]
    for path, data in outputs.items():
        try:
            parts.append(f"== {path} ==\n{data.decode('utf-8')}")
        except UnicodeDecodeError:
            parts.append(f"== {path} == <{len(data)} bytes binary>")
    return "\n".join(parts)


def render_result(result: SuiteResult) -> str:
    lines = [f"Suite v{result.suite_version}: {result.passed_count}/{result.total} passed"]
    for o in result.per_assertion:
        lines.append(f"{'PASS' if o.passed else 'FAIL'} {o.assertion_id}" + (f": {o.detail}" if o.detail else ""))
    return "\n".join(lines)


def verifier_view(payload: Mapping[str, Any], ask: str) -> tuple[Message, ...]:
    msgs = [Message("host", "instruction", "Task instruction:\n" + payload["instruction"])]
    artifacts = payload.get("artifacts")
    if artifacts is not None:
        msgs.append(Message("host", "observation", render_outputs(artifacts)))
    if payload.get("transcript"):
        msgs.append(Message("host", "observation", "Commands run:\n" + "\n".join(payload["transcript"])))
    prev = payload.get("prev_suite")
    if prev is not None:
        msgs.append(Message("host", "observation", f"Your previous suite (v{prev.version}):\n{prev.source}"))
    result = payload.get("result")
    if result is not None:
        msgs.append(Message("host", "observation", render_result(result)))
    msgs.append(Message("host", "instruction", ask))
    return tuple(msgs)


def _transcript_lines(artifacts: RolloutArtifacts) -> list[str]:
    return [f"$ {e.command.strip()} -> {e.exit_status}" for e in artifacts.transcript]


# --- verifier session operations --------------------------------------------

ASK_INITIAL = "Write a deterministic test suite for these outputs."
ASK_ESCALATE = ("Your previous suite passed, but the independent check still rejected the result. "
                "Write a stricter suite.")
ASK_DIAGNOSE = "Explain the failing assertions: root cause and concrete revision suggestions."


def generate_suite(verifier: PolicyHandle, instruction: str, artifacts: RolloutArtifacts,
                   prev: TestSuite | None = None, *, include_transcript: bool = False,
                   history: Sequence[Message] = ()) -> TestSuite:
    if verifier.role != "verifier":
        raise ContractError("generate_suite needs a verifier handle")
    payload: dict[str, Any] = {"instruction": instruction, "artifacts": dict(artifacts.outputs),
                               "prev_suite": prev}
    if include_transcript:
        payload["transcript"] = _transcript_lines(artifacts)
    approved = isolation_guard("verifier", payload, allow_transcript=include_transcript)
    view = tuple(history) + verifier_view(approved, ASK_INITIAL if prev is None else ASK_ESCALATE)
    resp = request_with_retry(verifier, view, expect=("suite_script",))
    if prev is None:
        return TestSuite.parse(resp.payload["source"], 0, "initial")
    return TestSuite.parse(resp.payload["source"], prev.version + 1, "escalated")


@dataclass(frozen=True)
class Diagnostic:
    failed: tuple[tuple[str, str], ...]
    root_cause: str
    suggestions: tuple[str, ...] = ()
    produced_by: str = ""
    passed_count: int = 0
    total: int = 0
    fallback: bool = field(default=False, compare=False)

    def render(self) -> str:
        lines = [f"{len(self.failed)} of {self.total} assertions failed: "
                 + ", ".join(aid for aid, _ in self.failed)]
        lines += [f"- {aid}: {detail}" for aid, detail in self.failed]
        if self.root_cause:
            lines.append(f"Root cause: {self.root_cause}")
        if self.suggestions:
            lines.append("Suggestions:")
            lines += [f"- {s}" for s in self.suggestions]
        return "\n".join(lines)


def template_diagnostic(result: SuiteResult, produced_by: str = "") -> Diagnostic:
    failed = tuple((o.assertion_id, o.detail) for o in result.failed)
    return Diagnostic(failed, "", (), produced_by, result.passed_count, result.total, fallback=True)


def build_diagnostic(verifier: PolicyHandle, instruction: str, artifacts: RolloutArtifacts, result: SuiteResult,
                     suite: TestSuite | None = None, *, include_transcript: bool = False,
                     history: Sequence[Message] = ()) -> Diagnostic:
    if result.total == 0 or surrogate_reward(result) >= 1:
        raise ContractError("a diagnostic is only produced for a failing suite")
    payload: dict[str, Any] = {"instruction": instruction, "artifacts": dict(artifacts.outputs),
                               "prev_suite": suite, "result": result}
    if include_transcript:
        payload["transcript"] = _transcript_lines(artifacts)
    approved = isolation_guard("verifier", payload, allow_transcript=include_transcript)
    try:
        resp = request_with_retry(verifier, tuple(history) + verifier_view(approved, ASK_DIAGNOSE),
                                  expect=("diagnostic_text",))
    except BackendUnavailable:
        return template_diagnostic(result, verifier.session_id)
    failed = tuple((o.assertion_id, o.detail) for o in result.failed)
    root = resp.payload["root_cause"] or resp.payload["text"]
    return Diagnostic(failed, root, tuple(resp.payload["suggestions"]), verifier.session_id,
                      result.passed_count, result.total)
