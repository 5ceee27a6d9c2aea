"""Hidden ground-truth suites and fresh-environment oracle evaluation.

Hidden suite content lives in a permissions-restricted directory and is
only read inside :meth:`Oracle.evaluate`. Callers get a graded
:class:`OracleScore` on the host side; the generator only ever sees the
one-character :class:`OpaqueBit`.
"""

from __future__ import annotations

import os
import tempfile
import threading
import uuid
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Iterable

from .bundle import SkillBundle
from .errors import BudgetExhausted, ContractError, EmptySuite
from .policy import PolicyHandle, prompt_text
from .sandbox import TaskSpec, clone_fresh, install_skill, rollout
from .verifier import Assertion, TestSuite, format_manifest, parse_manifest_lines, register_sealed, run_suite


class SealedStore:
    """Directory of hidden suite manifests readable only by the owner."""

    def __init__(self, root: str | os.PathLike[str] | None = None) -> None:
        self.root = Path(root) if root is not None else Path(tempfile.mkdtemp(prefix="sealed-"))
        self.root.mkdir(parents=True, exist_ok=True)
        os.chmod(self.root, 0o700)

    def __repr__(self) -> str:
        return "SealedStore(<sealed>)"

    def _write(self, suite_id: str, text: str) -> None:
        path = self.root / f"{suite_id}.suite"
        fd = os.open(path, os.O_WRONLY | os.O_CREAT | os.O_EXCL, 0o600)
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)

    def _read(self, suite_id: str) -> tuple[Assertion, ...]:
        return parse_manifest_lines((self.root / f"{suite_id}.suite").read_text(encoding="utf-8"))


_default_store: SealedStore | None = None
_store_lock = threading.Lock()


def default_store() -> SealedStore:
    global _default_store
    with _store_lock:
        if _default_store is None:
            _default_store = SealedStore()
        return _default_store


@dataclass(frozen=True)
class HiddenSuiteRef:
    suite_id: str
    storage: SealedStore = field(repr=False, compare=False)

    def __repr__(self) -> str:
        return f"HiddenSuiteRef({self.suite_id!r})"


def seal_suite(assertions: Iterable[Assertion], store: SealedStore | None = None) -> HiddenSuiteRef:
    items = tuple(assertions)
    if not items:
        raise EmptySuite("a hidden suite needs at least one assertion")
    store = store or default_store()
    suite_id = uuid.uuid4().hex
    store._write(suite_id, format_manifest(items))
    register_sealed(a.to_line() for a in items)
    return HiddenSuiteRef(suite_id, store)


def seal_manifest(source: str, store: SealedStore | None = None) -> HiddenSuiteRef:
    return seal_suite(parse_manifest_lines(source), store)


def unseal(ref: HiddenSuiteRef, *, confirmed: bool) -> tuple[Assertion, ...]:
    """Operator-only post-hoc read; requires an explicit confirmation."""
    if not confirmed:
        raise ContractError("unsealing a hidden suite requires explicit operator confirmation")
    return ref.storage._read(ref.suite_id)


@dataclass(frozen=True)
class OracleScore:
    score: Fraction
    passed_count: int
    total: int
    evaluated_version: int | None
    fresh_env_id: str

    def __post_init__(self) -> None:
        if self.total < 1:
            raise ValueError("total must be at least 1")
        if self.score != Fraction(self.passed_count, self.total):
            raise ValueError("score must equal passed_count / total")


@dataclass(frozen=True)
class OpaqueBit:
    failed: bool

    def serialize(self) -> str:
        return "1" if self.failed else "0"

    __str__ = serialize


def to_opaque(score: OracleScore) -> OpaqueBit:
    return OpaqueBit(score.score < 1)


def skill_hint() -> str:
    return prompt_text("skill_hint.txt").strip()


class Oracle:
    """Evaluates skills against one hidden suite, enforcing a call budget.

    ``budget=None`` means unbounded (benchmark use). Calls are serialized.
    """

    def __init__(self, ref: HiddenSuiteRef, budget: int | None = None, *,
                 sandbox_root: str | os.PathLike[str] | None = None) -> None:
        if budget is not None and budget < 1:
            raise ValueError("budget must be at least 1")
        self.ref = ref
        self.budget = budget
        self.used = 0
        self.sandbox_root = sandbox_root
        self._lock = threading.Lock()

    @property
    def remaining(self) -> int | None:
        return None if self.budget is None else self.budget - self.used

    def evaluate(self, bundle: SkillBundle | None, spec: TaskSpec, target_policy: PolicyHandle, *,
                 timeout_multiplier: float = 1.0, hint: bool = True) -> OracleScore:
        with self._lock:
            if self.budget is not None and self.used >= self.budget:
                raise BudgetExhausted(f"oracle budget of {self.budget} evaluations is spent")
            self.used += 1
            env = clone_fresh(spec, self.sandbox_root)
            try:
                instruction = spec.instruction
                if bundle is not None:
                    install_skill(env, bundle)
                    if hint:
                        instruction = f"{instruction.rstrip()}\n\n{skill_hint()}"
                artifacts = rollout(env, target_policy, spec, timeout_multiplier, instruction=instruction)
                hidden = TestSuite(0, self.ref.storage._read(self.ref.suite_id), "scripted")
                result = run_suite(hidden, artifacts, env.workdir)
            finally:
                env.dispose()
        return OracleScore(Fraction(result.passed_count, result.total), result.passed_count, result.total,
                           None if bundle is None else bundle.version, env.env_id)


def oracle_evaluate(bundle: SkillBundle | None, spec: TaskSpec, target_policy: PolicyHandle,
                    oracle: Oracle | None = None, **kwargs) -> OracleScore:
    if oracle is None:
        if spec.oracle_suite is None:
            raise ContractError(f"task {spec.task_id} has no hidden suite")
        oracle = Oracle(spec.oracle_suite)
    return oracle.evaluate(bundle, spec, target_policy, **kwargs)
