"""The co-evolution loop between a skill generator and a surrogate verifier.

Each iteration rolls the current skill out in the generator's environment,
then either

* refines the skill against a failing surrogate suite (suite locked), or
* blocks on an incomplete progress checklist, or
* sends the skill to the hidden-suite oracle in a fresh environment, keeps
  the best snapshot, hands the generator one opaque bit and asks the
  verifier for a stricter suite.

The loop stops on a perfect oracle score, when the oracle budget ``N`` or
the refinement budget ``M`` runs out, or when the generator context passes
``beta`` of its window.
"""

from __future__ import annotations

import os
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from fractions import Fraction
from importlib import resources
from typing import Any, Mapping, Sequence

from .bundle import SkillBundle, diff_bundles, load_bundle, make_bundle, next_version
from .errors import ContractError, MalformedResponse
from .oracle import HiddenSuiteRef, Oracle, OracleScore, to_opaque
from .policy import (
    DEFAULT_WINDOW_BYTES,
    ConversationContext,
    Message,
    PolicyHandle,
    PolicyResponse,
    init_context,
    request_with_retry,
)
from .sandbox import Environment, RolloutArtifacts, TaskSpec, collect_outputs, install_skill, provision, rollout
from .solver import make_solver
from .trace import TraceLog, TrajectoryEvent
from .verifier import (
    Diagnostic,
    TestSuite,
    build_diagnostic,
    generate_suite,
    isolation_guard,
    percent,
    run_suite,
    surrogate_reward,
)

MODES = ("full", "no_verifier", "no_evolution", "no_skill")
STATUSES = ("running", "done_perfect", "done_budget", "done_context", "done_checklist_stall")
DEFAULT_CHECKLIST = ("P1", "P1b", "P2", "P3", "P4", "P5", "P6")
CONTEXT_BUDGET_NOTICE = "CONTEXT BUDGET REACHED"


def load_meta_skill() -> SkillBundle:
    """The bundled ``skill-creator`` meta-skill that seeds every run."""
    with resources.as_file(resources.files("skillevo").joinpath("data", "skill-creator")) as path:
        return load_bundle(path)


def _fraction(value: Any) -> Fraction:
    return value if isinstance(value, Fraction) else Fraction(str(value))


@dataclass(frozen=True)
class EvolutionConfig:
    N: int = 5
    M: int = 15
    beta: Fraction = Fraction(7, 10)
    timeout_multiplier: float = 5.0
    mode: str = "full"
    checklist_gate: bool = True
    checklist_path: str = "progress.md"
    checklist_items: tuple[str, ...] = DEFAULT_CHECKLIST
    seed: int = 0
    window_bytes: int = DEFAULT_WINDOW_BYTES
    reset_env_each_iteration: bool = False
    verifier_persistent: bool = False
    verifier_sees_transcript: bool = False
    confine: bool = True
    backend_retries: int = 1

    def __post_init__(self) -> None:
        object.__setattr__(self, "beta", _fraction(self.beta))
        object.__setattr__(self, "checklist_items", tuple(self.checklist_items))
        if self.N < 1 or self.M < 1:
            raise ValueError("N and M must be at least 1")
        if not 0 < self.beta <= 1:
            raise ValueError("beta must lie in (0, 1]")
        if self.timeout_multiplier <= 0:
            raise ValueError("timeout_multiplier must be positive")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")

    @classmethod
    def from_mapping(cls, data: Mapping[str, Any]) -> EvolutionConfig:
        """Build a config from loose keys; ``K`` is accepted as an alias of ``N``."""
        kwargs = dict(data)
        if "K" in kwargs:
            if "N" in kwargs and kwargs["N"] != kwargs["K"]:
                raise ValueError("N and K disagree")
            kwargs["N"] = kwargs.pop("K")
        unknown = set(kwargs) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**kwargs)


@dataclass(frozen=True)
class ChecklistStatus:
    complete: bool
    missing: tuple[str, ...] = ()


_ITEM_RE = re.compile(r"^\s*[-*]\s*\[([ xX])\]\s*([A-Za-z0-9]+)\b")


def checklist_gate(artifacts: RolloutArtifacts, path: str = "progress.md",
                   required: Sequence[str] = DEFAULT_CHECKLIST) -> ChecklistStatus:
    """Complete iff every item in the progress file is ticked and none required is absent."""
    text = artifacts.text(path)
    if text is None:
        return ChecklistStatus(False, tuple(required))
    items: dict[str, bool] = {}
    for line in text.splitlines():
        m = _ITEM_RE.match(line)
        if m:
            items[m.group(2)] = items.get(m.group(2), True) and m.group(1) in "xX"
    if not items:
        return ChecklistStatus(False, tuple(required))
    missing = [item for item, done in items.items() if not done]
    missing += [item for item in required if item not in items]
    return ChecklistStatus(not missing, tuple(missing))


@dataclass(frozen=True)
class LoopVariant:
    generate_skill: bool
    rollout_generator: bool
    surrogate: bool
    refine: bool
    oracle_budget: int | None  # None: use cfg.N
    install_bundle: bool = True


def apply_mode(cfg: EvolutionConfig) -> LoopVariant:
    if cfg.mode == "full":
        return LoopVariant(True, True, True, True, None)
    if cfg.mode == "no_verifier":
        return LoopVariant(True, True, False, True, None)
    if cfg.mode == "no_evolution":
        return LoopVariant(True, False, False, False, 1)
    return LoopVariant(False, False, False, False, 1, install_bundle=False)


@dataclass(frozen=True)
class EvolutionState:
    i: int
    j: int
    n: int
    r: int
    R_best: Fraction
    best: SkillBundle | None
    current: SkillBundle | None
    ctx: ConversationContext
    suite: TestSuite | None = None
    status: str = "running"
    verifier_history: tuple[Message, ...] = ()


@dataclass(frozen=True)
class EvolutionOutcome:
    final: SkillBundle | None
    final_score: Fraction
    state: EvolutionState
    trace: tuple[TrajectoryEvent, ...]
    log: TraceLog = field(repr=False, compare=False, default=None)  # type: ignore[assignment]


def bundle_from_response(resp: PolicyResponse, current: SkillBundle | None) -> SkillBundle:
    edits, doc = resp.payload["edits"], resp.payload["doc"]
    if current is None:
        if doc is None:
            raise MalformedResponse("the first skill must include its procedure document", resp.raw)
        return make_bundle(doc, {p: c for p, c in edits.items() if c is not None})
    return next_version(current, edits, doc)


class Evolution:
    """One task's evolution run. ``step`` performs exactly one loop iteration."""

    def __init__(self, spec: TaskSpec, cfg: EvolutionConfig, gen: PolicyHandle | None, ver: PolicyHandle | None,
                 oracle_ref: HiddenSuiteRef, *, target: PolicyHandle | None = None,
                 meta_skill: SkillBundle | None = None, trace: TraceLog | None = None,
                 sandbox_root: str | os.PathLike[str] | None = None, oracle: Oracle | None = None) -> None:
        self.variant = apply_mode(cfg)
        if self.variant.generate_skill and (gen is None or gen.role != "generator"):
            raise ContractError("a generator-role handle is required")
        if self.variant.surrogate and (ver is None or ver.role != "verifier"):
            raise ContractError("a verifier-role handle is required")
        if gen is not None and ver is not None and gen.session_id == ver.session_id:
            raise ContractError("generator and verifier must not share a session")
        self.spec = spec
        self.cfg = cfg
        self.gen = gen
        self.ver = ver
        self.target = target or make_solver()
        self.meta_skill = meta_skill or load_meta_skill()
        self.trace = trace if trace is not None else TraceLog(spec.task_id)
        if not self.trace.task_id:
            self.trace.task_id = spec.task_id
        self.sandbox_root = sandbox_root
        self.budget = budget = self.variant.oracle_budget or cfg.N
        # ``oracle`` lets tests substitute a scored double with the same interface
        self.oracle = oracle if oracle is not None else Oracle(oracle_ref, budget, sandbox_root=sandbox_root)
        self._env: Environment | None = None

    # -- helpers ---------------------------------------------------------------

    def _emit(self, events: list[TrajectoryEvent], kind: str, **payload: Any) -> None:
        events.append(self.trace.emit(kind, **payload))

    @staticmethod
    def _host(ctx: ConversationContext, kind: str, body: str) -> ConversationContext:
        msg = Message("host", kind, body)
        isolation_guard("generator", {"messages": (msg,)})
        return ctx.append(msg)

    def _ask_generator(self, ctx: ConversationContext, expect: tuple[str, ...]) -> tuple[PolicyResponse,
                                                                                          ConversationContext]:
        isolation_guard("generator", {"messages": ctx.messages})
        resp = request_with_retry(self.gen, ctx.messages, expect, self.cfg.backend_retries)
        return resp, ctx.append(Message("policy", "policy_output", resp.raw))

    def _generator_env(self) -> Environment:
        if self._env is None or self.cfg.reset_env_each_iteration:
            if self._env is not None:
                self._env.dispose()
            self._env = provision(self.spec, self.sandbox_root)
        return self._env

    def _skill_generated(self, events: list, new: SkillBundle, old: SkillBundle | None) -> None:
        if old is None:
            self._emit(events, "skill_generated", version=new.version, parent="", files=len(new.files))
            return
        change = diff_bundles(old, new)
        self._emit(events, "skill_generated", version=new.version, parent=old.version, files=len(new.files),
                   added=sorted(change.added), removed=sorted(change.removed), modified=sorted(change.modified),
                   doc_changed=change.doc_changed)

    def close(self) -> None:
        if self._env is not None:
            self._env.dispose()
            self._env = None

    # -- the loop ---------------------------------------------------------------

    def start(self) -> EvolutionState:
        ctx = init_context(self.spec.instruction, self.meta_skill, self.cfg.window_bytes)
        current = None
        if self.variant.generate_skill:
            resp, ctx = self._ask_generator(ctx, ("skill_edit",))
            current = bundle_from_response(resp, None)
            self._skill_generated([], current, None)
        return EvolutionState(0, 0, 0, 0, Fraction(0), current, current, ctx)

    def _finish_if_spent(self, state: EvolutionState) -> EvolutionState:
        if state.status != "running":
            return state
        if state.n >= self.budget or state.r >= self.cfg.M:
            return replace(state, status="done_budget")
        return state

    def _oracle_round(self, state: EvolutionState, events: list) -> tuple[EvolutionState, OracleScore | None]:
        bundle = state.current if self.variant.install_bundle else None
        score = self.oracle.evaluate(bundle, self.spec, self.target,
                                     timeout_multiplier=self.cfg.timeout_multiplier)
        state = replace(state, n=state.n + 1)
        version = "" if bundle is None else bundle.version
        ratio = f"{score.passed_count}/{score.total}"  # kept unreduced: 0/15 stays 0/15
        self._emit(events, "oracle_evaluated", version=version, score=ratio, passed=score.passed_count,
                   total=score.total, n=state.n)
        if score.score == 1:
            self._emit(events, "early_exit", version=version, n=state.n)
            return replace(state, R_best=Fraction(1), best=state.current, status="done_perfect"), None
        if score.score > state.R_best:
            state = replace(state, R_best=score.score, best=state.current)
            if bundle is not None:
                self._emit(events, "snapshot_saved", version=version, score=ratio)
        return state, score

    def step(self, state: EvolutionState) -> tuple[EvolutionState, list[TrajectoryEvent]]:
        if state.status != "running":
            raise ContractError("step() needs a running state")
        events: list[TrajectoryEvent] = []
        cfg = self.cfg

        if not self.variant.rollout_generator:
            state, _ = self._oracle_round(state, events)
            if state.status == "running":
                state = replace(state, status="done_budget")
            return state, events

        if state.ctx.usage() > cfg.beta:
            self._emit(events, "context_cap_hit", version=state.current.version, context_bytes=state.ctx.total_bytes)
            return replace(state, status="done_context"), events

        env = self._generator_env()
        install_skill(env, state.current, replace=True)
        artifacts = rollout(env, self.gen, self.spec, cfg.timeout_multiplier, context=state.ctx.messages,
                            confine=cfg.confine)
        isolation_guard("generator", {"messages": artifacts.messages})
        ctx = state.ctx.extend(artifacts.messages)
        state = replace(state, ctx=ctx)
        self._emit(events, "rollout_done", version=state.current.version, completed=artifacts.completed,
                   timed_out=artifacts.timed_out, outputs=sorted(artifacts.outputs), commands=len(artifacts.transcript),
                   context_bytes=ctx.total_bytes, elapsed_s=round(artifacts.elapsed_s, 6))

        if ctx.usage() > cfg.beta:
            self._emit(events, "context_cap_hit", version=state.current.version, context_bytes=ctx.total_bytes)
            return replace(state, status="done_context"), events

        suite = state.suite
        if self.variant.surrogate:
            history = state.verifier_history if cfg.verifier_persistent else ()
            generated = suite is None
            if suite is None:
                suite = generate_suite(self.ver, self.spec.instruction, artifacts,
                                       include_transcript=cfg.verifier_sees_transcript, history=history)
                state = replace(state, suite=suite)
            result = run_suite(suite, artifacts, env.workdir)
            reward = surrogate_reward(result)
            self._emit(events, "suite_run", version=state.current.version, suite_version=suite.version,
                       generated=generated, passed=result.passed_count, total=result.total,
                       reward=f"{result.passed_count}/{result.total}",
                       display=percent(reward))
            if reward < 1:
                diag = build_diagnostic(self.ver, self.spec.instruction, artifacts, result, suite,
                                        include_transcript=cfg.verifier_sees_transcript, history=history)
                state = self._remember_verifier(state, diag)
                ctx = self._host(state.ctx, "diagnostic", diag.render())
                self._emit(events, "diagnostic_appended", suite_version=suite.version,
                           failed=[aid for aid, _ in diag.failed], fallback=diag.fallback, text=diag.render())
                state = replace(state, ctx=ctx, r=state.r + 1)
                state = self._refine(state, events)
                return self._finish_if_spent(state), events

        if cfg.checklist_gate:
            gate_view = replace(artifacts, outputs={**artifacts.outputs,
                                                    **collect_outputs(env, [cfg.checklist_path])})
            status = checklist_gate(gate_view, cfg.checklist_path, cfg.checklist_items)
            if not status.complete:
                ctx = self._host(state.ctx, "diagnostic", "checklist incomplete: " + ", ".join(status.missing))
                self._emit(events, "checklist_blocked", missing=list(status.missing))
                return self._finish_if_spent(replace(state, ctx=ctx, r=state.r + 1)), events

        state, score = self._oracle_round(state, events)
        if score is None:
            return state, events
        bit = to_opaque(score).serialize()
        state = replace(state, ctx=self._host(state.ctx, "oracle_bit", bit))
        self._emit(events, "bit_appended", bit=bit)

        if self.variant.surrogate:
            history = state.verifier_history if cfg.verifier_persistent else ()
            stronger = generate_suite(self.ver, self.spec.instruction, artifacts, suite,
                                      include_transcript=cfg.verifier_sees_transcript, history=history)
            state = replace(state, suite=stronger, j=state.j + 1)
            self._emit(events, "suite_escalated", from_version=suite.version, suite_version=stronger.version,
                       assertions=len(stronger))
        elif self.variant.refine and state.n < self.budget:
            state = self._refine(state, events)
        return self._finish_if_spent(state), events

    def _remember_verifier(self, state: EvolutionState, diag: Diagnostic) -> EvolutionState:
        if not self.cfg.verifier_persistent or not self.ver.requests:
            return state
        last = self.ver.requests[-1] + (Message("policy", "policy_output", self.ver.responses[-1]),)
        return replace(state, verifier_history=last)

    def _refine(self, state: EvolutionState, events: list) -> EvolutionState:
        resp, ctx = self._ask_generator(state.ctx, ("skill_edit",))
        new = bundle_from_response(resp, state.current)
        self._skill_generated(events, new, state.current)
        return replace(state, ctx=ctx, current=new, i=state.i + 1)

    def run(self) -> EvolutionOutcome:
        try:
            state = self.start()
            state = self._finish_if_spent(state)
            while state.status == "running":
                state, _ = self.step(state)
        finally:
            self.close()
        return EvolutionOutcome(state.best, state.R_best, state, tuple(self.trace.events), self.trace)


def run_evolution(spec: TaskSpec, cfg: EvolutionConfig, gen: PolicyHandle | None, ver: PolicyHandle | None,
                  oracle_ref: HiddenSuiteRef | None = None, **kwargs: Any) -> EvolutionOutcome:
    ref = oracle_ref if oracle_ref is not None else spec.oracle_suite
    if ref is None and kwargs.get("oracle") is None:
        raise ContractError(f"task {spec.task_id} has no hidden suite")
    return Evolution(spec, cfg, gen, ver, ref, **kwargs).run()


def run_many(jobs: Sequence[Mapping[str, Any]], workers: int = 4) -> list[EvolutionOutcome]:
    """Run independent evolution jobs concurrently; results keep job order.

    Each job is a mapping of :func:`run_evolution` keyword arguments and must
    carry its own policy handles.
    """
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        return list(pool.map(lambda job: run_evolution(**job), jobs))


def render_summary(outcome: EvolutionOutcome) -> str:
    """Markdown run summary (the per-run evolution_summary.md)."""
    st = outcome.state
    counts: dict[str, int] = {}
    for e in outcome.trace:
        counts[e.kind] = counts.get(e.kind, 0) + 1
    lines = [
        "# Evolution summary",
        "",
        f"- status: {st.status}",
        f"- skill versions generated: {counts.get('skill_generated', 0)}",
        f"- final skill: {outcome.final.name if outcome.final and outcome.final.manifest else '-'}"
        f" v{outcome.final.version if outcome.final else '-'}",
        f"- surrogate refinements (r): {st.r}",
        f"- oracle evaluations (n): {st.n}",
        f"- suite versions (j): {st.j}",
        f"- context usage: {float(st.ctx.usage()):.3f}",
        "",
        "## Rounds",
        "",
    ]
    for e in outcome.trace:
        if e.kind in ("suite_run", "checklist_blocked", "oracle_evaluated", "context_cap_hit", "early_exit"):
            detail = ", ".join(f"{k}={v}" for k, v in e.to_record().items() if k not in ("step", "kind", "task"))
            lines.append(f"- [{e.step}] {e.kind}: {detail}")
    return "\n".join(lines) + "\n"
