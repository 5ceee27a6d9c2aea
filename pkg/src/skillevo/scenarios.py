"""Ready-made scripted runs: fixtures, policies and hidden suites.

These drive the acceptance tests and the demos. Everything here is
deterministic given its arguments; randomized builders take a seed.
"""

from __future__ import annotations

import json
import random
import threading
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Any, Callable, Mapping, Sequence

from .bundle import SkillBundle, make_bundle
from .evolution import EvolutionConfig, EvolutionOutcome, run_evolution
from .oracle import HiddenSuiteRef, OracleScore, SealedStore, seal_suite
from .policy import (
    Message,
    PolicyHandle,
    commands_response,
    diagnostic_response,
    dump_scripted,
    load_scripted,
    make_function_policy,
    make_scripted,
    skill_edit_response,
    suite_response,
)
from .sandbox import LISTING_PREFIX, TaskSpec
from .solver import make_solver
from .tasks import load_corpus, load_task, write_task
from .trace import TraceLog
from .verifier import ASK_DIAGNOSE, Assertion, format_manifest

FULL_PROGRESS = ("P1", "P1b", "P2", "P3", "P4", "P5", "P6")


def progress_text(done: Sequence[str] = FULL_PROGRESS, items: Sequence[str] = FULL_PROGRESS) -> str:
    return "# Progress\n" + "".join(f"- [{'x' if i in done else ' '}] {i}\n" for i in items)


@dataclass
class Scenario:
    """Everything :func:`run_evolution` needs for one scripted run."""

    spec: TaskSpec
    cfg: EvolutionConfig
    gen: PolicyHandle | None
    ver: PolicyHandle | None
    oracle_ref: HiddenSuiteRef | None = None
    oracle: Any = None
    target: PolicyHandle | None = None
    sandbox_root: Path | None = None
    notes: dict[str, Any] = field(default_factory=dict)

    def run(self, trace: TraceLog | None = None) -> EvolutionOutcome:
        kwargs: dict[str, Any] = {"trace": trace, "sandbox_root": self.sandbox_root, "target": self.target}
        if self.oracle is not None:
            kwargs["oracle"] = self.oracle
        return run_evolution(self.spec, self.cfg, self.gen, self.ver, self.oracle_ref, **kwargs)


class ScheduledOracle:
    """Oracle double returning scores from a fixed schedule.

    It has the :class:`~skillevo.oracle.Oracle` interface used by the engine
    and records which skill version each call saw.
    """

    def __init__(self, scores: Sequence[Fraction], budget: int) -> None:
        self.scores = [Fraction(s) for s in scores]
        self.budget = budget
        self.used = 0
        self.seen_versions: list[int | None] = []
        self._lock = threading.Lock()

    def evaluate(self, bundle: SkillBundle | None, spec: TaskSpec, target: PolicyHandle, *,
                 timeout_multiplier: float = 1.0, hint: bool = True) -> OracleScore:
        with self._lock:
            score = self.scores[self.used % len(self.scores)]
            self.used += 1
        version = None if bundle is None else bundle.version
        self.seen_versions.append(version)
        return OracleScore(score, score.numerator, score.denominator, version, f"scheduled-{self.used}")


# --- golden six-round replay -------------------------------------------------

GOLDEN_SKILL = "transit-period"
GOLDEN_OUTPUTS = ("answer.txt", "aliases.txt", "report.md")
GOLDEN_PERIOD = "3.24156"
GOLDEN_INSTRUCTION = (
    "transits.csv lists ten consecutive transit mid-times (days) of one planet.\n"
    "Write the orbital period in days with five decimals to answer.txt, the planet's\n"
    "catalogue aliases one per line to aliases.txt, and a short report.md giving\n"
    "period_days, method, transits and epoch.\n"
)
_RUN = f"python3 skills/{GOLDEN_SKILL}/scripts/period.py transits.csv"

_GOLDEN_DOC = f"""---
name: {GOLDEN_SKILL}
description: Estimate an orbital period from a table of transit mid-times.
---
# Transit period

Run from the task directory:

```bash
{_RUN}
```

The script writes answer.txt, aliases.txt and report.md.
"""

_SCRIPT_HEAD = """import csv
import sys

rows = list(csv.reader(open(sys.argv[1])))[1:]
"""

_SCRIPT_TAIL = """
epoch = times[0]
with open("answer.txt", "w") as fh:
    fh.write(f"{period:.5f}\\n")
with open("aliases.txt", "w") as fh:
    fh.write("HAT-P-7b\\nKepler-2b\\nKOI-2.01\\n")
with open("report.md", "w") as fh:
    fh.write("# Transit period\\n")
    fh.write(f"period_days: {period:.5f}\\n")
    fh.write(f"method: {METHOD}\\n")
    fh.write(f"transits: {len(times)}\\n")
    fh.write(f"epoch: {epoch:.5f}\\n")
    for line in EXTRA:
        fh.write(line + "\\n")
"""

# S0 reads a column that does not exist and crashes before writing anything.
_S0_SCRIPT = _SCRIPT_HEAD + "times = [float(r[2]) for r in rows]\n"
_S1_SCRIPT = (_SCRIPT_HEAD + "times = [float(r[1]) for r in rows]\nperiod = times[1] - times[0]\n"
              "METHOD = 'first_difference'\nEXTRA = []\n" + _SCRIPT_TAIL)
_S2_SCRIPT = (_SCRIPT_HEAD + """times = [float(r[1]) for r in rows]
ks = range(len(times))
k_mean = sum(ks) / len(times)
t_mean = sum(times) / len(times)
period = sum((k - k_mean) * (t - t_mean) for k, t in zip(ks, times)) / sum((k - k_mean) ** 2 for k in ks)
METHOD = 'linear_fit'
EXTRA = ['refined: two_stage']
""" + _SCRIPT_TAIL)


def golden_fixture() -> str:
    lines = ["k,t"]
    for k in range(10):
        t = Fraction(1) + k * Fraction(GOLDEN_PERIOD)
        if k == 1:
            t += Fraction("0.00002")
        lines.append(f"{k},{float(t):.5f}")
    return "\n".join(lines) + "\n"


def _a(aid: str, kind: str, target: str, expectation: str = "") -> Assertion:
    return Assertion(aid, kind, target, expectation)


def golden_hidden_suite() -> tuple[Assertion, ...]:
    return (
        _a("h1", "file_exists", "answer.txt"),
        _a("h2", "content_matches", "answer.txt", r"^\d+\.\d{5}\s*$"),
        _a("h3", "numeric_within", "answer.txt", f"{GOLDEN_PERIOD},0.000005"),
        _a("h4", "content_matches", "aliases.txt", r"^KOI-2\.01$"),
    )


def golden_suites() -> tuple[tuple[Assertion, ...], tuple[Assertion, ...], tuple[Assertion, ...]]:
    """Verifier suites V0 (15), V1 (20) and V2 (22 with 3 failing on S1)."""
    v0 = (
        _a("a01", "file_exists", "answer.txt"),
        _a("a02", "file_exists", "aliases.txt"),
        _a("a03", "file_exists", "report.md"),
        _a("a04", "content_matches", "answer.txt", r"^\d+\.\d{5}\s*$"),
        _a("a05", "numeric_within", "answer.txt", "3.2416,0.001"),
        _a("a06", "content_matches", "aliases.txt", r"^HAT-P-7b$"),
        _a("a07", "content_matches", "aliases.txt", r"^Kepler-2b$"),
        _a("a08", "content_matches", "aliases.txt", r"^KOI-2\.01$"),
        _a("a09", "content_matches", "report.md", r"^# Transit period"),
        _a("a10", "content_matches", "report.md", r"^period_days: "),
        _a("a11", "content_matches", "report.md", r"^method: \w+"),
        _a("a12", "content_matches", "report.md", r"^transits: 10$"),
        _a("a13", "content_matches", "report.md", r"^epoch: "),
        _a("a14", "numeric_within", "report.md", "3.2416,0.001"),
        _a("a15", "content_matches", "answer.txt", r"^3\.241"),
    )
    v1 = v0 + (
        _a("a16", "content_matches", "aliases.txt", r"\A(?:.+\n){3}\Z"),
        _a("a17", "content_matches", "report.md", r"^epoch: 1\.0"),
        _a("a18", "command_succeeds", "test -s answer.txt", "0"),
        _a("a19", "command_succeeds", "grep -q period_days report.md", "0"),
        _a("a20", "numeric_within", "answer.txt", "3.2416,0.0001"),
    )
    v2 = v1[:-1] + (
        _a("a20", "numeric_within", "answer.txt", f"{GOLDEN_PERIOD},0.000005"),
        _a("a21", "content_matches", "report.md", r"^method: linear_fit$"),
        _a("a22", "content_matches", "report.md", r"^refined: two_stage$"),
    )
    return v0, v1, v2


def golden_generator_steps() -> list[str]:
    progress_cmd = lambda done: "printf '%s\\n' " + " ".join(  # noqa: E731
        f"'{line}'" for line in progress_text(done).splitlines()) + " > progress.md"
    rollout = lambda extra=(): commands_response([_RUN, *extra], complete=True,  # noqa: E731
                                                 analysis="run the installed procedure").raw
    full = progress_cmd(FULL_PROGRESS)
    partial = progress_cmd(FULL_PROGRESS[:-1])
    return [
        skill_edit_response({"scripts/period.py": _S0_SCRIPT}, _GOLDEN_DOC, "first draft").raw,
        rollout(),                                                   # round 1: S0 crashes
        skill_edit_response({"scripts/period.py": _S1_SCRIPT}, None, "read the time column").raw,
        rollout([partial]),                                          # round 2: P6 left open
        rollout([full]),                                             # round 3
        rollout([full]),                                             # round 4
        rollout([full]),                                             # round 5
        skill_edit_response({"scripts/period.py": _S2_SCRIPT}, None, "fit all transits").raw,
        rollout([full]),                                             # round 6
    ]


def golden_verifier_steps() -> list[str]:
    v0, v1, v2 = golden_suites()
    return [
        suite_response(format_manifest(v0)).raw,
        diagnostic_response("No output files were produced.", "the period script raises IndexError on column 2",
                            ["read the second CSV column", "rerun the script and check answer.txt"]).raw,
        suite_response(format_manifest(v1)).raw,
        suite_response(format_manifest(v2)).raw,
        diagnostic_response("Period precision and method reporting are insufficient.",
                            "a single transit interval amplifies timing noise",
                            ["fit a line through all transit times", "report the fitting method"]).raw,
    ]


def write_golden_task(root: str | Path) -> Path:
    return write_task(root, "transit-period-golden", GOLDEN_INSTRUCTION, list(GOLDEN_OUTPUTS),
                      fixture_files={"transits.csv": golden_fixture(), "README.txt": "mid-times in days\n"},
                      hidden_manifest=format_manifest(golden_hidden_suite()), domain="astronomy")


def golden_scenario(root: str | Path, *, cfg: EvolutionConfig | None = None,
                    store: SealedStore | None = None) -> Scenario:
    """The six-round replay: verifier fail, checklist fail, two 3/4 oracle rounds, verifier fail, 4/4."""
    root = Path(root)
    task_dir = write_golden_task(root / "tasks")
    spec = load_task(task_dir, store)
    sandboxes = root / "sandboxes"
    sandboxes.mkdir(parents=True, exist_ok=True)
    gen = make_scripted(golden_generator_steps(), "generator")
    ver = make_scripted(golden_verifier_steps(), "verifier")
    return Scenario(spec, cfg or EvolutionConfig(), gen, ver, spec.oracle_suite, sandbox_root=sandboxes,
                    notes={"task_dir": task_dir})


def dump_replay_dir(directory: str | Path, *, cfg: Mapping[str, Any] | None = None) -> Path:
    """Write a self-contained replay directory for the golden run.

    Layout: ``task/`` (task.spec, fixture, hidden suite), ``generator/`` and
    ``verifier/`` (numbered raw responses) and ``config.json``.
    """
    root = Path(directory)
    write_golden_task(root / "_t")
    (root / "_t" / "transit-period-golden").rename(root / "task")
    (root / "_t").rmdir()
    dump_scripted(golden_generator_steps(), root / "generator")
    dump_scripted(golden_verifier_steps(), root / "verifier")
    (root / "config.json").write_text(json.dumps(dict(cfg or {}), indent=2) + "\n", encoding="utf-8")
    return root


def load_replay_dir(directory: str | Path, sandbox_root: str | Path | None = None,
                    store: SealedStore | None = None) -> Scenario:
    root = Path(directory)
    spec = load_task(root / "task", store)
    cfg_path = root / "config.json"
    cfg = EvolutionConfig.from_mapping(json.loads(cfg_path.read_text())) if cfg_path.exists() else EvolutionConfig()
    gen = load_scripted(root / "generator", "generator") if (root / "generator").is_dir() else None
    ver = load_scripted(root / "verifier", "verifier") if (root / "verifier").is_dir() else None
    return Scenario(spec, cfg, gen, ver, spec.oracle_suite, sandbox_root=Path(sandbox_root) if sandbox_root else None)


# --- stub policies for law checks ------------------------------------------

STUB_SKILL = "stub-skill"
MARKER = "ok.flag"


def stub_skill_doc(version: int, extra: str = "") -> str:
    return (f"---\nname: {STUB_SKILL}\ndescription: Placeholder procedure used by scripted runs.\n---\n"
            f"# Stub procedure\n\nRevision {version}.\n{extra}")


def stub_generator(*, commands: Sequence[str] = (), rng: random.Random | None = None, marker_prob: float = 1.0,
                   analysis: str = "", padding: int = 0, doc_extra: str = "",
                   files: dict[str, str] | None = None, session_id: str | None = None) -> PolicyHandle:
    """A generator that answers rollouts with ``commands`` and every other request with a skill edit.

    A rollout request is recognised by its last message being a host
    observation. Each edit bumps a revision counter; with ``rng`` given the
    marker file is included with probability ``marker_prob``.
    """
    count = {"edits": 0}

    def reply(view: Sequence[Message]):
        last = view[-1]
        if last.kind == "observation":
            return commands_response(list(commands), complete=True, analysis=analysis + "x" * padding)
        rev = count["edits"]
        count["edits"] += 1
        edits: dict[str, str | None] = {"scripts/step.sh": f"echo revision {rev}\n", **(files or {})}
        if rng is None or rng.random() < marker_prob:
            edits[MARKER] = f"{rev}\n"
        else:
            edits[MARKER] = None
        if rev == 0:
            edits = {k: v for k, v in edits.items() if v is not None}
        return skill_edit_response(edits, stub_skill_doc(rev, doc_extra), analysis + "x" * padding)

    return make_function_policy(reply, "generator", session_id=session_id or "gen-stub")


def stub_verifier(*, passing: bool | Callable[[], bool] = True, marker_gated: bool = False,
                  session_id: str | None = None) -> PolicyHandle:
    """Verifier writing a one-assertion suite.

    ``passing`` chooses an assertion on a fixture file (passes) or on a
    missing file (fails). ``marker_gated`` instead checks the installed
    skill's marker file, so the outcome follows the generator's edits.
    """

    def reply(view: Sequence[Message]):
        if view[-1].body == ASK_DIAGNOSE:
            return diagnostic_response("assertion failed", "required file missing", ["create it"])
        if marker_gated:
            a = _a("s1", "file_exists", f"skills/{STUB_SKILL}/{MARKER}")
        else:
            ok = passing() if callable(passing) else passing
            a = _a("s1", "file_exists", "input.txt" if ok else "missing.txt")
        return suite_response(format_manifest([a]))

    return make_function_policy(reply, "verifier", session_id=session_id or "ver-stub")


def stub_task(root: str | Path, *, hidden: Sequence[Assertion] | None = None, progress: bool = True,
              task_id: str = "stub-task", store: SealedStore | None = None) -> TaskSpec:
    fixture = {"input.txt": "42\n"}
    if progress:
        fixture["progress.md"] = progress_text()
    hidden = hidden if hidden is not None else (_a("h1", "file_exists", "input.txt"),
                                                _a("h2", "file_exists", "never.txt"))
    task_dir = write_task(Path(root) / "tasks", task_id, "Copy input.txt to answer.txt.", ["answer.txt"],
                          fixture_files=fixture, hidden_manifest=format_manifest(hidden))
    return load_task(task_dir, store)


def _sandboxes(root: str | Path) -> Path:
    path = Path(root) / "sandboxes"
    path.mkdir(parents=True, exist_ok=True)
    return path


def always_fail_scenario(root: str | Path, cfg: EvolutionConfig | None = None) -> Scenario:
    spec = stub_task(root)
    return Scenario(spec, cfg or EvolutionConfig(), stub_generator(), stub_verifier(passing=False),
                    spec.oracle_suite, sandbox_root=_sandboxes(root))


def constant_score_scenario(root: str | Path, cfg: EvolutionConfig | None = None) -> Scenario:
    """Verifier always passes; the real hidden suite always scores 1/2."""
    spec = stub_task(root)
    return Scenario(spec, cfg or EvolutionConfig(), stub_generator(), stub_verifier(passing=True),
                    spec.oracle_suite, sandbox_root=_sandboxes(root))


def scheduled_scenario(root: str | Path, scores: Sequence[Fraction], cfg: EvolutionConfig | None = None, *,
                       verifier: PolicyHandle | None = None, generator: PolicyHandle | None = None,
                       spec: TaskSpec | None = None) -> Scenario:
    cfg = cfg or EvolutionConfig()
    spec = spec or stub_task(root)
    oracle = ScheduledOracle(scores, 1 if cfg.mode in ("no_evolution", "no_skill") else cfg.N)
    gen = generator or (None if cfg.mode == "no_skill" else stub_generator())
    ver = verifier or (stub_verifier() if cfg.mode == "full" else None)
    return Scenario(spec, cfg, gen, ver, spec.oracle_suite, oracle=oracle, sandbox_root=_sandboxes(root))


SCORE_GRID = tuple(Fraction(k, 4) for k in range(5))


def random_snapshot_scenario(root: str | Path, seed: int, spec: TaskSpec | None = None) -> Scenario:
    """Random oracle-score schedule plus random skill revisions, for the best-snapshot law."""
    rng = random.Random(seed)
    n = rng.randint(1, 5)
    scores = [rng.choice(SCORE_GRID) for _ in range(n)]
    if rng.random() < 0.5:
        cfg = EvolutionConfig(N=n, M=rng.randint(1, 6), mode="no_verifier", seed=seed)
        return scheduled_scenario(root, scores, cfg, spec=spec)
    cfg = EvolutionConfig(N=n, M=rng.randint(1, 6), seed=seed)
    gen = stub_generator(rng=rng, marker_prob=0.6)
    return scheduled_scenario(root, scores, cfg, verifier=stub_verifier(marker_gated=True), generator=gen,
                              spec=spec)


def canary_scenario(root: str | Path, seed: int, store: SealedStore | None = None) -> Scenario:
    """Plants three tokens: in generator output, inside the skill bundle and in the hidden suite."""
    rng = random.Random(seed)
    tok = {k: f"CANARY{k.upper()}{rng.getrandbits(48):012x}" for k in ("a", "b", "c")}
    hidden_pass = rng.random() < 0.5
    hidden = (
        _a(f"h-{tok['c']}", "file_exists", "input.txt"),
        _a("h2", "content_matches", "input.txt" if hidden_pass else "never.txt", f"42|{tok['c']}"),
    )
    spec = stub_task(root, hidden=hidden, task_id=f"canary-{seed}", store=store)
    gen = stub_generator(rng=rng, marker_prob=rng.choice((0.3, 0.7, 1.0)), analysis=f"scratch {tok['a']} ",
                         doc_extra=f"\nInternal note {tok['b']}\n",
                         files={"references/internal.md": f"{tok['b']}\n"})
    cfg = EvolutionConfig(N=rng.randint(1, 4), M=rng.randint(1, 4), seed=seed,
                          verifier_persistent=rng.random() < 0.5)
    return Scenario(spec, cfg, gen, stub_verifier(marker_gated=True), spec.oracle_suite,
                    sandbox_root=_sandboxes(root), notes={"tokens": tok})


# --- six-task desk corpus -------------------------------------------------

_DESK_TASKS = (
    # id, input, expected answer, skill command (None: baseline copy solves it)
    ("copy-text", "alpha\nbeta\n", "alpha\nbeta\n", None),
    ("copy-numbers", "3\n1\n2\n", "3\n1\n2\n", None),
    ("sum-numbers", "3\n1\n2\n", "6\n", "awk '{s+=$1} END {print s}' input.txt > answer.txt"),
    ("reverse-lines", "one\ntwo\nthree\n", "three\ntwo\none\n", "tac input.txt > answer.txt"),
    ("count-words", "a b c\nd e\n", "5\n", "wc -w < input.txt | tr -d ' ' > answer.txt"),
    ("upper-case", "mixed Case\n", "MIXED CASE\n", "tr a-z A-Z < input.txt > answer.txt"),
)
BASELINE_COMMANDS = ("cp input.txt answer.txt",)


def desk_bundle(task_id: str, command: str) -> SkillBundle:
    name = f"evo-{task_id}"
    doc = (f"---\nname: {name}\ndescription: Solve the {task_id} task with the bundled script.\n---\n"
           f"# {task_id}\n\nRun from the task directory:\n\n```bash\nsh skills/{name}/scripts/solve.sh\n```\n")
    return make_bundle(doc, {"scripts/solve.sh": command + "\n"})


def build_desk_corpus(root: str | Path, store: SealedStore | None = None
                      ) -> tuple[list[TaskSpec], dict[str, SkillBundle]]:
    """Six tasks: two solvable by copying the input, four only through a bundle script."""
    corpus = Path(root)
    bundles = {}
    for task_id, given, expected, command in _DESK_TASKS:
        hidden = (_a("h1", "file_exists", "answer.txt"), _a("h2", "content_equals", "answer.txt", expected))
        domain = "text" if command is None or "awk" not in command and "wc" not in command else "numeric"
        write_task(corpus, task_id, f"Read input.txt and write the {task_id.replace('-', ' ')} result "
                                    "to answer.txt.", ["answer.txt"], fixture_files={"input.txt": given},
                   hidden_manifest=format_manifest(hidden), domain=domain, timeout_s=30)
        bundles[task_id] = desk_bundle(task_id, command or BASELINE_COMMANDS[0])
    return load_corpus(corpus, store), bundles


def make_script_runner(session_id: str = "gen-runner") -> PolicyHandle:
    """A second target: runs each installed skill's ``scripts/solve.sh`` without reading its document."""

    def reply(view: Sequence[Message]):
        names: list[str] = []
        for msg in reversed(view):
            if msg.kind == "observation" and msg.body.startswith(LISTING_PREFIX):
                names = [ln[2:].split(":", 1)[0] for ln in msg.body.splitlines()[1:] if ln.startswith("- ")]
                break
        cmds = [f"sh skills/{n}/scripts/solve.sh" for n in names] or list(BASELINE_COMMANDS)
        return commands_response(cmds, complete=True)

    return make_function_policy(reply, "generator", session_id=session_id)


def desk_solver() -> PolicyHandle:
    return make_solver(BASELINE_COMMANDS, session_id="gen-solver")
