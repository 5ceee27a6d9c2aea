"""Task environments: provisioning, skill installation, rollouts, output capture.

Confinement is a working-directory jail. Commands run through ``bash -c``
with the workdir as cwd and HOME, and a lexical check rejects commands that
would write outside it. OS-level isolation can be layered on by passing a
different ``runner`` to :func:`rollout`.
"""

from __future__ import annotations

import errno
import glob as globlib
import os
import shlex
import shutil
import signal
import subprocess
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping, Sequence

from .bundle import SkillBundle, write_bundle
from .errors import (
    DiskFull,
    FixtureMissing,
    NameCollision,
    PolicyError,
    PolicyFailure,
    SandboxEscape,
)
from .policy import Message, PolicyHandle, request_with_retry

SKILLS_DIR = "skills"
TRANSCRIPT_FILE = ".transcript.log"
OBSERVATION_CAP = 32 * 1024
TRUNCATION_MARKER = "\n[... output truncated ...]\n"
LISTING_PREFIX = "Installed skills"
LOADED_PREFIX = "Loaded skill "
UNNAMED_SKILL = "unnamed-skill"


@dataclass(frozen=True)
class TaskSpec:
    task_id: str
    instruction: str
    fixture: Path | None
    output_globs: tuple[str, ...]
    oracle_suite: Any = None
    timeout_s: float = 600.0
    domain_tag: str | None = None

    def __post_init__(self) -> None:
        if not self.task_id:
            raise ValueError("task_id must be non-empty")
        if not self.instruction.strip():
            raise ValueError("instruction must be non-empty")
        if self.timeout_s <= 0:
            raise ValueError("timeout_s must be positive")
        if not self.output_globs:
            raise ValueError("output_globs must be non-empty")
        object.__setattr__(self, "output_globs", tuple(self.output_globs))
        if self.fixture is not None:
            object.__setattr__(self, "fixture", Path(self.fixture))


@dataclass
class Environment:
    env_id: str
    workdir: Path
    provisioned_from: str
    fresh: bool = True
    mutated: bool = False
    installed: dict[str, int] = field(default_factory=dict)

    @property
    def skills_dir(self) -> Path:
        return self.workdir / SKILLS_DIR

    def dispose(self) -> None:
        shutil.rmtree(self.workdir, ignore_errors=True)


@dataclass(frozen=True)
class TranscriptEntry:
    command: str
    output: str
    exit_status: int
    wall_s: float


@dataclass(frozen=True)
class RolloutArtifacts:
    outputs: Mapping[str, bytes]
    transcript: tuple[TranscriptEntry, ...] = ()
    elapsed_s: float = 0.0
    completed: bool = True
    timed_out: bool = False
    messages: tuple[Message, ...] = field(default=(), compare=False)

    def text(self, path: str) -> str | None:
        data = self.outputs.get(path)
        return None if data is None else data.decode("utf-8", errors="replace")


def provision(spec: TaskSpec, root: str | os.PathLike[str] | None = None) -> Environment:
    """Copy the task fixture into a new private workdir."""
    if spec.fixture is not None and not spec.fixture.is_dir():
        raise FixtureMissing(f"fixture {spec.fixture} is not a readable directory")
    try:
        workdir = Path(tempfile.mkdtemp(prefix=f"{spec.task_id}-", dir=root))
        if spec.fixture is not None:
            shutil.copytree(spec.fixture, workdir, dirs_exist_ok=True)
            os.chmod(workdir, 0o700)  # copytree copies the fixture's mode
        (workdir / SKILLS_DIR).mkdir(exist_ok=True)
    except OSError as exc:
        if exc.errno == errno.ENOSPC:
            raise DiskFull(str(exc)) from None
        raise
    return Environment(workdir.name, workdir, spec.task_id)


def clone_fresh(spec: TaskSpec, root: str | os.PathLike[str] | None = None) -> Environment:
    """A pristine environment that shares nothing with earlier ones."""
    return provision(spec, root)


def install_skill(env: Environment, bundle: SkillBundle, replace: bool = False) -> Path:
    name = bundle.manifest.name if bundle.manifest is not None else UNNAMED_SKILL
    dest = env.skills_dir / name
    if dest.exists():
        if not replace:
            raise NameCollision(f"skill {name!r} is already installed")
        shutil.rmtree(dest)
    write_bundle(bundle, dest)
    env.installed[name] = bundle.version
    return dest


def collect_outputs(env: Environment, globs: Iterable[str]) -> dict[str, bytes]:
    found: set[str] = set()
    for pattern in globs:
        for rel in globlib.glob(pattern, root_dir=env.workdir, recursive=True):
            path = env.workdir / rel
            if path.is_file() and not path.is_symlink():
                found.add(Path(rel).as_posix())
    found.discard(TRANSCRIPT_FILE)
    return {rel: (env.workdir / rel).read_bytes() for rel in sorted(found)}


# --- confinement -------------------------------------------------------------

_SEPARATORS = {";", "&&", "||", "|", "&", "(", ")", "\n"}
_REDIRECTS = {">", ">>", "&>", ">|", "1>", "2>", "&>>"}
_LAST_ARG_WRITERS = {"cp", "mv", "ln", "install", "rsync"}
_ALL_ARG_WRITERS = {"touch", "mkdir", "rm", "rmdir", "tee", "cd", "truncate", "chmod"}
_SAFE_TARGETS = {"/dev/null", "/dev/stdout", "/dev/stderr"}


def _outside(path: str, workdir: Path) -> bool:
    if path in _SAFE_TARGETS or path.startswith("$") or path.startswith("&"):
        return False
    expanded = path.replace("~", str(workdir), 1) if path.startswith("~") else path
    full = os.path.normpath(os.path.join(workdir, expanded))
    base = os.path.normpath(workdir)
    return full != base and not full.startswith(base + os.sep)


def check_confinement(keystrokes: str, workdir: Path) -> None:
    """Reject commands that lexically write outside ``workdir``.

    This is a best-effort lexical check; it cannot see paths computed at
    run time.
    """
    for line in keystrokes.splitlines():
        _check_line(line, workdir)


def _check_line(line: str, workdir: Path) -> None:
    try:
        lexer = shlex.shlex(line, posix=True, punctuation_chars=";&|()<>")
        lexer.whitespace_split = True
        tokens = list(lexer)
    except ValueError:
        return
    segment: list[str] = []

    def flush() -> None:
        if not segment:
            return
        cmd, args = segment[0], [a for a in segment[1:] if not a.startswith("-")]
        targets: list[str] = []
        if cmd in _LAST_ARG_WRITERS and args:
            targets.append(args[-1])
        elif cmd in _ALL_ARG_WRITERS:
            targets.extend(args)
        elif cmd == "dd":
            targets.extend(a[3:] for a in args if a.startswith("of="))
        for t in targets:
            if _outside(t, workdir):
                raise SandboxEscape(f"{cmd} targets {t!r} outside the workdir")
        segment.clear()

    expect_target = False
    for tok in tokens:
        if expect_target:
            expect_target = False
            if _outside(tok, workdir):
                raise SandboxEscape(f"redirect to {tok!r} leaves the workdir")
            continue
        if tok in _REDIRECTS:
            expect_target = True
        elif tok in _SEPARATORS or set(tok) <= set(";&|()"):
            flush()
        else:
            segment.append(tok)
    flush()


# --- command execution -------------------------------------------------------


def run_command(keystrokes: str, workdir: Path, timeout_s: float) -> tuple[str, int, bool]:
    """Run one command; returns (combined output, exit status, timed_out)."""
    env = {**os.environ, "HOME": str(workdir), "PWD": str(workdir), "SKILLS_DIR": str(workdir / SKILLS_DIR)}
    proc = subprocess.Popen(["bash", "-c", keystrokes], cwd=workdir, env=env, stdin=subprocess.DEVNULL,
                            stdout=subprocess.PIPE, stderr=subprocess.STDOUT, start_new_session=True)
    try:
        out, _ = proc.communicate(timeout=max(timeout_s, 0.001))
        return out.decode("utf-8", errors="replace"), proc.returncode, False
    except subprocess.TimeoutExpired:
        try:
            os.killpg(proc.pid, signal.SIGKILL)
        except ProcessLookupError:
            pass
        out, _ = proc.communicate()
        return out.decode("utf-8", errors="replace"), 124, True


def truncate_observation(text: str, cap: int = OBSERVATION_CAP) -> str:
    data = text.encode("utf-8")
    if len(data) <= cap:
        return text
    return data[:cap].decode("utf-8", errors="ignore") + TRUNCATION_MARKER


def _skills_listing(env: Environment) -> str:
    from .bundle import load_bundle

    lines = []
    for name in sorted(env.installed):
        try:
            desc = load_bundle(env.skills_dir / name).manifest.description
        except Exception:  # a broken bundle still shows up by name
            desc = ""
        lines.append(f"- {name}: {desc}")
    if not lines:
        return "No skills are installed."
    return LISTING_PREFIX + " (load with {\"load_skill\": name}):\n" + "\n".join(lines)


def _load_skill_doc(env: Environment, name: str) -> str:
    doc = env.skills_dir / name / "SKILL.md"
    if name not in env.installed or not doc.is_file():
        return f"No installed skill named {name!r}."
    return f"{LOADED_PREFIX}{name}:\n" + doc.read_text(encoding="utf-8")


def _append_transcript_log(env: Environment, entries: Sequence[TranscriptEntry]) -> None:
    log = env.workdir / TRANSCRIPT_FILE
    start = 0
    if log.exists():
        with log.open("rb") as fh:
            start = sum(1 for _ in fh)
    with log.open("a", encoding="utf-8") as fh:
        for offset, entry in enumerate(entries, 1):
            cmd = entry.command.strip().replace("\\", "\\\\").replace("\n", "\\n").replace("\t", "\\t")
            fh.write(f"{start + offset:06d}\t{cmd}\t{entry.exit_status}\n")


Runner = Callable[[str, Path, float], "tuple[str, int, bool]"]


def rollout(env: Environment, policy: PolicyHandle, spec: TaskSpec, timeout_multiplier: float = 1.0, *,
            context: Sequence[Message] | None = None, instruction: str | None = None, confine: bool = True,
            observation_cap: int = OBSERVATION_CAP, runner: Runner = run_command,
            clock: Callable[[], float] = time.monotonic) -> RolloutArtifacts:
    """Drive ``policy``'s command loop inside ``env`` and collect the outputs.

    When ``context`` is given (the generator's persistent conversation) each
    request sees it followed by this rollout's messages; otherwise the view
    starts from the task instruction. The exchanged messages are returned in
    ``RolloutArtifacts.messages`` so the caller can fold them into its context.
    """
    if timeout_multiplier <= 0:
        raise ValueError("timeout_multiplier must be positive")
    effective = spec.timeout_s * timeout_multiplier
    base: tuple[Message, ...]
    if context is None:
        base = (Message("host", "instruction", instruction or spec.instruction),)
    else:
        base = tuple(context)
    local: list[Message] = [Message("host", "observation", _skills_listing(env) + "\nExecute the task now.")]
    transcript: list[TranscriptEntry] = []
    completed = timed_out = False
    start = clock()
    env.fresh = False

    try:
        while True:
            if clock() - start >= effective:
                timed_out = True
                break
            try:
                resp = request_with_retry(policy, base + tuple(local), expect=("commands", "complete"))
            except PolicyError as exc:
                raise PolicyFailure(f"{policy.session_id}: {exc}") from exc
            local.append(Message("policy", "policy_output", resp.raw))
            if resp.payload.get("load_skill"):
                local.append(Message("host", "observation", _load_skill_doc(env, resp.payload["load_skill"])))
            for cmd in resp.commands:
                remaining = effective - (clock() - start)
                if remaining <= 0:
                    timed_out = True
                    break
                t0 = clock()
                keys = cmd.keystrokes
                if keys.strip() in ("", "C-c", "C-d"):
                    time.sleep(min(cmd.wait_s, remaining))
                    output, status, cmd_timeout = "", 0, False
                else:
                    if confine:
                        check_confinement(keys, env.workdir)
                    output, status, cmd_timeout = runner(keys, env.workdir, remaining)
                transcript.append(TranscriptEntry(keys, output, status, clock() - t0))
                shown = truncate_observation(output, observation_cap)
                local.append(Message("host", "observation", f"$ {keys.rstrip()}\n{shown}[exit {status}]"))
                if cmd_timeout:
                    timed_out = True
                    break
            if timed_out:
                break
            if resp.kind == "complete":
                completed = True
                break
    finally:
        env.mutated = True
        _append_transcript_log(env, transcript)

    elapsed = clock() - start
    outputs = collect_outputs(env, spec.output_globs)
    return RolloutArtifacts(outputs, tuple(transcript), elapsed, completed, timed_out, tuple(local))
