"""Generator and verifier policy sessions behind one interface.

A :class:`PolicyHandle` wraps a backend that turns a message view into raw
completion text. Scripted backends replay canned steps (or compute a reply
from the view) and are what every desk-scale test runs on; the remote
backend posts the view to an HTTP endpoint.
"""

from __future__ import annotations

import hashlib
import itertools
import json
import os
import threading
import urllib.error
import urllib.parse
import urllib.request
import uuid
from dataclasses import dataclass, field
from fractions import Fraction
from importlib import resources
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping, Sequence

from .bundle import SkillBundle
from .errors import (
    AuthFailure,
    BackendUnavailable,
    ContractError,
    MalformedResponse,
    ScriptExhausted,
)

ORIGINS = ("system", "host", "policy")
KINDS = ("instruction", "meta_skill", "observation", "diagnostic", "oracle_bit", "policy_output")
RESPONSE_KINDS = ("commands", "skill_edit", "suite_script", "diagnostic_text", "complete")
ROLES = ("generator", "verifier")

# 4 bytes per token is the proxy used to size window_bytes from a model window.
BYTES_PER_TOKEN = 4
DEFAULT_WINDOW_BYTES = 200_000 * BYTES_PER_TOKEN


def prompt_text(name: str) -> str:
    """Read one of the bundled prompt files (``data/prompts/<name>``)."""
    return resources.files("skillevo").joinpath("data", "prompts", name).read_text(encoding="utf-8")


@dataclass(frozen=True)
class Message:
    origin: str
    kind: str
    body: str

    def __post_init__(self) -> None:
        if self.origin not in ORIGINS:
            raise ValueError(f"unknown origin {self.origin!r}")
        if self.kind not in KINDS:
            raise ValueError(f"unknown message kind {self.kind!r}")

    @property
    def byte_len(self) -> int:
        return len(self.body.encode("utf-8"))

    def to_dict(self) -> dict[str, str]:
        return {"origin": self.origin, "kind": self.kind, "body": self.body}


@dataclass(frozen=True)
class ConversationContext:
    """Append-only generator context; every append returns a new value."""

    messages: tuple[Message, ...] = ()
    window_bytes: int = DEFAULT_WINDOW_BYTES
    total_bytes: int = field(default=-1, compare=False)

    def __post_init__(self) -> None:
        if self.window_bytes <= 0:
            raise ValueError("window_bytes must be positive")
        if self.total_bytes < 0:
            object.__setattr__(self, "total_bytes", sum(m.byte_len for m in self.messages))

    def append(self, msg: Message) -> ConversationContext:
        return ConversationContext(self.messages + (msg,), self.window_bytes,
                                   self.total_bytes + msg.byte_len)

    def extend(self, msgs: Iterable[Message]) -> ConversationContext:
        ctx = self
        for m in msgs:
            ctx = ctx.append(m)
        return ctx

    def usage(self) -> Fraction:
        return Fraction(self.total_bytes, self.window_bytes)


def init_context(instruction: str, meta_skill: SkillBundle, window_bytes: int = DEFAULT_WINDOW_BYTES
                 ) -> ConversationContext:
    if not instruction:
        raise ContractError("instruction must be non-empty")
    return ConversationContext((
        Message("host", "instruction", instruction),
        Message("host", "meta_skill", meta_skill.body),
    ), window_bytes)


def append(ctx: ConversationContext, msg: Message) -> ConversationContext:
    return ctx.append(msg)


def usage(ctx: ConversationContext) -> Fraction:
    return ctx.usage()


# --- responses ---------------------------------------------------------------


@dataclass(frozen=True)
class Command:
    keystrokes: str
    wait_s: float = 1.0


@dataclass(frozen=True)
class PolicyResponse:
    kind: str
    payload: Mapping[str, Any]
    raw: str

    @property
    def commands(self) -> tuple[Command, ...]:
        return tuple(self.payload.get("commands", ()))


def _extract_json(raw: str) -> dict[str, Any]:
    decoder = json.JSONDecoder()
    pos = raw.find("{")
    while pos >= 0:
        try:
            obj, _ = decoder.raw_decode(raw, pos)
        except json.JSONDecodeError:
            pos = raw.find("{", pos + 1)
            continue
        if isinstance(obj, dict):
            return obj
        pos = raw.find("{", pos + 1)
    raise MalformedResponse("response contains no JSON object", raw)


def _parse_commands(obj: Mapping[str, Any], raw: str) -> tuple[Command, ...]:
    cmds = obj.get("commands", [])
    if not isinstance(cmds, list):
        raise MalformedResponse("'commands' must be a list", raw)
    out = []
    for entry in cmds:
        if not isinstance(entry, dict) or not isinstance(entry.get("keystrokes"), str):
            raise MalformedResponse("each command needs a string 'keystrokes'", raw)
        duration = entry.get("duration", 1.0)
        if not isinstance(duration, (int, float)) or duration < 0:
            raise MalformedResponse("'duration' must be a non-negative number", raw)
        out.append(Command(entry["keystrokes"], float(duration)))
    return tuple(out)


def parse_response(raw: str, role: str) -> PolicyResponse:
    """Parse raw completion text under the response schema for ``role``."""
    obj = _extract_json(raw)
    if role == "verifier":
        if isinstance(obj.get("suite"), str):
            return PolicyResponse("suite_script", {"source": obj["suite"]}, raw)
        if isinstance(obj.get("diagnostic"), str):
            suggestions = obj.get("suggestions", [])
            if not isinstance(suggestions, list) or not all(isinstance(s, str) for s in suggestions):
                raise MalformedResponse("'suggestions' must be a list of strings", raw)
            return PolicyResponse("diagnostic_text", {
                "text": obj["diagnostic"],
                "root_cause": str(obj.get("root_cause", "")),
                "suggestions": tuple(suggestions),
            }, raw)
        raise MalformedResponse("verifier response needs a 'suite' or 'diagnostic' field", raw)

    if "skill_edit" in obj:
        edit = obj["skill_edit"]
        if not isinstance(edit, dict):
            raise MalformedResponse("'skill_edit' must be an object", raw)
        files = edit.get("files", {})
        if not isinstance(files, dict) or not all(
                isinstance(k, str) and (v is None or isinstance(v, str)) for k, v in files.items()):
            raise MalformedResponse("'skill_edit.files' maps paths to text or null", raw)
        doc = edit.get("doc")
        if doc is not None and not isinstance(doc, str):
            raise MalformedResponse("'skill_edit.doc' must be text", raw)
        return PolicyResponse("skill_edit", {"edits": dict(files), "doc": doc}, raw)

    load_skill = obj.get("load_skill")
    if load_skill is not None and not isinstance(load_skill, str):
        raise MalformedResponse("'load_skill' must be a skill name", raw)
    common = {
        "analysis": str(obj.get("analysis", "")),
        "plan": str(obj.get("plan", "")),
        "load_skill": load_skill,
    }
    if obj.get("task_complete") is True:
        return PolicyResponse("complete", {**common, "commands": _parse_commands(obj, raw)}, raw)
    if "commands" not in obj:
        if load_skill is not None:
            return PolicyResponse("commands", {**common, "commands": ()}, raw)
        raise MalformedResponse("generator response is missing the 'commands' field", raw)
    return PolicyResponse("commands", {**common, "commands": _parse_commands(obj, raw)}, raw)


# Builders for canned responses; each returns the same value parse_response would.

def commands_response(commands: Sequence[str | Command], complete: bool = False, *, analysis: str = "",
                      plan: str = "", load_skill: str | None = None) -> PolicyResponse:
    cmds = [c if isinstance(c, Command) else Command(c, 0.1) for c in commands]
    obj: dict[str, Any] = {
        "analysis": analysis,
        "plan": plan,
        "commands": [{"keystrokes": c.keystrokes, "duration": c.wait_s} for c in cmds],
        "task_complete": complete,
    }
    if load_skill:
        obj["load_skill"] = load_skill
    return parse_response(json.dumps(obj), "generator")


def skill_edit_response(files: Mapping[str, str | None] | None = None, doc: str | None = None,
                        analysis: str = "") -> PolicyResponse:
    obj = {"analysis": analysis, "skill_edit": {"files": dict(files or {}), "doc": doc}}
    return parse_response(json.dumps(obj), "generator")


def suite_response(source: str) -> PolicyResponse:
    return parse_response(json.dumps({"suite": source}), "verifier")


def diagnostic_response(text: str, root_cause: str = "", suggestions: Sequence[str] = ()) -> PolicyResponse:
    obj = {"diagnostic": text, "root_cause": root_cause, "suggestions": list(suggestions)}
    return parse_response(json.dumps(obj), "verifier")


# --- backends and handles ----------------------------------------------------


class ScriptedBackend:
    label = "scripted"

    def __init__(self, steps: Sequence[str], loop: bool = False) -> None:
        if not steps:
            raise ContractError("a scripted policy needs at least one step")
        self.steps = tuple(steps)
        self.loop = loop
        self._cursor = 0

    def complete(self, handle: PolicyHandle, view: Sequence[Message]) -> str:
        if self._cursor >= len(self.steps):
            if not self.loop:
                raise ScriptExhausted(f"{handle.session_id}: all {len(self.steps)} scripted steps used")
            self._cursor = 0
        raw = self.steps[self._cursor]
        self._cursor += 1
        return raw

    @property
    def remaining(self) -> int:
        return len(self.steps) - self._cursor


class FunctionBackend:
    """Deterministic backend computing each reply from the message view."""

    label = "scripted"

    def __init__(self, fn: Callable[[Sequence[Message]], str | PolicyResponse]) -> None:
        self.fn = fn

    def complete(self, handle: PolicyHandle, view: Sequence[Message]) -> str:
        out = self.fn(view)
        return out.raw if isinstance(out, PolicyResponse) else out


class RemoteBackend:
    label = "remote"

    def __init__(self, endpoint: str, auth_env: str | None = None, *, system_prompt: str = "",
                 decoding: Mapping[str, Any] | None = None, timeout_s: float = 120.0) -> None:
        self.endpoint = endpoint
        self.auth_env = auth_env
        self.system_prompt = system_prompt
        self.decoding = dict(decoding or {})
        self.timeout_s = timeout_s

    def complete(self, handle: PolicyHandle, view: Sequence[Message]) -> str:
        body = json.dumps({
            "role": handle.role,
            "system": self.system_prompt,
            "messages": [m.to_dict() for m in view],
            "decoding": self.decoding,
        }).encode("utf-8")
        req = urllib.request.Request(self.endpoint, data=body, method="POST",
                                     headers={"Content-Type": "application/json"})
        if self.auth_env:
            secret = os.environ.get(self.auth_env)
            if secret is None:
                raise AuthFailure(f"environment variable {self.auth_env} is not set")
            req.add_header("Authorization", f"Bearer {secret}")
        try:
            with urllib.request.urlopen(req, timeout=self.timeout_s) as resp:
                payload = resp.read().decode("utf-8")
                ctype = resp.headers.get("Content-Type", "")
        except urllib.error.HTTPError as exc:
            if exc.code in (401, 403):
                raise AuthFailure(f"endpoint rejected credentials (HTTP {exc.code})") from None
            raise BackendUnavailable(f"endpoint returned HTTP {exc.code}") from None
        except (urllib.error.URLError, OSError) as exc:
            raise BackendUnavailable(f"cannot reach {self.endpoint}: {exc}") from None
        if "json" in ctype:
            try:
                data = json.loads(payload)
            except json.JSONDecodeError:
                raise MalformedResponse("endpoint returned invalid JSON", payload) from None
            if not isinstance(data, dict) or not isinstance(data.get("completion"), str):
                raise MalformedResponse("endpoint body lacks a 'completion' string", payload)
            return data["completion"]
        return payload


class PolicyHandle:
    """One policy session. Requests are serialized per handle."""

    def __init__(self, role: str, backend: Any, session_id: str, seed: int = 0) -> None:
        if role not in ROLES:
            raise ValueError(f"unknown role {role!r}")
        self.role = role
        self.impl = backend
        self.session_id = session_id
        self.seed = seed
        self.requests: list[tuple[Message, ...]] = []
        self.responses: list[str] = []
        self._lock = threading.Lock()

    @property
    def backend(self) -> str:
        return self.impl.label

    def __repr__(self) -> str:
        return f"PolicyHandle(role={self.role!r}, backend={self.backend!r}, session_id={self.session_id!r})"


def request(handle: PolicyHandle, ctx_view: Sequence[Message],
            expect: Iterable[str] | None = None) -> PolicyResponse:
    view = tuple(ctx_view)
    with handle._lock:
        handle.requests.append(view)
        raw = handle.impl.complete(handle, view)
        handle.responses.append(raw)
    resp = parse_response(raw, handle.role)
    if expect is not None:
        wanted = tuple(expect)
        if resp.kind not in wanted:
            raise MalformedResponse(f"expected a {' or '.join(wanted)} response, got {resp.kind}", raw)
    return resp


def request_with_retry(handle: PolicyHandle, ctx_view: Sequence[Message],
                       expect: Iterable[str] | None = None, backend_retries: int = 1) -> PolicyResponse:
    """Request once more after a malformed reply (with a format reminder) or a backend outage."""
    expect = tuple(expect) if expect is not None else None
    view = tuple(ctx_view)
    reminded = False
    outages = 0
    while True:
        try:
            return request(handle, view, expect)
        except MalformedResponse:
            if reminded:
                raise
            reminded = True
            reminder = prompt_text("format_reminder.txt")
            if expect:
                reminder += f"\nExpected response kind: {', '.join(expect)}."
            view = view + (Message("host", "diagnostic", reminder),)
        except BackendUnavailable:
            if outages >= backend_retries:
                raise
            outages += 1


def _script_session(role: str, steps: Sequence[str]) -> str:
    digest = hashlib.sha256(role.encode())
    for s in steps:
        digest.update(b"\0" + s.encode("utf-8"))
    return f"{role[:3]}-{digest.hexdigest()[:12]}"


def _raw(step: str | PolicyResponse | Mapping[str, Any]) -> str:
    if isinstance(step, PolicyResponse):
        return step.raw
    if isinstance(step, str):
        return step
    return json.dumps(step)


def make_scripted(steps: Sequence[str | PolicyResponse | Mapping[str, Any]], role: str, *,
                  loop: bool = False, session_id: str | None = None, seed: int = 0) -> PolicyHandle:
    raws = [_raw(s) for s in steps]
    backend = ScriptedBackend(raws, loop=loop)
    return PolicyHandle(role, backend, session_id or _script_session(role, raws), seed)


_fn_counter = itertools.count()


def make_function_policy(fn: Callable[[Sequence[Message]], str | PolicyResponse], role: str, *,
                         session_id: str | None = None, seed: int = 0) -> PolicyHandle:
    return PolicyHandle(role, FunctionBackend(fn), session_id or f"{role[:3]}-fn-{next(_fn_counter)}", seed)


def load_scripted(directory: str | os.PathLike[str], role: str, **kwargs: Any) -> PolicyHandle:
    """Load a directory of numbered step files, one raw response per file."""
    root = Path(directory)
    entries = []
    for p in root.iterdir():
        if p.is_file() and not p.name.startswith("."):
            stem = p.name.split(".", 1)[0]
            digits = "".join(itertools.takewhile(str.isdigit, stem))
            if digits:
                entries.append((int(digits), p.name, p))
    if not entries:
        raise ContractError(f"{root} holds no numbered step files")
    steps = [p.read_text(encoding="utf-8") for _, _, p in sorted(entries)]
    return make_scripted(steps, role, **kwargs)


def dump_scripted(steps: Sequence[str | PolicyResponse], directory: str | os.PathLike[str]) -> Path:
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    for idx, step in enumerate(steps, 1):
        (root / f"{idx:03d}.json").write_text(_raw(step), encoding="utf-8")
    return root


def make_remote(endpoint: str, role: str, auth: str | None = None, *, system_prompt: str | None = None,
                decoding: Mapping[str, Any] | None = None, seed: int = 0, timeout_s: float = 120.0
                ) -> PolicyHandle:
    """Build a handle talking to an HTTP chat endpoint.

    ``auth`` names the environment variable holding the bearer secret.
    """
    parsed = urllib.parse.urlparse(endpoint)
    if parsed.scheme not in ("http", "https") or not parsed.netloc:
        raise ContractError(f"endpoint {endpoint!r} is not an http(s) URL")
    if system_prompt is None:
        system_prompt = prompt_text("generator_system.md") if role == "generator" else prompt_text(
            "verifier_system.md")
    params = {"seed": seed, **(decoding or {})}
    backend = RemoteBackend(endpoint, auth, system_prompt=system_prompt, decoding=params, timeout_s=timeout_s)
    return PolicyHandle(role, backend, f"{role[:3]}-{uuid.uuid4().hex[:12]}", seed)
