"""A deterministic target policy that follows installed skill procedures.

It loads every installed skill, then runs the ``bash``/``sh`` fenced blocks
of the loaded procedure documents in order and signals completion. With no
usable skill it falls back to its own baseline commands. This is the
desk-scale stand-in for an agent harness evaluating a skill.
"""

from __future__ import annotations

import re
from typing import Sequence

from .policy import Message, PolicyHandle, commands_response, make_function_policy
from .sandbox import LISTING_PREFIX, LOADED_PREFIX

_FENCE_RE = re.compile(r"^```(?:bash|sh|shell)[ \t]*\n(.*?)^```", re.MULTILINE | re.DOTALL)


def procedure_commands(doc: str) -> list[str]:
    return [block.strip() + "\n" for block in _FENCE_RE.findall(doc) if block.strip()]


def _installed(view: Sequence[Message]) -> list[str]:
    for msg in reversed(view):
        if msg.origin == "host" and msg.kind == "observation" and msg.body.startswith(LISTING_PREFIX):
            return [line[2:].split(":", 1)[0] for line in msg.body.splitlines()[1:] if line.startswith("- ")]
    return []


def _loaded(view: Sequence[Message]) -> dict[str, str]:
    docs = {}
    for msg in view:
        if msg.origin == "host" and msg.kind == "observation" and msg.body.startswith(LOADED_PREFIX):
            header, _, doc = msg.body.partition("\n")
            docs[header[len(LOADED_PREFIX):].rstrip(":")] = doc
    return docs


def make_solver(baseline: Sequence[str] = (), *, ignore_skills: bool = False,
                session_id: str = "gen-solver") -> PolicyHandle:
    """Build the procedure-following target policy.

    ``baseline`` is what the policy does when no skill tells it otherwise;
    ``ignore_skills`` makes it never load a skill (a control target).
    """
    baseline = tuple(baseline)

    def reply(view: Sequence[Message]):
        names = [] if ignore_skills else _installed(view)
        loaded = _loaded(view)
        for name in names:
            if name not in loaded:
                return commands_response([], load_skill=name, analysis=f"loading {name}")
        commands = [cmd for name in names for cmd in procedure_commands(loaded.get(name, ""))]
        return commands_response(commands or baseline, complete=True)

    return make_function_policy(reply, "generator", session_id=session_id)
