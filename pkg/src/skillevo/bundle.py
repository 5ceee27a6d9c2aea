"""Multi-file skill bundles: parsing, loading, validation, versioning, diffing.

On disk a bundle looks like::

    <root>/SKILL.md        frontmatter + procedure body
    <root>/scripts/...     executable helpers
    <root>/references/...  reference material
    <root>/.skillmeta      version=<i> / parent_version=<j>
"""

from __future__ import annotations

import os
import re
from dataclasses import dataclass, field
from pathlib import Path, PurePosixPath
from types import MappingProxyType
from typing import Callable, Iterable, Mapping

from .errors import (
    BundleTooLarge,
    DeleteRootDoc,
    MalformedFrontmatter,
    MissingField,
    MissingFrontmatter,
    NotABundle,
    PathEscape,
    UnknownRule,
)

ROOT_DOC = "SKILL.md"
META_FILE = ".skillmeta"
MAX_BUNDLE_BYTES = 16 * 1024 * 1024

NAME_RE = re.compile(r"^[a-z0-9]+(?:-[a-z0-9]+)*$")
FRONTMATTER_DELIM = "---"

DEFAULT_FORBIDDEN_PREFIXES = (
    "/app/environment/doc",
    "/root/environment/doc",
    "environment/doc/",
)


@dataclass(frozen=True)
class SkillManifest:
    name: str
    description: str
    extra: Mapping[str, str] = field(default_factory=dict)

    def problems(self) -> list[str]:
        out = []
        if not self.name:
            out.append("name is empty")
        elif "/" in self.name or "\\" in self.name or any(c.isspace() for c in self.name):
            out.append(f"name {self.name!r} contains a path separator or whitespace")
        elif not NAME_RE.match(self.name):
            out.append(f"name {self.name!r} must use lowercase letters, digits and hyphens")
        if not self.description.strip():
            out.append("description is empty")
        return out


def split_frontmatter(text: str) -> tuple[dict[str, str], str]:
    """Split ``text`` into its frontmatter mapping and the remaining body."""
    lines = text.splitlines(keepends=True)
    if not lines or lines[0].rstrip("\r\n").strip() != FRONTMATTER_DELIM:
        raise MissingFrontmatter("document does not start with a '---' frontmatter block")
    keys: dict[str, str] = {}
    for idx in range(1, len(lines)):
        line = lines[idx].rstrip("\r\n")
        if line.strip() == FRONTMATTER_DELIM:
            return keys, "".join(lines[idx + 1 :])
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        if line[0].isspace() or ":" not in line:
            raise MalformedFrontmatter(f"frontmatter line {idx + 1} is not a flat 'key: value' pair")
        key, _, value = line.partition(":")
        key, value = key.strip(), value.strip()
        if not key or value in ("|", ">") or value.startswith(("[", "{")):
            raise MalformedFrontmatter(f"frontmatter line {idx + 1}: nested values are not supported")
        if len(value) >= 2 and value[0] == value[-1] and value[0] in "'\"":
            value = value[1:-1]
        keys[key] = value
    raise MalformedFrontmatter("frontmatter block is not terminated by '---'")


def parse_manifest(text: str) -> SkillManifest:
    keys, _ = split_frontmatter(text)
    for required in ("name", "description"):
        if required not in keys:
            raise MissingField(required)
    extra = {k: v for k, v in keys.items() if k not in ("name", "description")}
    return SkillManifest(keys["name"], keys["description"], extra)


def doc_body(text: str) -> str:
    """Return the procedure text with any frontmatter stripped."""
    try:
        return split_frontmatter(text)[1]
    except (MissingFrontmatter, MalformedFrontmatter):
        return text


def normalize_path(path: str) -> str:
    """Normalize a bundle-relative path, rejecting anything that escapes the root."""
    raw = path.replace("\\", "/")
    if not raw or raw.startswith("/") or re.match(r"^[A-Za-z]:", raw):
        raise PathEscape(f"path {path!r} is not relative")
    parts: list[str] = []
    for part in PurePosixPath(raw).parts:
        if part in ("", "."):
            continue
        if part == "..":
            raise PathEscape(f"path {path!r} escapes the bundle root")
        parts.append(part)
    if not parts:
        raise PathEscape(f"path {path!r} is empty")
    return "/".join(parts)


@dataclass(frozen=True)
class SkillBundle:
    """An immutable skill package.

    ``files`` holds every entry except the procedure document and the
    version sidecar. ``manifest`` is ``None`` only for bundles loaded
    leniently from a directory whose frontmatter does not parse.
    """

    manifest: SkillManifest | None
    root_doc: str
    files: Mapping[str, bytes] = field(default_factory=dict)
    version: int = 0
    parent_version: int | None = None

    def __post_init__(self) -> None:
        clean: dict[str, bytes] = {}
        for path, content in self.files.items():
            norm = normalize_path(path)
            if norm in (ROOT_DOC, META_FILE):
                raise PathEscape(f"{norm} is reserved and cannot be carried as a file entry")
            clean[norm] = bytes(content)
        object.__setattr__(self, "files", MappingProxyType(dict(sorted(clean.items()))))
        if self.version < 0:
            raise ValueError("version must be non-negative")
        if self.size > MAX_BUNDLE_BYTES:
            raise BundleTooLarge(f"bundle is {self.size} bytes, limit is {MAX_BUNDLE_BYTES}")

    @property
    def name(self) -> str:
        if self.manifest is None:
            raise MissingFrontmatter("bundle has no parsed manifest")
        return self.manifest.name

    @property
    def size(self) -> int:
        return len(self.root_doc.encode("utf-8")) + sum(len(v) for v in self.files.values())

    @property
    def body(self) -> str:
        return doc_body(self.root_doc)

    def scripts(self) -> dict[str, bytes]:
        return {p: c for p, c in self.files.items() if p.startswith("scripts/")}


def make_bundle(root_doc: str, files: Mapping[str, bytes | str] | None = None, version: int = 0,
                parent_version: int | None = None) -> SkillBundle:
    """Build a bundle from text, parsing the manifest out of ``root_doc``."""
    encoded = {p: c.encode("utf-8") if isinstance(c, str) else c for p, c in (files or {}).items()}
    return SkillBundle(parse_manifest(root_doc), root_doc, encoded, version, parent_version)


def _read_meta(path: Path) -> tuple[int, int | None]:
    version, parent = 0, None
    if not path.is_file():
        return version, parent
    for line in path.read_text(encoding="utf-8").splitlines():
        key, sep, value = line.partition("=")
        if not sep:
            continue
        key, value = key.strip(), value.strip()
        if key == "version":
            version = int(value)
        elif key == "parent_version" and value:
            parent = int(value)
    return version, parent


def load_bundle(directory: str | os.PathLike[str], strict: bool = True) -> SkillBundle:
    """Read a bundle from disk.

    With ``strict=False`` a root document whose frontmatter does not parse
    still loads (``manifest`` is ``None``) so that it can be linted.
    """
    root = Path(directory)
    doc_path = root / ROOT_DOC
    if not root.is_dir() or not doc_path.is_file():
        raise NotABundle(f"{root} has no {ROOT_DOC}")
    real_root = root.resolve()
    files: dict[str, bytes] = {}
    total = 0
    for dirpath, dirnames, filenames in os.walk(root, followlinks=False):
        dirnames.sort()
        for entry in [*dirnames, *sorted(filenames)]:
            full = Path(dirpath) / entry
            if full.is_symlink():
                target = full.resolve()
                if target != real_root and real_root not in target.parents:
                    raise PathEscape(f"{full} resolves outside the bundle")
                if full.is_dir():
                    raise PathEscape(f"{full} is a symlinked directory")
        for name in sorted(filenames):
            full = Path(dirpath) / name
            rel = full.relative_to(root).as_posix()
            if rel in (ROOT_DOC, META_FILE) or not full.is_file():
                continue
            data = full.read_bytes()
            total += len(data)
            if total > MAX_BUNDLE_BYTES:
                raise BundleTooLarge(f"{root} exceeds {MAX_BUNDLE_BYTES} bytes")
            files[rel] = data
    root_doc = doc_path.read_bytes().decode("utf-8")
    version, parent = _read_meta(root / META_FILE)
    try:
        manifest = parse_manifest(root_doc)
    except (MissingFrontmatter, MalformedFrontmatter, MissingField):
        if strict:
            raise
        manifest = None
    return SkillBundle(manifest, root_doc, files, version, parent)


def write_bundle(bundle: SkillBundle, directory: str | os.PathLike[str]) -> Path:
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    (root / ROOT_DOC).write_bytes(bundle.root_doc.encode("utf-8"))
    for rel, content in bundle.files.items():
        dest = root / rel
        dest.parent.mkdir(parents=True, exist_ok=True)
        dest.write_bytes(content)
    meta = f"version={bundle.version}\n"
    if bundle.parent_version is not None:
        meta += f"parent_version={bundle.parent_version}\n"
    (root / META_FILE).write_text(meta, encoding="utf-8")
    return root


def next_version(bundle: SkillBundle, edits: Mapping[str, bytes | str | None] | None = None,
                 new_doc: str | None = None) -> SkillBundle:
    """Derive the next revision; a ``None`` edit deletes the path."""
    files = dict(bundle.files)
    doc = bundle.root_doc
    for path, content in (edits or {}).items():
        norm = normalize_path(path)
        if norm == ROOT_DOC:
            if content is None:
                raise DeleteRootDoc("the procedure document cannot be removed")
            doc = content.decode("utf-8") if isinstance(content, bytes) else content
            continue
        if content is None:
            files.pop(norm, None)
        else:
            files[norm] = content.encode("utf-8") if isinstance(content, str) else content
    if new_doc is not None:
        doc = new_doc
    try:
        manifest = parse_manifest(doc)
    except (MissingFrontmatter, MalformedFrontmatter, MissingField):
        manifest = None
    return SkillBundle(manifest, doc, files, bundle.version + 1, bundle.version)


@dataclass(frozen=True)
class ChangeSet:
    added: frozenset[str] = frozenset()
    removed: frozenset[str] = frozenset()
    modified: frozenset[str] = frozenset()
    doc_changed: bool = False

    @property
    def empty(self) -> bool:
        return not (self.added or self.removed or self.modified or self.doc_changed)


def diff_bundles(a: SkillBundle, b: SkillBundle) -> ChangeSet:
    pa, pb = set(a.files), set(b.files)
    return ChangeSet(
        added=frozenset(pb - pa),
        removed=frozenset(pa - pb),
        modified=frozenset(p for p in pa & pb if a.files[p] != b.files[p]),
        doc_changed=a.root_doc.encode("utf-8") != b.root_doc.encode("utf-8"),
    )


# --- validation ------------------------------------------------------------


@dataclass(frozen=True)
class Finding:
    rule_id: str
    severity: str  # "error" | "warning"
    path: str
    message: str

    def to_line(self) -> str:
        msg = self.message.replace("\t", " ").replace("\n", " ")
        return f"{self.rule_id}\t{self.severity}\t{self.path}\t{msg}"


@dataclass(frozen=True)
class ValidationReport:
    findings: tuple[Finding, ...] = ()

    @property
    def passed(self) -> bool:
        return not any(f.severity == "error" for f in self.findings)

    def to_lines(self) -> str:
        return "".join(f.to_line() + "\n" for f in self.findings)

    @classmethod
    def from_lines(cls, text: str) -> ValidationReport:
        findings = []
        for line in text.splitlines():
            if line:
                rule, severity, path, message = line.split("\t", 3)
                findings.append(Finding(rule, severity, path, message))
        return cls(tuple(findings))


def _texts(bundle: SkillBundle) -> Iterable[tuple[str, str]]:
    yield ROOT_DOC, bundle.root_doc
    for path, content in bundle.files.items():
        try:
            yield path, content.decode("utf-8")
        except UnicodeDecodeError:
            continue


def _rule_frontmatter(bundle: SkillBundle, **_: object) -> list[Finding]:
    try:
        manifest = parse_manifest(bundle.root_doc)
    except (MissingFrontmatter, MalformedFrontmatter, MissingField) as exc:
        return [Finding("FRONTMATTER", "error", ROOT_DOC, str(exc))]
    return [Finding("FRONTMATTER", "error", ROOT_DOC, p) for p in manifest.problems()]


def _rule_self_contained(bundle: SkillBundle, forbidden_prefixes: Iterable[str] = DEFAULT_FORBIDDEN_PREFIXES,
                         **_: object) -> list[Finding]:
    findings = []
    prefixes = tuple(forbidden_prefixes)
    for path, text in _texts(bundle):
        for lineno, line in enumerate(text.splitlines(), 1):
            spans = []
            for prefix in prefixes:
                start = 0
                while (hit := line.find(prefix, start)) >= 0:
                    spans.append((hit, hit + len(prefix), prefix))
                    start = hit + len(prefix)
            # overlapping matches are one reference
            covered = -1
            for lo, hi, prefix in sorted(spans, key=lambda s: (s[0], -s[1])):
                if lo < covered:
                    covered = max(covered, hi)
                    continue
                covered = hi
                findings.append(Finding(
                    "SELF_CONTAINED", "error", path,
                    f"line {lineno} references external path {prefix!r}"))
    return findings


_IMPORT_RE = re.compile(r"^\s*(?:from\s+([\w.]+)\s+import\b|import\s+([\w.]+(?:\s*,\s*[\w.]+)*))")


def _rule_hyphen_import(bundle: SkillBundle, **_: object) -> list[Finding]:
    """Flag imports that spell a hyphenated directory with underscores."""
    hyphenated = {p for path in bundle.files for p in PurePosixPath(path).parts[:-1] if "-" in p}
    if bundle.manifest is not None and "-" in bundle.manifest.name:
        hyphenated.add(bundle.manifest.name)
    if not hyphenated:
        return []
    mangled = {name.replace("-", "_"): name for name in hyphenated}
    findings = []
    for path, text in _texts(bundle):
        if not (path.endswith(".py") or path == ROOT_DOC):
            continue
        for lineno, line in enumerate(text.splitlines(), 1):
            m = _IMPORT_RE.match(line)
            if not m:
                continue
            modules = [m.group(1)] if m.group(1) else [s.strip() for s in m.group(2).split(",")]
            for module in modules:
                head = module.split(".")[0]
                if head in mangled:
                    findings.append(Finding(
                        "HYPHEN_IMPORT", "error", path,
                        f"line {lineno} imports {module!r} but directory is {mangled[head]!r};"
                        " add the scripts directory to sys.path and import the module directly"))
    return findings


_SCRIPT_REF_RE = re.compile(r"(?<![\w.-])(?:[\w./-]*/)?(scripts/[\w./-]*\w)")


def _rule_declared_scripts(bundle: SkillBundle, **_: object) -> list[Finding]:
    findings = []
    seen = set()
    for match in _SCRIPT_REF_RE.finditer(bundle.body):
        ref = match.group(1)
        if ref in seen or "." not in PurePosixPath(ref).name:
            continue
        seen.add(ref)
        if ref not in bundle.files:
            findings.append(Finding("DECLARED_SCRIPTS", "error", ROOT_DOC,
                                    f"procedure references {ref!r} which is not in the bundle"))
    return findings


RULES: dict[str, Callable[..., list[Finding]]] = {
    "FRONTMATTER": _rule_frontmatter,
    "SELF_CONTAINED": _rule_self_contained,
    "HYPHEN_IMPORT": _rule_hyphen_import,
    "DECLARED_SCRIPTS": _rule_declared_scripts,
}
DEFAULT_RULES = frozenset(RULES)


def validate_bundle(bundle: SkillBundle, rules: Iterable[str] = DEFAULT_RULES, *,
                    forbidden_prefixes: Iterable[str] = DEFAULT_FORBIDDEN_PREFIXES) -> ValidationReport:
    rule_ids = sorted(set(rules))
    unknown = [r for r in rule_ids if r not in RULES]
    if unknown:
        raise UnknownRule(f"unknown rule(s): {', '.join(unknown)}")
    findings: list[Finding] = []
    for rule_id in rule_ids:
        findings.extend(RULES[rule_id](bundle, forbidden_prefixes=tuple(forbidden_prefixes)))
    return ValidationReport(tuple(findings))
