"""Exception hierarchy shared across the engine."""

from __future__ import annotations


class SkillEvoError(Exception):
    """Base class for every error raised by this package."""


class ContractError(SkillEvoError, ValueError):
    """A caller violated an operation's precondition."""


# --- skill bundles ---------------------------------------------------------


class BundleError(SkillEvoError):
    pass


class MissingFrontmatter(BundleError):
    pass


class MalformedFrontmatter(BundleError):
    pass


class MissingField(BundleError):
    def __init__(self, field: str) -> None:
        super().__init__(f"frontmatter is missing required key {field!r}")
        self.field = field


class NotABundle(BundleError):
    pass


class PathEscape(BundleError):
    pass


class DeleteRootDoc(BundleError):
    pass


class BundleTooLarge(BundleError):
    pass


class UnknownRule(BundleError):
    pass


# --- sandbox ---------------------------------------------------------------


class SandboxError(SkillEvoError):
    pass


class FixtureMissing(SandboxError):
    pass


class DiskFull(SandboxError):
    pass


class NameCollision(SandboxError):
    pass


class SandboxEscape(SandboxError):
    pass


class PolicyFailure(SandboxError):
    """The policy backend failed while driving a rollout."""


class TaskSpecError(SandboxError):
    pass


# --- policies --------------------------------------------------------------


class PolicyError(SkillEvoError):
    pass


class BackendUnavailable(PolicyError):
    pass


class AuthFailure(PolicyError):
    pass


class MalformedResponse(PolicyError):
    def __init__(self, message: str, raw: str = "") -> None:
        super().__init__(message)
        self.raw = raw


class ScriptExhausted(PolicyError):
    pass


# --- verification ----------------------------------------------------------


class VerificationError(SkillEvoError):
    pass


class EmptySuite(VerificationError):
    pass


class MalformedSuite(VerificationError):
    pass


class IsolationViolation(VerificationError):
    """Raised when a payload would leak information across a session boundary.

    Violations are bugs in the caller, so the engine never recovers from them.
    """

    def __init__(self, field: str, reason: str = "") -> None:
        msg = f"isolation violation in field {field!r}"
        if reason:
            msg += f": {reason}"
        super().__init__(msg)
        self.field = field


class BudgetExhausted(VerificationError):
    pass


# --- evaluation ------------------------------------------------------------


class MalformedTrace(SkillEvoError):
    def __init__(self, line_no: int, reason: str) -> None:
        super().__init__(f"line {line_no}: {reason}")
        self.line_no = line_no


class UnmappedTask(SkillEvoError):
    pass
