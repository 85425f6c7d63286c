"""Exception hierarchy for the crashguard pipeline.

Every failure mode that maps onto a repair outcome (NoCode / NoPatch /
Implausible) has its own exception type so the orchestrator can translate
failures into outcome records without string matching.
"""

from __future__ import annotations

import enum


class CrashGuardError(Exception):
    """Base class for all crashguard errors."""


class MalformedReport(CrashGuardError):
    """Input text is not a parseable sanitizer report."""


class NoUserFrame(CrashGuardError):
    """Every stack frame is library code or lacks a line number."""


class SourceFileMissing(CrashGuardError):
    """The crash file cannot be located under the source root."""


class LineOutOfRange(CrashGuardError):
    """The crash line exceeds the file length (stale source tree)."""


class RejectReason(enum.Enum):
    NO_JSON = "no_json"
    MISSING_KEY = "missing_key"
    INTEGER_LITERAL = "integer_literal"
    UNKNOWN_IDENTIFIER = "unknown_identifier"


class RejectedResponse(CrashGuardError):
    """Backend response failed key-variable validation."""

    def __init__(self, reason: RejectReason, detail: str = ""):
        self.reason = reason
        self.detail = detail
        super().__init__(f"{reason.value}: {detail}" if detail else reason.value)


class BackendUnavailable(CrashGuardError):
    """Transport failure talking to the analysis backend, after retries."""


class BackendRefused(CrashGuardError):
    """The analysis backend answered with a non-success status."""


class UnsupportedCategory(CrashGuardError):
    """No guard template exists for this bug category."""


class PatchAlreadyApplied(CrashGuardError):
    """Target file already carries guard marker lines."""


class UnknownModel(CrashGuardError):
    """Model name absent from the pricing table."""


class EmptyLedger(CrashGuardError):
    """Cannot summarize zero cost records."""


class ProbeBuildFailed(CrashGuardError):
    """Probe insertion broke compilation; consistency stays unknown."""


class NotReproducible(CrashGuardError):
    """The unpatched proof-of-concept run did not crash."""


class BuildFailed(CrashGuardError):
    """The unpatched tree failed to build; the attempt cannot proceed."""


class ManifestInvalid(CrashGuardError):
    """Batch manifest does not match its schema."""
