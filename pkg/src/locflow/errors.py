"""Exception hierarchy shared by every locflow component.

Each error carries a short ``code`` so that servers can return it in-band and
clients can rebuild the same exception type on their side.
"""

from __future__ import annotations


class LocflowError(Exception):
    code = "Error"

    def __init__(self, message: str = "", **details):
        super().__init__(message or self.code)
        self.message = message or self.code
        self.details = details


class InvalidName(LocflowError, ValueError):
    code = "InvalidName"


class InvalidTransition(LocflowError):
    code = "InvalidTransition"


class DanglingPredecessor(LocflowError):
    code = "DanglingPredecessor"

    def __init__(self, wu_id: str, missing: str = ""):
        super().__init__(f"workunit {wu_id!r} depends on unknown {missing!r}", wu_id=wu_id)
        self.wu_id = wu_id
        self.missing = missing


class CycleDetected(LocflowError):
    code = "CycleDetected"

    def __init__(self, cycle: list[str]):
        super().__init__("dependency cycle: " + " -> ".join(cycle), cycle=cycle)
        self.cycle = list(cycle)


class MalformedMessage(LocflowError):
    code = "MalformedMessage"

    def __init__(self, position, reason: str = ""):
        super().__init__(f"malformed message at {position}: {reason}", position=position)
        self.position = position


class VersionMismatch(LocflowError):
    code = "VersionMismatch"


class StaleProtocol(LocflowError):
    code = "StaleProtocol"


class UnknownClient(LocflowError):
    code = "UnknownClient"


class UnknownAssignment(LocflowError):
    code = "UnknownAssignment"


class UnknownResult(LocflowError):
    code = "UnknownResult"


class ResultNotInProgress(LocflowError):
    code = "ResultNotInProgress"


class UnknownApplication(LocflowError):
    code = "UnknownApplication"


class UnknownJob(LocflowError):
    code = "UnknownJob"


class BadSignature(LocflowError):
    code = "BadSignature"


class DigestMismatch(LocflowError):
    code = "DigestMismatch"


class NotFound(LocflowError):
    code = "NotFound"


class JobIncomplete(LocflowError):
    code = "JobIncomplete"

    def __init__(self, unfinished: list[str]):
        super().__init__(f"{len(unfinished)} workunit(s) not DONE: {', '.join(unfinished)}",
                         unfinished=list(unfinished))
        self.unfinished = list(unfinished)


class MissingBlob(LocflowError):
    code = "MissingBlob"


class LaunchFailure(LocflowError):
    code = "LaunchFailure"


class UnreadableDirectory(LocflowError):
    code = "UnreadableDirectory"


class InvalidEventCount(LocflowError):
    code = "InvalidEventCount"


class ManifestError(LocflowError):
    code = "ManifestError"


class Conflict(LocflowError):
    """An id is already bound to different content."""

    code = "Conflict"


ERRORS_BY_CODE: dict[str, type[LocflowError]] = {
    cls.code: cls
    for cls in [
        LocflowError, InvalidName, InvalidTransition, DanglingPredecessor, CycleDetected,
        MalformedMessage, VersionMismatch, StaleProtocol, UnknownClient, UnknownAssignment,
        UnknownResult, ResultNotInProgress, UnknownApplication, UnknownJob, BadSignature,
        DigestMismatch, NotFound, JobIncomplete, MissingBlob, LaunchFailure,
        UnreadableDirectory, InvalidEventCount, ManifestError, Conflict,
    ]
}


def rebuild(code: str, message: str, details: dict | None = None) -> LocflowError:
    """Recreate an error received in-band; unknown codes fall back to the base class."""
    details = details or {}
    cls = ERRORS_BY_CODE.get(code, LocflowError)
    if cls is JobIncomplete:
        return JobIncomplete(list(details.get("unfinished", [])))
    if cls is CycleDetected:
        return CycleDetected(list(details.get("cycle", [])))
    if cls is MalformedMessage:
        return MalformedMessage(details.get("position", "?"), message)
    if cls is DanglingPredecessor:
        err = LocflowError.__new__(DanglingPredecessor)
        LocflowError.__init__(err, message, **details)
        err.wu_id = details.get("wu_id", "")
        err.missing = ""
        return err
    return cls(message, **details)
