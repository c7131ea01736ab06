"""Domain types shared by the scheduler, server, worker and simulator.

Identity of data files is content-addressed: a :class:`FileId` is a name
(used for template matching) plus the SHA-256 of the bytes (verified on use).
"""

from __future__ import annotations

import enum
import hashlib
import re
from collections.abc import Iterable
from dataclasses import dataclass, field

from .errors import CycleDetected, DanglingPredecessor, InvalidName, InvalidTransition

INDEX_VAR = "{index}"
_HEX64 = re.compile(r"[0-9a-f]{64}")


def sha256_hex(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def check_name(name: str) -> str:
    if not isinstance(name, str) or not name:
        raise InvalidName(f"file name must be a non-empty string, got {name!r}")
    if len(name.encode("utf-8")) > 255:
        raise InvalidName(f"file name longer than 255 bytes: {name[:40]!r}...")
    if name in (".", "..") or any(c in name for c in "/\\\0"):
        raise InvalidName(f"file name is not path-safe: {name!r}")
    return name


@dataclass(frozen=True)
class FileId:
    name: str
    digest: str
    size_bytes: int

    def __post_init__(self):
        check_name(self.name)
        if not isinstance(self.digest, str) or not _HEX64.fullmatch(self.digest):
            raise ValueError(f"digest must be 64 lowercase hex characters, got {self.digest!r}")
        if not isinstance(self.size_bytes, int) or self.size_bytes < 0:
            raise ValueError(f"size_bytes must be a non-negative integer, got {self.size_bytes!r}")

    @classmethod
    def of(cls, name: str, data: bytes) -> FileId:
        return cls(name, sha256_hex(data), len(data))


@dataclass(frozen=True)
class FileTemplate:
    """A file name pattern whose only variable is ``{index}``.

    With ``index`` bound the template names exactly one file.  Unbound, it
    matches every name obtained by substituting some non-negative integer,
    which is how a single workunit declares a family of partitioned outputs.
    """

    pattern: str
    index: int | None = None

    def __post_init__(self):
        if self.index is not None and self.index < 0:
            raise ValueError("template index must be non-negative")
        # the literal parts must form a valid name on their own
        check_name(self.pattern.replace(INDEX_VAR, "0"))

    @property
    def expected(self) -> str | None:
        if self.index is None:
            return None if INDEX_VAR in self.pattern else self.pattern
        return resolve_template(self, self.index)

    def matches(self, name: str) -> bool:
        if self.expected is not None:
            return name == self.expected
        return self._regex().fullmatch(name) is not None

    def _regex(self) -> re.Pattern:
        parts = [re.escape(p) for p in self.pattern.split(INDEX_VAR)]
        body = parts[0]
        for i, part in enumerate(parts[1:]):
            body += (r"(?P<i>0|[1-9][0-9]*)" if i == 0 else r"(?P=i)") + part
        return re.compile(body)


def resolve_template(t: FileTemplate, index: int) -> str:
    if not isinstance(index, int) or index < 0:
        raise InvalidName(f"template index must be a non-negative integer, got {index!r}")
    return check_name(t.pattern.replace(INDEX_VAR, str(index)))


class WorkunitState(str, enum.Enum):
    PENDING = "PENDING"
    WAITING_FOR_DATA = "WAITING_FOR_DATA"
    READY = "READY"
    ASSIGNED = "ASSIGNED"
    DONE = "DONE"
    FAILED = "FAILED"


class ResultState(str, enum.Enum):
    UNSENT = "UNSENT"
    IN_PROGRESS = "IN_PROGRESS"
    SUCCESS = "SUCCESS"
    ERROR = "ERROR"
    TIMEOUT = "TIMEOUT"
    OVERSIZE = "OVERSIZE"


class ResultKind(str, enum.Enum):
    COMPUTE = "COMPUTE"
    GET_INPUT = "GET_INPUT"


W = WorkunitState
WORKUNIT_TRANSITIONS: dict[WorkunitState, frozenset[WorkunitState]] = {
    W.PENDING: frozenset({W.WAITING_FOR_DATA, W.READY}),
    W.WAITING_FOR_DATA: frozenset({W.READY, W.FAILED}),
    # READY -> WAITING_FOR_DATA: every client holding the inputs went away
    W.READY: frozenset({W.ASSIGNED, W.WAITING_FOR_DATA}),
    # ASSIGNED -> WAITING_FOR_DATA: retry after the only holding client was lost
    W.ASSIGNED: frozenset({W.DONE, W.READY, W.WAITING_FOR_DATA, W.FAILED}),
    W.DONE: frozenset(),
    W.FAILED: frozenset(),
}

R = ResultState
RESULT_TRANSITIONS: dict[ResultState, frozenset[ResultState]] = {
    R.UNSENT: frozenset({R.IN_PROGRESS}),
    R.IN_PROGRESS: frozenset({R.SUCCESS, R.ERROR, R.TIMEOUT, R.OVERSIZE}),
    R.SUCCESS: frozenset(),
    R.ERROR: frozenset(),
    R.TIMEOUT: frozenset(),
    R.OVERSIZE: frozenset(),
}
TERMINAL_RESULT_STATES = frozenset({R.SUCCESS, R.ERROR, R.TIMEOUT, R.OVERSIZE})


def check_transition(old: WorkunitState, new: WorkunitState) -> None:
    if new not in WORKUNIT_TRANSITIONS[old]:
        raise InvalidTransition(f"workunit transition {old.value} -> {new.value} is not allowed")


def check_result_transition(old: ResultState, new: ResultState) -> None:
    if new not in RESULT_TRANSITIONS[old]:
        raise InvalidTransition(f"result transition {old.value} -> {new.value} is not allowed")


@dataclass(frozen=True)
class AppFile:
    file: FileId
    signature: bytes
    entry: bool = False


@dataclass(frozen=True)
class ApplicationSpec:
    app_id: str
    version: int
    files: tuple[AppFile, ...]
    min_memory_mb: int = 0
    min_disk_mb: int = 0

    def __post_init__(self):
        if self.version < 1:
            raise ValueError("application version must be >= 1")
        if not self.files:
            raise ValueError("an application needs at least one file")
        if sum(1 for f in self.files if f.entry) != 1:
            raise ValueError("exactly one application file must be the entry executable")
        _distinct((f.file.name for f in self.files), "application file")
        if self.min_memory_mb < 0 or self.min_disk_mb < 0:
            raise ValueError("hardware minimums must be non-negative")

    @property
    def entry(self) -> FileId:
        return next(f.file for f in self.files if f.entry)


@dataclass(frozen=True)
class EnvironmentBundle:
    env_id: str
    app_id: str
    files: tuple[FileId, ...] = ()

    def __post_init__(self):
        _distinct((f.name for f in self.files), "environment file")


@dataclass(frozen=True)
class Patch:
    patch_id: str
    env_id: str
    overlay_files: tuple[FileId, ...] = ()

    def __post_init__(self):
        _distinct((f.name for f in self.overlay_files), "patch file")


def _distinct(names: Iterable[str], what: str) -> None:
    seen: set[str] = set()
    for n in names:
        if n in seen:
            raise ValueError(f"duplicate {what} name {n!r}")
        seen.add(n)


@dataclass
class Workunit:
    wu_id: str
    app_id: str
    env_id: str
    output_template: FileTemplate
    patch_id: str | None = None
    required_inputs: list[str] = field(default_factory=list)
    get_input_app: str | None = None
    predecessors: list[str] = field(default_factory=list)
    max_result_size_bytes: int = 64 * 1024 * 1024
    deadline_secs: int = 3600
    max_retries: int = 2
    submit_seq: int = 0
    state: WorkunitState = WorkunitState.PENDING
    failures: int = 0

    def __post_init__(self):
        for name in self.required_inputs:
            check_name(name)
        _distinct(self.required_inputs, "required input")
        if self.max_result_size_bytes <= 0:
            raise ValueError("max_result_size_bytes must be positive")
        if self.deadline_secs <= 0:
            raise ValueError("deadline_secs must be positive")
        if self.max_retries < 0:
            raise ValueError("max_retries must be non-negative")

    @property
    def terminal(self) -> bool:
        return self.state in (WorkunitState.DONE, WorkunitState.FAILED)


@dataclass
class ResultRecord:
    result_id: str
    wu_id: str
    client_id: str
    assigned_at: float
    deadline_at: float
    state: ResultState = ResultState.IN_PROGRESS
    kind: ResultKind = ResultKind.COMPUTE
    cpu_seconds: float = 0.0
    output_files: list[FileId] = field(default_factory=list)

    @property
    def terminal(self) -> bool:
        return self.state in TERMINAL_RESULT_STATES


@dataclass
class ClientRecord:
    client_id: str
    user_id: str
    group_id: str | None = None
    cpu_count: int = 1
    benchmark_gflops: float = 1.0
    memory_mb: int = 0
    disk_mb: int = 0
    inventory: dict[str, FileId] = field(default_factory=dict)
    last_contact: float = 0.0

    def __post_init__(self):
        if self.cpu_count < 1:
            raise ValueError("cpu_count must be >= 1")
        if self.benchmark_gflops <= 0:
            raise ValueError("benchmark_gflops must be positive")
        for key, fid in self.inventory.items():
            if key != fid.name:
                raise ValueError(f"inventory key {key!r} does not match file name {fid.name!r}")

    def set_inventory(self, files: Iterable[FileId]) -> None:
        self.inventory = {f.name: f for f in files}


@dataclass
class CreditLedger:
    users: dict[str, float] = field(default_factory=dict)
    groups: dict[str, float] = field(default_factory=dict)
    # group -> user -> credit granted to that user while a member of the group
    contributions: dict[str, dict[str, float]] = field(default_factory=dict)

    def grant(self, user_id: str, group_id: str | None, amount: float) -> None:
        if amount < 0:
            raise ValueError("credit amounts are non-negative")
        if amount == 0:
            return
        self.users[user_id] = self.users.get(user_id, 0.0) + amount
        if group_id is not None:
            self.groups[group_id] = self.groups.get(group_id, 0.0) + amount
            members = self.contributions.setdefault(group_id, {})
            members[user_id] = members.get(user_id, 0.0) + amount

    def leaderboard(self) -> list[tuple[str, float]]:
        return sorted(self.users.items(), key=lambda kv: (-kv[1], kv[0]))


def validate_workunit_set(wus: Iterable[Workunit]) -> None:
    """Raise unless every predecessor resolves and the dependency graph is acyclic."""
    graph = {wu.wu_id: list(wu.predecessors) for wu in wus}
    for wu_id, preds in graph.items():
        for p in preds:
            if p not in graph:
                raise DanglingPredecessor(wu_id, p)

    WHITE, GREY, BLACK = 0, 1, 2
    color = dict.fromkeys(graph, WHITE)
    for root in graph:
        if color[root] != WHITE:
            continue
        path = [root]
        stack = [iter(graph[root])]
        color[root] = GREY
        while stack:
            nxt = next(stack[-1], None)
            if nxt is None:
                color[path.pop()] = BLACK
                stack.pop()
            elif color[nxt] == GREY:
                raise CycleDetected(path[path.index(nxt):] + [nxt])
            elif color[nxt] == WHITE:
                color[nxt] = GREY
                path.append(nxt)
                stack.append(iter(graph[nxt]))


@dataclass(frozen=True)
class Transition:
    at: float
    wu_id: str
    old: WorkunitState
    new: WorkunitState


def validate_trace(trace: Iterable[Transition], initial: dict[str, WorkunitState] | None = None) -> None:
    """Replay a transition log, raising InvalidTransition on the first illegal or discontinuous step."""
    current = dict(initial or {})
    last_time = float("-inf")
    for t in trace:
        if t.at < last_time:
            raise InvalidTransition(f"trace goes back in time at {t.at}")
        last_time = t.at
        before = current.get(t.wu_id, WorkunitState.PENDING)
        if before != t.old:
            raise InvalidTransition(
                f"{t.wu_id}: trace says {t.old.value} but replay has {before.value}")
        check_transition(t.old, t.new)
        current[t.wu_id] = t.new
