"""Data-locality-aware matching of workunits to requesting clients.

This is pure logic over an abstract clock: the server drives it with wall
time, the simulator with virtual time.  Every mutating call must come from a
single owner; nothing here takes locks.

A work request is answered by the first of three branches that applies:

1. some dependency-satisfied, hardware-feasible workunit has all of its
   inputs in the request's inventory -> ``ASSIGNMENT`` (smallest submit_seq);
2. otherwise data-blocked workunits start their wait timers and the reply is
   ``NO_WORK``;
3. unless a wait window has already expired for a workunit carrying a
   get-input application, in which case this client is sent that
   application (``GET_INPUT_ASSIGNMENT``).
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field

from .errors import (
    InvalidTransition,
    ResultNotInProgress,
    StaleProtocol,
    UnknownApplication,
    UnknownAssignment,
    UnknownClient,
    UnknownResult,
)
from .model import (
    ApplicationSpec,
    ClientRecord,
    CreditLedger,
    EnvironmentBundle,
    FileId,
    Patch,
    ResultKind,
    ResultRecord,
    ResultState,
    Transition,
    Workunit,
    WorkunitState,
    check_result_transition,
    check_transition,
    validate_workunit_set,
)
from .protocol import (
    PROTOCOL_VERSION,
    Hardware,
    InventoryAnswer,
    InventoryQuery,
    ManifestEntry,
    Purpose,
    ReplyKind,
    ResultUpload,
    UploadStatus,
    WorkReply,
    WorkRequest,
)

W = WorkunitState
ACTIVE = (W.READY, W.WAITING_FOR_DATA)


@dataclass
class SchedulerPolicy:
    wait_window_secs: int = 120
    poll_via_rpc: bool = True
    backoff_secs: int = 60
    # a client with no contact for this long and no running result is considered lost
    client_timeout_secs: int = 600
    prefer_cached_env: bool = False

    def __post_init__(self):
        if self.wait_window_secs <= 0:
            raise ValueError("wait_window_secs must be positive")
        if self.backoff_secs < 0 or self.client_timeout_secs <= 0:
            raise ValueError("backoff_secs must be >= 0 and client_timeout_secs > 0")


@dataclass
class SchedulerState:
    policy: SchedulerPolicy = field(default_factory=SchedulerPolicy)
    now: float = 0.0
    workunits: dict[str, Workunit] = field(default_factory=dict)
    results: dict[str, ResultRecord] = field(default_factory=dict)
    clients: dict[str, ClientRecord] = field(default_factory=dict)
    apps: dict[str, ApplicationSpec] = field(default_factory=dict)
    environments: dict[str, EnvironmentBundle] = field(default_factory=dict)
    patches: dict[str, Patch] = field(default_factory=dict)
    wait_timers: dict[str, float] = field(default_factory=dict)
    reservations: dict[str, str] = field(default_factory=dict)
    get_input_eligible: set[str] = field(default_factory=set)
    # wu_id -> result_id of the get-input run currently out on some client
    get_input_outstanding: dict[str, str] = field(default_factory=dict)
    known_files: dict[str, FileId] = field(default_factory=dict)
    env_cache: dict[str, set[str]] = field(default_factory=dict)
    ledger: CreditLedger = field(default_factory=CreditLedger)
    next_seq: int = 1
    next_result: int = 1
    next_client: int = 1
    trace: list[Transition] = field(default_factory=list)


def grant_credit(ledger: CreditLedger, client: ClientRecord, cpu_seconds: float) -> CreditLedger:
    if cpu_seconds < 0:
        raise ValueError("cpu_seconds must be non-negative")
    ledger.grant(client.user_id, client.group_id, cpu_seconds * client.benchmark_gflops)
    return ledger


class Scheduler:
    def __init__(self, state: SchedulerState | None = None, policy: SchedulerPolicy | None = None):
        self.state = state or SchedulerState(policy=policy or SchedulerPolicy())
        if state is not None and policy is not None:
            self.state.policy = policy

    @property
    def policy(self) -> SchedulerPolicy:
        return self.state.policy

    @property
    def now(self) -> float:
        return self.state.now

    def advance(self, now: float) -> None:
        self.state.now = max(self.state.now, now)

    # ------------------------------------------------------------------
    # catalog and registration

    def add_application(self, app: ApplicationSpec) -> None:
        self.state.apps[app.app_id] = app

    def add_environment(self, env: EnvironmentBundle) -> None:
        if env.app_id not in self.state.apps:
            raise UnknownApplication(env.app_id)
        self.state.environments[env.env_id] = env

    def add_patch(self, patch: Patch) -> None:
        if patch.env_id not in self.state.environments:
            raise KeyError(f"unknown environment {patch.env_id!r}")
        self.state.patches[patch.patch_id] = patch

    def register(self, user_id: str, hardware: Hardware, group_id: str | None = None,
                 client_id: str | None = None) -> ClientRecord:
        st = self.state
        if client_id is None or client_id not in st.clients:
            if client_id is None:
                while f"client-{st.next_client}" in st.clients:
                    st.next_client += 1
                client_id = f"client-{st.next_client}"
                st.next_client += 1
            st.clients[client_id] = ClientRecord(client_id, user_id, group_id)
        rec = st.clients[client_id]
        rec.user_id, rec.group_id = user_id, group_id
        self._update_hardware(rec, hardware)
        rec.last_contact = st.now
        return rec

    def submit(self, workunits: list[Workunit]) -> list[str]:
        """Add workunits in PENDING, assigning submit_seq in list order."""
        st = self.state
        for wu in workunits:
            if wu.wu_id in st.workunits:
                raise ValueError(f"duplicate workunit id {wu.wu_id!r}")
            for app_id in filter(None, (wu.app_id, wu.get_input_app)):
                if app_id not in st.apps:
                    raise UnknownApplication(app_id)
            if wu.env_id not in st.environments:
                raise KeyError(f"unknown environment {wu.env_id!r}")
            if wu.patch_id is not None and wu.patch_id not in st.patches:
                raise KeyError(f"unknown patch {wu.patch_id!r}")
        validate_workunit_set(list(st.workunits.values()) + list(workunits))
        for wu in workunits:
            wu.submit_seq = st.next_seq
            st.next_seq += 1
            wu.state = W.PENDING
            wu.failures = 0
            st.workunits[wu.wu_id] = wu
        return [wu.wu_id for wu in workunits]

    # ------------------------------------------------------------------
    # predicates

    def dependencies_satisfied(self, wu: Workunit) -> bool:
        wus = self.state.workunits
        return all(wus[p].state is W.DONE for p in wu.predecessors)

    def hardware_ok(self, client: ClientRecord, app_id: str) -> bool:
        app = self.state.apps[app_id]
        return client.memory_mb >= app.min_memory_mb and client.disk_mb >= app.min_disk_mb

    def holds_inputs(self, inventory: dict[str, FileId], wu: Workunit) -> bool:
        known = self.state.known_files
        for name in wu.required_inputs:
            have = inventory.get(name)
            if have is None:
                return False
            if name in known and known[name].digest != have.digest:
                return False
        return True

    def is_live(self, client_id: str) -> bool:
        st = self.state
        c = st.clients.get(client_id)
        if c is None:
            return False
        if st.now - c.last_contact <= st.policy.client_timeout_secs:
            return True
        return any(r.client_id == client_id and r.state is ResultState.IN_PROGRESS
                   for r in st.results.values())

    def live_clients(self) -> set[str]:
        st = self.state
        busy = {r.client_id for r in st.results.values() if r.state is ResultState.IN_PROGRESS}
        limit = st.policy.client_timeout_secs
        return {cid for cid, c in st.clients.items() if cid in busy or st.now - c.last_contact <= limit}

    def holders(self, wu: Workunit, exclude: str | None = None) -> list[str]:
        if not wu.required_inputs:
            return ["*"]
        live = self.live_clients()
        return [cid for cid, c in self.state.clients.items()
                if cid != exclude and cid in live and self.holds_inputs(c.inventory, wu)]

    def _ordered(self, states=None) -> list[Workunit]:
        wus = self.state.workunits.values()
        if states is not None:
            wus = [w for w in wus if w.state in states]
        return sorted(wus, key=lambda w: w.submit_seq)

    # ------------------------------------------------------------------
    # internal state changes

    def _move(self, wu: Workunit, new: WorkunitState) -> None:
        check_transition(wu.state, new)
        self.state.trace.append(Transition(self.state.now, wu.wu_id, wu.state, new))
        wu.state = new
        if new not in ACTIVE:
            self.state.reservations.pop(wu.wu_id, None)
        if new is not W.WAITING_FOR_DATA:
            self.state.wait_timers.pop(wu.wu_id, None)
            self.state.get_input_eligible.discard(wu.wu_id)

    def _set_result(self, res: ResultRecord, new: ResultState) -> None:
        check_result_transition(res.state, new)
        res.state = new

    def _new_result(self, wu: Workunit, client_id: str, kind: ResultKind) -> ResultRecord:
        st = self.state
        rid = f"result-{st.next_result}"
        st.next_result += 1
        res = ResultRecord(rid, wu.wu_id, client_id, assigned_at=st.now,
                           deadline_at=st.now + wu.deadline_secs, kind=kind)
        st.results[rid] = res
        return res

    def _start_wait(self, wu: Workunit) -> None:
        self.state.wait_timers[wu.wu_id] = self.state.now + self.policy.wait_window_secs
        self.state.get_input_eligible.discard(wu.wu_id)

    def _update_hardware(self, rec: ClientRecord, hw: Hardware) -> None:
        rec.cpu_count = max(1, hw.cpu_count)
        rec.benchmark_gflops = hw.benchmark_gflops if hw.benchmark_gflops > 0 else rec.benchmark_gflops
        rec.memory_mb, rec.disk_mb = hw.memory_mb, hw.disk_mb

    def _refresh(self) -> None:
        """Re-derive READY / WAITING_FOR_DATA from dependencies and live holders."""
        st = self.state
        live = self.live_clients()
        for wu_id, cid in list(st.reservations.items()):
            if cid not in live:
                del st.reservations[wu_id]
        for wu in self._ordered((W.PENDING, W.READY, W.WAITING_FOR_DATA)):
            if wu.state is W.PENDING and not self.dependencies_satisfied(wu):
                continue
            available = wu.wu_id in st.reservations or not wu.required_inputs or any(
                cid in live and self.holds_inputs(c.inventory, wu) for cid, c in st.clients.items())
            if wu.state is W.PENDING:
                self._move(wu, W.READY if available else W.WAITING_FOR_DATA)
            elif wu.state is W.READY and not available:
                self._move(wu, W.WAITING_FOR_DATA)
            elif wu.state is W.WAITING_FOR_DATA and available:
                if wu.wu_id not in st.get_input_outstanding:
                    self._move(wu, W.READY)

    def _fail_attempt(self, wu: Workunit, lost_client: str | None = None) -> None:
        wu.failures += 1
        if wu.failures > wu.max_retries:
            self._move(wu, W.FAILED)
        elif self.holders(wu, exclude=lost_client):
            self._move(wu, W.READY)
        else:
            self._move(wu, W.WAITING_FOR_DATA)

    def _fail_get_input(self, wu: Workunit) -> None:
        wu.failures += 1
        if wu.failures > wu.max_retries:
            self._move(wu, W.FAILED)
        else:
            self._start_wait(wu)

    # ------------------------------------------------------------------
    # timers

    def expire_waits(self, now: float | None = None) -> None:
        if now is not None:
            self.advance(now)
        st = self.state
        for wu in self._ordered((W.WAITING_FOR_DATA,)):
            expiry = st.wait_timers.get(wu.wu_id)
            if expiry is None or not st.now > expiry:
                continue
            del st.wait_timers[wu.wu_id]
            if wu.get_input_app is not None:
                st.get_input_eligible.add(wu.wu_id)
            else:
                self._move(wu, W.FAILED)

    def expire_deadlines(self, now: float | None = None) -> None:
        if now is not None:
            self.advance(now)
        st = self.state
        for res in sorted(st.results.values(), key=lambda r: (r.deadline_at, r.result_id)):
            if res.state is not ResultState.IN_PROGRESS or not st.now > res.deadline_at:
                continue
            self._set_result(res, ResultState.TIMEOUT)
            wu = st.workunits[res.wu_id]
            if res.kind is ResultKind.GET_INPUT:
                if st.get_input_outstanding.get(wu.wu_id) == res.result_id:
                    del st.get_input_outstanding[wu.wu_id]
                    if wu.state is W.WAITING_FOR_DATA:
                        self._fail_get_input(wu)
            elif wu.state is W.ASSIGNED:
                self._fail_attempt(wu, lost_client=res.client_id)

    def tick(self, now: float | None = None) -> None:
        if now is not None:
            self.advance(now)
        self.expire_deadlines()
        self._refresh()
        self.expire_waits()

    # ------------------------------------------------------------------
    # protocol handlers

    def handle_work_request(self, request: WorkRequest) -> WorkReply:
        st = self.state
        if request.protocol_version != PROTOCOL_VERSION:
            raise StaleProtocol(f"client speaks protocol {request.protocol_version}")
        client = st.clients.get(request.client_id)
        if client is None:
            raise UnknownClient(request.client_id)

        previous = client.inventory
        client.set_inventory(request.inventory)
        self._update_hardware(client, request.hardware)
        client.last_contact = st.now

        for wu_id, rid in list(st.get_input_outstanding.items()):
            if st.results[rid].client_id == client.client_id:
                fresh = [f for f in request.inventory if previous.get(f.name) != f]
                self.handle_get_input_done(client.client_id, wu_id, fresh)
        for wu_id, cid in list(st.reservations.items()):
            if cid == client.client_id and not self.holds_inputs(client.inventory, st.workunits[wu_id]):
                del st.reservations[wu_id]

        self.tick()

        # branch 1: inputs already local
        candidates = [
            wu for wu in self._ordered(ACTIVE)
            if st.reservations.get(wu.wu_id, client.client_id) == client.client_id
            and wu.wu_id not in st.get_input_outstanding
            and self.hardware_ok(client, wu.app_id)
            and self.holds_inputs(client.inventory, wu)
        ]
        if candidates:
            if st.policy.prefer_cached_env:
                cached = st.env_cache.get(client.client_id, set())
                candidates.sort(key=lambda w: (w.env_id not in cached, w.submit_seq))
            return self._assign(candidates[0], client)

        # branch 3: wait expired, ship the get-input application
        for wu in self._ordered((W.WAITING_FOR_DATA,)):
            if (wu.wu_id in st.get_input_eligible
                    and wu.wu_id not in st.get_input_outstanding
                    and wu.wu_id not in st.reservations
                    and self.hardware_ok(client, wu.get_input_app)):
                return self._assign_get_input(wu, client)

        # branch 2: no work; make sure every data-blocked workunit is being waited on
        for wu in self._ordered((W.WAITING_FOR_DATA,)):
            if (wu.wu_id not in st.wait_timers and wu.wu_id not in st.get_input_eligible
                    and wu.wu_id not in st.get_input_outstanding):
                self._start_wait(wu)
        return WorkReply(ReplyKind.NO_WORK, backoff_secs=st.policy.backoff_secs,
                         inventory_query=self.inventory_query())

    def _assign(self, wu: Workunit, client: ClientRecord) -> WorkReply:
        st = self.state
        if wu.state is W.WAITING_FOR_DATA:
            self._move(wu, W.READY)
        self._move(wu, W.ASSIGNED)
        res = self._new_result(wu, client.client_id, ResultKind.COMPUTE)
        manifest = self._app_manifest(wu.app_id)
        env = st.environments[wu.env_id]
        manifest += [ManifestEntry(f, Purpose.ENV) for f in env.files]
        if wu.patch_id is not None:
            manifest += [ManifestEntry(f, Purpose.PATCH) for f in st.patches[wu.patch_id].overlay_files]
        st.env_cache.setdefault(client.client_id, set()).add(wu.env_id)
        return WorkReply(
            ReplyKind.ASSIGNMENT, result_id=res.result_id, wu_id=wu.wu_id,
            deadline_at=res.deadline_at, manifest=manifest, inputs=list(wu.required_inputs),
            output=wu.output_template, max_result_size_bytes=wu.max_result_size_bytes,
            inventory_query=self.inventory_query(),
        )

    def _assign_get_input(self, wu: Workunit, client: ClientRecord) -> WorkReply:
        st = self.state
        st.get_input_eligible.discard(wu.wu_id)
        res = self._new_result(wu, client.client_id, ResultKind.GET_INPUT)
        st.get_input_outstanding[wu.wu_id] = res.result_id
        return WorkReply(
            ReplyKind.GET_INPUT_ASSIGNMENT, result_id=res.result_id, wu_id=wu.wu_id,
            deadline_at=res.deadline_at, manifest=self._app_manifest(wu.get_input_app),
            inputs=list(wu.required_inputs),
        )

    def _app_manifest(self, app_id: str) -> list[ManifestEntry]:
        app = self.state.apps[app_id]
        return [ManifestEntry(f.file, Purpose.APP, f.signature, f.entry) for f in app.files]

    def inventory_query(self) -> InventoryQuery | None:
        """Names the server is currently waiting on, to be asked of clients over RPC."""
        st = self.state
        if not st.policy.poll_via_rpc or not st.wait_timers:
            return None
        names = sorted({n for wu_id in st.wait_timers for n in st.workunits[wu_id].required_inputs})
        return InventoryQuery(names) if names else None

    def handle_inventory_answers(self, answers: list[InventoryAnswer]) -> None:
        st = self.state
        for ans in answers:
            client = st.clients.get(ans.client_id)
            if client is None:
                continue
            client.last_contact = st.now
            held = set(ans.held) & set(ans.query)
            for wu in self._ordered((W.WAITING_FOR_DATA,)):
                if (wu.wu_id in st.reservations or wu.wu_id in st.get_input_outstanding
                        or not (wu.wu_id in st.wait_timers or wu.wu_id in st.get_input_eligible)):
                    continue
                if set(wu.required_inputs) <= held:
                    st.reservations[wu.wu_id] = client.client_id
                    self._move(wu, W.READY)

    def handle_get_input_done(self, client_id: str, wu_id: str, new_files: list[FileId]) -> None:
        st = self.state
        rid = st.get_input_outstanding.get(wu_id)
        if rid is None or st.results[rid].client_id != client_id:
            raise UnknownAssignment(f"no get-input run of {wu_id!r} on {client_id!r}")
        del st.get_input_outstanding[wu_id]
        client = st.clients[client_id]
        for f in new_files:
            client.inventory[f.name] = f
        wu = st.workunits[wu_id]
        res = st.results[rid]
        produced = wu.state is W.WAITING_FOR_DATA and self.holds_inputs(client.inventory, wu)
        if res.state is ResultState.IN_PROGRESS:
            self._set_result(res, ResultState.SUCCESS if produced else ResultState.ERROR)
        if wu.state is not W.WAITING_FOR_DATA:
            return
        if produced:
            st.reservations[wu_id] = client_id
            self._move(wu, W.READY)
        else:
            self._fail_get_input(wu)

    def handle_result(self, upload: ResultUpload) -> ResultRecord:
        return self.record_result(upload.result_id, upload.status, upload.cpu_seconds,
                                  [o.file for o in upload.outputs])

    def record_result(self, result_id: str, status: UploadStatus, cpu_seconds: float,
                      files: list[FileId]) -> ResultRecord:
        """Outcome of an upload, with outputs described by identity only."""
        st = self.state
        res = st.results.get(result_id)
        if res is None:
            raise UnknownResult(result_id)
        if res.state is not ResultState.IN_PROGRESS:
            raise ResultNotInProgress(f"{result_id} is {res.state.value}")
        client = st.clients[res.client_id]
        client.last_contact = st.now
        res.cpu_seconds = cpu_seconds
        wu = st.workunits[res.wu_id]

        if res.kind is ResultKind.GET_INPUT:
            if status is UploadStatus.ERROR and st.get_input_outstanding.get(wu.wu_id) == res.result_id:
                self.handle_get_input_done(res.client_id, wu.wu_id, [])
            return res

        if wu.state is not W.ASSIGNED:
            raise InvalidTransition(f"{wu.wu_id} is {wu.state.value}, not ASSIGNED")
        if status is UploadStatus.SUCCESS and any(
                f.size_bytes > wu.max_result_size_bytes for f in files):
            self._set_result(res, ResultState.OVERSIZE)
            self._fail_attempt(wu)
        elif status is UploadStatus.SUCCESS and self._outputs_match(wu, files):
            self._set_result(res, ResultState.SUCCESS)
            res.output_files = files
            for f in files:
                client.inventory[f.name] = f
                st.known_files[f.name] = f
            grant_credit(st.ledger, client, cpu_seconds)
            self._move(wu, W.DONE)
        else:
            self._set_result(res, ResultState.ERROR)
            self._fail_attempt(wu)
        self._refresh()
        return res

    @staticmethod
    def _outputs_match(wu: Workunit, files: list[FileId]) -> bool:
        t = wu.output_template
        if not files or not all(t.matches(f.name) for f in files):
            return False
        return t.expected is None or any(f.name == t.expected for f in files)

    # ------------------------------------------------------------------
    # reporting

    def counts(self, wu_ids=None) -> dict[str, int]:
        wus = self.state.workunits
        selected = wus.values() if wu_ids is None else (wus[w] for w in wu_ids)
        c = Counter(w.state.value for w in selected)
        return {s.value: c.get(s.value, 0) for s in WorkunitState}

    def current_client(self, wu_id: str) -> str | None:
        for res in self.state.results.values():
            if res.wu_id == wu_id and res.state is ResultState.IN_PROGRESS:
                return res.client_id
        for res in self.state.results.values():
            if res.wu_id == wu_id and res.state is ResultState.SUCCESS and res.kind is ResultKind.COMPUTE:
                return res.client_id
        return None

    def successful_result(self, wu_id: str) -> ResultRecord | None:
        return next((r for r in self.state.results.values()
                     if r.wu_id == wu_id and r.kind is ResultKind.COMPUTE
                     and r.state is ResultState.SUCCESS), None)
