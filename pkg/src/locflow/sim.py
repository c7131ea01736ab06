"""Deterministic discrete-event simulator around the real scheduler.

Synthetic clients talk to a :class:`~locflow.scheduler.Scheduler` through
the same handlers the server uses, on a virtual clock.  The cost model is
deliberately small:

* every scheduler exchange that leads to work (request, reply, downloads and
  the later upload) costs ``overhead`` seconds before computing starts;
* a workunit computes for ``events x cost_per_event[stage]`` seconds;
* an idle client asks again every ``poll_interval`` seconds.

Three hypotheses for how partitions reach other clients can be compared:

``local``      (default) outputs stay on the client that produced them;
``replicate``  (``replicate_outputs``) outputs are copied to every live
               client, as on shared storage;
``get-input``  (``fetch_partitions``) generation partitions are not kept by
               the generating client, and each simulation workunit carries a
               get-input application that fetches its partition.
"""

from __future__ import annotations

import copy
import csv
import heapq
import io
import math
import random
from dataclasses import dataclass, field

from .model import (
    AppFile,
    ApplicationSpec,
    EnvironmentBundle,
    FileId,
    Patch,
    ResultState,
    Workunit,
    WorkunitState,
    sha256_hex,
)
from .pipeline import STAGES, build_muon_pipeline, events_of
from .protocol import Hardware, InventoryAnswer, ReplyKind, UploadStatus, WorkRequest
from .scheduler import Scheduler, SchedulerPolicy

DEFAULT_COSTS = {"gen": 1.0, "sim": 6.0, "digi": 2.0, "reco": 4.0}
DEFAULT_BYTES_PER_EVENT = {"gen": 2000, "sim": 4000, "digi": 3000, "reco": 1000}
FETCH_APP = "muon-fetch"


@dataclass
class SimConfig:
    n_clients: int = 1
    events: int = 100
    costs: dict[str, float] = field(default_factory=lambda: dict(DEFAULT_COSTS))
    overhead: float = 40.0
    poll_interval: float = 10.0
    bytes_per_event: dict[str, int] = field(default_factory=lambda: dict(DEFAULT_BYTES_PER_EVENT))
    app_bytes: int = 200_000
    env_bytes: int = 2_000
    seed: int = 0
    # relative +- noise on each workunit's compute time, drawn from the seed
    jitter: float = 0.0
    replicate_outputs: bool = False
    fetch_partitions: bool = False
    wait_window: int = 60
    fetch_secs: float = 20.0
    deadline_factor: float = 3.0
    # client index -> virtual time at which that client silently dies
    kill_at: dict[int, float] = field(default_factory=dict)
    poll_via_rpc: bool = True
    max_time: float = 1e8

    def __post_init__(self):
        if self.n_clients < 1:
            raise ValueError("n_clients must be >= 1")
        if self.events < 10 or self.events % 10:
            raise ValueError("events must be a positive multiple of 10")
        if set(self.costs) != set(STAGES) or any(c < 0 for c in self.costs.values()):
            raise ValueError(f"costs must be non-negative and cover exactly {STAGES}")
        if self.overhead < 0 or self.poll_interval <= 0:
            raise ValueError("overhead must be >= 0 and poll_interval > 0")
        if self.replicate_outputs and self.fetch_partitions:
            raise ValueError("replicate_outputs and fetch_partitions are alternative hypotheses")
        if not 0 <= self.jitter < 1:
            raise ValueError("jitter must be in [0, 1)")

    @property
    def mode(self) -> str:
        if self.replicate_outputs:
            return "replicate"
        return "get-input" if self.fetch_partitions else "local"


@dataclass
class SimReport:
    events: int
    n_clients: int
    mode: str
    makespan_secs: float
    baseline_secs: float
    messages_exchanged: int
    bytes_moved_input: int
    bytes_moved_other: int
    bytes_replicated: int
    locality_fraction: float
    compute_jobs: int
    get_input_jobs: int
    timeouts: int
    unfinished: int
    busy_secs: float
    work_secs: float

    @property
    def ratio(self) -> float:
        return self.makespan_secs / self.baseline_secs


def baseline_secs(config: SimConfig) -> float:
    """Serial execution of the whole pipeline on one machine, no overhead."""
    return sum(config.events * config.costs[s] for s in STAGES)


def _file(name: str, size: int) -> FileId:
    return FileId(name, sha256_hex(f"{name}:{size}".encode()), size)


def catalog(config: SimConfig):
    """Applications, environments and patches backing the synthetic pipeline."""
    apps, envs, patches = [], [], []
    for stage in STAGES + ("fetch",):
        app_id = f"muon-{stage}"
        exe = _file(f"{stage}.bin", config.app_bytes)
        apps.append(ApplicationSpec(app_id, 1, (AppFile(exe, b"simulated-signature", True),)))
        if stage == "fetch":
            continue
        env = EnvironmentBundle(f"{app_id}-env", app_id, (_file(f"{stage}.opts", config.env_bytes),))
        envs.append(env)
        for k in sorted({config.events, config.events // 10}):
            patches.append(Patch(f"{app_id}-events-{k}", env.env_id, (_file("events.opts", 16),)))
    return apps, envs, patches


@dataclass
class _Client:
    index: int
    client_id: str = ""
    files: dict[str, FileId] = field(default_factory=dict)
    # where each held file came from: "local" (produced or pre-seeded here) or "moved"
    origin: dict[str, str] = field(default_factory=dict)
    cache: set[str] = field(default_factory=set)
    busy_secs: float = 0.0
    dead_at: float = math.inf


class Simulation:
    def __init__(self, config: SimConfig, pipeline: list[Workunit] | None = None,
                 external_inputs: dict[str, int] | None = None):
        self.config = config
        self.rng = random.Random(config.seed)
        get_input = FETCH_APP if config.fetch_partitions else None
        self.pipeline = pipeline if pipeline is not None else build_muon_pipeline(
            config.events, get_input_app=get_input)
        # inputs that exist outside every client (name -> size); only get-input can bring them in
        self.external_inputs = dict(external_inputs or {})
        self.scheduler = Scheduler(policy=SchedulerPolicy(
            wait_window_secs=config.wait_window, poll_via_rpc=config.poll_via_rpc,
            backoff_secs=math.ceil(config.poll_interval),
            client_timeout_secs=math.ceil(10 * config.poll_interval),
        ))
        self.queue: list[tuple[float, int, str, object]] = []
        self._seq = 0
        self.messages = 0
        self.bytes_input = 0
        self.bytes_other = 0
        self.bytes_replicated = 0
        self.compute_jobs = 0
        self.local_jobs = 0
        self.get_input_jobs = 0

    # -- cost model ----------------------------------------------------

    @staticmethod
    def stage(wu: Workunit) -> str:
        return wu.app_id.removeprefix("muon-")

    def cost(self, wu: Workunit) -> float:
        return events_of(wu.patch_id) * self.config.costs[self.stage(wu)] * self._noise[wu.wu_id]

    def output_size(self, wu: Workunit) -> int:
        per_file = events_of(wu.patch_id) * self.config.bytes_per_event[self.stage(wu)]
        if wu.output_template.expected is None:
            return per_file // 10
        return per_file

    # -- event plumbing ------------------------------------------------

    def _push(self, at: float, kind: str, payload) -> None:
        self._seq += 1
        heapq.heappush(self.queue, (at, self._seq, kind, payload))

    def _setup(self) -> None:
        cfg = self.config
        s = self.scheduler
        apps, envs, patches = catalog(cfg)
        for a in apps:
            s.add_application(a)
        for e in envs:
            s.add_environment(e)
        for p in patches:
            s.add_patch(p)
        wus = copy.deepcopy(self.pipeline)
        self._noise = {wu.wu_id: 1.0 + cfg.jitter * self.rng.uniform(-1, 1) for wu in wus}
        for wu in wus:
            wu.deadline_secs = max(1, math.ceil(cfg.deadline_factor * (self.cost(wu) + cfg.overhead)))
        s.submit(wus)

        self.clients = [_Client(i) for i in range(cfg.n_clients)]
        for c in self.clients:
            c.dead_at = cfg.kill_at.get(c.index, math.inf)
            rec = s.register(f"user{c.index}", Hardware(1, 1.0, 4096, 100_000), group_id="sim")
            c.client_id = rec.client_id
            self.messages += 2
            self._push(0.0, "request", c)
        self._push(float(cfg.poll_interval), "tick", None)

    def run(self) -> SimReport:
        self._setup()
        s = self.scheduler
        while self.queue:
            at, _, kind, payload = heapq.heappop(self.queue)
            if at > self.config.max_time:
                break
            s.advance(at)
            if kind == "request":
                self._request(payload, at)
            elif kind == "complete":
                self._complete(payload, at)
            elif kind == "fetched":
                self._fetched(payload, at)
            elif kind == "tick":
                self._tick(at)
            if self._all_terminal():
                break
        return self._report()

    def _all_terminal(self) -> bool:
        return all(w.terminal for w in self.scheduler.state.workunits.values())

    def _alive(self, c: _Client, at: float) -> bool:
        return at < c.dead_at

    def _tick(self, at: float) -> None:
        s = self.scheduler
        s.tick(at)
        q = s.inventory_query()
        if q is not None:
            answers = []
            for c in self.clients:
                if self._alive(c, at):
                    self.messages += 2
                    answers.append(InventoryAnswer(c.client_id, q.names, [n for n in q.names if n in c.files]))
            s.handle_inventory_answers(answers)
        if self._all_terminal() or not any(self._alive(c, at) for c in self.clients):
            return
        self._push(at + self.config.poll_interval, "tick", None)

    def _request(self, c: _Client, at: float) -> None:
        if not self._alive(c, at):
            return
        cfg = self.config
        s = self.scheduler
        req = WorkRequest(c.client_id, Hardware(1, 1.0, 4096, 100_000),
                          sorted(c.files.values(), key=lambda f: f.name))
        reply = s.handle_work_request(req)
        self.messages += 2
        if reply.kind is ReplyKind.NO_WORK:
            self._push(at + cfg.poll_interval, "request", c)
            return
        for entry in reply.manifest:
            if entry.file.digest not in c.cache:
                c.cache.add(entry.file.digest)
                self.bytes_other += entry.file.size_bytes
                self.messages += 2
        wu = s.state.workunits[reply.wu_id]
        start = at + cfg.overhead
        if reply.kind is ReplyKind.GET_INPUT_ASSIGNMENT:
            self.get_input_jobs += 1
            end = start + cfg.fetch_secs
            if end < c.dead_at:
                self._push(end, "fetched", (c, wu.wu_id))
            return
        self.compute_jobs += 1
        if all(c.origin.get(n) == "local" for n in wu.required_inputs):
            self.local_jobs += 1
        cost = self.cost(wu)
        end = start + cost
        if end < c.dead_at:
            self._push(end, "complete", (c, reply.result_id, start))

    def _fetched(self, payload, at: float) -> None:
        c, wu_id = payload
        wu = self.scheduler.state.workunits[wu_id]
        for name in wu.required_inputs:
            size = self._known_size(name)
            c.files[name] = _file(name, size)
            c.origin[name] = "moved"
            self.bytes_input += size
        self._request(c, at)

    def _known_size(self, name: str) -> int:
        known = self.scheduler.state.known_files.get(name)
        if known is not None:
            return known.size_bytes
        return self.external_inputs.get(name, 0)

    def _complete(self, payload, at: float) -> None:
        c, result_id, start = payload
        s = self.scheduler
        cfg = self.config
        wu_id = s.state.results[result_id].wu_id
        wu = s.state.workunits[wu_id]
        c.busy_secs += at - start
        if wu.output_template.expected is not None:
            names = [wu.output_template.expected]
        else:
            names = [wu.output_template.pattern.replace("{index}", str(i)) for i in range(10)]
        size = self.output_size(wu)
        outputs = [_file(n, size) for n in names]
        s.tick(at)
        if s.state.results[result_id].state is not ResultState.IN_PROGRESS:
            # timed out while computing; the late upload is refused like on the real server
            self._request(c, at)
            return
        s.record_result(result_id, UploadStatus.SUCCESS, at - start, outputs)
        self.messages += 2
        self.bytes_other += size * len(outputs)
        if s.state.results[result_id].state is ResultState.SUCCESS:
            keep_local = not (cfg.fetch_partitions and self.stage(wu) == "gen")
            for f in outputs:
                if keep_local:
                    c.files[f.name] = f
                    c.origin[f.name] = "local"
                else:
                    c.files.pop(f.name, None)
            if cfg.replicate_outputs:
                for other in self.clients:
                    if other is not c and self._alive(other, at):
                        for f in outputs:
                            other.files[f.name] = f
                            other.origin[f.name] = "moved"
                            self.bytes_replicated += f.size_bytes
        self._request(c, at)

    def _report(self) -> SimReport:
        s = self.scheduler
        done = [w for w in s.state.workunits.values() if w.state is WorkunitState.DONE]
        timeouts = sum(1 for r in s.state.results.values() if r.state is ResultState.TIMEOUT)
        terminal_times = [t.at for t in s.state.trace if t.new in (WorkunitState.DONE, WorkunitState.FAILED)]
        makespan = max(terminal_times, default=0.0)
        return SimReport(
            events=self.config.events,
            n_clients=self.config.n_clients,
            mode=self.config.mode,
            makespan_secs=makespan,
            baseline_secs=baseline_secs(self.config),
            messages_exchanged=self.messages,
            bytes_moved_input=self.bytes_input + self.bytes_replicated,
            bytes_moved_other=self.bytes_other,
            bytes_replicated=self.bytes_replicated,
            locality_fraction=(self.local_jobs / self.compute_jobs) if self.compute_jobs else 1.0,
            compute_jobs=self.compute_jobs,
            get_input_jobs=self.get_input_jobs,
            timeouts=timeouts,
            unfinished=sum(1 for w in s.state.workunits.values() if not w.terminal),
            busy_secs=sum(c.busy_secs for c in self.clients),
            work_secs=sum(self.cost(w) for w in done),
        )


def simulate(config: SimConfig, pipeline: list[Workunit] | None = None, **kw) -> SimReport:
    return Simulation(config, pipeline, **kw).run()


def simulate_with_trace(config: SimConfig, pipeline: list[Workunit] | None = None, **kw):
    sim = Simulation(config, pipeline, **kw)
    report = sim.run()
    return report, sim.scheduler.state.trace


REPORT_COLUMNS = [
    "row", "mode", "events", "clients", "makespan_secs", "baseline_secs", "ratio",
    "messages", "bytes_moved_input", "bytes_moved_other", "bytes_replicated",
    "locality_fraction", "timeouts", "unfinished",
]


def emit_report(reports: list[SimReport]) -> str:
    """CSV table: one ``sim`` row per report plus one ``baseline`` row per event count."""
    if not reports:
        raise ValueError("need at least one report")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_COLUMNS)
    seen_baselines = set()
    for r in sorted(reports, key=lambda r: (r.mode, r.events, r.n_clients)):
        if (r.mode, r.events) not in seen_baselines and len(reports) > 1:
            seen_baselines.add((r.mode, r.events))
            w.writerow(["baseline", r.mode, r.events, 0, f"{r.baseline_secs:.3f}", f"{r.baseline_secs:.3f}",
                        "1.0000", 0, 0, 0, 0, "1.0000", 0, 0])
        w.writerow(["sim", r.mode, r.events, r.n_clients, f"{r.makespan_secs:.3f}", f"{r.baseline_secs:.3f}",
                    f"{r.ratio:.4f}", r.messages_exchanged, r.bytes_moved_input, r.bytes_moved_other,
                    r.bytes_replicated, f"{r.locality_fraction:.4f}", r.timeouts, r.unfinished])
    return buf.getvalue()


def sweep(events=(100, 1000), clients=(1, 2, 4, 8), **overrides) -> list[SimReport]:
    return [simulate(SimConfig(n_clients=n, events=e, **overrides)) for e in events for n in clients]
