"""Scheduling and data server.

:class:`Service` turns one decoded request into one reply and owns the only
:class:`Scheduler`; a lock serializes every scheduler mutation and each
mutation is committed to the :class:`ProjectStore` before its reply leaves.
:func:`serve` puts a threaded TCP listener and a periodic tick thread in
front of it.
"""

from __future__ import annotations

import argparse
import logging
import os
import socket
import socketserver
import threading
import time
from dataclasses import dataclass
from pathlib import Path

from . import protocol as p
from . import signing
from .archive import aggregate_results
from .errors import (
    BadSignature,
    Conflict,
    DigestMismatch,
    LocflowError,
    MalformedMessage,
    NotFound,
    StaleProtocol,
    UnknownApplication,
    UnknownClient,
    UnknownJob,
)
from .model import FileId, Workunit, WorkunitState, sha256_hex, validate_workunit_set
from .scheduler import Scheduler, SchedulerPolicy
from .store import JobRecord, ProjectStore

log = logging.getLogger("locflow.server")

ENV_PREFIX = "LOCFLOW_"


@dataclass
class ServerConfig:
    data_dir: Path
    keypair: Path
    listen: str = "127.0.0.1:7878"
    tick_secs: float = 5.0
    wait_window_secs: int = 120
    backoff_secs: int = 60
    client_timeout_secs: int = 600
    poll_via_rpc: bool = True

    def policy(self) -> SchedulerPolicy:
        return SchedulerPolicy(wait_window_secs=self.wait_window_secs, poll_via_rpc=self.poll_via_rpc,
                               backoff_secs=self.backoff_secs, client_timeout_secs=self.client_timeout_secs)


class Service:
    def __init__(self, data_dir: str | Path, keypair: signing.Keypair, policy: SchedulerPolicy | None = None,
                 clock=time.time):
        self.store = ProjectStore(data_dir)
        self.public_key = keypair.public_bytes
        self.clock = clock
        self.lock = threading.RLock()

        known_key = self.store.get_meta("public_key")
        if known_key is None:
            self.store.set_meta("public_key", self.public_key.hex())
            self.store.set_meta("signature_scheme", signing.SCHEME)
        elif known_key != self.public_key.hex():
            raise BadSignature("keypair does not match the project's public key")

        state = self.store.load_state()
        self.scheduler = Scheduler(state=state, policy=policy)
        if policy is not None:
            self.scheduler.state.policy = policy
        if state is None:
            self.store.commit(self.scheduler.state)

    def close(self) -> None:
        self.store.close()

    # -- entry points --------------------------------------------------

    def handle(self, message) -> object:
        """Reply to one request; protocol-level failures come back as ErrorReply."""
        handler = self.HANDLERS.get(type(message))
        if handler is None:
            return p.ErrorReply("MalformedMessage", f"{type(message).__name__} is not a request")
        try:
            with self.lock:
                self.scheduler.advance(self.clock())
                return handler(self, message)
        except LocflowError as exc:
            return p.ErrorReply.from_exception(exc)
        except Exception as exc:
            log.exception("request %s failed", type(message).__name__)
            return p.ErrorReply("LocflowError", f"internal error: {exc}")

    def tick(self) -> None:
        with self.lock:
            self.scheduler.tick(self.clock())
            self.store.commit(self.scheduler.state)

    def _commit(self, job: JobRecord | None = None) -> None:
        self.store.commit(self.scheduler.state, job)

    # -- handlers ------------------------------------------------------

    def _register(self, m: p.Register) -> p.RegisterReply:
        if m.protocol_version != p.PROTOCOL_VERSION:
            raise StaleProtocol(f"client speaks protocol {m.protocol_version}")
        rec = self.scheduler.register(m.user_id, m.hardware, m.group_id, m.client_id)
        self._commit()
        return p.RegisterReply(rec.client_id)

    def _work_request(self, m: p.WorkRequest) -> p.WorkReply:
        reply = self.scheduler.handle_work_request(m)
        self._commit()
        return reply

    def _inventory_answer(self, m: p.InventoryAnswer) -> p.Ack:
        if m.client_id not in self.scheduler.state.clients:
            raise UnknownClient(m.client_id)
        self.scheduler.handle_inventory_answers([m])
        self._commit()
        return p.Ack(self.scheduler.inventory_query())

    def _upload(self, m: p.ResultUpload) -> p.Ack:
        st = self.scheduler.state
        res = st.results.get(m.result_id)
        if res is not None and res.client_id != m.client_id:
            raise UnknownClient(f"{m.result_id} was not assigned to {m.client_id}")
        for out in m.outputs:
            self.store.blobs.put(out.data, expected=out.file.digest)
        self.scheduler.handle_result(m)
        self._commit()
        return p.Ack(self.scheduler.inventory_query())

    def _download(self, m: p.DownloadRequest) -> p.DownloadReply:
        f = self._catalog_file(m.digest, m.purpose)
        return p.DownloadReply(f, self.store.blobs.get(m.digest))

    def _catalog_file(self, digest: str, purpose: p.Purpose) -> FileId:
        """Only application, environment and patch files are downloadable, never job inputs."""
        st = self.scheduler.state
        if purpose is p.Purpose.APP:
            files = (f.file for a in st.apps.values() for f in a.files)
        elif purpose is p.Purpose.ENV:
            files = (f for e in st.environments.values() for f in e.files)
        else:
            files = (f for pt in st.patches.values() for f in pt.overlay_files)
        for f in files:
            if f.digest == digest:
                return f
        raise NotFound(f"no {purpose.value} file with digest {digest}", digest=digest)

    def _submit_application(self, m: p.SubmitApplication) -> p.SubmitApplicationReply:
        app = m.app
        if len(m.blobs) != len(app.files):
            raise DigestMismatch(f"{len(app.files)} files declared, {len(m.blobs)} blobs sent")
        for af, blob in zip(app.files, m.blobs):
            if sha256_hex(blob) != af.file.digest or len(blob) != af.file.size_bytes:
                raise DigestMismatch(f"blob for {af.file.name} does not match its digest", name=af.file.name)
            if not signing.verify_signature(blob, af.signature, self.public_key):
                raise BadSignature(f"{af.file.name} is not signed by the project key", name=af.file.name)
        existing = self.scheduler.state.apps.get(app.app_id)
        if existing is not None and existing != app and existing.version >= app.version:
            raise Conflict(f"application {app.app_id} version {existing.version} already exists")
        for af, blob in zip(app.files, m.blobs):
            self.store.blobs.put(blob, expected=af.file.digest)
        self.scheduler.add_application(app)
        self._commit()
        return p.SubmitApplicationReply(app.app_id)

    def _store_bundle_files(self, files, blobs: dict[str, bytes]) -> None:
        for f in files:
            data = blobs.get(f.digest)
            if data is not None:
                if len(data) != f.size_bytes:
                    raise DigestMismatch(f"blob for {f.name} has the wrong size", name=f.name)
                self.store.blobs.put(data, expected=f.digest)
            elif not self.store.blobs.has(f.digest):
                raise NotFound(f"no blob sent or stored for {f.name}", name=f.name, digest=f.digest)

    def _submit_job(self, m: p.SubmitJob) -> p.SubmitJobReply:
        s = self.scheduler
        st = s.state
        blobs = {sha256_hex(b): b for b in m.blobs}
        for env in m.environments:
            if env.app_id not in st.apps:
                raise UnknownApplication(env.app_id)
            if st.environments.get(env.env_id, env) != env:
                raise Conflict(f"environment {env.env_id} already exists with other files")
        env_ids = set(st.environments) | {e.env_id for e in m.environments}
        for patch in m.patches:
            if patch.env_id not in env_ids:
                raise NotFound(f"patch {patch.patch_id} targets unknown environment {patch.env_id}")
            if st.patches.get(patch.patch_id, patch) != patch:
                raise Conflict(f"patch {patch.patch_id} already exists with other files")

        jobs = self.store.jobs()
        seq = (jobs[-1].seq + 1) if jobs else 1
        job_id = f"job-{seq}"
        keys = {spec.key for spec in m.workunits}
        if len(keys) != len(m.workunits):
            raise Conflict("workunit keys must be unique within a job")

        def wu_id(key: str) -> str:
            if key in keys:
                return f"{job_id}:{key}"
            if key in st.workunits:
                return key
            return f"{job_id}:{key}"  # left dangling on purpose; validation reports it

        wus = []
        for spec in m.workunits:
            for app_id in filter(None, (spec.app_id, spec.get_input_app)):
                if app_id not in st.apps:
                    raise UnknownApplication(app_id)
            if spec.env_id not in env_ids:
                raise NotFound(f"unknown environment {spec.env_id}")
            if spec.patch_id is not None and spec.patch_id not in st.patches \
                    and spec.patch_id not in {pt.patch_id for pt in m.patches}:
                raise NotFound(f"unknown patch {spec.patch_id}")
            wus.append(Workunit(
                wu_id(spec.key), spec.app_id, spec.env_id, spec.output, spec.patch_id,
                list(spec.required_inputs), spec.get_input_app, [wu_id(k) for k in spec.predecessors],
                spec.max_result_size_bytes, spec.deadline_secs, spec.max_retries,
            ))

        # validate the graph before touching any state
        validate_workunit_set(list(st.workunits.values()) + wus)

        for env in m.environments:
            self._store_bundle_files(env.files, blobs)
        for patch in m.patches:
            self._store_bundle_files(patch.overlay_files, blobs)
        for env in m.environments:
            s.add_environment(env)
        for patch in m.patches:
            s.add_patch(patch)
        ids = s.submit(wus)
        job = JobRecord(job_id, seq, m.name, ids)
        self._commit(job)
        return p.SubmitJobReply(job_id, ids)

    def _job_wus(self, job_id: str | None) -> list[str] | None:
        if job_id is None:
            return None
        job = self.store.job(job_id)
        if job is None:
            raise UnknownJob(job_id)
        return job.wu_ids

    def _status(self, m: p.StatusRequest) -> p.StatusReply:
        s = self.scheduler
        st = s.state
        wu_ids = self._job_wus(m.job_id)
        selected = list(st.workunits) if wu_ids is None else wu_ids
        selected.sort(key=lambda w: st.workunits[w].submit_seq)
        clients = [p.ClientStatus(c.client_id, c.user_id, len(c.inventory),
                                  sum(f.size_bytes for f in c.inventory.values()), c.last_contact)
                   for c in sorted(st.clients.values(), key=lambda c: c.client_id)]
        groups = sorted(st.ledger.groups.items(), key=lambda kv: (-kv[1], kv[0]))
        return p.StatusReply(
            counts=s.counts(selected),
            workunits=[p.WorkunitStatus(w, st.workunits[w].state.value, s.current_client(w)) for w in selected],
            clients=clients,
            users=[p.CreditRow(u, c) for u, c in st.ledger.leaderboard()],
            groups=[p.CreditRow(g, c) for g, c in groups],
            jobs=[j.job_id for j in self.store.jobs()],
        )

    def _fetch(self, m: p.FetchRequest) -> p.FetchReply:
        wu_ids = self._job_wus(m.job_id)
        if not m.include_all:
            wu_ids = sink_workunits(self.scheduler.state.workunits, wu_ids)
        blob = aggregate_results(self.scheduler, wu_ids, self.store.blobs.get)
        return p.FetchReply(sha256_hex(blob), blob)

    HANDLERS = {
        p.Register: _register,
        p.WorkRequest: _work_request,
        p.InventoryAnswer: _inventory_answer,
        p.ResultUpload: _upload,
        p.DownloadRequest: _download,
        p.SubmitApplication: _submit_application,
        p.SubmitJob: _submit_job,
        p.StatusRequest: _status,
        p.FetchRequest: _fetch,
    }


def sink_workunits(workunits: dict[str, Workunit], wu_ids: list[str]) -> list[str]:
    """Workunits of the job that no other workunit of the job depends on (the final outputs)."""
    used = {pred for w in wu_ids for pred in workunits[w].predecessors}
    return [w for w in wu_ids if w not in used]


def job_finished(counts: dict[str, int]) -> bool:
    return all(n == 0 for state, n in counts.items()
               if state not in (WorkunitState.DONE.value, WorkunitState.FAILED.value))


# ---------------------------------------------------------------------------
# network front end


class _Handler(socketserver.BaseRequestHandler):
    def handle(self) -> None:
        service: Service = self.server.service
        sock: socket.socket = self.request
        sock.settimeout(self.server.idle_timeout)
        while True:
            try:
                head = sock.recv(p.HEADER.size, socket.MSG_WAITALL)
                if not head:
                    return
                if len(head) < p.HEADER.size:
                    raise MalformedMessage(len(head), "truncated length prefix")
                (length,) = p.HEADER.unpack(head)
                if length > p.MAX_FRAME_BYTES:
                    raise MalformedMessage(0, f"frame length {length} exceeds limit")
                body = p.recv_exact(sock, length)
                message = p.decode(body)
            except LocflowError as exc:
                self._send(sock, p.ErrorReply.from_exception(exc))
                return
            except OSError:
                return
            if not self._send(sock, service.handle(message)):
                return

    @staticmethod
    def _send(sock: socket.socket, reply) -> bool:
        try:
            p.send_message(sock, reply)
            return True
        except OSError:
            return False


class _TCPServer(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True


class Server:
    """TCP listener plus tick thread around a :class:`Service`."""

    def __init__(self, service: Service, listen: str = "127.0.0.1:0", tick_secs: float = 5.0,
                 idle_timeout: float = 60.0):
        self.service = service
        self.tick_secs = tick_secs
        self.tcp = _TCPServer(p.parse_address(listen), _Handler)
        self.tcp.service = service
        self.tcp.idle_timeout = idle_timeout
        self._stop = threading.Event()
        self._threads: list[threading.Thread] = []

    @property
    def address(self) -> str:
        host, port = self.tcp.server_address[:2]
        return f"{host}:{port}"

    def _tick_loop(self) -> None:
        while not self._stop.wait(self.tick_secs):
            try:
                self.service.tick()
            except Exception:  # keep ticking; a failed tick is retried next period
                log.exception("tick failed")

    def start(self) -> Server:
        for target in (self.tcp.serve_forever, self._tick_loop):
            t = threading.Thread(target=target, daemon=True)
            t.start()
            self._threads.append(t)
        return self

    def stop(self) -> None:
        self._stop.set()
        if self._threads:  # shutdown() blocks forever unless serve_forever is running
            self.tcp.shutdown()
        self.tcp.server_close()
        for t in self._threads:
            t.join(timeout=5)
        self.service.close()

    def __enter__(self) -> Server:
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()


def open_service(config: ServerConfig) -> Service:
    if not Path(config.keypair).exists():
        raise NotFound(f"keypair {config.keypair} does not exist; create one with `locflow keygen`")
    return Service(config.data_dir, signing.load_keypair(config.keypair), config.policy())


def serve(config: ServerConfig, ready=None) -> None:
    """Run until interrupted.  ``ready`` is called with the bound address once listening."""
    server = Server(open_service(config), config.listen, config.tick_secs)
    server.start()
    log.info("listening on %s", server.address)
    if ready is not None:
        ready(server.address)
    try:
        while True:
            time.sleep(3600)
    except KeyboardInterrupt:
        pass
    finally:
        server.stop()


# ---------------------------------------------------------------------------
# command-line configuration

SETTINGS = [
    # flag, dest, type, default, help
    ("--listen", "listen", str, "127.0.0.1:7878", "address to listen on (host:port; port 0 picks one)"),
    ("--data-dir", "data_dir", Path, Path("locflow-server"), "directory for the database and blobs"),
    ("--keypair", "keypair", Path, Path("project.key"), "project signing key (PEM)"),
    ("--tick-secs", "tick_secs", float, 5.0, "period of timer and inventory-query processing"),
    ("--wait-window-secs", "wait_window_secs", int, 120, "how long a workunit waits for its data"),
    ("--backoff-secs", "backoff_secs", int, 60, "retry delay suggested to idle workers"),
    ("--client-timeout-secs", "client_timeout_secs", int, 600, "silence after which a worker is lost"),
]


def env_default(dest: str, tp, default, environ=os.environ):
    raw = environ.get(ENV_PREFIX + dest.upper())
    return default if raw is None else tp(raw)


def add_arguments(parser: argparse.ArgumentParser) -> None:
    for flag, dest, tp, default, help_text in SETTINGS:
        parser.add_argument(flag, dest=dest, type=tp, default=env_default(dest, tp, default),
                            help=f"{help_text} (env {ENV_PREFIX}{dest.upper()}, default {default})")
    parser.add_argument("--no-rpc-poll", dest="poll_via_rpc", action="store_false",
                        default=os.environ.get(ENV_PREFIX + "POLL_VIA_RPC", "1") not in ("0", "false", "no"),
                        help="do not piggyback inventory queries on replies (env LOCFLOW_POLL_VIA_RPC=0)")


def config_from_args(args: argparse.Namespace) -> ServerConfig:
    return ServerConfig(args.data_dir, args.keypair, args.listen, args.tick_secs, args.wait_window_secs,
                        args.backoff_secs, args.client_timeout_secs, args.poll_via_rpc)
