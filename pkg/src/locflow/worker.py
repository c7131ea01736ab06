"""Worker daemon: advertise local data, run what the server assigns, upload results.

One job runs at a time.  The worker downloads application, environment and
patch files (cached by digest under ``work_dir/cache``) but never job
inputs: those are hard-linked from its own data directory into the sandbox.
Every network transfer is appended to ``work_dir/transfers.log`` as a
tab-separated ``direction purpose name bytes timestamp`` line, which is what
locality audits read.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import resource
import shutil
import signal
import subprocess
import sys
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

from . import protocol as p
from . import signing
from .errors import (
    BadSignature,
    DigestMismatch,
    LaunchFailure,
    LocflowError,
    MalformedMessage,
    MissingBlob,
    ResultNotInProgress,
    UnknownClient,
    UnknownResult,
    UnreadableDirectory,
)
from .model import FileId, FileTemplate, sha256_hex

log = logging.getLogger("locflow.worker")

MAX_BACKOFF_SECS = 300.0
TRANSFER_LOG = "transfers.log"


# ---------------------------------------------------------------------------
# inventory


def _hidden(name: str) -> bool:
    return name.startswith(".") or name.endswith((".tmp", "~"))


def scan_inventory(data_dir: str | Path) -> set[FileId]:
    """One FileId per regular, non-hidden file directly inside ``data_dir``."""
    root = Path(data_dir)
    try:
        entries = sorted(os.scandir(root), key=lambda e: e.name)
    except OSError as exc:
        raise UnreadableDirectory(f"cannot list {root}: {exc.strerror or exc}", path=str(root)) from None
    found = set()
    for entry in entries:
        if _hidden(entry.name) or not entry.is_file(follow_symlinks=False):
            continue
        try:
            data = Path(entry.path).read_bytes()
        except OSError:
            continue  # vanished or unreadable between listing and reading
        found.add(FileId.of(entry.name, data))
    return found


# ---------------------------------------------------------------------------
# blob cache and transfer log


class TransferLog:
    def __init__(self, path: str | Path):
        self.path = Path(path)
        self._lock = threading.Lock()

    def record(self, direction: str, purpose: str, name: str, size: int) -> None:
        line = f"{direction}\t{purpose}\t{name}\t{size}\t{time.time():.6f}\n"
        with self._lock, open(self.path, "a", encoding="utf-8") as f:
            f.write(line)

    def entries(self) -> list[tuple[str, str, str, int, float]]:
        if not self.path.exists():
            return []
        out = []
        for line in self.path.read_text(encoding="utf-8").splitlines():
            d, purpose, name, size, ts = line.split("\t")
            out.append((d, purpose, name, int(size), float(ts)))
        return out


class BlobCache:
    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    def path(self, digest: str) -> Path:
        return self.root / digest

    def get(self, f: FileId) -> bytes:
        try:
            data = self.path(f.digest).read_bytes()
        except FileNotFoundError:
            raise MissingBlob(f"{f.name} ({f.digest}) is not in the cache", name=f.name) from None
        if sha256_hex(data) != f.digest:
            self.path(f.digest).unlink(missing_ok=True)
            raise MissingBlob(f"cached copy of {f.name} is corrupt", name=f.name)
        return data

    def has(self, f: FileId) -> bool:
        try:
            self.get(f)
        except MissingBlob:
            return False
        return True

    def put(self, f: FileId, data: bytes) -> None:
        if sha256_hex(data) != f.digest or len(data) != f.size_bytes:
            raise DigestMismatch(f"downloaded {f.name} does not match its digest", name=f.name)
        tmp = self.path(f.digest).with_suffix(".tmp")
        tmp.write_bytes(data)
        os.replace(tmp, self.path(f.digest))


# ---------------------------------------------------------------------------
# sandbox


@dataclass
class Sandbox:
    root: Path
    entry: Path
    # name -> where the materialized content came from ("app", "env", "patch", "input")
    sources: dict[str, str] = field(default_factory=dict)


def build_sandbox(root: str | Path, manifest: list[p.ManifestEntry], cache: BlobCache, public_key: bytes,
                  inputs: dict[str, Path] | None = None) -> Sandbox:
    """Materialize application, environment, patch overlay and linked inputs.

    Patch files shadow environment files of the same name.  Application
    files are written last so nothing can shadow signed code.
    """
    root = Path(root)
    layers = {p.Purpose.ENV: [], p.Purpose.PATCH: [], p.Purpose.APP: []}
    for e in manifest:
        layers[e.purpose].append(e)
    contents: dict[str, tuple[str, bytes]] = {}
    entry_name = None
    for purpose in (p.Purpose.ENV, p.Purpose.PATCH, p.Purpose.APP):
        for e in layers[purpose]:
            data = cache.get(e.file)
            if purpose is p.Purpose.APP:
                if not signing.verify_signature(data, e.signature or b"", public_key):
                    raise BadSignature(f"{e.file.name} is not signed by the project key", name=e.file.name)
                if e.entry:
                    entry_name = e.file.name
            contents[e.file.name] = (purpose.value.lower(), data)
    if entry_name is None:
        raise MissingBlob("assignment carries no entry executable")
    for name in inputs or {}:
        if name in contents:
            raise LaunchFailure(f"input {name} collides with a shipped file")

    if root.exists():
        shutil.rmtree(root)
    root.mkdir(parents=True)
    sources = {}
    for name in sorted(contents):
        kind, data = contents[name]
        path = root / name
        path.write_bytes(data)
        path.chmod(0o755 if name == entry_name else 0o644)
        sources[name] = kind
    for name, src in sorted((inputs or {}).items()):
        try:
            os.link(src, root / name)
        except OSError:
            shutil.copy2(src, root / name)
        sources[name] = "input"
    return Sandbox(root, root / entry_name, sources)


# ---------------------------------------------------------------------------
# execution


@dataclass
class Execution:
    status: p.UploadStatus
    outputs: list[Path]
    cpu_seconds: float
    reason: str = ""


def _children_cpu() -> float:
    ru = resource.getrusage(resource.RUSAGE_CHILDREN)
    return ru.ru_utime + ru.ru_stime


def _command(entry: Path) -> list[str]:
    if entry.suffix == ".py":
        return [sys.executable, entry.name]
    if entry.suffix == ".sh":
        return ["/bin/sh", entry.name]
    return [str(entry)]


def _run(sandbox: Sandbox, timeout: float, env: dict[str, str]) -> tuple[int | None, float, str]:
    """(exit code or None on timeout, cpu seconds, reason)."""
    full_env = dict(os.environ)
    full_env.update(env)
    before = _children_cpu()
    try:
        with open(sandbox.root / ".stdout", "wb") as out, open(sandbox.root / ".stderr", "wb") as err:
            proc = subprocess.Popen(_command(sandbox.entry), cwd=sandbox.root, env=full_env, stdout=out,
                                    stderr=err, stdin=subprocess.DEVNULL, start_new_session=True)
    except OSError as exc:
        raise LaunchFailure(f"cannot start {sandbox.entry.name}: {exc}") from None
    try:
        code = proc.wait(timeout=max(timeout, 0.001))
        reason = "" if code == 0 else f"exit status {code}"
    except subprocess.TimeoutExpired:
        # the watchdog: kill the whole process group
        try:
            os.killpg(proc.pid, signal.SIGKILL)
        except ProcessLookupError:
            pass
        proc.wait()
        code, reason = None, f"killed after {timeout:.1f}s"
    return code, _children_cpu() - before, reason


def execute(sandbox: Sandbox, output: FileTemplate, timeout: float, inputs: list[str] = ()) -> Execution:
    env = {
        "LOCFLOW_SANDBOX": str(sandbox.root),
        "LOCFLOW_INPUTS": ",".join(inputs),
        "LOCFLOW_OUTPUT": output.pattern,
    }
    if output.index is not None:
        env["LOCFLOW_INDEX"] = str(output.index)
        env["LOCFLOW_OUTPUT_NAME"] = output.expected
    code, cpu, reason = _run(sandbox, timeout, env)
    if code != 0:
        return Execution(p.UploadStatus.ERROR, [], cpu, reason)
    produced = sorted(path for path in sandbox.root.iterdir()
                      if path.is_file() and path.name not in sandbox.sources
                      and not _hidden(path.name) and output.matches(path.name))
    if not produced or (output.expected is not None and sandbox.root / output.expected not in produced):
        return Execution(p.UploadStatus.ERROR, produced, cpu, "expected output missing")
    return Execution(p.UploadStatus.SUCCESS, produced, cpu)


def run_get_input(sandbox: Sandbox, data_dir: Path, inputs: list[str], timeout: float) -> tuple[Execution, list[FileId]]:
    """Run a get-input application; returns the files it added or changed in ``data_dir``."""
    before = scan_inventory(data_dir)
    env = {
        "LOCFLOW_SANDBOX": str(sandbox.root),
        "LOCFLOW_DATA_DIR": str(Path(data_dir).resolve()),
        "LOCFLOW_INPUTS": ",".join(inputs),
    }
    code, cpu, reason = _run(sandbox, timeout, env)
    fresh = sorted(scan_inventory(data_dir) - before, key=lambda f: f.name)
    status = p.UploadStatus.SUCCESS if code == 0 else p.UploadStatus.ERROR
    return Execution(status, [], cpu, reason), fresh


# ---------------------------------------------------------------------------
# daemon


def detect_hardware(path: Path) -> p.Hardware:
    try:
        memory = os.sysconf("SC_PAGE_SIZE") * os.sysconf("SC_PHYS_PAGES") // (1 << 20)
    except (ValueError, OSError, AttributeError):
        memory = 0
    disk = shutil.disk_usage(path).free // (1 << 20)
    return p.Hardware(cpu_count=1, benchmark_gflops=1.0, memory_mb=int(memory), disk_mb=int(disk))


@dataclass
class WorkerConfig:
    server: str
    data_dir: Path
    work_dir: Path
    project_key: Path
    user_id: str = "anonymous"
    group_id: str | None = None
    max_backoff: float = MAX_BACKOFF_SECS
    job_timeout: float | None = None
    request_timeout: float = 30.0


class Worker:
    def __init__(self, config: WorkerConfig, stop: threading.Event | None = None):
        self.config = config
        self.address = p.parse_address(config.server)
        self.data_dir = Path(config.data_dir)
        self.work_dir = Path(config.work_dir)
        self.data_dir.mkdir(parents=True, exist_ok=True)
        self.work_dir.mkdir(parents=True, exist_ok=True)
        self.public_key = signing.load_public_key(config.project_key)
        self.cache = BlobCache(self.work_dir / "cache")
        self.transfers = TransferLog(self.work_dir / TRANSFER_LOG)
        self.stop = stop or threading.Event()
        self.client_id: str | None = None
        self.hardware = detect_hardware(self.data_dir)
        self._failures = 0

    # -- networking ----------------------------------------------------

    def call(self, message):
        return p.call(self.address, message, timeout=self.config.request_timeout)

    def _network_backoff(self) -> None:
        self._failures += 1
        delay = min(self.config.max_backoff, 2.0 ** (self._failures - 1))
        log.info("server unreachable, retrying in %.0fs", delay)
        self.stop.wait(delay)

    def _identity_path(self) -> Path:
        return self.work_dir / "client.json"

    def register(self) -> str:
        saved = None
        if self._identity_path().exists():
            saved = json.loads(self._identity_path().read_text()).get("client_id")
        reply = self.call(p.Register(self.config.user_id, self.hardware, self.config.group_id, saved))
        self.client_id = reply.client_id
        self._identity_path().write_text(json.dumps({"client_id": self.client_id, "server": self.config.server}))
        return self.client_id

    def answer(self, query: p.InventoryQuery | None) -> None:
        while query is not None and not self.stop.is_set():
            names = {f.name for f in scan_inventory(self.data_dir)}
            ack = self.call(p.InventoryAnswer(self.client_id, query.names,
                                              [n for n in query.names if n in names]))
            query = None if ack.inventory_query == query else ack.inventory_query

    def download(self, entry: p.ManifestEntry) -> None:
        if self.cache.has(entry.file):
            return
        reply = self.call(p.DownloadRequest(entry.file.digest, entry.purpose, self.client_id))
        if reply.file.digest != entry.file.digest:
            raise DigestMismatch(f"server sent {reply.file.digest} for {entry.file.name}")
        self.cache.put(entry.file, reply.data)
        self.transfers.record("down", entry.purpose.value, entry.file.name, len(reply.data))

    # -- one exchange --------------------------------------------------

    def request_work(self) -> p.WorkReply:
        inventory = sorted(scan_inventory(self.data_dir), key=lambda f: f.name)
        return self.call(p.WorkRequest(self.client_id, self.hardware, inventory))

    def _timeout(self, reply: p.WorkReply) -> float:
        remaining = reply.deadline_at - time.time()
        if self.config.job_timeout is not None:
            remaining = min(remaining, self.config.job_timeout)
        return max(remaining, 1.0)

    def run_assignment(self, reply: p.WorkReply) -> p.ResultUpload:
        sandbox_root = self.work_dir / "sandbox" / reply.result_id
        try:
            for entry in reply.manifest:
                self.download(entry)
            if reply.kind is p.ReplyKind.GET_INPUT_ASSIGNMENT:
                sandbox = build_sandbox(sandbox_root, reply.manifest, self.cache, self.public_key)
                run, fresh = run_get_input(sandbox, self.data_dir, reply.inputs, self._timeout(reply))
                for f in fresh:
                    self.transfers.record("external", "GET_INPUT", f.name, f.size_bytes)
                return p.ResultUpload(self.client_id, reply.result_id, run.status, run.cpu_seconds)
            inputs = {name: self.data_dir / name for name in reply.inputs}
            sandbox = build_sandbox(sandbox_root, reply.manifest, self.cache, self.public_key, inputs)
            run = execute(sandbox, reply.output, self._timeout(reply), reply.inputs)
        except (LaunchFailure, BadSignature, MissingBlob, DigestMismatch, FileNotFoundError) as exc:
            log.warning("%s failed before running: %s", reply.result_id, exc)
            return p.ResultUpload(self.client_id, reply.result_id, p.UploadStatus.ERROR)
        finally:
            if reply.kind is p.ReplyKind.GET_INPUT_ASSIGNMENT:
                shutil.rmtree(sandbox_root, ignore_errors=True)
        if run.status is not p.UploadStatus.SUCCESS:
            log.warning("%s: %s", reply.result_id, run.reason)
            shutil.rmtree(sandbox_root, ignore_errors=True)
            return p.ResultUpload(self.client_id, reply.result_id, run.status, run.cpu_seconds)
        payloads = []
        for path in run.outputs:
            # outputs become local inventory and are also uploaded
            target = self.data_dir / path.name
            os.replace(path, target)
            data = target.read_bytes()
            payloads.append(p.OutputPayload(FileId.of(path.name, data), data))
        shutil.rmtree(sandbox_root, ignore_errors=True)
        return p.ResultUpload(self.client_id, reply.result_id, run.status, run.cpu_seconds, payloads)

    def upload(self, upload: p.ResultUpload) -> p.InventoryQuery | None:
        while not self.stop.is_set():
            try:
                ack = self.call(upload)
            except (ResultNotInProgress, UnknownResult) as exc:
                log.info("upload of %s refused: %s", upload.result_id, exc)
                return None
            except (OSError, MalformedMessage):
                self._network_backoff()
                continue
            for out in upload.outputs:
                self.transfers.record("up", "OUTPUT", out.file.name, out.file.size_bytes)
            return ack.inventory_query
        return None

    def step(self) -> float:
        """One request/work/upload cycle; returns how long to wait before the next one."""
        reply = self.request_work()
        self._failures = 0
        self.answer(reply.inventory_query)
        if reply.kind is p.ReplyKind.NO_WORK:
            return float(reply.backoff_secs)
        log.info("%s %s (%s)", reply.kind.value, reply.wu_id, reply.result_id)
        upload = self.run_assignment(reply)
        self.answer(self.upload(upload))
        return 0.0

    def run(self) -> None:
        while not self.stop.is_set():
            try:
                if self.client_id is None:
                    self.register()
                delay = self.step()
            except UnknownClient:
                self._identity_path().unlink(missing_ok=True)
                self.client_id = None
                continue
            except (OSError, MalformedMessage) as exc:
                log.debug("network error: %s", exc)
                self._network_backoff()
                continue
            except LocflowError as exc:
                log.warning("server refused request: %s", exc)
                delay = 1.0
            if delay:
                self.stop.wait(delay)


def main_loop(config: WorkerConfig, stop: threading.Event | None = None) -> None:
    Worker(config, stop).run()


def add_arguments(parser: argparse.ArgumentParser) -> None:
    env = os.environ.get
    parser.add_argument("--data-dir", type=Path, default=Path(env("LOCFLOW_DATA_DIR", "locflow-data")),
                        help="directory whose files are this worker's inventory (env LOCFLOW_DATA_DIR)")
    parser.add_argument("--work-dir", type=Path, default=Path(env("LOCFLOW_WORK_DIR", "locflow-work")),
                        help="cache, sandboxes, identity and transfer log (env LOCFLOW_WORK_DIR)")
    parser.add_argument("--project-key", type=Path, default=Path(env("LOCFLOW_PROJECT_KEY", "project.key.pub")),
                        help="project public key used to check application signatures (env LOCFLOW_PROJECT_KEY)")
    parser.add_argument("--user", default=env("LOCFLOW_USER", "anonymous"), help="credited user (env LOCFLOW_USER)")
    parser.add_argument("--group", default=env("LOCFLOW_GROUP"), help="credited group (env LOCFLOW_GROUP)")
    parser.add_argument("--max-backoff", type=float, default=float(env("LOCFLOW_MAX_BACKOFF", MAX_BACKOFF_SECS)),
                        help="cap on the retry delay after network errors, seconds (env LOCFLOW_MAX_BACKOFF)")
    parser.add_argument("--job-timeout", type=float, default=None,
                        help="kill jobs after this many seconds even if the deadline is later")


def config_from_args(args: argparse.Namespace) -> WorkerConfig:
    return WorkerConfig(args.server, args.data_dir, args.work_dir, args.project_key, args.user, args.group,
                        args.max_backoff, args.job_timeout)
