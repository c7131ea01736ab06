"""Durable project state: a content-addressed blob directory plus one SQLite file.

Blobs live under ``blobs/<2 hex>/<digest>`` and are written through a
temporary file and an atomic rename.  Every read recomputes the digest.

The SQLite database runs in WAL mode and holds the scheduler state as one
canonical snapshot per committed event, alongside the job table.  A commit
replaces the snapshot and any new job rows in a single transaction, so a
crash leaves either the previous or the next consistent state.
"""

from __future__ import annotations

import json
import os
import sqlite3
import tempfile
import threading
from dataclasses import dataclass, field
from pathlib import Path

from . import serial
from .errors import DigestMismatch, NotFound
from .model import sha256_hex
from .scheduler import SchedulerState

SCHEMA = """
CREATE TABLE IF NOT EXISTS meta (key TEXT PRIMARY KEY, value TEXT NOT NULL);
CREATE TABLE IF NOT EXISTS state (id INTEGER PRIMARY KEY CHECK (id = 1), body BLOB NOT NULL);
CREATE TABLE IF NOT EXISTS jobs (
    job_id TEXT PRIMARY KEY,
    seq INTEGER NOT NULL UNIQUE,
    name TEXT NOT NULL,
    wu_ids TEXT NOT NULL
);
"""


class BlobStore:
    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    def path(self, digest: str) -> Path:
        return self.root / digest[:2] / digest

    def has(self, digest: str) -> bool:
        return self.path(digest).is_file()

    def put(self, data: bytes, expected: str | None = None) -> str:
        digest = sha256_hex(data)
        if expected is not None and digest != expected:
            raise DigestMismatch(f"blob hashes to {digest}, expected {expected}", expected=expected, actual=digest)
        target = self.path(digest)
        if target.is_file():
            return digest
        target.parent.mkdir(exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=target.parent, prefix=".tmp-")
        try:
            with os.fdopen(fd, "wb") as f:
                f.write(data)
                f.flush()
                os.fsync(f.fileno())
            os.replace(tmp, target)
        except BaseException:
            Path(tmp).unlink(missing_ok=True)
            raise
        return digest

    def get(self, digest: str) -> bytes:
        try:
            data = self.path(digest).read_bytes()
        except (FileNotFoundError, IsADirectoryError):
            raise NotFound(f"no blob {digest}", digest=digest) from None
        actual = sha256_hex(data)
        if actual != digest:
            raise DigestMismatch(f"stored blob {digest} hashes to {actual}", expected=digest, actual=actual)
        return data


@dataclass
class JobRecord:
    job_id: str
    seq: int
    name: str
    wu_ids: list[str] = field(default_factory=list)


class ProjectStore:
    def __init__(self, data_dir: str | Path):
        self.data_dir = Path(data_dir)
        self.data_dir.mkdir(parents=True, exist_ok=True)
        self.blobs = BlobStore(self.data_dir / "blobs")
        self._lock = threading.Lock()
        self.db = sqlite3.connect(self.data_dir / "project.sqlite3", check_same_thread=False,
                                  isolation_level=None)
        self.db.execute("PRAGMA journal_mode=WAL")
        self.db.execute("PRAGMA synchronous=FULL")
        self.db.executescript(SCHEMA)

    def close(self) -> None:
        with self._lock:
            self.db.close()

    # -- metadata ------------------------------------------------------

    def get_meta(self, key: str) -> str | None:
        with self._lock:
            row = self.db.execute("SELECT value FROM meta WHERE key = ?", (key,)).fetchone()
        return row[0] if row else None

    def set_meta(self, key: str, value: str) -> None:
        with self._lock:
            self.db.execute("INSERT OR REPLACE INTO meta (key, value) VALUES (?, ?)", (key, value))

    # -- scheduler state and jobs --------------------------------------

    def load_state(self) -> SchedulerState | None:
        with self._lock:
            row = self.db.execute("SELECT body FROM state WHERE id = 1").fetchone()
        return serial.loads(SchedulerState, bytes(row[0])) if row else None

    def commit(self, state: SchedulerState, new_job: JobRecord | None = None) -> None:
        body = serial.dumps(state)
        with self._lock:
            self.db.execute("BEGIN IMMEDIATE")
            try:
                self.db.execute("INSERT OR REPLACE INTO state (id, body) VALUES (1, ?)", (body,))
                if new_job is not None:
                    self.db.execute("INSERT INTO jobs (job_id, seq, name, wu_ids) VALUES (?, ?, ?, ?)",
                                    (new_job.job_id, new_job.seq, new_job.name, json.dumps(new_job.wu_ids)))
                self.db.execute("COMMIT")
            except BaseException:
                self.db.execute("ROLLBACK")
                raise

    def jobs(self) -> list[JobRecord]:
        with self._lock:
            rows = self.db.execute("SELECT job_id, seq, name, wu_ids FROM jobs ORDER BY seq").fetchall()
        return [JobRecord(j, s, n, json.loads(w)) for j, s, n, w in rows]

    def job(self, job_id: str) -> JobRecord | None:
        return next((j for j in self.jobs() if j.job_id == job_id), None)


def check_integrity(state: SchedulerState, blobs: BlobStore) -> list[str]:
    """Problems found in a loaded state: dangling catalog references or missing catalog blobs."""
    problems = []
    for wu in state.workunits.values():
        for kind, ref, table in (("app", wu.app_id, state.apps), ("env", wu.env_id, state.environments),
                                 ("get-input app", wu.get_input_app, state.apps),
                                 ("patch", wu.patch_id, state.patches)):
            if ref is not None and ref not in table:
                problems.append(f"{wu.wu_id}: {kind} {ref!r} does not resolve")
    files = [f.file for a in state.apps.values() for f in a.files]
    files += [f for e in state.environments.values() for f in e.files]
    files += [f for p in state.patches.values() for f in p.overlay_files]
    for f in files:
        if not blobs.has(f.digest):
            problems.append(f"blob for {f.name} ({f.digest}) is missing")
    return problems
