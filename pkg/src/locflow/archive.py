"""Deterministic uncompressed archive for a job's output files.

Layout (all integers big-endian)::

    offset  size  field
    0       4     magic "LFAR"
    4       2     format version (1)
    6       2     reserved, zero
    8       4     number of files N
    12      8     manifest length M in bytes
    20      M     manifest: canonical JSON array of N entries
    20+M    ...   file contents, concatenated in manifest order

Each manifest entry is ``{"digest", "name", "offset", "size", "wu_id"}``
with ``offset`` counted from the first byte after the manifest.  Entries are
ordered by workunit submission order, then file name, so aggregating the
same results twice yields identical bytes.
"""

from __future__ import annotations

import json
import struct
from collections.abc import Callable, Iterable
from dataclasses import dataclass
from pathlib import Path

from .errors import Conflict, DigestMismatch, JobIncomplete, MalformedMessage
from .model import FileId, WorkunitState, check_name, sha256_hex

MAGIC = b"LFAR"
VERSION = 1
HEADER = struct.Struct(">4sHHIQ")


@dataclass(frozen=True)
class ArchiveEntry:
    wu_id: str
    file: FileId
    data: bytes


def pack_archive(entries: Iterable[tuple[str, FileId, bytes]]) -> bytes:
    manifest, chunks, offset = [], [], 0
    for wu_id, f, data in entries:
        if len(data) != f.size_bytes or sha256_hex(data) != f.digest:
            raise DigestMismatch(f"content of {f.name} does not match its FileId", name=f.name)
        manifest.append({"digest": f.digest, "name": f.name, "offset": offset, "size": f.size_bytes,
                         "wu_id": wu_id})
        chunks.append(data)
        offset += len(data)
    body = json.dumps(manifest, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode()
    return HEADER.pack(MAGIC, VERSION, 0, len(manifest), len(body)) + body + b"".join(chunks)


def read_archive(blob: bytes) -> list[ArchiveEntry]:
    """Parse and verify every file digest; structural damage raises MalformedMessage."""
    if len(blob) < HEADER.size:
        raise MalformedMessage(len(blob), "archive shorter than its header")
    magic, version, _, count, mlen = HEADER.unpack_from(blob)
    if magic != MAGIC or version != VERSION:
        raise MalformedMessage(0, "not a version 1 archive")
    start = HEADER.size + mlen
    if start > len(blob):
        raise MalformedMessage(HEADER.size, "manifest runs past end of archive")
    try:
        manifest = json.loads(blob[HEADER.size:start].decode("utf-8"))
        items = [(e["wu_id"], e["name"], e["digest"], int(e["size"]), int(e["offset"])) for e in manifest]
    except (ValueError, KeyError, TypeError) as exc:
        raise MalformedMessage(HEADER.size, f"bad manifest: {exc}") from None
    if len(items) != count:
        raise MalformedMessage(8, f"header says {count} files, manifest lists {len(items)}")
    out, expected_offset = [], 0
    for wu_id, name, digest, size, offset in items:
        if offset != expected_offset or start + offset + size > len(blob):
            raise MalformedMessage(start + offset, f"entry {name} is out of bounds")
        data = blob[start + offset:start + offset + size]
        if sha256_hex(data) != digest:
            raise DigestMismatch(f"archived {name} does not match its manifest digest", name=name)
        out.append(ArchiveEntry(wu_id, FileId(name, digest, size), data))
        expected_offset += size
    if start + expected_offset != len(blob):
        raise MalformedMessage(start + expected_offset, "trailing bytes after last file")
    return out


def aggregate_results(scheduler, wu_ids: list[str], fetch: Callable[[str], bytes]) -> bytes:
    """Archive the outputs of the listed workunits; every one must be DONE."""
    wus = scheduler.state.workunits
    unfinished = [w for w in wu_ids if wus[w].state is not WorkunitState.DONE]
    if unfinished:
        raise JobIncomplete(unfinished)
    entries = []
    for wu in sorted((wus[w] for w in wu_ids), key=lambda w: w.submit_seq):
        res = scheduler.successful_result(wu.wu_id)
        for f in sorted(res.output_files, key=lambda f: f.name):
            entries.append((wu.wu_id, f, fetch(f.digest)))
    return pack_archive(entries)


def extract(entries: list[ArchiveEntry], dest: str | Path) -> list[Path]:
    names = [e.file.name for e in entries]
    dup = next((n for n in names if names.count(n) > 1), None)
    if dup is not None:
        raise Conflict(f"two archived files are named {dup}; unpack the archive by workunit instead")
    dest = Path(dest)
    dest.mkdir(parents=True, exist_ok=True)
    written = []
    for e in entries:
        check_name(e.file.name)
        path = dest / e.file.name
        path.write_bytes(e.data)
        written.append(path)
    return written
