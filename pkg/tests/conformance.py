"""Canonical example messages whose framed encodings are frozen under fixtures/protocol.

Run ``python tests/conformance.py`` to (re)write the fixture files and print
the hex dumps used in PROTOCOL.md.
"""

from __future__ import annotations

import sys
from pathlib import Path

from locflow.model import FileId, FileTemplate
from locflow.protocol import (
    Ack,
    DownloadRequest,
    ErrorReply,
    Hardware,
    InventoryAnswer,
    InventoryQuery,
    ManifestEntry,
    OutputPayload,
    Purpose,
    Register,
    ReplyKind,
    ResultUpload,
    UploadStatus,
    WorkReply,
    WorkRequest,
    pack,
)

FIXTURES = Path(__file__).parent / "fixtures" / "protocol"

_gen = FileId.of("gen.part0.dat", b"muon")
_app = FileId.of("sim.py", b"print('sim')\n")
_opts = FileId.of("opts.json", b'{"events": 10}')

MESSAGES = {
    "register": Register("alice", Hardware(2, 1.5, 2048, 10000), group_id="lisbon"),
    "work_request_empty": WorkRequest("client-1", Hardware(1, 1.0, 512, 1000), []),
    "work_request": WorkRequest("client-1", Hardware(1, 1.0, 512, 1000), [_gen]),
    "no_work": WorkReply(ReplyKind.NO_WORK, backoff_secs=60),
    "assignment": WorkReply(
        ReplyKind.ASSIGNMENT, result_id="result-7", wu_id="muon:sim-0", deadline_at=3700.0,
        manifest=[ManifestEntry(_app, Purpose.APP, b"\x01" * 64, entry=True),
                  ManifestEntry(_opts, Purpose.ENV)],
        inputs=["gen.part0.dat"], output=FileTemplate("sim.part{index}.dat", 0),
        max_result_size_bytes=1048576,
    ),
    "inventory_query": InventoryQuery(["gen.part0.dat"]),
    "inventory_answer": InventoryAnswer("client-2", ["gen.part0.dat"], ["gen.part0.dat"]),
    "result_upload": ResultUpload(
        "client-1", "result-7", UploadStatus.SUCCESS, 0.25,
        [OutputPayload(FileId.of("sim.part0.dat", b"hits"), b"hits")],
    ),
    "ack": Ack(),
    "download_request": DownloadRequest(_app.digest, Purpose.APP, "client-1"),
    "error": ErrorReply("NotFound", "no blob"),
}


def write_fixtures() -> None:
    FIXTURES.mkdir(parents=True, exist_ok=True)
    for name, msg in MESSAGES.items():
        (FIXTURES / f"{name}.bin").write_bytes(pack(msg))


def hexdump(data: bytes) -> str:
    lines = []
    for off in range(0, len(data), 16):
        chunk = data[off:off + 16]
        hexpart = " ".join(f"{b:02x}" for b in chunk)
        text = "".join(chr(b) if 32 <= b < 127 else "." for b in chunk)
        lines.append(f"{off:08x}  {hexpart:<47}  {text}")
    return "\n".join(lines)


if __name__ == "__main__":
    write_fixtures()
    for name in sys.argv[1:]:
        print(f"--- {name}")
        print(hexdump(pack(MESSAGES[name])))
