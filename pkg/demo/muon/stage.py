"""Stand-in for one Muon processing stage.

The stage name comes from ``stage.opts`` (environment) and the event count
from ``events.opts`` (environment default, normally shadowed by a patch).
Optional knobs, also read from the sandbox when present:

    sleep.opts   seconds to sleep before writing output
    size.opts    exact size in bytes of every output file
    fail.opts    exit with this status instead of producing output

Output bytes depend only on the stage, event count and input bytes, so
reruns produce identical files.
"""

import hashlib
import os
import time
from pathlib import Path


def read(name, default=None):
    path = Path(name)
    return path.read_text().strip() if path.exists() else default


def payload(seed: bytes, size: int) -> bytes:
    out = bytearray()
    block = seed
    while len(out) < size:
        block = hashlib.sha256(block).digest()
        out += block.hex().encode()
    return bytes(out[:size])


def main():
    stage = read("stage.opts")
    events = int(read("events.opts", "1"))
    if read("fail.opts"):
        raise SystemExit(int(read("fail.opts")))
    time.sleep(float(read("sleep.opts", "0")))
    inputs = [n for n in os.environ.get("LOCFLOW_INPUTS", "").split(",") if n]
    seed = stage.encode() + str(events).encode() + b"".join(Path(n).read_bytes() for n in inputs)
    size = read("size.opts")
    name = os.environ.get("LOCFLOW_OUTPUT_NAME")
    if name is None:
        # one run covering all events, written as ten partitions
        pattern = os.environ["LOCFLOW_OUTPUT"]
        for i in range(10):
            part_size = int(size) if size else 64 * (events // 10)
            Path(pattern.replace("{index}", str(i))).write_bytes(payload(seed + bytes([i]), part_size))
    else:
        Path(name).write_bytes(payload(seed, int(size) if size else 64 * events))


if __name__ == "__main__":
    main()
