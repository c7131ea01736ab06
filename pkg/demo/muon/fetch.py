"""Get-input stand-in: download each missing input from the URL in ``source.url``.

``source.url`` is published as a second file of the get-input application,
since a get-input run receives only its application's files.  Files are
written into the worker's data directory (``LOCFLOW_DATA_DIR``) through a
temporary name, so a half-written file is never advertised.
"""

import os
import urllib.error
import urllib.request
from pathlib import Path


def main():
    base = Path("source.url").read_text().strip().rstrip("/")
    data_dir = Path(os.environ["LOCFLOW_DATA_DIR"])
    missing = 0
    for name in filter(None, os.environ.get("LOCFLOW_INPUTS", "").split(",")):
        try:
            with urllib.request.urlopen(f"{base}/{name}", timeout=10) as resp:
                data = resp.read()
        except (urllib.error.URLError, OSError):
            missing += 1
            continue
        tmp = data_dir / f".{name}.tmp"
        tmp.write_bytes(data)
        os.replace(tmp, data_dir / name)
    raise SystemExit(1 if missing else 0)


if __name__ == "__main__":
    main()
