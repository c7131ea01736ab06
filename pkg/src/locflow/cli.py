"""``locflow`` command line: submit, status, fetch, sim, server, worker, keygen.

Every command exits 0 on success and 1 on any error (2 for usage errors);
errors are printed to stderr as ``error: <code>: <message>``.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import time
from pathlib import Path

from . import __version__
from . import protocol as p
from . import server as server_mod
from . import signing
from . import worker as worker_mod
from .archive import extract, read_archive
from .errors import DigestMismatch, LocflowError
from .manifest import build_submission, load_manifest
from .model import sha256_hex
from .sim import DEFAULT_COSTS, SimConfig, emit_report, simulate

DEFAULT_SERVER = "127.0.0.1:7878"
WATCH_SECS = 5.0


def _call(args, message):
    return p.call(p.parse_address(args.server), message, timeout=args.timeout)


def _table(rows) -> str:
    return "".join("\t".join(str(c) for c in row) + "\n" for row in rows)


# ---------------------------------------------------------------------------
# submit / status / fetch


def cmd_submit(args, out) -> int:
    manifest = load_manifest(args.manifest)  # every local file is checked before any upload
    keypair = signing.load_keypair(args.key) if args.key else None
    apps, job = build_submission(manifest, keypair)
    for app in apps:
        _call(args, app)
    reply = _call(args, job)
    if args.format == "table":
        out.write(_table([("job", reply.job_id)] + [("workunit", w) for w in reply.wu_ids]))
    else:
        out.write(f"submitted {reply.job_id} ({len(reply.wu_ids)} workunits)\n")
        for w in reply.wu_ids:
            out.write(f"  {w}\n")
    return 0


def render_status(reply: p.StatusReply, fmt: str) -> str:
    if fmt == "table":
        rows = [("count", state, n) for state, n in reply.counts.items()]
        rows += [("workunit", w.wu_id, w.state, w.client_id or "-") for w in reply.workunits]
        rows += [("client", c.client_id, c.user_id, c.inventory_files, c.inventory_bytes) for c in reply.clients]
        rows += [("user", u.name, f"{u.credit:.3f}") for u in reply.users]
        rows += [("group", g.name, f"{g.credit:.3f}") for g in reply.groups]
        return _table(rows)
    total = sum(reply.counts.values())
    lines = [f"{total} workunits: " + ", ".join(f"{n} {s}" for s, n in reply.counts.items() if n)]
    for w in reply.workunits:
        lines.append(f"  {w.wu_id:<28} {w.state:<17} {w.client_id or ''}")
    if reply.clients:
        lines.append("clients:")
        for c in reply.clients:
            lines.append(f"  {c.client_id:<12} {c.user_id:<12} {c.inventory_files:>5} files {c.inventory_bytes:>12} bytes")
    if reply.users:
        lines.append("credit:")
        for u in reply.users:
            lines.append(f"  {u.name:<12} {u.credit:12.3f}")
    for g in reply.groups:
        lines.append(f"  group {g.name:<6} {g.credit:12.3f}")
    return "\n".join(lines) + "\n"


def cmd_status(args, out) -> int:
    while True:
        reply = _call(args, p.StatusRequest(args.job))
        out.write(render_status(reply, args.format))
        out.flush()
        if not args.watch or server_mod.job_finished(reply.counts):
            return 0
        time.sleep(args.interval)


def cmd_fetch(args, out) -> int:
    reply = _call(args, p.FetchRequest(args.job, include_all=args.all))
    if sha256_hex(reply.archive) != reply.digest:
        raise DigestMismatch("archive digest does not match the one the server announced")
    entries = read_archive(reply.archive)  # verifies every file digest
    Path(args.out).write_bytes(reply.archive)
    if args.extract:
        extract(entries, args.extract)
    if args.format == "table":
        out.write(_table([("archive", args.out, reply.digest)]
                         + [("file", e.wu_id, e.file.name, e.file.size_bytes, e.file.digest) for e in entries]))
    else:
        out.write(f"wrote {args.out}: {len(entries)} files, sha256 {reply.digest}\n")
    return 0


# ---------------------------------------------------------------------------
# sim


def _costs(text: str) -> dict[str, float]:
    costs = dict(DEFAULT_COSTS)
    for part in filter(None, text.split(",")):
        key, sep, value = part.partition("=")
        if not sep or key not in costs:
            raise argparse.ArgumentTypeError(f"expected stage=seconds with stage in {sorted(costs)}, got {part!r}")
        costs[key] = float(value)
    return costs


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def cmd_sim(args, out) -> int:
    reports = [
        simulate(SimConfig(n_clients=n, events=e, costs=args.cost, overhead=args.overhead, seed=args.seed,
                           poll_interval=args.poll_interval, replicate_outputs=args.replicate,
                           fetch_partitions=args.get_input))
        for e in args.events for n in args.clients
    ]
    table = emit_report(reports)
    if args.out:
        Path(args.out).write_text(table)
    else:
        out.write(table)
    return 0


# ---------------------------------------------------------------------------
# launchers


def cmd_server(args, out) -> int:
    def ready(address):
        out.write(f"listening on {address}\n")
        out.flush()

    server_mod.serve(server_mod.config_from_args(args), ready)
    return 0


def cmd_worker(args, out) -> int:
    worker_mod.main_loop(worker_mod.config_from_args(args))
    return 0


def cmd_keygen(args, out) -> int:
    path = Path(args.out)
    if path.exists() and not args.force:
        raise LocflowError(f"{path} exists; pass --force to overwrite")
    pub = signing.save_keypair(signing.generate(), path)
    out.write(f"private key {path}\npublic key  {pub}\n")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="locflow", description="Data-locality aware volunteer computing.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--server", default=os.environ.get("LOCFLOW_SERVER", DEFAULT_SERVER),
                        help=f"server address host:port (env LOCFLOW_SERVER, default {DEFAULT_SERVER})")
    parser.add_argument("--format", choices=("human", "table"), default="human",
                        help="output style; table is tab-separated and stable")
    parser.add_argument("--timeout", type=float, default=60.0, help="network timeout in seconds")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    # the global options are also accepted after the subcommand; SUPPRESS keeps the
    # subcommand from overwriting a value given before it
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--server", default=argparse.SUPPRESS, help=argparse.SUPPRESS)
    common.add_argument("--format", choices=("human", "table"), default=argparse.SUPPRESS, help=argparse.SUPPRESS)

    s = sub.add_parser("submit", parents=[common], help="publish applications and submit a job manifest")
    s.add_argument("manifest", type=Path)
    s.add_argument("--key", type=Path, default=os.environ.get("LOCFLOW_KEYPAIR"),
                   help="project private key for signing applications (env LOCFLOW_KEYPAIR)")
    s.set_defaults(func=cmd_submit)

    s = sub.add_parser("status", parents=[common], help="workunit states, client inventories and credit")
    s.add_argument("job", nargs="?", help="job id (default: everything)")
    s.add_argument("--watch", action="store_true", help=f"poll every {WATCH_SECS:g}s until the job is finished")
    s.add_argument("--interval", type=float, default=WATCH_SECS, help=argparse.SUPPRESS)
    s.set_defaults(func=cmd_status)

    s = sub.add_parser("fetch", parents=[common], help="download a finished job's outputs as one archive")
    s.add_argument("job")
    s.add_argument("--out", required=True, type=Path)
    s.add_argument("--all", action="store_true", help="include every workunit's outputs, not only final ones")
    s.add_argument("--extract", type=Path, help="also unpack the files into this directory")
    s.set_defaults(func=cmd_fetch)

    s = sub.add_parser("sim", help="simulate the Muon pipeline and print a CSV report")
    s.add_argument("--events", type=_int_list, default=[100], help="event counts, comma separated")
    s.add_argument("--clients", type=_int_list, default=[1, 2, 4, 8], help="client counts, comma separated")
    s.add_argument("--cost", type=_costs, default=dict(DEFAULT_COSTS),
                   help="per-event seconds, e.g. gen=1,sim=6,digi=2,reco=4")
    s.add_argument("--overhead", type=float, default=40.0, help="seconds per scheduler exchange")
    s.add_argument("--poll-interval", type=float, default=10.0)
    s.add_argument("--seed", type=int, default=0)
    mode = s.add_mutually_exclusive_group()
    mode.add_argument("--replicate", action="store_true", help="copy every output to all clients")
    mode.add_argument("--get-input", action="store_true", help="fetch generation partitions via get-input")
    s.add_argument("--out", type=Path, help="write the CSV here instead of stdout")
    s.set_defaults(func=cmd_sim)

    s = sub.add_parser("server", help="run the scheduling and data server")
    server_mod.add_arguments(s)
    s.set_defaults(func=cmd_server)

    s = sub.add_parser("worker", parents=[common], help="run a worker against --server")
    worker_mod.add_arguments(s)
    s.set_defaults(func=cmd_worker)

    s = sub.add_parser("keygen", help="create a project signing keypair")
    s.add_argument("--out", type=Path, default=Path("project.key"))
    s.add_argument("--force", action="store_true")
    s.set_defaults(func=cmd_keygen)
    return parser


def main(argv: list[str] | None = None, out=None) -> int:
    out = out or sys.stdout
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return args.func(args, out)
    except LocflowError as exc:
        print(f"error: {exc.code}: {exc.message}", file=sys.stderr)
    except (OSError, ValueError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
    return 1


if __name__ == "__main__":
    sys.exit(main())
