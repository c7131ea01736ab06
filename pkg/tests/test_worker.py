import functools
import http.server
import subprocess
import threading
import time
from pathlib import Path

import pytest

from locflow import protocol as p
from locflow import signing
from locflow.errors import BadSignature, DigestMismatch, MissingBlob, UnreadableDirectory
from locflow.model import AppFile, ApplicationSpec, EnvironmentBundle, FileId, FileTemplate
from locflow.scheduler import SchedulerPolicy
from locflow.server import Server, Service
from locflow.worker import (
    BlobCache,
    TransferLog,
    Worker,
    WorkerConfig,
    build_sandbox,
    execute,
    run_get_input,
    scan_inventory,
)

DEMO = Path(__file__).resolve().parents[1] / "demo" / "muon"


def sha256sum(path):
    # an independent digest: coreutils rather than hashlib
    return subprocess.run(["sha256sum", str(path)], capture_output=True, text=True, check=True).stdout.split()[0]


@pytest.fixture
def keypair():
    return signing.generate()


@pytest.fixture
def cache(tmp_path):
    return BlobCache(tmp_path / "cache")


def entry(cache, name, data, purpose, keypair=None, is_entry=False):
    f = FileId.of(name, data)
    cache.put(f, data)
    sig = keypair.sign(data) if purpose is p.Purpose.APP else None
    return p.ManifestEntry(f, purpose, sig, is_entry)


SCRIPT = b"""
import os, pathlib
opts = pathlib.Path("opts.txt").read_text()
pathlib.Path(os.environ["LOCFLOW_OUTPUT_NAME"]).write_text(opts)
"""


def app_manifest(cache, keypair, script=SCRIPT, env=b"v1", patch=None):
    m = [entry(cache, "run.py", script, p.Purpose.APP, keypair, True),
         entry(cache, "opts.txt", env, p.Purpose.ENV)]
    if patch is not None:
        m.append(entry(cache, "opts.txt", patch, p.Purpose.PATCH))
    return m


# -- inventory -----------------------------------------------------------------


def test_scan_inventory(tmp_path):
    assert scan_inventory(tmp_path) == set()
    (tmp_path / "a.dat").write_bytes(b"known bytes")
    (tmp_path / ".hidden").write_bytes(b"x")
    (tmp_path / "partial.tmp").write_bytes(b"x")
    (tmp_path / "sub").mkdir()
    (found,) = scan_inventory(tmp_path)
    assert (found.name, found.digest, found.size_bytes) == ("a.dat", sha256sum(tmp_path / "a.dat"), 11)
    (tmp_path / "a.dat").write_bytes(b"known bytez")
    (changed,) = scan_inventory(tmp_path)
    assert changed.digest != found.digest and changed.digest == sha256sum(tmp_path / "a.dat")


def test_scan_missing_directory(tmp_path):
    with pytest.raises(UnreadableDirectory):
        scan_inventory(tmp_path / "missing")


def test_cache_rejects_wrong_bytes(cache):
    f = FileId.of("x", b"right")
    with pytest.raises(DigestMismatch):
        cache.put(f, b"wrong")
    with pytest.raises(MissingBlob):
        cache.get(f)
    cache.put(f, b"right")
    cache.path(f.digest).write_bytes(b"rotten")
    assert not cache.has(f)


def test_transfer_log_round_trip(tmp_path):
    log = TransferLog(tmp_path / "t.log")
    assert log.entries() == []
    log.record("down", "APP", "run.py", 10)
    log.record("up", "OUTPUT", "a.out", 3)
    assert [e[:4] for e in log.entries()] == [("down", "APP", "run.py", 10), ("up", "OUTPUT", "a.out", 3)]


# -- sandbox -------------------------------------------------------------------


def test_patch_shadows_environment(tmp_path, cache, keypair):
    sb = build_sandbox(tmp_path / "sb", app_manifest(cache, keypair, patch=b"v2"), cache, keypair.public_bytes)
    assert (sb.root / "opts.txt").read_bytes() == b"v2"
    assert sb.sources == {"opts.txt": "patch", "run.py": "app"}
    run = execute(sb, FileTemplate("out.txt", 0), timeout=30)
    assert run.status is p.UploadStatus.SUCCESS
    assert [o.read_bytes() for o in run.outputs] == [b"v2"]


def test_without_patch_environment_is_used(tmp_path, cache, keypair):
    sb = build_sandbox(tmp_path / "sb", app_manifest(cache, keypair), cache, keypair.public_bytes)
    assert (sb.root / "opts.txt").read_bytes() == b"v1"


def test_patch_cannot_shadow_app_code(tmp_path, cache, keypair):
    m = app_manifest(cache, keypair) + [entry(cache, "run.py", b"raise SystemExit(3)", p.Purpose.PATCH)]
    sb = build_sandbox(tmp_path / "sb", m, cache, keypair.public_bytes)
    assert (sb.root / "run.py").read_bytes() == SCRIPT


def test_missing_blob(tmp_path, cache, keypair):
    m = app_manifest(cache, keypair)
    cache.path(m[1].file.digest).unlink()
    with pytest.raises(MissingBlob):
        build_sandbox(tmp_path / "sb", m, cache, keypair.public_bytes)


def test_bad_signature(tmp_path, cache, keypair):
    m = app_manifest(cache, keypair)
    with pytest.raises(BadSignature):
        build_sandbox(tmp_path / "sb", m, cache, signing.generate().public_bytes)
    forged = p.ManifestEntry(m[0].file, p.Purpose.APP, keypair.sign(b"something else"), True)
    with pytest.raises(BadSignature):
        build_sandbox(tmp_path / "sb", [forged, m[1]], cache, keypair.public_bytes)


def tree(root):
    return {(q.relative_to(root).as_posix(), q.stat().st_mode, q.read_bytes())
            for q in sorted(root.rglob("*")) if q.is_file()}


def test_sandbox_is_deterministic(tmp_path, cache, keypair):
    m = app_manifest(cache, keypair, patch=b"v2")
    (tmp_path / "in.dat").write_bytes(b"input")
    inputs = {"in.dat": tmp_path / "in.dat"}
    a = build_sandbox(tmp_path / "a", m, cache, keypair.public_bytes, inputs)
    b = build_sandbox(tmp_path / "b", list(reversed(m)), cache, keypair.public_bytes, inputs)
    assert tree(a.root) == tree(b.root)
    # inputs are linked from the data directory, not copied over the network
    assert (a.root / "in.dat").stat().st_ino == (tmp_path / "in.dat").stat().st_ino


# -- execution -----------------------------------------------------------------


def sandbox_for(tmp_path, cache, keypair, script):
    return build_sandbox(tmp_path / "sb", app_manifest(cache, keypair, script), cache, keypair.public_bytes)


def test_nonzero_exit_is_error(tmp_path, cache, keypair):
    sb = sandbox_for(tmp_path, cache, keypair, b"raise SystemExit(2)")
    run = execute(sb, FileTemplate("out.txt", 0), timeout=30)
    assert run.status is p.UploadStatus.ERROR and "2" in run.reason


def test_missing_output_is_error(tmp_path, cache, keypair):
    sb = sandbox_for(tmp_path, cache, keypair, b"open('other.txt', 'w').write('x')")
    assert execute(sb, FileTemplate("out.txt", 0), timeout=30).status is p.UploadStatus.ERROR


def test_timeout_kills_the_job(tmp_path, cache, keypair):
    sb = sandbox_for(tmp_path, cache, keypair, b"import time\ntime.sleep(60)")
    start = time.monotonic()
    run = execute(sb, FileTemplate("out.txt", 0), timeout=0.5)
    assert time.monotonic() - start < 10
    assert run.status is p.UploadStatus.ERROR and "killed" in run.reason


def test_cpu_time_is_measured(tmp_path, cache, keypair):
    script = b"""
import os, time
end = time.process_time() + 0.3
while time.process_time() < end:
    pass
open(os.environ["LOCFLOW_OUTPUT_NAME"], "w").write("done")
"""
    run = execute(sandbox_for(tmp_path, cache, keypair, script), FileTemplate("out.txt", 0), timeout=30)
    assert run.status is p.UploadStatus.SUCCESS
    assert run.cpu_seconds >= 0.25


def test_unbound_output_collects_every_partition(tmp_path, cache, keypair):
    script = b"""
import os
for i in range(3):
    open(os.environ["LOCFLOW_OUTPUT"].replace("{index}", str(i)), "w").write(str(i))
"""
    run = execute(sandbox_for(tmp_path, cache, keypair, script), FileTemplate("p{index}.dat"), timeout=30)
    assert [o.name for o in run.outputs] == ["p0.dat", "p1.dat", "p2.dat"]


# -- get-input -----------------------------------------------------------------


@pytest.fixture
def http_dir(tmp_path):
    root = tmp_path / "www"
    root.mkdir()
    handler = functools.partial(http.server.SimpleHTTPRequestHandler, directory=str(root))
    handler.log_message = lambda *a: None
    httpd = http.server.ThreadingHTTPServer(("127.0.0.1", 0), handler)
    threading.Thread(target=httpd.serve_forever, daemon=True).start()
    yield root, f"http://127.0.0.1:{httpd.server_address[1]}"
    httpd.shutdown()


def fetch_sandbox(tmp_path, cache, keypair, url):
    m = [entry(cache, "fetch.py", (DEMO / "fetch.py").read_bytes(), p.Purpose.APP, keypair, True),
         entry(cache, "source.url", url.encode(), p.Purpose.ENV)]
    return build_sandbox(tmp_path / "fetch-sb", m, cache, keypair.public_bytes)


def test_get_input_downloads_into_data_dir(tmp_path, cache, keypair, http_dir):
    www, url = http_dir
    (www / "gen.part3.dat").write_bytes(b"partition three")
    data = tmp_path / "data"
    data.mkdir()
    (data / "already.dat").write_bytes(b"old")
    run, fresh = run_get_input(fetch_sandbox(tmp_path, cache, keypair, url), data, ["gen.part3.dat"], 30)
    assert run.status is p.UploadStatus.SUCCESS
    assert fresh == [FileId.of("gen.part3.dat", b"partition three")]


def test_get_input_failure(tmp_path, cache, keypair, http_dir):
    _, url = http_dir
    data = tmp_path / "data"
    data.mkdir()
    run, fresh = run_get_input(fetch_sandbox(tmp_path, cache, keypair, url), data, ["absent.dat"], 30)
    assert run.status is p.UploadStatus.ERROR and fresh == []


# -- daemon against an in-process server ---------------------------------------


def publish_and_submit(service, keypair, specs, inputs=()):
    app = p.SubmitApplication(
        ApplicationSpec("tool", 1, (AppFile(FileId.of("run.py", SCRIPT), keypair.sign(SCRIPT), True),)),
        [SCRIPT])
    assert not isinstance(service.handle(app), p.ErrorReply)
    env = EnvironmentBundle("env", "tool", (FileId.of("opts.txt", b"v1"),))
    reply = service.handle(p.SubmitJob("j", specs, [env], [], [b"v1"]))
    assert not isinstance(reply, p.ErrorReply), reply
    return reply


def make_worker(tmp_path, keypair, address, name="w", **kw):
    pub = signing.save_keypair(keypair, tmp_path / "project.key")
    cfg = WorkerConfig(address, tmp_path / name / "data", tmp_path / name / "work", pub, **kw)
    return Worker(cfg)


def test_worker_runs_job_and_keeps_inputs_local(tmp_path, keypair):
    policy = SchedulerPolicy(wait_window_secs=60, backoff_secs=1, client_timeout_secs=60)
    service = Service(tmp_path / "srv", keypair, policy)
    specs = [p.WorkunitSpec("a", "tool", "env", FileTemplate("a.out", 0)),
             p.WorkunitSpec("b", "tool", "env", FileTemplate("b.out", 0), required_inputs=["a.out"],
                            predecessors=["a"])]
    publish_and_submit(service, keypair, specs)
    with Server(service, "127.0.0.1:0", tick_secs=0.1) as srv:
        w = make_worker(tmp_path, keypair, srv.address, max_backoff=0.2)
        w.register()
        for _ in range(20):
            w.step()
            states = {x.state.value for x in service.scheduler.state.workunits.values()}
            if states == {"DONE"}:
                break
        assert states == {"DONE"}
        assert (w.data_dir / "a.out").read_bytes() == b"v1"
        entries = w.transfers.entries()
        assert {e[1] for e in entries} <= {"APP", "ENV", "PATCH", "OUTPUT"}
        assert not any(e[0] == "down" and e[2] == "a.out" for e in entries)
        assert [e[2] for e in entries if e[0] == "up"] == ["a.out", "b.out"]
        # the cache means a second step does not download the app again
        assert sum(1 for e in entries if e[2] == "run.py") == 1
    service.close()


def test_worker_keeps_identity(tmp_path, keypair):
    service = Service(tmp_path / "srv", keypair)
    with Server(service, "127.0.0.1:0", tick_secs=0.1) as srv:
        first = make_worker(tmp_path, keypair, srv.address).register()
        assert make_worker(tmp_path, keypair, srv.address).register() == first
        assert make_worker(tmp_path, keypair, srv.address, name="other").register() != first
    service.close()


def test_worker_retries_until_server_appears(tmp_path, keypair):
    server = Server(Service(tmp_path / "srv", keypair), "127.0.0.1:0", tick_secs=0.1)
    address = server.address
    server.stop()  # the port is now closed
    w = make_worker(tmp_path, keypair, address, max_backoff=0.2)
    t = threading.Thread(target=w.run, daemon=True)
    t.start()
    time.sleep(0.5)
    assert w.client_id is None and w._failures >= 1
    host, port = p.parse_address(address)
    with Server(Service(tmp_path / "srv", keypair), f"{host}:{port}", tick_secs=0.1):
        for _ in range(50):
            if w.client_id:
                break
            time.sleep(0.1)
        assert w.client_id == "client-1"
        w.stop.set()
        t.join(5)
