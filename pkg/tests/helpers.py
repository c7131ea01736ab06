"""Small builders shared by the scheduler-level tests."""

from __future__ import annotations

from locflow.model import AppFile, ApplicationSpec, EnvironmentBundle, FileId, FileTemplate, Workunit
from locflow.protocol import Hardware, InventoryAnswer, ResultUpload, OutputPayload, UploadStatus, WorkRequest
from locflow.scheduler import Scheduler, SchedulerPolicy

HW = Hardware(cpu_count=1, benchmark_gflops=2.0, memory_mb=1024, disk_mb=1024)


def fid(name: str, data: bytes | None = None) -> FileId:
    return FileId.of(name, name.encode() if data is None else data)


def app(app_id: str = "app", mem: int = 0, disk: int = 0) -> ApplicationSpec:
    return ApplicationSpec(app_id, 1, (AppFile(fid(f"{app_id}.py"), b"sig", entry=True),), mem, disk)


def world(policy: SchedulerPolicy | None = None, apps=("app", "getter")) -> Scheduler:
    s = Scheduler(policy=policy or SchedulerPolicy(wait_window_secs=10, backoff_secs=5))
    for a in apps:
        s.add_application(app(a))
    s.add_environment(EnvironmentBundle("env", "app", (fid("opts.txt"),)))
    return s


def wu(wu_id: str, inputs=(), preds=(), out: str | None = None, get_input: str | None = None,
       **kw) -> Workunit:
    return Workunit(
        wu_id=wu_id, app_id=kw.pop("app_id", "app"), env_id="env",
        output_template=FileTemplate(out or f"{wu_id}.out"),
        required_inputs=list(inputs), predecessors=list(preds), get_input_app=get_input, **kw,
    )


def request(s: Scheduler, client_id: str, files=(), hw: Hardware = HW) -> WorkRequest:
    return WorkRequest(client_id, hw, [f if isinstance(f, FileId) else fid(f) for f in files])


def success(client_id: str, result_id: str, names, cpu: float = 1.0, size: int | None = None) -> ResultUpload:
    outs = []
    for n in names:
        data = n.encode() if size is None else b"x" * size
        outs.append(OutputPayload(FileId.of(n, data), data))
    return ResultUpload(client_id, result_id, UploadStatus.SUCCESS, cpu, outs)


def failure(client_id: str, result_id: str) -> ResultUpload:
    return ResultUpload(client_id, result_id, UploadStatus.ERROR, 0.5)


def answer(client_id: str, query, held) -> InventoryAnswer:
    return InventoryAnswer(client_id, list(query), list(held))
