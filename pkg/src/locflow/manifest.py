"""Job manifests: the YAML file handed to ``locflow submit``.

A manifest names the applications to (re)publish, the environment bundles
and patches the job uses, and a list of stages that expand into workunits::

    job: muon-e100
    applications:
      - id: muon-stage
        version: 1
        entry: stage.py
        files: [stage.py]
    environments:
      - id: muon-sim-env
        app: muon-stage
        files: [env/sim/stage.opts]
    patches:
      - id: muon-sim-events-10
        env: muon-sim-env
        files: [patches/sim-10/events.opts]
    stages:
      - name: sim
        count: 10
        app: muon-stage
        env: muon-sim-env
        patch: muon-sim-events-10
        after: gen
        inputs: ["gen.part{index}.dat"]
        output: "sim.part{index}.dat"

File paths are relative to the manifest and are shipped under their base
name unless written as ``{path: ..., name: ...}``.  A stage with ``count: N``
yields workunits ``<name>-0`` .. ``<name>-(N-1)`` (just ``<name>`` when N is
1); ``{index}`` in its input and output patterns is the workunit's index.
Dependencies declared with ``after`` are matched index to index when both
stages have the same count, fan out from a single-workunit stage, or fan in
to a single-workunit stage.  The complete grammar is in ``docs/manifest.md``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import yaml

from . import protocol as p
from .errors import ManifestError
from .model import AppFile, ApplicationSpec, EnvironmentBundle, FileId, FileTemplate, Patch, check_name
from .signing import Keypair

STAGE_KEYS = {"name", "count", "app", "env", "patch", "after", "inputs", "output", "bind_output",
              "get_input_app", "max_result_size_bytes", "deadline_secs", "max_retries"}


@dataclass
class LocalFile:
    name: str
    path: Path

    def read(self) -> bytes:
        return self.path.read_bytes()


@dataclass
class AppDecl:
    app_id: str
    version: int
    entry: str
    files: list[LocalFile]
    min_memory_mb: int = 0
    min_disk_mb: int = 0


@dataclass
class BundleDecl:
    bundle_id: str
    parent: str  # application id for environments, environment id for patches
    files: list[LocalFile]


@dataclass
class Manifest:
    job: str
    applications: list[AppDecl] = field(default_factory=list)
    environments: list[BundleDecl] = field(default_factory=list)
    patches: list[BundleDecl] = field(default_factory=list)
    workunits: list[p.WorkunitSpec] = field(default_factory=list)


def _fail(where: str, msg: str):
    raise ManifestError(f"{where}: {msg}", where=where)


def _mapping(obj, where: str, allowed: set[str], required: set[str]) -> dict:
    if not isinstance(obj, dict):
        _fail(where, "expected a mapping")
    unknown = set(obj) - allowed
    if unknown:
        _fail(where, f"unknown key(s) {', '.join(sorted(map(str, unknown)))}")
    missing = required - set(obj)
    if missing:
        _fail(where, f"missing key(s) {', '.join(sorted(missing))}")
    return obj


def _str(obj, where: str) -> str:
    if not isinstance(obj, str) or not obj:
        _fail(where, "expected a non-empty string")
    return obj


def _int(obj, where: str, minimum: int = 0) -> int:
    if isinstance(obj, bool) or not isinstance(obj, int) or obj < minimum:
        _fail(where, f"expected an integer >= {minimum}")
    return obj


def _files(raw, where: str, base: Path) -> list[LocalFile]:
    if raw is None:
        return []
    if not isinstance(raw, list):
        _fail(where, "expected a list of files")
    out = []
    for i, item in enumerate(raw):
        w = f"{where}[{i}]"
        if isinstance(item, str):
            rel, name = item, Path(item).name
        else:
            item = _mapping(item, w, {"path", "name"}, {"path"})
            rel = _str(item["path"], w + ".path")
            name = _str(item.get("name", Path(rel).name), w + ".name")
        path = (base / rel).resolve()
        if not path.is_file():
            _fail(w, f"file {path} does not exist")
        try:
            check_name(name)
        except ValueError as exc:
            _fail(w, str(exc))
        out.append(LocalFile(name, path))
    names = [f.name for f in out]
    if len(set(names)) != len(names):
        _fail(where, "two files share a name")
    return out


def _string_list(raw, where: str) -> list[str]:
    if raw is None:
        return []
    if isinstance(raw, str):
        return [raw]
    if not isinstance(raw, list):
        _fail(where, "expected a string or list of strings")
    return [_str(x, f"{where}[{i}]") for i, x in enumerate(raw)]


def load_manifest(path: str | Path) -> Manifest:
    """Parse and check a manifest, including that every referenced file exists."""
    path = Path(path)
    try:
        doc = yaml.safe_load(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ManifestError(f"cannot read {path}: {exc.strerror or exc}") from None
    except yaml.YAMLError as exc:
        raise ManifestError(f"{path} is not valid YAML: {exc}") from None
    return parse_manifest(doc, path.parent)


def parse_manifest(doc, base: Path) -> Manifest:
    doc = _mapping(doc, "manifest", {"job", "applications", "environments", "patches", "stages"},
                   {"job", "stages"})
    m = Manifest(_str(doc["job"], "job"))
    for i, raw in enumerate(doc.get("applications") or []):
        w = f"applications[{i}]"
        raw = _mapping(raw, w, {"id", "version", "entry", "files", "min_memory_mb", "min_disk_mb"},
                       {"id", "entry", "files"})
        files = _files(raw["files"], w + ".files", base)
        entry = _str(raw["entry"], w + ".entry")
        if entry not in {f.name for f in files}:
            _fail(w, f"entry {entry} is not one of the files")
        m.applications.append(AppDecl(_str(raw["id"], w + ".id"), _int(raw.get("version", 1), w + ".version", 1),
                                      entry, files, _int(raw.get("min_memory_mb", 0), w),
                                      _int(raw.get("min_disk_mb", 0), w)))
    for key, target, parent in (("environments", m.environments, "app"), ("patches", m.patches, "env")):
        for i, raw in enumerate(doc.get(key) or []):
            w = f"{key}[{i}]"
            raw = _mapping(raw, w, {"id", parent, "files"}, {"id", parent})
            target.append(BundleDecl(_str(raw["id"], w + ".id"), _str(raw[parent], f"{w}.{parent}"),
                                     _files(raw.get("files"), w + ".files", base)))
    m.workunits = expand_stages(doc["stages"])
    return m


def expand_stages(stages) -> list[p.WorkunitSpec]:
    if not isinstance(stages, list) or not stages:
        _fail("stages", "expected a non-empty list")
    counts: dict[str, int] = {}
    specs = []
    for si, raw in enumerate(stages):
        w = f"stages[{si}]"
        raw = _mapping(raw, w, STAGE_KEYS, {"name", "app", "env", "output"})
        name = _str(raw["name"], w + ".name")
        if name in counts:
            _fail(w, f"stage {name} is declared twice")
        count = _int(raw.get("count", 1), w + ".count", 1)
        bind = raw.get("bind_output", count > 1)
        if not isinstance(bind, bool):
            _fail(w + ".bind_output", "expected true or false")
        keys = [name] if count == 1 else [f"{name}-{i}" for i in range(count)]

        after = _string_list(raw.get("after"), w + ".after")
        preds_of: list[list[str]] = [[] for _ in range(count)]
        for prev in after:
            if prev not in counts:
                _fail(w + ".after", f"stage {prev} is not declared before {name}")
            pc = counts[prev]
            prev_keys = [prev] if pc == 1 else [f"{prev}-{i}" for i in range(pc)]
            for i in range(count):
                if pc == count:
                    preds_of[i].append(prev_keys[i])
                elif pc == 1:
                    preds_of[i].append(prev_keys[0])
                elif count == 1:
                    preds_of[i].extend(prev_keys)
                else:
                    _fail(w + ".after", f"cannot match {count} workunits to {pc} of stage {prev}")
        counts[name] = count

        inputs = _string_list(raw.get("inputs"), w + ".inputs")
        output = _str(raw["output"], w + ".output")
        limits = {}
        for k in ("max_result_size_bytes", "deadline_secs", "max_retries"):
            if k in raw:
                limits[k] = _int(raw[k], f"{w}.{k}", 0 if k == "max_retries" else 1)
        try:
            for i, key in enumerate(keys):
                specs.append(p.WorkunitSpec(
                    key, _str(raw["app"], w + ".app"), _str(raw["env"], w + ".env"),
                    FileTemplate(output, i if bind else None),
                    patch_id=raw.get("patch"),
                    required_inputs=[FileTemplate(t, i).expected for t in inputs],
                    get_input_app=raw.get("get_input_app"),
                    predecessors=preds_of[i],
                    **limits,
                ))
        except ValueError as exc:
            _fail(w, str(exc))
    return specs


def build_submission(m: Manifest, keypair: Keypair | None) -> tuple[list[p.SubmitApplication], p.SubmitJob]:
    """Messages for publishing the manifest's applications and then submitting the job."""
    apps = []
    for a in m.applications:
        if keypair is None:
            raise ManifestError(f"application {a.app_id} must be signed: pass the project key")
        files, blobs = [], []
        for f in a.files:
            data = f.read()
            files.append(AppFile(FileId.of(f.name, data), keypair.sign(data), f.name == a.entry))
            blobs.append(data)
        apps.append(p.SubmitApplication(ApplicationSpec(a.app_id, a.version, tuple(files), a.min_memory_mb,
                                                        a.min_disk_mb), blobs))
    blobs: dict[str, bytes] = {}

    def bundle(decl: BundleDecl) -> tuple[FileId, ...]:
        ids = []
        for f in decl.files:
            data = f.read()
            fid = FileId.of(f.name, data)
            blobs[fid.digest] = data
            ids.append(fid)
        return tuple(ids)

    envs = [EnvironmentBundle(e.bundle_id, e.parent, bundle(e)) for e in m.environments]
    patches = [Patch(pt.bundle_id, pt.parent, bundle(pt)) for pt in m.patches]
    job = p.SubmitJob(m.job, m.workunits, envs, patches, [blobs[d] for d in sorted(blobs)])
    return apps, job
