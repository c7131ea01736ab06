"""The four-stage Muon pipeline: generation, simulation, digitization, reconstruction.

Generation processes all ``e`` events once and writes ten partitions; each
later stage runs ten workunits of ``e/10`` events, partition ``i`` depending
on partition ``i`` of the stage before it.  The number of events a workunit
processes is carried by its patch (``muon-<stage>-events-<k>``), the same way a job-options
overlay would select it for a real physics executable.
"""

from __future__ import annotations

from .errors import InvalidEventCount
from .model import FileTemplate, Workunit

STAGES = ("gen", "sim", "digi", "reco")
PARTITIONS = 10


def stage_of(wu_id: str) -> str:
    return wu_id.split("-", 1)[0]


def events_of(patch_id: str | None) -> int:
    head, sep, count = (patch_id or "").rpartition("-events-")
    if not sep or not count.isdigit():
        raise ValueError(f"patch {patch_id!r} does not select an event count")
    return int(count)


def output_name(stage: str, index: int) -> str:
    return f"{stage}.part{index}.dat"


def build_muon_pipeline(e: int, *, get_input_app: str | None = None, deadline_secs: int = 3600,
                        max_retries: int = 2, max_result_size_bytes: int = 1 << 30) -> list[Workunit]:
    """31 workunits: 1 generation plus 10 each of simulation, digitization, reconstruction.

    ``get_input_app`` is attached to the simulation workunits only, whose
    inputs are the generation partitions.
    """
    if not isinstance(e, int) or e < PARTITIONS or e % PARTITIONS:
        raise InvalidEventCount(f"event count must be a positive multiple of {PARTITIONS}, got {e!r}")
    per = e // PARTITIONS
    common = dict(deadline_secs=deadline_secs, max_retries=max_retries,
                  max_result_size_bytes=max_result_size_bytes)
    wus = [Workunit("gen", "muon-gen", "muon-gen-env", FileTemplate("gen.part{index}.dat"),
                    patch_id=f"muon-gen-events-{e}", **common)]
    for prev, stage in zip(STAGES, STAGES[1:]):
        for i in range(PARTITIONS):
            wus.append(Workunit(
                f"{stage}-{i}", f"muon-{stage}", f"muon-{stage}-env",
                FileTemplate(f"{stage}.part{{index}}.dat", i),
                patch_id=f"muon-{stage}-events-{per}",
                required_inputs=[output_name(prev, i)],
                predecessors=["gen" if prev == "gen" else f"{prev}-{i}"],
                get_input_app=get_input_app if stage == "sim" else None,
                **common,
            ))
    return wus
