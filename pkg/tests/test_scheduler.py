import copy

import pytest

from locflow.errors import ResultNotInProgress, StaleProtocol, UnknownAssignment, UnknownClient, UnknownResult
from locflow.model import CreditLedger, ClientRecord, FileId, ResultState, WorkunitState as W, validate_trace
from locflow.protocol import Hardware, Purpose, ReplyKind, WorkRequest
from locflow.scheduler import Scheduler, SchedulerPolicy, grant_credit

from helpers import HW, answer, failure, fid, request, success, world, wu


def registered(s, *names):
    return [s.register(n, HW, client_id=n).client_id for n in names]


# --- handle_work_request --------------------------------------------------

def test_client_holding_input_gets_assignment():
    s = world()
    registered(s, "c1")
    s.submit([wu("sim0", inputs=["gen.part0.dat"])])
    reply = s.handle_work_request(request(s, "c1", ["gen.part0.dat"]))
    assert reply.kind is ReplyKind.ASSIGNMENT and reply.wu_id == "sim0"
    assert s.state.workunits["sim0"].state is W.ASSIGNED
    res = s.state.results[reply.result_id]
    assert res.deadline_at == res.assigned_at + s.state.workunits["sim0"].deadline_secs
    # inputs are never part of the download manifest
    assert "gen.part0.dat" not in {m.file.name for m in reply.manifest}
    assert {m.purpose for m in reply.manifest} == {Purpose.APP, Purpose.ENV}
    assert all(m.signature for m in reply.manifest if m.purpose is Purpose.APP)


def test_client_without_input_gets_no_work_and_timer_starts():
    s = world()
    registered(s, "c1")
    s.submit([wu("sim0", inputs=["gen.part0.dat"])])
    reply = s.handle_work_request(request(s, "c1"))
    assert reply.kind is ReplyKind.NO_WORK and reply.backoff_secs == 5
    assert s.state.workunits["sim0"].state is W.WAITING_FOR_DATA
    assert s.state.wait_timers["sim0"] == s.now + 10


def test_expired_wait_with_get_input_app_dispatches_get_input():
    s = world()
    registered(s, "c1")
    s.submit([wu("sim0", inputs=["gen.part0.dat"], get_input="getter")])
    s.handle_work_request(request(s, "c1"))
    s.advance(11)
    reply = s.handle_work_request(request(s, "c1"))
    assert reply.kind is ReplyKind.GET_INPUT_ASSIGNMENT and reply.wu_id == "sim0"
    assert reply.inputs == ["gen.part0.dat"]
    assert [m.file.name for m in reply.manifest] == ["getter.py"]
    # a second client does not get a duplicate get-input run
    registered(s, "c2")
    assert s.handle_work_request(request(s, "c2")).kind is ReplyKind.NO_WORK


def test_fifo_among_local_workunits():
    s = world()
    registered(s, "c1")
    s.submit([wu("b", inputs=["x"]), wu("a", inputs=["x"])])
    reply = s.handle_work_request(request(s, "c1", ["x"]))
    assert reply.wu_id == "b"  # smaller submit_seq, not name order


def test_dependency_blocks_assignment():
    s = world()
    registered(s, "c1")
    s.submit([wu("gen"), wu("sim", preds=["gen"])])
    r1 = s.handle_work_request(request(s, "c1"))
    assert r1.wu_id == "gen"
    assert s.state.workunits["sim"].state is W.PENDING
    s.handle_result(success("c1", r1.result_id, ["gen.out"]))
    r2 = s.handle_work_request(request(s, "c1"))
    assert r2.wu_id == "sim"


def test_hardware_feasibility():
    from helpers import app
    from locflow.model import EnvironmentBundle
    s = Scheduler()
    s.add_application(app("app", mem=2048))
    s.add_environment(EnvironmentBundle("env", "app"))
    registered(s, "c1")
    s.submit([wu("big")])
    assert s.handle_work_request(request(s, "c1")).kind is ReplyKind.NO_WORK
    big = Hardware(memory_mb=4096, disk_mb=0)
    assert s.handle_work_request(request(s, "c1", hw=big)).kind is ReplyKind.ASSIGNMENT


def test_unknown_client_and_stale_protocol():
    s = world()
    with pytest.raises(UnknownClient):
        s.handle_work_request(request(s, "ghost"))
    registered(s, "c1")
    with pytest.raises(StaleProtocol):
        s.handle_work_request(WorkRequest("c1", HW, [], protocol_version=2))


def test_hash_mismatch_blocks_locality_match():
    s = world()
    registered(s, "c1", "c2")
    s.submit([wu("gen", out="data.dat"), wu("use", inputs=["data.dat"], preds=["gen"])])
    r = s.handle_work_request(request(s, "c1"))
    s.handle_result(success("c1", r.result_id, ["data.dat"]))
    forged = FileId.of("data.dat", b"forged")
    assert s.handle_work_request(request(s, "c2", [forged])).kind is ReplyKind.NO_WORK
    assert s.handle_work_request(request(s, "c1", [fid("data.dat")])).wu_id == "use"


def test_prefer_cached_env_only_reorders_when_enabled():
    from locflow.model import EnvironmentBundle
    for flag, expected in [(False, "w1"), (True, "w2")]:
        s = world(SchedulerPolicy(wait_window_secs=10, prefer_cached_env=flag))
        s.add_environment(EnvironmentBundle("env2", "app"))
        registered(s, "c1")
        first = wu("w0")
        first.env_id = "env2"
        w2 = wu("w2")
        w2.env_id = "env2"
        s.submit([first, wu("w1"), w2])
        r = s.handle_work_request(request(s, "c1"))
        assert r.wu_id == "w0"
        s.handle_result(success("c1", r.result_id, ["w0.out"]))
        assert s.handle_work_request(request(s, "c1")).wu_id == expected


# --- inventory answers ----------------------------------------------------

def _waiting(s, name="w", inputs=("in.dat",), get_input=None):
    registered(s, "asker")
    s.submit([wu(name, inputs=list(inputs), get_input=get_input)])
    s.handle_work_request(request(s, "asker"))
    assert name in s.state.wait_timers


def test_full_answer_creates_reservation():
    s = world()
    _waiting(s)
    registered(s, "holder")
    q = s.inventory_query()
    assert q.names == ["in.dat"]
    s.handle_inventory_answers([answer("holder", q.names, ["in.dat"])])
    assert s.state.reservations["w"] == "holder"
    assert "w" not in s.state.wait_timers
    assert s.state.workunits["w"].state is W.READY
    # nobody else may take it, even holding the data
    registered(s, "other")
    assert s.handle_work_request(request(s, "other", ["in.dat"])).kind is ReplyKind.NO_WORK
    assert s.handle_work_request(request(s, "holder", ["in.dat"])).wu_id == "w"


@pytest.mark.parametrize("order", [("a", "b"), ("b", "a")])
def test_first_full_answer_wins(order):
    s = world()
    _waiting(s, inputs=("x", "y"))
    registered(s, "a", "b")
    answers = {"a": answer("a", ["x", "y"], ["x", "y"]), "b": answer("b", ["x", "y"], ["y", "x"])}
    s.handle_inventory_answers([answers[c] for c in order])
    # oracle: replaying the list, the first answer covering all inputs is the reservation
    first_full = next(c for c in order if set(answers[c].held) >= {"x", "y"})
    assert s.state.reservations["w"] == first_full


def test_partial_answer_no_reservation():
    s = world()
    _waiting(s, inputs=("x", "y"))
    registered(s, "a")
    s.handle_inventory_answers([answer("a", ["x", "y"], ["x"])])
    assert "w" not in s.state.reservations
    assert "w" in s.state.wait_timers


def test_late_or_unknown_answers_ignored():
    s = world()
    _waiting(s)
    s.handle_inventory_answers([answer("nobody", ["in.dat"], ["in.dat"])])
    assert not s.state.reservations


# --- expire_waits ---------------------------------------------------------

def test_expire_waits_not_yet():
    s = world()
    _waiting(s, get_input="getter")
    before = copy.deepcopy(s.state)
    s.expire_waits(s.state.wait_timers["w"])  # exactly at expiry: not expired
    assert s.state.wait_timers == before.wait_timers
    assert s.state.get_input_eligible == before.get_input_eligible


def test_expire_waits_marks_get_input_eligible():
    s = world()
    _waiting(s, get_input="getter")
    s.expire_waits(100)
    assert "w" in s.state.get_input_eligible
    assert s.state.workunits["w"].state is W.WAITING_FOR_DATA


def test_expire_waits_without_get_input_fails():
    s = world()
    _waiting(s)
    s.expire_waits(100)
    assert s.state.workunits["w"].state is W.FAILED


# --- get-input completion -------------------------------------------------

def _get_input_out(s):
    _waiting(s, get_input="getter")
    s.advance(100)
    reply = s.handle_work_request(request(s, "asker"))
    assert reply.kind is ReplyKind.GET_INPUT_ASSIGNMENT
    return reply


def test_get_input_done_then_assignment():
    s = world()
    _get_input_out(s)
    s.handle_get_input_done("asker", "w", [fid("in.dat")])
    assert s.state.reservations["w"] == "asker"
    reply = s.handle_work_request(request(s, "asker", ["in.dat"]))
    assert reply.kind is ReplyKind.ASSIGNMENT and reply.wu_id == "w"


def test_get_input_declared_on_next_request():
    s = world()
    _get_input_out(s)
    reply = s.handle_work_request(request(s, "asker", ["in.dat"]))
    assert reply.kind is ReplyKind.ASSIGNMENT and reply.wu_id == "w"


def test_get_input_wrong_files_restarts_wait():
    s = world()
    _get_input_out(s)
    s.handle_get_input_done("asker", "w", [fid("other.dat")])
    assert "w" not in s.state.reservations
    assert s.state.wait_timers["w"] == s.now + 10
    assert s.state.workunits["w"].state is W.WAITING_FOR_DATA
    # the Branch-1 predicate re-checked independently: the inventory lacks in.dat
    assert "in.dat" not in s.state.clients["asker"].inventory


def test_get_input_empty_payload():
    s = world()
    _get_input_out(s)
    inv_before = dict(s.state.clients["asker"].inventory)
    s.handle_get_input_done("asker", "w", [])
    assert s.state.clients["asker"].inventory == inv_before
    assert not s.state.reservations


def test_get_input_done_unknown_assignment():
    s = world()
    registered(s, "c1")
    s.submit([wu("w")])
    with pytest.raises(UnknownAssignment):
        s.handle_get_input_done("c1", "w", [])


# --- handle_result --------------------------------------------------------

def _assigned(s, max_retries=2, limit=100):
    registered(s, "c1")
    s.submit([wu("w", max_retries=max_retries, max_result_size_bytes=limit)])
    return s.handle_work_request(request(s, "c1"))


def test_success_within_limit_adds_outputs_to_inventory():
    s = world()
    r = _assigned(s)
    res = s.handle_result(success("c1", r.result_id, ["w.out"], cpu=100, size=100))
    assert res.state is ResultState.SUCCESS
    assert s.state.workunits["w"].state is W.DONE
    assert "w.out" in s.state.clients["c1"].inventory
    assert s.state.ledger.users["c1"] == 200.0


def test_oversize_by_one_byte_retries():
    s = world()
    r = _assigned(s)
    res = s.handle_result(success("c1", r.result_id, ["w.out"], size=101))
    assert res.state is ResultState.OVERSIZE
    assert s.state.workunits["w"].state is W.READY
    assert s.state.workunits["w"].failures == 1


def test_retry_exhaustion():
    s = world()
    r = _assigned(s, max_retries=2)
    for attempt in range(3):
        s.handle_result(failure("c1", r.result_id))
        if attempt < 2:
            assert s.state.workunits["w"].state is W.READY
            r = s.handle_work_request(request(s, "c1"))
    assert s.state.workunits["w"].state is W.FAILED


def test_result_errors():
    s = world()
    r = _assigned(s)
    with pytest.raises(UnknownResult):
        s.handle_result(success("c1", "nope", ["w.out"]))
    s.handle_result(success("c1", r.result_id, ["w.out"]))
    with pytest.raises(ResultNotInProgress):
        s.handle_result(success("c1", r.result_id, ["w.out"]))


def test_success_without_expected_output_is_error():
    s = world()
    r = _assigned(s)
    assert s.handle_result(success("c1", r.result_id, ["other"])).state is ResultState.ERROR


# --- expire_deadlines -----------------------------------------------------

def test_deadline_boundary_is_strict():
    s = world()
    r = _assigned(s)
    s.expire_deadlines(r.deadline_at)
    assert s.state.results[r.result_id].state is ResultState.IN_PROGRESS
    s.expire_deadlines(r.deadline_at + 1)
    assert s.state.results[r.result_id].state is ResultState.TIMEOUT
    assert s.state.workunits["w"].state is W.READY
    assert s.state.workunits["w"].failures == 1


def test_timeout_requeues_to_other_holder():
    s = world()
    registered(s, "c1", "c2")
    s.submit([wu("w", inputs=["rep.dat"])])
    s.handle_work_request(request(s, "c2", ["rep.dat"]))  # c2 declares a replica, gets it
    r = s.state.results["result-1"]
    assert r.client_id == "c2"
    s.advance(r.deadline_at)
    s.handle_work_request(request(s, "c1", ["rep.dat"]))  # c1 also holds a replica
    s.tick(r.deadline_at + 1)
    assert s.state.workunits["w"].state is W.READY
    again = s.handle_work_request(request(s, "c1", ["rep.dat"]))
    assert again.wu_id == "w"
    s.handle_result(success("c1", again.result_id, ["w.out"]))
    assert s.state.workunits["w"].state is W.DONE


def test_timeout_with_lost_sole_holder_waits_for_data():
    s = world()
    registered(s, "c1")
    s.submit([wu("w", inputs=["only.dat"])])
    r = s.handle_work_request(request(s, "c1", ["only.dat"]))
    s.expire_deadlines(r.deadline_at + 1)
    assert s.state.workunits["w"].state is W.WAITING_FOR_DATA
    validate_trace(s.state.trace)


# --- dependencies and credit ---------------------------------------------

def test_dependencies_satisfied():
    s = world()
    s.submit([wu("A"), wu("B", preds=["A"]), wu("C", preds=["A"]), wu("D", preds=["B", "C"])])
    wus = s.state.workunits
    assert s.dependencies_satisfied(wus["A"])
    wus["A"].state = W.ASSIGNED
    assert not s.dependencies_satisfied(wus["B"])
    for k in "ABC":
        wus[k].state = W.DONE
    # oracle: D is runnable iff every ancestor is DONE
    ancestors = {"B", "C", "A"}
    assert s.dependencies_satisfied(wus["D"]) == all(wus[a].state is W.DONE for a in ancestors)


def test_grant_credit_examples():
    c = ClientRecord("c", "u", "g", benchmark_gflops=2.0)
    ledger = CreditLedger()
    grant_credit(ledger, c, 0)
    assert ledger.users == {}
    grant_credit(ledger, c, 100)
    assert ledger.users["u"] == 200.0
    grant_credit(ledger, ClientRecord("d", "v", "g", benchmark_gflops=1.0), 5)
    assert ledger.groups["g"] == 205.0


def test_trace_is_valid_after_pipeline():
    s = world()
    registered(s, "c1")
    s.submit([wu("gen", out="p{index}"), wu("sim", inputs=["p0"], preds=["gen"])])
    r = s.handle_work_request(request(s, "c1"))
    s.handle_result(success("c1", r.result_id, ["p0", "p1"]))
    r = s.handle_work_request(request(s, "c1", ["p0", "p1"]))
    s.handle_result(success("c1", r.result_id, ["sim.out"]))
    validate_trace(s.state.trace)
    assert s.counts()["DONE"] == 2
