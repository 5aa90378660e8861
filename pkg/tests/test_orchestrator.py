from __future__ import annotations

import json
import sys
import threading
import time

import pytest

from autoloop.model import IterationRecord, Mode, Phase
from autoloop.orchestrator import (
    AdapterMissing,
    Adapters,
    AlreadyInDrain,
    ConfigError,
    CorruptState,
    Loop,
    LoopBusy,
    LoopConfig,
    LoopState,
    NotInDrain,
    ProcessSkill,
    SkillRequest,
    SkillResponse,
    SkillStatus,
    backfill,
    config_from_doc,
    dumps_state,
    effective_sequence,
    enter_drain,
    exit_drain,
    history_table,
    invoke_skill,
    load_config,
    loads_state,
    mode_flags,
    persist_state,
    phase_sequence,
    verify_history,
)
from autoloop.sim import open_sim_loop

from helpers import defect_free_sim


def test_phase_sequences_per_mode():
    assert phase_sequence(Mode.STRATEGY)[0] is Phase.BACKLOG and len(phase_sequence(Mode.STRATEGY)) == 6
    assert Phase.EXECUTE not in phase_sequence(Mode.USER_ONLY)
    assert Phase.IDEATE not in phase_sequence(Mode.DEV_ONLY)
    assert phase_sequence(Mode.DRAIN) == (Phase.POLISH,)
    assert mode_flags(Mode.REGRESS_QUICK)["quick_oracle"] and mode_flags(Mode.UI)["browser_hint"]
    assert not any(mode_flags(Mode.STRATEGY).values())


@pytest.mark.parametrize(
    "doc",
    [
        {"starvation_threshold": 0},
        {"drain_enter_threshold": 5, "drain_exit_threshold": 5},
        {"execute_ticket_limit": -1},
        {"colour": "blue"},
        {"mode": "turbo"},
    ],
)
def test_bad_configs_rejected(doc):
    with pytest.raises(ConfigError):
        config_from_doc(doc)


def test_config_sections_and_overrides(tmp_path):
    cfg = config_from_doc({"loop": {"ttl": 4}, "sim": {"dims": [1, 1, 1]}})
    assert cfg.ttl == 4
    assert config_from_doc({"ttl": 4, "adapters": {}}, seed=9, mode=None).seed == 9
    path = tmp_path / "c.json"
    path.write_text("[1, 2]")
    with pytest.raises(ConfigError):
        load_config(path)
    assert load_config(None) == LoopConfig()


def test_drain_round_trip_restores_phases():
    cfg = LoopConfig()
    s = LoopState()
    d = enter_drain(s, cfg)
    assert d.in_drain and effective_sequence(d, cfg) == (Phase.POLISH,) and d.drain_entries == 1
    with pytest.raises(AlreadyInDrain):
        enter_drain(d, cfg)
    back = exit_drain(d, cfg)
    assert back.phases is None and effective_sequence(back, cfg) == phase_sequence(Mode.STRATEGY)
    with pytest.raises(NotInDrain):
        exit_drain(back, cfg)
    custom = LoopState(phases=(Phase.BACKLOG, Phase.POLISH))
    assert exit_drain(enter_drain(custom, cfg), cfg).phases == (Phase.BACKLOG, Phase.POLISH)
    assert not back.check()


def test_adapter_missing():
    with pytest.raises(AdapterMissing):
        Adapters().skill(Phase.IDEATE)
    with pytest.raises(AdapterMissing):
        Adapters(skills={Phase.POLISH: lambda r: None}).skill(Phase.POLISH)


def test_invoke_skill_timeout_and_error():
    def slow(req):
        time.sleep(1.0)
        return SkillResponse(SkillStatus.OK, {})

    def boom(req):
        raise RuntimeError("nope")

    assert invoke_skill(slow, SkillRequest(Phase.IDEATE, deadline=0.05)) == SkillResponse(SkillStatus.TIMEOUT)
    err = invoke_skill(boom, SkillRequest(Phase.IDEATE))
    assert err.status is SkillStatus.ERROR and "nope" in err.error
    echo = invoke_skill(lambda r: SkillResponse(SkillStatus.OK, {"got": r.payload}), SkillRequest(Phase.IDEATE, {"k": 1}))
    assert echo.payload == {"got": {"k": 1}}
    with pytest.raises(ValueError):
        SkillResponse(SkillStatus.TIMEOUT, {})


def _proc(code: str) -> ProcessSkill:
    return ProcessSkill([sys.executable, "-c", code])


def test_process_skill_contract():
    ok = _proc("import json,sys; d=json.load(sys.stdin); print(json.dumps({'phase': d['phase']}))")
    assert ok(SkillRequest(Phase.TRIAGE)) == SkillResponse(SkillStatus.OK, {"phase": "triage"})
    failed = _proc("import sys; sys.stderr.write('bad'); sys.exit(3)")(SkillRequest(Phase.TRIAGE))
    assert failed.status is SkillStatus.ERROR and failed.error == "bad"
    garbled = _proc("print('{not json')")(SkillRequest(Phase.TRIAGE))
    assert garbled.status is SkillStatus.ERROR and "bad response" in garbled.error
    slow = _proc("import time; time.sleep(5)")(SkillRequest(Phase.TRIAGE, deadline=0.2))
    assert slow.status is SkillStatus.TIMEOUT
    assert _proc("pass")(SkillRequest(Phase.TRIAGE)).payload == {}


def test_loads_state_reports_byte_offset():
    with pytest.raises(CorruptState) as e:
        loads_state('{"iteration": 1,}')
    assert e.value.offset == 16
    with pytest.raises(CorruptState):
        loads_state('{"iteration": "many"}')
    s = LoopState(iteration=3, no_work_loops=2)
    assert loads_state(dumps_state(s)) == s


def _rec(i: int) -> IterationRecord:
    return IterationRecord(i, Mode.STRATEGY)


def test_persist_merges_concurrent_writers(tmp_path):
    path = tmp_path / "state.json"
    base = LoopState()
    persist_state(base, path)
    a = loads_state(path.read_text())
    b = loads_state(path.read_text())
    a.history, a.iteration = [_rec(1)], 1
    b.history, b.iteration, b.starvation_counter = [_rec(2)], 2, 4
    persist_state(a, path)
    persist_state(b, path)
    final = loads_state(path.read_text())
    assert [r.index for r in final.history] == [1, 2]
    assert final.iteration == 2 and final.starvation_counter == 4 and final.state_revision == 3


def test_threaded_writers_lose_nothing(tmp_path):
    path = tmp_path / "state.json"
    persist_state(LoopState(), path)

    def writer(k):
        s = loads_state(path.read_text())
        s.history = s.history + [_rec(k)]
        s.iteration = k
        persist_state(s, path)

    threads = [threading.Thread(target=writer, args=(k,)) for k in range(1, 9)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert [r.index for r in loads_state(path.read_text()).history] == list(range(1, 9))


def test_verify_and_backfill():
    s = LoopState(iteration=5, history=[_rec(1), _rec(3)])
    assert verify_history(s) == [2, 4, 5]
    filled = backfill(s, [2, 4, 5])
    assert verify_history(filled) == [] and all(r.backfilled for r in filled.history if r.index != 1 and r.index != 3)
    assert "| 2 | backfilled |" in history_table(filled)


def test_loop_writes_reports_and_resumes(tmp_path):
    loop, _ = open_sim_loop(defect_free_sim(), LoopConfig(), tmp_path)
    result = loop.run(2)
    assert result.stop == "max_iterations" and loop.state.iteration == 2
    for name in ("state.json", "tickets.json", "world.json", "history.md", "reports/drift-0001.json", "reports/gates-0002.json"):
        assert (tmp_path / name).exists(), name
    again, _ = open_sim_loop(defect_free_sim(), LoopConfig(), tmp_path)
    assert again.state.iteration == 2


def test_halted_loop_needs_resume(tmp_path):
    from autoloop.model import Decision

    loop, _ = open_sim_loop(defect_free_sim(), LoopConfig(), tmp_path)
    loop.state.halted = Decision.PAUSE
    assert loop.run(3).records == ()
    assert len(loop.run(1, resume=True).records) == 1


def test_second_runner_is_refused(tmp_path):
    import fcntl

    Loop(tmp_path, LoopConfig(), Adapters())
    with open(tmp_path / "run.lock", "a+") as held:
        fcntl.flock(held, fcntl.LOCK_EX)
        with pytest.raises(LoopBusy):
            Loop(tmp_path, LoopConfig(), Adapters()).run(1)


def test_state_document_is_plain_json(tmp_path):
    loop, _ = open_sim_loop(defect_free_sim(), LoopConfig(), tmp_path)
    loop.run(1)
    doc = json.loads((tmp_path / "state.json").read_text())
    assert doc["iteration"] == 1 and isinstance(doc["history"], list)
