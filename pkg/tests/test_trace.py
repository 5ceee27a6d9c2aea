import json
from fractions import Fraction

import pytest
from hypothesis import given, strategies as st

from skillevo.errors import MalformedTrace
from skillevo.trace import EVENT_KINDS, SEALED, TraceLog, parse_trace, read_trace, strip_wall_time


def test_emit_numbers_steps_and_flattens():
    log = TraceLog("t1")
    log.emit("suite_run", reward=Fraction(0, 15), failed=["a1", "a2"], elapsed_s=0.5)
    log.emit("early_exit")
    rec = json.loads(log.to_text().splitlines()[0])
    assert rec == {"step": 1, "kind": "suite_run", "task": "t1", "reward": "0/1", "failed": "a1,a2",
                   "elapsed_s": 0.5}
    assert [e.step for e in log] == [1, 2]


def test_unknown_kind_and_reserved_keys():
    log = TraceLog()
    with pytest.raises(ValueError):
        log.emit("teleported")
    with pytest.raises(ValueError):
        log.emit("early_exit", step=3)


def test_oracle_fields_sealed_by_default():
    log = TraceLog("t")
    log.emit("oracle_evaluated", score="3/4", passed=3, total=4, version=1)
    sealed = json.loads(log.to_text())
    assert sealed["score"] == sealed["passed"] == sealed["total"] == SEALED
    assert sealed["version"] == 1
    assert json.loads(log.to_text(unseal=True))["score"] == "3/4"


def test_round_trip_through_file(tmp_path):
    log = TraceLog("t")
    log.emit("skill_generated", version=0)
    log.emit("oracle_evaluated", score="1", passed=4, total=4)
    path = log.write(tmp_path / "trace.jsonl", unseal=True)
    assert read_trace(path) == log.events
    assert oct(path.stat().st_mode & 0o777) == "0o600"


@pytest.mark.parametrize("text", [
    "not json\n",
    "[1]\n",
    '{"kind": "early_exit"}\n',
    '{"step": 1, "kind": "nope"}\n',
    '{"step": 1, "kind": "early_exit", "x": {"a": 1}}\n',
    '{"step": 2, "kind": "early_exit", "task": "t"}\n{"step": 2, "kind": "early_exit", "task": "t"}\n',
])
def test_malformed(text):
    with pytest.raises(MalformedTrace):
        parse_trace(text.splitlines())


def test_strip_wall_time():
    a = '{"step":1,"kind":"rollout_done","elapsed_s":1.25}\n'
    b = '{"step":1,"kind":"rollout_done","elapsed_s":9.5}\n'
    assert strip_wall_time(a) == strip_wall_time(b)


payload_values = st.one_of(st.integers(-5, 5), st.text(max_size=10), st.booleans(), st.none())


@given(st.lists(st.tuples(st.sampled_from(EVENT_KINDS),
                          st.dictionaries(st.sampled_from(["a", "b", "version", "reward"]), payload_values,
                                          max_size=3)), max_size=10))
def test_log_round_trip_property(events):
    log = TraceLog("task")
    for kind, payload in events:
        log.emit(kind, **payload)
    assert parse_trace(log.to_text(unseal=True).splitlines()) == log.events
