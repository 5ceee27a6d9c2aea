import os
import stat
from fractions import Fraction

import pytest
from hypothesis import given, strategies as st

from skillevo.bundle import make_bundle
from skillevo.errors import BudgetExhausted, ContractError, EmptySuite
from skillevo.oracle import (
    Oracle,
    OracleScore,
    OpaqueBit,
    oracle_evaluate,
    seal_manifest,
    seal_suite,
    skill_hint,
    to_opaque,
    unseal,
)
from skillevo.sandbox import TaskSpec
from skillevo.solver import make_solver
from skillevo.verifier import Assertion

HIDDEN4 = ("h1\tfile_exists\tanswer.txt\t\n"
           "h2\tcontent_matches\tanswer.txt\t^\\d+$\n"
           "h3\tnumeric_within\tanswer.txt\t42,0\n"
           "h4\tcontent_equals\tanswer.txt\t42\\n\n")


def skill(cmd):
    return make_bundle(f"---\nname: evo-answer\ndescription: writes the answer\n---\n```bash\n{cmd}\n```\n")


@pytest.fixture
def spec(tmp_path, store):
    fx = tmp_path / "fx"
    fx.mkdir()
    (fx / "input.txt").write_text("42\n")
    return TaskSpec("answer", "write the answer", fx, ("answer.txt",), seal_manifest(HIDDEN4, store), 30)


def test_three_of_four(spec, sandbox_root):
    oracle = Oracle(spec.oracle_suite, sandbox_root=sandbox_root)
    score = oracle.evaluate(skill("printf 42 > answer.txt"), spec, make_solver())
    assert (score.score, score.passed_count, score.total) == (Fraction(3, 4), 3, 4)
    assert score.evaluated_version == 0


def test_four_of_four(spec, sandbox_root):
    score = Oracle(spec.oracle_suite, sandbox_root=sandbox_root).evaluate(
        skill("cp input.txt answer.txt"), spec, make_solver())
    assert score.score == 1


def test_no_outputs_scores_zero(spec, sandbox_root):
    score = Oracle(spec.oracle_suite, sandbox_root=sandbox_root).evaluate(skill("true"), spec, make_solver())
    assert score.score == 0


def test_oracle_uses_fresh_env_each_time(spec, sandbox_root):
    oracle = Oracle(spec.oracle_suite, sandbox_root=sandbox_root)
    b = skill("cat input.txt >> answer.txt; cp input.txt input.bak")
    a1 = oracle.evaluate(b, spec, make_solver())
    a2 = oracle.evaluate(b, spec, make_solver())
    assert a1.score == a2.score == 1
    assert a1.fresh_env_id != a2.fresh_env_id
    assert list(sandbox_root.iterdir()) == []  # disposed


def test_budget(spec, sandbox_root):
    oracle = Oracle(spec.oracle_suite, budget=2, sandbox_root=sandbox_root)
    for _ in range(2):
        oracle.evaluate(skill("true"), spec, make_solver())
    assert oracle.remaining == 0
    with pytest.raises(BudgetExhausted):
        oracle.evaluate(skill("true"), spec, make_solver())
    assert oracle.used == 2


def test_hint_is_only_added_with_a_skill(spec, sandbox_root):
    seen = []
    solver = make_solver(["cp input.txt answer.txt"])
    original = solver.impl.fn

    def spy(view):
        seen.append(view[0].body)
        return original(view)

    solver.impl.fn = spy
    oracle = Oracle(spec.oracle_suite, sandbox_root=sandbox_root)
    oracle.evaluate(None, spec, solver)
    oracle.evaluate(skill("cp input.txt answer.txt"), spec, solver)
    assert skill_hint() not in seen[0]
    assert skill_hint() in seen[-1]


def test_oracle_evaluate_without_suite(tmp_path):
    spec = TaskSpec("t", "x", None, ("*",))
    with pytest.raises(ContractError):
        oracle_evaluate(None, spec, make_solver())


def test_opaque_bit():
    def score(p, t):
        return OracleScore(Fraction(p, t), p, t, 0, "e")

    assert to_opaque(score(3, 4)).failed is True
    assert to_opaque(score(4, 4)).failed is False
    assert to_opaque(score(0, 4)).failed is True
    assert to_opaque(score(3, 4)).serialize() == "1"
    assert str(OpaqueBit(False)) == "0"


@given(st.integers(1, 50).flatmap(lambda t: st.tuples(st.integers(0, t), st.just(t))))
def test_bit_matches_exact_score(pt):
    p, t = pt
    s = OracleScore(Fraction(p, t), p, t, None, "e")
    bit = to_opaque(s)
    assert bit.failed == (p < t)
    assert len(bit.serialize()) == 1


def test_score_invariants():
    with pytest.raises(ValueError):
        OracleScore(Fraction(1, 2), 1, 3, 0, "e")
    with pytest.raises(ValueError):
        OracleScore(Fraction(0), 0, 0, 0, "e")


def test_seal_is_private_and_unique(store):
    items = [Assertion("h1", "file_exists", "x")]
    r1, r2 = seal_suite(items, store), seal_suite(items, store)
    assert r1.suite_id != r2.suite_id
    assert stat.S_IMODE(os.stat(store.root).st_mode) == 0o700
    for f in store.root.iterdir():
        assert stat.S_IMODE(os.stat(f).st_mode) == 0o600
    assert str(store.root) not in repr(r1) and "h1" not in repr(r1)


def test_seal_empty(store):
    with pytest.raises(EmptySuite):
        seal_suite([], store)


def test_seal_four_reports_total_four(spec, sandbox_root):
    score = Oracle(spec.oracle_suite, sandbox_root=sandbox_root).evaluate(None, spec, make_solver())
    assert score.total == 4 and score.evaluated_version is None


def test_unseal_needs_confirmation(store):
    ref = seal_manifest("h1\tfile_exists\tx\t\n", store)
    with pytest.raises(ContractError):
        unseal(ref, confirmed=False)
    assert unseal(ref, confirmed=True)[0].assertion_id == "h1"
