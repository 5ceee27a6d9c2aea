from collections import Counter
from fractions import Fraction

import pytest
from hypothesis import HealthCheck, given, settings, strategies as st

from oracles.reference import simulate
from skillevo.errors import BudgetExhausted, ContractError
from skillevo.evolution import (
    ChecklistStatus,
    Evolution,
    EvolutionConfig,
    apply_mode,
    checklist_gate,
    render_summary,
    run_evolution,
    run_many,
)
from skillevo.oracle import Oracle
from skillevo.policy import make_scripted, skill_edit_response
from skillevo.sandbox import RolloutArtifacts
from skillevo.scenarios import (
    ScheduledOracle,
    always_fail_scenario,
    constant_score_scenario,
    progress_text,
    scheduled_scenario,
    stub_generator,
    stub_skill_doc,
    stub_task,
    stub_verifier,
)


def kinds(outcome):
    return [e.kind for e in outcome.trace]


# --- config ------------------------------------------------------------------

def test_defaults():
    cfg = EvolutionConfig()
    assert (cfg.N, cfg.M, cfg.beta, cfg.timeout_multiplier, cfg.mode, cfg.checklist_gate) == \
           (5, 15, Fraction(7, 10), 5.0, "full", True)


@pytest.mark.parametrize("kw", [{"N": 0}, {"M": 0}, {"beta": 0}, {"beta": "1.1"}, {"mode": "turbo"},
                                {"timeout_multiplier": 0}])
def test_config_invariants(kw):
    with pytest.raises(ValueError):
        EvolutionConfig(**kw)


def test_config_k_alias_and_unknown_keys():
    assert EvolutionConfig.from_mapping({"K": 3}).N == 3
    assert EvolutionConfig.from_mapping({"beta": "0.5"}).beta == Fraction(1, 2)
    with pytest.raises(ValueError):
        EvolutionConfig.from_mapping({"K": 3, "N": 4})
    with pytest.raises(ValueError):
        EvolutionConfig.from_mapping({"nope": 1})


# --- checklist ------------------------------------------------------------------

def progress(text):
    return RolloutArtifacts({"progress.md": text.encode()})


def test_checklist_complete():
    assert checklist_gate(progress(progress_text())) == ChecklistStatus(True, ())


def test_checklist_one_open_item():
    done = [p for p in ("P1", "P1b", "P2", "P3", "P5", "P6")]
    assert checklist_gate(progress(progress_text(done))) == ChecklistStatus(False, ("P4",))


def test_checklist_absent_file():
    status = checklist_gate(RolloutArtifacts({}))
    assert not status.complete and status.missing == ("P1", "P1b", "P2", "P3", "P4", "P5", "P6")


def test_checklist_missing_required_item():
    text = "- [x] P1\n- [x] P2\n"
    status = checklist_gate(progress(text), required=("P1", "P2", "P3"))
    assert status.missing == ("P3",)


# --- modes ------------------------------------------------------------------------

def test_apply_mode():
    assert apply_mode(EvolutionConfig()).surrogate
    nv = apply_mode(EvolutionConfig(mode="no_verifier"))
    assert not nv.surrogate and nv.refine
    ne = apply_mode(EvolutionConfig(mode="no_evolution"))
    assert ne.generate_skill and not ne.refine and ne.oracle_budget == 1
    ns = apply_mode(EvolutionConfig(mode="no_skill"))
    assert not ns.generate_skill and not ns.install_bundle


def test_no_verifier_fail_fail_pass(tmp_path):
    sc = scheduled_scenario(tmp_path, [0, 0, 1], EvolutionConfig(mode="no_verifier"))
    out = sc.run()
    c = Counter(kinds(out))
    assert c["oracle_evaluated"] == 3 and c["suite_run"] == 0 and c["suite_escalated"] == 0
    assert out.state.status == "done_perfect"
    assert sc.oracle.seen_versions == [0, 1, 2]


def test_no_verifier_skips_refinement_after_last_oracle_call(tmp_path):
    sc = scheduled_scenario(tmp_path, [Fraction(1, 4)], EvolutionConfig(N=2, mode="no_verifier"))
    out = sc.run()
    assert kinds(out)[-1] == "bit_appended"
    assert Counter(kinds(out))["skill_generated"] == 2


def test_no_evolution(tmp_path):
    out = scheduled_scenario(tmp_path, [Fraction(1, 2)], EvolutionConfig(mode="no_evolution")).run()
    assert kinds(out) == ["skill_generated", "oracle_evaluated", "snapshot_saved"]
    assert out.state.status == "done_budget"


def test_no_skill(tmp_path):
    sc = scheduled_scenario(tmp_path, [Fraction(1, 2)], EvolutionConfig(mode="no_skill"))
    out = sc.run()
    assert kinds(out) == ["oracle_evaluated"]
    assert sc.oracle.seen_versions == [None]
    assert out.final is None


# --- step-level examples -----------------------------------------------------------

def test_step_with_context_already_over_cap(tmp_path):
    spec = stub_task(tmp_path)
    gen = stub_generator()
    evo = Evolution(spec, EvolutionConfig(window_bytes=100), gen, stub_verifier(), spec.oracle_suite,
                    sandbox_root=tmp_path)
    state = evo.start()
    assert state.ctx.usage() > Fraction(7, 10)
    requests = len(gen.requests)
    state, events = evo.step(state)
    assert [e.kind for e in events] == ["context_cap_hit"]
    assert state.status == "done_context" and len(gen.requests) == requests


def test_step_checklist_blocks_oracle(tmp_path):
    spec = stub_task(tmp_path, progress=False)
    oracle = ScheduledOracle([1], 5)
    evo = Evolution(spec, EvolutionConfig(), stub_generator(), stub_verifier(), None, oracle=oracle,
                    sandbox_root=tmp_path)
    state, events = evo.step(evo.start())
    assert [e.kind for e in events] == ["rollout_done", "suite_run", "checklist_blocked"]
    assert (state.r, state.n, state.j, state.i) == (1, 0, 0, 0)
    assert oracle.used == 0
    assert state.ctx.messages[-1].body.startswith("checklist incomplete: P1")


def test_step_perfect_oracle_exits(tmp_path):
    spec = stub_task(tmp_path)
    evo = Evolution(spec, EvolutionConfig(), stub_generator(), stub_verifier(), None,
                    oracle=ScheduledOracle([1], 5), sandbox_root=tmp_path)
    state, events = evo.step(evo.start())
    assert [e.kind for e in events][-2:] == ["oracle_evaluated", "early_exit"]
    assert state.status == "done_perfect" and state.R_best == 1
    with pytest.raises(ContractError):
        evo.step(state)


def test_step_is_pure_on_prior_state(tmp_path):
    spec = stub_task(tmp_path)
    evo = Evolution(spec, EvolutionConfig(), stub_generator(), stub_verifier(passing=False), spec.oracle_suite,
                    sandbox_root=tmp_path)
    s0 = evo.start()
    snapshot = (s0.i, s0.r, s0.ctx.messages, s0.current)
    s1, _ = evo.step(s0)
    assert (s0.i, s0.r, s0.ctx.messages, s0.current) == snapshot
    assert (s1.i, s1.r) == (1, 1)


def test_suite_locked_during_refinement(tmp_path):
    out = always_fail_scenario(tmp_path, EvolutionConfig(M=4)).run()
    versions = {e.payload["suite_version"] for e in out.trace if e.kind == "suite_run"}
    assert versions == {0}


def test_roles_and_sessions_are_checked(tmp_path):
    spec = stub_task(tmp_path)
    with pytest.raises(ContractError):
        Evolution(spec, EvolutionConfig(), stub_verifier(), stub_verifier(), spec.oracle_suite)
    with pytest.raises(ContractError):
        Evolution(spec, EvolutionConfig(), stub_generator(session_id="same"),
                  stub_verifier(session_id="same"), spec.oracle_suite)


def test_run_without_hidden_suite(tmp_path):
    from skillevo.sandbox import TaskSpec
    spec = TaskSpec("t", "x", None, ("*",))
    with pytest.raises(ContractError):
        run_evolution(spec, EvolutionConfig(), stub_generator(), stub_verifier())


def test_first_edit_must_carry_a_document(tmp_path):
    from skillevo.errors import MalformedResponse
    spec = stub_task(tmp_path)
    gen = make_scripted([skill_edit_response({"a.txt": "x"})], "generator")
    with pytest.raises(MalformedResponse):
        run_evolution(spec, EvolutionConfig(), gen, stub_verifier())


# --- budget laws (real oracle) ---------------------------------------------------

def test_always_fail_budget(tmp_path):
    out = always_fail_scenario(tmp_path).run()
    c = Counter(kinds(out))
    assert (out.state.r, out.state.n, out.state.status) == (15, 0, "done_budget")
    assert c["diagnostic_appended"] == 15 and c["skill_generated"] == 16
    assert out.final.version == 0 and out.final_score == 0


def test_constant_half_budget(tmp_path):
    out = constant_score_scenario(tmp_path).run()
    c = Counter(kinds(out))
    assert (out.state.n, out.state.j, out.state.status) == (5, 5, "done_budget")
    assert c["suite_escalated"] == 5 and c["oracle_evaluated"] == 5
    assert out.final_score == Fraction(1, 2) and out.final.version == 0


def test_oracle_budget_cannot_be_exceeded(tmp_path):
    spec = stub_task(tmp_path)
    oracle = Oracle(spec.oracle_suite, budget=1, sandbox_root=tmp_path)
    from skillevo.solver import make_solver
    oracle.evaluate(None, spec, make_solver())
    with pytest.raises(BudgetExhausted):
        oracle.evaluate(None, spec, make_solver())


# --- agreement with the reference model ----------------------------------------

class ListRng:
    """Feeds stub_generator a fixed marker pattern: 0.0 keeps the marker, 0.9 drops it."""

    def __init__(self, pattern):
        self.pattern = pattern
        self.k = 0

    def random(self):
        value = 0.0 if self.pattern[self.k % len(self.pattern)] else 0.9
        self.k += 1
        return value


schedules = st.fixed_dictionaries({
    "passes": st.lists(st.booleans(), min_size=1, max_size=6),
    "scores": st.lists(st.sampled_from([Fraction(k, 4) for k in range(5)]), min_size=1, max_size=6),
    "N": st.integers(1, 5),
    "M": st.integers(1, 6),
    "mode": st.sampled_from(["full", "no_verifier"]),
})


@settings(max_examples=40, deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture])
@given(schedules)
def test_engine_matches_reference(tmp_path_factory, sched):
    root = tmp_path_factory.mktemp("ref")
    cfg = EvolutionConfig(N=sched["N"], M=sched["M"], mode=sched["mode"])
    gen = stub_generator(rng=ListRng(sched["passes"]), marker_prob=0.5)
    ver = stub_verifier(marker_gated=True) if sched["mode"] == "full" else None
    out = scheduled_scenario(root, sched["scores"], cfg, verifier=ver, generator=gen).run()
    events, counters, status, best_version, best_score = simulate(
        sched["passes"], sched["scores"], sched["N"], sched["M"], sched["mode"])
    assert kinds(out) == events
    st_ = out.state
    assert {"i": st_.i, "j": st_.j, "n": st_.n, "r": st_.r} == counters
    assert st_.status == status
    assert out.final.version == best_version and out.final_score == best_score


@settings(max_examples=25, deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture])
@given(schedules)
def test_counter_semantics_and_opacity(tmp_path_factory, sched):
    root = tmp_path_factory.mktemp("cnt")
    cfg = EvolutionConfig(N=sched["N"], M=sched["M"], mode=sched["mode"])
    gen = stub_generator(rng=ListRng(sched["passes"]), marker_prob=0.5)
    ver = stub_verifier(marker_gated=True) if sched["mode"] == "full" else None
    out = scheduled_scenario(root, sched["scores"], cfg, verifier=ver, generator=gen).run()
    c = Counter(kinds(out))
    s = out.state
    assert s.r == c["diagnostic_appended"] + c["checklist_blocked"]
    assert s.n == c["oracle_evaluated"] and s.j == c["suite_escalated"]
    assert s.i == c["skill_generated"] - 1
    assert s.n <= cfg.N and s.r <= cfg.M
    steps = [e.step for e in out.trace]
    assert steps == sorted(set(steps))
    if "early_exit" in c:
        assert kinds(out)[-1] == "early_exit"
    for msg in s.ctx.messages:
        if msg.kind == "oracle_bit":
            assert msg.body in ("0", "1")
    # the message right after each oracle call is exactly the bit
    bodies = [m for m in s.ctx.messages if m.origin == "host" and m.kind in ("oracle_bit", "diagnostic")]
    assert all(len(m.body) == 1 for m in bodies if m.kind == "oracle_bit")


# --- misc -------------------------------------------------------------------------

def test_run_many_keeps_order(tmp_path):
    jobs = []
    for k, score in enumerate([Fraction(1, 4), 1]):
        sc = scheduled_scenario(tmp_path / str(k), [score], EvolutionConfig(N=2))
        jobs.append({"spec": sc.spec, "cfg": sc.cfg, "gen": sc.gen, "ver": sc.ver, "oracle": sc.oracle,
                     "sandbox_root": sc.sandbox_root})
    outs = run_many(jobs, workers=2)
    assert [o.state.status for o in outs] == ["done_budget", "done_perfect"]


def test_summary_mentions_counters(tmp_path):
    out = constant_score_scenario(tmp_path, EvolutionConfig(N=2)).run()
    text = render_summary(out)
    assert "oracle evaluations (n): 2" in text and "status: done_budget" in text
    assert "1/2" not in text  # oracle scores stay sealed


def test_generated_doc_is_revisioned(tmp_path):
    out = always_fail_scenario(tmp_path, EvolutionConfig(M=2)).run()
    assert out.state.current.root_doc == stub_skill_doc(2)
