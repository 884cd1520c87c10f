import json

import pytest
from hypothesis import given, settings, strategies as st

from promptcal.backend import GenerationSettings, ScriptedMockBackend
from promptcal.canonical import SplitMix64
from promptcal.errors import BackendError, ConfigError
from promptcal.metric import make_metric
from promptcal.optimizer import (Candidate, OptimizerConfig, build_reflection_request, clean_proposal,
                                 compile_program, select_parent)
from promptcal.screening import STARTING_HARNESS, screening_contract

from conftest import answer, make_record

FIX = "Treat change-proneness as defect prediction."
STUDENT = GenerationSettings.student("mock/student")
REFLECT = GenerationSettings.reflection("mock/reflector")

TRAIN = [make_record("t1", "include", "Hard train include"), make_record("t2", "exclude", "Easy train exclude")]
VAL = [make_record("v1", "include", "Hard val include"), make_record("v2", "exclude", "Hard val exclude"),
       make_record("v3", "include", "Easy val include"), make_record("v4", "exclude", "Easy val exclude")]
GOLD = {r.title: r.gold_label for r in TRAIN + VAL}


def student(fixable: bool = True) -> ScriptedMockBackend:
    """Correct on 'Easy' titles; on 'Hard' titles correct only when the harness carries FIX."""
    def respond(i, system, user):
        title = next(t for t in GOLD if t in user)
        right = GOLD[title]
        if "Easy" in title or (fixable and FIX in system):
            return answer(right)
        return answer("exclude" if right == "include" else "include")
    return ScriptedMockBackend(respond, name="student")


def compile_with(reflector, budget, **cfg):
    config = OptimizerConfig(max_full_evals=budget, reflection_minibatch_size=2, **cfg)
    return compile_program(screening_contract(), TRAIN, VAL, make_metric("expanded"), student(), STUDENT,
                           reflector, REFLECT, config)


def test_reflected_candidate_wins_at_budget_two():
    reflector = ScriptedMockBackend([STARTING_HARNESS + "\n\n" + FIX], name="reflector")
    program, trace = compile_with(reflector, 2)
    kinds = [e["event"] for e in trace.events]
    assert kinds == ["full_eval", "minibatch_eval", "reflection_call", "minibatch_eval", "full_eval",
                     "acceptance", "result"]
    assert trace.budget_used == 2
    assert trace.winner_id == 1
    assert trace.candidates[0].val_scores == (0.0, 0.4, 1.0, 1.0)
    assert trace.candidates[1].val_scores == (1.0, 1.0, 1.0, 1.0)
    assert FIX in program.harness_text
    assert trace.of_kind("acceptance")[0]["accepted"] is True
    assert trace.candidates[1].parent_id == 0 and trace.candidates[0].parent_id is None


def test_budget_one_returns_baseline_without_reflection():
    reflector = ScriptedMockBackend([], name="reflector")  # any call would raise
    program, trace = compile_with(reflector, 1)
    assert trace.budget_used == 1 and trace.winner_id == 0
    assert program.harness_text == STARTING_HARNESS
    assert not trace.of_kind("reflection_call")


def test_identical_or_empty_proposals_rejected():
    reflector = ScriptedMockBackend([STARTING_HARNESS, "   ", f"```\n{STARTING_HARNESS}\n```"], repeat=True)
    program, trace = compile_with(reflector, 3)
    assert trace.budget_used == 1 and trace.winner_id == 0
    acceptance = trace.of_kind("acceptance")
    assert acceptance and all(not e["accepted"] for e in acceptance)
    assert len(acceptance) == OptimizerConfig(max_full_evals=3).iteration_cap


def test_non_improving_proposal_costs_no_budget():
    reflector = ScriptedMockBackend(["A different but useless harness."], repeat=True)
    config = OptimizerConfig(max_full_evals=2, reflection_minibatch_size=2, max_iterations=4)
    _, trace = compile_program(screening_contract(), TRAIN, VAL, make_metric("expanded"), student(False),
                               STUDENT, reflector, REFLECT, config)
    assert trace.budget_used == 1
    assert len(trace.of_kind("reflection_call")) == 4


@pytest.mark.parametrize("budget", [1, 2, 3, 6])
def test_budget_law(budget):
    proposals = [f"{STARTING_HARNESS}\n\nvariant {i}\n{FIX if i % 2 else ''}" for i in range(50)]
    reflector = ScriptedMockBackend(proposals, repeat=True)
    _, trace = compile_with(reflector, budget)
    assert trace.budget_used == len(trace.of_kind("full_eval")) <= budget


def test_compile_config_errors():
    with pytest.raises(ConfigError):
        OptimizerConfig(max_full_evals=0)
    with pytest.raises(ConfigError):
        compile_program(screening_contract(), TRAIN, VAL, make_metric("expanded"), student(), STUDENT,
                        ScriptedMockBackend([]), REFLECT, OptimizerConfig(max_full_evals=2,
                                                                          reflection_minibatch_size=3))


def test_backend_error_carries_partial_trace():
    with pytest.raises(BackendError) as info:
        compile_with(ScriptedMockBackend([]), 2)
    trace = info.value.trace
    assert trace.budget_used == 1
    assert trace.events[-1]["event"] == "error"


def test_compile_is_deterministic():
    def run():
        reflector = ScriptedMockBackend([f"{STARTING_HARNESS}\n{i}\n{FIX}" for i in range(9)], repeat=True)
        return compile_with(reflector, 4, seed=5)[1].to_jsonl()
    assert run() == run()


def _cand(cid, scores):
    return Candidate(cid, f"h{cid}", None if cid == 0 else 0, tuple(scores), sum(scores) / len(scores),
                     "baseline" if cid == 0 else "reflection", "fp")


def test_select_parent():
    rng = SplitMix64(0)
    only = _cand(0, [0.5])
    assert select_parent([only], rng) is only
    low, high = _cand(0, [0.5, 0.5]), _cand(1, [0.8, 0.8])
    assert select_parent([low, high], rng, "best_first") is high
    a, b = _cand(0, [1.0, 0.0]), _cand(1, [0.0, 1.0])
    chosen = {select_parent([a, b], SplitMix64(i), "frontier").candidate_id for i in range(40)}
    assert chosen == {0, 1}
    dominated = _cand(2, [0.0, 0.0])
    assert all(select_parent([a, b, dominated], SplitMix64(i)).candidate_id != 2 for i in range(40))


def test_reflection_request_contents():
    from promptcal.backend import ChatExchange
    from promptcal.metric import Prediction

    metric = make_metric("expanded")
    parent = Candidate(0, STARTING_HARNESS, None, (0.0,), 0.0, "baseline", "fp")
    long = make_record("x", "include", abstract="y" * 2000)
    outcomes = [(long, ChatExchange("s", "u1", "resp1"), metric(long, Prediction("exclude", "- a b\n- c d"))),
                (VAL[1], ChatExchange("s", "u2", "resp2"), metric(VAL[1], Prediction("include", "- a b\n- c d")))]
    system, user = build_reflection_request(parent, outcomes)
    assert STARTING_HARNESS in user
    for _, ex, o in outcomes:
        assert o.feedback in user and ex.response_text in user
    assert "y" * 1200 + "\n" in user and "y" * 1201 not in user
    assert "ONLY part you may rewrite" in system


def test_clean_proposal():
    assert clean_proposal("  text \n") == "text"
    assert clean_proposal("```text\nbody\n```") == "body"
    assert clean_proposal("```\nbody\n```") == "body"
    assert clean_proposal("") == ""


def test_config_round_trip():
    cfg = OptimizerConfig(max_full_evals=6, seed=3, parent_strategy="best_first")
    again = OptimizerConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
    # to_dict records the effective iteration cap, so the reloaded config behaves identically
    assert again.to_dict() == cfg.to_dict()
    assert again.iteration_cap == cfg.iteration_cap == 30


@settings(max_examples=25, deadline=None)
@given(proposals=st.lists(st.text(max_size=60), min_size=1, max_size=8), budget=st.integers(1, 5),
       seed=st.integers(0, 1000))
def test_layer_law_random_reflectors(proposals, budget, seed):
    reflector = ScriptedMockBackend([p + (FIX if i % 3 == 0 else "") for i, p in enumerate(proposals)],
                                    repeat=True)
    program, trace = compile_with(reflector, budget, seed=seed)
    base = screening_contract().interface_fingerprint
    assert {c.interface_fingerprint for c in trace.candidates} == {base}
    assert {e["interface_fingerprint"] for e in trace.of_kind("full_eval")} == {base}
    assert program.contract.interface_fingerprint == base
    assert trace.budget_used <= budget
