from __future__ import annotations

from dataclasses import replace

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import make_pipeline
from dualcare.agents import (
    NAIVE_MARKER,
    REGEN_HEADING,
    UNKNOWN_DEPARTMENT,
    ConfidenceReport,
    ReflectionConfig,
    assess_confidence,
    best_round,
    doctor_plan,
    role_marker,
    run_consultation,
    run_retrieval_with_reflection,
)
from dualcare.dataset.fixture import FixtureSpec, generate_fixture
from dualcare.kb import Role
from dualcare.llm import ScriptedChat, SchemaTag, TransportError
from dualcare.llm.client import RetryPolicy

NO_SLEEP = RetryPolicy(sleep=lambda s: None)
DOC = role_marker(Role.DOCTOR)


def conf(x):
    return {"sufficiency": x, "accuracy": x}


@pytest.fixture(scope="module")
def fx():
    return generate_fixture(FixtureSpec(seed=11, n_cases=6, reject_adoption=(2,)))


@pytest.fixture(scope="module")
def base(fx):
    return make_pipeline(fx)


def with_rules(pipe, fx, rules, **kw):
    return replace(pipe, chat=ScriptedChat([*rules, *fx.script]), **kw)


def doctor_loop(pipe, seq, tau=0.6, r_max=2, regen=None):
    rules = [{"tag": "Confidence", "match": [DOC], "sequence": [conf(x) for x in seq]}]
    if regen is not None:
        rules.append({"tag": "Queries", "match": [DOC, f"## {REGEN_HEADING}"], "payload": {"queries": regen}})
    p = replace(pipe, chat=ScriptedChat(rules), reflection=ReflectionConfig(tau=tau, r_max=r_max))
    return run_retrieval_with_reflection(Role.DOCTOR, ["fever"], "ctx", p)


# --- confidence reports ------------------------------------------------------------


def test_confidence_overall_is_min():
    r = ConfidenceReport.of(0.7, 0.4)
    assert r.overall == 0.4
    with pytest.raises(ValueError):
        ConfidenceReport(0.7, 0.4, 0.7)
    with pytest.raises(ValueError):
        ConfidenceReport.of(1.2, 0.4)


def test_empty_evidence_forces_zero_sufficiency():
    chat = ScriptedChat()
    r = assess_confidence(Role.DOCTOR, "ctx", [], chat)
    assert r.sufficiency == 0.0 and r.overall == 0.0
    assert len(chat.calls_for(SchemaTag.CONFIDENCE)) == 1


def test_reflection_config_bounds():
    for bad in (dict(tau=1.5), dict(r_max=-1), dict(q_max=0)):
        with pytest.raises(ValueError):
            ReflectionConfig(**bad)


# --- reflection state machine ------------------------------------------------------


@pytest.mark.parametrize("seq,rounds,stop", [([0.8], 1, "confident"), ([0.4, 0.8], 2, "confident"), ([0.3, 0.3, 0.3], 3, "round_budget")])
def test_reflection_round_counts(base, seq, rounds, stop):
    out = doctor_loop(base, seq, regen=["fever cough"])
    assert len(out.rounds) == rounds and out.stop_reason == stop
    assert [r.round for r in out.rounds] == list(range(rounds))


def test_best_round_selection_and_ties(base):
    out = doctor_loop(base, [0.5, 0.3, 0.4], regen=["cough"])
    assert out.best_round == 0
    assert out.final_evidence == out.rounds[0].evidence
    assert best_round([ConfidenceReport.of(0.4, 0.4), ConfidenceReport.of(0.4, 0.4)]) == 1


def test_regenerated_queries_are_used(base):
    out = doctor_loop(base, [0.2, 0.9], regen=["new query"])
    assert out.rounds[0].queries == ("fever",)
    assert out.rounds[1].queries == ("new query",)


def test_empty_regeneration_reuses_once_then_stops(base):
    out = doctor_loop(base, [0.1] * 5, r_max=4, regen=[])
    assert len(out.rounds) == 2 and out.stop_reason == "no_new_queries"
    assert out.rounds[1].queries == out.rounds[0].queries
    assert "reused" in out.rounds[1].note


@settings(max_examples=40, deadline=None)
@given(seq=st.lists(st.sampled_from([0.0, 0.2, 0.5, 0.6, 0.7, 1.0]), min_size=1, max_size=5), tau=st.sampled_from([0.0, 0.3, 0.6, 1.0]), r_max=st.integers(0, 3))
def test_reflection_properties(base, seq, tau, r_max):
    out = doctor_loop(base, seq, tau=tau, r_max=r_max, regen=["fever again"])
    padded = seq + [seq[-1]] * 10  # the sequence rule repeats its last entry
    expected = next((i + 1 for i in range(r_max + 1) if padded[i] >= tau), r_max + 1)
    assert len(out.rounds) == expected
    overall = [r.report.overall for r in out.rounds]
    assert out.best_round == max(range(len(overall)), key=lambda i: (overall[i], i))
    if tau == 0.0:
        assert len(out.rounds) == 1


# --- planning -----------------------------------------------------------------------------


def test_plan_truncates_and_coerces_department():
    chat = ScriptedChat([{"tag": "Plan", "match": [], "payload": {"department": "Astrology", "queries": list("abcdef")}}])
    p = doctor_plan("cough", chat, q_max=3)
    assert p.queries == ("a", "b", "c")
    assert p.department == UNKNOWN_DEPARTMENT
    assert any(f.startswith("queries_truncated") for f in p.flags)
    assert any(f.startswith("department_coerced") for f in p.flags)


def test_plan_matches_department_case_insensitively():
    chat = ScriptedChat([{"tag": "Plan", "match": [], "payload": {"department": " Internal Medicine ", "queries": ["q"]}}])
    assert doctor_plan("cough", chat).department == "internal medicine"


# --- consultation flow ---------------------------------------------------------------------


def test_honest_consultation_traces(fx, base):
    case = fx.cases[0]
    rec = run_consultation(case, replace(base, chat=ScriptedChat(fx.script)))
    assert rec.ok and rec.stages[-1] == "pharmacist_recommend"
    assert rec.doctor.diagnosis.primary == case.gold_diagnosis
    assert rec.pharmacist.medication.selected_option == case.gold_medication_letter
    dx, rx = fx.planted[case.case_id]
    assert any(d.chunk_id.startswith(dx + "#") for d in rec.doctor.final_evidence)
    assert any(d.chunk_id.startswith(rx + "#") for d in rec.pharmacist.final_evidence)


def test_pharmacist_never_sees_doctor_evidence(fx, base):
    chat = ScriptedChat(fx.script)
    case = fx.cases[0]
    rec = run_consultation(case, replace(base, chat=chat))
    doctor_only = {d.text for d in rec.doctor.final_evidence} - {d.text for d in rec.pharmacist.final_evidence}
    assert doctor_only
    for req in chat.calls:
        if role_marker(Role.PHARMACIST) in req.user_prompt:
            assert not any(t in req.user_prompt for t in doctor_only)


def test_rejected_diagnosis_is_withheld(fx, base):
    case = fx.cases[2]
    rec = run_consultation(case, replace(base, chat=ScriptedChat(fx.script)))
    assert rec.pharmacist.adoption.adopt is False
    assert case.gold_diagnosis not in rec.pharmacist.plan_prompt
    kept = run_consultation(fx.cases[0], replace(base, chat=ScriptedChat(fx.script)))
    assert fx.cases[0].gold_diagnosis in kept.pharmacist.plan_prompt


@pytest.mark.parametrize("doctor_on,pharmacist_on", [(False, True), (True, False), (False, False)])
def test_naive_modes(fx, base, doctor_on, pharmacist_on):
    chat = ScriptedChat(fx.script)
    case = fx.cases[1]
    rec = run_consultation(case, replace(base, chat=chat, doctor_on=doctor_on, pharmacist_on=pharmacist_on))
    assert rec.ok
    for on, trace in ((doctor_on, rec.doctor), (pharmacist_on, rec.pharmacist)):
        if not on:
            assert trace.mode == "naive"
            assert len(trace.reflection.rounds) == 1
            assert trace.reflection.rounds[0].queries == (case.complaint,)
            assert trace.reflection.rounds[0].report is None
    naive_tags = {r.schema_tag for r in chat.calls if NAIVE_MARKER in r.system_prompt}
    expected = set()
    if not doctor_on:
        expected.add(SchemaTag.DIAGNOSIS)
        assert not chat.calls_for(SchemaTag.PLAN)
    if not pharmacist_on:
        expected.add(SchemaTag.MEDICATION)
        assert not chat.calls_for(SchemaTag.ADOPTION)
    assert naive_tags == expected


def test_stage_failure_keeps_partial_trace(fx, base):
    bad = [{"tag": "Diagnosis", "match": [], "payload": {"ranked": [{"condition": "x"}]}}]
    rec = run_consultation(fx.cases[0], with_rules(base, fx, bad))
    assert not rec.ok and rec.failed_stage == "doctor_diagnose"
    assert rec.doctor.reflection is not None and rec.pharmacist is None
    assert "SchemaViolation" in rec.error and not rec.infrastructure_error


def test_option_violation_fails_after_repair(fx, base):
    bad = [{"tag": "Diagnosis", "match": [], "payload": {"ranked": [{"condition": c} for c in ("zz1", "zz2", "zz3")]}}]
    chat = ScriptedChat([*bad, *fx.script])
    rec = run_consultation(fx.cases[0], replace(base, chat=chat))
    assert rec.failed_stage == "doctor_diagnose"
    assert len(chat.calls_for(SchemaTag.DIAGNOSIS)) == 2


def test_transport_failure_is_flagged(fx, base):
    class Down:
        def chat(self, req):
            raise TransportError("offline")

    rec = run_consultation(fx.cases[0], replace(base, chat=Down()))
    assert rec.failed_stage == "doctor_plan" and rec.infrastructure_error


def test_record_serializes_without_timing_by_default(fx, base):
    rec = run_consultation(fx.cases[0], replace(base, chat=ScriptedChat(fx.script)))
    d = rec.to_dict()
    assert d["timing"] == {} and d["ok"] is True
    timed = run_consultation(fx.cases[0], replace(base, chat=ScriptedChat(fx.script), record_timing=True))
    assert set(timed.timing) == set(timed.stages)
