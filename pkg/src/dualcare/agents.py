"""Doctor and pharmacist agents and the consultation that chains them.

Each agent plans queries, retrieves, rates its evidence, re-plans while the
rating stays under the threshold, then answers. The doctor's diagnosis is
handed to the pharmacist, who decides whether to build on it.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Any, Optional, Sequence

from dualcare.dataset import PatientCase, resolve_option
from dualcare.kb import KnowledgeBase, Role
from dualcare.llm import ChatRequest, SchemaTag, complete
from dualcare.llm.client import DEFAULT_RETRY, ChatBackend, EmbeddingBackend, RerankBackend, RetryPolicy
from dualcare.llm.errors import TransportError
from dualcare.llm.prompt import format_options, join_sections, round_tag, section
from dualcare.retrieval import RetrievalParams, RetrievalResult, RetrievedDoc, merge_results, search
from dualcare.textutil import normalize_answer

logger = logging.getLogger(__name__)

DEFAULT_DEPARTMENTS = (
    "internal medicine",
    "surgery",
    "pediatrics",
    "obstetrics and gynecology",
    "dermatology",
    "otolaryngology",
    "ophthalmology",
)
UNKNOWN_DEPARTMENT = "unknown"

DOCTOR_SYSTEM = (
    "You are the doctor agent of a two-agent clinical team. Work like an attending physician: read the "
    "patient's own words, weigh symptoms and history, decide which department the case belongs to, and "
    "ground every conclusion in the reference passages you are given."
)
PHARMACIST_SYSTEM = (
    "You are the pharmacist agent of a two-agent clinical team. You receive the doctor's conclusions but "
    "decide independently whether they hold up. Choose medication with attention to indications, "
    "contraindications, interactions and dosing, grounded in the reference passages you are given."
)
NAIVE_MARKER = "[naive-rag]"
NAIVE_SYSTEM = (
    f"{NAIVE_MARKER} You are a medical assistant. Answer directly from the reference passages retrieved "
    "for the patient's complaint."
)
REGEN_HEADING = "Previous queries"


def role_marker(role: Role) -> str:
    return section("Role", Role(role).value)


@dataclass(frozen=True)
class ReflectionConfig:
    tau: float = 0.6
    r_max: int = 2
    q_max: int = 4

    def __post_init__(self):
        if not 0.0 <= self.tau <= 1.0:
            raise ValueError("tau must lie in [0, 1]")
        if self.r_max < 0:
            raise ValueError("r_max must be >= 0")
        if self.q_max < 1:
            raise ValueError("q_max must be >= 1")


@dataclass(frozen=True)
class DiagnosticPlan:
    department: str
    queries: tuple[str, ...]
    reasoning: str = ""
    flags: tuple[str, ...] = ()

    def __post_init__(self):
        if not self.queries:
            raise ValueError("a plan needs at least one query")

    def to_dict(self) -> dict:
        return {
            "department": self.department,
            "queries": list(self.queries),
            "reasoning": self.reasoning,
            "flags": list(self.flags),
        }


@dataclass(frozen=True)
class ConfidenceReport:
    sufficiency: float
    accuracy: float
    overall: float
    rationale: str = ""

    def __post_init__(self):
        for name in ("sufficiency", "accuracy", "overall"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")
        if self.overall != min(self.sufficiency, self.accuracy):
            raise ValueError("overall must equal min(sufficiency, accuracy)")

    @classmethod
    def of(cls, sufficiency: float, accuracy: float, rationale: str = "") -> "ConfidenceReport":
        return cls(sufficiency, accuracy, min(sufficiency, accuracy), rationale)

    def to_dict(self) -> dict:
        return {
            "sufficiency": self.sufficiency,
            "accuracy": self.accuracy,
            "overall": self.overall,
            "rationale": self.rationale,
        }


@dataclass(frozen=True)
class Diagnosis:
    ranked: tuple[tuple[str, str], ...]  # (condition, rationale), most likely first

    def __post_init__(self):
        if len(self.ranked) < 3:
            raise ValueError("a diagnosis ranks at least three conditions")
        norm = [normalize_answer(c) for c, _ in self.ranked]
        if len(set(norm)) != len(norm):
            raise ValueError("ranked conditions must be distinct")

    @property
    def primary(self) -> str:
        return self.ranked[0][0]

    @property
    def conditions(self) -> list[str]:
        return [c for c, _ in self.ranked]

    def to_dict(self) -> dict:
        return {"ranked": [{"condition": c, "rationale": r} for c, r in self.ranked]}


@dataclass(frozen=True)
class AdoptionDecision:
    adopt: bool
    justification: str = ""

    def to_dict(self) -> dict:
        return {"adopt": self.adopt, "justification": self.justification}


@dataclass(frozen=True)
class MedicationPlan:
    recommended: tuple[tuple[str, str], ...]  # (drug, rationale)
    selected_option: Optional[str] = None

    def __post_init__(self):
        if not self.recommended:
            raise ValueError("a medication plan recommends at least one drug")
        norm = [normalize_answer(d) for d, _ in self.recommended]
        if len(set(norm)) != len(norm):
            raise ValueError("recommended drugs must be distinct")

    @property
    def primary(self) -> str:
        return self.recommended[0][0]

    def to_dict(self) -> dict:
        return {
            "recommended": [{"drug": d, "rationale": r} for d, r in self.recommended],
            "selected_option": self.selected_option,
        }


@dataclass
class Pipeline:
    """Everything a consultation needs: indexes, backends and knobs."""

    kb: KnowledgeBase
    chat: ChatBackend
    embedder: EmbeddingBackend
    reranker: RerankBackend
    retrieval: RetrievalParams = field(default_factory=RetrievalParams)
    reflection: ReflectionConfig = field(default_factory=ReflectionConfig)
    departments: tuple[str, ...] = DEFAULT_DEPARTMENTS
    doctor_on: bool = True
    pharmacist_on: bool = True
    retry: RetryPolicy = field(default_factory=lambda: DEFAULT_RETRY)
    record_timing: bool = False

    def snapshot(self) -> dict:
        return {
            "top_k": self.retrieval.top_k,
            "top_n": self.retrieval.top_n,
            "tau": self.reflection.tau,
            "r_max": self.reflection.r_max,
            "q_max": self.reflection.q_max,
            "departments": list(self.departments),
            "doctor_on": self.doctor_on,
            "pharmacist_on": self.pharmacist_on,
        }


def _evidence_block(evidence: Sequence[RetrievedDoc]) -> str:
    if not evidence:
        return "(no passages retrieved)"
    return "\n\n".join(f"[{d.rank}] ({d.chunk_id})\n{d.text}" for d in evidence)


def _diagnosis_block(d: Diagnosis) -> str:
    return "\n".join(f"{i}. {c}: {r}" if r else f"{i}. {c}" for i, (c, r) in enumerate(d.ranked, 1))


# --- doctor planning ----------------------------------------------------------


def doctor_plan(
    complaint: str,
    backend: ChatBackend,
    *,
    q_max: int = 4,
    departments: Sequence[str] = DEFAULT_DEPARTMENTS,
    retry: RetryPolicy = DEFAULT_RETRY,
) -> DiagnosticPlan:
    if not complaint.strip():
        raise ValueError("complaint must be non-empty")
    user = join_sections(
        role_marker(Role.DOCTOR),
        section("Patient complaint", complaint),
        section("Departments", "\n".join(departments)),
        section(
            "Task",
            "Pick the department that should handle this patient (or 'unknown'). Then write between 1 and "
            f"{q_max} search queries for the reference library that cover the presenting symptoms, the "
            "diagnostic criteria of the conditions you suspect, and how to tell those conditions apart.",
        ),
    )
    p = complete(ChatRequest(DOCTOR_SYSTEM, user, SchemaTag.PLAN), backend, retry=retry).payload
    flags = []
    queries = list(p.queries)
    if len(queries) > q_max:
        logger.info("plan returned %d queries, keeping the first %d", len(queries), q_max)
        flags.append(f"queries_truncated:{len(queries)}->{q_max}")
        queries = queries[:q_max]
    dept = p.department.strip().casefold()
    known = {d.casefold(): d for d in departments}
    if dept in known:
        dept = known[dept]
    else:
        if dept != UNKNOWN_DEPARTMENT:
            flags.append(f"department_coerced:{p.department}")
        dept = UNKNOWN_DEPARTMENT
    return DiagnosticPlan(dept, tuple(queries), p.reasoning, tuple(flags))


# --- confidence and reflection ------------------------------------------------


def assess_confidence(
    role: Role,
    query_context: str,
    evidence: Sequence[RetrievedDoc],
    backend: ChatBackend,
    *,
    round: int = 0,
    retry: RetryPolicy = DEFAULT_RETRY,
) -> ConfidenceReport:
    """Rate the evidence; overall is always recomputed as min(sufficiency, accuracy)."""
    system = DOCTOR_SYSTEM if Role(role) is Role.DOCTOR else PHARMACIST_SYSTEM
    user = join_sections(
        role_marker(role),
        round_tag(round),
        section("Context", query_context),
        section("Evidence", _evidence_block(evidence)),
        section(
            "Task",
            "Rate the evidence from 0 to 1 on two axes. sufficiency: does it contain enough to answer? "
            "accuracy: is it correct and on point for this patient?",
        ),
    )
    p = complete(ChatRequest(system, user, SchemaTag.CONFIDENCE), backend, retry=retry).payload
    sufficiency = 0.0 if not evidence else p.sufficiency
    return ConfidenceReport.of(sufficiency, p.accuracy, p.rationale)


def regenerate_queries(
    role: Role,
    query_context: str,
    previous: Sequence[str],
    report: ConfidenceReport,
    backend: ChatBackend,
    *,
    round: int,
    q_max: int = 4,
    retry: RetryPolicy = DEFAULT_RETRY,
) -> list[str]:
    system = DOCTOR_SYSTEM if Role(role) is Role.DOCTOR else PHARMACIST_SYSTEM
    user = join_sections(
        role_marker(role),
        round_tag(round),
        section("Context", query_context),
        section(REGEN_HEADING, "\n".join(f"- {q}" for q in previous)),
        section(
            "Assessment",
            f"sufficiency={report.sufficiency:.2f} accuracy={report.accuracy:.2f}\n{report.rationale}",
        ),
        section("Task", f"The evidence fell short. Write up to {q_max} improved search queries."),
    )
    p = complete(ChatRequest(system, user, SchemaTag.QUERIES), backend, retry=retry).payload
    return list(p.queries)[:q_max]


@dataclass
class RoundTrace:
    round: int
    queries: tuple[str, ...]
    results: list[RetrievalResult]
    evidence: list[RetrievedDoc]
    report: Optional[ConfidenceReport] = None
    note: str = ""

    def to_dict(self) -> dict:
        return {
            "round": self.round,
            "queries": list(self.queries),
            "results": [r.to_dict() for r in self.results],
            "evidence": [d.chunk_id for d in self.evidence],
            "report": self.report.to_dict() if self.report else None,
            "note": self.note,
        }


@dataclass
class ReflectionOutcome:
    rounds: list[RoundTrace]
    best_round: int
    stop_reason: str

    @property
    def reports(self) -> list[ConfidenceReport]:
        return [r.report for r in self.rounds if r.report is not None]

    @property
    def results(self) -> list[list[RetrievalResult]]:
        return [r.results for r in self.rounds]

    @property
    def final_evidence(self) -> list[RetrievedDoc]:
        return self.rounds[self.best_round].evidence


def best_round(reports: Sequence[ConfidenceReport]) -> int:
    """Index of the highest-overall round; ties go to the later round."""
    return max(range(len(reports)), key=lambda i: (reports[i].overall, i))


def _retrieve_round(role: Role, queries: Sequence[str], pipe: Pipeline, r: int) -> tuple[list[RetrievalResult], list[RetrievedDoc]]:
    results = [
        search(role, q, pipe.kb, pipe.embedder, pipe.reranker, pipe.retrieval, round=r, retry=pipe.retry)
        for q in queries
    ]
    return results, merge_results(results)


def run_retrieval_with_reflection(
    role: Role,
    queries: Sequence[str],
    query_context: str,
    pipe: Pipeline,
) -> ReflectionOutcome:
    if not queries:
        raise ValueError("reflection loop needs at least one query")
    cfg = pipe.reflection
    queries = tuple(queries)
    rounds: list[RoundTrace] = []
    reused = False
    stop = ""
    note = ""
    for r in range(cfg.r_max + 1):
        results, evidence = _retrieve_round(role, queries, pipe, r)
        report = assess_confidence(role, query_context, evidence, pipe.chat, round=r, retry=pipe.retry)
        rounds.append(RoundTrace(r, queries, results, evidence, report, note))
        note = ""
        if report.overall >= cfg.tau:
            stop = "confident"
            break
        if r == cfg.r_max:
            stop = "round_budget"
            break
        fresh = regenerate_queries(
            role, query_context, queries, report, pipe.chat, round=r + 1, q_max=cfg.q_max, retry=pipe.retry
        )
        if not fresh:
            if reused:
                stop = "no_new_queries"
                break
            reused = True
            note = "regeneration empty; reused previous queries"
        else:
            queries = tuple(fresh)
    return ReflectionOutcome(rounds, best_round([t.report for t in rounds]), stop)


# --- answers --------------------------------------------------------------------


def _option_checker(options, label: str):
    listing = format_options(options)

    def canon(answer: str) -> str:
        letter = resolve_option(answer, options)
        if letter is None:
            raise ValueError(f"{label} {answer!r} is not one of the options:\n{listing}")
        return letter

    return canon


def doctor_diagnose(
    complaint: str,
    evidence: Sequence[RetrievedDoc],
    backend: ChatBackend,
    *,
    options=None,
    naive: bool = False,
    retry: RetryPolicy = DEFAULT_RETRY,
) -> Diagnosis:
    task = "Rank at least three distinct candidate diagnoses, most likely first, each with a short rationale."
    if options:
        task += " Every condition must be one of the diagnosis options; give the option text."
    user = join_sections(
        role_marker(Role.DOCTOR),
        section("Patient complaint", complaint),
        section("Evidence", _evidence_block(evidence)),
        section("Diagnosis options", format_options(options)) if options else "",
        section("Task", task),
    )
    check = None
    if options:
        canon = _option_checker(options, "condition")

        def check(p):
            letters = [canon(r.condition) for r in p.ranked]
            if len(set(letters)) != len(letters):
                raise ValueError("ranked conditions name the same option more than once")

    p = complete(
        ChatRequest(NAIVE_SYSTEM if naive else DOCTOR_SYSTEM, user, SchemaTag.DIAGNOSIS), backend, check=check, retry=retry
    ).payload
    if options:
        text = dict(options)
        ranked = tuple((text[resolve_option(r.condition, options)], r.rationale) for r in p.ranked)
    else:
        ranked = tuple((r.condition.strip(), r.rationale) for r in p.ranked)
    return Diagnosis(ranked)


def pharmacist_adopt(
    complaint: str,
    diagnosis: Diagnosis,
    backend: ChatBackend,
    *,
    retry: RetryPolicy = DEFAULT_RETRY,
) -> AdoptionDecision:
    user = join_sections(
        role_marker(Role.PHARMACIST),
        section("Patient complaint", complaint),
        section("Doctor's diagnosis", _diagnosis_block(diagnosis)),
        section(
            "Task",
            "Decide whether the doctor's diagnosis is consistent with the complaint and sound enough to "
            "build a medication plan on. Answer adopt=true or adopt=false with a justification.",
        ),
    )
    p = complete(ChatRequest(PHARMACIST_SYSTEM, user, SchemaTag.ADOPTION), backend, retry=retry).payload
    return AdoptionDecision(p.adopt, p.justification)


def pharmacist_query_context(complaint: str, diagnosis: Optional[Diagnosis]) -> str:
    if diagnosis is None:
        return complaint
    return f"{complaint}\n\nWorking diagnosis: {diagnosis.primary}"


def pharmacist_plan(
    diagnosis: Diagnosis,
    complaint: str,
    adoption: AdoptionDecision,
    backend: ChatBackend,
    *,
    q_max: int = 4,
    retry: RetryPolicy = DEFAULT_RETRY,
) -> tuple[list[str], str]:
    """Therapeutic search queries, plus the exact prompt sent.

    The diagnosis only reaches the prompt when the pharmacist adopted it.
    """
    user = join_sections(
        role_marker(Role.PHARMACIST),
        section("Patient complaint", complaint),
        section("Doctor's diagnosis", _diagnosis_block(diagnosis)) if adoption.adopt else "",
        section(
            "Task",
            f"Write between 1 and {q_max} search queries for pharmaceutical references: candidate drugs, "
            "how they work, when they are indicated, contraindications and interactions relevant here.",
        ),
    )

    def check(p):
        if not p.queries:
            raise ValueError("at least one query is required")

    p = complete(ChatRequest(PHARMACIST_SYSTEM, user, SchemaTag.QUERIES), backend, check=check, retry=retry).payload
    queries = list(p.queries)
    if len(queries) > q_max:
        logger.info("pharmacist returned %d queries, keeping the first %d", len(queries), q_max)
        queries = queries[:q_max]
    return queries, user


def pharmacist_recommend(
    complaint: str,
    diagnosis: Optional[Diagnosis],
    evidence: Sequence[RetrievedDoc],
    backend: ChatBackend,
    *,
    options=None,
    naive: bool = False,
    retry: RetryPolicy = DEFAULT_RETRY,
) -> MedicationPlan:
    task = "Recommend one or more distinct drugs, best first, each with a short rationale."
    if options:
        task += " Choose from the medication options: set selected_option to the letter of your first choice."
    user = join_sections(
        role_marker(Role.PHARMACIST),
        section("Patient complaint", complaint),
        section("Doctor's diagnosis", _diagnosis_block(diagnosis)) if diagnosis is not None else "",
        section("Evidence", _evidence_block(evidence)),
        section("Medication options", format_options(options)) if options else "",
        section("Task", task),
    )
    check = None
    if options:
        canon = _option_checker(options, "drug")

        def check(p):
            if p.selected_option is None:
                raise ValueError("selected_option is required for an option-based case")
            chosen = canon(p.selected_option)
            letters = [canon(r.drug) for r in p.recommended]
            if len(set(letters)) != len(letters):
                raise ValueError("recommended drugs name the same option more than once")
            if letters[0] != chosen:
                raise ValueError("selected_option must match the first recommended drug")

    p = complete(
        ChatRequest(NAIVE_SYSTEM if naive else PHARMACIST_SYSTEM, user, SchemaTag.MEDICATION),
        backend,
        check=check,
        retry=retry,
    ).payload
    if options:
        text = dict(options)
        recs = tuple((text[resolve_option(r.drug, options)], r.rationale) for r in p.recommended)
        return MedicationPlan(recs, resolve_option(p.selected_option, options))
    return MedicationPlan(tuple((r.drug.strip(), r.rationale) for r in p.recommended), None)


# --- consultation ----------------------------------------------------------------


@dataclass
class DoctorTrace:
    mode: str  # "agent" or "naive"
    plan: Optional[DiagnosticPlan] = None
    reflection: Optional[ReflectionOutcome] = None
    diagnosis: Optional[Diagnosis] = None

    @property
    def rounds(self) -> list[RoundTrace]:
        return self.reflection.rounds if self.reflection else []

    @property
    def reports(self) -> list[ConfidenceReport]:
        return self.reflection.reports if self.reflection else []

    @property
    def final_evidence(self) -> list[RetrievedDoc]:
        return self.reflection.final_evidence if self.reflection else []

    def to_dict(self) -> dict:
        ref = self.reflection
        return {
            "mode": self.mode,
            "plan": self.plan.to_dict() if self.plan else None,
            "rounds": [r.to_dict() for r in ref.rounds] if ref else [],
            "best_round": ref.best_round if ref else None,
            "stop_reason": ref.stop_reason if ref else None,
            "final_evidence": [d.to_dict() for d in self.final_evidence],
            "diagnosis": self.diagnosis.to_dict() if self.diagnosis else None,
        }


@dataclass
class PharmacistTrace:
    mode: str
    adoption: Optional[AdoptionDecision] = None
    queries: tuple[str, ...] = ()
    plan_prompt: str = ""
    reflection: Optional[ReflectionOutcome] = None
    medication: Optional[MedicationPlan] = None

    @property
    def rounds(self) -> list[RoundTrace]:
        return self.reflection.rounds if self.reflection else []

    @property
    def reports(self) -> list[ConfidenceReport]:
        return self.reflection.reports if self.reflection else []

    @property
    def final_evidence(self) -> list[RetrievedDoc]:
        return self.reflection.final_evidence if self.reflection else []

    def to_dict(self) -> dict:
        ref = self.reflection
        return {
            "mode": self.mode,
            "adoption": self.adoption.to_dict() if self.adoption else None,
            "queries": list(self.queries),
            "plan_prompt": self.plan_prompt,
            "rounds": [r.to_dict() for r in ref.rounds] if ref else [],
            "best_round": ref.best_round if ref else None,
            "stop_reason": ref.stop_reason if ref else None,
            "final_evidence": [d.to_dict() for d in self.final_evidence],
            "medication": self.medication.to_dict() if self.medication else None,
        }


@dataclass
class ConsultationRecord:
    case_id: str
    doctor: DoctorTrace
    pharmacist: Optional[PharmacistTrace] = None
    config: dict[str, Any] = field(default_factory=dict)
    timing: dict[str, float] = field(default_factory=dict)
    stages: list[str] = field(default_factory=list)
    failed_stage: Optional[str] = None
    error: Optional[str] = None
    infrastructure_error: bool = False  # the failure came from an unreachable backend

    @property
    def ok(self) -> bool:
        return self.failed_stage is None

    def to_dict(self) -> dict:
        return {
            "case_id": self.case_id,
            "ok": self.ok,
            "failed_stage": self.failed_stage,
            "error": self.error,
            "infrastructure_error": self.infrastructure_error,
            "stages": list(self.stages),
            "doctor": self.doctor.to_dict(),
            "pharmacist": self.pharmacist.to_dict() if self.pharmacist else None,
            "config": self.config,
            "timing": self.timing,
        }


class _Stages:
    """Runs named stages in order, remembering which one failed."""

    def __init__(self, record: ConsultationRecord, timed: bool):
        self.record = record
        self.timed = timed

    def run(self, name: str, fn, *args, **kwargs):
        t0 = time.perf_counter()
        try:
            out = fn(*args, **kwargs)
        except Exception as exc:
            self.record.failed_stage = name
            self.record.error = f"{type(exc).__name__}: {exc}"
            self.record.infrastructure_error = isinstance(exc, TransportError)
            raise _StageFailed from exc
        if self.timed:
            self.record.timing[name] = round(time.perf_counter() - t0, 6)
        self.record.stages.append(name)
        return out


class _StageFailed(Exception):
    pass


def _naive_reflection(role: Role, complaint: str, pipe: Pipeline) -> ReflectionOutcome:
    results, evidence = _retrieve_round(role, [complaint], pipe, 0)
    return ReflectionOutcome([RoundTrace(0, (complaint,), results, evidence)], 0, "naive")


def run_consultation(case: PatientCase, pipe: Pipeline) -> ConsultationRecord:
    """Doctor stage, then pharmacist stage. A failing stage ends the run but keeps the partial trace."""
    rec = ConsultationRecord(case.case_id, DoctorTrace("agent" if pipe.doctor_on else "naive"), config=pipe.snapshot())
    st = _Stages(rec, pipe.record_timing)
    cfg = pipe.reflection
    complaint = case.complaint
    try:
        doc = rec.doctor
        if pipe.doctor_on:
            doc.plan = st.run(
                "doctor_plan", doctor_plan, complaint, pipe.chat, q_max=cfg.q_max, departments=pipe.departments, retry=pipe.retry
            )
            context = f"{complaint}\n\nDepartment: {doc.plan.department}"
            doc.reflection = st.run(
                "doctor_retrieval", run_retrieval_with_reflection, Role.DOCTOR, doc.plan.queries, context, pipe
            )
        else:
            doc.reflection = st.run("doctor_retrieval", _naive_reflection, Role.DOCTOR, complaint, pipe)
        doc.diagnosis = st.run(
            "doctor_diagnose",
            doctor_diagnose,
            complaint,
            doc.final_evidence,
            pipe.chat,
            options=case.diagnosis_options,
            naive=not pipe.doctor_on,
            retry=pipe.retry,
        )

        ph = rec.pharmacist = PharmacistTrace("agent" if pipe.pharmacist_on else "naive")
        diagnosis = doc.diagnosis
        if pipe.pharmacist_on:
            ph.adoption = st.run("pharmacist_adopt", pharmacist_adopt, complaint, diagnosis, pipe.chat, retry=pipe.retry)
            queries, ph.plan_prompt = st.run(
                "pharmacist_plan", pharmacist_plan, diagnosis, complaint, ph.adoption, pipe.chat, q_max=cfg.q_max, retry=pipe.retry
            )
            ph.queries = tuple(queries)
            adopted = diagnosis if ph.adoption.adopt else None
            ph.reflection = st.run(
                "pharmacist_retrieval",
                run_retrieval_with_reflection,
                Role.PHARMACIST,
                ph.queries,
                pharmacist_query_context(complaint, adopted),
                pipe,
            )
        else:
            # naive stage passes the diagnosis straight through
            ph.adoption = AdoptionDecision(True, "naive pipeline: diagnosis passed through unchanged")
            ph.queries = (complaint,)
            adopted = diagnosis
            ph.reflection = st.run("pharmacist_retrieval", _naive_reflection, Role.PHARMACIST, complaint, pipe)
        ph.medication = st.run(
            "pharmacist_recommend",
            pharmacist_recommend,
            complaint,
            adopted,
            ph.final_evidence,
            pipe.chat,
            options=case.medication_options,
            naive=not pipe.pharmacist_on,
            retry=pipe.retry,
        )
    except _StageFailed:
        logger.warning("case %s failed at %s: %s", case.case_id, rec.failed_stage, rec.error)
    return rec
