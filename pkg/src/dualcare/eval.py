"""Benchmark scoring: accuracy metrics, judge scores, ROUGE overlap, ablations."""

from __future__ import annotations

import json
import statistics
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

from dualcare.agents import ConsultationRecord, Pipeline, run_consultation
from dualcare.dataset import PatientCase, resolve_option
from dualcare.llm import Rubric, judge
from dualcare.llm.client import DEFAULT_RETRY, ChatBackend, RetryPolicy
from dualcare.textutil import normalize_answer, tokenize

PRECISION = 4
ABLATION_GRID = ((True, True), (True, False), (False, True), (False, False))


# --- answer matching and accuracy -------------------------------------------------


def match_answer(predicted: Optional[str], gold: str, options: Optional[Sequence[tuple[str, str]]] = None) -> bool:
    if not gold or not gold.strip():
        raise ValueError("gold answer must be non-empty")
    if predicted is None:
        return False
    if options:
        p, g = resolve_option(predicted, options), resolve_option(gold, options)
        return p is not None and p == g
    return normalize_answer(predicted) == normalize_answer(gold)


@dataclass(frozen=True)
class CaseOutcome:
    case_id: str
    top1_hit: bool
    top3_hit: bool
    drug_hit: bool
    failed: bool = False

    def __post_init__(self):
        if self.top1_hit and not self.top3_hit:
            raise ValueError("top1_hit implies top3_hit")

    def to_dict(self) -> dict:
        return {
            "case_id": self.case_id,
            "top1_hit": self.top1_hit,
            "top3_hit": self.top3_hit,
            "drug_hit": self.drug_hit,
            "failed": self.failed,
        }


def score_case(record: ConsultationRecord, case: PatientCase) -> CaseOutcome:
    if record.case_id != case.case_id:
        raise ValueError(f"record {record.case_id} scored against case {case.case_id}")
    if not record.ok:
        return CaseOutcome(case.case_id, False, False, False, failed=True)
    ranked = record.doctor.diagnosis.conditions
    dx = [match_answer(c, case.gold_diagnosis, case.diagnosis_options) for c in ranked[:3]]
    med = record.pharmacist.medication
    if case.medication_options:
        drug = match_answer(med.selected_option, case.gold_medication, case.medication_options)
    else:
        drug = match_answer(med.primary, case.gold_medication)
    return CaseOutcome(case.case_id, dx[0], any(dx), drug)


@dataclass(frozen=True)
class Accuracy:
    n_cases: int
    top1_hits: int
    top3_hits: int
    drug_hits: int

    @property
    def top1_acc(self) -> float:
        return self.top1_hits / self.n_cases

    @property
    def top3_acc(self) -> float:
        return self.top3_hits / self.n_cases

    @property
    def drug_acc(self) -> float:
        return self.drug_hits / self.n_cases

    def fraction(self, metric: str) -> Fraction:
        return Fraction(getattr(self, f"{metric}_hits"), self.n_cases)

    def to_dict(self) -> dict:
        out: dict = {"n_cases": self.n_cases}
        for m in ("top1", "top3", "drug"):
            hits = getattr(self, f"{m}_hits")
            out[f"{m}_hits"] = hits
            out[f"{m}_acc"] = f"{hits / self.n_cases:.{PRECISION}f}"
        return out


def aggregate(outcomes: Sequence[CaseOutcome]) -> Accuracy:
    if not outcomes:
        raise ValueError("cannot aggregate an empty set of outcomes")
    return Accuracy(
        len(outcomes),
        sum(o.top1_hit for o in outcomes),
        sum(o.top3_hit for o in outcomes),
        sum(o.drug_hit for o in outcomes),
    )


# --- judge ----------------------------------------------------------------------------


def judge_case(
    question: str,
    docs: Sequence[str],
    gold: str,
    backend: ChatBackend,
    *,
    retry: RetryPolicy = DEFAULT_RETRY,
) -> tuple[int, int]:
    """Case-level (relevance, contribution): the best score any single doc earned."""
    if not docs:
        return 0, 0
    rel = judge(question, docs, Rubric.RELEVANCE, backend, retry=retry)
    con = judge(question, docs, Rubric.CONTRIBUTION, backend, gold=gold, retry=retry)
    return max(rel), max(con)


def judge_evidence(
    evidence: dict[str, dict[str, list[str]]],
    cases: Sequence[PatientCase],
    backend: ChatBackend,
    *,
    retry: RetryPolicy = DEFAULT_RETRY,
) -> dict:
    """Judge final evidence given as ``{case_id: {role: [passage, ...]}}``."""
    by_id = {c.case_id: c for c in cases}
    per_case = []
    sums = {"doctor": [0, 0, 0], "pharmacist": [0, 0, 0]}  # relevance, contribution, n
    for case_id in sorted(evidence):
        case = by_id[case_id]
        row: dict = {"case_id": case_id}
        for role, gold in (("doctor", case.gold_diagnosis), ("pharmacist", case.gold_medication)):
            if role not in evidence[case_id]:
                continue
            rel, con = judge_case(case.complaint, evidence[case_id][role], gold, backend, retry=retry)
            row[role] = {"relevance": rel, "contribution": con}
            s = sums[role]
            s[0] += rel
            s[1] += con
            s[2] += 1
        per_case.append(row)
    means = {
        role: {
            "mean_relevance": round(s[0] / s[2], PRECISION) if s[2] else None,
            "mean_contribution": round(s[1] / s[2], PRECISION) if s[2] else None,
            "n": s[2],
        }
        for role, s in sums.items()
    }
    return {"per_case": per_case, "means": means}


def record_evidence(record: ConsultationRecord) -> dict[str, list[str]]:
    out = {}
    for role, trace in (("doctor", record.doctor), ("pharmacist", record.pharmacist)):
        if trace is not None and trace.rounds:
            out[role] = [d.text for d in trace.final_evidence]
    return out


def judge_records(
    records: Sequence[ConsultationRecord],
    cases: Sequence[PatientCase],
    backend: ChatBackend,
    *,
    retry: RetryPolicy = DEFAULT_RETRY,
) -> dict:
    return judge_evidence({r.case_id: record_evidence(r) for r in records}, cases, backend, retry=retry)


# --- ROUGE ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RougeScores:
    rouge1_f1: float
    rouge2_f1: float
    rougeL_f1: float

    def to_dict(self) -> dict:
        return {"rouge1_f1": self.rouge1_f1, "rouge2_f1": self.rouge2_f1, "rougeL_f1": self.rougeL_f1}


def _f1(overlap: int, n_cand: int, n_ref: int) -> float:
    if overlap == 0 or n_cand == 0 or n_ref == 0:
        return 0.0
    p, r = overlap / n_cand, overlap / n_ref
    return 2 * p * r / (p + r)


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def rouge_n(cand: Sequence[str], ref: Sequence[str], n: int) -> float:
    c, r = _ngrams(cand, n), _ngrams(ref, n)
    overlap = sum((c & r).values())
    return _f1(overlap, sum(c.values()), sum(r.values()))


def lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    """LCS length via the bit-parallel recurrence over machine-word bit vectors.

    Python ints act as arbitrary-width bit vectors, so this runs in
    O(len(b) * len(a) / wordsize).
    """
    if not a or not b:
        return 0
    masks: dict[str, int] = {}
    for i, tok in enumerate(a):
        masks[tok] = masks.get(tok, 0) | (1 << i)
    full = (1 << len(a)) - 1
    v = full
    for tok in b:
        u = v & masks.get(tok, 0)
        v = ((v + u) | (v - u)) & full
    return len(a) - bin(v).count("1")


def rouge(candidate: str, reference: str) -> RougeScores:
    c, r = tokenize(candidate), tokenize(reference)
    if not c or not r:
        return RougeScores(0.0, 0.0, 0.0)
    return RougeScores(rouge_n(c, r, 1), rouge_n(c, r, 2), _f1(lcs_length(c, r), len(c), len(r)))


def _distribution(values: Sequence[float]) -> dict:
    if not values:
        return {"mean": None, "median": None, "histogram": [0] * 10}
    bins = [0] * 10
    for v in values:
        bins[min(int(v * 10), 9)] += 1
    return {
        "mean": round(statistics.fmean(values), PRECISION),
        "median": round(statistics.median(values), PRECISION),
        "histogram": bins,
    }


def specialization_overlap(records: Iterable[ConsultationRecord]) -> dict:
    """ROUGE between the doctor's and pharmacist's final evidence, per case."""
    per_case = []
    skipped = 0
    for rec in sorted(records, key=lambda r: r.case_id):
        doc, ph = rec.doctor, rec.pharmacist
        if doc is None or ph is None or not doc.rounds or not ph.rounds:
            skipped += 1
            continue
        d_text = "\n".join(d.text for d in sorted(doc.final_evidence, key=lambda d: d.chunk_id))
        p_text = "\n".join(d.text for d in sorted(ph.final_evidence, key=lambda d: d.chunk_id))
        per_case.append((rec.case_id, rouge(d_text, p_text)))
    summary = {
        key: _distribution([getattr(s, key) for _, s in per_case]) for key in ("rouge1_f1", "rouge2_f1", "rougeL_f1")
    }
    return {
        "per_case": [{"case_id": cid, **s.to_dict()} for cid, s in per_case],
        "summary": summary,
        "n_scored": len(per_case),
        "n_skipped": skipped,
    }


# --- runs -------------------------------------------------------------------------------


@dataclass
class RunReport:
    label: str
    accuracy: Accuracy
    outcomes: list[CaseOutcome]
    n_failed: int
    rouge: dict = field(default_factory=dict)
    judge: Optional[dict] = None

    @property
    def n_cases(self) -> int:
        return self.accuracy.n_cases

    def to_dict(self) -> dict:
        out = {
            "label": self.label,
            **self.accuracy.to_dict(),
            "n_failed": self.n_failed,
            "outcomes": [o.to_dict() for o in self.outcomes],
            "rouge": self.rouge,
        }
        if self.judge is not None:
            out["judge"] = self.judge
        return out


def consult_all(cases: Sequence[PatientCase], pipe: Pipeline, workers: int = 1) -> list[ConsultationRecord]:
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(lambda c: run_consultation(c, pipe), cases))
    else:
        records = [run_consultation(c, pipe) for c in cases]
    return sorted(records, key=lambda r: r.case_id)


def run_bench(
    cases: Sequence[PatientCase],
    pipe: Pipeline,
    *,
    workers: int = 1,
    label: str = "run",
    judge_backend: Optional[ChatBackend] = None,
) -> tuple[list[ConsultationRecord], RunReport]:
    if not cases:
        raise ValueError("no cases to run")
    records = consult_all(cases, pipe, workers)
    by_id = {c.case_id: c for c in cases}
    outcomes = [score_case(r, by_id[r.case_id]) for r in records]
    report = RunReport(
        label,
        aggregate(outcomes),
        outcomes,
        sum(not r.ok for r in records),
        rouge=specialization_overlap([r for r in records if r.ok]),
        judge=judge_records([r for r in records if r.ok], cases, judge_backend, retry=pipe.retry) if judge_backend else None,
    )
    return records, report


def combo_label(doctor_on: bool, pharmacist_on: bool) -> str:
    return f"doctor={'agent' if doctor_on else 'naive'},pharmacist={'agent' if pharmacist_on else 'naive'}"


def run_ablation(
    cases: Sequence[PatientCase],
    pipe: Pipeline,
    grid: Sequence[tuple[bool, bool]] = ABLATION_GRID,
    *,
    workers: int = 1,
) -> list[RunReport]:
    """One RunReport per (doctor_on, pharmacist_on) combination, same cases and backends."""
    reports = []
    for doctor_on, pharmacist_on in grid:
        variant = replace(pipe, doctor_on=doctor_on, pharmacist_on=pharmacist_on)
        _, rep = run_bench(cases, variant, workers=workers, label=combo_label(doctor_on, pharmacist_on))
        reports.append(rep)
    return reports


def ablation_table(reports: Sequence[RunReport]) -> str:
    lines = ["config\tn_cases\ttop1_acc\ttop3_acc\tdrug_acc\tn_failed"]
    for r in reports:
        a = r.accuracy
        lines.append(
            f"{r.label}\t{a.n_cases}\t{a.top1_acc:.{PRECISION}f}\t{a.top3_acc:.{PRECISION}f}\t"
            f"{a.drug_acc:.{PRECISION}f}\t{r.n_failed}"
        )
    return "\n".join(lines) + "\n"


def dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2, ensure_ascii=False) + "\n"


def write_run(records: Sequence[ConsultationRecord], outcomes: Sequence[CaseOutcome], path: Union[str, Path]) -> None:
    """One line per case: the full record plus its scored outcome."""
    by_id = {o.case_id: o for o in outcomes}
    with open(path, "w", encoding="utf-8") as fh:
        for rec in sorted(records, key=lambda r: r.case_id):
            o = by_id.get(rec.case_id)
            line = {"record": rec.to_dict(), "outcome": o.to_dict() if o else None}
            fh.write(json.dumps(line, sort_keys=True, ensure_ascii=False) + "\n")
