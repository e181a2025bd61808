"""Seeded synthetic benchmark: cases, a corpus with planted evidence, and mock scripts.

Every case gets one diagnostic document (doctor base) and one medication
document (pharmacist base) built from vocabulary unique to that case, so the
planted documents are the unambiguous retrieval targets. Extra documents mix
both vocabularies and are routed to both bases. Diagnostic and medication
vocabularies never share a token.

The chat script answers honestly by default. ``FixtureSpec`` lists the cases
where a given configuration should go wrong, which lets tests predict every
metric exactly.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Union

from dualcare.agents import DEFAULT_DEPARTMENTS, NAIVE_MARKER, REGEN_HEADING, role_marker
from dualcare.dataset.cases import PatientCase, dump_cases
from dualcare.kb import Role, SourceDocument, Target, dump_corpus
from dualcare.llm.mock import dump_script
from dualcare.llm.prompt import section

_ONSETS = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "br", "kr", "st", "tr", "pl", "gr"]
_VOWELS = ["a", "e", "i", "o", "u", "ai", "ou", "ei"]
_DISEASE_SUFFIX = ["itis", "osis", "emia", "algia", "opathy"]
_DRUG_SUFFIX = ["mab", "pril", "olol", "azole", "cillin", "statin", "vir"]

DIAG_FILLER = ["symptoms", "presentation", "diagnosis", "differential", "criteria", "onset", "findings", "examination"]
MED_FILLER = ["dosage", "mg", "tablets", "contraindications", "interactions", "indication", "regimen", "precautions"]


@dataclass(frozen=True)
class FixtureSpec:
    seed: int = 0
    n_cases: int = 20
    n_docs: int | None = None  # default: 2 planted per case + n_cases // 4 mixed docs
    option_based: bool = True
    n_options: int = 4
    corrupt_pharmacist: tuple[int, ...] = ()  # wrong drug in every configuration
    naive_pharmacist_misses: tuple[int, ...] = ()  # wrong drug only when the pharmacist is naive
    naive_doctor_misses: tuple[int, ...] = ()  # gold ranked second only when the doctor is naive
    low_confidence: tuple[int, ...] = ()  # doctor needs one reflection round
    reject_adoption: tuple[int, ...] = ()  # pharmacist declines the diagnosis

    def __post_init__(self):
        if self.n_cases < 1:
            raise ValueError("n_cases must be >= 1")
        if self.n_options < 3:
            raise ValueError("need at least 3 options so a diagnosis can rank three")
        if self.option_based and self.n_cases < self.n_options:
            raise ValueError("option-based fixtures need n_cases >= n_options for distractors")
        if not self.option_based and self.n_cases < 3:
            raise ValueError("free-text fixtures need n_cases >= 3 for distractors")
        if self.n_docs is not None and self.n_docs < 2 * self.n_cases:
            raise ValueError("n_docs must cover the two planted documents per case")
        for name in ("corrupt_pharmacist", "naive_pharmacist_misses", "naive_doctor_misses", "low_confidence", "reject_adoption"):
            bad = [i for i in getattr(self, name) if not 0 <= i < self.n_cases]
            if bad:
                raise ValueError(f"{name}: case indices out of range: {bad}")

    @property
    def total_docs(self) -> int:
        return self.n_docs if self.n_docs is not None else 2 * self.n_cases + self.n_cases // 4


@dataclass
class Fixture:
    spec: FixtureSpec
    cases: list[PatientCase]
    corpus: list[SourceDocument]
    script: list[dict]
    planted: dict[str, tuple[str, str]]  # case_id -> (diagnostic doc_id, medication doc_id)
    labels: dict[str, Target] = field(default_factory=dict)

    def write(self, directory: Union[str, Path]) -> dict[str, Path]:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        paths = {"cases": d / "cases.jsonl", "corpus": d / "corpus.jsonl", "script": d / "script.jsonl"}
        dump_cases(self.cases, paths["cases"])
        dump_corpus(self.corpus, paths["corpus"])
        dump_script(self.script, paths["script"])
        planted = {cid: list(v) for cid, v in sorted(self.planted.items())}
        (d / "planted.json").write_text(json.dumps(planted, sort_keys=True, indent=2) + "\n", encoding="utf-8")
        paths["planted"] = d / "planted.json"
        return paths


class _Words:
    def __init__(self, rng: random.Random):
        self.rng = rng
        self.used: set[str] = set(DIAG_FILLER) | set(MED_FILLER)

    def make(self, syllables: int, suffix: str = "") -> str:
        while True:
            w = "".join(self.rng.choice(_ONSETS) + self.rng.choice(_VOWELS) for _ in range(syllables)) + suffix
            if w not in self.used:
                self.used.add(w)
                return w


@dataclass
class _CaseVocab:
    disease: str
    symptoms: list[str]
    drug: str
    indication: str  # medication-side token standing in for the disease
    med_terms: list[str]
    department: str


def _confidence(s: float, a: float) -> dict:
    return {"sufficiency": s, "accuracy": a, "rationale": "scripted"}


def generate_fixture(spec: FixtureSpec = FixtureSpec()) -> Fixture:
    rng = random.Random(spec.seed)
    words = _Words(rng)
    vocab = [
        _CaseVocab(
            disease=words.make(2, rng.choice(_DISEASE_SUFFIX)),
            symptoms=[words.make(2) for _ in range(4)],
            drug=words.make(2, rng.choice(_DRUG_SUFFIX)),
            indication=words.make(3),
            med_terms=[words.make(2) for _ in range(2)],
            department=rng.choice(DEFAULT_DEPARTMENTS),
        )
        for _ in range(spec.n_cases)
    ]

    corpus: list[SourceDocument] = []
    labels: dict[str, Target] = {}
    planted: dict[str, tuple[str, str]] = {}

    def add(doc_id: str, title: str, body: str, target: Target, **meta: str) -> None:
        corpus.append(SourceDocument(doc_id, title, body, {"source": "synthetic", "label": target.value, **meta}))
        labels[doc_id] = target

    for i, v in enumerate(vocab):
        s = v.symptoms
        case_id = f"case-{i:03d}"
        dx_id, rx_id = f"dx-{i:03d}", f"rx-{i:03d}"
        add(
            dx_id,
            f"{v.disease} diagnosis",
            f"{v.disease} presentation: {s[0]} {s[1]} {s[2]}.\n"
            f"Diagnosis criteria: {s[0]} with {s[3]}. Onset findings {s[1]} {s[3]}.\n"
            f"Differential: {s[2]} examination findings confirm {v.disease}.",
            Target.DOCTOR_ONLY,
            case_id=case_id,
            department=v.department,
        )
        add(
            rx_id,
            f"{v.drug} prescribing",
            f"{v.drug} indication {v.indication}. Dosage {v.drug} 250 mg tablets regimen.\n"
            f"Contraindications {v.med_terms[0]}. Interactions {v.med_terms[1]}. "
            f"Precautions {v.indication} {v.drug}.",
            Target.PHARMACIST_ONLY,
            case_id=case_id,
        )
        planted[case_id] = (dx_id, rx_id)

    for j in range(spec.total_docs - 2 * spec.n_cases):
        picks = rng.sample(range(spec.n_cases), k=min(3, spec.n_cases))
        paras = []
        for p in picks:
            v = vocab[p]
            paras.append(
                f"{v.disease} symptoms include {v.symptoms[0]} and {v.symptoms[1]}; diagnosis rests on examination. "
                f"Regimen: {v.drug} tablets, dosage adjusted for interactions and precautions. "
                + " ".join(f"{v.disease} findings {v.symptoms[k % 2]} guide {v.drug} dosage." for k in range(6))
            )
        add(f"mix-{j:03d}", f"combined review {j}", "\n\n".join(paras), Target.BOTH)

    cases: list[PatientCase] = []
    for i, v in enumerate(vocab):
        s = v.symptoms
        complaint = (
            f"Patient {i:03d} reports {s[0]} and {s[1]} for several days, "
            f"now with {s[2]} and some {s[3]}."
        )
        kw: dict = {}
        if spec.option_based:
            others = [u for u in range(spec.n_cases) if u != i]
            dx_opts = [v.disease] + [vocab[u].disease for u in rng.sample(others, spec.n_options - 1)]
            rx_opts = [v.drug] + [vocab[u].drug for u in rng.sample(others, spec.n_options - 1)]
            rng.shuffle(dx_opts)
            rng.shuffle(rx_opts)
            letters = [chr(ord("A") + k) for k in range(spec.n_options)]
            kw["diagnosis_options"] = tuple(zip(letters, dx_opts))
            kw["medication_options"] = tuple(zip(letters, rx_opts))
        cases.append(
            PatientCase(f"case-{i:03d}", complaint, v.disease, v.drug, department=v.department, **kw)
        )

    script = _script(spec, cases, vocab, corpus, labels, rng)
    return Fixture(spec, cases, corpus, script, planted, labels)


def _distractors(case: PatientCase, vocab: list[_CaseVocab], i: int, what: str, rng: random.Random) -> list[str]:
    opts = case.diagnosis_options if what == "dx" else case.medication_options
    gold = case.gold_diagnosis if what == "dx" else case.gold_medication
    if opts:
        return [t for _, t in opts if t != gold]
    pool = [getattr(vocab[u], "disease" if what == "dx" else "drug") for u in range(len(vocab)) if u != i]
    return rng.sample(pool, 2)


def _medication(case: PatientCase, drug: str) -> dict:
    sel = None
    if case.medication_options:
        sel = next(l for l, t in case.medication_options if t == drug)
    return {"recommended": [{"drug": drug, "rationale": "scripted"}], "selected_option": sel}


def _script(spec, cases, vocab, corpus, labels, rng) -> list[dict]:
    doctor, pharmacist = role_marker(Role.DOCTOR), role_marker(Role.PHARMACIST)
    out: list[dict] = []
    for doc in corpus:
        out.append(
            {
                "tag": "Classify",
                "match": [section("Document title", doc.title)],
                "payload": {"label": labels[doc.doc_id].value, "rationale": "scripted"},
            }
        )
    for i, (case, v) in enumerate(zip(cases, vocab)):
        c = case.complaint
        s = v.symptoms
        dx_wrong = _distractors(case, vocab, i, "dx", rng)
        rx_wrong = _distractors(case, vocab, i, "rx", rng)

        out.append(
            {
                "tag": "Plan",
                "match": [c],
                "payload": {
                    "department": v.department,
                    "queries": [f"{s[0]} {s[1]} {s[2]} symptoms", f"{s[0]} {s[3]} diagnosis criteria"],
                    "reasoning": "scripted",
                },
            }
        )
        if i in spec.low_confidence:
            out.append({"tag": "Confidence", "match": [c, doctor], "sequence": [_confidence(0.3, 0.8), _confidence(0.9, 0.85)]})
            out.append(
                {
                    "tag": "Queries",
                    "match": [c, doctor, f"## {REGEN_HEADING}"],
                    "payload": {"queries": [f"{s[0]} {s[1]} {s[2]} {s[3]} presentation"]},
                }
            )
        else:
            out.append({"tag": "Confidence", "match": [c, doctor], "payload": _confidence(0.9, 0.85)})
        out.append({"tag": "Confidence", "match": [c, pharmacist], "payload": _confidence(0.9, 0.9)})

        if i in spec.naive_doctor_misses:
            out.append(
                {
                    "tag": "Diagnosis",
                    "match": [NAIVE_MARKER, c],
                    "payload": {"ranked": [{"condition": x, "rationale": "scripted"} for x in [dx_wrong[0], case.gold_diagnosis, dx_wrong[1]]]},
                }
            )
        out.append(
            {
                "tag": "Diagnosis",
                "match": [c],
                "payload": {"ranked": [{"condition": x, "rationale": "scripted"} for x in [case.gold_diagnosis, *dx_wrong[:2]]]},
            }
        )
        out.append(
            {
                "tag": "Adoption",
                "match": [c],
                "payload": {"adopt": i not in spec.reject_adoption, "justification": "scripted"},
            }
        )
        out.append(
            {
                "tag": "Queries",
                "match": [c, pharmacist],
                "payload": {
                    "queries": [f"{v.drug} dosage indication {v.indication}", f"{v.indication} contraindications interactions"]
                },
            }
        )
        if i in spec.naive_pharmacist_misses:
            out.append({"tag": "Medication", "match": [NAIVE_MARKER, c], "payload": _medication(case, rx_wrong[0])})
        drug = rx_wrong[0] if i in spec.corrupt_pharmacist else case.gold_medication
        out.append({"tag": "Medication", "match": [c], "payload": _medication(case, drug)})
    return out
