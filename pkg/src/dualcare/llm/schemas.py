"""Structured payload schemas, one per request tag."""

from __future__ import annotations

from enum import Enum
from typing import Literal, Optional

from pydantic import BaseModel, Field, field_validator, model_validator

from dualcare.textutil import normalize_answer


class SchemaTag(str, Enum):
    PLAN = "Plan"
    QUERIES = "Queries"
    CONFIDENCE = "Confidence"
    DIAGNOSIS = "Diagnosis"
    ADOPTION = "Adoption"
    MEDICATION = "Medication"
    JUDGE = "Judge"
    CLASSIFY = "Classify"


class _Payload(BaseModel):
    model_config = {"extra": "ignore"}


class PlanPayload(_Payload):
    department: str
    queries: list[str] = Field(min_length=1)
    reasoning: str = ""

    @field_validator("queries")
    @classmethod
    def _non_blank(cls, v: list[str]) -> list[str]:
        v = [q.strip() for q in v]
        if any(not q for q in v):
            raise ValueError("queries must be non-empty strings")
        return v


class QueriesPayload(_Payload):
    # empty is legal here; callers decide what an empty regeneration means
    queries: list[str] = Field(default_factory=list)

    @field_validator("queries")
    @classmethod
    def _strip(cls, v: list[str]) -> list[str]:
        return [q.strip() for q in v if q.strip()]


class ConfidencePayload(_Payload):
    sufficiency: float = Field(ge=0.0, le=1.0)
    accuracy: float = Field(ge=0.0, le=1.0)
    overall: Optional[float] = Field(default=None, ge=0.0, le=1.0)
    rationale: str = ""


class RankedCondition(_Payload):
    condition: str = Field(min_length=1)
    rationale: str = ""


class DiagnosisPayload(_Payload):
    ranked: list[RankedCondition] = Field(min_length=3)

    @model_validator(mode="after")
    def _distinct(self) -> "DiagnosisPayload":
        seen = [normalize_answer(r.condition) for r in self.ranked]
        if len(set(seen)) != len(seen):
            raise ValueError("ranked conditions must be distinct")
        return self


class AdoptionPayload(_Payload):
    adopt: bool
    justification: str = ""


class DrugChoice(_Payload):
    drug: str = Field(min_length=1)
    rationale: str = ""


class MedicationPayload(_Payload):
    recommended: list[DrugChoice] = Field(min_length=1)
    selected_option: Optional[str] = None

    @model_validator(mode="after")
    def _distinct(self) -> "MedicationPayload":
        seen = [normalize_answer(r.drug) for r in self.recommended]
        if len(set(seen)) != len(seen):
            raise ValueError("recommended drugs must be distinct")
        return self


class JudgePayload(_Payload):
    scores: list[int]

    @field_validator("scores", mode="before")
    @classmethod
    def _ints(cls, v):
        out = []
        for s in v:
            if isinstance(s, bool) or not isinstance(s, (int, float)) or s != int(s):
                raise ValueError(f"judge score {s!r} is not an integer")
            out.append(int(s))
        return out

    @field_validator("scores")
    @classmethod
    def _range(cls, v: list[int]) -> list[int]:
        for s in v:
            if not 0 <= s <= 10:
                raise ValueError(f"judge score {s} outside 0..10")
        return v


class ClassifyPayload(_Payload):
    label: Literal["doctor_only", "pharmacist_only", "both"]
    rationale: str = ""


PAYLOAD_MODELS: dict[SchemaTag, type[BaseModel]] = {
    SchemaTag.PLAN: PlanPayload,
    SchemaTag.QUERIES: QueriesPayload,
    SchemaTag.CONFIDENCE: ConfidencePayload,
    SchemaTag.DIAGNOSIS: DiagnosisPayload,
    SchemaTag.ADOPTION: AdoptionPayload,
    SchemaTag.MEDICATION: MedicationPayload,
    SchemaTag.JUDGE: JudgePayload,
    SchemaTag.CLASSIFY: ClassifyPayload,
}

# Shown to the model so it knows what shape to return.
SCHEMA_HINTS: dict[SchemaTag, str] = {
    SchemaTag.PLAN: '{"department": str, "queries": [str, ...], "reasoning": str}',
    SchemaTag.QUERIES: '{"queries": [str, ...]}',
    SchemaTag.CONFIDENCE: '{"sufficiency": 0..1, "accuracy": 0..1, "rationale": str}',
    SchemaTag.DIAGNOSIS: '{"ranked": [{"condition": str, "rationale": str}, ...at least 3]}',
    SchemaTag.ADOPTION: '{"adopt": bool, "justification": str}',
    SchemaTag.MEDICATION: '{"recommended": [{"drug": str, "rationale": str}, ...], "selected_option": str|null}',
    SchemaTag.JUDGE: '{"scores": [int 0..10, one per document]}',
    SchemaTag.CLASSIFY: '{"label": "doctor_only"|"pharmacist_only"|"both", "rationale": str}',
}
