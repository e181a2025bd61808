"""Benchmark cases: complaint, gold diagnosis, gold medication, optional options."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable, Optional, Sequence, Union

from dualcare.textutil import normalize_answer

Options = tuple[tuple[str, str], ...]

FIELDS = (
    "case_id",
    "complaint",
    "gold_diagnosis",
    "gold_medication",
    "diagnosis_options",
    "medication_options",
    "department",
)


class CaseFormatError(ValueError):
    def __init__(self, message: str, lineno: Optional[int] = None, path: Optional[str] = None):
        where = f"{path or '<cases>'}:{lineno}: " if lineno is not None else ""
        super().__init__(where + message)
        self.lineno = lineno


def resolve_option(answer: str, options: Sequence[tuple[str, str]]) -> Optional[str]:
    """Option letter for ``answer``, given as a letter or as the option text."""
    a = answer.strip()
    for letter, _ in options:
        if a.rstrip(".):").upper() == letter.upper():
            return letter
    norm = normalize_answer(a)
    for letter, text in options:
        if normalize_answer(text) == norm:
            return letter
    return None


def _parse_options(raw: Any) -> Optional[Options]:
    if raw is None:
        return None
    if isinstance(raw, dict):
        items = list(raw.items())
    else:
        items = []
        for o in raw:
            if isinstance(o, dict):
                items.append((o["letter"], o["text"]))
            else:
                letter, text = o
                items.append((letter, text))
    opts = tuple((str(l).strip(), str(t).strip()) for l, t in items)
    return opts or None


@dataclass(frozen=True)
class PatientCase:
    case_id: str
    complaint: str
    gold_diagnosis: str
    gold_medication: str
    diagnosis_options: Optional[Options] = None
    medication_options: Optional[Options] = None
    department: Optional[str] = None

    def __post_init__(self):
        for name in ("case_id", "complaint", "gold_diagnosis", "gold_medication"):
            v = getattr(self, name)
            if not isinstance(v, str) or not v.strip():
                raise ValueError(f"{name} must be a non-empty string")
        for name, gold in (("diagnosis_options", self.gold_diagnosis), ("medication_options", self.gold_medication)):
            opts = getattr(self, name)
            if opts is None:
                continue
            letters = [l for l, _ in opts]
            if len(set(letters)) != len(letters):
                raise ValueError(f"{name}: option letters must be unique")
            if resolve_option(gold, opts) is None:
                raise ValueError(f"{name}: gold answer {gold!r} is not among the options")

    @property
    def gold_diagnosis_letter(self) -> Optional[str]:
        return resolve_option(self.gold_diagnosis, self.diagnosis_options) if self.diagnosis_options else None

    @property
    def gold_medication_letter(self) -> Optional[str]:
        return resolve_option(self.gold_medication, self.medication_options) if self.medication_options else None

    @classmethod
    def from_dict(cls, rec: dict) -> "PatientCase":
        missing = [f for f in ("case_id", "complaint", "gold_diagnosis", "gold_medication") if f not in rec]
        if missing:
            raise ValueError(f"missing field(s): {', '.join(missing)}")
        return cls(
            case_id=str(rec["case_id"]),
            complaint=rec["complaint"],
            gold_diagnosis=rec["gold_diagnosis"],
            gold_medication=rec["gold_medication"],
            diagnosis_options=_parse_options(rec.get("diagnosis_options")),
            medication_options=_parse_options(rec.get("medication_options")),
            department=rec.get("department"),
        )

    def to_dict(self) -> dict:
        return {
            "case_id": self.case_id,
            "complaint": self.complaint,
            "gold_diagnosis": self.gold_diagnosis,
            "gold_medication": self.gold_medication,
            "diagnosis_options": [list(o) for o in self.diagnosis_options] if self.diagnosis_options else None,
            "medication_options": [list(o) for o in self.medication_options] if self.medication_options else None,
            "department": self.department,
        }


def load_cases(path: Union[str, Path]) -> list[PatientCase]:
    cases: list[PatientCase] = []
    seen: dict[str, int] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                case = PatientCase.from_dict(json.loads(line))
            except (ValueError, TypeError, KeyError) as exc:
                raise CaseFormatError(str(exc), lineno, str(path)) from exc
            if case.case_id in seen:
                raise CaseFormatError(
                    f"duplicate case_id {case.case_id!r} (first on line {seen[case.case_id]})", lineno, str(path)
                )
            seen[case.case_id] = lineno
            cases.append(case)
    return cases


def dump_cases(cases: Iterable[PatientCase], path: Union[str, Path]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for c in cases:
            fh.write(json.dumps(c.to_dict(), sort_keys=True, ensure_ascii=False) + "\n")
