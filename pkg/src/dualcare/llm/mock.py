"""Deterministic offline backends.

The chat mock replays canned payloads from a rule script. A rule fires when
its tag matches and every ``match`` substring occurs in the system or user
prompt; the first matching rule wins. Rules are stateless, so replay does not
depend on call order or thread interleaving.
"""

from __future__ import annotations

import hashlib
import json
import re
import threading
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Any, Callable, Iterable, Sequence, Union

import numpy as np

from dualcare.llm.client import ChatRequest
from dualcare.llm.prompt import read_options, read_section, round_tag
from dualcare.llm.schemas import SchemaTag
from dualcare.textutil import tokenize

Payload = Union[dict, str]


@dataclass(frozen=True)
class ScriptRule:
    tag: SchemaTag
    match: tuple[str, ...]
    payload: Payload

    def matches(self, req: ChatRequest) -> bool:
        if req.schema_tag is not self.tag:
            return False
        hay = req.system_prompt + "\n" + req.user_prompt
        return all(m in hay for m in self.match)

    def render(self) -> str:
        return self.payload if isinstance(self.payload, str) else json.dumps(self.payload, sort_keys=True)


def expand_record(rec: dict) -> list[ScriptRule]:
    """Turn one script record into rules.

    ``{"tag", "match", "payload"}`` is a single rule. ``{"tag", "match",
    "sequence": [p0, p1, ...]}`` becomes one rule per reflection round plus a
    catch-all that repeats the last payload for later rounds.
    """
    tag = SchemaTag(rec["tag"])
    match = tuple(rec.get("match", ()))
    if "sequence" in rec:
        seq = rec["sequence"]
        if not seq:
            raise ValueError("sequence must be non-empty")
        rules = [ScriptRule(tag, match + (round_tag(i),), p) for i, p in enumerate(seq)]
        rules.append(ScriptRule(tag, match, seq[-1]))
        return rules
    return [ScriptRule(tag, match, rec["payload"])]


def load_script(path: Union[str, Path]) -> list[ScriptRule]:
    rules: list[ScriptRule] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rules.extend(expand_record(json.loads(line)))
            except (ValueError, KeyError) as exc:
                raise ValueError(f"{path}:{lineno}: bad script record: {exc}") from exc
    return rules


def _default_plan(req: ChatRequest) -> dict:
    complaint = read_section(req.user_prompt, "Patient complaint") or req.user_prompt
    return {"department": "unknown", "queries": [complaint[:300]], "reasoning": "default mock plan"}


def _default_queries(req: ChatRequest) -> dict:
    complaint = read_section(req.user_prompt, "Patient complaint") or req.user_prompt
    return {"queries": [complaint[:300]]}


def _default_diagnosis(req: ChatRequest) -> dict:
    opts = read_options(req.user_prompt, "Diagnosis options")
    names = [text for _, text in opts[:3]] or ["undetermined condition 1", "undetermined condition 2", "undetermined condition 3"]
    return {"ranked": [{"condition": n, "rationale": "default mock ranking"} for n in names]}


def _default_medication(req: ChatRequest) -> dict:
    opts = read_options(req.user_prompt, "Medication options")
    if opts:
        letter, text = opts[0]
        return {"recommended": [{"drug": text, "rationale": "default mock choice"}], "selected_option": letter}
    return {"recommended": [{"drug": "no specific drug", "rationale": "default mock choice"}], "selected_option": None}


def _default_judge(req: ChatRequest) -> dict:
    docs = re.split(r"^\[Doc \d+\]\n", read_section(req.user_prompt, "Documents") or "", flags=re.MULTILINE)[1:]
    ref = read_section(req.user_prompt, "Reference answer") or read_section(req.user_prompt, "Question")
    target = set(tokenize(ref))
    scores = []
    for d in docs:
        have = set(tokenize(d))
        scores.append(round(10 * len(target & have) / len(target)) if target else 0)
    return {"scores": scores}


DEFAULTS: dict[SchemaTag, Callable[[ChatRequest], dict]] = {
    SchemaTag.PLAN: _default_plan,
    SchemaTag.QUERIES: _default_queries,
    SchemaTag.CONFIDENCE: lambda req: {"sufficiency": 1.0, "accuracy": 1.0, "rationale": "default mock"},
    SchemaTag.DIAGNOSIS: _default_diagnosis,
    SchemaTag.ADOPTION: lambda req: {"adopt": True, "justification": "default mock"},
    SchemaTag.MEDICATION: _default_medication,
    SchemaTag.JUDGE: _default_judge,
    SchemaTag.CLASSIFY: lambda req: {"label": "both", "rationale": "default mock"},
}


class ScriptedChat:
    """Chat backend that answers from a rule script, falling back to per-tag defaults."""

    def __init__(self, rules: Iterable[Union[ScriptRule, dict]] = (), *, record_calls: bool = True):
        self.rules: list[ScriptRule] = []
        for r in rules:
            self.rules.extend([r] if isinstance(r, ScriptRule) else expand_record(r))
        self.record_calls = record_calls
        self.calls: list[ChatRequest] = []
        self._lock = threading.Lock()

    @classmethod
    def from_file(cls, path: Union[str, Path]) -> "ScriptedChat":
        return cls(load_script(path))

    def chat(self, request: ChatRequest) -> str:
        if self.record_calls:
            with self._lock:
                self.calls.append(request)
        for rule in self.rules:
            if rule.matches(request):
                return rule.render()
        return json.dumps(DEFAULTS[request.schema_tag](request), sort_keys=True)

    def calls_for(self, tag: SchemaTag) -> list[ChatRequest]:
        with self._lock:
            return [c for c in self.calls if c.schema_tag is SchemaTag(tag)]


_INSTRUCT = re.compile(r"^Instruct:.*?\nQuery:\s?", re.DOTALL)


def strip_instruction(text: str) -> str:
    return _INSTRUCT.sub("", text, count=1)


@lru_cache(maxsize=65536)
def _token_vector(token: str, dim: int, seed: int) -> np.ndarray:
    digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8, key=(seed % 2**64).to_bytes(8, "little")).digest()
    rng = np.random.default_rng(int.from_bytes(digest, "little"))
    v = rng.standard_normal(dim)
    v.setflags(write=False)
    return v


class HashEmbedder:
    """Bag-of-words embedder: each token maps to a seeded Gaussian vector.

    An ``Instruct: ...\\nQuery: ...`` header is treated as conditioning and
    dropped; only the query body contributes tokens.
    """

    def __init__(self, dim: int = 256, seed: int = 0):
        if dim <= 0:
            raise ValueError("dim must be positive")
        self.dim = dim
        self.seed = seed

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        out = np.zeros((len(texts), self.dim))
        for i, text in enumerate(texts):
            toks = tokenize(strip_instruction(text)) or ["\x00" + text]
            for t in toks:
                out[i] += _token_vector(t, self.dim, self.seed)
        return out


class OverlapReranker:
    """Fraction of distinct query tokens found in the passage."""

    def score(self, instruction: str, query: str, passage: str) -> float:
        q = set(tokenize(query))
        if not q:
            return 0.0
        return len(q & set(tokenize(passage))) / len(q)


class FunctionReranker:
    def __init__(self, fn: Callable[[str, str, str], float]):
        self.fn = fn

    def score(self, instruction: str, query: str, passage: str) -> float:
        return self.fn(instruction, query, passage)


def dump_script(records: Iterable[dict[str, Any]], path: Union[str, Path]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True, ensure_ascii=False) + "\n")
