from __future__ import annotations

import json
import logging
import re
import time
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any, Callable, Optional, Protocol, Sequence

import numpy as np
from pydantic import BaseModel, ValidationError

from dualcare.llm.errors import ParseError, SchemaViolation, TransportError
from dualcare.llm.prompt import join_sections, section
from dualcare.llm.schemas import PAYLOAD_MODELS, SCHEMA_HINTS, SchemaTag

logger = logging.getLogger(__name__)

DEFAULT_TEMPERATURE = 0.0
MAX_ATTEMPTS = 3

REPAIR_MARKER = "Your previous reply was rejected."
SCHEMA_HINT_MARKER = "Return ONLY a JSON object of the form"


@dataclass(frozen=True)
class ChatRequest:
    system_prompt: str
    user_prompt: str
    schema_tag: SchemaTag
    temperature: float = DEFAULT_TEMPERATURE

    def __post_init__(self):
        if not isinstance(self.schema_tag, SchemaTag):
            object.__setattr__(self, "schema_tag", SchemaTag(self.schema_tag))
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")


@dataclass(frozen=True)
class StructuredOutput:
    schema_tag: SchemaTag
    payload: BaseModel
    raw: str
    repair_count: int = 0


class ChatBackend(Protocol):
    def chat(self, request: ChatRequest) -> str: ...


class EmbeddingBackend(Protocol):
    dim: int

    def embed(self, texts: Sequence[str]) -> np.ndarray: ...


class RerankBackend(Protocol):
    def score(self, instruction: str, query: str, passage: str) -> float: ...


@dataclass
class RetryPolicy:
    attempts: int = MAX_ATTEMPTS
    base_delay: float = 0.5
    sleep: Callable[[float], None] = field(default=time.sleep, repr=False)

    def call(self, fn: Callable[[], Any]) -> Any:
        """Run ``fn``, retrying TransportError with exponential backoff."""
        for attempt in range(self.attempts):
            try:
                return fn()
            except TransportError as exc:
                if attempt == self.attempts - 1:
                    raise
                delay = self.base_delay * (2**attempt)
                logger.warning("transport error (%s); retry %d in %.2fs", exc, attempt + 1, delay)
                self.sleep(delay)
        raise AssertionError("unreachable")


DEFAULT_RETRY = RetryPolicy()

_FENCE = re.compile(r"```(?:json)?\s*(.*?)\s*```", re.DOTALL)


def extract_json(text: str) -> dict:
    text = (text or "").strip()
    m = _FENCE.search(text)
    if m:
        text = m.group(1)
    try:
        obj = json.loads(text)
    except json.JSONDecodeError:
        i, j = text.find("{"), text.rfind("}")
        if i == -1 or j <= i:
            raise ParseError("reply contains no JSON object", raw=text)
        try:
            obj = json.loads(text[i : j + 1])
        except json.JSONDecodeError as exc:
            raise ParseError(f"invalid JSON: {exc}", raw=text) from exc
    if not isinstance(obj, dict):
        raise ParseError("reply JSON is not an object", raw=text)
    return obj


def _validate(tag: SchemaTag, raw: str, check: Optional[Callable[[Any], None]]) -> BaseModel:
    data = extract_json(raw)
    try:
        payload = PAYLOAD_MODELS[tag].model_validate(data)
    except ValidationError as exc:
        errs = "; ".join(f"{'.'.join(map(str, e['loc'])) or '<root>'}: {e['msg']}" for e in exc.errors())
        raise SchemaViolation(f"{tag.value} payload invalid: {errs}", raw=raw) from exc
    if check is not None:
        try:
            check(payload)
        except ValueError as exc:
            raise SchemaViolation(f"{tag.value} payload invalid: {exc}", raw=raw) from exc
    return payload


def with_schema_hint(req: ChatRequest) -> ChatRequest:
    if SCHEMA_HINT_MARKER in req.system_prompt:
        return req
    hint = f"\n\n{SCHEMA_HINT_MARKER} {SCHEMA_HINTS[req.schema_tag]}. No markdown."
    return replace(req, system_prompt=req.system_prompt + hint)


def complete(
    req: ChatRequest,
    backend: ChatBackend,
    *,
    check: Optional[Callable[[Any], None]] = None,
    retry: RetryPolicy = DEFAULT_RETRY,
) -> StructuredOutput:
    """Send ``req`` and return a schema-validated payload.

    ``check`` adds caller-specific constraints (option sets, minimum counts);
    it raises ValueError on a bad payload. A failed parse or validation gets one
    repair round that restates the error, then the failure propagates.
    """
    req = with_schema_hint(req)
    raw = retry.call(lambda: backend.chat(req))
    try:
        return StructuredOutput(req.schema_tag, _validate(req.schema_tag, raw, check), raw)
    except (ParseError, SchemaViolation) as first:
        logger.info("repairing %s reply: %s", req.schema_tag.value, first)
        repair = replace(
            req,
            user_prompt=(
                f"{req.user_prompt}\n\n{REPAIR_MARKER}\nError: {first}\n"
                f"Rejected reply:\n{raw}\nReply again with a corrected JSON object."
            ),
        )
        raw2 = retry.call(lambda: backend.chat(repair))
        return StructuredOutput(req.schema_tag, _validate(req.schema_tag, raw2, check), raw2, repair_count=1)


def normalize_rows(vectors: np.ndarray) -> np.ndarray:
    vectors = np.asarray(vectors, dtype=np.float64)
    if vectors.ndim != 2:
        raise ValueError("expected a 2-D array of vectors")
    if not np.all(np.isfinite(vectors)):
        raise ValueError("embedding contains non-finite values")
    norms = np.linalg.norm(vectors, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise ValueError("cannot normalize a zero vector")
    return vectors / norms


def embed(texts: Sequence[str], backend: EmbeddingBackend, *, retry: RetryPolicy = DEFAULT_RETRY) -> np.ndarray:
    """One L2-normalized row per input text, in input order."""
    texts = list(texts)
    if not texts:
        raise ValueError("embed() needs at least one text")
    out = np.asarray(retry.call(lambda: backend.embed(texts)), dtype=np.float64)
    if out.shape != (len(texts), backend.dim):
        raise SchemaViolation(f"embedding shape {out.shape}, expected {(len(texts), backend.dim)}")
    return normalize_rows(out)


class Rubric(str, Enum):
    RELEVANCE = "Relevance"
    CONTRIBUTION = "Contribution"


JUDGE_SYSTEM = {
    Rubric.RELEVANCE: (
        "You grade retrieved medical documents. For each document give an integer 0-10 for how "
        "closely it matches the patient's question: the symptoms, conditions, and situation described."
    ),
    Rubric.CONTRIBUTION: (
        "You grade retrieved medical documents. For each document give an integer 0-10 for how much "
        "it would help reach the reference answer shown below."
    ),
}


def judge(
    question: str,
    docs: Sequence[str],
    rubric: Rubric,
    backend: ChatBackend,
    gold: Optional[str] = None,
    *,
    retry: RetryPolicy = DEFAULT_RETRY,
) -> list[int]:
    rubric = Rubric(rubric)
    if rubric is Rubric.CONTRIBUTION and not gold:
        raise ValueError("Contribution rubric requires a gold answer")
    if not docs:
        return []
    listing = "\n\n".join(f"[Doc {i + 1}]\n{d}" for i, d in enumerate(docs))
    user = join_sections(
        section("Rubric", rubric.value),
        section("Question", question),
        section("Reference answer", gold) if gold else "",
        section("Documents", listing),
    )
    req = ChatRequest(JUDGE_SYSTEM[rubric], user, SchemaTag.JUDGE)

    def _count(p):
        if len(p.scores) != len(docs):
            raise ValueError(f"expected {len(docs)} scores, got {len(p.scores)}")

    return list(complete(req, backend, check=_count, retry=retry).payload.scores)
