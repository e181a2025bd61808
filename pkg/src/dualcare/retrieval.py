"""Two-stage role-aware retrieval: exact cosine recall, then rerank."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from dualcare.kb import KnowledgeBase, Role, VectorIndex
from dualcare.llm.client import DEFAULT_RETRY, EmbeddingBackend, RerankBackend, RetryPolicy, embed

logger = logging.getLogger(__name__)

DEFAULT_TOP_K = 20
DEFAULT_TOP_N = 5

_EMBED_TASKS = {
    Role.DOCTOR: (
        "Given a patient's account of their illness, retrieve clinical reference passages about disease "
        "symptoms, diagnostic criteria, and differential diagnosis, and note which department should "
        "handle the case"
    ),
    Role.PHARMACIST: (
        "Given a clinical question about treating a patient, retrieve pharmaceutical reference passages "
        "about drug mechanisms, indications, contraindications, and interactions"
    ),
}

_RERANK_TASKS = {
    Role.DOCTOR: (
        "Judge whether the passage helps a physician identify the patient's condition: matching symptoms, "
        "diagnostic criteria, distinguishing features against similar diseases, clinical usefulness"
    ),
    Role.PHARMACIST: (
        "Judge whether the passage helps a pharmacist choose medication for the patient: drug choice, "
        "dosing, contraindications, interactions, clinical usefulness"
    ),
}


class DimensionMismatch(ValueError):
    pass


@dataclass(frozen=True)
class RetrievalParams:
    top_k: int = DEFAULT_TOP_K
    top_n: int = DEFAULT_TOP_N

    def __post_init__(self):
        if not 1 <= self.top_n <= self.top_k:
            raise ValueError(f"need 1 <= top_n <= top_k, got top_n={self.top_n}, top_k={self.top_k}")


@dataclass(frozen=True)
class RetrievalQuery:
    text: str
    role: Role
    instruction: str
    round: int = 0

    def __post_init__(self):
        if not self.text.strip():
            raise ValueError("query text must be non-empty")
        if self.round < 0:
            raise ValueError("round must be >= 0")


@dataclass(frozen=True)
class RetrievedDoc:
    chunk_id: str
    text: str
    coarse_score: float
    rerank_score: float
    rank: int

    def to_dict(self) -> dict:
        return {
            "chunk_id": self.chunk_id,
            "text": self.text,
            "coarse_score": self.coarse_score,
            "rerank_score": self.rerank_score,
            "rank": self.rank,
        }


@dataclass(frozen=True)
class RetrievalResult:
    query: RetrievalQuery
    docs: tuple[RetrievedDoc, ...]
    params: RetrievalParams
    degraded: bool = False

    def to_dict(self) -> dict:
        return {
            "query": {
                "text": self.query.text,
                "role": self.query.role.value,
                "instruction": self.query.instruction,
                "round": self.query.round,
            },
            "docs": [d.to_dict() for d in self.docs],
            "params": {"top_k": self.params.top_k, "top_n": self.params.top_n},
            "degraded": self.degraded,
        }


def render_instruction(role: Role, query_text: str) -> str:
    """Query-side text for the embedder, in ``Instruct/Query`` form."""
    return f"Instruct: {_EMBED_TASKS[Role(role)]}\nQuery: {query_text}"


def rerank_instruction(role: Role) -> str:
    return _RERANK_TASKS[Role(role)]


def _ranked(ids: Sequence[str], scores: np.ndarray) -> np.ndarray:
    # primary key: score descending; secondary: chunk_id ascending
    return np.lexsort((np.asarray(ids, dtype=object).astype(str), -scores))


def coarse_recall(index: VectorIndex, qvec: np.ndarray, k: int) -> list[tuple[str, float]]:
    qvec = np.asarray(qvec, dtype=np.float64).ravel()
    if qvec.shape[0] != index.dim:
        raise DimensionMismatch(f"query dim {qvec.shape[0]} != index dim {index.dim}")
    if k < 1:
        raise ValueError("k must be >= 1")
    if len(index) == 0:
        return []
    scores = (index.vectors * qvec).sum(axis=1)
    order = _ranked(index.chunk_ids, scores)[:k]
    return [(index.chunk_ids[i], float(scores[i])) for i in order]


def _dedup(candidates: Iterable[tuple[str, float]]) -> list[tuple[str, float]]:
    best: dict[str, float] = {}
    for cid, s in candidates:
        if cid not in best or s > best[cid]:
            best[cid] = s
    return list(best.items())


def rerank(
    candidates: Sequence[tuple[str, float]],
    role: Role,
    query_text: str,
    scorer: RerankBackend,
    n: int,
    passages: Mapping[str, str],
) -> tuple[list[RetrievedDoc], bool]:
    """Score each candidate with the role's rerank instruction and keep the best ``n``.

    Returns ``(docs, degraded)``. If the scorer raises or returns an
    out-of-range score, the coarse order is kept and ``degraded`` is True.
    """
    if not candidates:
        raise ValueError("rerank needs at least one candidate")
    if n < 1:
        raise ValueError("n must be >= 1")
    cands = _dedup(candidates)
    ids = [cid for cid, _ in cands]
    coarse = np.array([s for _, s in cands], dtype=np.float64)
    instruction = rerank_instruction(role)
    degraded = False
    try:
        fine = []
        for cid in ids:
            s = float(scorer.score(instruction, query_text, passages[cid]))
            if not (math.isfinite(s) and 0.0 <= s <= 1.0):
                raise ValueError(f"rerank score {s} outside [0, 1]")
            fine.append(s)
        fine_arr = np.array(fine, dtype=np.float64)
    except Exception as exc:  # noqa: BLE001 - any scorer failure degrades the round
        logger.warning("rerank failed for %r, keeping coarse order: %s", query_text[:60], exc)
        degraded = True
        fine_arr = np.clip((coarse + 1.0) / 2.0, 0.0, 1.0)
    order = _ranked(ids, fine_arr)[:n]
    docs = [
        RetrievedDoc(ids[i], passages[ids[i]], float(coarse[i]), float(fine_arr[i]), rank)
        for rank, i in enumerate(order, 1)
    ]
    return docs, degraded


def search(
    role: Role,
    query_text: str,
    kb: KnowledgeBase,
    embedder: EmbeddingBackend,
    scorer: RerankBackend,
    params: RetrievalParams = RetrievalParams(),
    *,
    round: int = 0,
    retry: RetryPolicy = DEFAULT_RETRY,
) -> RetrievalResult:
    role = Role(role)
    instruction = render_instruction(role, query_text)
    query = RetrievalQuery(query_text, role, instruction, round)
    index = kb.index_for(role)
    if len(index) == 0:
        return RetrievalResult(query, (), params)
    qvec = embed([instruction], embedder, retry=retry)[0]
    cands = coarse_recall(index, qvec, params.top_k)
    passages = {cid: index.chunk_store[cid].text for cid, _ in cands}
    docs, degraded = rerank(cands, role, query_text, scorer, params.top_n, passages)
    return RetrievalResult(query, tuple(docs), params, degraded)


def merge_results(results: Iterable[RetrievalResult]) -> list[RetrievedDoc]:
    """Union of docs across queries; a chunk keeps its best-scoring copy. Re-ranked from 1."""
    best: dict[str, RetrievedDoc] = {}
    for res in results:
        for d in res.docs:
            cur = best.get(d.chunk_id)
            if cur is None or (d.rerank_score, d.coarse_score) > (cur.rerank_score, cur.coarse_score):
                best[d.chunk_id] = d
    ordered = sorted(best.values(), key=lambda d: (-d.rerank_score, d.chunk_id))
    return [
        RetrievedDoc(d.chunk_id, d.text, d.coarse_score, d.rerank_score, rank) for rank, d in enumerate(ordered, 1)
    ]
