from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dualcare.kb import Chunk, KnowledgeBase, Role, SourceDocument, VectorIndex, build_indexes
from dualcare.llm import HashEmbedder, OverlapReranker
from dualcare.llm.mock import FunctionReranker
from dualcare.retrieval import (
    DimensionMismatch,
    RetrievalParams,
    coarse_recall,
    merge_results,
    render_instruction,
    rerank,
    rerank_instruction,
    search,
)


def make_index(vectors, role=Role.DOCTOR, prefix="c"):
    v = np.asarray(vectors, dtype=np.float64)
    v = v / np.linalg.norm(v, axis=1, keepdims=True)
    chunks = [Chunk(f"{prefix}#{i:04d}", prefix, f"text {i}", 0, 1) for i in range(len(v))]
    return VectorIndex(role, v.shape[1], chunks, v)


def brute_force(index, q, k):
    # independent oracle: python-level dot products, sorted with a tuple key
    scored = []
    for cid in index.chunk_ids:
        vec = index.vector(cid)
        s = sum(float(a) * float(b) for a, b in zip(vec, q))
        scored.append((-s, cid))
    scored.sort()
    return [cid for _, cid in scored[:k]]


@settings(max_examples=100, deadline=None)
@given(
    n=st.integers(1, 40),
    dim=st.integers(1, 12),
    k=st.integers(1, 50),
    seed=st.integers(0, 2**32 - 1),
)
def test_coarse_recall_matches_oracle(n, dim, k, seed):
    rng = np.random.default_rng(seed)
    v = rng.normal(size=(n, dim))
    v[np.all(v == 0, axis=1)] = 1.0
    idx = make_index(v)
    q = rng.normal(size=dim)
    q /= np.linalg.norm(q) or 1.0
    got = coarse_recall(idx, q, k)
    assert len(got) == min(k, n)
    assert [c for c, _ in got] == brute_force(idx, q, k)
    scores = [s for _, s in got]
    assert scores == sorted(scores, reverse=True)


def test_ties_break_by_chunk_id():
    idx = make_index([[1, 0], [1, 0], [0, 1]])
    got = coarse_recall(idx, np.array([1.0, 0.0]), 3)
    assert [c for c, _ in got] == ["c#0000", "c#0001", "c#0002"]


def test_dim_mismatch_and_bad_k():
    idx = make_index([[1, 0]])
    with pytest.raises(DimensionMismatch):
        coarse_recall(idx, np.ones(3), 1)
    with pytest.raises(ValueError):
        coarse_recall(idx, np.ones(2), 0)


def test_params_bounds():
    with pytest.raises(ValueError):
        RetrievalParams(top_k=3, top_n=4)
    with pytest.raises(ValueError):
        RetrievalParams(top_k=3, top_n=0)


def test_instructions_are_role_specific():
    d, p = render_instruction(Role.DOCTOR, "q"), render_instruction(Role.PHARMACIST, "q")
    assert d != p and d.endswith("\nQuery: q") and d.startswith("Instruct: ")
    assert "differential diagnosis" in d and "interactions" in p
    assert rerank_instruction(Role.DOCTOR) != rerank_instruction(Role.PHARMACIST)


PASSAGES = {"a": "fever cough", "b": "fever", "c": "rash"}


def test_rerank_orders_by_fine_score_and_keeps_n():
    docs, degraded = rerank([("c", 0.9), ("b", 0.8), ("a", 0.1)], Role.DOCTOR, "fever cough", OverlapReranker(), 2, PASSAGES)
    assert not degraded
    assert [d.chunk_id for d in docs] == ["a", "b"]
    assert [d.rank for d in docs] == [1, 2]
    assert docs[0].coarse_score == 0.1


def test_rerank_dedups_candidates():
    docs, _ = rerank([("a", 0.1), ("a", 0.5), ("b", 0.2)], Role.DOCTOR, "x", OverlapReranker(), 5, PASSAGES)
    assert sorted(d.chunk_id for d in docs) == ["a", "b"]
    assert next(d for d in docs if d.chunk_id == "a").coarse_score == 0.5


@pytest.mark.parametrize("fn", [lambda i, q, p: 1 / 0, lambda i, q, p: 1.5, lambda i, q, p: float("nan")])
def test_rerank_failure_degrades_to_coarse_order(fn):
    docs, degraded = rerank([("c", 0.9), ("b", 0.8), ("a", 0.1)], Role.DOCTOR, "q", FunctionReranker(fn), 2, PASSAGES)
    assert degraded
    assert [d.chunk_id for d in docs] == ["c", "b"]
    assert docs[0].rerank_score == pytest.approx((0.9 + 1) / 2)


def test_rerank_passes_role_instruction():
    seen = []
    rerank([("a", 0.0)], Role.PHARMACIST, "q", FunctionReranker(lambda i, q, p: seen.append(i) or 0.5), 1, PASSAGES)
    assert seen == [rerank_instruction(Role.PHARMACIST)]


def _kb():
    docs = [
        SourceDocument("dx", "", "fever cough symptoms diagnosis"),
        SourceDocument("rx", "", "ibuprofen dosage mg tablets"),
        SourceDocument("mix", "", "fever treated with ibuprofen"),
    ]
    chat = None
    from dualcare.llm import ScriptedChat

    chat = ScriptedChat(
        [
            {"tag": "Classify", "match": ["## Document title\ndx"], "payload": {"label": "doctor_only"}},
            {"tag": "Classify", "match": ["## Document title\nrx"], "payload": {"label": "pharmacist_only"}},
        ]
    )
    return build_indexes(docs, HashEmbedder(dim=64), chat)


def test_search_respects_role_isolation():
    kb = _kb()
    emb = HashEmbedder(dim=64)
    d = search(Role.DOCTOR, "ibuprofen dosage", kb, emb, OverlapReranker(), RetrievalParams(10, 10))
    p = search(Role.PHARMACIST, "fever cough", kb, emb, OverlapReranker(), RetrievalParams(10, 10))
    assert {x.chunk_id.split("#")[0] for x in d.docs} <= {"dx", "mix"}
    assert {x.chunk_id.split("#")[0] for x in p.docs} <= {"rx", "mix"}
    assert d.query.instruction == render_instruction(Role.DOCTOR, "ibuprofen dosage")


def test_search_result_bounded_and_ranked():
    kb = _kb()
    r = search(Role.DOCTOR, "fever cough", kb, HashEmbedder(dim=64), OverlapReranker(), RetrievalParams(2, 1), round=2)
    assert len(r.docs) == 1 and r.docs[0].chunk_id == "dx#0000" and r.query.round == 2


def test_search_empty_index():
    empty = VectorIndex(Role.DOCTOR, 8, [], np.zeros((0, 8)))
    kb = KnowledgeBase(empty, VectorIndex(Role.PHARMACIST, 8, [], np.zeros((0, 8))))
    r = search(Role.DOCTOR, "q", kb, HashEmbedder(dim=8), OverlapReranker())
    assert r.docs == ()


def test_search_dimension_mismatch():
    with pytest.raises(DimensionMismatch):
        search(Role.DOCTOR, "fever", _kb(), HashEmbedder(dim=32), OverlapReranker())


def test_merge_results_keeps_best_copy():
    kb = _kb()
    emb = HashEmbedder(dim=64)
    r1 = search(Role.DOCTOR, "fever", kb, emb, OverlapReranker())
    r2 = search(Role.DOCTOR, "fever cough symptoms", kb, emb, OverlapReranker())
    merged = merge_results([r1, r2])
    ids = [d.chunk_id for d in merged]
    assert len(ids) == len(set(ids))
    assert [d.rank for d in merged] == list(range(1, len(merged) + 1))
    best = {d.chunk_id: max(x.rerank_score for r in (r1, r2) for x in r.docs if x.chunk_id == d.chunk_id) for d in merged}
    assert all(d.rerank_score == best[d.chunk_id] for d in merged)
