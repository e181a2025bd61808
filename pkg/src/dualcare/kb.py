"""Role-specific knowledge bases: routing, chunking, embedding, persistence."""

from __future__ import annotations

import json
import logging
import re
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from types import MappingProxyType
from typing import Iterable, Mapping, Optional, Sequence, Union

import numpy as np

from dualcare.llm import ChatRequest, SchemaTag, complete, embed
from dualcare.llm.client import ChatBackend, EmbeddingBackend, RetryPolicy, DEFAULT_RETRY
from dualcare.llm.errors import LLMError, TransportError
from dualcare.llm.prompt import join_sections, section
from dualcare.textutil import tokenize

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


class Role(str, Enum):
    DOCTOR = "doctor"
    PHARMACIST = "pharmacist"


class Target(str, Enum):
    DOCTOR_ONLY = "doctor_only"
    PHARMACIST_ONLY = "pharmacist_only"
    BOTH = "both"

    def roles(self) -> tuple[Role, ...]:
        if self is Target.DOCTOR_ONLY:
            return (Role.DOCTOR,)
        if self is Target.PHARMACIST_ONLY:
            return (Role.PHARMACIST,)
        return (Role.DOCTOR, Role.PHARMACIST)


class ClassificationError(Exception):
    def __init__(self, doc_id: str, message: str):
        super().__init__(f"{doc_id}: {message}")
        self.doc_id = doc_id


class IndexBuildError(Exception):
    def __init__(self, chunk_id: str, message: str):
        super().__init__(f"{chunk_id}: {message}")
        self.chunk_id = chunk_id


class IndexLoadError(Exception):
    pass


class IndexFormatError(IndexLoadError):
    pass


class IndexVersionError(IndexLoadError):
    pass


class IndexTruncatedError(IndexLoadError):
    pass


class IndexDimError(IndexLoadError):
    pass


@dataclass(frozen=True)
class SourceDocument:
    doc_id: str
    title: str
    body: str
    metadata: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if not self.doc_id:
            raise ValueError("doc_id must be non-empty")
        if not self.body or not self.body.strip():
            raise ValueError(f"{self.doc_id}: body must be non-empty")

    def to_dict(self) -> dict:
        return {"doc_id": self.doc_id, "title": self.title, "body": self.body, "metadata": dict(self.metadata)}


@dataclass(frozen=True)
class DomainAssignment:
    target: Target
    rationale: str = ""
    source: str = "backend"  # "backend" or "lexicon"


@dataclass(frozen=True)
class Chunk:
    chunk_id: str
    doc_id: str
    text: str
    start: int
    end: int


def load_corpus(path: PathLike) -> list[SourceDocument]:
    docs: list[SourceDocument] = []
    seen: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                doc = SourceDocument(
                    doc_id=str(rec["doc_id"]),
                    title=str(rec.get("title", "")),
                    body=str(rec["body"]),
                    metadata={str(k): str(v) for k, v in (rec.get("metadata") or {}).items()},
                )
            except (ValueError, KeyError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from exc
            if doc.doc_id in seen:
                raise ValueError(f"{path}:{lineno}: duplicate doc_id {doc.doc_id!r}")
            seen.add(doc.doc_id)
            docs.append(doc)
    return docs


def dump_corpus(docs: Iterable[SourceDocument], path: PathLike) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for d in docs:
            fh.write(json.dumps(d.to_dict(), sort_keys=True, ensure_ascii=False) + "\n")


# --- classification -------------------------------------------------------

DIAGNOSTIC_TERMS = (
    "symptom", "symptoms", "sign", "signs", "diagnosis", "diagnostic", "differential", "pathology",
    "pathogenesis", "etiology", "presentation", "presents", "examination", "lesion", "onset",
    "criteria", "prognosis", "clinical", "findings", "imaging", "biopsy",
)
MEDICATION_TERMS = (
    "drug", "drugs", "dose", "doses", "dosage", "dosing", "mg", "tablet", "tablets", "medication",
    "medications", "contraindication", "contraindications", "contraindicated", "interaction",
    "interactions", "precaution", "precautions", "prescribe", "prescribed", "pharmacokinetics",
    "regimen", "therapy", "indication", "indications", "adverse",
)


@dataclass(frozen=True)
class Lexicon:
    diagnostic: frozenset = frozenset(DIAGNOSTIC_TERMS)
    medication: frozenset = frozenset(MEDICATION_TERMS)

    def classify(self, text: str) -> DomainAssignment:
        toks = tokenize(text)
        d = sum(t in self.diagnostic for t in toks)
        m = sum(t in self.medication for t in toks)
        if d and not m:
            return DomainAssignment(Target.DOCTOR_ONLY, f"lexicon: {d} diagnostic terms, no medication terms", "lexicon")
        if m and not d:
            return DomainAssignment(Target.PHARMACIST_ONLY, f"lexicon: {m} medication terms, no diagnostic terms", "lexicon")
        return DomainAssignment(Target.BOTH, f"lexicon: {d} diagnostic / {m} medication terms", "lexicon")


CLASSIFY_SYSTEM = (
    "You route medical reference documents into knowledge bases. Label a document doctor_only when it "
    "covers only symptoms, pathology or diagnosis; pharmacist_only when it covers only drugs, dosing, "
    "precautions or other medication guidance; both when it covers diagnosis and treatment together."
)


def classify_document(
    doc: SourceDocument,
    backend: Optional[ChatBackend],
    *,
    lexicon: Lexicon = Lexicon(),
    fallback: bool = True,
    retry: RetryPolicy = DEFAULT_RETRY,
) -> DomainAssignment:
    """Route a document to the doctor base, the pharmacist base, or both.

    Uses a structured backend call. When the backend is absent or unreachable
    and ``fallback`` is set, the keyword lexicon decides instead; invalid
    replies are always an error.
    """
    if not doc.body.strip():
        raise ClassificationError(doc.doc_id, "empty body")
    if backend is None:
        if not fallback:
            raise ClassificationError(doc.doc_id, "no classification backend")
        return lexicon.classify(f"{doc.title}\n{doc.body}")
    req = ChatRequest(
        CLASSIFY_SYSTEM,
        join_sections(section("Document title", doc.title or doc.doc_id), section("Document", doc.body)),
        SchemaTag.CLASSIFY,
    )
    try:
        out = complete(req, backend, retry=retry)
    except TransportError as exc:
        if fallback:
            logger.warning("classifier unreachable for %s, using lexicon: %s", doc.doc_id, exc)
            return lexicon.classify(f"{doc.title}\n{doc.body}")
        raise ClassificationError(doc.doc_id, str(exc)) from exc
    except LLMError as exc:
        raise ClassificationError(doc.doc_id, str(exc)) from exc
    return DomainAssignment(Target(out.payload.label), out.payload.rationale, "backend")


# --- chunking ---------------------------------------------------------------

DEFAULT_MAX_CHARS = 800
DEFAULT_OVERLAP = 80

_SENTENCE_END = re.compile(r"[.!?。！？](?=\s|$)|\n")


def _boundary(body: str, start: int, end: int, min_end: int) -> int:
    """Best cut in body[start:end]: last paragraph break, else last sentence end."""
    window = body[start:end]
    para = window.rfind("\n\n")
    if para != -1 and start + para + 2 > min_end:
        return start + para + 2
    last = -1
    for m in _SENTENCE_END.finditer(window):
        last = m.end()
    if last != -1 and start + last > min_end:
        return start + last
    return end


def chunk_document(doc: SourceDocument, max_chars: int = DEFAULT_MAX_CHARS, overlap_chars: int = DEFAULT_OVERLAP) -> list[Chunk]:
    if not 0 <= overlap_chars < max_chars:
        raise ValueError("need 0 <= overlap_chars < max_chars")
    body = doc.body
    n = len(body)
    chunks: list[Chunk] = []
    start = 0
    while True:
        end = min(start + max_chars, n)
        if end < n:
            end = _boundary(body, start, end, start + overlap_chars)
        chunks.append(Chunk(f"{doc.doc_id}#{len(chunks):04d}", doc.doc_id, body[start:end], start, end))
        if end >= n:
            return chunks
        start = end - overlap_chars


# --- indexes ----------------------------------------------------------------


class VectorIndex:
    """Immutable exact-scan store of unit vectors for one role."""

    def __init__(self, role: Role, dim: int, chunks: Sequence[Chunk], vectors: np.ndarray):
        if dim <= 0:
            raise ValueError("dim must be positive")
        vectors = np.asarray(vectors, dtype=np.float64).reshape(len(chunks), dim)
        ids = [c.chunk_id for c in chunks]
        if len(set(ids)) != len(ids):
            raise ValueError("chunk_ids must be unique within an index")
        self.role = Role(role)
        self.dim = dim
        self.chunk_ids: tuple[str, ...] = tuple(ids)
        self.chunk_store: Mapping[str, Chunk] = MappingProxyType({c.chunk_id: c for c in chunks})
        vectors = vectors.copy()
        vectors.setflags(write=False)
        self.vectors = vectors

    def __len__(self) -> int:
        return len(self.chunk_ids)

    def __eq__(self, other) -> bool:
        if not isinstance(other, VectorIndex):
            return NotImplemented
        return (
            self.role == other.role
            and self.dim == other.dim
            and self.chunk_ids == other.chunk_ids
            and dict(self.chunk_store) == dict(other.chunk_store)
            and self.vectors.tobytes() == other.vectors.tobytes()
        )

    def vector(self, chunk_id: str) -> np.ndarray:
        return self.vectors[self.chunk_ids.index(chunk_id)]

    def doc_ids(self) -> set[str]:
        return {c.doc_id for c in self.chunk_store.values()}

    def __repr__(self) -> str:
        return f"VectorIndex(role={self.role.value}, dim={self.dim}, entries={len(self)})"


@dataclass(frozen=True)
class KnowledgeBase:
    doctor: VectorIndex
    pharmacist: VectorIndex
    assignments: Mapping[str, DomainAssignment] = field(default_factory=dict)

    def index_for(self, role: Role) -> VectorIndex:
        return self.doctor if Role(role) is Role.DOCTOR else self.pharmacist


def _embed_chunks(chunks: list[Chunk], embedder: EmbeddingBackend, batch_size: int, workers: int, retry: RetryPolicy) -> np.ndarray:
    batches = [chunks[i : i + batch_size] for i in range(0, len(chunks), batch_size)]

    def run(batch: list[Chunk]) -> np.ndarray:
        try:
            return embed([c.text for c in batch], embedder, retry=retry)
        except (LLMError, ValueError):
            pass
        # locate the failing chunk
        rows = []
        for c in batch:
            try:
                rows.append(embed([c.text], embedder, retry=retry)[0])
            except (LLMError, ValueError) as exc:
                raise IndexBuildError(c.chunk_id, f"embedding failed: {exc}") from exc
        return np.vstack(rows)

    if workers > 1 and len(batches) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(run, batches))
    else:
        parts = [run(b) for b in batches]
    return np.vstack(parts) if parts else np.zeros((0, embedder.dim))


def build_indexes(
    corpus: Sequence[SourceDocument],
    embedder: EmbeddingBackend,
    classifier: Optional[ChatBackend] = None,
    *,
    max_chars: int = DEFAULT_MAX_CHARS,
    overlap_chars: int = DEFAULT_OVERLAP,
    lexicon: Lexicon = Lexicon(),
    batch_size: int = 32,
    workers: int = 1,
    retry: RetryPolicy = DEFAULT_RETRY,
) -> KnowledgeBase:
    """Classify, chunk and embed ``corpus`` into a doctor and a pharmacist index.

    Chunks of a ``both`` document go into both indexes under the same
    chunk_id with the same vector.
    """
    if not corpus:
        raise ValueError("corpus must be non-empty")
    ids = [d.doc_id for d in corpus]
    if len(set(ids)) != len(ids):
        raise ValueError("doc_ids must be unique within a corpus")

    assignments: dict[str, DomainAssignment] = {}
    all_chunks: list[Chunk] = []
    for doc in corpus:
        assignments[doc.doc_id] = classify_document(doc, classifier, lexicon=lexicon, retry=retry)
        all_chunks.extend(chunk_document(doc, max_chars, overlap_chars))

    vectors = _embed_chunks(all_chunks, embedder, batch_size, workers, retry)
    per_role: dict[Role, list[int]] = {Role.DOCTOR: [], Role.PHARMACIST: []}
    for i, c in enumerate(all_chunks):
        for role in assignments[c.doc_id].target.roles():
            per_role[role].append(i)

    def make(role: Role) -> VectorIndex:
        idx = per_role[role]
        return VectorIndex(role, embedder.dim, [all_chunks[i] for i in idx], vectors[idx])

    return KnowledgeBase(make(Role.DOCTOR), make(Role.PHARMACIST), assignments)


# --- persistence --------------------------------------------------------------
#
# layout: MAGIC | u32 header_len | header json | u64 store_len | store json | float64 LE vectors

MAGIC = b"DCVIDX\r\n"
FORMAT_VERSION = 1


def persist_index(index: VectorIndex, path: PathLike) -> None:
    header = json.dumps(
        {"format_version": FORMAT_VERSION, "role_scope": index.role.value, "dim": index.dim, "entry_count": len(index)},
        sort_keys=True,
    ).encode()
    store = json.dumps(
        [[c.chunk_id, c.doc_id, c.text, c.start, c.end] for c in (index.chunk_store[i] for i in index.chunk_ids)],
        ensure_ascii=False,
    ).encode()
    vec = np.ascontiguousarray(index.vectors, dtype="<f8").tobytes()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(struct.pack("<Q", len(store)))
        fh.write(store)
        fh.write(vec)


def _take(buf: bytes, pos: int, n: int, what: str) -> tuple[bytes, int]:
    if pos + n > len(buf):
        raise IndexTruncatedError(f"file truncated while reading {what}")
    return buf[pos : pos + n], pos + n


def load_index(path: PathLike, expected_dim: Optional[int] = None) -> VectorIndex:
    buf = Path(path).read_bytes()
    magic, pos = _take(buf, 0, len(MAGIC), "magic")
    if magic != MAGIC:
        raise IndexFormatError(f"{path}: not an index file (bad magic)")
    raw, pos = _take(buf, pos, 4, "header length")
    raw, pos = _take(buf, pos, struct.unpack("<I", raw)[0], "header")
    try:
        header = json.loads(raw)
    except ValueError as exc:
        raise IndexFormatError(f"{path}: corrupt header") from exc
    if header.get("format_version") != FORMAT_VERSION:
        raise IndexVersionError(f"{path}: format_version {header.get('format_version')}, expected {FORMAT_VERSION}")
    dim, count = int(header["dim"]), int(header["entry_count"])
    if expected_dim is not None and dim != expected_dim:
        raise IndexDimError(f"{path}: dim {dim}, expected {expected_dim}")
    raw, pos = _take(buf, pos, 8, "store length")
    raw, pos = _take(buf, pos, struct.unpack("<Q", raw)[0], "chunk store")
    try:
        store = json.loads(raw)
    except ValueError as exc:
        raise IndexFormatError(f"{path}: corrupt chunk store") from exc
    if len(store) != count:
        raise IndexFormatError(f"{path}: chunk store has {len(store)} entries, header says {count}")
    raw, pos = _take(buf, pos, count * dim * 8, "vectors")
    if pos != len(buf):
        raise IndexFormatError(f"{path}: {len(buf) - pos} trailing bytes")
    vectors = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(count, dim)
    chunks = [Chunk(*row) for row in store]
    return VectorIndex(Role(header["role_scope"]), dim, chunks, vectors)


INDEX_FILES = {Role.DOCTOR: "doctor.idx", Role.PHARMACIST: "pharmacist.idx"}


def save_knowledge_base(kb: KnowledgeBase, directory: PathLike) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for role, name in INDEX_FILES.items():
        persist_index(kb.index_for(role), d / name)


def load_knowledge_base(directory: PathLike, expected_dim: Optional[int] = None) -> KnowledgeBase:
    d = Path(directory)
    missing = [n for n in INDEX_FILES.values() if not (d / n).is_file()]
    if missing:
        raise FileNotFoundError(f"missing index files in {d}: {', '.join(missing)}")
    doctor = load_index(d / INDEX_FILES[Role.DOCTOR], expected_dim)
    pharmacist = load_index(d / INDEX_FILES[Role.PHARMACIST], expected_dim)
    if doctor.role is not Role.DOCTOR or pharmacist.role is not Role.PHARMACIST:
        raise IndexFormatError(f"{d}: index files have swapped role scopes")
    return KnowledgeBase(doctor, pharmacist)
