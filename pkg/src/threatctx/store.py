"""Local knowledge database: chunking, hybrid indexing, and retrieval.

Documents are split into overlapping character chunks, embedded, and held
in one persistent index with two search arms: a BM25 lexical scorer and an
exact dense-vector scan. Arms are combined with reciprocal-rank fusion and
optionally re-ranked with maximal marginal relevance.

The index is a cache over the source documents: an append-only record log
plus a vector log, both rebuildable by re-ingesting the corpus. Corpora are
desk-scale by contract, so every scan is exact; there is deliberately no
approximate-nearest-neighbor structure.
"""

from __future__ import annotations

import json
import math
import threading
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Any, Iterable, Mapping, Optional, Sequence

import numpy as np

from .gateway import Vector, tokenize
from .model import (
    EngineConfig,
    EngineError,
    KnowledgeChunk,
    SimilarityMetric,
    SourceKind,
    validate_config,
)

FORMAT_VERSION = 1

BM25_K1 = 1.2
BM25_B = 0.75


class StoreError(EngineError):
    """Base class for local knowledge store errors."""


class StorageError(StoreError):
    """The on-disk index is missing, corrupt, or unwritable."""


class IndexVersionError(StorageError):
    """The on-disk index was written by an incompatible format version."""


class DimensionMismatch(StoreError):
    """Query vector dimension differs from the index dimension."""


class RetrieverKind(str, Enum):
    DENSE = "dense"
    SPARSE = "sparse"
    FUSED = "fused"
    MMR = "mmr"


@dataclass(frozen=True)
class LocalDocument:
    """A source document of organizational knowledge."""

    doc_id: str
    title: str
    body: str
    source_kind: SourceKind

    def __post_init__(self):
        if not self.doc_id:
            raise ValueError("doc_id must be nonempty")

    def to_dict(self) -> dict[str, Any]:
        return {
            "doc_id": self.doc_id,
            "title": self.title,
            "body": self.body,
            "source_kind": self.source_kind.value,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "LocalDocument":
        return cls(
            doc_id=data["doc_id"],
            title=data.get("title", ""),
            body=data["body"],
            source_kind=SourceKind(data["source_kind"]),
        )


@dataclass(frozen=True)
class RankedHit:
    """One retrieval result; ranks are 1-based and gap-free per result list."""

    chunk_id: str
    score: float
    rank: int
    retriever: RetrieverKind

    def to_dict(self) -> dict[str, Any]:
        return {
            "chunk_id": self.chunk_id,
            "score": self.score,
            "rank": self.rank,
            "retriever": self.retriever.value,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "RankedHit":
        return cls(
            chunk_id=data["chunk_id"],
            score=float(data["score"]),
            rank=int(data["rank"]),
            retriever=RetrieverKind(data["retriever"]),
        )


def chunk_text(body: str, chunk_size: int, overlap: int) -> list[tuple[tuple[int, int], str]]:
    """Split text into spans of ``chunk_size`` advancing by ``chunk_size - overlap``.

    Every chunk except possibly the last has exactly ``chunk_size`` characters,
    consecutive chunks share exactly ``overlap`` characters, and stitching the
    chunks back together (dropping each successor's leading overlap) reproduces
    the body exactly. An empty body yields no chunks.
    """
    if not 0 < overlap < chunk_size:
        raise ValueError("requires 0 < overlap < chunk_size")
    if not body:
        return []
    spans: list[tuple[tuple[int, int], str]] = []
    start = 0
    stride = chunk_size - overlap
    while True:
        end = min(start + chunk_size, len(body))
        spans.append(((start, end), body[start:end]))
        if end >= len(body):
            return spans
        start += stride


def cosine_similarity(a: Sequence[float], b: Sequence[float]) -> float:
    """Cosine similarity; 0.0 when either vector has zero norm."""
    dot = math.fsum(x * y for x, y in zip(a, b))
    na = math.sqrt(math.fsum(x * x for x in a))
    nb = math.sqrt(math.fsum(y * y for y in b))
    if na == 0.0 or nb == 0.0:
        return 0.0
    return dot / (na * nb)


class _Bm25Stats:
    """Precomputed BM25 statistics over the current chunk set."""

    def __init__(self, chunks: Mapping[str, KnowledgeChunk]):
        self.tokens: dict[str, list[str]] = {
            cid: tokenize(chunk.text) for cid, chunk in chunks.items()
        }
        self.doc_len = {cid: len(toks) for cid, toks in self.tokens.items()}
        self.n_docs = len(self.tokens)
        self.avg_len = (
            sum(self.doc_len.values()) / self.n_docs if self.n_docs else 0.0
        )
        self.term_freqs: dict[str, dict[str, int]] = {}
        self.doc_freq: dict[str, int] = {}
        for cid, toks in self.tokens.items():
            tf: dict[str, int] = {}
            for tok in toks:
                tf[tok] = tf.get(tok, 0) + 1
            self.term_freqs[cid] = tf
            for term in tf:
                self.doc_freq[term] = self.doc_freq.get(term, 0) + 1

    def idf(self, term: str) -> float:
        df = self.doc_freq.get(term, 0)
        return math.log(1.0 + (self.n_docs - df + 0.5) / (df + 0.5))

    def score(self, query_terms: Sequence[str], chunk_id: str) -> float:
        tf = self.term_freqs[chunk_id]
        dl = self.doc_len[chunk_id]
        norm = BM25_K1 * (1.0 - BM25_B + BM25_B * dl / self.avg_len) if self.avg_len else 0.0
        total = 0.0
        for term in query_terms:
            freq = tf.get(term, 0)
            if freq == 0:
                continue
            total += self.idf(term) * freq * (BM25_K1 + 1.0) / (freq + norm)
        return total


def _unique_terms(query_text: str) -> list[str]:
    # duplicate query terms contribute once
    seen: set[str] = set()
    out: list[str] = []
    for term in tokenize(query_text):
        if term not in seen:
            seen.add(term)
            out.append(term)
    return out


class KnowledgeIndex:
    """Persistent hybrid index over local knowledge chunks.

    One writer at a time; searches grab an immutable snapshot under a short
    lock and never observe a partially ingested document. Layout of the
    index directory (format version 1):

    * ``meta.json``     - format version, embedding dimension, corpus fingerprint
    * ``records.jsonl`` - append-only document and chunk records
    * ``vectors.jsonl`` - append-only chunk_id -> embedding records
    """

    def __init__(self, path: Path | str, embedder: Any):
        self.path = Path(path)
        self._embedder = embedder
        self._lock = threading.RLock()
        self._docs: dict[str, dict[str, str]] = {}
        self._chunks: dict[str, KnowledgeChunk] = {}
        self._dimension: Optional[int] = None
        self._fingerprint: Optional[str] = None
        self._bm25: Optional[_Bm25Stats] = None
        self._dense: Optional[tuple[list[str], np.ndarray]] = None
        self._load_or_create()

    # ------------------------------------------------------------------ I/O

    def _meta_path(self) -> Path:
        return self.path / "meta.json"

    def _records_path(self) -> Path:
        return self.path / "records.jsonl"

    def _vectors_path(self) -> Path:
        return self.path / "vectors.jsonl"

    def _load_or_create(self) -> None:
        if not self._meta_path().exists():
            self.path.mkdir(parents=True, exist_ok=True)
            self._write_meta()
            return
        try:
            meta = json.loads(self._meta_path().read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise StorageError(f"cannot read index metadata: {exc}")
        if meta.get("format_version") != FORMAT_VERSION:
            raise IndexVersionError(
                f"index format {meta.get('format_version')!r} != supported {FORMAT_VERSION}"
            )
        self._dimension = meta.get("embedding_dim")
        self._fingerprint = meta.get("corpus_fingerprint")
        self._replay()

    def _write_meta(self) -> None:
        meta = {
            "format_version": FORMAT_VERSION,
            "embedding_dim": self._dimension,
            "corpus_fingerprint": self._fingerprint,
        }
        self._meta_path().write_text(
            json.dumps(meta, sort_keys=True, ensure_ascii=False) + "\n", encoding="utf-8"
        )

    def _replay(self) -> None:
        chunk_rows: dict[str, dict[str, Any]] = {}
        chunk_order: list[str] = []
        if self._records_path().exists():
            with self._records_path().open(encoding="utf-8") as fh:
                for line_no, line in enumerate(fh, start=1):
                    if not line.strip():
                        continue
                    try:
                        row = json.loads(line)
                    except json.JSONDecodeError as exc:
                        raise StorageError(f"records.jsonl line {line_no}: {exc}")
                    if row.get("kind") == "document":
                        doc_id = row["doc_id"]
                        # re-ingestion replaces all chunks of the document
                        for cid in [c for c, r in chunk_rows.items() if r["parent_doc_id"] == doc_id]:
                            del chunk_rows[cid]
                            chunk_order.remove(cid)
                        self._docs[doc_id] = {
                            "title": row.get("title", ""),
                            "source_kind": row.get("source_kind", SourceKind.OTHER.value),
                        }
                    elif row.get("kind") == "chunk":
                        cid = row["chunk_id"]
                        if cid not in chunk_rows:
                            chunk_order.append(cid)
                        chunk_rows[cid] = row
                    else:
                        raise StorageError(f"records.jsonl line {line_no}: unknown kind")
        vectors: dict[str, tuple[float, ...]] = {}
        if self._vectors_path().exists():
            with self._vectors_path().open(encoding="utf-8") as fh:
                for line_no, line in enumerate(fh, start=1):
                    if not line.strip():
                        continue
                    try:
                        row = json.loads(line)
                    except json.JSONDecodeError as exc:
                        raise StorageError(f"vectors.jsonl line {line_no}: {exc}")
                    vectors[row["chunk_id"]] = tuple(float(v) for v in row["embedding"])
        for cid in chunk_order:
            row = chunk_rows[cid]
            if cid not in vectors:
                raise StorageError(f"chunk {cid} has no stored embedding")
            self._chunks[cid] = KnowledgeChunk(
                chunk_id=cid,
                parent_doc_id=row["parent_doc_id"],
                text=row["text"],
                span=tuple(row["span"]),
                source_kind=SourceKind(row["source_kind"]),
                embedding=vectors[cid],
            )

    def _append(self, path: Path, rows: Iterable[Mapping[str, Any]]) -> None:
        try:
            with path.open("a", encoding="utf-8") as fh:
                for row in rows:
                    fh.write(json.dumps(row, sort_keys=True, ensure_ascii=False) + "\n")
                fh.flush()
        except OSError as exc:
            raise StorageError(f"cannot append to {path.name}: {exc}")

    # ------------------------------------------------------------ properties

    @property
    def dimension(self) -> Optional[int]:
        return self._dimension

    @property
    def corpus_fingerprint(self) -> Optional[str]:
        return self._fingerprint

    def set_corpus_fingerprint(self, fingerprint: str) -> None:
        with self._lock:
            self._fingerprint = fingerprint
            self._write_meta()

    def doc_count(self) -> int:
        return len(self._docs)

    def chunk_count(self) -> int:
        return len(self._chunks)

    def get_chunk(self, chunk_id: str) -> KnowledgeChunk:
        try:
            return self._chunks[chunk_id]
        except KeyError:
            raise StoreError(f"unknown chunk {chunk_id!r}")

    def all_chunks(self) -> list[KnowledgeChunk]:
        with self._lock:
            return list(self._chunks.values())

    # -------------------------------------------------------------- ingest

    def ingest_document(self, doc: LocalDocument, config: EngineConfig) -> list[str]:
        """Chunk, embed, and index one document; replaces any prior version.

        Returns the new chunk ids. Chunks enter both search arms atomically:
        a concurrent search sees either none or all of the document's chunks.
        """
        validate_config(config)
        pieces = chunk_text(doc.body, config.chunk_size, config.chunk_overlap)
        texts = [text for _, text in pieces]
        embeddings: list[Vector] = self._embedder.embed(texts) if texts else []
        new_chunks: list[KnowledgeChunk] = []
        for ((start, end), text), emb in zip(pieces, embeddings):
            if self._dimension is not None and len(emb) != self._dimension:
                raise DimensionMismatch(
                    f"embedding dim {len(emb)} != index dim {self._dimension}"
                )
            new_chunks.append(
                KnowledgeChunk(
                    chunk_id=f"{doc.doc_id}#{start}",
                    parent_doc_id=doc.doc_id,
                    text=text,
                    span=(start, end),
                    source_kind=doc.source_kind,
                    embedding=emb,
                )
            )
        with self._lock:
            if self._dimension is None and new_chunks:
                self._dimension = len(new_chunks[0].embedding)
                self._write_meta()
            stale = [cid for cid, c in self._chunks.items() if c.parent_doc_id == doc.doc_id]
            for cid in stale:
                del self._chunks[cid]
            self._docs[doc.doc_id] = {
                "title": doc.title,
                "source_kind": doc.source_kind.value,
            }
            for chunk in new_chunks:
                self._chunks[chunk.chunk_id] = chunk
            self._bm25 = None
            self._dense = None
            self._append(
                self._records_path(),
                [
                    {
                        "kind": "document",
                        "doc_id": doc.doc_id,
                        "title": doc.title,
                        "source_kind": doc.source_kind.value,
                    },
                    *(
                        {
                            "kind": "chunk",
                            "chunk_id": c.chunk_id,
                            "parent_doc_id": c.parent_doc_id,
                            "text": c.text,
                            "span": list(c.span),
                            "source_kind": c.source_kind.value,
                        }
                        for c in new_chunks
                    ),
                ],
            )
            self._append(
                self._vectors_path(),
                ({"chunk_id": c.chunk_id, "embedding": list(c.embedding)} for c in new_chunks),
            )
        return [c.chunk_id for c in new_chunks]

    # -------------------------------------------------------------- search

    def _dense_snapshot(self) -> tuple[list[str], np.ndarray]:
        with self._lock:
            if self._dense is None:
                ids = sorted(self._chunks)
                matrix = (
                    np.array([self._chunks[cid].embedding for cid in ids], dtype=np.float64)
                    if ids
                    else np.zeros((0, self._dimension or 0), dtype=np.float64)
                )
                self._dense = (ids, matrix)
            return self._dense

    def _bm25_snapshot(self) -> _Bm25Stats:
        with self._lock:
            if self._bm25 is None:
                self._bm25 = _Bm25Stats(self._chunks)
            return self._bm25

    def dense_search(
        self,
        query_embedding: Sequence[float],
        k: int,
        metric: SimilarityMetric = SimilarityMetric.COSINE,
    ) -> list[RankedHit]:
        """Exact top-k scan under the chosen metric.

        Cosine and dot report raw similarity (descending); euclidean reports
        the negated distance so scores are non-increasing in rank for every
        metric. Ties break on ascending chunk_id.
        """
        if k < 1:
            raise ValueError("k must be >= 1")
        ids, matrix = self._dense_snapshot()
        if not ids:
            return []
        query = np.asarray(query_embedding, dtype=np.float64)
        if self._dimension is not None and query.shape[0] != self._dimension:
            raise DimensionMismatch(
                f"query dim {query.shape[0]} != index dim {self._dimension}"
            )
        metric = SimilarityMetric(metric)
        if metric is SimilarityMetric.COSINE:
            denom = np.linalg.norm(matrix, axis=1) * np.linalg.norm(query)
            raw = matrix @ query
            scores = np.zeros(len(ids), dtype=np.float64)
            safe = denom > 0
            scores[safe] = raw[safe] / denom[safe]
        elif metric is SimilarityMetric.DOT:
            scores = matrix @ query
        else:
            scores = -np.linalg.norm(matrix - query, axis=1)
        order = sorted(range(len(ids)), key=lambda i: (-float(scores[i]), ids[i]))
        top = order[: min(k, len(ids))]
        return [
            RankedHit(chunk_id=ids[i], score=float(scores[i]), rank=r, retriever=RetrieverKind.DENSE)
            for r, i in enumerate(top, start=1)
        ]

    def sparse_search(self, query_text: str, k: int) -> list[RankedHit]:
        """BM25 top-k over tokenized chunks; chunks with zero score are omitted."""
        if k < 1:
            raise ValueError("k must be >= 1")
        stats = self._bm25_snapshot()
        if not stats.n_docs:
            return []
        terms = _unique_terms(query_text)
        scored = []
        for cid in stats.tokens:
            s = stats.score(terms, cid)
            if s > 0.0:
                scored.append((cid, s))
        scored.sort(key=lambda item: (-item[1], item[0]))
        return [
            RankedHit(chunk_id=cid, score=score, rank=r, retriever=RetrieverKind.SPARSE)
            for r, (cid, score) in enumerate(scored[:k], start=1)
        ]

    def ensemble_search(
        self,
        query_text: str,
        query_embedding: Sequence[float],
        config: EngineConfig,
    ) -> list[RankedHit]:
        """Reciprocal-rank fusion of the sparse and dense arms.

        fused_score(c) = sum over lists containing c of 1 / (rrf_k + rank).
        The top ``fused_top_k`` chunks are returned; ties break on the best
        component rank, then ascending chunk_id.
        """
        sparse = self.sparse_search(query_text, config.sparse_top_k)
        dense = self.dense_search(query_embedding, config.dense_top_k, config.similarity_metric)
        fused: dict[str, float] = {}
        best_rank: dict[str, int] = {}
        for hits in (sparse, dense):
            for hit in hits:
                fused[hit.chunk_id] = fused.get(hit.chunk_id, 0.0) + 1.0 / (config.rrf_k + hit.rank)
                best_rank[hit.chunk_id] = min(best_rank.get(hit.chunk_id, hit.rank), hit.rank)
        ordered = sorted(fused.items(), key=lambda item: (-item[1], best_rank[item[0]], item[0]))
        return [
            RankedHit(chunk_id=cid, score=score, rank=r, retriever=RetrieverKind.FUSED)
            for r, (cid, score) in enumerate(ordered[: config.fused_top_k], start=1)
        ]

    def mmr_rerank(
        self,
        candidates: Sequence[RankedHit],
        query_embedding: Sequence[float],
        mmr_lambda: float,
        k: int,
    ) -> list[RankedHit]:
        """Greedy maximal-marginal-relevance selection over the candidates.

        Each step picks the candidate maximizing
        lambda * sim(c, query) - (1 - lambda) * max over selected s of sim(c, s)
        with cosine similarity; ties keep the earlier (better fused rank)
        candidate. The first pick has no diversity penalty.
        """
        if not 0.0 <= mmr_lambda <= 1.0:
            raise ValueError("mmr_lambda must lie in [0, 1]")
        if not candidates:
            return []
        embeddings = [self.get_chunk(hit.chunk_id).embedding for hit in candidates]
        relevance = [cosine_similarity(emb, query_embedding) for emb in embeddings]
        pool = list(range(len(candidates)))
        selected: list[int] = []
        scores: list[float] = []
        while pool and len(selected) < k:
            best_idx = None
            best_score = -math.inf
            for i in pool:
                if selected:
                    penalty = max(cosine_similarity(embeddings[i], embeddings[s]) for s in selected)
                else:
                    penalty = 0.0
                score = mmr_lambda * relevance[i] - (1.0 - mmr_lambda) * penalty
                if score > best_score:
                    best_score = score
                    best_idx = i
            selected.append(best_idx)
            scores.append(best_score)
            pool.remove(best_idx)
        return [
            RankedHit(
                chunk_id=candidates[i].chunk_id,
                score=scores[r - 1],
                rank=r,
                retriever=RetrieverKind.MMR,
            )
            for r, i in enumerate(selected, start=1)
        ]

    def top_relevance(
        self,
        query_text: str,
        query_embedding: Sequence[float],
        config: EngineConfig,
    ) -> float:
        """Relevance of the closest fused candidate to the query, in [0, 1].

        This is the operational signal for the relevance gate: the best
        cosine similarity between the query and any fused candidate, floored
        at 0.0. An empty index (or an empty fused list) scores 0.0, and a
        query identical to an indexed chunk scores 1.0.
        """
        fused = self.ensemble_search(query_text, query_embedding, config)
        if not fused:
            return 0.0
        best = max(
            cosine_similarity(self.get_chunk(hit.chunk_id).embedding, query_embedding)
            for hit in fused
        )
        return min(1.0, max(0.0, best))


def service_lock_path(index_dir: Path | str) -> Path:
    """Path of the advisory lock the service holds while using the index."""
    return Path(index_dir) / "service.lock"
