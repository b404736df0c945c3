"""Shared domain types, engine configuration, and the canonical JSON codec.

Every record the engine moves around (threat reports, knowledge chunks,
run outcomes, config) is an immutable value object defined here, with a
``to_dict``/``from_dict`` pair producing the canonical serialized form:
UTF-8 JSON with snake_case field names. The CLI, the HTTP service, and
all fixture files speak this one format.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field, fields
from datetime import datetime, timezone
from enum import Enum
from typing import Any, Iterable, Mapping, Optional

CVE_ID_PATTERN = re.compile(r"^CVE-\d{4}-\d{4,}$")

DEFAULT_ENTITY_CLASSES = (
    "software",
    "device",
    "library",
    "functionality",
    "attack_vector",
    "vulnerability",
)


class EngineError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(EngineError):
    """A configuration invariant was violated; names the offending field."""

    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field_name = field_name


class ReportSource(str, Enum):
    NVD_CVE = "nvd_cve"
    MANUAL_TRIGGER = "manual_trigger"
    OTHER = "other"


class SourceKind(str, Enum):
    CONFIGURATION_WIKI = "configuration_wiki"
    MAINTENANCE_TRACKER = "maintenance_tracker"
    TRUSTED_CTI_REPORT = "trusted_cti_report"
    OTHER = "other"


class SimilarityMetric(str, Enum):
    COSINE = "cosine"
    EUCLIDEAN = "euclidean"
    DOT = "dot"


def format_utc(dt: datetime) -> str:
    """Render a timestamp as an ISO-8601 UTC string with a trailing Z."""
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return dt.astimezone(timezone.utc).isoformat().replace("+00:00", "Z")


def parse_utc(raw: str) -> datetime:
    """Parse an ISO-8601 string into an aware UTC datetime."""
    text = raw.strip()
    if text.endswith("Z"):
        text = text[:-1] + "+00:00"
    dt = datetime.fromisoformat(text)
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return dt.astimezone(timezone.utc)


def canonical_dumps(data: Any, indent: Optional[int] = None) -> str:
    """Serialize to the canonical JSON form (sorted keys, UTF-8, snake_case)."""
    return json.dumps(data, sort_keys=True, ensure_ascii=False, indent=indent)


@dataclass(frozen=True)
class ThreatReport:
    """One record from the global threat feed (or a manually pushed trigger)."""

    report_id: str
    source: ReportSource
    description: str
    published_at: Optional[datetime] = None
    references: tuple[str, ...] = ()
    extra: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if not self.report_id:
            raise ValueError("report_id must be nonempty")
        if not self.description.strip():
            raise ValueError("description must be nonempty after trimming")
        if self.source is ReportSource.NVD_CVE and not CVE_ID_PATTERN.match(self.report_id):
            raise ValueError(f"report_id {self.report_id!r} does not match the CVE pattern")
        object.__setattr__(self, "references", tuple(self.references))
        object.__setattr__(self, "extra", dict(self.extra))

    def to_dict(self) -> dict[str, Any]:
        return {
            "report_id": self.report_id,
            "source": self.source.value,
            "description": self.description,
            "published_at": format_utc(self.published_at) if self.published_at else None,
            "references": list(self.references),
            "extra": dict(self.extra),
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "ThreatReport":
        published = data.get("published_at")
        return cls(
            report_id=data["report_id"],
            source=ReportSource(data["source"]),
            description=data["description"],
            published_at=parse_utc(published) if published else None,
            references=tuple(data.get("references", ())),
            extra=dict(data.get("extra", {})),
        )


@dataclass(frozen=True)
class KnowledgeChunk:
    """One indexed fragment of local organizational knowledge."""

    chunk_id: str
    parent_doc_id: str
    text: str
    span: tuple[int, int]
    source_kind: SourceKind
    embedding: tuple[float, ...]

    def __post_init__(self):
        if not self.text:
            raise ValueError("chunk text must be nonempty")
        start, end = self.span
        if end - start != len(self.text):
            raise ValueError(f"span [{start}, {end}) does not match text length {len(self.text)}")
        object.__setattr__(self, "span", (int(start), int(end)))
        object.__setattr__(self, "embedding", tuple(float(v) for v in self.embedding))

    def to_dict(self) -> dict[str, Any]:
        return {
            "chunk_id": self.chunk_id,
            "parent_doc_id": self.parent_doc_id,
            "text": self.text,
            "span": list(self.span),
            "source_kind": self.source_kind.value,
            "embedding": list(self.embedding),
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "KnowledgeChunk":
        return cls(
            chunk_id=data["chunk_id"],
            parent_doc_id=data["parent_doc_id"],
            text=data["text"],
            span=tuple(data["span"]),
            source_kind=SourceKind(data["source_kind"]),
            embedding=tuple(data["embedding"]),
        )


@dataclass(frozen=True)
class Entity:
    """A named entity extracted from accumulated knowledge text."""

    label: str
    surface: str

    def __post_init__(self):
        if not self.surface.strip():
            raise ValueError("entity surface must be nonempty")

    def to_dict(self) -> dict[str, Any]:
        return {"label": self.label, "surface": self.surface}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "Entity":
        return cls(label=data["label"], surface=data["surface"])


@dataclass(frozen=True)
class QuerySet:
    """Search keywords derived from extracted entities.

    Keywords are deduplicated case-insensitively while preserving the order
    in which their first occurrence appeared among the entities.
    """

    entities: tuple[Entity, ...]
    keywords: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "entities", tuple(self.entities))
        object.__setattr__(self, "keywords", tuple(self.keywords))
        seen = set()
        for kw in self.keywords:
            if not kw.strip():
                raise ValueError("keywords must be nonempty")
            folded = kw.casefold()
            if folded in seen:
                raise ValueError(f"duplicate keyword {kw!r}")
            seen.add(folded)
        surfaces = {e.surface.casefold() for e in self.entities}
        for kw in self.keywords:
            if kw.casefold() not in surfaces:
                raise ValueError(f"keyword {kw!r} is not traceable to any entity")

    @classmethod
    def from_entities(cls, entities: Iterable[Entity]) -> "QuerySet":
        entities = tuple(entities)
        keywords: list[str] = []
        seen: set[str] = set()
        for entity in entities:
            surface = entity.surface.strip()
            folded = surface.casefold()
            if surface and folded not in seen:
                seen.add(folded)
                keywords.append(surface)
        return cls(entities=entities, keywords=tuple(keywords))

    def __len__(self) -> int:
        return len(self.keywords)

    def to_dict(self) -> dict[str, Any]:
        return {
            "entities": [e.to_dict() for e in self.entities],
            "keywords": list(self.keywords),
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "QuerySet":
        return cls(
            entities=tuple(Entity.from_dict(e) for e in data.get("entities", ())),
            keywords=tuple(data.get("keywords", ())),
        )


@dataclass(frozen=True)
class KnowledgeState:
    """The monotonically growing union of global and local knowledge in a run.

    States are immutable; the ``add_*`` helpers return enlarged copies, so
    key sets can only ever grow across the iterations of one run.
    """

    global_docs: Mapping[str, ThreatReport]
    local_chunks: Mapping[str, KnowledgeChunk]
    iteration: int
    trigger_id: str

    def __post_init__(self):
        object.__setattr__(self, "global_docs", dict(self.global_docs))
        object.__setattr__(self, "local_chunks", dict(self.local_chunks))
        if self.iteration < 0:
            raise ValueError("iteration must be nonnegative")
        if self.trigger_id not in self.global_docs:
            raise ValueError("trigger_id must be present in global_docs")

    @classmethod
    def initial(cls, trigger: ThreatReport) -> "KnowledgeState":
        return cls(
            global_docs={trigger.report_id: trigger},
            local_chunks={},
            iteration=0,
            trigger_id=trigger.report_id,
        )

    def add_global(self, reports: Iterable[ThreatReport]) -> "KnowledgeState":
        docs = dict(self.global_docs)
        for report in reports:
            docs.setdefault(report.report_id, report)
        return KnowledgeState(docs, self.local_chunks, self.iteration, self.trigger_id)

    def add_local(self, chunks: Iterable[KnowledgeChunk]) -> "KnowledgeState":
        local = dict(self.local_chunks)
        for chunk in chunks:
            local.setdefault(chunk.chunk_id, chunk)
        return KnowledgeState(self.global_docs, local, self.iteration, self.trigger_id)

    def advance(self) -> "KnowledgeState":
        return KnowledgeState(
            self.global_docs, self.local_chunks, self.iteration + 1, self.trigger_id
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "global_docs": {k: v.to_dict() for k, v in self.global_docs.items()},
            "local_chunks": {k: v.to_dict() for k, v in self.local_chunks.items()},
            "iteration": self.iteration,
            "trigger_id": self.trigger_id,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "KnowledgeState":
        return cls(
            global_docs={
                k: ThreatReport.from_dict(v) for k, v in data["global_docs"].items()
            },
            local_chunks={
                k: KnowledgeChunk.from_dict(v) for k, v in data["local_chunks"].items()
            },
            iteration=data["iteration"],
            trigger_id=data["trigger_id"],
        )


@dataclass(frozen=True)
class ContextualizedIntel:
    """The final organization-specific report with provenance citations."""

    text: str
    cited_global: tuple[str, ...]
    cited_local: tuple[str, ...]
    trigger_id: str
    model_id: str
    generated_at: datetime
    iterations_used: int

    def __post_init__(self):
        if not self.text:
            raise ValueError("generated text must be nonempty")
        object.__setattr__(self, "cited_global", tuple(self.cited_global))
        object.__setattr__(self, "cited_local", tuple(self.cited_local))

    def to_dict(self) -> dict[str, Any]:
        return {
            "text": self.text,
            "cited_global": list(self.cited_global),
            "cited_local": list(self.cited_local),
            "trigger_id": self.trigger_id,
            "model_id": self.model_id,
            "generated_at": format_utc(self.generated_at),
            "iterations_used": self.iterations_used,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "ContextualizedIntel":
        return cls(
            text=data["text"],
            cited_global=tuple(data["cited_global"]),
            cited_local=tuple(data["cited_local"]),
            trigger_id=data["trigger_id"],
            model_id=data["model_id"],
            generated_at=parse_utc(data["generated_at"]),
            iterations_used=data["iterations_used"],
        )


@dataclass(frozen=True)
class EngineConfig:
    """Tunable parameters of the retrieval and generation pipeline.

    Chunking defaults (1500/150) follow the reference setup; the remaining
    defaults are conventional IR values and every one is overridable via the
    config file, CLI flags, or environment variables.
    """

    chunk_size: int = 1500
    chunk_overlap: int = 150
    dense_top_k: int = 8
    sparse_top_k: int = 8
    fused_top_k: int = 6
    mmr_lambda: float = 0.5
    rrf_k: int = 60
    relevance_threshold: float = 0.25
    max_iterations: int = 3
    global_fetch_limit: int = 5
    similarity_metric: SimilarityMetric = SimilarityMetric.COSINE

    def to_dict(self) -> dict[str, Any]:
        return {
            "chunk_size": self.chunk_size,
            "chunk_overlap": self.chunk_overlap,
            "dense_top_k": self.dense_top_k,
            "sparse_top_k": self.sparse_top_k,
            "fused_top_k": self.fused_top_k,
            "mmr_lambda": self.mmr_lambda,
            "rrf_k": self.rrf_k,
            "relevance_threshold": self.relevance_threshold,
            "max_iterations": self.max_iterations,
            "global_fetch_limit": self.global_fetch_limit,
            "similarity_metric": self.similarity_metric.value,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "EngineConfig":
        kwargs = dict(data)
        if "similarity_metric" in kwargs:
            kwargs["similarity_metric"] = SimilarityMetric(kwargs["similarity_metric"])
        known = {f.name for f in fields(cls)}
        unknown = set(kwargs) - known
        if unknown:
            raise ConfigError(sorted(unknown)[0], "unknown configuration key")
        return cls(**kwargs)


def validate_config(config: EngineConfig) -> EngineConfig:
    """Check all config invariants; returns the config unchanged when valid.

    Raises ConfigError naming the first violated field, in declaration order.
    """
    if config.chunk_size <= 0:
        raise ConfigError("chunk_size", "must be positive")
    if not 0 < config.chunk_overlap < config.chunk_size:
        raise ConfigError(
            "chunk_overlap",
            f"must satisfy 0 < overlap < chunk_size, got {config.chunk_overlap}",
        )
    for name in ("dense_top_k", "sparse_top_k", "fused_top_k"):
        if getattr(config, name) < 1:
            raise ConfigError(name, "must be >= 1")
    if not 0.0 <= config.mmr_lambda <= 1.0:
        raise ConfigError("mmr_lambda", "must lie in [0, 1]")
    if config.rrf_k < 1:
        raise ConfigError("rrf_k", "must be >= 1")
    if not 0.0 <= config.relevance_threshold <= 1.0:
        raise ConfigError("relevance_threshold", "must lie in [0, 1]")
    if config.max_iterations < 1:
        raise ConfigError("max_iterations", "must be >= 1")
    if config.global_fetch_limit < 1:
        raise ConfigError("global_fetch_limit", "must be >= 1")
    if not isinstance(config.similarity_metric, SimilarityMetric):
        raise ConfigError("similarity_metric", "must be one of cosine, euclidean, dot")
    return config
