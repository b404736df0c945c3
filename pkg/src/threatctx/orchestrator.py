"""The agent that turns a trigger report into contextualized intelligence.

One run is: an initial local search that gates on organizational relevance,
then an iterative loop alternating entity-driven query generation with
dual-source expansion (global feed plus local index), stopping as soon as an
iteration adds nothing new or the iteration cap is reached, and finally a
single contextualization completion over everything gathered.

Queries are generated from the whole accumulated union, not the trigger
alone; that is what lets one iteration's findings (say, a device tag) pull
in indirectly related documents (say, its maintenance schedule) on the next.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from datetime import datetime
from enum import Enum
from typing import Any, Callable, Mapping, Optional, Sequence

from .feed import utcnow
from .gateway import GenerationGateway, TemplateId
from .model import (
    DEFAULT_ENTITY_CLASSES,
    ContextualizedIntel,
    EngineConfig,
    EngineError,
    Entity,
    KnowledgeChunk,
    KnowledgeState,
    QuerySet,
    ThreatReport,
    format_utc,
    parse_utc,
    validate_config,
)
from .store import KnowledgeIndex, RankedHit

logger = logging.getLogger(__name__)

SOURCE_KIND_LABELS = {
    "configuration_wiki": "Configuration Wiki",
    "maintenance_tracker": "Maintenance Tracker",
    "trusted_cti_report": "Trusted CTI Report",
    "other": "Local Knowledge",
}


class NerParseError(EngineError):
    """Entity extraction output could not be parsed, even after one re-ask."""


class OutcomeKind(str, Enum):
    CONTEXTUALIZED = "contextualized"
    DISCARDED = "discarded"
    FAILED = "failed"


@dataclass(frozen=True)
class RunOutcome:
    """Terminal result of one run: contextualized, discarded, or failed."""

    kind: OutcomeKind
    intel: Optional[ContextualizedIntel] = None
    reason: Optional[str] = None
    gate_score: Optional[float] = None
    error: Optional[str] = None

    @classmethod
    def contextualized(cls, intel: ContextualizedIntel) -> "RunOutcome":
        return cls(kind=OutcomeKind.CONTEXTUALIZED, intel=intel)

    @classmethod
    def discarded(cls, reason: str, gate_score: float) -> "RunOutcome":
        return cls(kind=OutcomeKind.DISCARDED, reason=reason, gate_score=gate_score)

    @classmethod
    def failed(cls, error: str) -> "RunOutcome":
        return cls(kind=OutcomeKind.FAILED, error=error)

    def to_dict(self) -> dict[str, Any]:
        data: dict[str, Any] = {"kind": self.kind.value}
        if self.intel is not None:
            data["intel"] = self.intel.to_dict()
        if self.reason is not None:
            data["reason"] = self.reason
        if self.gate_score is not None:
            data["gate_score"] = self.gate_score
        if self.error is not None:
            data["error"] = self.error
        return data

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "RunOutcome":
        return cls(
            kind=OutcomeKind(data["kind"]),
            intel=ContextualizedIntel.from_dict(data["intel"]) if "intel" in data else None,
            reason=data.get("reason"),
            gate_score=data.get("gate_score"),
            error=data.get("error"),
        )


@dataclass
class IterationRecord:
    """What one loop pass queried and what it added."""

    index: int
    keywords: tuple[str, ...]
    added_global_ids: tuple[str, ...]
    added_local_ids: tuple[str, ...]
    feed_errors: dict[str, str]
    started_at: datetime
    finished_at: datetime

    def to_dict(self) -> dict[str, Any]:
        return {
            "index": self.index,
            "keywords": list(self.keywords),
            "added_global_ids": list(self.added_global_ids),
            "added_local_ids": list(self.added_local_ids),
            "feed_errors": dict(self.feed_errors),
            "started_at": format_utc(self.started_at),
            "finished_at": format_utc(self.finished_at),
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "IterationRecord":
        return cls(
            index=data["index"],
            keywords=tuple(data["keywords"]),
            added_global_ids=tuple(data["added_global_ids"]),
            added_local_ids=tuple(data["added_local_ids"]),
            feed_errors=dict(data.get("feed_errors", {})),
            started_at=parse_utc(data["started_at"]),
            finished_at=parse_utc(data["finished_at"]),
        )


@dataclass
class RunTrace:
    """Auditable record of a run: gate result, per-iteration deltas, timings."""

    trigger_id: str
    relevance_threshold: float
    gate_score: float = 0.0
    gate_passed: bool = False
    initial_chunk_ids: tuple[str, ...] = ()
    iterations: list[IterationRecord] = field(default_factory=list)
    started_at: Optional[datetime] = None
    finished_at: Optional[datetime] = None

    def to_dict(self) -> dict[str, Any]:
        return {
            "trigger_id": self.trigger_id,
            "relevance_threshold": self.relevance_threshold,
            "gate_score": self.gate_score,
            "gate_passed": self.gate_passed,
            "initial_chunk_ids": list(self.initial_chunk_ids),
            "iterations": [it.to_dict() for it in self.iterations],
            "started_at": format_utc(self.started_at) if self.started_at else None,
            "finished_at": format_utc(self.finished_at) if self.finished_at else None,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "RunTrace":
        return cls(
            trigger_id=data["trigger_id"],
            relevance_threshold=data["relevance_threshold"],
            gate_score=data["gate_score"],
            gate_passed=data["gate_passed"],
            initial_chunk_ids=tuple(data["initial_chunk_ids"]),
            iterations=[IterationRecord.from_dict(it) for it in data["iterations"]],
            started_at=parse_utc(data["started_at"]) if data.get("started_at") else None,
            finished_at=parse_utc(data["finished_at"]) if data.get("finished_at") else None,
        )


@dataclass
class ExpandResult:
    state: KnowledgeState
    added_global: int
    added_local: int
    added_global_ids: tuple[str, ...] = ()
    added_local_ids: tuple[str, ...] = ()
    feed_errors: dict[str, str] = field(default_factory=dict)


def _extract_json_object(text: str) -> Optional[dict]:
    try:
        value = json.loads(text)
        if isinstance(value, dict):
            return value
    except json.JSONDecodeError:
        pass
    start = text.find("{")
    end = text.rfind("}")
    if start != -1 and end > start:
        try:
            value = json.loads(text[start : end + 1])
            if isinstance(value, dict):
                return value
        except json.JSONDecodeError:
            return None
    return None


def parse_entity_map(text: str, taxonomy: Sequence[str]) -> list[Entity]:
    """Parse the extraction output: one flat JSON map of class -> surface.

    Values may be a string or a list of strings. Classes outside the
    configured taxonomy are dropped rather than rejected; an empty map is
    valid and yields no entities.
    """
    mapping = _extract_json_object(text)
    if mapping is None:
        raise NerParseError("output does not contain a JSON object")
    allowed = {label.casefold(): label for label in taxonomy}
    entities: list[Entity] = []
    for label, value in mapping.items():
        if not isinstance(label, str):
            raise NerParseError(f"class name {label!r} is not a string")
        canonical = allowed.get(label.casefold())
        if canonical is None:
            continue
        surfaces = value if isinstance(value, list) else [value]
        for surface in surfaces:
            if not isinstance(surface, str):
                raise NerParseError(f"surface for class {label!r} is not a string")
            if surface.strip():
                entities.append(Entity(label=canonical, surface=surface.strip()))
    return entities


class Orchestrator:
    """Drives the retrieval loop and the final contextualization."""

    def __init__(
        self,
        store: KnowledgeIndex,
        feed: Any,
        gateway: GenerationGateway,
        config: EngineConfig,
        entity_classes: Sequence[str] = DEFAULT_ENTITY_CLASSES,
        clock: Callable[[], datetime] = utcnow,
    ):
        self.store = store
        self.feed = feed
        self.gateway = gateway
        self.config = validate_config(config)
        self.entity_classes = tuple(entity_classes)
        self.clock = clock

    # ------------------------------------------------------------- phase 1

    def relevance_gate(self, trigger: ThreatReport) -> tuple[bool, float, list[RankedHit]]:
        """Initial local search deciding whether the trigger concerns us at all.

        The score is the best fused candidate's similarity to the trigger
        text; a trigger with no organizational footprint scores below the
        threshold and the run is discarded without ever touching the global
        feed or the completion backend.
        """
        embedding = self.gateway.embed_one(trigger.description)
        score = self.store.top_relevance(trigger.description, embedding, self.config)
        passed = score >= self.config.relevance_threshold
        hits = (
            self.store.ensemble_search(trigger.description, embedding, self.config)
            if passed
            else []
        )
        return passed, score, hits

    def _knowledge_block(self, state: KnowledgeState) -> str:
        lines = [f"{rid}: {report.description}" for rid, report in state.global_docs.items()]
        lines.extend(f"{cid}: {chunk.text}" for cid, chunk in state.local_chunks.items())
        return "\n".join(lines)

    def generate_queries(
        self,
        state: KnowledgeState,
        already_queried: frozenset[str] = frozenset(),
        prompt_sink: Optional[list[dict[str, str]]] = None,
    ) -> QuerySet:
        """Extract entities from the accumulated knowledge and derive keywords.

        Keywords whose casefolded form was queried in an earlier iteration
        are excluded. A malformed extraction output gets exactly one
        corrective re-ask before NerParseError is raised.
        """
        bindings = {
            "classes": ", ".join(self.entity_classes),
            "input_text": self._knowledge_block(state),
        }
        request = self.gateway.request(TemplateId.NER_EXTRACTION, bindings)
        if prompt_sink is not None:
            prompt_sink.append({"template_id": request.template_id, "prompt": request.prompt})
        result = self.gateway.complete(request)
        try:
            entities = parse_entity_map(result.text, self.entity_classes)
        except NerParseError:
            retry_prompt = (
                request.prompt
                + "\n\nYour previous output could not be parsed:\n"
                + result.text
                + "\nReturn only the mapping as a single JSON object."
            )
            if prompt_sink is not None:
                prompt_sink.append({"template_id": request.template_id, "prompt": retry_prompt})
            retry = self.gateway.complete_raw(TemplateId.NER_EXTRACTION.value, retry_prompt)
            entities = parse_entity_map(retry.text, self.entity_classes)
        queries = QuerySet.from_entities(entities)
        kept = tuple(kw for kw in queries.keywords if kw.casefold() not in already_queried)
        return QuerySet(entities=queries.entities, keywords=kept)

    def _local_hits(self, seed_text: str) -> list[RankedHit]:
        embedding = self.gateway.embed_one(seed_text)
        fused = self.store.ensemble_search(seed_text, embedding, self.config)
        return self.store.mmr_rerank(
            fused, embedding, self.config.mmr_lambda, self.config.fused_top_k
        )

    def expand_once(self, state: KnowledgeState, queries: QuerySet) -> ExpandResult:
        """One dual-source expansion pass.

        Global: one capped feed search per keyword. Local: an ensemble+MMR
        search seeded by each keyword and by the concatenation of the newly
        fetched global text. Everything merges into the state with dedup;
        upstream failures annotate the result instead of aborting.
        """
        if not queries.keywords:
            return ExpandResult(state=state, added_global=0, added_local=0)
        search = self.feed.search_keywords_detailed(queries, self.config.global_fetch_limit)
        new_reports = [r for r in search.reports if r.report_id not in state.global_docs]
        next_state = state.add_global(new_reports)

        seeds = list(queries.keywords)
        if new_reports:
            seeds.append("\n".join(r.description for r in new_reports))
        new_chunks: list[KnowledgeChunk] = []
        seen_new: set[str] = set()
        for seed in seeds:
            for hit in self._local_hits(seed):
                if hit.chunk_id not in next_state.local_chunks and hit.chunk_id not in seen_new:
                    seen_new.add(hit.chunk_id)
                    new_chunks.append(self.store.get_chunk(hit.chunk_id))
        next_state = next_state.add_local(new_chunks)
        return ExpandResult(
            state=next_state,
            added_global=len(new_reports),
            added_local=len(new_chunks),
            added_global_ids=tuple(r.report_id for r in new_reports),
            added_local_ids=tuple(c.chunk_id for c in new_chunks),
            feed_errors=dict(search.errors),
        )

    # ------------------------------------------------------------- phase 2

    def _contextualize_bindings(self, state: KnowledgeState) -> dict[str, str]:
        global_lines = [
            f"- {rid}: {report.description}" for rid, report in state.global_docs.items()
        ]
        local_lines = [
            f"- [{cid}] {SOURCE_KIND_LABELS[chunk.source_kind.value]}: {chunk.text}"
            for cid, chunk in state.local_chunks.items()
        ]
        return {
            "global_knowledge": "\n".join(global_lines) if global_lines else "(none)",
            "local_knowledge": "\n".join(local_lines) if local_lines else "(none)",
        }

    def contextualize(
        self,
        state: KnowledgeState,
        prompt_sink: Optional[list[dict[str, str]]] = None,
    ) -> ContextualizedIntel:
        """Generate the final report over every held item, exactly once each.

        The prompt lists global items in retrieval order, then local items in
        retrieval order; the citation lists are exactly the id sets present
        in the prompt.
        """
        request = self.gateway.request(
            TemplateId.CONTEXTUALIZE, self._contextualize_bindings(state)
        )
        if prompt_sink is not None:
            prompt_sink.append({"template_id": request.template_id, "prompt": request.prompt})
        result = self.gateway.complete(request)
        return ContextualizedIntel(
            text=result.text,
            cited_global=tuple(state.global_docs),
            cited_local=tuple(state.local_chunks),
            trigger_id=state.trigger_id,
            model_id=self.gateway.model_id,
            generated_at=self.clock(),
            iterations_used=state.iteration,
        )

    # ----------------------------------------------------------------- run

    def run(
        self,
        trigger: ThreatReport,
        prompt_sink: Optional[list[dict[str, str]]] = None,
    ) -> tuple[RunOutcome, RunTrace]:
        """Execute the full pipeline for one trigger; the trace is always returned."""
        trace = RunTrace(
            trigger_id=trigger.report_id,
            relevance_threshold=self.config.relevance_threshold,
            started_at=self.clock(),
        )
        try:
            passed, score, hits = self.relevance_gate(trigger)
            trace.gate_score = score
            trace.gate_passed = passed
            if not passed:
                trace.finished_at = self.clock()
                reason = (
                    f"below relevance threshold "
                    f"(score {score:.4f} < {self.config.relevance_threshold})"
                )
                return RunOutcome.discarded(reason, score), trace

            initial_chunks = [self.store.get_chunk(h.chunk_id) for h in hits]
            trace.initial_chunk_ids = tuple(c.chunk_id for c in initial_chunks)
            state = KnowledgeState.initial(trigger).add_local(initial_chunks)
            queried: set[str] = set()
            for _ in range(self.config.max_iterations):
                iter_start = self.clock()
                state = state.advance()
                queries = self.generate_queries(state, frozenset(queried), prompt_sink)
                queried.update(kw.casefold() for kw in queries.keywords)
                expansion = self.expand_once(state, queries)
                state = expansion.state
                trace.iterations.append(
                    IterationRecord(
                        index=state.iteration,
                        keywords=queries.keywords,
                        added_global_ids=expansion.added_global_ids,
                        added_local_ids=expansion.added_local_ids,
                        feed_errors=expansion.feed_errors,
                        started_at=iter_start,
                        finished_at=self.clock(),
                    )
                )
                if expansion.added_global == 0 and expansion.added_local == 0:
                    break
            intel = self.contextualize(state, prompt_sink)
            trace.finished_at = self.clock()
            return RunOutcome.contextualized(intel), trace
        except EngineError as exc:
            logger.warning("run for %s failed: %s", trigger.report_id, exc)
            trace.finished_at = self.clock()
            return RunOutcome.failed(f"{type(exc).__name__}: {exc}"), trace


def knowledge_ids_in_prompt(prompt: str, state: KnowledgeState) -> dict[str, int]:
    """Occurrence count of every held knowledge id inside a rendered prompt."""
    counts: dict[str, int] = {}
    for rid in state.global_docs:
        counts[rid] = prompt.count(f"- {rid}:")
    for cid in state.local_chunks:
        counts[cid] = prompt.count(f"[{cid}]")
    return counts
