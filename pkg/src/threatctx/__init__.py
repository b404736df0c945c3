"""Organization-specific threat intelligence engine.

Converts a generic vulnerability report into an organization-specific one
by iterating between a public vulnerability feed and a private local
knowledge index, then generating a contextualized report through a
pluggable text-generation backend.
"""

from .model import (
    ContextualizedIntel,
    EngineConfig,
    EngineError,
    Entity,
    KnowledgeChunk,
    KnowledgeState,
    QuerySet,
    ReportSource,
    SourceKind,
    ThreatReport,
    validate_config,
)
from .orchestrator import Orchestrator, OutcomeKind, RunOutcome, RunTrace
from .store import KnowledgeIndex, LocalDocument, RankedHit

__version__ = "0.1.0"

__all__ = [
    "ContextualizedIntel",
    "EngineConfig",
    "EngineError",
    "Entity",
    "KnowledgeChunk",
    "KnowledgeIndex",
    "KnowledgeState",
    "LocalDocument",
    "Orchestrator",
    "OutcomeKind",
    "QuerySet",
    "RankedHit",
    "ReportSource",
    "RunOutcome",
    "RunTrace",
    "SourceKind",
    "ThreatReport",
    "validate_config",
    "__version__",
]
