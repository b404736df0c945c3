import json
from datetime import datetime, timezone
from pathlib import Path

import pytest

from threatctx.feed import StubFeed
from threatctx.gateway import GenerationGateway, HashingEmbedder, ScriptedBackend
from threatctx.model import EngineConfig, SourceKind
from threatctx.orchestrator import Orchestrator
from threatctx.store import KnowledgeIndex, LocalDocument

FIXTURES = Path(__file__).parent / "fixtures"


def ingest_wiki(index: KnowledgeIndex, config: EngineConfig) -> None:
    for path in sorted((FIXTURES / "wiki").glob("*.md")):
        meta = json.loads(Path(str(path) + ".meta.json").read_text(encoding="utf-8"))
        index.ingest_document(
            LocalDocument(
                doc_id=path.stem,
                title=meta.get("title", path.stem),
                body=path.read_text(encoding="utf-8"),
                source_kind=SourceKind(meta["source_kind"]),
            ),
            config,
        )


@pytest.fixture
def fixtures_dir() -> Path:
    return FIXTURES


@pytest.fixture
def default_config() -> EngineConfig:
    return EngineConfig()


@pytest.fixture
def frozen_now() -> datetime:
    return datetime(2024, 8, 10, 12, 0, 0, tzinfo=timezone.utc)


@pytest.fixture
def frozen_clock(frozen_now):
    return lambda: frozen_now


@pytest.fixture
def embedder() -> HashingEmbedder:
    return HashingEmbedder()


@pytest.fixture
def wiki_index(tmp_path, embedder, default_config) -> KnowledgeIndex:
    index = KnowledgeIndex(tmp_path / "index", embedder)
    ingest_wiki(index, default_config)
    return index


@pytest.fixture
def stub_feed(frozen_clock) -> StubFeed:
    return StubFeed(FIXTURES / "feed", clock=frozen_clock)


@pytest.fixture
def movistar_trigger():
    from threatctx.feed import parse_feed_record

    return parse_feed_record((FIXTURES / "feed" / "CVE-2024-2414.json").read_bytes())


@pytest.fixture
def scripted_backend() -> ScriptedBackend:
    return ScriptedBackend()


@pytest.fixture
def offline_engine(wiki_index, stub_feed, scripted_backend, frozen_clock, default_config):
    gateway = GenerationGateway(scripted_backend, HashingEmbedder())
    orchestrator = Orchestrator(
        wiki_index, stub_feed, gateway, default_config, clock=frozen_clock
    )
    return orchestrator, gateway, scripted_backend
