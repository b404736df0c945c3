import json
import random

import pytest

from threatctx.evaluation import load_dataset
from threatctx.gateway import GenerationGateway, HashingEmbedder, ScriptedBackend, TemplateId
from threatctx.model import (
    EngineConfig,
    Entity,
    KnowledgeState,
    QuerySet,
    ReportSource,
    SourceKind,
    ThreatReport,
)
from threatctx.orchestrator import (
    NerParseError,
    Orchestrator,
    OutcomeKind,
    RunOutcome,
    RunTrace,
    parse_entity_map,
)
from threatctx.store import KnowledgeIndex, LocalDocument

NER_DEFAULT = json.dumps(
    {"device": "Movistar 4G", "attack_vector": "port 5555", "functionality": "adb"}
)
COMPLETION_DEFAULT = (
    "Close port 22 on the Movistar 4G router at DEN.20.303 and suspend traffic during "
    "the scheduled maintenance window on 12-Aug-24 00:15:00 UTC."
)

TAXONOMY = ("software", "device", "library", "functionality", "attack_vector", "vulnerability")


class TestParseEntityMap:
    def test_flat_map(self):
        entities = parse_entity_map(NER_DEFAULT, TAXONOMY)
        assert entities == [
            Entity("device", "Movistar 4G"),
            Entity("attack_vector", "port 5555"),
            Entity("functionality", "adb"),
        ]

    def test_list_values(self):
        entities = parse_entity_map('{"device": ["router", "modem"]}', TAXONOMY)
        assert [e.surface for e in entities] == ["router", "modem"]

    def test_json_embedded_in_prose(self):
        text = 'Sure! Here are the entities:\n{"device": "Movistar 4G"}\nHope this helps.'
        assert parse_entity_map(text, TAXONOMY) == [Entity("device", "Movistar 4G")]

    def test_unknown_labels_dropped(self):
        entities = parse_entity_map('{"device": "router", "color": "blue"}', TAXONOMY)
        assert entities == [Entity("device", "router")]

    def test_empty_map_is_valid(self):
        assert parse_entity_map("{}", TAXONOMY) == []

    def test_garbage_raises(self):
        with pytest.raises(NerParseError):
            parse_entity_map("no mapping here", TAXONOMY)

    def test_non_string_surface_raises(self):
        with pytest.raises(NerParseError):
            parse_entity_map('{"device": 42}', TAXONOMY)


@pytest.fixture
def scenarios(fixtures_dir):
    return load_dataset(fixtures_dir / "dataset.jsonl")


def scripted_engine(wiki_index, stub_feed, frozen_clock, config=None, defaults=True):
    backend = ScriptedBackend()
    if defaults:
        backend.set_default(TemplateId.NER_EXTRACTION, NER_DEFAULT)
        backend.set_default(TemplateId.CONTEXTUALIZE, COMPLETION_DEFAULT)
    gateway = GenerationGateway(backend, HashingEmbedder())
    orchestrator = Orchestrator(
        wiki_index, stub_feed, gateway, config or EngineConfig(), clock=frozen_clock
    )
    return orchestrator, backend


class TestRelevanceGate:
    def test_empty_index(self, tmp_path, stub_feed, frozen_clock, movistar_trigger):
        index = KnowledgeIndex(tmp_path / "empty", HashingEmbedder())
        orchestrator, _ = scripted_engine(index, stub_feed, frozen_clock)
        passed, score, hits = orchestrator.relevance_gate(movistar_trigger)
        assert (passed, score, hits) == (False, 0.0, [])

    def test_movistar_trigger_passes_with_configuration_chunk(
        self, wiki_index, stub_feed, frozen_clock, movistar_trigger
    ):
        orchestrator, _ = scripted_engine(wiki_index, stub_feed, frozen_clock)
        passed, score, hits = orchestrator.relevance_gate(movistar_trigger)
        assert passed is True
        assert score >= 0.25
        assert any(h.chunk_id.startswith("configuration_wiki_denver") for h in hits)

    def test_negative_trigger_fails(self, wiki_index, stub_feed, frozen_clock, scenarios):
        negative = next(s for s in scenarios if not s.expected_relevant)
        orchestrator, _ = scripted_engine(wiki_index, stub_feed, frozen_clock)
        passed, score, hits = orchestrator.relevance_gate(negative.trigger)
        assert passed is False
        assert score < 0.25
        assert hits == []


class TestGenerateQueries:
    def test_entities_become_keywords(self, wiki_index, stub_feed, frozen_clock, movistar_trigger):
        orchestrator, _ = scripted_engine(wiki_index, stub_feed, frozen_clock)
        state = KnowledgeState.initial(movistar_trigger)
        queries = orchestrator.generate_queries(state)
        assert queries.keywords == ("Movistar 4G", "port 5555", "adb")
        assert Entity("device", "Movistar 4G") in queries.entities

    def test_previously_queried_keywords_excluded(
        self, wiki_index, stub_feed, frozen_clock, movistar_trigger
    ):
        orchestrator, _ = scripted_engine(wiki_index, stub_feed, frozen_clock)
        state = KnowledgeState.initial(movistar_trigger)
        already = frozenset({"movistar 4g", "port 5555", "adb"})
        queries = orchestrator.generate_queries(state, already)
        assert queries.keywords == ()

    def test_reask_then_parse_error(self, wiki_index, stub_feed, frozen_clock, movistar_trigger):
        orchestrator, backend = scripted_engine(
            wiki_index, stub_feed, frozen_clock, defaults=False
        )
        backend.set_default(TemplateId.NER_EXTRACTION, "still not a mapping")
        state = KnowledgeState.initial(movistar_trigger)
        with pytest.raises(NerParseError):
            orchestrator.generate_queries(state)
        assert len(backend.calls) == 2  # original ask plus one corrective re-ask
        assert "could not be parsed" in backend.calls[1].prompt


class TestExpandOnce:
    def test_movistar_keyword_adds_other_advisories(
        self, wiki_index, stub_feed, frozen_clock, movistar_trigger
    ):
        orchestrator, _ = scripted_engine(wiki_index, stub_feed, frozen_clock)
        state = KnowledgeState.initial(movistar_trigger)
        queries = QuerySet.from_entities([Entity("device", "Movistar 4G")])
        result = orchestrator.expand_once(state, queries)
        assert set(result.added_global_ids) == {"CVE-2024-2415", "CVE-2024-2416"}
        assert result.added_global == 2
        # local chunks surfaced by the keyword and new-global-text seeds,
        # including the indirectly relevant maintenance schedule
        assert result.added_local == len(result.added_local_ids)
        assert any(cid.startswith("maintenance_tracker") for cid in result.added_local_ids)
        assert set(result.state.global_docs) == {
            "CVE-2024-2414",
            "CVE-2024-2415",
            "CVE-2024-2416",
        }

    def test_empty_queries_add_nothing_and_call_nothing(
        self, wiki_index, stub_feed, frozen_clock, movistar_trigger
    ):
        orchestrator, backend = scripted_engine(wiki_index, stub_feed, frozen_clock)
        state = KnowledgeState.initial(movistar_trigger)
        result = orchestrator.expand_once(state, QuerySet(entities=(), keywords=()))
        assert (result.added_global, result.added_local) == (0, 0)
        assert stub_feed.query_log == []
        assert backend.calls == []

    def test_already_held_documents_deduplicated(
        self, wiki_index, stub_feed, frozen_clock, movistar_trigger
    ):
        orchestrator, _ = scripted_engine(wiki_index, stub_feed, frozen_clock)
        state = KnowledgeState.initial(movistar_trigger)
        queries = QuerySet.from_entities([Entity("device", "Movistar 4G")])
        first = orchestrator.expand_once(state, queries)
        second = orchestrator.expand_once(first.state, queries)
        assert (second.added_global, second.added_local) == (0, 0)


class TestRun:
    def test_movistar_end_to_end(self, wiki_index, stub_feed, frozen_clock, movistar_trigger):
        orchestrator, backend = scripted_engine(wiki_index, stub_feed, frozen_clock)
        prompts = []
        outcome, trace = orchestrator.run(movistar_trigger, prompt_sink=prompts)

        assert outcome.kind is OutcomeKind.CONTEXTUALIZED
        assert "close port 22" in outcome.intel.text.lower()
        assert outcome.intel.iterations_used <= 3
        assert set(outcome.intel.cited_global) == {
            "CVE-2024-2414",
            "CVE-2024-2415",
            "CVE-2024-2416",
        }
        assert len(outcome.intel.cited_local) == 3

        final_prompt = next(
            p["prompt"] for p in reversed(prompts) if p["template_id"] == "contextualize"
        )
        for rid in outcome.intel.cited_global:
            assert final_prompt.count(f"- {rid}:") == 1
        for cid in outcome.intel.cited_local:
            assert final_prompt.count(f"[{cid}]") == 1
        # all three feed descriptions are present verbatim
        assert "The primary channel is unprotected on Movistar 4G router" in final_prompt
        assert "Command injection vulnerability in Movistar 4G router" in final_prompt
        assert "Cross-Site Request Forgery vulnerability in Movistar's 4G router" in final_prompt

    def test_trace_counts_match_state_deltas(
        self, wiki_index, stub_feed, frozen_clock, movistar_trigger
    ):
        orchestrator, _ = scripted_engine(wiki_index, stub_feed, frozen_clock)
        outcome, trace = orchestrator.run(movistar_trigger)
        assert trace.gate_passed is True
        added_global = sum(len(it.added_global_ids) for it in trace.iterations)
        added_local = sum(len(it.added_local_ids) for it in trace.iterations)
        assert 1 + added_global == len(outcome.intel.cited_global)
        assert len(trace.initial_chunk_ids) + added_local == len(outcome.intel.cited_local)
        assert len(trace.iterations) <= orchestrator.config.max_iterations
        assert [it.index for it in trace.iterations] == list(
            range(1, len(trace.iterations) + 1)
        )

    def test_loop_stops_at_first_fixpoint_iteration(
        self, wiki_index, stub_feed, frozen_clock, movistar_trigger
    ):
        orchestrator, backend = scripted_engine(wiki_index, stub_feed, frozen_clock)
        outcome, trace = orchestrator.run(movistar_trigger)
        # iteration 1 adds the two sibling advisories; iteration 2 adds nothing
        assert len(trace.iterations) == 2
        assert trace.iterations[0].added_global_ids == ("CVE-2024-2415", "CVE-2024-2416")
        assert trace.iterations[1].added_global_ids == ()
        assert trace.iterations[1].added_local_ids == ()
        # fixpoint: iteration 2 excluded every keyword, so no feed query was issued for it
        queried_keywords = [log.keyword for log in stub_feed.query_log]
        assert queried_keywords == ["Movistar 4G", "port 5555", "adb"]
        # exactly two extraction calls (one per iteration) and one contextualization
        ner_calls = [c for c in backend.calls if c.template_id == "ner_extraction"]
        ctx_calls = [c for c in backend.calls if c.template_id == "contextualize"]
        assert len(ner_calls) == 2
        assert len(ctx_calls) == 1

    def test_discarded_trigger_touches_no_backends(
        self, wiki_index, stub_feed, frozen_clock, scenarios
    ):
        negative = next(s for s in scenarios if not s.expected_relevant)
        orchestrator, backend = scripted_engine(wiki_index, stub_feed, frozen_clock)
        outcome, trace = orchestrator.run(negative.trigger)
        assert outcome.kind is OutcomeKind.DISCARDED
        assert outcome.gate_score < orchestrator.config.relevance_threshold
        assert "below relevance threshold" in outcome.reason
        assert trace.iterations == []
        assert stub_feed.query_log == []  # no global search was ever issued
        assert backend.calls == []  # no completion was requested

    def test_failed_run_returns_trace(self, wiki_index, stub_feed, frozen_clock, movistar_trigger):
        orchestrator, backend = scripted_engine(
            wiki_index, stub_feed, frozen_clock, defaults=False
        )
        backend.set_default(TemplateId.NER_EXTRACTION, "not a mapping at all")
        outcome, trace = orchestrator.run(movistar_trigger)
        assert outcome.kind is OutcomeKind.FAILED
        assert "NerParseError" in outcome.error
        assert trace.gate_passed is True
        assert trace.finished_at is not None

    def test_completion_mentions_mitigation_and_maintenance(
        self, wiki_index, stub_feed, frozen_clock, movistar_trigger
    ):
        orchestrator, _ = scripted_engine(wiki_index, stub_feed, frozen_clock)
        outcome, _ = orchestrator.run(movistar_trigger)
        assert "close port 22" in outcome.intel.text.lower()
        assert "maintenance window" in outcome.intel.text.lower()

    def test_contextualize_prompt_has_one_bullet_per_item(
        self, wiki_index, stub_feed, frozen_clock, movistar_trigger
    ):
        orchestrator, _ = scripted_engine(wiki_index, stub_feed, frozen_clock)
        chunk = wiki_index.all_chunks()[0]
        state = KnowledgeState.initial(movistar_trigger).add_local([chunk])
        prompts = []
        intel = orchestrator.contextualize(state, prompt_sink=prompts)
        bullets = [
            line for line in prompts[0]["prompt"].splitlines() if line.startswith("- ")
        ]
        assert len(bullets) == 2
        assert intel.cited_global == (movistar_trigger.report_id,)
        assert intel.cited_local == (chunk.chunk_id,)

    def test_outcome_and_trace_roundtrip(self, wiki_index, stub_feed, frozen_clock, movistar_trigger):
        orchestrator, _ = scripted_engine(wiki_index, stub_feed, frozen_clock)
        outcome, trace = orchestrator.run(movistar_trigger)
        assert RunOutcome.from_dict(outcome.to_dict()) == outcome
        restored = RunTrace.from_dict(trace.to_dict())
        assert restored.to_dict() == trace.to_dict()


class TestRandomizedTermination:
    def test_runs_always_halt_within_iteration_cap(self, tmp_path, stub_feed, frozen_clock):
        rng = random.Random(99)
        vocab = "router port service firmware update network shell adb movistar server".split()
        for trial in range(6):
            index = KnowledgeIndex(tmp_path / f"idx{trial}", HashingEmbedder())
            config = EngineConfig(chunk_size=200, chunk_overlap=20, max_iterations=3)
            for d in range(rng.randint(1, 6)):
                body = " ".join(rng.choices(vocab, k=rng.randint(3, 30)))
                index.ingest_document(
                    LocalDocument(f"doc{d}", f"doc{d}", body, SourceKind.OTHER), config
                )
            backend = ScriptedBackend()
            classes = ["device", "functionality", "software"]
            response = {rng.choice(classes): rng.choice(vocab) for _ in range(rng.randint(0, 3))}
            backend.set_default(TemplateId.NER_EXTRACTION, json.dumps(response))
            backend.set_default(TemplateId.CONTEXTUALIZE, "report text")
            gateway = GenerationGateway(backend, HashingEmbedder())
            orchestrator = Orchestrator(index, stub_feed, gateway, config, clock=frozen_clock)
            trigger = ThreatReport(
                report_id=f"CVE-2024-{3000 + trial}",
                source=ReportSource.NVD_CVE,
                description=" ".join(rng.choices(vocab, k=12)),
            )
            outcome, trace = orchestrator.run(trigger)
            assert len(trace.iterations) <= config.max_iterations
            for record in trace.iterations:
                assert len(record.added_global_ids) >= 0
                assert len(record.added_local_ids) >= 0
