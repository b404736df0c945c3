import json
import shutil

import pytest
from click.testing import CliRunner

from threatctx.cli import main
from threatctx.store import service_lock_path

FROZEN = "2024-08-10T12:00:00Z"


@pytest.fixture
def runner():
    return CliRunner()


@pytest.fixture
def ingested_index(tmp_path, fixtures_dir, runner):
    index_dir = tmp_path / "index"
    result = runner.invoke(
        main, ["ingest", str(fixtures_dir / "wiki"), str(index_dir), "--frozen-clock", FROZEN]
    )
    assert result.exit_code == 0, result.output
    return index_dir


def wiring(index_dir, fixtures_dir, runs_dir=None):
    args = [
        "--index", str(index_dir),
        "--feed", "stub",
        "--feed-dir", str(fixtures_dir / "feed"),
        "--backend", "offline",
        "--scripts", str(fixtures_dir / "scripts.json"),
        "--frozen-clock", FROZEN,
    ]
    if runs_dir is not None:
        args += ["--runs-dir", str(runs_dir)]
    return args


class TestIngest:
    def test_five_file_corpus(self, tmp_path, runner):
        corpus = tmp_path / "corpus"
        corpus.mkdir()
        for i in range(4):
            (corpus / f"page{i}.md").write_text(f"wiki page {i} about service {i}", encoding="utf-8")
        # one long document that splits into several chunks
        (corpus / "long.md").write_text("paragraph " * 500, encoding="utf-8")
        result = runner.invoke(
            main,
            ["ingest", str(corpus), str(tmp_path / "idx"), "--set", "chunk_size=400",
             "--set", "chunk_overlap=40"],
        )
        assert result.exit_code == 0, result.output
        assert "docs=5" in result.output
        manifest = json.loads((tmp_path / "idx" / "ingest_manifest.json").read_text())
        assert manifest["docs"] == 5
        assert manifest["chunks"] >= 5

    def test_empty_corpus_ok(self, tmp_path, runner):
        corpus = tmp_path / "corpus"
        corpus.mkdir()
        result = runner.invoke(main, ["ingest", str(corpus), str(tmp_path / "idx")])
        assert result.exit_code == 0
        assert "docs=0" in result.output

    def test_unreadable_file_is_listed_and_fails(self, tmp_path, runner):
        corpus = tmp_path / "corpus"
        corpus.mkdir()
        (corpus / "good.md").write_text("fine content", encoding="utf-8")
        (corpus / "bad.md").write_bytes(b"\xff\xfe\xff invalid utf8 \xff")
        result = runner.invoke(main, ["ingest", str(corpus), str(tmp_path / "idx")])
        assert result.exit_code != 0
        assert "bad.md" in result.output

    def test_refuses_while_service_holds_lock(self, tmp_path, fixtures_dir, runner):
        import os

        index_dir = tmp_path / "idx"
        index_dir.mkdir()
        service_lock_path(index_dir).write_text(str(os.getpid()))
        result = runner.invoke(main, ["ingest", str(fixtures_dir / "wiki"), str(index_dir)])
        assert result.exit_code != 0
        assert "service" in result.output

    def test_stale_lock_from_dead_process_is_reclaimed(self, tmp_path, fixtures_dir, runner):
        index_dir = tmp_path / "idx"
        index_dir.mkdir()
        service_lock_path(index_dir).write_text("999999999")
        result = runner.invoke(main, ["ingest", str(fixtures_dir / "wiki"), str(index_dir)])
        assert result.exit_code == 0, result.output
        assert not service_lock_path(index_dir).exists()

    def test_fingerprint_changes_iff_corpus_changes(self, tmp_path, fixtures_dir, runner):
        corpus = tmp_path / "corpus"
        shutil.copytree(fixtures_dir / "wiki", corpus)
        runner.invoke(main, ["ingest", str(corpus), str(tmp_path / "a")])
        fp_a = json.loads((tmp_path / "a" / "ingest_manifest.json").read_text())["corpus_fingerprint"]
        runner.invoke(main, ["ingest", str(corpus), str(tmp_path / "b")])
        fp_b = json.loads((tmp_path / "b" / "ingest_manifest.json").read_text())["corpus_fingerprint"]
        assert fp_a == fp_b
        (corpus / "maintenance_tracker.md").write_text("changed body", encoding="utf-8")
        runner.invoke(main, ["ingest", str(corpus), str(tmp_path / "c")])
        fp_c = json.loads((tmp_path / "c" / "ingest_manifest.json").read_text())["corpus_fingerprint"]
        assert fp_c != fp_a


class TestRunCommand:
    def test_movistar_by_cve_id(self, tmp_path, fixtures_dir, runner, ingested_index):
        runs = tmp_path / "runs"
        result = runner.invoke(
            main,
            ["run", *wiring(ingested_index, fixtures_dir, runs), "--cve-id", "CVE-2024-2414"],
        )
        assert result.exit_code == 0, result.output
        out_dir = runs / "CVE-2024-2414"
        for name in ("outcome.json", "trace.json", "prompts.json", "manifest.json", "report.txt"):
            assert (out_dir / name).exists()
        outcome = json.loads((out_dir / "outcome.json").read_text())
        assert outcome["kind"] == "contextualized"
        assert set(outcome["intel"]["cited_global"]) == {
            "CVE-2024-2414", "CVE-2024-2415", "CVE-2024-2416",
        }
        assert "close port 22" in (out_dir / "report.txt").read_text()

    def test_negative_trigger_file_exits_three(self, tmp_path, fixtures_dir, runner, ingested_index):
        dataset = (fixtures_dir / "dataset.jsonl").read_text().splitlines()
        negative = next(
            json.loads(line) for line in dataset if not json.loads(line)["expected_relevant"]
        )
        trigger_file = tmp_path / "trigger.json"
        trigger_file.write_text(json.dumps(negative["trigger"]), encoding="utf-8")
        result = runner.invoke(
            main,
            ["run", *wiring(ingested_index, fixtures_dir, tmp_path / "runs"),
             "--trigger-file", str(trigger_file)],
        )
        assert result.exit_code == 3
        assert "below relevance threshold" in result.output

    def test_missing_index_names_ingest(self, tmp_path, fixtures_dir, runner):
        result = runner.invoke(
            main,
            ["run", *wiring(tmp_path / "nope", fixtures_dir), "--cve-id", "CVE-2024-2414"],
        )
        assert result.exit_code == 1
        assert "ingest" in result.output

    def test_requires_exactly_one_trigger_source(self, tmp_path, fixtures_dir, runner, ingested_index):
        result = runner.invoke(main, ["run", *wiring(ingested_index, fixtures_dir)])
        assert result.exit_code != 0

    def test_two_runs_are_byte_identical(self, tmp_path, fixtures_dir, runner, ingested_index):
        runs_a = tmp_path / "runs-a"
        runs_b = tmp_path / "runs-b"
        for runs in (runs_a, runs_b):
            result = runner.invoke(
                main,
                ["run", *wiring(ingested_index, fixtures_dir, runs), "--cve-id", "CVE-2024-2414"],
            )
            assert result.exit_code == 0, result.output
        for name in ("outcome.json", "trace.json", "prompts.json", "manifest.json", "report.txt"):
            a = (runs_a / "CVE-2024-2414" / name).read_bytes()
            b = (runs_b / "CVE-2024-2414" / name).read_bytes()
            assert a == b, f"{name} differs between identical runs"


class TestEvalCommand:
    def test_bundled_dataset(self, tmp_path, fixtures_dir, runner, ingested_index):
        out = tmp_path / "eval-out"
        result = runner.invoke(
            main,
            ["eval", *wiring(ingested_index, fixtures_dir),
             str(fixtures_dir / "dataset.jsonl"), str(out)],
        )
        assert result.exit_code == 0, result.output
        assert "3 contextualized" in result.output
        assert "3 discarded" in result.output
        assert "precision 1.00" in result.output
        assert "recall 1.00" in result.output
        scores = [json.loads(l) for l in (out / "scores.jsonl").read_text().splitlines()]
        assert len(scores) == 6
        aggregates = json.loads((out / "aggregates.json").read_text())
        assert aggregates["gate"]["precision"] == 1.0
        assert aggregates["gate"]["recall"] == 1.0
        assert 0.0 <= aggregates["metrics"]["similarity"]["mean"] <= 1.0
        csv_lines = (out / "scores.csv").read_text().splitlines()
        assert csv_lines[0] == "scenario_id,similarity,correctness"
        assert len(csv_lines) == 7

    def test_empty_dataset_is_an_error(self, tmp_path, fixtures_dir, runner, ingested_index):
        empty = tmp_path / "empty.jsonl"
        empty.write_text("", encoding="utf-8")
        result = runner.invoke(
            main,
            ["eval", *wiring(ingested_index, fixtures_dir), str(empty), str(tmp_path / "out")],
        )
        assert result.exit_code != 0
        assert "no scenarios" in result.output

    def test_malformed_line_is_reported_and_skipped(self, tmp_path, fixtures_dir, runner, ingested_index):
        mixed = tmp_path / "mixed.jsonl"
        lines = (fixtures_dir / "dataset.jsonl").read_text().splitlines()
        mixed.write_text(lines[0] + "\nnot json at all\n" + lines[3] + "\n", encoding="utf-8")
        result = runner.invoke(
            main,
            ["eval", *wiring(ingested_index, fixtures_dir), str(mixed), str(tmp_path / "out")],
        )
        assert result.exit_code == 0, result.output
        assert "dataset error" in result.output
        assert "evaluated 2 scenarios" in result.output


class TestConfigLayering:
    def test_file_flag_env_precedence(self, tmp_path, fixtures_dir, runner, monkeypatch):
        config_file = tmp_path / "engine.conf"
        config_file.write_text("max_iterations = 5\nmmr_lambda = 0.9\n", encoding="utf-8")
        corpus = tmp_path / "corpus"
        corpus.mkdir()
        (corpus / "doc.md").write_text("some body", encoding="utf-8")

        monkeypatch.setenv("THREATCTX_MMR_LAMBDA", "0.1")
        result = runner.invoke(
            main,
            ["ingest", str(corpus), str(tmp_path / "idx"),
             "--config", str(config_file), "--set", "max_iterations=7"],
        )
        assert result.exit_code == 0, result.output
        manifest = json.loads((tmp_path / "idx" / "ingest_manifest.json").read_text())
        assert manifest["config"]["max_iterations"] == 7  # flag beats file
        assert manifest["config"]["mmr_lambda"] == 0.1  # env beats flag and file

    def test_invalid_config_rejected(self, tmp_path, runner):
        corpus = tmp_path / "corpus"
        corpus.mkdir()
        result = runner.invoke(
            main,
            ["ingest", str(corpus), str(tmp_path / "idx"), "--set", "chunk_overlap=1500"],
        )
        assert result.exit_code != 0
        assert "chunk_overlap" in result.output

    def test_remote_backend_requires_base_url(
        self, tmp_path, fixtures_dir, runner, ingested_index, monkeypatch
    ):
        monkeypatch.delenv("LLM_BASE_URL", raising=False)
        result = runner.invoke(
            main,
            ["run", "--index", str(ingested_index), "--backend", "remote",
             "--feed", "stub", "--feed-dir", str(fixtures_dir / "feed"),
             "--cve-id", "CVE-2024-2414"],
        )
        assert result.exit_code != 0
        assert "LLM_BASE_URL" in result.output
