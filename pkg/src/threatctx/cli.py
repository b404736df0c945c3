"""Operator CLI: corpus ingestion, single runs, batch evaluation, serving.

Configuration is layered: built-in defaults, then the config file, then
``--set key=value`` flags, then ``THREATCTX_<KEY>`` environment variables
(highest precedence). Exit codes of ``run`` are stable for scripting:
0 = contextualized, 3 = discarded by the relevance gate, 1 = failure.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import os
import sys
from dataclasses import dataclass
from datetime import datetime
from pathlib import Path
from typing import Any, Callable, Optional

import click

from .evaluation import (
    EmptyInput,
    aggregate,
    evaluate_scenarios,
    gate_confusion,
    load_dataset_lenient,
)
from .feed import DiskCache, NvdFeed, StubFeed, utcnow
from .gateway import (
    GenerationGateway,
    HashingEmbedder,
    RemoteBackend,
    ScriptedBackend,
)
from .model import (
    EngineConfig,
    EngineError,
    ThreatReport,
    canonical_dumps,
    format_utc,
    parse_utc,
    validate_config,
)
from .orchestrator import Orchestrator, OutcomeKind
from .store import KnowledgeIndex, LocalDocument, service_lock_path
from .model import SourceKind

CONFIG_ENV_PREFIX = "THREATCTX_"
CORPUS_SUFFIXES = {".txt", ".md"}

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_DISCARDED = 3

_FIELD_TYPES = {f.name: str(f.type) for f in dataclasses.fields(EngineConfig)}


def _coerce_config_value(key: str, raw: str) -> Any:
    kind = _FIELD_TYPES.get(key, "str")
    if kind == "int":
        return int(raw)
    if kind == "float":
        return float(raw)
    return raw


def _read_config_file(path: Path) -> dict[str, str]:
    values: dict[str, str] = {}
    for line_no, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise click.ClickException(f"{path}:{line_no}: expected 'key = value'")
        key, _, value = stripped.partition("=")
        values[key.strip()] = value.strip()
    return values


def load_layered_config(
    config_file: Optional[str], set_flags: tuple[str, ...]
) -> EngineConfig:
    """Defaults, overridden by the config file, then --set flags, then env vars."""
    layered: dict[str, Any] = {}
    if config_file:
        for key, value in _read_config_file(Path(config_file)).items():
            layered[key] = _coerce_config_value(key, value)
    for flag in set_flags:
        if "=" not in flag:
            raise click.ClickException(f"--set expects key=value, got {flag!r}")
        key, _, value = flag.partition("=")
        layered[key.strip()] = _coerce_config_value(key.strip(), value.strip())
    for key in _FIELD_TYPES:
        env_value = os.environ.get(CONFIG_ENV_PREFIX + key.upper())
        if env_value is not None:
            layered[key] = _coerce_config_value(key, env_value)
    try:
        return validate_config(EngineConfig.from_dict(layered))
    except (EngineError, ValueError) as exc:
        raise click.ClickException(f"invalid configuration: {exc}")


@dataclass
class RunManifest:
    """Provenance snapshot emitted for every run."""

    config: EngineConfig
    corpus_fingerprint: Optional[str]
    completion_backend: str
    embedding_dimension: Optional[int]
    started_at: datetime
    finished_at: datetime

    def to_dict(self) -> dict[str, Any]:
        return {
            "config": self.config.to_dict(),
            "corpus_fingerprint": self.corpus_fingerprint,
            "completion_backend": self.completion_backend,
            "embedding_dimension": self.embedding_dimension,
            "started_at": format_utc(self.started_at),
            "finished_at": format_utc(self.finished_at),
        }


def _clock_from(frozen: Optional[str]) -> Callable[[], datetime]:
    if frozen is None:
        return utcnow
    instant = parse_utc(frozen)
    return lambda: instant


def _live_service_lock(index_dir) -> Optional[Path]:
    """The service lock path when it is held by a live process, else None.

    A lock whose recorded pid is no longer running is stale (the service was
    killed without cleanup) and is removed here.
    """
    lock = service_lock_path(index_dir)
    if not lock.exists():
        return None
    try:
        pid = int(lock.read_text(encoding="utf-8").strip())
    except (OSError, ValueError):
        lock.unlink(missing_ok=True)
        return None
    try:
        os.kill(pid, 0)
    except ProcessLookupError:
        lock.unlink(missing_ok=True)
        return None
    except PermissionError:
        pass  # pid exists but belongs to another user: the lock is live
    return lock


def _load_scripts(backend: ScriptedBackend, path: Path) -> None:
    data = json.loads(path.read_text(encoding="utf-8"))
    for template_id, response in data.get("defaults", {}).items():
        backend.set_default(template_id, response)
    for entry in data.get("exact", []):
        if "prompt" in entry:
            backend.script_prompt(entry["template_id"], entry["prompt"], entry["response"])
        else:
            backend.script_digest(entry["template_id"], entry["prompt_digest"], entry["response"])


def _build_gateway(
    backend: str, scripts: Optional[str], embed_dim: int, debug_log_dir: Optional[str]
) -> GenerationGateway:
    if backend == "offline":
        scripted = ScriptedBackend()
        if scripts:
            _load_scripts(scripted, Path(scripts))
        return GenerationGateway(scripted, HashingEmbedder(dimension=embed_dim))
    base_url = os.environ.get("LLM_BASE_URL")
    if not base_url:
        raise click.ClickException("remote backend requires LLM_BASE_URL")
    remote = RemoteBackend(
        base_url=base_url,
        api_key=os.environ.get("LLM_API_KEY", ""),
        model_id=os.environ.get("LLM_MODEL_ID", "default-model"),
        embed_model_id=os.environ.get("EMBED_MODEL_ID", "default-embedding"),
        debug_log_dir=Path(debug_log_dir) if debug_log_dir else None,
    )
    return GenerationGateway(remote, remote)


def _build_feed(kind: str, feed_dir: Optional[str], cache_dir: Optional[str], clock):
    if kind == "stub":
        if not feed_dir:
            raise click.ClickException("--feed stub requires --feed-dir")
        return StubFeed(feed_dir, clock=clock)
    cache = DiskCache(cache_dir) if cache_dir else None
    return NvdFeed(cache=cache, clock=clock)


def _open_index(index_dir: str, embedder) -> KnowledgeIndex:
    meta = Path(index_dir) / "meta.json"
    if not meta.exists():
        raise click.ClickException(
            f"no index at {index_dir}; build one with `threatctx ingest` first"
        )
    return KnowledgeIndex(index_dir, embedder)


def _write_json(path: Path, data: Any) -> None:
    path.write_text(canonical_dumps(data, indent=2) + "\n", encoding="utf-8")


def wiring_options(fn):
    fn = click.option("--index", "index_dir", required=True, help="Index directory.")(fn)
    fn = click.option("--config", "config_file", default=None, help="Layered key=value config file.")(fn)
    fn = click.option("--set", "set_flags", multiple=True, help="Override one config key, e.g. --set mmr_lambda=0.7.")(fn)
    fn = click.option("--feed", "feed_kind", type=click.Choice(["nvd", "stub"]), default="nvd", show_default=True)(fn)
    fn = click.option("--feed-dir", default=None, help="Fixture directory for --feed stub.")(fn)
    fn = click.option("--cache-dir", default=None, help="On-disk feed cache directory.")(fn)
    fn = click.option("--backend", type=click.Choice(["offline", "remote"]), default="offline", show_default=True)(fn)
    fn = click.option("--scripts", default=None, help="Scripted responses file for the offline backend.")(fn)
    fn = click.option("--embed-dim", default=256, show_default=True, help="Offline embedder dimension.")(fn)
    fn = click.option("--frozen-clock", default=None, help="Freeze all timestamps to this UTC instant (testing).")(fn)
    fn = click.option("--debug-log-dir", default=None, help="Directory for redacted gateway request logs.")(fn)
    return fn


def _build_engine(
    index_dir: str,
    config_file: Optional[str],
    set_flags: tuple[str, ...],
    feed_kind: str,
    feed_dir: Optional[str],
    cache_dir: Optional[str],
    backend: str,
    scripts: Optional[str],
    embed_dim: int,
    frozen_clock: Optional[str],
    debug_log_dir: Optional[str],
):
    config = load_layered_config(config_file, set_flags)
    clock = _clock_from(frozen_clock)
    gateway = _build_gateway(backend, scripts, embed_dim, debug_log_dir)
    feed = _build_feed(feed_kind, feed_dir, cache_dir, clock)
    index = _open_index(index_dir, _Embedder(gateway))
    orchestrator = Orchestrator(index, feed, gateway, config, clock=clock)
    return config, clock, gateway, feed, index, orchestrator


class _Embedder:
    """Adapter exposing the gateway's embed() to the knowledge index."""

    def __init__(self, gateway: GenerationGateway):
        self._gateway = gateway

    @property
    def dimension(self):
        return self._gateway.embedding_dimension

    def embed(self, texts):
        return self._gateway.embed(texts)


@click.group()
def main() -> None:
    """Organization-specific threat intelligence engine."""


@main.command()
@click.argument("corpus_dir", type=click.Path(exists=True, file_okay=False))
@click.argument("index_dir", type=click.Path(file_okay=False))
@click.option("--config", "config_file", default=None)
@click.option("--set", "set_flags", multiple=True)
@click.option("--embed-dim", default=256, show_default=True)
@click.option("--frozen-clock", default=None)
def ingest(corpus_dir, index_dir, config_file, set_flags, embed_dim, frozen_clock) -> None:
    """Chunk, embed, and index every document in CORPUS_DIR."""
    lock = _live_service_lock(index_dir)
    if lock is not None:
        raise click.ClickException(f"index {index_dir} is held by a running service ({lock})")
    config = load_layered_config(config_file, set_flags)
    clock = _clock_from(frozen_clock)
    started = clock()
    index = KnowledgeIndex(index_dir, HashingEmbedder(dimension=embed_dim))

    corpus = Path(corpus_dir)
    files = sorted(
        p for p in corpus.rglob("*")
        if p.is_file() and p.suffix in CORPUS_SUFFIXES and not p.name.endswith(".meta.json")
    )
    fingerprint = hashlib.sha256()
    for path in sorted(p for p in corpus.rglob("*") if p.is_file()):
        fingerprint.update(str(path.relative_to(corpus)).encode("utf-8"))
        fingerprint.update(b"\0")
        fingerprint.update(path.read_bytes())
        fingerprint.update(b"\0")

    docs = 0
    chunks = 0
    errors: list[str] = []
    for path in files:
        try:
            body = path.read_text(encoding="utf-8")
            sidecar = Path(str(path) + ".meta.json")
            meta = json.loads(sidecar.read_text(encoding="utf-8")) if sidecar.exists() else {}
            doc = LocalDocument(
                doc_id=path.stem,
                title=meta.get("title", path.stem),
                body=body,
                source_kind=SourceKind(meta.get("source_kind", "other")),
            )
            chunk_ids = index.ingest_document(doc, config)
            docs += 1
            chunks += len(chunk_ids)
        except (OSError, ValueError, EngineError) as exc:
            errors.append(f"{path.name}: {exc}")

    index.set_corpus_fingerprint(fingerprint.hexdigest())
    summary = {
        "docs": docs,
        "chunks": chunks,
        "errors": errors,
        "corpus_fingerprint": fingerprint.hexdigest(),
        "config": config.to_dict(),
        "started_at": format_utc(started),
        "finished_at": format_utc(clock()),
    }
    _write_json(Path(index_dir) / "ingest_manifest.json", summary)
    click.echo(f"ingested docs={docs} chunks={chunks}")
    if errors:
        for line in errors:
            click.echo(f"error: {line}", err=True)
        sys.exit(EXIT_FAILED)


@main.command(name="run")
@wiring_options
@click.option("--trigger-file", default=None, help="Trigger report as canonical JSON.")
@click.option("--cve-id", default=None, help="Fetch the trigger from the feed by id.")
@click.option("--runs-dir", default="runs", show_default=True)
def run_cmd(index_dir, config_file, set_flags, feed_kind, feed_dir, cache_dir, backend,
            scripts, embed_dim, frozen_clock, debug_log_dir, trigger_file, cve_id, runs_dir) -> None:
    """Contextualize one trigger and write the run artifacts."""
    if bool(trigger_file) == bool(cve_id):
        raise click.ClickException("provide exactly one of --trigger-file or --cve-id")
    config, clock, gateway, feed, index, orchestrator = _build_engine(
        index_dir, config_file, set_flags, feed_kind, feed_dir, cache_dir,
        backend, scripts, embed_dim, frozen_clock, debug_log_dir,
    )
    try:
        if trigger_file:
            trigger = ThreatReport.from_dict(
                json.loads(Path(trigger_file).read_text(encoding="utf-8"))
            )
        else:
            trigger = feed.fetch_by_id(cve_id)
    except (OSError, ValueError, KeyError, EngineError) as exc:
        raise click.ClickException(f"cannot load trigger: {exc}")

    started = clock()
    prompts: list[dict[str, str]] = []
    outcome, trace = orchestrator.run(trigger, prompt_sink=prompts)
    manifest = RunManifest(
        config=config,
        corpus_fingerprint=index.corpus_fingerprint,
        completion_backend=gateway.model_id,
        embedding_dimension=index.dimension,
        started_at=started,
        finished_at=clock(),
    )

    out_dir = Path(runs_dir) / trigger.report_id
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_json(out_dir / "outcome.json", outcome.to_dict())
    _write_json(out_dir / "trace.json", trace.to_dict())
    _write_json(out_dir / "prompts.json", prompts)
    _write_json(out_dir / "manifest.json", manifest.to_dict())

    if outcome.kind is OutcomeKind.CONTEXTUALIZED:
        (out_dir / "report.txt").write_text(outcome.intel.text + "\n", encoding="utf-8")
        click.echo(f"contextualized {trigger.report_id} "
                   f"(gate {trace.gate_score:.4f}, iterations {outcome.intel.iterations_used})")
        click.echo(f"cited global: {', '.join(outcome.intel.cited_global)}")
        click.echo(f"cited local: {', '.join(outcome.intel.cited_local)}")
        click.echo(outcome.intel.text)
        sys.exit(EXIT_OK)
    if outcome.kind is OutcomeKind.DISCARDED:
        click.echo(f"discarded {trigger.report_id}: {outcome.reason}")
        sys.exit(EXIT_DISCARDED)
    click.echo(f"failed {trigger.report_id}: {outcome.error}", err=True)
    sys.exit(EXIT_FAILED)


@main.command(name="eval")
@wiring_options
@click.argument("dataset", type=click.Path(exists=True, dir_okay=False))
@click.argument("out_dir", type=click.Path(file_okay=False))
@click.option("--judge/--no-judge", default=False, show_default=True,
              help="Also score correctness with the judge rubric.")
def eval_cmd(index_dir, config_file, set_flags, feed_kind, feed_dir, cache_dir, backend,
             scripts, embed_dim, frozen_clock, debug_log_dir, dataset, out_dir, judge) -> None:
    """Run every scenario in DATASET and write scores and aggregates."""
    _, clock, gateway, feed, index, orchestrator = _build_engine(
        index_dir, config_file, set_flags, feed_kind, feed_dir, cache_dir,
        backend, scripts, embed_dim, frozen_clock, debug_log_dir,
    )
    scenarios, line_errors = load_dataset_lenient(dataset)
    for line_no, message in line_errors:
        click.echo(f"dataset error: {message}", err=True)
    if not scenarios:
        if line_errors:
            raise click.ClickException("no parseable scenarios in dataset")
        raise click.ClickException(str(EmptyInput("dataset contains no scenarios")))

    results = evaluate_scenarios(scenarios, orchestrator, gateway, use_judge=judge)
    records = [r.record for r in results if r.record is not None]
    failures = [(r.scenario.scenario_id, r.error) for r in results if r.error]
    for scenario_id, error in failures:
        click.echo(f"scenario {scenario_id} failed: {error}", err=True)

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with (out / "scores.jsonl").open("w", encoding="utf-8") as fh:
        for record in records:
            fh.write(canonical_dumps(record.to_dict()) + "\n")
    with (out / "scores.csv").open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["scenario_id", "similarity", "correctness"])
        for record in records:
            writer.writerow([record.scenario_id, record.similarity, record.correctness])

    confusion = gate_confusion(
        [(r.scenario, r.record.outcome_kind) for r in results if r.record is not None]
    )
    aggregates: dict[str, Any] = {"gate": confusion, "metrics": {}}
    if records:
        try:
            aggregates["metrics"] = {k: v.to_dict() for k, v in aggregate(records).items()}
        except EmptyInput:
            pass
    _write_json(out / "aggregates.json", aggregates)

    contextualized = sum(1 for r in records if r.outcome_kind is OutcomeKind.CONTEXTUALIZED)
    discarded = sum(1 for r in records if r.outcome_kind is OutcomeKind.DISCARDED)
    click.echo(
        f"evaluated {len(results)} scenarios: {contextualized} contextualized, "
        f"{discarded} discarded, {len(failures)} failed "
        f"(gate precision {confusion['precision']:.2f}, recall {confusion['recall']:.2f})"
    )
    if results and len(failures) == len(results):
        sys.exit(EXIT_FAILED)


@main.command()
@wiring_options
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=8080, show_default=True)
@click.option("--workers", default=2, show_default=True)
@click.option("--queue-depth", default=32, show_default=True)
def serve(index_dir, config_file, set_flags, feed_kind, feed_dir, cache_dir, backend,
          scripts, embed_dim, frozen_clock, debug_log_dir, host, port, workers, queue_depth) -> None:
    """Serve POST /v1/contextualize for zero-day triggers."""
    import uvicorn

    from .service import ServiceState, create_app

    _, _, _, _, index, orchestrator = _build_engine(
        index_dir, config_file, set_flags, feed_kind, feed_dir, cache_dir,
        backend, scripts, embed_dim, frozen_clock, debug_log_dir,
    )
    lock = _live_service_lock(index_dir)
    if lock is not None:
        raise click.ClickException(f"another service already holds {lock}")
    lock = service_lock_path(index_dir)
    lock.write_text(str(os.getpid()), encoding="utf-8")
    try:
        app = create_app(ServiceState(orchestrator, workers=workers, queue_depth=queue_depth))
        uvicorn.run(app, host=host, port=port, log_level="info")
    finally:
        lock.unlink(missing_ok=True)


if __name__ == "__main__":
    main()
