"""Client for the public vulnerability feed.

The live backend speaks the NVD REST API 2.0 wire contract
(``/rest/json/cves/2.0`` with ``cveId`` / ``keywordSearch`` parameters and
an optional ``apiKey`` header). Requests are rate limited with a sliding
30-second window (5 without a key, 50 with one), retried with exponential
backoff, and cached on disk with a 24-hour TTL so desk-scale testing can
replay offline.

``StubFeed`` serves the same interface from a directory of fixture files,
one raw upstream record per file named after its report id.
"""

from __future__ import annotations

import base64
import hashlib
import json
import logging
import os
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Callable, Mapping, Optional

from .model import (
    CVE_ID_PATTERN,
    EngineError,
    QuerySet,
    ReportSource,
    ThreatReport,
    format_utc,
    parse_utc,
)

logger = logging.getLogger(__name__)

NVD_BASE_URL = "https://services.nvd.nist.gov/rest/json/cves/2.0"
RATE_WINDOW_S = 30.0
RATE_BUDGET_WITHOUT_KEY = 5
RATE_BUDGET_WITH_KEY = 50
CACHE_TTL_S = 24 * 3600.0


class FeedError(EngineError):
    """Base class for vulnerability feed errors."""


class NotFound(FeedError):
    """The feed has no record with the requested id."""


class FeedUnavailable(FeedError):
    """Transport or HTTP failure that persisted through bounded retries."""


class ParseError(FeedError):
    """Malformed upstream payload; carries the offending field or offset."""

    def __init__(self, message: str, field_path: Optional[str] = None, offset: Optional[int] = None):
        detail = message
        if field_path:
            detail += f" (field: {field_path})"
        if offset is not None:
            detail += f" (byte offset: {offset})"
        super().__init__(detail)
        self.field_path = field_path
        self.offset = offset


def utcnow() -> datetime:
    return datetime.now(timezone.utc)


@dataclass(frozen=True)
class GlobalQueryLog:
    """Audit record of one keyword query against the global feed."""

    keyword: str
    requested_at: datetime
    result_ids: tuple[str, ...]
    cache_hit: bool

    def to_dict(self) -> dict[str, Any]:
        return {
            "keyword": self.keyword,
            "requested_at": format_utc(self.requested_at),
            "result_ids": list(self.result_ids),
            "cache_hit": self.cache_hit,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "GlobalQueryLog":
        return cls(
            keyword=data["keyword"],
            requested_at=parse_utc(data["requested_at"]),
            result_ids=tuple(data["result_ids"]),
            cache_hit=bool(data["cache_hit"]),
        )


@dataclass
class KeywordSearchResult:
    """Deduplicated reports plus per-keyword failure annotations."""

    reports: list[ThreatReport] = field(default_factory=list)
    errors: dict[str, str] = field(default_factory=dict)
    logs: list[GlobalQueryLog] = field(default_factory=list)


class RateLimiter:
    """Sliding-window limiter: at most ``budget`` acquisitions per window."""

    def __init__(
        self,
        budget: int,
        window_s: float = RATE_WINDOW_S,
        clock: Callable[[], float] = time.monotonic,
        sleeper: Callable[[float], None] = time.sleep,
    ):
        self.budget = budget
        self.window_s = window_s
        self._clock = clock
        self._sleep = sleeper
        self._stamps: deque[float] = deque()
        self._lock = threading.Lock()

    def acquire(self) -> None:
        while True:
            with self._lock:
                now = self._clock()
                while self._stamps and now - self._stamps[0] >= self.window_s:
                    self._stamps.popleft()
                if len(self._stamps) < self.budget:
                    self._stamps.append(now)
                    return
                wait = self.window_s - (now - self._stamps[0])
            self._sleep(max(wait, 0.001))


class DiskCache:
    """Content-addressed response cache with a fixed TTL.

    Entries live one per file named by the request key's sha256, wrapped in
    a small JSON envelope recording the key and storage time.
    """

    def __init__(self, path: Path | str, ttl_s: float = CACHE_TTL_S, clock: Callable[[], float] = time.time):
        self.path = Path(path)
        self.ttl_s = ttl_s
        self._clock = clock
        self.path.mkdir(parents=True, exist_ok=True)

    def _file_for(self, key: str) -> Path:
        digest = hashlib.sha256(key.encode("utf-8")).hexdigest()
        return self.path / f"{digest}.json"

    def get(self, key: str) -> Optional[bytes]:
        path = self._file_for(key)
        if not path.exists():
            return None
        try:
            envelope = json.loads(path.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError):
            return None
        if envelope.get("key") != key:
            return None
        if self._clock() - envelope.get("stored_at", 0.0) >= self.ttl_s:
            return None
        return base64.b64decode(envelope["payload"])

    def put(self, key: str, payload: bytes) -> None:
        envelope = {
            "key": key,
            "stored_at": self._clock(),
            "payload": base64.b64encode(payload).decode("ascii"),
        }
        self._file_for(key).write_text(json.dumps(envelope), encoding="utf-8")


def _string_value(value: Any) -> str:
    if isinstance(value, str):
        return value
    return json.dumps(value, sort_keys=True, ensure_ascii=False)


def parse_feed_record(raw: bytes) -> ThreatReport:
    """Normalize one raw upstream record into a ThreatReport.

    Accepts either the per-vulnerability wrapper (``{"cve": {...}}``) or the
    bare cve object. Mapped fields: id, English description, published date,
    reference URLs; everything else is preserved stringified in ``extra``.
    """
    if not raw:
        raise ParseError("empty payload", offset=0)
    try:
        document = json.loads(raw.decode("utf-8"))
    except UnicodeDecodeError as exc:
        raise ParseError(f"payload is not UTF-8: {exc.reason}", offset=exc.start)
    except json.JSONDecodeError as exc:
        raise ParseError(f"payload is not JSON: {exc.msg}", offset=exc.pos)
    if not isinstance(document, dict):
        raise ParseError("record must be a JSON object")
    cve = document.get("cve", document)
    if not isinstance(cve, dict) or "id" not in cve:
        raise ParseError("missing record id", field_path="cve.id")
    report_id = cve["id"]

    description = None
    for entry in cve.get("descriptions", []):
        if isinstance(entry, dict) and entry.get("lang") == "en":
            description = entry.get("value")
            break
    if not description or not str(description).strip():
        raise ParseError("missing English description", field_path="description")

    published = None
    if cve.get("published"):
        try:
            published = parse_utc(str(cve["published"]))
        except ValueError:
            raise ParseError(f"bad published timestamp {cve['published']!r}", field_path="published")

    references = tuple(
        ref["url"]
        for ref in cve.get("references", [])
        if isinstance(ref, dict) and isinstance(ref.get("url"), str)
    )

    mapped = {"id", "descriptions", "published", "references"}
    extra = {key: _string_value(value) for key, value in cve.items() if key not in mapped}

    try:
        return ThreatReport(
            report_id=report_id,
            source=ReportSource.NVD_CVE,
            description=str(description),
            published_at=published,
            references=references,
            extra=extra,
        )
    except ValueError as exc:
        raise ParseError(str(exc), field_path="cve.id")


def _keyword_matches(keyword: str, description: str) -> bool:
    # upstream semantics: every word of the phrase must appear
    hay = description.casefold()
    return all(term in hay for term in keyword.casefold().split())


class StubFeed:
    """Fixture-directory feed for hermetic tests.

    Each file holds the raw upstream bytes of one record and is named
    ``<report_id>.json``. Keyword search matches a record when every word of
    the keyword occurs case-insensitively in the description; results are
    ordered by report id, standing in for upstream rank.
    """

    def __init__(self, fixture_dir: Path | str, clock: Callable[[], datetime] = utcnow):
        self.fixture_dir = Path(fixture_dir)
        self._clock = clock
        self.query_log: list[GlobalQueryLog] = []

    def fetch_by_id(self, cve_id: str) -> ThreatReport:
        if not CVE_ID_PATTERN.match(cve_id):
            raise ValueError(f"{cve_id!r} does not match the CVE id pattern")
        path = self.fixture_dir / f"{cve_id}.json"
        if not path.exists():
            raise NotFound(f"no record for {cve_id}")
        return parse_feed_record(path.read_bytes())

    def _all_reports(self) -> list[ThreatReport]:
        reports = []
        for path in sorted(self.fixture_dir.glob("*.json")):
            reports.append(parse_feed_record(path.read_bytes()))
        return reports

    def search_keywords_detailed(self, keywords: QuerySet, limit: int) -> KeywordSearchResult:
        if not keywords.keywords:
            raise ValueError("keyword search requires at least one keyword")
        if limit < 1:
            raise ValueError("limit must be >= 1")
        result = KeywordSearchResult()
        seen: set[str] = set()
        corpus = self._all_reports()
        for keyword in keywords.keywords:
            matches = [r for r in corpus if _keyword_matches(keyword, r.description)][:limit]
            log = GlobalQueryLog(
                keyword=keyword,
                requested_at=self._clock(),
                result_ids=tuple(r.report_id for r in matches),
                cache_hit=False,
            )
            self.query_log.append(log)
            result.logs.append(log)
            for report in matches:
                if report.report_id not in seen:
                    seen.add(report.report_id)
                    result.reports.append(report)
        return result

    def search_keywords(self, keywords: QuerySet, limit: int) -> list[ThreatReport]:
        return self.search_keywords_detailed(keywords, limit).reports


class NvdFeed:
    """Live client for the vulnerability feed with caching and rate limiting.

    The rate limiter is the single synchronization point; per-keyword
    searches may run concurrently underneath it. All upstream responses are
    cached on disk keyed by request, so repeated fetches replay without
    touching the network.
    """

    def __init__(
        self,
        base_url: str = NVD_BASE_URL,
        api_key: Optional[str] = None,
        cache: Optional[DiskCache] = None,
        rate_limiter: Optional[RateLimiter] = None,
        retries: int = 3,
        backoff_s: float = 1.0,
        session: Any = None,
        sleeper: Callable[[float], None] = time.sleep,
        clock: Callable[[], datetime] = utcnow,
    ):
        if api_key is None:
            api_key = os.environ.get("NVD_API_KEY") or None
        if session is None:
            import requests

            session = requests.Session()
        if rate_limiter is None:
            budget = RATE_BUDGET_WITH_KEY if api_key else RATE_BUDGET_WITHOUT_KEY
            rate_limiter = RateLimiter(budget, sleeper=sleeper)
        self.base_url = base_url
        self.api_key = api_key
        self.cache = cache
        self.rate_limiter = rate_limiter
        self.retries = retries
        self.backoff_s = backoff_s
        self._session = session
        self._sleep = sleeper
        self._clock = clock
        self.query_log: list[GlobalQueryLog] = []

    def _headers(self) -> dict[str, str]:
        return {"apiKey": self.api_key} if self.api_key else {}

    def _get(self, params: Mapping[str, Any]) -> dict[str, Any]:
        last_error = "no attempt made"
        for attempt in range(self.retries):
            if attempt:
                self._sleep(self.backoff_s * (2 ** (attempt - 1)))
            self.rate_limiter.acquire()
            try:
                resp = self._session.get(
                    self.base_url, params=dict(params), headers=self._headers(), timeout=60
                )
            except Exception as exc:
                last_error = str(exc)
                logger.debug("feed request failed (%s), attempt %d", exc, attempt + 1)
                continue
            if resp.status_code in (403, 429) or resp.status_code >= 500:
                last_error = f"HTTP {resp.status_code}"
                continue
            if resp.status_code != 200:
                raise FeedUnavailable(f"feed returned HTTP {resp.status_code}")
            try:
                return resp.json()
            except ValueError as exc:
                raise ParseError(f"feed response is not JSON: {exc}")
        raise FeedUnavailable(f"feed unreachable after {self.retries} attempts: {last_error}")

    def _records_for(self, params: Mapping[str, Any]) -> list[bytes]:
        payload = self._get(params)
        vulnerabilities = payload.get("vulnerabilities")
        if vulnerabilities is None:
            raise ParseError("response missing vulnerabilities list", field_path="vulnerabilities")
        return [
            json.dumps(entry, sort_keys=True, ensure_ascii=False).encode("utf-8")
            for entry in vulnerabilities
        ]

    def fetch_by_id(self, cve_id: str) -> ThreatReport:
        """Fetch and normalize one record; responses are cached by id."""
        if not CVE_ID_PATTERN.match(cve_id):
            raise ValueError(f"{cve_id!r} does not match the CVE id pattern")
        cache_key = f"cve:{cve_id}"
        if self.cache is not None:
            cached = self.cache.get(cache_key)
            if cached is not None:
                return parse_feed_record(cached)
        records = self._records_for({"cveId": cve_id})
        if not records:
            raise NotFound(f"feed has no record for {cve_id}")
        raw = records[0]
        if self.cache is not None:
            self.cache.put(cache_key, raw)
        return parse_feed_record(raw)

    def search_keywords_detailed(self, keywords: QuerySet, limit: int) -> KeywordSearchResult:
        """One feed query per keyword, each capped at ``limit`` results.

        Per-keyword failures are annotated instead of failing the batch; the
        union is deduplicated by report id, ordered by (keyword index,
        upstream rank).
        """
        if not keywords.keywords:
            raise ValueError("keyword search requires at least one keyword")
        if limit < 1:
            raise ValueError("limit must be >= 1")
        result = KeywordSearchResult()
        seen: set[str] = set()
        for keyword in keywords.keywords:
            cache_key = f"kw:{keyword.casefold()}:{limit}"
            cache_hit = False
            raw_records: Optional[list[bytes]] = None
            if self.cache is not None:
                blob = self.cache.get(cache_key)
                if blob is not None:
                    raw_records = [base64.b64decode(item) for item in json.loads(blob)]
                    cache_hit = True
            if raw_records is None:
                try:
                    raw_records = self._records_for(
                        {"keywordSearch": keyword, "resultsPerPage": limit}
                    )[:limit]
                except (FeedUnavailable, ParseError) as exc:
                    result.errors[keyword] = str(exc)
                    log = GlobalQueryLog(
                        keyword=keyword,
                        requested_at=self._clock(),
                        result_ids=(),
                        cache_hit=False,
                    )
                    self.query_log.append(log)
                    result.logs.append(log)
                    continue
                if self.cache is not None:
                    blob = json.dumps(
                        [base64.b64encode(raw).decode("ascii") for raw in raw_records]
                    ).encode("utf-8")
                    self.cache.put(cache_key, blob)
            reports = []
            for raw in raw_records:
                try:
                    reports.append(parse_feed_record(raw))
                except ParseError as exc:
                    result.errors[keyword] = str(exc)
            log = GlobalQueryLog(
                keyword=keyword,
                requested_at=self._clock(),
                result_ids=tuple(r.report_id for r in reports),
                cache_hit=cache_hit,
            )
            self.query_log.append(log)
            result.logs.append(log)
            for report in reports:
                if report.report_id not in seen:
                    seen.add(report.report_id)
                    result.reports.append(report)
        return result

    def search_keywords(self, keywords: QuerySet, limit: int) -> list[ThreatReport]:
        return self.search_keywords_detailed(keywords, limit).reports
