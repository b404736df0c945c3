"""Text-generation and embedding boundary.

Prompt templates are rendered here, and all completion/embedding traffic
goes through a backend abstraction with two families:

* ``RemoteBackend`` speaks the common chat-completions HTTP protocol plus
  an embeddings endpoint, so hosted and self-hosted models are reachable
  through one client.
* Offline backends keep every test hermetic: ``ScriptedBackend`` maps
  (template_id, prompt digest) to fixture text, and ``HashingEmbedder`` is
  a deterministic feature-hashed bag-of-words embedder.
"""

from __future__ import annotations

import hashlib
import logging
import math
import re
import time
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Callable, Mapping, Optional, Sequence

from .model import EngineError, canonical_dumps

logger = logging.getLogger(__name__)

Vector = tuple[float, ...]


class GatewayError(EngineError):
    """Base class for generation/embedding errors."""


class BackendUnavailable(GatewayError):
    """The backend could not serve the request after bounded retries."""


class EmbeddingBackendError(BackendUnavailable):
    """The embedding backend could not produce vectors."""


class ContextOverflow(GatewayError):
    """The rendered prompt exceeds the backend's context budget."""


class EmptyCompletion(GatewayError):
    """The backend returned an empty completion."""


class PromptError(GatewayError):
    """Base class for template rendering errors."""


class UnknownTemplate(PromptError):
    pass


class MissingSlot(PromptError):
    pass


class UnknownSlot(PromptError):
    pass


class TemplateId(str, Enum):
    NER_EXTRACTION = "ner_extraction"
    CONTEXTUALIZE = "contextualize"


@dataclass(frozen=True)
class PromptTemplate:
    """A pre-designed task instruction with named slots."""

    template_id: TemplateId
    instruction: str
    slot_names: tuple[str, ...]


NER_EXTRACTION_TEMPLATE = PromptTemplate(
    template_id=TemplateId.NER_EXTRACTION,
    instruction=(
        "You are a named entity recognition (NER) tool. Given the following "
        "classes, perform NER for the provided input text. Respond with a "
        "single JSON object mapping each detected class to the extracted text."
    ),
    slot_names=("classes", "input_text"),
)

CONTEXTUALIZE_TEMPLATE = PromptTemplate(
    template_id=TemplateId.CONTEXTUALIZE,
    instruction=(
        "You are an honest network security analyst. Given public threat "
        "intelligence reports fetched from trusted cybersecurity sources and "
        "organizational infrastructure and operations details. Generate a "
        "cyber threat intelligence report with all details, including the "
        "impact and mitigation strategies. Do not include any information "
        "that is not provided as additional knowledge."
    ),
    slot_names=("global_knowledge", "local_knowledge"),
)

TEMPLATES: dict[TemplateId, PromptTemplate] = {
    TemplateId.NER_EXTRACTION: NER_EXTRACTION_TEMPLATE,
    TemplateId.CONTEXTUALIZE: CONTEXTUALIZE_TEMPLATE,
}


def render_prompt(template_id: TemplateId | str, bindings: Mapping[str, str]) -> str:
    """Render a template with every slot bound exactly once.

    Rendering is stateless and deterministic: the same bindings always yield
    byte-identical prompts. For the contextualization template the section
    order is instruction, then global knowledge items, then local knowledge
    items.
    """
    try:
        template = TEMPLATES[TemplateId(template_id)]
    except (KeyError, ValueError):
        raise UnknownTemplate(f"no template named {template_id!r}")
    missing = [s for s in template.slot_names if s not in bindings]
    if missing:
        raise MissingSlot(f"missing slot(s): {', '.join(missing)}")
    extra = [s for s in bindings if s not in template.slot_names]
    if extra:
        raise UnknownSlot(f"unknown slot(s): {', '.join(sorted(extra))}")

    if template.template_id is TemplateId.NER_EXTRACTION:
        return "\n".join(
            [
                template.instruction,
                f"Classes: {bindings['classes']}",
                "Input:",
                bindings["input_text"],
            ]
        )
    return "\n".join(
        [
            template.instruction,
            "",
            "Global knowledge:",
            bindings["global_knowledge"],
            "",
            "Local knowledge:",
            bindings["local_knowledge"],
        ]
    )


@dataclass(frozen=True)
class GenerationRequest:
    """One completion request: rendered prompt plus decoding parameters.

    ``params`` passes through to the backend untouched; when empty, the
    backend's default decoding settings apply.
    """

    template_id: str
    prompt: str
    model_id: str
    params: Mapping[str, Any] = field(default_factory=dict)


@dataclass(frozen=True)
class GenerationResult:
    text: str
    token_usage: Mapping[str, int] = field(default_factory=dict)
    latency_s: float = 0.0


def tokenize(text: str) -> list[str]:
    """Lowercased word tokens split on whitespace and punctuation."""
    return re.findall(r"\w+", text.lower())


def prompt_digest(prompt: str) -> str:
    return hashlib.sha256(prompt.encode("utf-8")).hexdigest()


class HashingEmbedder:
    """Deterministic offline embedder: feature-hashed bag of words.

    Tokens are hashed into a fixed number of buckets with a keyed blake2b
    digest (stable across processes), counted, and the resulting vector is
    L2-normalized. Token order never matters, and texts with no shared
    vocabulary map to exactly orthogonal vectors.
    """

    def __init__(self, dimension: int = 256):
        self.dimension = dimension

    def _bucket(self, token: str) -> int:
        digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest()
        return int.from_bytes(digest, "big") % self.dimension

    def embed(self, texts: Sequence[str]) -> list[Vector]:
        if not texts:
            raise EmbeddingBackendError("embed requires at least one text")
        vectors = []
        for text in texts:
            counts = [0.0] * self.dimension
            for token in tokenize(text):
                counts[self._bucket(token)] += 1.0
            norm = math.sqrt(math.fsum(c * c for c in counts))
            if norm > 0.0:
                counts = [c / norm for c in counts]
            vectors.append(tuple(counts))
        return vectors


class ScriptedBackend:
    """Offline completion backend keyed on (template_id, prompt digest).

    Responses are registered either for an exact prompt (computed from the
    template bindings) or as a per-template default. Unknown keys return a
    labeled placeholder rather than failing, which keeps end-to-end runs
    hermetic even when a script entry is missing.
    """

    model_id = "scripted-offline"

    def __init__(self, max_prompt_chars: int = 1_000_000):
        self.max_prompt_chars = max_prompt_chars
        self._exact: dict[tuple[str, str], str] = {}
        self._defaults: dict[str, str] = {}
        self.calls: list[GenerationRequest] = []

    def script(self, template_id: TemplateId | str, bindings: Mapping[str, str], response: str) -> None:
        """Register a response for the prompt these bindings render to."""
        tid = TemplateId(template_id).value if not isinstance(template_id, str) else template_id
        prompt = render_prompt(tid, bindings)
        self.script_prompt(tid, prompt, response)

    def script_prompt(self, template_id: str, prompt: str, response: str) -> None:
        tid = template_id.value if isinstance(template_id, TemplateId) else template_id
        self._exact[(tid, prompt_digest(prompt))] = response

    def script_digest(self, template_id: str, digest: str, response: str) -> None:
        tid = template_id.value if isinstance(template_id, TemplateId) else template_id
        self._exact[(tid, digest)] = response

    def set_default(self, template_id: TemplateId | str, response: str) -> None:
        tid = template_id.value if isinstance(template_id, TemplateId) else template_id
        self._defaults[tid] = response

    def complete(self, request: GenerationRequest) -> GenerationResult:
        if len(request.prompt) > self.max_prompt_chars:
            raise ContextOverflow(
                f"prompt of {len(request.prompt)} chars exceeds budget {self.max_prompt_chars}"
            )
        self.calls.append(request)
        digest = prompt_digest(request.prompt)
        text = self._exact.get((request.template_id, digest))
        if text is None:
            text = self._defaults.get(request.template_id)
        if text is None:
            text = f"[scripted:{request.template_id}:{digest[:12]}]"
        if not text:
            raise EmptyCompletion(f"scripted entry for {request.template_id} is empty")
        return GenerationResult(text=text, token_usage={}, latency_s=0.0)


class RemoteBackend:
    """HTTP backend speaking the chat-completions and embeddings protocol.

    Transient failures (connection errors, 429, 5xx) are retried up to
    ``retries`` attempts with exponential backoff. When ``debug_log_dir`` is
    set, request/response bodies are appended there as JSON lines with
    credentials redacted.
    """

    def __init__(
        self,
        base_url: str,
        api_key: str = "",
        model_id: str = "default-model",
        embed_model_id: str = "default-embedding",
        max_prompt_chars: int = 480_000,
        retries: int = 3,
        backoff_s: float = 1.0,
        sleeper: Callable[[float], None] = time.sleep,
        session: Any = None,
        debug_log_dir: Optional[Path] = None,
    ):
        if session is None:
            import requests

            session = requests.Session()
        self.base_url = base_url.rstrip("/")
        self.api_key = api_key
        self.model_id = model_id
        self.embed_model_id = embed_model_id
        self.max_prompt_chars = max_prompt_chars
        self.retries = retries
        self.backoff_s = backoff_s
        self._sleep = sleeper
        self._session = session
        self._debug_log_dir = Path(debug_log_dir) if debug_log_dir else None
        self.dimension: Optional[int] = None

    def _headers(self) -> dict[str, str]:
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        return headers

    def _log_exchange(self, url: str, body: Mapping[str, Any], status: int, response: Any) -> None:
        logger.debug("POST %s -> %s", url, status)
        if self._debug_log_dir is None:
            return
        self._debug_log_dir.mkdir(parents=True, exist_ok=True)
        record = {"url": url, "request": body, "status": status, "response": response}
        with (self._debug_log_dir / "gateway_requests.jsonl").open("a", encoding="utf-8") as fh:
            fh.write(canonical_dumps(record) + "\n")

    def _post(self, path: str, body: Mapping[str, Any]) -> Mapping[str, Any]:
        url = f"{self.base_url}{path}"
        last_error: Optional[str] = None
        for attempt in range(self.retries):
            if attempt:
                self._sleep(self.backoff_s * (2 ** (attempt - 1)))
            try:
                resp = self._session.post(url, json=dict(body), headers=self._headers(), timeout=60)
            except Exception as exc:  # transport-level failure
                last_error = str(exc)
                continue
            if resp.status_code == 429 or resp.status_code >= 500:
                last_error = f"HTTP {resp.status_code}"
                continue
            if resp.status_code != 200:
                raise BackendUnavailable(f"backend returned HTTP {resp.status_code} for {path}")
            payload = resp.json()
            self._log_exchange(url, body, resp.status_code, payload)
            return payload
        raise BackendUnavailable(f"backend unreachable after {self.retries} attempts: {last_error}")

    def complete(self, request: GenerationRequest) -> GenerationResult:
        if len(request.prompt) > self.max_prompt_chars:
            raise ContextOverflow(
                f"prompt of {len(request.prompt)} chars exceeds budget {self.max_prompt_chars}"
            )
        body: dict[str, Any] = {
            "model": request.model_id or self.model_id,
            "messages": [{"role": "user", "content": request.prompt}],
        }
        body.update(request.params)
        started = time.monotonic()
        payload = self._post("/v1/chat/completions", body)
        latency = time.monotonic() - started
        try:
            text = payload["choices"][0]["message"]["content"] or ""
        except (KeyError, IndexError, TypeError):
            raise BackendUnavailable("malformed completion payload")
        if not text.strip():
            raise EmptyCompletion("backend returned an empty completion")
        usage = payload.get("usage", {}) or {}
        return GenerationResult(text=text, token_usage=dict(usage), latency_s=latency)

    def embed(self, texts: Sequence[str]) -> list[Vector]:
        if not texts:
            raise EmbeddingBackendError("embed requires at least one text")
        try:
            payload = self._post("/v1/embeddings", {"model": self.embed_model_id, "input": list(texts)})
            rows = sorted(payload["data"], key=lambda item: item.get("index", 0))
            vectors = [tuple(float(v) for v in row["embedding"]) for row in rows]
        except BackendUnavailable as exc:
            raise EmbeddingBackendError(str(exc))
        except (KeyError, TypeError) as exc:
            raise EmbeddingBackendError(f"malformed embeddings payload: {exc}")
        if len(vectors) != len(texts):
            raise EmbeddingBackendError("embedding count does not match input count")
        if vectors and self.dimension is None:
            self.dimension = len(vectors[0])
        return vectors


class GenerationGateway:
    """Facade bundling one completion backend and one embedding backend."""

    def __init__(self, completion: Any, embedder: Any):
        self._completion = completion
        self._embedder = embedder

    @property
    def model_id(self) -> str:
        return getattr(self._completion, "model_id", "unknown")

    @property
    def embedding_dimension(self) -> Optional[int]:
        return getattr(self._embedder, "dimension", None)

    def request(
        self,
        template_id: TemplateId | str,
        bindings: Mapping[str, str],
        params: Optional[Mapping[str, Any]] = None,
    ) -> GenerationRequest:
        tid = TemplateId(template_id).value
        return GenerationRequest(
            template_id=tid,
            prompt=render_prompt(tid, bindings),
            model_id=self.model_id,
            params=dict(params or {}),
        )

    def complete(self, request: GenerationRequest) -> GenerationResult:
        result = self._completion.complete(request)
        if not result.text:
            raise EmptyCompletion("completion backend produced empty text")
        return result

    def complete_raw(self, template_id: str, prompt: str, params: Optional[Mapping[str, Any]] = None) -> GenerationResult:
        """Complete a prompt that does not come from a registered template.

        Used by callers carrying their own versioned prompt text (for example
        the evaluation judge rubric); the template_id is a free-form label.
        """
        request = GenerationRequest(
            template_id=template_id,
            prompt=prompt,
            model_id=self.model_id,
            params=dict(params or {}),
        )
        return self.complete(request)

    def embed(self, texts: Sequence[str]) -> list[Vector]:
        if not texts:
            raise EmbeddingBackendError("embed requires at least one text")
        try:
            return self._embedder.embed(texts)
        except EmbeddingBackendError:
            raise
        except BackendUnavailable as exc:
            raise EmbeddingBackendError(str(exc))

    def embed_one(self, text: str) -> Vector:
        return self.embed([text])[0]


def offline_gateway(
    scripted: Optional[ScriptedBackend] = None,
    dimension: int = 256,
) -> GenerationGateway:
    """Gateway wired entirely to deterministic offline backends."""
    return GenerationGateway(
        completion=scripted or ScriptedBackend(),
        embedder=HashingEmbedder(dimension=dimension),
    )
