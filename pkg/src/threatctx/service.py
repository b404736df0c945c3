"""Long-running HTTP surface for zero-day triggers.

One endpoint accepts a trigger report and returns the contextualized
result; a health endpoint reports whether the index and backends are
wired up. Runs execute one at a time per worker over a bounded admission
queue, so a burst of triggers degrades to 503 instead of wedging the
process. There is no authentication built in: deploy this behind the
boundary that already controls access to the local knowledge base.
"""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse, Response

from .model import ThreatReport
from .orchestrator import Orchestrator, OutcomeKind

DEFAULT_WORKERS = 2
DEFAULT_QUEUE_DEPTH = 32


@dataclass
class ServiceState:
    orchestrator: Orchestrator
    workers: int = DEFAULT_WORKERS
    queue_depth: int = DEFAULT_QUEUE_DEPTH


def create_app(state: ServiceState | None = None) -> FastAPI:
    """Build the service app; ``state=None`` models a not-yet-loaded index."""
    app = FastAPI(title="threatctx", docs_url=None, redoc_url=None)
    app.state.engine = state
    if state is not None:
        app.state.admission = threading.Semaphore(state.queue_depth)
        app.state.workers = threading.Semaphore(state.workers)

    @app.get("/healthz")
    def healthz() -> Response:
        if app.state.engine is None:
            return JSONResponse({"status": "index not loaded"}, status_code=503)
        return JSONResponse({"status": "ok"})

    @app.post("/v1/contextualize")
    async def contextualize(request: Request) -> Response:
        engine: ServiceState | None = app.state.engine
        if engine is None:
            return JSONResponse({"error": "index not loaded"}, status_code=503)
        try:
            body = await request.json()
            trigger = ThreatReport.from_dict(body)
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            return JSONResponse({"error": f"malformed trigger: {exc}"}, status_code=400)

        if not app.state.admission.acquire(blocking=False):
            return JSONResponse({"error": "trigger queue is full"}, status_code=503)
        try:
            with app.state.workers:
                outcome, trace = engine.orchestrator.run(trigger)
        finally:
            app.state.admission.release()

        if outcome.kind is OutcomeKind.CONTEXTUALIZED:
            return JSONResponse(outcome.intel.to_dict(), status_code=200)
        if outcome.kind is OutcomeKind.DISCARDED:
            headers = {
                "X-Discard-Reason": (outcome.reason or "").replace("\n", " "),
                "X-Gate-Score": f"{outcome.gate_score:.6f}",
            }
            return Response(status_code=204, headers=headers)
        return JSONResponse(
            {"error": outcome.error or "run failed", "trace": trace.to_dict()},
            status_code=500,
        )

    return app
