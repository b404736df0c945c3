"""Evaluation machinery: scenario datasets, scoring, and agreement stats.

Completions are scored against ground truth two ways: an embedding-cosine
similarity (mapped to [0, 1]) and an optional judge completion that rates
factual consistency on a 1-5 rubric. Aggregation produces the usual
box-plot statistics, and ``fleiss_kappa`` measures chance-corrected
agreement for a fixed panel of human raters.
"""

from __future__ import annotations

import json
import math
import re
import statistics
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Mapping, Optional, Sequence

from .gateway import GenerationGateway
from .model import EngineError, ThreatReport
from .orchestrator import OutcomeKind, Orchestrator, RunOutcome
from .store import cosine_similarity

JUDGE_RUBRIC_VERSION = "v1"
JUDGE_TEMPLATE_LABEL = "judge_correctness"

JUDGE_RUBRIC = """You are a strict evaluator of threat intelligence reports.
Rate the factual consistency of the candidate report against the reference
report on a scale from 1 to 5, where 1 means the candidate contradicts or
ignores the reference and 5 means every claim in the candidate is supported
by the reference.
Respond with only the integer rating.

Reference report:
{reference}

Candidate report:
{candidate}
"""

JUDGE_REASK_SUFFIX = "\nYour previous answer could not be parsed. Respond with only a single integer between 1 and 5."


class EvaluationError(EngineError):
    pass


class DatasetParseError(EvaluationError):
    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


class JudgeParseError(EvaluationError):
    pass


class EmptyInput(EvaluationError):
    pass


class RaggedMatrix(EvaluationError):
    pass


class DegenerateAgreement(EvaluationError):
    pass


@dataclass(frozen=True)
class Scenario:
    """One evaluation case: a trigger, its ground truth, and the expected gate outcome."""

    scenario_id: str
    trigger: ThreatReport
    ground_truth: str
    expected_relevant: bool

    def __post_init__(self):
        if self.expected_relevant and not self.ground_truth.strip():
            raise ValueError("ground_truth must be nonempty when expected_relevant")

    def to_dict(self) -> dict[str, Any]:
        return {
            "scenario_id": self.scenario_id,
            "trigger": self.trigger.to_dict(),
            "ground_truth": self.ground_truth,
            "expected_relevant": self.expected_relevant,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "Scenario":
        return cls(
            scenario_id=data["scenario_id"],
            trigger=ThreatReport.from_dict(data["trigger"]),
            ground_truth=data.get("ground_truth", ""),
            expected_relevant=bool(data["expected_relevant"]),
        )


@dataclass(frozen=True)
class ScoreRecord:
    """Scores for one evaluated scenario."""

    scenario_id: str
    outcome_kind: OutcomeKind
    similarity: Optional[float] = None
    correctness: Optional[float] = None

    def __post_init__(self):
        if self.similarity is not None and self.outcome_kind is not OutcomeKind.CONTEXTUALIZED:
            raise ValueError("similarity is only defined for contextualized outcomes")

    def to_dict(self) -> dict[str, Any]:
        return {
            "scenario_id": self.scenario_id,
            "outcome_kind": self.outcome_kind.value,
            "similarity": self.similarity,
            "correctness": self.correctness,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "ScoreRecord":
        return cls(
            scenario_id=data["scenario_id"],
            outcome_kind=OutcomeKind(data["outcome_kind"]),
            similarity=data.get("similarity"),
            correctness=data.get("correctness"),
        )


def _parse_scenario_line(line_no: int, line: str) -> Scenario:
    try:
        data = json.loads(line)
    except json.JSONDecodeError as exc:
        raise DatasetParseError(line_no, f"invalid JSON: {exc.msg}")
    try:
        return Scenario.from_dict(data)
    except (KeyError, TypeError, ValueError) as exc:
        raise DatasetParseError(line_no, str(exc))


def load_dataset(path: Path | str) -> list[Scenario]:
    """Load a line-delimited scenario file, failing on the first bad line."""
    scenarios = []
    with Path(path).open(encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            scenarios.append(_parse_scenario_line(line_no, line))
    return scenarios


def load_dataset_lenient(path: Path | str) -> tuple[list[Scenario], list[tuple[int, str]]]:
    """Like load_dataset, but collects bad lines instead of failing the batch."""
    scenarios: list[Scenario] = []
    errors: list[tuple[int, str]] = []
    with Path(path).open(encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                scenarios.append(_parse_scenario_line(line_no, line))
            except DatasetParseError as exc:
                errors.append((line_no, str(exc)))
    return scenarios, errors


def similarity_score(answer: str, ground_truth: str, gateway: GenerationGateway) -> float:
    """Embedding-cosine similarity mapped to [0, 1] via (1 + cos) / 2.

    Symmetric in its arguments; identical texts score 1.0 and texts with no
    shared vocabulary (orthogonal vectors) score 0.5.
    """
    if not answer.strip() or not ground_truth.strip():
        raise ValueError("similarity_score requires two nonempty texts")
    vec_a, vec_b = gateway.embed([answer, ground_truth])
    return (1.0 + cosine_similarity(vec_a, vec_b)) / 2.0


def _parse_judge_rating(text: str) -> Optional[int]:
    stripped = text.strip()
    try:
        value = int(stripped)
    except ValueError:
        match = re.search(r"\b([1-5])\b", stripped)
        if not match:
            return None
        value = int(match.group(1))
    return value if 1 <= value <= 5 else None


def judge_correctness(answer: str, ground_truth: str, gateway: GenerationGateway) -> float:
    """Judge-rated factual consistency, mapped from the 1-5 scale to [0, 1].

    The rubric is versioned (see JUDGE_RUBRIC_VERSION); a malformed rating
    gets one corrective re-ask before JudgeParseError.
    """
    prompt = JUDGE_RUBRIC.format(reference=ground_truth, candidate=answer)
    result = gateway.complete_raw(JUDGE_TEMPLATE_LABEL, prompt)
    rating = _parse_judge_rating(result.text)
    if rating is None:
        retry = gateway.complete_raw(JUDGE_TEMPLATE_LABEL, prompt + JUDGE_REASK_SUFFIX)
        rating = _parse_judge_rating(retry.text)
        if rating is None:
            raise JudgeParseError(f"judge output is not an integer rating: {retry.text!r}")
    return (rating - 1) / 4.0


@dataclass(frozen=True)
class SummaryStats:
    mean: float
    std: float
    min: float
    q1: float
    median: float
    q3: float
    max: float

    def to_dict(self) -> dict[str, float]:
        return {
            "mean": self.mean,
            "std": self.std,
            "min": self.min,
            "q1": self.q1,
            "median": self.median,
            "q3": self.q3,
            "max": self.max,
        }


def summarize(values: Sequence[float]) -> SummaryStats:
    """Sample statistics: std uses the n-1 denominator (0.0 for one value),
    quartiles use linear interpolation between order statistics."""
    if not values:
        raise EmptyInput("cannot summarize zero values")
    data = [float(v) for v in values]
    if len(data) == 1:
        only = data[0]
        return SummaryStats(only, 0.0, only, only, only, only, only)
    q1, median, q3 = statistics.quantiles(data, n=4, method="inclusive")
    return SummaryStats(
        mean=math.fsum(data) / len(data),
        std=statistics.stdev(data),
        min=min(data),
        q1=q1,
        median=median,
        q3=q3,
        max=max(data),
    )


def aggregate(records: Sequence[ScoreRecord]) -> dict[str, SummaryStats]:
    """Per-metric summary statistics over the score records."""
    if not records:
        raise EmptyInput("no score records to aggregate")
    out: dict[str, SummaryStats] = {}
    similarities = [r.similarity for r in records if r.similarity is not None]
    if similarities:
        out["similarity"] = summarize(similarities)
    correctness = [r.correctness for r in records if r.correctness is not None]
    if correctness:
        out["correctness"] = summarize(correctness)
    return out


def fleiss_kappa(ratings: Sequence[Sequence[float]]) -> float:
    """Fleiss' kappa over a subjects x categories matrix of rater counts.

    Every row must sum to the same rater count n >= 2. When expected chance
    agreement is 1 (all mass in a single category) observed agreement is
    necessarily perfect and the statistic is defined as exactly 1.0.
    """
    if not ratings:
        raise EmptyInput("ratings matrix is empty")
    n_categories = len(ratings[0])
    if n_categories == 0 or any(len(row) != n_categories for row in ratings):
        raise RaggedMatrix("all rows must have the same number of categories")
    row_sums = [math.fsum(row) for row in ratings]
    n_raters = row_sums[0]
    if any(s != n_raters for s in row_sums):
        raise RaggedMatrix(f"row sums differ: {sorted(set(row_sums))}")
    if n_raters < 2:
        raise ValueError("at least two raters per subject are required")

    n_subjects = len(ratings)
    total = n_subjects * n_raters
    p_categories = [math.fsum(row[j] for row in ratings) / total for j in range(n_categories)]
    p_subjects = [
        (math.fsum(c * c for c in row) - n_raters) / (n_raters * (n_raters - 1.0))
        for row in ratings
    ]
    p_mean = math.fsum(p_subjects) / n_subjects
    p_expected = math.fsum(p * p for p in p_categories)

    if p_expected >= 1.0:
        if sum(1 for p in p_categories if p > 0.0) == 1:
            return 1.0
        raise DegenerateAgreement("expected agreement is 1 with mass in multiple categories")
    return (p_mean - p_expected) / (1.0 - p_expected)


def gate_confusion(outcomes: Sequence[tuple[Scenario, OutcomeKind]]) -> dict[str, float]:
    """Confusion counts of the relevance gate against expected_relevant flags.

    "Positive" means the run produced a contextualized report. With no
    positive predictions (or no positive scenarios) the corresponding ratio
    defaults to 1.0.
    """
    tp = fp = tn = fn = 0
    for scenario, kind in outcomes:
        predicted = kind is OutcomeKind.CONTEXTUALIZED
        if predicted and scenario.expected_relevant:
            tp += 1
        elif predicted and not scenario.expected_relevant:
            fp += 1
        elif not predicted and scenario.expected_relevant:
            fn += 1
        else:
            tn += 1
    precision = tp / (tp + fp) if (tp + fp) else 1.0
    recall = tp / (tp + fn) if (tp + fn) else 1.0
    return {
        "true_positive": tp,
        "false_positive": fp,
        "true_negative": tn,
        "false_negative": fn,
        "precision": precision,
        "recall": recall,
    }


@dataclass
class ScenarioResult:
    scenario: Scenario
    outcome: RunOutcome
    record: Optional[ScoreRecord] = None
    error: Optional[str] = None


def evaluate_scenarios(
    scenarios: Sequence[Scenario],
    orchestrator: Orchestrator,
    gateway: GenerationGateway,
    use_judge: bool = False,
) -> list[ScenarioResult]:
    """Run every scenario through the pipeline and score the completions.

    Per-scenario failures are recorded and the batch continues; results come
    back in input order.
    """
    results: list[ScenarioResult] = []
    for scenario in scenarios:
        outcome, _trace = orchestrator.run(scenario.trigger)
        if outcome.kind is OutcomeKind.CONTEXTUALIZED:
            similarity = None
            correctness = None
            if scenario.ground_truth.strip():
                similarity = similarity_score(outcome.intel.text, scenario.ground_truth, gateway)
                if use_judge:
                    correctness = judge_correctness(
                        outcome.intel.text, scenario.ground_truth, gateway
                    )
            record = ScoreRecord(
                scenario_id=scenario.scenario_id,
                outcome_kind=OutcomeKind.CONTEXTUALIZED,
                similarity=similarity,
                correctness=correctness,
            )
            results.append(ScenarioResult(scenario=scenario, outcome=outcome, record=record))
        elif outcome.kind is OutcomeKind.DISCARDED:
            record = ScoreRecord(
                scenario_id=scenario.scenario_id, outcome_kind=OutcomeKind.DISCARDED
            )
            results.append(ScenarioResult(scenario=scenario, outcome=outcome, record=record))
        else:
            results.append(
                ScenarioResult(scenario=scenario, outcome=outcome, error=outcome.error)
            )
    return results
