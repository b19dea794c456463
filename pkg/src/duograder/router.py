"""The integrated grading pipeline: embed, fast predict, confidence gate,
slow grade, escalate. Plus batch grading and the evaluation harnesses.

When the slow path runs its scores replace the fast scores outright; the two
are never averaged. The slow prompt deliberately excludes the fast prediction
to avoid anchoring the model.
"""

from __future__ import annotations

import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from . import fast as fastmod
from .corpus import Essay, EssayPromptSpec, Rubric, ScoreVector, score_to_class
from .errors import (ConfigurationError, GatewayUnavailable, GradingFailure,
                     RequestRejected, SlowGradingFailure)
from .fast import FastModel, FastTrainConfig, ScoreDistribution
from .gateway import Gateway, LlmRequestConfig
from .metrics import (BucketReport, DEFAULT_BUCKET_EDGES, RatingPair, bucket_qwk,
                      qwk, round_half_away)
from .promptkit import SFT_INSTRUCTION, TemplateRegistry, render_prompt


class Route(str, Enum):
    FAST = "Fast"
    FAST_THEN_SLOW = "FastThenSlow"
    ESCALATED = "Escalated"


@dataclass(frozen=True)
class RouterPolicy:
    confidence_threshold: float = 0.2
    slow_enabled: bool = True
    escalate_enabled: bool = True
    force_slow: bool = False
    escalate_below: float = 0.1  # human review even after a slow success

    def __post_init__(self):
        for name in ("confidence_threshold", "escalate_below"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ConfigurationError(f"{name} must lie in [0,1], got {value}")


@dataclass(frozen=True)
class SlowReport:
    final: ScoreVector
    fraction_unchanged: float
    trial_count: int
    warnings: tuple[str, ...] = ()


@dataclass(frozen=True)
class ReviewRequest:
    """Escalation payload handed to the review queue."""

    essay_id: str
    fast_scores: ScoreVector
    confidence: float
    slow_scores: Optional[ScoreVector] = None
    explanation: Optional[str] = None


@dataclass(frozen=True)
class GradingResult:
    essay_id: str
    route: Route
    fast: ScoreDistribution
    fast_scores: ScoreVector
    final_scores: ScoreVector
    confidence: float
    slow: Optional[SlowReport] = None
    explanation: Optional[str] = None
    timings: dict[str, float] = field(default_factory=dict)
    review_request: Optional[ReviewRequest] = None

    def to_json(self) -> dict:
        return {
            "essay_id": self.essay_id,
            "route": self.route.value,
            "scores": self.final_scores.to_json(),
            "fast_scores": self.fast_scores.to_json(),
            "confidence": self.confidence,
            "explanation": self.explanation,
            "timings": dict(self.timings),
            "slow": None if self.slow is None else {
                "scores": self.slow.final.to_json(),
                "fraction_unchanged": self.slow.fraction_unchanged,
                "trial_count": self.slow.trial_count,
                "warnings": list(self.slow.warnings),
            },
        }


@dataclass
class BatchSummary:
    route_counts: dict[str, int] = field(default_factory=dict)
    mean_latency: dict[str, float] = field(default_factory=dict)
    failures: list[tuple[str, str]] = field(default_factory=list)


@dataclass(frozen=True)
class FastModelSet:
    """One classifier for the overall score, optionally one per dimension."""

    overall: FastModel
    dimensions: dict[str, FastModel] = field(default_factory=dict)


class DualRouter:
    def __init__(self, models: FastModelSet, rubric: Rubric,
                 prompt_spec: EssayPromptSpec, gateway: Optional[Gateway] = None,
                 chat_config: Optional[LlmRequestConfig] = None,
                 embed_config: Optional[LlmRequestConfig] = None,
                 registry: Optional[TemplateRegistry] = None,
                 parallelism: int = 4):
        if models.overall.score_range != rubric.overall_range:
            raise ConfigurationError(
                f"overall model range {models.overall.score_range} != rubric "
                f"range {rubric.overall_range}")
        missing = [d.name for d in rubric.dimensions if d.name not in models.dimensions]
        if rubric.sum_constraint and missing:
            raise ConfigurationError(
                f"sum-constraint rubric needs a model per dimension; missing {missing}")
        self.models = models
        self.rubric = rubric
        self.prompt_spec = prompt_spec
        self.gateway = gateway
        self.chat_config = chat_config
        self.embed_config = embed_config
        self.registry = registry
        self.parallelism = parallelism

    # -- single essay ----------------------------------------------------------

    def embed(self, text: str) -> list[float]:
        if self.gateway is None or self.embed_config is None:
            raise ConfigurationError("no embedding gateway configured")
        return self.gateway.embed(self.embed_config, [text])[0]

    def grade(self, essay: Essay, policy: RouterPolicy = RouterPolicy(),
              embedding: Optional[Sequence[float]] = None) -> GradingResult:
        """Run the full pipeline for a single essay.

        A precomputed embedding may be supplied to skip the embed stage.
        """
        timings: dict[str, float] = {}
        if embedding is None:
            t0 = time.perf_counter()
            embedding = self.embed(essay.text)
            timings["embed"] = time.perf_counter() - t0

        t0 = time.perf_counter()
        overall_dist = fastmod.predict(self.models.overall, embedding)
        dim_dists = {name: fastmod.predict(model, embedding)
                     for name, model in self.models.dimensions.items()}
        fast_scores = self._fast_scores(overall_dist, dim_dists)
        timings["fast"] = time.perf_counter() - t0
        confidence = overall_dist.confidence

        if confidence >= policy.confidence_threshold and not policy.force_slow:
            return GradingResult(
                essay_id=essay.essay_id, route=Route.FAST, fast=overall_dist,
                fast_scores=fast_scores, final_scores=fast_scores,
                confidence=confidence, timings=timings)

        slow_report: Optional[SlowReport] = None
        explanation: Optional[str] = None
        slow_error: Optional[str] = None
        if policy.slow_enabled:
            if self.gateway is None or self.chat_config is None:
                raise ConfigurationError("slow path enabled but no chat gateway configured")
            prompt = render_prompt(SFT_INSTRUCTION, self.prompt_spec, essay,
                                   rubric=self.rubric, registry=self.registry)
            t0 = time.perf_counter()
            try:
                outcome = self.gateway.chat_trials(self.chat_config, prompt, self.rubric)
                slow_report = SlowReport(final=outcome.final,
                                         fraction_unchanged=outcome.fraction_unchanged,
                                         trial_count=self.chat_config.trial_count,
                                         warnings=outcome.warnings)
                explanation = outcome.explanation
            except (SlowGradingFailure, GatewayUnavailable, RequestRejected) as e:
                slow_error = f"{type(e).__name__}: {e}"
                if not policy.escalate_enabled:
                    raise GradingFailure(
                        f"slow grading failed for essay {essay.essay_id} and "
                        f"escalation is disabled: {e}") from e
            timings["slow"] = time.perf_counter() - t0

        if slow_report is not None:
            escalate = policy.escalate_enabled and confidence < policy.escalate_below
            route = Route.ESCALATED if escalate else Route.FAST_THEN_SLOW
            request = None
            if escalate:
                request = ReviewRequest(essay_id=essay.essay_id,
                                        fast_scores=fast_scores,
                                        confidence=confidence,
                                        slow_scores=slow_report.final,
                                        explanation=explanation)
            return GradingResult(
                essay_id=essay.essay_id, route=route, fast=overall_dist,
                fast_scores=fast_scores, final_scores=slow_report.final,
                confidence=confidence, slow=slow_report, explanation=explanation,
                timings=timings, review_request=request)

        if policy.escalate_enabled:
            request = ReviewRequest(essay_id=essay.essay_id, fast_scores=fast_scores,
                                    confidence=confidence)
            return GradingResult(
                essay_id=essay.essay_id, route=Route.ESCALATED, fast=overall_dist,
                fast_scores=fast_scores, final_scores=fast_scores,
                confidence=confidence, timings=timings, review_request=request)
        raise GradingFailure(
            f"essay {essay.essay_id}: confidence {confidence:.3f} below threshold "
            f"{policy.confidence_threshold} but neither slow grading nor escalation "
            f"is available" + (f" ({slow_error})" if slow_error else ""))

    def _fast_scores(self, overall_dist: ScoreDistribution,
                     dim_dists: dict[str, ScoreDistribution]) -> ScoreVector:
        per_dim = {}
        for d in self.rubric.dimensions:
            if d.name in dim_dists:
                per_dim[d.name] = dim_dists[d.name].predicted_score
        if self.rubric.sum_constraint and self.rubric.dimensions:
            overall = sum(per_dim.values())
        else:
            overall = overall_dist.predicted_score
        return ScoreVector(overall=overall, per_dimension=per_dim)

    # -- batches ---------------------------------------------------------------

    def grade_batch(self, essays: Sequence[Essay],
                    policy: RouterPolicy = RouterPolicy(),
                    embeddings: Optional[Sequence[Sequence[float]]] = None
                    ) -> tuple[list[Optional[GradingResult]], BatchSummary]:
        """Order-preserving; per-essay failures are isolated and reported."""
        summary = BatchSummary()
        if not essays:
            return [], summary
        if embeddings is not None and len(embeddings) != len(essays):
            raise ValueError("embeddings must align with essays")

        def one(i: int) -> GradingResult:
            emb = embeddings[i] if embeddings is not None else None
            return self.grade(essays[i], policy, embedding=emb)

        results: list[Optional[GradingResult]] = [None] * len(essays)
        with ThreadPoolExecutor(max_workers=self.parallelism) as pool:
            futures = [pool.submit(one, i) for i in range(len(essays))]
            for i, future in enumerate(futures):
                try:
                    results[i] = future.result()
                except Exception as e:  # noqa: BLE001 - isolate per-essay failures
                    summary.failures.append((essays[i].essay_id, str(e)))

        latency_sums: dict[str, float] = {}
        for result in results:
            if result is None:
                continue
            summary.route_counts[result.route.value] = (
                summary.route_counts.get(result.route.value, 0) + 1)
            latency_sums[result.route.value] = (
                latency_sums.get(result.route.value, 0.0)
                + sum(result.timings.values()))
        summary.mean_latency = {
            route: latency_sums[route] / count
            for route, count in summary.route_counts.items()}
        return results, summary

    # -- evaluation --------------------------------------------------------------

    def evaluate(self, essays: Sequence[Essay],
                 policy: RouterPolicy = RouterPolicy(),
                 embeddings: Optional[Sequence[Sequence[float]]] = None,
                 bucket_edges: Sequence[float] = DEFAULT_BUCKET_EDGES) -> "EvalReport":
        if any(e.gold is None for e in essays):
            raise ValueError("evaluate requires gold scores on every essay")
        results, summary = self.grade_batch(essays, policy, embeddings=embeddings)
        if summary.failures:
            raise GradingFailure(f"{len(summary.failures)} essays failed during "
                                 f"evaluation: {summary.failures[:3]}")
        graded = [(e, r) for e, r in zip(essays, results) if r is not None]
        overall_range = self.rubric.overall_range

        def pairs(selector) -> dict[str, RatingPair]:
            out = {}
            rows = [(selector(r), e.gold) for e, r in graded if selector(r) is not None]
            if rows:
                out["overall"] = RatingPair.of(
                    [s.overall for s, _ in rows], [g.overall for _, g in rows],
                    overall_range)
                for d in self.rubric.dimensions:
                    out[d.name] = RatingPair.of(
                        [s.per_dimension[d.name] for s, _ in rows],
                        [g.per_dimension[d.name] for _, g in rows],
                        (d.min, d.max))
            return out

        integrated = {k: qwk(p) for k, p in pairs(lambda r: r.final_scores).items()}
        fast_only = {k: qwk(p) for k, p in pairs(lambda r: r.fast_scores).items()}
        slow_only = {k: qwk(p) for k, p in pairs(
            lambda r: r.slow.final if r.slow else None).items()}
        buckets = bucket_qwk(
            [(r.fast_scores.overall, r.confidence) for _, r in graded],
            [e.gold.overall for e, _ in graded],
            edges=bucket_edges, score_range=overall_range)
        return EvalReport(qwk_integrated=integrated, qwk_fast=fast_only,
                          qwk_slow=slow_only, route_counts=summary.route_counts,
                          mean_latency=summary.mean_latency, buckets=buckets,
                          results=[r for _, r in graded])


@dataclass
class EvalReport:
    qwk_integrated: dict[str, float]
    qwk_fast: dict[str, float]
    qwk_slow: dict[str, float]
    route_counts: dict[str, int]
    mean_latency: dict[str, float]
    buckets: BucketReport
    results: list[GradingResult]

    def to_json(self) -> dict:
        return {
            "qwk_integrated": self.qwk_integrated,
            "qwk_fast": self.qwk_fast,
            "qwk_slow": self.qwk_slow,
            "route_counts": self.route_counts,
            "mean_latency": self.mean_latency,
            "buckets": self.buckets.to_json(),
        }


@dataclass(frozen=True)
class LabeledSet:
    """Gold-scored essays plus their embeddings, for cross-set evaluation."""

    essays: tuple[Essay, ...]
    embeddings: tuple[tuple[float, ...], ...]
    score_range: tuple[int, int]

    def __post_init__(self):
        if len(self.essays) != len(self.embeddings):
            raise ValueError("essays and embeddings must align")
        if any(e.gold is None for e in self.essays):
            raise ValueError("cross-set evaluation requires gold scores")


def map_score(score: int, src: tuple[int, int], dst: tuple[int, int]) -> int:
    """Linear rescale between score ranges, rounded half-away-from-zero."""
    if src == dst:
        return score
    lo_s, hi_s = src
    lo_d, hi_d = dst
    if hi_s == lo_s:
        return lo_d
    return round_half_away((score - lo_s) * (hi_d - lo_d) / (hi_s - lo_s) + lo_d)


def crosseval(train_sets: dict[str, LabeledSet],
              test_sets: Optional[dict[str, LabeledSet]] = None,
              train_config: FastTrainConfig = FastTrainConfig()):
    """Train a fast model per set, evaluate it on every other set.

    Predictions are rescaled into the test set's score range when ranges
    differ. Returns the train-by-test generalizability matrix.
    """
    from .metrics import crosseval_matrix

    test_sets = test_sets if test_sets is not None else train_sets
    if len(train_sets) < 2 and len(test_sets) < 2:
        raise ValueError("cross-set evaluation needs at least two sets")
    cells: dict[tuple[str, str], RatingPair] = {}
    for train_id, train_data in train_sets.items():
        labels = [score_to_class(e.gold.overall, train_data.score_range)
                  for e in train_data.essays]
        model = fastmod.train(np.asarray(train_data.embeddings), labels,
                              train_data.score_range, train_config)
        for test_id, test_data in test_sets.items():
            if test_id == train_id:
                continue
            preds = [
                map_score(fastmod.predict(model, emb).predicted_score,
                          train_data.score_range, test_data.score_range)
                for emb in test_data.embeddings]
            golds = [e.gold.overall for e in test_data.essays]
            cells[(train_id, test_id)] = RatingPair(
                tuple(preds), tuple(golds), test_data.score_range)
    return crosseval_matrix(cells)


def write_results(path: Union[str, Path], results: Sequence[GradingResult]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for result in results:
            fh.write(json.dumps(result.to_json(), ensure_ascii=False) + "\n")
