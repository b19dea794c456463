"""HTTP service: grading, results, and the human review queue.

All state mutations are events appended to the store under its writer lock;
claim conflicts resolve first-writer-wins. Review tasks follow the two-stage
protocol: AI feedback is absent from every payload until the reviewer's
initial scores are recorded, then revealed for the optional revision.
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field
from typing import Optional

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse
from pydantic import BaseModel

from .corpus import CSEE_FORMAT, ESSAY_FORMAT, Essay, Rubric, ScoreVector, _strict_int
from .errors import (ConfigurationError, GatewayUnavailable, GradingFailure,
                     SlowGradingFailure, ValidationFailure)
from .events import EventKind, EventStore, ReviewTask, TaskStatus
from .metrics import RatingPair, TTestResult, qwk, welch_t_test
from .router import DualRouter, Route, RouterPolicy

log = logging.getLogger(__name__)


class ApiError(Exception):
    def __init__(self, status_code: int, detail):
        super().__init__(str(detail))
        self.status_code = status_code
        self.detail = detail


@dataclass
class GradingService:
    rubric: Rubric
    store: EventStore
    router: Optional[DualRouter] = None
    default_policy: RouterPolicy = field(default_factory=RouterPolicy)
    reviewer_tokens: dict[str, str] = field(default_factory=dict)
    rubric_id: str = "default"

    # -- auth -----------------------------------------------------------------

    def authenticate(self, authorization: Optional[str],
                     reviewer_id: Optional[str]) -> str:
        """Resolve the acting reviewer; static bearer tokens when configured."""
        if not self.reviewer_tokens:
            if not reviewer_id:
                raise ApiError(422, "reviewer_id is required")
            return reviewer_id
        if not authorization or not authorization.startswith("Bearer "):
            raise ApiError(401, "bearer token required")
        token = authorization.removeprefix("Bearer ").strip()
        actor = self.reviewer_tokens.get(token)
        if actor is None:
            raise ApiError(401, "unknown token")
        if reviewer_id and reviewer_id != actor:
            raise ApiError(403, f"token belongs to {actor!r}, not {reviewer_id!r}")
        return actor

    # -- essays -----------------------------------------------------------------

    def ingest_essay(self, body: dict) -> tuple[int, Essay]:
        essay = self._essay_from_request(body)
        stored = self.store.state.essays.get(essay.essay_id)
        if stored is not None:
            if stored == essay.to_json():
                return 200, essay
            raise ApiError(409, f"essay {essay.essay_id!r} already exists with "
                                f"different content")
        self.store.append(EventKind.ESSAY_INGESTED, {"essay": essay.to_json()})
        return 201, essay

    def _essay_from_request(self, body: dict) -> Essay:
        fmt = body.get("format")
        try:
            if fmt == CSEE_FORMAT:
                scores = body.get("scores") or {}
                gold = ScoreVector(
                    overall=_strict_int(scores["overall"]),
                    per_dimension={"Content": _strict_int(scores["content"]),
                                   "Language": _strict_int(scores["language"]),
                                   "Structure": _strict_int(scores["structure"])})
                essay = Essay(essay_id=str(body["essay_id"]),
                              set_id=str(body.get("prompt_id", "")),
                              text=str(body["text"]), gold=gold)
            elif fmt == ESSAY_FORMAT:
                essay = Essay.from_json(body)
            else:
                raise ApiError(422, [f"unknown or missing format marker: {fmt!r}"])
        except ApiError:
            raise
        except (KeyError, TypeError, ValueError, ValidationFailure) as e:
            raise ApiError(422, [f"malformed essay record: {e}"]) from e
        if essay.gold is not None:
            problems = self.rubric.validate(essay.gold)
            if problems:
                raise ApiError(422, problems)
        return essay

    def get_essay(self, essay_id: str) -> Essay:
        stored = self.store.state.essays.get(essay_id)
        if stored is None:
            raise ApiError(404, f"unknown essay {essay_id!r}")
        return Essay.from_json(stored)

    # -- grading ----------------------------------------------------------------

    def grade(self, essay_id: str, policy_overrides: Optional[dict] = None) -> dict:
        if self.router is None:
            raise ApiError(503, "no fast model loaded; grading unavailable")
        essay = self.get_essay(essay_id)
        policy = self._policy_with(policy_overrides)
        try:
            result = self.router.grade(essay, policy)
        except (GradingFailure, GatewayUnavailable, SlowGradingFailure,
                ConfigurationError) as e:
            raise ApiError(503, str(e)) from e
        payload = result.to_json()
        payload["rubric_id"] = self.rubric_id
        with self.store.transaction():
            self.store.append(EventKind.GRADED,
                              {"essay_id": essay_id, "result": payload})
            if result.route is Route.ESCALATED and result.review_request is not None:
                req = result.review_request
                task_id = f"task-{self.store.next_sequence}"
                ai_feedback = {
                    "fast_scores": req.fast_scores.to_json(),
                    "confidence": req.confidence,
                    "slow_scores": (req.slow_scores.to_json()
                                    if req.slow_scores else None),
                    "explanation": req.explanation,
                    "rubric_id": self.rubric_id,
                }
                self.store.append(EventKind.TASK_OPENED, {
                    "task_id": task_id, "essay_id": essay_id,
                    "ai_feedback": ai_feedback})
                payload["task_id"] = task_id
        return payload

    def _policy_with(self, overrides: Optional[dict]) -> RouterPolicy:
        if not overrides:
            return self.default_policy
        valid = {f.name for f in dataclasses.fields(RouterPolicy)}
        unknown = set(overrides) - valid
        if unknown:
            raise ApiError(422, f"unknown policy fields: {sorted(unknown)}")
        try:
            return dataclasses.replace(self.default_policy, **overrides)
        except (ConfigurationError, TypeError) as e:
            raise ApiError(422, str(e)) from e

    def gradings_for(self, essay_id: str) -> list[dict]:
        self.get_essay(essay_id)
        return list(self.store.state.gradings.get(essay_id, []))

    # -- review queue -------------------------------------------------------------

    def queue(self, max_confidence: Optional[float] = None,
              status: TaskStatus = TaskStatus.OPEN) -> list[dict]:
        tasks = [t for t in self.store.state.tasks.values() if t.status is status]
        if max_confidence is not None:
            tasks = [t for t in tasks if t.confidence <= max_confidence]
        tasks.sort(key=lambda t: (t.confidence, t.created_at_ms, t.task_id))
        return [self.task_view(t) for t in tasks]

    def _task(self, task_id: str) -> ReviewTask:
        task = self.store.state.tasks.get(task_id)
        if task is None:
            raise ApiError(404, f"unknown task {task_id!r}")
        return task

    def task_view(self, task: ReviewTask) -> dict:
        """Stage-aware serialization: AI scores are absent until revealed."""
        if task.status is TaskStatus.COMPLETED:
            stage = "Done"
        elif task.initial_human_scores is not None:
            stage = "Revealed"
        else:
            stage = "Blind"
        essay = self.store.state.essays.get(task.essay_id, {})
        view = {
            "task_id": task.task_id,
            "essay_id": task.essay_id,
            "essay_text": essay.get("text", ""),
            "created_at_ms": task.created_at_ms,
            "status": task.status.value,
            "stage": stage,
            "confidence": task.confidence,
            "reviewer_id": task.reviewer_id,
            "rubric_id": self.rubric_id,
            "initial_human_scores": (task.initial_human_scores.to_json()
                                     if task.initial_human_scores else None),
            "revised_human_scores": (task.revised_human_scores.to_json()
                                     if task.revised_human_scores else None),
            "initial_elapsed_s": task.initial_elapsed_s,
            "revise_elapsed_s": task.revise_elapsed_s,
        }
        if stage != "Blind":
            view["ai_feedback"] = task.ai_feedback
        return view

    def open_task(self, essay_id: str, ai_feedback: dict) -> dict:
        """Manual escalation entry point (used by offline tooling)."""
        self.get_essay(essay_id)
        with self.store.transaction():
            task_id = f"task-{self.store.next_sequence}"
            self.store.append(EventKind.TASK_OPENED, {
                "task_id": task_id, "essay_id": essay_id,
                "ai_feedback": dict(ai_feedback, rubric_id=self.rubric_id)})
        return self.task_view(self._task(task_id))

    def claim(self, task_id: str, reviewer_id: str) -> dict:
        with self.store.transaction():
            task = self._task(task_id)
            if task.status is not TaskStatus.OPEN:
                raise ApiError(409, f"task {task_id} is {task.status.value}, not Open")
            self.store.append(EventKind.TASK_CLAIMED,
                              {"task_id": task_id, "reviewer_id": reviewer_id})
        return self.task_view(self._task(task_id))

    def release(self, task_id: str, reviewer_id: str) -> dict:
        with self.store.transaction():
            task = self._task(task_id)
            if task.status is not TaskStatus.CLAIMED:
                raise ApiError(409, f"task {task_id} is not Claimed")
            if task.reviewer_id != reviewer_id:
                raise ApiError(409, f"task {task_id} is claimed by another reviewer")
            self.store.append(EventKind.TASK_RELEASED, {"task_id": task_id})
        return self.task_view(self._task(task_id))

    def submit_initial(self, task_id: str, reviewer_id: str, scores: dict,
                       elapsed_seconds: Optional[float] = None) -> dict:
        vector = self._validated_scores(scores)
        with self.store.transaction():
            task = self._task(task_id)
            self._require_claimed_by(task, reviewer_id)
            if task.initial_human_scores is not None:
                raise ApiError(409, f"task {task_id} already has initial scores")
            self.store.append(EventKind.TASK_INITIAL_SCORED, {
                "task_id": task_id, "reviewer_id": reviewer_id,
                "scores": vector.to_json(), "elapsed_s": elapsed_seconds})
        return self.task_view(self._task(task_id))

    def review(self, task_id: str, reviewer_id: str, revised_scores: dict,
               initial_scores: Optional[dict] = None,
               elapsed_seconds: Optional[float] = None) -> dict:
        revised = self._validated_scores(revised_scores)
        supplied_initial = (self._validated_scores(initial_scores)
                            if initial_scores is not None else None)
        with self.store.transaction():
            task = self._task(task_id)
            self._require_claimed_by(task, reviewer_id)
            initial = task.initial_human_scores or supplied_initial
            if initial is None:
                raise ApiError(422, "initial scores missing: submit them first or "
                                    "include initial_scores in the body")
            if (task.initial_human_scores is not None and supplied_initial is not None
                    and supplied_initial != task.initial_human_scores):
                raise ApiError(409, "initial_scores do not match the recorded "
                                    "initial submission")
            self.store.append(EventKind.TASK_COMPLETED, {
                "task_id": task_id, "reviewer_id": reviewer_id,
                "initial": initial.to_json(), "revised": revised.to_json(),
                "elapsed_s": elapsed_seconds})
        return self.task_view(self._task(task_id))

    def _require_claimed_by(self, task: ReviewTask, reviewer_id: str) -> None:
        if task.status is TaskStatus.COMPLETED:
            raise ApiError(409, f"task {task.task_id} is already Completed")
        if task.status is not TaskStatus.CLAIMED:
            raise ApiError(409, f"task {task.task_id} is not Claimed")
        if task.reviewer_id != reviewer_id:
            raise ApiError(409, f"task {task.task_id} is claimed by "
                                f"{task.reviewer_id!r}")

    def _validated_scores(self, scores: dict) -> ScoreVector:
        try:
            vector = ScoreVector.from_json(scores)
        except (KeyError, TypeError, ValueError) as e:
            raise ApiError(422, [f"malformed scores: {e}"]) from e
        problems = self.rubric.validate(vector)
        if problems:
            raise ApiError(422, problems)
        return vector

    # -- reports ---------------------------------------------------------------

    def cograding_report(self) -> dict:
        """Per-reviewer agreement before and after seeing the AI feedback."""
        completed = [t for t in self.store.state.tasks.values()
                     if t.status is TaskStatus.COMPLETED]
        rows = []
        for task in completed:
            essay = self.store.state.essays.get(task.essay_id)
            gold = (essay or {}).get("gold")
            if gold is None:
                continue
            rows.append((task, ScoreVector.from_json(gold)))
        if not rows:
            raise ApiError(409, "no completed tasks with gold scores")

        overall_range = self.rubric.overall_range
        by_reviewer: dict[str, list[tuple[ReviewTask, ScoreVector]]] = {}
        for task, gold in rows:
            by_reviewer.setdefault(task.reviewer_id or "?", []).append((task, gold))

        reviewers = []
        initial_qwks, revised_qwks = [], []
        for reviewer_id in sorted(by_reviewer):
            items = by_reviewer[reviewer_id]
            golds = [g.overall for _, g in items]
            initial = [t.initial_human_scores.overall for t, _ in items]
            revised = [t.revised_human_scores.overall for t, _ in items]
            q_init = qwk(RatingPair(tuple(initial), tuple(golds), overall_range))
            q_rev = qwk(RatingPair(tuple(revised), tuple(golds), overall_range))
            initial_qwks.append(q_init)
            revised_qwks.append(q_rev)
            reviewers.append({"reviewer_id": reviewer_id, "task_count": len(items),
                              "qwk_initial": q_init, "qwk_revised": q_rev})

        ai_scores, ai_golds = [], []
        for task, gold in rows:
            feedback = task.ai_feedback
            scores = feedback.get("slow_scores") or feedback.get("fast_scores")
            if scores:
                ai_scores.append(ScoreVector.from_json(scores).overall)
                ai_golds.append(gold.overall)
        ai_qwk = (qwk(RatingPair(tuple(ai_scores), tuple(ai_golds), overall_range))
                  if ai_scores else None)

        ttest = self._paired_group_ttest(revised_qwks, initial_qwks)
        elapsed = [t.initial_elapsed_s or 0.0 for t, _ in rows]
        elapsed_rev = [t.revise_elapsed_s or 0.0 for t, _ in rows]
        return {
            "rubric_id": self.rubric_id,
            "task_count": len(rows),
            "reviewers": reviewers,
            "ai_qwk": ai_qwk,
            "ttest_revised_vs_initial": ttest.to_json() if ttest else None,
            "mean_initial_elapsed_s": sum(elapsed) / len(elapsed),
            "mean_revise_elapsed_s": sum(elapsed_rev) / len(elapsed_rev),
        }

    @staticmethod
    def _paired_group_ttest(after: list[float],
                            before: list[float]) -> Optional[TTestResult]:
        if len(after) < 2 or len(before) < 2:
            return None
        if after == before:
            return TTestResult(diff_of_means=0.0, t_statistic=0.0, p_value=1.0,
                               dof=float(len(after) + len(before) - 2))
        try:
            return welch_t_test(after, before)
        except ValueError:
            return None


# -- HTTP layer ------------------------------------------------------------------


class GradeBody(BaseModel):
    essay_id: str
    policy: Optional[dict] = None


class ClaimBody(BaseModel):
    reviewer_id: Optional[str] = None


class InitialBody(BaseModel):
    reviewer_id: Optional[str] = None
    scores: dict
    elapsed_seconds: Optional[float] = None


class ReviewBody(BaseModel):
    reviewer_id: Optional[str] = None
    initial_scores: Optional[dict] = None
    revised_scores: dict
    elapsed_seconds: Optional[float] = None


def create_app(service: GradingService) -> FastAPI:
    app = FastAPI(title="duograder", version="0.1.0")

    @app.exception_handler(ApiError)
    async def api_error_handler(_request: Request, exc: ApiError):
        return JSONResponse(status_code=exc.status_code,
                            content={"detail": exc.detail})

    def actor(request: Request, reviewer_id: Optional[str]) -> str:
        return service.authenticate(request.headers.get("Authorization"),
                                    reviewer_id)

    @app.get("/health")
    def health():
        return {"status": "ok", "events": service.store.state.last_sequence}

    @app.get("/rubric")
    def rubric():
        return {"rubric_id": service.rubric_id, "rubric": service.rubric.to_json()}

    @app.post("/essays")
    def post_essay(body: dict):
        status, essay = service.ingest_essay(body)
        return JSONResponse(status_code=status,
                            content={"essay_id": essay.essay_id})

    @app.get("/essays/{essay_id}")
    def get_essay(essay_id: str):
        return service.get_essay(essay_id).to_json()

    @app.post("/grade")
    def post_grade(body: GradeBody):
        return service.grade(body.essay_id, body.policy)

    @app.get("/gradings/{essay_id}")
    def get_gradings(essay_id: str):
        return service.gradings_for(essay_id)

    @app.get("/queue")
    def get_queue(request: Request):
        params = request.query_params
        max_confidence: Optional[float] = None
        if "max_confidence" in params:
            try:
                max_confidence = float(params["max_confidence"])
            except ValueError:
                raise ApiError(400, f"malformed max_confidence "
                                    f"{params['max_confidence']!r}")
        status = TaskStatus.OPEN
        if "status" in params:
            try:
                status = TaskStatus(params["status"])
            except ValueError:
                raise ApiError(400, f"malformed status {params['status']!r}")
        return service.queue(max_confidence=max_confidence, status=status)

    @app.get("/tasks/{task_id}")
    def get_task(task_id: str):
        return service.task_view(service._task(task_id))

    @app.post("/tasks/{task_id}/claim")
    def post_claim(task_id: str, body: ClaimBody, request: Request):
        return service.claim(task_id, actor(request, body.reviewer_id))

    @app.post("/tasks/{task_id}/release")
    def post_release(task_id: str, body: ClaimBody, request: Request):
        return service.release(task_id, actor(request, body.reviewer_id))

    @app.post("/tasks/{task_id}/initial")
    def post_initial(task_id: str, body: InitialBody, request: Request):
        return service.submit_initial(task_id, actor(request, body.reviewer_id),
                                      body.scores, body.elapsed_seconds)

    @app.post("/tasks/{task_id}/review")
    def post_review(task_id: str, body: ReviewBody, request: Request):
        return service.review(task_id, actor(request, body.reviewer_id),
                              body.revised_scores, body.initial_scores,
                              body.elapsed_seconds)

    @app.get("/reports/cograding")
    def get_cograding():
        return service.cograding_report()

    return app
