#!/usr/bin/env python3
"""Record fixtures for the frontend test suite from the live service.

Produces, under frontend/fixtures/:
  rubric_cases.json  50 score vectors with the server's accept/reject verdict
                     (the client validator must agree on every one)
  blind_flow.json    the full staged review exchange, captured request by
                     request (the blind-stage payloads are what the
                     integrity test scans for AI score fields)
"""

import json
import tempfile
from pathlib import Path

from fastapi.testclient import TestClient

from duograder.corpus import csee_rubric
from duograder.events import EventStore
from duograder.service import GradingService, create_app

FIXTURES = Path(__file__).resolve().parent.parent / "frontend" / "fixtures"


def fresh_service(tmp) -> GradingService:
    store = EventStore(Path(tmp) / "events.log")
    return GradingService(rubric=csee_rubric(), store=store, rubric_id="csee")


def vector(overall, content, language, structure, extra=None, drop=None):
    per_dimension = {"Content": content, "Language": language,
                     "Structure": structure}
    if extra:
        per_dimension.update(extra)
    if drop:
        per_dimension.pop(drop)
    return {"overall": overall, "per_dimension": per_dimension}


def rubric_cases():
    cases = [
        # boundary-valid
        vector(0, 0, 0, 0),
        vector(20, 8, 8, 4),
        vector(16, 8, 4, 4),
        vector(1, 1, 0, 0),
        vector(4, 0, 0, 4),
        vector(12, 4, 4, 4),
        vector(19, 8, 7, 4),
        vector(13, 5, 6, 2),
        vector(8, 8, 0, 0),
        vector(8, 0, 8, 0),
        vector(10, 3, 5, 2),
        vector(17, 6, 7, 4),
        vector(7, 2, 4, 1),
        vector(15, 7, 5, 3),
        vector(18, 8, 6, 4),
        vector(11, 5, 4, 2),
        vector(9, 4, 3, 2),
        vector(14, 6, 5, 3),
        vector(6, 3, 2, 1),
        vector(5, 1, 3, 1),
        vector(2, 1, 1, 0),
        vector(3, 0, 2, 1),
        vector(20, 8, 8, 4),  # duplicate of a valid case on purpose
        vector(16, 4, 8, 4),
        vector(12, 8, 2, 2),
        # bound violations
        vector(21, 9, 8, 4),
        vector(17, 9, 4, 4),
        vector(16, 8, 9, -1),
        vector(16, 8, 4, 5),
        vector(-1, 0, 0, 0),
        vector(21, 8, 8, 4),  # overall beyond range and above the sum
        vector(16, -1, 8, 4),
        vector(12, 4, -2, 4),
        vector(25, 8, 8, 4),
        vector(16, 8, 4, 9),
        # sum-constraint violations (all fields within their own bounds)
        vector(19, 8, 8, 4),
        vector(15, 7, 5, 2),
        vector(0, 1, 0, 0),
        vector(20, 7, 8, 4),
        vector(10, 4, 4, 4),
        vector(18, 8, 8, 4),
        vector(5, 2, 2, 2),
        # shape violations
        vector(16, 8, 4, 4, extra={"Style": 3}),
        vector(12, 4, 4, 4, drop="Structure"),
        vector(16, 8, 4, 4, drop="Content"),
        # non-integer scores
        {"overall": 16.5, "per_dimension": {"Content": 8, "Language": 4.5,
                                            "Structure": 4}},
        {"overall": 16, "per_dimension": {"Content": 4.5, "Language": 7.5,
                                          "Structure": 4}},
        {"overall": 16.0, "per_dimension": {"Content": 8, "Language": 4,
                                            "Structure": 4}},  # integral floats OK
        {"overall": 14, "per_dimension": {"Content": 7.0, "Language": 5.0,
                                          "Structure": 2.0}},
        vector(13, 6, 5, 2),
    ]
    assert len(cases) == 50, len(cases)
    return cases


def export_rubric_cases(client, service):
    """Submit every case through the review-scores endpoint and record the
    server's verdict."""
    service.ingest_essay({
        "format": "csee-v1", "essay_id": "fixture-essay", "prompt_id": "p1",
        "text": "fixture essay body",
        "scores": {"overall": 16, "content": 8, "language": 4, "structure": 4}})
    task_id = service.open_task("fixture-essay", {
        "fast_scores": {"overall": 16, "per_dimension": {
            "Content": 8, "Language": 4, "Structure": 4}},
        "confidence": 0.1})["task_id"]
    assert client.post(f"/tasks/{task_id}/claim",
                       json={"reviewer_id": "fixture"}).status_code == 200

    rows = []
    for case in rubric_cases():
        response = client.post(f"/tasks/{task_id}/initial", json={
            "reviewer_id": "fixture", "scores": case})
        accepted = response.status_code == 200
        rows.append({
            "scores": case,
            "server_accepts": accepted,
            "status": response.status_code,
            "detail": None if accepted else response.json().get("detail"),
        })
        if accepted:
            # release + reclaim wipes the recorded initial so the next case
            # hits the same validation path
            client.post(f"/tasks/{task_id}/release",
                        json={"reviewer_id": "fixture"})
            client.post(f"/tasks/{task_id}/claim",
                        json={"reviewer_id": "fixture"})
    return rows


class RecordingClient:
    """Capture every exchange verbatim for replay in the frontend tests."""

    def __init__(self, client):
        self.client = client
        self.exchanges = []

    def record(self, label, method, path, body=None):
        response = (self.client.get(path) if method == "GET"
                    else self.client.post(path, json=body))
        self.exchanges.append({
            "label": label,
            "method": method,
            "path": path,
            "request_body": body,
            "status": response.status_code,
            "response_body": response.json(),
        })
        return response.json()


def export_blind_flow(client, service):
    service.ingest_essay({
        "format": "csee-v1", "essay_id": "flow-essay", "prompt_id": "p1",
        "text": "A staged-flow essay about perseverance and practice.",
        "scores": {"overall": 16, "content": 8, "language": 4, "structure": 4}})
    task_id = service.open_task("flow-essay", {
        "fast_scores": {"overall": 14, "per_dimension": {
            "Content": 7, "Language": 4, "Structure": 3}},
        "confidence": 0.12,
        "slow_scores": {"overall": 15, "per_dimension": {
            "Content": 7, "Language": 5, "Structure": 3}},
        "explanation": "Content: covers the prompt.\n\nLanguage: a few errors.",
    })["task_id"]

    recorder = RecordingClient(client)
    recorder.record("rubric", "GET", "/rubric")
    recorder.record("queue-blind", "GET", "/queue")
    recorder.record("task-blind", "GET", f"/tasks/{task_id}")
    recorder.record("claim", "POST", f"/tasks/{task_id}/claim",
                    {"reviewer_id": "alice"})
    recorder.record("task-claimed", "GET", f"/tasks/{task_id}")
    recorder.record("initial", "POST", f"/tasks/{task_id}/initial", {
        "reviewer_id": "alice",
        "scores": {"overall": 13, "per_dimension": {
            "Content": 6, "Language": 4, "Structure": 3}},
        "elapsed_seconds": 48.0})
    recorder.record("task-revealed", "GET", f"/tasks/{task_id}")
    recorder.record("review", "POST", f"/tasks/{task_id}/review", {
        "reviewer_id": "alice",
        "revised_scores": {"overall": 15, "per_dimension": {
            "Content": 7, "Language": 5, "Structure": 3}},
        "elapsed_seconds": 21.0})
    recorder.record("task-done", "GET", f"/tasks/{task_id}")
    return {"task_id": task_id, "reveal_after_label": "initial",
            "exchanges": recorder.exchanges}


def main() -> int:
    FIXTURES.mkdir(parents=True, exist_ok=True)
    with tempfile.TemporaryDirectory() as tmp:
        service = fresh_service(tmp)
        client = TestClient(create_app(service))
        cases = export_rubric_cases(client, service)
    with tempfile.TemporaryDirectory() as tmp:
        service = fresh_service(tmp)
        client = TestClient(create_app(service))
        flow = export_blind_flow(client, service)

    (FIXTURES / "rubric_cases.json").write_text(
        json.dumps({"rubric": csee_rubric().to_json(), "cases": cases},
                   indent=1, ensure_ascii=False), encoding="utf-8")
    (FIXTURES / "blind_flow.json").write_text(
        json.dumps(flow, indent=1, ensure_ascii=False), encoding="utf-8")
    accepted = sum(1 for c in cases if c["server_accepts"])
    print(f"rubric_cases.json: {len(cases)} cases ({accepted} accepted)")
    print(f"blind_flow.json: {len(flow['exchanges'])} exchanges")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
