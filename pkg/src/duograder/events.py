"""Append-only event log with snapshots; the service's only persistence.

Every state mutation is an EventRecord appended under a single writer lock;
replaying the log from scratch reconstructs identical state. Log records are
length-prefixed and CRC-checked; a torn final record (crash mid-write) is
ignored, anything else failing its checksum raises IntegrityError.
"""

from __future__ import annotations

import json
import struct
import threading
import time
import zlib
from contextlib import contextmanager
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Iterator, Optional, Union

from .corpus import ScoreVector
from .errors import FormatVersionError, IntegrityError

SNAPSHOT_FORMAT = "duograder-snapshot-v1"
_RECORD_HEADER = struct.Struct("<II")  # length, crc32


class EventKind(str, Enum):
    ESSAY_INGESTED = "EssayIngested"
    GRADED = "Graded"
    TASK_OPENED = "TaskOpened"
    TASK_CLAIMED = "TaskClaimed"
    TASK_RELEASED = "TaskReleased"
    TASK_INITIAL_SCORED = "TaskInitialScored"
    TASK_COMPLETED = "TaskCompleted"


@dataclass(frozen=True)
class EventRecord:
    sequence: int
    kind: EventKind
    payload: dict
    timestamp_ms: int

    def to_json(self) -> dict:
        return {"sequence": self.sequence, "kind": self.kind.value,
                "payload": self.payload, "timestamp_ms": self.timestamp_ms}

    @classmethod
    def from_json(cls, obj: dict) -> "EventRecord":
        return cls(sequence=obj["sequence"], kind=EventKind(obj["kind"]),
                   payload=obj["payload"], timestamp_ms=obj["timestamp_ms"])


class TaskStatus(str, Enum):
    OPEN = "Open"
    CLAIMED = "Claimed"
    COMPLETED = "Completed"


@dataclass
class ReviewTask:
    task_id: str
    essay_id: str
    created_at_ms: int
    ai_feedback: dict
    status: TaskStatus = TaskStatus.OPEN
    reviewer_id: Optional[str] = None
    initial_human_scores: Optional[ScoreVector] = None
    revised_human_scores: Optional[ScoreVector] = None
    initial_elapsed_s: Optional[float] = None
    revise_elapsed_s: Optional[float] = None
    completed_at_ms: Optional[int] = None

    @property
    def confidence(self) -> float:
        return float(self.ai_feedback.get("confidence", 0.0))

    def to_json(self) -> dict:
        return {
            "task_id": self.task_id,
            "essay_id": self.essay_id,
            "created_at_ms": self.created_at_ms,
            "ai_feedback": self.ai_feedback,
            "status": self.status.value,
            "reviewer_id": self.reviewer_id,
            "initial_human_scores": (self.initial_human_scores.to_json()
                                     if self.initial_human_scores else None),
            "revised_human_scores": (self.revised_human_scores.to_json()
                                     if self.revised_human_scores else None),
            "initial_elapsed_s": self.initial_elapsed_s,
            "revise_elapsed_s": self.revise_elapsed_s,
            "completed_at_ms": self.completed_at_ms,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ReviewTask":
        return cls(
            task_id=obj["task_id"],
            essay_id=obj["essay_id"],
            created_at_ms=obj["created_at_ms"],
            ai_feedback=obj["ai_feedback"],
            status=TaskStatus(obj["status"]),
            reviewer_id=obj.get("reviewer_id"),
            initial_human_scores=(ScoreVector.from_json(obj["initial_human_scores"])
                                  if obj.get("initial_human_scores") else None),
            revised_human_scores=(ScoreVector.from_json(obj["revised_human_scores"])
                                  if obj.get("revised_human_scores") else None),
            initial_elapsed_s=obj.get("initial_elapsed_s"),
            revise_elapsed_s=obj.get("revise_elapsed_s"),
            completed_at_ms=obj.get("completed_at_ms"),
        )


@dataclass
class ServiceState:
    """Pure fold over the event log; mutations happen only in apply()."""

    essays: dict[str, dict] = field(default_factory=dict)
    gradings: dict[str, list[dict]] = field(default_factory=dict)
    tasks: dict[str, ReviewTask] = field(default_factory=dict)
    last_sequence: int = 0

    def apply(self, event: EventRecord) -> None:
        if event.sequence != self.last_sequence + 1:
            raise IntegrityError(
                f"event sequence gap: got {event.sequence}, "
                f"expected {self.last_sequence + 1}")
        self.last_sequence = event.sequence
        payload = event.payload
        if event.kind is EventKind.ESSAY_INGESTED:
            self.essays[payload["essay"]["essay_id"]] = payload["essay"]
        elif event.kind is EventKind.GRADED:
            self.gradings.setdefault(payload["essay_id"], []).append(payload["result"])
        elif event.kind is EventKind.TASK_OPENED:
            task = ReviewTask(
                task_id=payload["task_id"], essay_id=payload["essay_id"],
                created_at_ms=event.timestamp_ms,
                ai_feedback=payload["ai_feedback"])
            self.tasks[task.task_id] = task
        elif event.kind is EventKind.TASK_CLAIMED:
            task = self.tasks[payload["task_id"]]
            task.status = TaskStatus.CLAIMED
            task.reviewer_id = payload["reviewer_id"]
        elif event.kind is EventKind.TASK_RELEASED:
            task = self.tasks[payload["task_id"]]
            task.status = TaskStatus.OPEN
            task.reviewer_id = None
            task.initial_human_scores = None
            task.initial_elapsed_s = None
        elif event.kind is EventKind.TASK_INITIAL_SCORED:
            task = self.tasks[payload["task_id"]]
            task.initial_human_scores = ScoreVector.from_json(payload["scores"])
            task.initial_elapsed_s = payload.get("elapsed_s")
        elif event.kind is EventKind.TASK_COMPLETED:
            task = self.tasks[payload["task_id"]]
            task.status = TaskStatus.COMPLETED
            task.initial_human_scores = ScoreVector.from_json(payload["initial"])
            task.revised_human_scores = ScoreVector.from_json(payload["revised"])
            task.revise_elapsed_s = payload.get("elapsed_s")
            task.completed_at_ms = event.timestamp_ms
        else:  # pragma: no cover - enum is closed
            raise ValueError(f"unknown event kind {event.kind}")

    def to_json(self) -> dict:
        return {
            "essays": self.essays,
            "gradings": self.gradings,
            "tasks": {tid: t.to_json() for tid, t in sorted(self.tasks.items())},
            "last_sequence": self.last_sequence,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ServiceState":
        state = cls(
            essays=dict(obj.get("essays", {})),
            gradings={k: list(v) for k, v in obj.get("gradings", {}).items()},
            tasks={tid: ReviewTask.from_json(t)
                   for tid, t in obj.get("tasks", {}).items()},
            last_sequence=obj.get("last_sequence", 0),
        )
        return state


class EventLog:
    """Length-prefixed, checksummed, append-only record file."""

    def __init__(self, path: Union[str, Path]):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)

    def append(self, record: EventRecord) -> None:
        body = json.dumps(record.to_json(), ensure_ascii=False).encode("utf-8")
        frame = _RECORD_HEADER.pack(len(body), zlib.crc32(body)) + body
        with open(self.path, "ab") as fh:
            fh.write(frame)
            fh.flush()

    def records(self) -> Iterator[EventRecord]:
        if not self.path.exists():
            return
        blob = self.path.read_bytes()
        offset = 0
        while offset < len(blob):
            if offset + _RECORD_HEADER.size > len(blob):
                break  # torn header from a crashed write
            length, crc = _RECORD_HEADER.unpack_from(blob, offset)
            start = offset + _RECORD_HEADER.size
            if start + length > len(blob):
                break  # torn body
            body = blob[start:start + length]
            if zlib.crc32(body) != crc:
                raise IntegrityError(
                    f"{self.path}: checksum mismatch at byte {offset}")
            yield EventRecord.from_json(json.loads(body.decode("utf-8")))
            offset = start + length


def write_snapshot(path: Union[str, Path], state: ServiceState) -> None:
    obj = {"format": SNAPSHOT_FORMAT, "state": state.to_json()}
    tmp = Path(path).with_suffix(".tmp")
    tmp.write_text(json.dumps(obj, ensure_ascii=False), encoding="utf-8")
    tmp.replace(path)


def read_snapshot(path: Union[str, Path]) -> ServiceState:
    obj = json.loads(Path(path).read_text("utf-8"))
    if obj.get("format") != SNAPSHOT_FORMAT:
        raise FormatVersionError(
            f"{path}: snapshot format {obj.get('format')!r}, "
            f"supported {SNAPSHOT_FORMAT!r}")
    return ServiceState.from_json(obj["state"])


class EventStore:
    """Single-writer store: all mutations under one lock, reads lock-free."""

    def __init__(self, log_path: Union[str, Path],
                 snapshot_path: Optional[Union[str, Path]] = None,
                 clock_ms: Callable[[], int] = lambda: int(time.time() * 1000)):
        self.log = EventLog(log_path)
        self.snapshot_path = Path(snapshot_path) if snapshot_path else None
        self.clock_ms = clock_ms
        self._lock = threading.RLock()
        self.state = ServiceState()
        if self.snapshot_path and self.snapshot_path.exists():
            self.state = read_snapshot(self.snapshot_path)
        for record in self.log.records():
            if record.sequence > self.state.last_sequence:
                self.state.apply(record)

    @contextmanager
    def transaction(self):
        """Hold the writer lock across a check-then-append sequence."""
        with self._lock:
            yield self

    def append(self, kind: EventKind, payload: dict) -> EventRecord:
        with self._lock:
            # canonicalize through the JSON codec: the applied payload is then
            # structurally identical to what a replay will read back, and no
            # caller can mutate state through a retained reference
            payload = json.loads(json.dumps(payload, ensure_ascii=False))
            record = EventRecord(
                sequence=self.state.last_sequence + 1, kind=kind,
                payload=payload, timestamp_ms=self.clock_ms())
            self.log.append(record)
            self.state.apply(record)
            return record

    @property
    def next_sequence(self) -> int:
        return self.state.last_sequence + 1

    def snapshot(self) -> None:
        if self.snapshot_path is None:
            raise ValueError("no snapshot path configured")
        with self._lock:
            write_snapshot(self.snapshot_path, self.state)

    def replay(self) -> ServiceState:
        """Rebuild state purely from the log, ignoring the snapshot."""
        state = ServiceState()
        for record in self.log.records():
            state.apply(record)
        return state
