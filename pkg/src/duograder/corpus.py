"""Essay data model, corpus ingestion, score validation and train/test splitting.

Two on-disk corpus flavors are supported: ASAP-style TSV exports carrying a
single overall score per essay, and CSEE-style newline-delimited records
carrying four scores (overall plus content/language/structure). Both load into
the same ``Essay`` type; ASAP essays simply have an empty per-dimension map.
"""

from __future__ import annotations

import csv
import json
import random
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Optional

from .errors import ConfigurationError, IngestionError, ValidationFailure

ESSAY_FORMAT = "essay-v1"
CSEE_FORMAT = "csee-v1"


def _strict_int(value) -> int:
    """Accept ints (and integral floats/strings from JSON); reject 4.5 etc."""
    if isinstance(value, bool):
        raise ValueError(f"score {value!r} is not an integer")
    if isinstance(value, int):
        return value
    if isinstance(value, float) and value.is_integer():
        return int(value)
    if isinstance(value, str):
        return int(value.strip())
    raise ValueError(f"score {value!r} is not an integer")


@dataclass(frozen=True)
class ScoreVector:
    """An overall integer score plus optional named dimension scores."""

    overall: int
    per_dimension: dict[str, int] = field(default_factory=dict)

    def to_json(self) -> dict:
        return {"overall": self.overall, "per_dimension": dict(self.per_dimension)}

    @classmethod
    def from_json(cls, obj: dict) -> "ScoreVector":
        return cls(overall=_strict_int(obj["overall"]),
                   per_dimension={k: _strict_int(v)
                                  for k, v in obj.get("per_dimension", {}).items()})


@dataclass(frozen=True)
class RubricDimension:
    name: str
    min: int
    max: int


@dataclass(frozen=True)
class Rubric:
    """Dimension definitions with integer ranges and an optional sum constraint."""

    dimensions: tuple[RubricDimension, ...]
    overall_range: tuple[int, int]
    sum_constraint: bool = False
    guideline_text: str = ""

    def __post_init__(self):
        for dim in self.dimensions:
            if dim.min > dim.max:
                raise ConfigurationError(f"dimension {dim.name!r} has min {dim.min} > max {dim.max}")
        lo, hi = self.overall_range
        if lo > hi:
            raise ConfigurationError(f"overall range has min {lo} > max {hi}")
        if self.sum_constraint:
            want = (sum(d.min for d in self.dimensions), sum(d.max for d in self.dimensions))
            if (lo, hi) != want:
                raise ConfigurationError(
                    f"sum constraint requires overall range {want}, got {(lo, hi)}")

    @property
    def dimension_names(self) -> tuple[str, ...]:
        return tuple(d.name for d in self.dimensions)

    def dimension(self, name: str) -> RubricDimension:
        for d in self.dimensions:
            if d.name == name:
                return d
        raise KeyError(name)

    def validate(self, scores: ScoreVector) -> list[str]:
        """Return a list of violation messages; empty means valid."""
        problems = []
        lo, hi = self.overall_range
        if not lo <= scores.overall <= hi:
            problems.append(f"overall score {scores.overall} outside [{lo},{hi}]")
        for dim in self.dimensions:
            if dim.name not in scores.per_dimension:
                problems.append(f"missing dimension score {dim.name!r}")
                continue
            v = scores.per_dimension[dim.name]
            if not dim.min <= v <= dim.max:
                problems.append(f"{dim.name} score {v} outside [{dim.min},{dim.max}]")
        extra = set(scores.per_dimension) - set(self.dimension_names)
        if extra:
            problems.append(f"unknown dimensions {sorted(extra)}")
        if self.sum_constraint and not problems:
            total = sum(scores.per_dimension[d.name] for d in self.dimensions)
            if total != scores.overall:
                problems.append("overall != " + "+".join(d.name for d in self.dimensions))
        return problems

    def check(self, scores: ScoreVector) -> None:
        problems = self.validate(scores)
        if problems:
            raise ValidationFailure("; ".join(problems))

    def to_json(self) -> dict:
        return {
            "dimensions": [{"name": d.name, "min": d.min, "max": d.max} for d in self.dimensions],
            "overall_range": list(self.overall_range),
            "sum_constraint": self.sum_constraint,
            "guideline_text": self.guideline_text,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "Rubric":
        return cls(
            dimensions=tuple(RubricDimension(d["name"], int(d["min"]), int(d["max"]))
                             for d in obj.get("dimensions", [])),
            overall_range=(int(obj["overall_range"][0]), int(obj["overall_range"][1])),
            sum_constraint=bool(obj.get("sum_constraint", False)),
            guideline_text=obj.get("guideline_text", ""),
        )


CSEE_GUIDELINES = """\
Overall Score (20 points) = Content Score (8 points) + Language Score (8 points) + Structure Score (4 points)

Content Dimension (8 points in total)
- 6-8 points: content is complete with appropriate details; expression is closely related to the topic
- 3-5 points: content is mostly complete; expression is fundamentally related to the topic
- 0-2 points: content is incomplete; expression is barely related or completely unrelated to the topic

Language Dimension (8 points in total)
- 6-8 points: language is accurate with diverse sentence structures and little or no errors
  (2 errors or fewer: 8 points; 3-4 errors: 7 points; 5-6 errors: 6 points); expression mostly appropriate
- 3-5 points: language is not quite accurate, with some variation in sentence structures and several
  errors that do not impede understanding (7-8 errors: 5 points; 9-10 errors: 4 points;
  11-12 errors: 3 points); expression somewhat inappropriate
- 0-2 points: language is hopelessly inaccurate with numerous errors hindering understanding
  (more than 12 errors); expression completely inappropriate

Structure Dimension (4 points in total)
- 3-4 points: clearly and logically structured; smooth and coherent transitions
- 1-2 points: mostly clearly and logically structured; relatively smooth and coherent transitions
- 0-1 points: not clearly and logically structured; fragmented and disconnected structures and sentences
"""


def csee_rubric() -> Rubric:
    """Default four-dimension rubric used by CSEE-style corpora."""
    return Rubric(
        dimensions=(
            RubricDimension("Content", 0, 8),
            RubricDimension("Language", 0, 8),
            RubricDimension("Structure", 0, 4),
        ),
        overall_range=(0, 20),
        sum_constraint=True,
        guideline_text=CSEE_GUIDELINES,
    )


def overall_only_rubric(score_range: tuple[int, int], guideline_text: str = "") -> Rubric:
    """Rubric for single-score corpora: no dimensions, just the overall range."""
    return Rubric(dimensions=(), overall_range=score_range, guideline_text=guideline_text)


@dataclass(frozen=True)
class EssayPromptSpec:
    set_id: str
    prompt_text: str
    essay_type: str
    score_range: tuple[int, int]

    def __post_init__(self):
        lo, hi = self.score_range
        if lo >= hi:
            raise ConfigurationError(f"score range [{lo},{hi}] must have min < max")


@dataclass(frozen=True)
class Essay:
    essay_id: str
    set_id: str
    text: str
    gold: Optional[ScoreVector] = None
    rater_scores: tuple[ScoreVector, ...] = ()

    def __post_init__(self):
        if not self.text.strip():
            raise ValidationFailure(f"essay {self.essay_id!r} has empty text")

    def to_json(self) -> dict:
        return {
            "format": ESSAY_FORMAT,
            "essay_id": self.essay_id,
            "set_id": self.set_id,
            "text": self.text,
            "gold": self.gold.to_json() if self.gold else None,
            "rater_scores": [r.to_json() for r in self.rater_scores],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "Essay":
        return cls(
            essay_id=str(obj["essay_id"]),
            set_id=str(obj["set_id"]),
            text=obj["text"],
            gold=ScoreVector.from_json(obj["gold"]) if obj.get("gold") else None,
            rater_scores=tuple(ScoreVector.from_json(r) for r in obj.get("rater_scores", [])),
        )


@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float = 0.8
    seed: int = 42


@dataclass(frozen=True)
class RowError:
    line_no: int
    essay_id: Optional[str]
    message: str

    def __str__(self):
        who = f" essay {self.essay_id}" if self.essay_id else ""
        return f"line {self.line_no}{who}: {self.message}"


@dataclass
class IngestResult:
    essays: list[Essay]
    errors: list[RowError]
    prompt_specs: dict[str, EssayPromptSpec] = field(default_factory=dict)


def normalize_text(text: str) -> str:
    """Whitespace normalization only: unify newlines, strip outer blanks."""
    return text.replace("\r\n", "\n").replace("\r", "\n").strip()


def builtin_asap_sets() -> dict[str, EssayPromptSpec]:
    """Per-set score ranges shipped as package data; users may load their own."""
    payload = resources.files("duograder").joinpath("data/asap_sets.json").read_text("utf-8")
    return _parse_set_table(json.loads(payload))


def load_set_table(path: str | Path) -> dict[str, EssayPromptSpec]:
    return _parse_set_table(json.loads(Path(path).read_text("utf-8")))


def _parse_set_table(obj: dict) -> dict[str, EssayPromptSpec]:
    if obj.get("format") != "asap-sets-v1":
        raise IngestionError("set table missing 'format': 'asap-sets-v1' marker")
    table = {}
    for row in obj["sets"]:
        spec = EssayPromptSpec(
            set_id=str(row["set_id"]),
            prompt_text=row.get("prompt_text", ""),
            essay_type=row.get("essay_type", ""),
            score_range=(int(row["min"]), int(row["max"])),
        )
        table[spec.set_id] = spec
    return table


ASAP_REQUIRED_COLUMNS = ("essay_id", "essay_set", "essay", "domain1_score")


def load_asap(path: str | Path, set_filter: Optional[str] = None, strict: bool = False,
              set_table: Optional[dict[str, EssayPromptSpec]] = None) -> IngestResult:
    """Read an ASAP-style TSV export.

    Rows failing validation are skipped and reported in ``result.errors``
    unless ``strict`` is set, in which case the first failure aborts.
    """
    table = set_table or builtin_asap_sets()
    result = IngestResult(essays=[], errors=[], prompt_specs=table)
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh, delimiter="\t")
        header = reader.fieldnames or []
        missing = [c for c in ASAP_REQUIRED_COLUMNS if c not in header]
        if missing:
            raise IngestionError(f"missing required column(s): {', '.join(missing)}")
        for line_no, row in enumerate(reader, start=2):
            err = _ingest_asap_row(row, line_no, table, set_filter, result)
            if err and strict:
                raise ValidationFailure(str(err))
    return result


def _ingest_asap_row(row: dict, line_no: int, table: dict[str, EssayPromptSpec],
                     set_filter: Optional[str], result: IngestResult) -> Optional[RowError]:
    essay_id = (row.get("essay_id") or "").strip()

    def reject(message: str) -> RowError:
        err = RowError(line_no, essay_id or None, message)
        result.errors.append(err)
        return err

    set_id = (row.get("essay_set") or "").strip()
    if set_filter is not None and set_id != str(set_filter):
        return None
    if not essay_id:
        return reject("empty essay_id")
    spec = table.get(set_id)
    if spec is None:
        return reject(f"unknown essay_set {set_id!r}")
    text = normalize_text(row.get("essay") or "")
    if not text:
        return reject("empty essay text")
    try:
        score = int(row["domain1_score"])
    except (TypeError, ValueError):
        return reject(f"domain1_score {row.get('domain1_score')!r} is not an integer")
    lo, hi = spec.score_range
    if not lo <= score <= hi:
        return reject(f"score {score} outside [{lo},{hi}]")
    raters = []
    for col in ("rater1_domain1", "rater2_domain1"):
        raw = (row.get(col) or "").strip()
        if raw:
            try:
                raters.append(ScoreVector(overall=int(raw)))
            except ValueError:
                return reject(f"{col} {raw!r} is not an integer")
    result.essays.append(Essay(
        essay_id=essay_id, set_id=set_id, text=text,
        gold=ScoreVector(overall=score), rater_scores=tuple(raters),
    ))
    return None


def load_csee(path: str | Path, strict: bool = False,
              rubric: Optional[Rubric] = None) -> IngestResult:
    """Read a CSEE-style newline-delimited record file (one JSON object per line)."""
    rub = rubric or csee_rubric()
    result = IngestResult(essays=[], errors=[])
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            err = _ingest_csee_record(line, line_no, rub, result)
            if err and strict:
                raise ValidationFailure(str(err))
    return result


def _ingest_csee_record(line: str, line_no: int, rubric: Rubric,
                        result: IngestResult) -> Optional[RowError]:
    def reject(essay_id: Optional[str], message: str) -> RowError:
        err = RowError(line_no, essay_id, message)
        result.errors.append(err)
        return err

    try:
        obj = json.loads(line)
    except json.JSONDecodeError as e:
        return reject(None, f"invalid JSON: {e}")
    if obj.get("format") != CSEE_FORMAT:
        return reject(None, f"missing 'format': '{CSEE_FORMAT}' marker")
    essay_id = str(obj.get("essay_id", "")).strip()
    if not essay_id:
        return reject(None, "empty essay_id")
    text = normalize_text(obj.get("text") or "")
    if not text:
        return reject(essay_id, "empty essay text")
    scores = obj.get("scores")
    if not isinstance(scores, dict):
        return reject(essay_id, "missing scores object")
    try:
        vector = ScoreVector(
            overall=_strict_int(scores["overall"]),
            per_dimension={
                "Content": _strict_int(scores["content"]),
                "Language": _strict_int(scores["language"]),
                "Structure": _strict_int(scores["structure"]),
            },
        )
    except (KeyError, TypeError, ValueError) as e:
        return reject(essay_id, f"bad scores object: {e}")
    problems = rubric.validate(vector)
    if problems:
        return reject(essay_id, "; ".join(problems))
    result.essays.append(Essay(
        essay_id=essay_id, set_id=str(obj.get("prompt_id", "")), text=text, gold=vector,
    ))
    return None


def split(essays: list[Essay], spec: SplitSpec = SplitSpec()) -> tuple[list[Essay], list[Essay]]:
    """Seed-deterministic partition; train takes floor(n * fraction), rest is test."""
    if not 0 < spec.train_fraction < 1:
        raise ConfigurationError(f"train_fraction {spec.train_fraction} not in (0,1)")
    if not essays:
        raise ValueError("cannot split an empty collection")
    order = list(range(len(essays)))
    random.Random(spec.seed).shuffle(order)
    n_train = int(len(essays) * spec.train_fraction)
    train_idx = sorted(order[:n_train])
    test_idx = sorted(order[n_train:])
    return [essays[i] for i in train_idx], [essays[i] for i in test_idx]


def score_to_class(score: int, score_range: tuple[int, int]) -> int:
    lo, hi = score_range
    if not lo <= score <= hi:
        raise ValueError(f"score {score} outside [{lo},{hi}]")
    return score - lo


def class_to_score(cls_index: int, score_range: tuple[int, int]) -> int:
    lo, hi = score_range
    if not 0 <= cls_index <= hi - lo:
        raise ValueError(f"class {cls_index} outside [0,{hi - lo}]")
    return cls_index + lo


def class_count(score_range: tuple[int, int]) -> int:
    lo, hi = score_range
    return hi - lo + 1


def write_essays(path: str | Path, essays: Iterable[Essay]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for essay in essays:
            fh.write(json.dumps(essay.to_json(), ensure_ascii=False) + "\n")


def read_essays(path: str | Path) -> list[Essay]:
    essays = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            if obj.get("format") != ESSAY_FORMAT:
                raise IngestionError(f"line {line_no}: not an '{ESSAY_FORMAT}' record")
            essays.append(Essay.from_json(obj))
    return essays
