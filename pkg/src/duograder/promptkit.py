"""Prompt assembly, retrieval-based example selection, instruction-dataset
construction with explanation augmentation, and strict parsing of model output.

Prompt text lives in versioned template files (see ``templates/``) so variants
(e.g. translated instructions) can be swapped in without code changes.
"""

from __future__ import annotations

import ast
import json
import logging
import re
from dataclasses import dataclass, field
from enum import Enum
from importlib import resources
from pathlib import Path
from typing import Optional, Sequence

from .corpus import Essay, EssayPromptSpec, Rubric, ScoreVector
from .errors import ConfigurationError, ParseFailure, ValidationFailure
from .metrics import round_half_away

log = logging.getLogger(__name__)

PLACEHOLDERS = ("{Rubrics}", "{Essay Prompt}", "{Examples}", "{Target Student Essay}",
                "{Output Format}", "{Score Range}", "{Gold Scores}",
                "{Curated Examples}", "{Dimension Clause}")


class PromptKind(str, Enum):
    ZERO_SHOT_NO_RUBRIC = "zero_shot_no_rubric"
    ZERO_SHOT_WITH_RUBRIC = "zero_shot_with_rubric"
    FEW_SHOT_WITH_RUBRIC = "few_shot_with_rubric"
    SFT_INSTRUCTION = "sft_instruction"


@dataclass(frozen=True)
class PromptMode:
    kind: PromptKind
    k: int = 3

    def __post_init__(self):
        if self.k < 1:
            raise ConfigurationError(f"few-shot k must be >= 1, got {self.k}")

    @property
    def needs_rubric(self) -> bool:
        return self.kind is not PromptKind.ZERO_SHOT_NO_RUBRIC

    @property
    def is_few_shot(self) -> bool:
        return self.kind is PromptKind.FEW_SHOT_WITH_RUBRIC


ZERO_SHOT_NO_RUBRIC = PromptMode(PromptKind.ZERO_SHOT_NO_RUBRIC)
ZERO_SHOT_WITH_RUBRIC = PromptMode(PromptKind.ZERO_SHOT_WITH_RUBRIC)
SFT_INSTRUCTION = PromptMode(PromptKind.SFT_INSTRUCTION)


def few_shot(k: int = 3) -> PromptMode:
    return PromptMode(PromptKind.FEW_SHOT_WITH_RUBRIC, k=k)


@dataclass(frozen=True)
class RenderedPrompt:
    system_or_instruction: str
    user_payload: str
    mode: PromptMode
    example_ids: tuple[str, ...] = ()

    @property
    def full_text(self) -> str:
        return self.system_or_instruction + "\n\n" + self.user_payload


@dataclass(frozen=True)
class SftRecord:
    instruction: str
    input: str
    response: str

    def to_json(self) -> dict:
        return {"instruction": self.instruction, "input": self.input,
                "response": self.response}


@dataclass(frozen=True)
class ParsedGrading:
    scores: ScoreVector
    explanations: dict[str, str]
    raw: str
    fractional: tuple[str, ...] = ()


class TemplateRegistry:
    """Read-only set of prompt templates loaded from a directory."""

    def __init__(self, root: Optional[Path] = None):
        if root is None:
            root = Path(str(resources.files("duograder").joinpath("templates")))
        self.root = Path(root)
        self.version = (self.root / "VERSION").read_text("utf-8").strip()
        self._templates = {
            p.stem: p.read_text("utf-8") for p in sorted(self.root.glob("*.txt"))
        }

    def get(self, name: str) -> str:
        try:
            return self._templates[name]
        except KeyError:
            raise ConfigurationError(f"unknown template {name!r} in {self.root}") from None


_default_registry: Optional[TemplateRegistry] = None


def default_registry() -> TemplateRegistry:
    global _default_registry
    if _default_registry is None:
        _default_registry = TemplateRegistry()
    return _default_registry


def _substitute(template: str, values: dict[str, str]) -> str:
    text = template
    for key, value in values.items():
        text = text.replace("{" + key + "}", value)
    leftover = [p for p in PLACEHOLDERS if p in text]
    if leftover:
        raise ConfigurationError(f"unfilled template placeholders: {leftover}")
    return text.strip() + "\n"


def _rubric_text(rubric: Rubric) -> str:
    if rubric.guideline_text.strip():
        return rubric.guideline_text.strip()
    lines = []
    for d in rubric.dimensions:
        lines.append(f"{d.name} Score: integer between {d.min} and {d.max}")
    lo, hi = rubric.overall_range
    lines.append(f"Total Score: integer between {lo} and {hi}"
                 + (" (sum of the dimension scores)" if rubric.sum_constraint else ""))
    return "\n".join(lines)


def _score_label(name: str) -> str:
    return "Total Score" if name == "overall" else f"{name} Score"


def final_evaluation_line(scores: ScoreVector, rubric: Rubric) -> str:
    """The bracketed summary line models are asked to end with."""
    parts = [f"Total Score: {scores.overall}"]
    for d in rubric.dimensions:
        parts.append(f"{d.name} Score: {scores.per_dimension[d.name]}")
    return "[" + ", ".join(parts) + "]"


def _output_format_stanza(rubric: Rubric) -> str:
    sections = []
    for d in rubric.dimensions:
        sections.append(f"Explanations: ...,\n{d.name} Score: ...")
    sections.append("Explanations: ...,\nTotal Score: ...")
    bracket = ", ".join(["Total Score: ..."] + [f"{d.name} Score: ..." for d in rubric.dimensions])
    return ("Please present your evaluation in the following manner:\n\n"
            + "\n\n".join(sections)
            + "\n\nYour final evaluation:\n\n[" + bracket + "]")


def _json_output_format(rubric: Rubric, pinned: Optional[ScoreVector] = None) -> str:
    obj: dict = {}
    for d in rubric.dimensions:
        point = pinned.per_dimension[d.name] if pinned else "..."
        obj[d.name.lower()] = {"explanation": "...", "score_point": point}
    obj["overall"] = {"explanation": "...",
                      "score_point": pinned.overall if pinned else "..."}
    return json.dumps(obj, ensure_ascii=False, indent=1)


def _examples_block(examples: Sequence[tuple[Essay, ScoreVector]], rubric: Rubric) -> str:
    blocks = []
    for i, (essay, scores) in enumerate(examples, start=1):
        blocks.append(f"Example Essay {i}:\n{essay.text}\n"
                      f"Scores: {final_evaluation_line(scores, rubric)}")
    return "\n\n".join(blocks)


PERSONA_SPLIT = "\n\n"


def render_prompt(mode: PromptMode, prompt_spec: EssayPromptSpec, target: Essay,
                  rubric: Optional[Rubric] = None,
                  examples: Optional[Sequence[tuple[Essay, ScoreVector]]] = None,
                  registry: Optional[TemplateRegistry] = None) -> RenderedPrompt:
    """Assemble the grading prompt for one target essay.

    Deterministic: identical inputs yield byte-identical output. The target's
    gold scores are never included.
    """
    reg = registry or default_registry()
    if mode.needs_rubric and rubric is None:
        raise ConfigurationError(f"mode {mode.kind.value} requires a rubric")
    if not mode.needs_rubric and rubric is not None:
        raise ConfigurationError(f"mode {mode.kind.value} does not take a rubric")
    if mode.is_few_shot:
        if examples is None or len(examples) != mode.k:
            raise ConfigurationError(f"few-shot mode requires exactly k={mode.k} examples")
        for ex, _ in examples:
            if ex.essay_id == target.essay_id:
                raise ValueError(f"example {ex.essay_id!r} equals the target essay")
    elif examples:
        raise ConfigurationError(f"mode {mode.kind.value} does not take examples")

    if mode.kind is PromptKind.SFT_INSTRUCTION:
        dims = rubric.dimension_names
        clause = (" based on " + f"{len(dims)} dimensions: " + ", ".join(dims)) if dims else ""
        instruction = _substitute(reg.get("sft_instruction"), {
            "Dimension Clause": clause,
            "Output Format": _json_output_format(rubric),
        })
        payload = _substitute(reg.get("sft_input"), {
            "Rubrics": _rubric_text(rubric),
            "Essay Prompt": prompt_spec.prompt_text or f"(essay set {prompt_spec.set_id})",
            "Target Student Essay": target.text,
        })
        return RenderedPrompt(instruction, payload, mode)

    effective_rubric = rubric if rubric is not None else _range_only(prompt_spec)
    values = {
        "Essay Prompt": prompt_spec.prompt_text or f"(essay set {prompt_spec.set_id})",
        "Target Student Essay": target.text,
        "Output Format": _output_format_stanza(effective_rubric),
    }
    if mode.kind is PromptKind.ZERO_SHOT_NO_RUBRIC:
        lo, hi = prompt_spec.score_range
        values["Score Range"] = f"Assign an integer Total Score between {lo} and {hi}."
        template = reg.get("zero_shot_no_rubric")
    elif mode.kind is PromptKind.ZERO_SHOT_WITH_RUBRIC:
        values["Rubrics"] = _rubric_text(rubric)
        template = reg.get("zero_shot_with_rubric")
    else:
        values["Rubrics"] = _rubric_text(rubric)
        values["Examples"] = _examples_block(examples, rubric)
        template = reg.get("few_shot_with_rubric")
    text = _substitute(template, values)
    persona, _, rest = text.partition(PERSONA_SPLIT)
    example_ids = tuple(ex.essay_id for ex, _ in examples) if examples else ()
    return RenderedPrompt(persona, rest.strip() + "\n", mode, example_ids)


def _range_only(prompt_spec: EssayPromptSpec) -> Rubric:
    return Rubric(dimensions=(), overall_range=prompt_spec.score_range)


def select_examples(target_embedding: Sequence[float],
                    pool: Sequence[tuple[str, Sequence[float]]], k: int,
                    target_id: Optional[str] = None) -> list[str]:
    """Ids of the k pool essays most cosine-similar to the target, descending.

    The target itself (matched by id) is excluded; ties break by ascending id.
    """
    dim = len(target_embedding)
    candidates = []
    for essay_id, vec in pool:
        if target_id is not None and essay_id == target_id:
            continue
        if len(vec) != dim:
            raise ValueError(f"embedding dimension mismatch for {essay_id!r}: "
                             f"{len(vec)} vs {dim}")
        candidates.append((essay_id, vec))
    if len(candidates) < k:
        raise ValueError(f"pool has {len(candidates)} usable entries, need {k}")
    target_norm = _norm(target_embedding)
    scored = [(_cosine(target_embedding, target_norm, vec), essay_id)
              for essay_id, vec in candidates]
    scored.sort(key=lambda item: (-item[0], item[1]))
    return [essay_id for _, essay_id in scored[:k]]


def _norm(vec: Sequence[float]) -> float:
    return sum(x * x for x in vec) ** 0.5


def _cosine(u: Sequence[float], u_norm: float, v: Sequence[float]) -> float:
    v_norm = _norm(v)
    if u_norm == 0.0 or v_norm == 0.0:
        return 0.0
    return sum(a * b for a, b in zip(u, v)) / (u_norm * v_norm)


_BRACKET_RE = re.compile(r"\[([^\[\]]*?(?:Total|Overall)\s+Score[^\[\]]*?)\]",
                         re.IGNORECASE)
_ITEM_RE = re.compile(r"([A-Za-z][A-Za-z ]*?)\s+Score\s*:\s*(-?\d+(?:\.\d+)?)",
                      re.IGNORECASE)
_EXPLANATION_RE = re.compile(
    r"Explanations?\s*:\s*(.*?)\s*(?:,\s*)?\n?\s*([A-Za-z][A-Za-z ]*?)\s+Score\s*:",
    re.IGNORECASE | re.DOTALL)


def parse_grading_output(text: str, rubric: Rubric) -> ParsedGrading:
    """Extract scores (and explanations when present) from raw model text.

    Two grammars are accepted: the bracketed final-evaluation line (the last
    occurrence wins) and the structured JSON record with per-key score_point
    fields. Raises ParseFailure when no scores can be extracted at all and
    ValidationFailure when extracted scores violate the rubric.
    """
    raw_by_name = _parse_bracket_line(text, rubric)
    explanations = {}
    if raw_by_name is None:
        raw_by_name, explanations = _parse_structured(text, rubric)
    else:
        explanations = _collect_explanations(text, rubric)
    if raw_by_name is None:
        raise ParseFailure("no final-evaluation line or structured record found", raw=text)

    required = ["overall"] + [d.name for d in rubric.dimensions]
    missing = [name for name in required if name not in raw_by_name]
    if missing:
        raise ParseFailure(f"scores missing for: {', '.join(missing)}", raw=text)

    fractional = tuple(sorted(name for name, v in raw_by_name.items()
                              if float(v) != int(v)))
    rounded = {name: round_half_away(float(v)) for name, v in raw_by_name.items()}
    scores = ScoreVector(
        overall=rounded["overall"],
        per_dimension={d.name: rounded[d.name] for d in rubric.dimensions},
    )
    problems = rubric.validate(scores)
    if problems:
        raise ValidationFailure("; ".join(problems))
    full_explanations = {d.name: explanations.get(d.name, "") for d in rubric.dimensions}
    full_explanations["overall"] = explanations.get("overall", "")
    return ParsedGrading(scores=scores, explanations=full_explanations, raw=text,
                         fractional=fractional)


def _canonical_name(label: str, rubric: Rubric) -> Optional[str]:
    label = label.strip().lower()
    if label in ("total", "overall"):
        return "overall"
    for d in rubric.dimensions:
        if label == d.name.lower():
            return d.name
    return None


def _parse_bracket_line(text: str, rubric: Rubric) -> Optional[dict[str, float]]:
    matches = _BRACKET_RE.findall(text)
    if not matches:
        return None
    inner = matches[-1]
    found: dict[str, float] = {}
    for label, number in _ITEM_RE.findall(inner):
        name = _canonical_name(label, rubric)
        if name is not None:
            found[name] = float(number)
    return found or None


def _collect_explanations(text: str, rubric: Rubric) -> dict[str, str]:
    explanations: dict[str, str] = {}
    for body, label in _EXPLANATION_RE.findall(text):
        name = _canonical_name(label, rubric)
        if name is not None:
            explanations[name] = body.strip()
    return explanations


def _parse_structured(text: str,
                      rubric: Rubric) -> tuple[Optional[dict[str, float]], dict[str, str]]:
    obj = _extract_object(text)
    keys = {d.name.lower(): d.name for d in rubric.dimensions}
    keys["overall"] = "overall"
    keys["total"] = "overall"
    scores: dict[str, float] = {}
    explanations: dict[str, str] = {}
    if isinstance(obj, dict):
        for key, section in obj.items():
            name = keys.get(str(key).strip().lower())
            if name is None or not isinstance(section, dict):
                continue
            if "score_point" in section:
                try:
                    scores[name] = float(section["score_point"])
                except (TypeError, ValueError):
                    continue
            prose = [str(v) for k, v in section.items()
                     if k not in ("score_point", "score_level") and isinstance(v, str)]
            if prose:
                explanations[name] = " ".join(prose)
    if not scores:
        scores_re = _regex_structured(text, keys)
        if scores_re:
            return scores_re, explanations
        return None, explanations
    return scores, explanations


def _extract_object(text: str):
    start = text.find("{")
    end = text.rfind("}")
    if start < 0 or end <= start:
        return None
    snippet = text[start:end + 1]
    for parser in (json.loads, ast.literal_eval):
        try:
            return parser(snippet)
        except (ValueError, SyntaxError):
            continue
    return None


def _regex_structured(text: str, keys: dict[str, str]) -> Optional[dict[str, float]]:
    # last-resort extraction for almost-JSON output with e.g. ellipses inside
    scores: dict[str, float] = {}
    for key, name in keys.items():
        pattern = re.compile(
            r"[\"']" + re.escape(key) + r"[\"']\s*:\s*\{[^{}]*?"
            r"[\"']score_point[\"']\s*:\s*(-?\d+(?:\.\d+)?)",
            re.IGNORECASE | re.DOTALL)
        m = pattern.search(text)
        if m:
            scores[name] = float(m.group(1))
    return scores or None


@dataclass(frozen=True)
class DriftReportEntry:
    essay_id: str
    gold: ScoreVector
    generated: ScoreVector

    def __str__(self):
        return (f"essay {self.essay_id}: gold {self.gold.to_json()} "
                f"!= generated {self.generated.to_json()}")


class ScoreDrift(ValidationFailure):
    """Generated explanation scores do not equal the gold labels."""

    def __init__(self, entry: DriftReportEntry):
        super().__init__(str(entry))
        self.entry = entry


def build_sft_record(essay: Essay, gold: ScoreVector, explanation: ParsedGrading,
                     prompt_spec: EssayPromptSpec, rubric: Rubric,
                     registry: Optional[TemplateRegistry] = None) -> SftRecord:
    """Turn a gold-scored essay plus generated explanations into one
    instruction/input/response record.

    The explanation's scores must equal the gold labels exactly; augmentation
    must never drift the training labels.
    """
    if explanation.scores != gold:
        raise ScoreDrift(DriftReportEntry(essay.essay_id, gold, explanation.scores))
    prompt = render_prompt(SFT_INSTRUCTION, prompt_spec, essay, rubric=rubric,
                           registry=registry)
    response_obj: dict = {}
    for d in rubric.dimensions:
        response_obj[d.name.lower()] = {
            "explanation": explanation.explanations.get(d.name, ""),
            "score_point": gold.per_dimension[d.name],
        }
    response_obj["overall"] = {
        "explanation": explanation.explanations.get("overall", ""),
        "score_point": gold.overall,
    }
    response = json.dumps(response_obj, ensure_ascii=False, indent=1)
    return SftRecord(instruction=prompt.system_or_instruction,
                     input=prompt.user_payload, response=response)


def build_sft_dataset(items: Sequence[tuple[Essay, ScoreVector, ParsedGrading]],
                      prompt_spec: EssayPromptSpec, rubric: Rubric,
                      registry: Optional[TemplateRegistry] = None
                      ) -> tuple[list[SftRecord], list[DriftReportEntry]]:
    """Batch form: drifting essays are dropped and reported, the rest kept."""
    records, drifts = [], []
    for essay, gold, explanation in items:
        try:
            records.append(build_sft_record(essay, gold, explanation, prompt_spec,
                                            rubric, registry))
        except ScoreDrift as e:
            drifts.append(e.entry)
    return records, drifts


def write_sft_records(path: str | Path, records: Sequence[SftRecord]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_json(), ensure_ascii=False) + "\n")


def build_augmentation_request(essay: Essay, gold: ScoreVector,
                               curated_examples: Sequence[str],
                               prompt_spec: EssayPromptSpec, rubric: Rubric,
                               registry: Optional[TemplateRegistry] = None
                               ) -> RenderedPrompt:
    """Prompt asking the model to justify the given scores, never to re-grade."""
    reg = registry or default_registry()
    if curated_examples:
        curated = ("Expert-written example explanations:\n\n"
                   + "\n\n".join(f"Example {i}:\n{ex}"
                                 for i, ex in enumerate(curated_examples, start=1)))
    else:
        log.warning("no curated example explanations supplied for essay %s; "
                    "using the structured template only", essay.essay_id)
        curated = ""
    text = _substitute(reg.get("augmentation"), {
        "Rubrics": _rubric_text(rubric),
        "Essay Prompt": prompt_spec.prompt_text or f"(essay set {prompt_spec.set_id})",
        "Target Student Essay": essay.text,
        "Gold Scores": final_evaluation_line(gold, rubric),
        "Curated Examples": curated,
        "Output Format": _json_output_format(rubric, pinned=gold),
    })
    persona, _, rest = text.partition(PERSONA_SPLIT)
    return RenderedPrompt(persona, rest.strip() + "\n",
                          PromptMode(PromptKind.SFT_INSTRUCTION))
