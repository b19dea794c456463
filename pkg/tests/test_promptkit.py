import json
import logging

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from duograder import promptkit
from duograder.corpus import (Essay, EssayPromptSpec, ScoreVector, csee_rubric,
                              overall_only_rubric)
from duograder.errors import ConfigurationError, ParseFailure, ValidationFailure
from duograder.promptkit import (SFT_INSTRUCTION, ZERO_SHOT_NO_RUBRIC,
                                 ZERO_SHOT_WITH_RUBRIC, build_augmentation_request,
                                 build_sft_dataset, build_sft_record, few_shot,
                                 parse_grading_output, render_prompt,
                                 select_examples)

# model output in the running-prose shape: per-dimension explanation blocks
# ending in a bracketed final-evaluation line
PROSE_OUTPUT = """\
Explanations: The student's essay responds accurately to the request for
suggestions, providing thoughtful advice and support.

Content Score: 8

Explanations: There are no language errors; the grammar and spelling are all
accurate.

Language Score: 8

Explanations: The essay is well-structured and organized with smooth and
coherent transitions.

Structure Score: 4

Explanations: This is the sum of the content, language, and structure scores.

Total Score: 20

Your final evaluation:

[Total Score: 20, Content Score: 8, Language Score: 8, Structure Score: 4]
"""

# the structured-record shape: JSON-ish with per-key score_point fields
STRUCTURED_OUTPUT = """\
{
'content':
 {'completeness': 'The essay covers the basic requirements of the prompt.',
  'topic_relevance': 'The essay is related to the given topic.',
  'score_level': 'Level 3',
  'score_point': 8},
'language': {'errors': 'No spelling or grammar errors found.', 'score_point': 8},
'structure': {'organization': 'Clear opening, body, and closing.', 'score_point': 4},
'overall': {'summary': 'An excellent essay overall.', 'score_point': 20}
}
"""


@pytest.fixture
def spec(rubric):
    return EssayPromptSpec(set_id="p1", prompt_text="Reply to Jim's email.",
                           essay_type="email", score_range=rubric.overall_range)


@pytest.fixture
def target():
    return Essay(essay_id="t1", set_id="p1", text="Dear Jim, here is my advice.",
                 gold=ScoreVector(overall=20, per_dimension={
                     "Content": 8, "Language": 8, "Structure": 4}))


def graded_example(essay_id, overall, content, language, structure):
    essay = Essay(essay_id=essay_id, set_id="p1", text=f"example text {essay_id}")
    scores = ScoreVector(overall=overall, per_dimension={
        "Content": content, "Language": language, "Structure": structure})
    return essay, scores


class TestParseGradingOutput:
    def test_prose_shape(self, rubric):
        parsed = parse_grading_output(PROSE_OUTPUT, rubric)
        assert parsed.scores.overall == 20
        assert parsed.scores.per_dimension == {"Content": 8, "Language": 8,
                                               "Structure": 4}
        assert "language errors" in parsed.explanations["Language"]
        assert parsed.fractional == ()

    def test_structured_shape(self, rubric):
        parsed = parse_grading_output(STRUCTURED_OUTPUT, rubric)
        assert parsed.scores.overall == 20
        assert parsed.scores.per_dimension == {"Content": 8, "Language": 8,
                                               "Structure": 4}
        assert "basic requirements" in parsed.explanations["Content"]

    def test_last_bracket_line_wins(self, rubric):
        text = ("[Total Score: 10, Content Score: 4, Language Score: 4, "
                "Structure Score: 2]\nOn reflection I revise my scores.\n"
                "[Total Score: 12, Content Score: 5, Language Score: 5, "
                "Structure Score: 2]")
        parsed = parse_grading_output(text, rubric)
        assert parsed.scores.overall == 12

    def test_fractional_score_rounded_and_flagged(self, rubric):
        text = "[Total Score: 16, Content Score: 4.5, Language Score: 7, Structure Score: 4]"
        parsed = parse_grading_output(text, rubric)
        assert parsed.scores.per_dimension["Content"] == 5
        assert parsed.fractional == ("Content",)

    def test_structured_fractional(self, rubric):
        text = ("{'content': {'score_point': 4.5}, 'language': {'score_point': 7},"
                " 'structure': {'score_point': 4}, 'overall': {'score_point': 16}}")
        parsed = parse_grading_output(text, rubric)
        assert parsed.scores.per_dimension["Content"] == 5
        assert parsed.fractional == ("Content",)

    def test_overall_only_rubric(self):
        rubric = overall_only_rubric((0, 10))
        parsed = parse_grading_output("Your final evaluation: [Total Score: 7]",
                                      rubric)
        assert parsed.scores.overall == 7 and parsed.scores.per_dimension == {}

    def test_sum_violation_is_validation_failure(self, rubric):
        text = "[Total Score: 19, Content Score: 8, Language Score: 8, Structure Score: 4]"
        with pytest.raises(ValidationFailure):
            parse_grading_output(text, rubric)

    def test_range_violation_is_validation_failure(self, rubric):
        text = "[Total Score: 21, Content Score: 9, Language Score: 8, Structure Score: 4]"
        with pytest.raises(ValidationFailure):
            parse_grading_output(text, rubric)

    def test_plain_prose_is_parse_failure(self, rubric):
        with pytest.raises(ParseFailure) as info:
            parse_grading_output("A lovely essay, well done.", rubric)
        assert info.value.raw == "A lovely essay, well done."

    def test_missing_dimension_is_parse_failure(self, rubric):
        with pytest.raises(ParseFailure, match="Structure"):
            parse_grading_output("[Total Score: 16, Content Score: 8, "
                                 "Language Score: 8]", rubric)

    def test_every_dimension_has_explanation_entry(self, rubric):
        text = "[Total Score: 16, Content Score: 8, Language Score: 4, Structure Score: 4]"
        parsed = parse_grading_output(text, rubric)
        assert set(parsed.explanations) == {"Content", "Language", "Structure",
                                            "overall"}


class TestRenderPrompt:
    def test_zero_shot_no_rubric_mentions_range_not_rubric(self, spec, target):
        prompt = render_prompt(ZERO_SHOT_NO_RUBRIC, spec, target)
        assert target.text in prompt.user_payload
        assert "between 0 and 20" in prompt.user_payload
        assert "guidelines for each score" not in prompt.full_text
        assert "Content Dimension" not in prompt.full_text

    def test_zero_shot_with_rubric_embeds_guidelines(self, rubric, spec, target):
        prompt = render_prompt(ZERO_SHOT_WITH_RUBRIC, spec, target, rubric=rubric)
        assert "Content Dimension" in prompt.user_payload
        assert target.text in prompt.user_payload

    def test_few_shot_embeds_k_examples(self, rubric, spec, target):
        examples = [graded_example("e1", 20, 8, 8, 4),
                    graded_example("e2", 10, 4, 4, 2),
                    graded_example("e3", 15, 6, 6, 3)]
        prompt = render_prompt(few_shot(3), spec, target, rubric=rubric,
                               examples=examples)
        assert prompt.example_ids == ("e1", "e2", "e3")
        for essay, scores in examples:
            assert essay.text in prompt.user_payload
            assert f"Total Score: {scores.overall}" in prompt.user_payload

    def test_deterministic(self, rubric, spec, target):
        examples = [graded_example("e1", 20, 8, 8, 4),
                    graded_example("e2", 10, 4, 4, 2),
                    graded_example("e3", 15, 6, 6, 3)]
        first = render_prompt(few_shot(3), spec, target, rubric=rubric,
                              examples=examples)
        second = render_prompt(few_shot(3), spec, target, rubric=rubric,
                               examples=examples)
        assert first == second

    def test_missing_rubric_is_config_error(self, spec, target):
        with pytest.raises(ConfigurationError):
            render_prompt(ZERO_SHOT_WITH_RUBRIC, spec, target)

    def test_example_equal_to_target_rejected(self, rubric, spec, target):
        examples = [(target, target.gold)] + [graded_example("e2", 10, 4, 4, 2),
                                              graded_example("e3", 15, 6, 6, 3)]
        with pytest.raises(ValueError, match="equals the target"):
            render_prompt(few_shot(3), spec, target, rubric=rubric,
                          examples=examples)

    def test_wrong_example_count(self, rubric, spec, target):
        with pytest.raises(ConfigurationError):
            render_prompt(few_shot(3), spec, target, rubric=rubric,
                          examples=[graded_example("e1", 20, 8, 8, 4)])

    def test_gold_never_leaks_into_few_shot_payload(self, rubric, spec):
        # target scored (17,7,7,3); no 17 or the tuple appears in the payload
        target = Essay(essay_id="t2", set_id="p1", text="a target essay body",
                       gold=ScoreVector(overall=17, per_dimension={
                           "Content": 7, "Language": 7, "Structure": 3}))
        examples = [graded_example("e1", 20, 8, 8, 4),
                    graded_example("e2", 10, 4, 4, 2),
                    graded_example("e3", 12, 5, 5, 2)]
        prompt = render_prompt(few_shot(3), spec, target, rubric=rubric,
                               examples=examples)
        assert "17" not in prompt.full_text

    def test_sft_instruction_split(self, rubric, spec, target):
        prompt = render_prompt(SFT_INSTRUCTION, spec, target, rubric=rubric)
        assert "JSON format" in prompt.system_or_instruction
        assert "score_point" in prompt.system_or_instruction
        assert target.text in prompt.user_payload

    def test_k_must_be_positive(self):
        with pytest.raises(ConfigurationError):
            few_shot(0)


class TestSelectExamples:
    def test_identical_vector_ranks_first(self):
        pool = [("a", [1.0, 0.0]), ("b", [0.9, 0.1]), ("c", [0.0, 1.0]),
                ("d", [0.5, 0.5]), ("e", [1.0, 0.0])]
        top = select_examples([1.0, 0.0], pool, k=2)
        assert top[0] in ("a", "e")
        assert set(top) == {"a", "e"}  # both collinear with the target

    def test_orthogonal_pool_falls_to_id_order(self):
        pool = [("c", [0.0, 1.0]), ("a", [0.0, -1.0]), ("b", [0.0, 2.0])]
        assert select_examples([1.0, 0.0], pool, k=3) == ["a", "b", "c"]

    def test_target_id_excluded(self):
        pool = [("t", [1.0, 0.0]), ("a", [0.9, 0.1]), ("b", [0.5, 0.5])]
        assert "t" not in select_examples([1.0, 0.0], pool, k=2, target_id="t")

    def test_pool_too_small_after_exclusion(self):
        pool = [("t", [1.0, 0.0]), ("a", [0.9, 0.1])]
        with pytest.raises(ValueError):
            select_examples([1.0, 0.0], pool, k=2, target_id="t")

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            select_examples([1.0, 0.0], [("a", [1.0, 0.0, 0.0])], k=1)

    def test_matches_exhaustive_sort_oracle(self):
        rng = np.random.default_rng(99)
        for _ in range(50):
            dim = int(rng.integers(2, 8))
            pool = [(f"e{i:02d}", rng.integers(0, 3, size=dim).astype(float).tolist())
                    for i in range(50)]
            target = rng.integers(0, 3, size=dim).astype(float).tolist()
            expected = _oracle_select(target, pool, 3)
            assert select_examples(target, pool, k=3) == expected

    @given(seed=st.integers(0, 1000))
    @settings(max_examples=30, deadline=None)
    def test_pool_order_invariance(self, seed):
        rng = np.random.default_rng(seed)
        pool = [(f"e{i}", rng.integers(0, 2, size=4).astype(float).tolist())
                for i in range(10)]
        target = rng.integers(0, 2, size=4).astype(float).tolist()
        baseline = select_examples(target, pool, k=3)
        shuffled = list(pool)
        rng.shuffle(shuffled)
        assert select_examples(target, shuffled, k=3) == baseline


def _oracle_select(target, pool, k):
    import numpy as np

    t = np.asarray(target)
    rows = []
    for essay_id, vec in pool:
        v = np.asarray(vec)
        denom = np.linalg.norm(t) * np.linalg.norm(v)
        sim = float(t @ v / denom) if denom else 0.0
        rows.append((-sim, essay_id))
    rows.sort()
    return [essay_id for _, essay_id in rows[:k]]


class TestSftRecords:
    def test_round_trip(self, rubric, spec, target):
        parsed = parse_grading_output(PROSE_OUTPUT, rubric)
        record = build_sft_record(target, target.gold, parsed, spec, rubric)
        reparsed = parse_grading_output(record.response, rubric)
        assert reparsed.scores == target.gold
        assert "score_point" in record.response
        assert json.loads(record.response)["content"]["score_point"] == 8

    def test_drift_rejected(self, rubric, spec, target):
        drifted = parse_grading_output(
            "[Total Score: 19, Content Score: 8, Language Score: 7, "
            "Structure Score: 4]", rubric)
        with pytest.raises(promptkit.ScoreDrift) as info:
            build_sft_record(target, target.gold, drifted, spec, rubric)
        assert info.value.entry.essay_id == "t1"
        assert info.value.entry.gold.overall == 20
        assert info.value.entry.generated.overall == 19

    def test_batch_counts(self, rubric, spec):
        items = []
        n, drifts_wanted = 6, 2
        for i in range(n):
            gold = ScoreVector(overall=16, per_dimension={
                "Content": 8, "Language": 4, "Structure": 4})
            essay = Essay(essay_id=f"b{i}", set_id="p1", text=f"essay {i}")
            generated = gold if i >= drifts_wanted else ScoreVector(
                overall=15, per_dimension={"Content": 8, "Language": 4,
                                           "Structure": 3})
            parsed = promptkit.ParsedGrading(
                scores=generated, explanations={}, raw="")
            items.append((essay, gold, parsed))
        records, drifts = build_sft_dataset(items, spec, rubric)
        assert len(records) == n - drifts_wanted
        assert len(drifts) == drifts_wanted

    @given(content=st.integers(0, 8), language=st.integers(0, 8),
           structure=st.integers(0, 4))
    @settings(max_examples=40, deadline=None)
    def test_response_round_trip_property(self, content, language, structure):
        rubric = csee_rubric()
        spec = EssayPromptSpec(set_id="p", prompt_text="topic", essay_type="",
                               score_range=(0, 20))
        gold = ScoreVector(overall=content + language + structure,
                           per_dimension={"Content": content, "Language": language,
                                          "Structure": structure})
        essay = Essay(essay_id="h1", set_id="p", text="hypothesis essay")
        parsed = promptkit.ParsedGrading(scores=gold,
                                         explanations={"Content": "because"},
                                         raw="")
        record = build_sft_record(essay, gold, parsed, spec, rubric)
        assert parse_grading_output(record.response, rubric).scores == gold


class TestAugmentationRequest:
    def test_gold_scores_embedded_verbatim(self, rubric, spec, target):
        prompt = build_augmentation_request(target, target.gold, ["great sample"],
                                            spec, rubric)
        assert ("[Total Score: 20, Content Score: 8, Language Score: 8, "
                "Structure Score: 4]") in prompt.user_payload
        assert "great sample" in prompt.user_payload
        assert '"score_point": 20' in prompt.user_payload

    def test_no_curated_examples_warns(self, rubric, spec, target, caplog):
        with caplog.at_level(logging.WARNING):
            build_augmentation_request(target, target.gold, [], spec, rubric)
        assert any("curated" in r.message for r in caplog.records)

    def test_byte_stable(self, rubric, spec, target):
        first = build_augmentation_request(target, target.gold, [], spec, rubric)
        second = build_augmentation_request(target, target.gold, [], spec, rubric)
        assert first.user_payload == second.user_payload


class TestTemplateRegistry:
    def test_versioned(self):
        registry = promptkit.default_registry()
        assert registry.version == "1"

    def test_unknown_template(self):
        with pytest.raises(ConfigurationError):
            promptkit.default_registry().get("nope")
