#!/usr/bin/env python3
"""End-to-end demo on synthetic data: train the fast classifier, route a test
set through the confidence gate with a scripted slow grader, and print the
integrated / fast-only / slow-only comparison plus route counts.

No network access: the slow grader and the embedding endpoint are in-process
mocks wired through the real gateway client.
"""

import argparse
import json
import re
import tempfile
from pathlib import Path

import httpx
import numpy as np

from duograder.corpus import Essay, ScoreVector, SplitSpec, overall_only_rubric, split
from duograder.fast import FastTrainConfig, train
from duograder.gateway import Gateway, LlmRequestConfig
from duograder.metrics import MetricRecord, render_metric_table
from duograder.router import DualRouter, FastModelSet, RouterPolicy

SCORE_RANGE = (0, 10)
N_CLASSES = 11
ESSAY_ID_RE = re.compile(r"essay (\S+)")


def synthesize(rng, n):
    """Essays with mixed-quality embeddings: 70% informative, 30% mushy."""
    essays, vectors = [], {}
    for i in range(n):
        gold = int(rng.integers(0, N_CLASSES))
        strong = rng.uniform() < 0.7
        vec = np.zeros(N_CLASSES)
        vec[gold] = 2.2 if strong else 0.55
        vec += rng.normal(0, 0.35 if strong else 0.55, N_CLASSES)
        essay_id = f"syn-{i}"
        essays.append(Essay(essay_id=essay_id, set_id="syn",
                            text=f"essay {essay_id} (synthetic)",
                            gold=ScoreVector(overall=gold)))
        vectors[essay_id] = vec.tolist()
    return essays, vectors


def scripted_endpoint(gold_by_id, vectors, slow_accuracy, rng):
    """An OpenAI-style endpoint: embeddings from the table, slow scores that
    hit the gold label with the requested accuracy."""

    def handle(request: httpx.Request) -> httpx.Response:
        payload = json.loads(request.content)
        if request.url.path.endswith("/embeddings"):
            rows = [{"index": i, "embedding": vectors[ESSAY_ID_RE.search(t)[1]]}
                    for i, t in enumerate(payload["input"])]
            return httpx.Response(200, json={"data": rows})
        text = "\n".join(m["content"] for m in payload["messages"])
        essay_id = ESSAY_ID_RE.search(text)[1]
        gold = gold_by_id[essay_id]
        score = gold if rng.uniform() < slow_accuracy else int(
            np.clip(gold + rng.choice([-1, 1]), *SCORE_RANGE))
        return httpx.Response(200, json={"choices": [{"message": {"content":
            f"Explanations: scripted reasoning.\n\nYour final evaluation:\n"
            f"[Total Score: {score}]"}}]})

    return httpx.MockTransport(handle)


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--essays", type=int, default=1200)
    parser.add_argument("--seed", type=int, default=42)
    parser.add_argument("--threshold", type=float, default=0.2)
    parser.add_argument("--slow-accuracy", type=float, default=0.75)
    args = parser.parse_args()

    rng = np.random.default_rng(args.seed)
    essays, vectors = synthesize(rng, args.essays)
    train_set, test_set = split(essays, SplitSpec(0.8, args.seed))

    model = train([vectors[e.essay_id] for e in train_set],
                  [e.gold.overall for e in train_set],
                  SCORE_RANGE, FastTrainConfig(seed=args.seed))
    meta = model.training_meta
    print(f"fast model: {meta.epochs_run} epochs, final loss {meta.final_loss:.4f}")

    rubric = overall_only_rubric(SCORE_RANGE)
    transport = scripted_endpoint({e.essay_id: e.gold.overall for e in essays},
                                  vectors, args.slow_accuracy,
                                  np.random.default_rng(args.seed + 1))
    with tempfile.TemporaryDirectory() as cache_dir:
        gateway = Gateway(Path(cache_dir), client=httpx.Client(transport=transport))
        config = LlmRequestConfig(endpoint_url="http://scripted/v1",
                                  model_name="scripted", trial_count=1)
        from duograder.corpus import EssayPromptSpec
        router = DualRouter(
            FastModelSet(overall=model), rubric,
            EssayPromptSpec(set_id="syn", prompt_text="Synthetic topic.",
                            essay_type="synthetic", score_range=SCORE_RANGE),
            gateway=gateway, chat_config=config, embed_config=config)
        policy = RouterPolicy(confidence_threshold=args.threshold,
                              escalate_below=0.0)
        report = router.evaluate(test_set, policy,
                                 embeddings=[vectors[e.essay_id]
                                             for e in test_set])

    records = [
        MetricRecord("qwk", report.qwk_integrated["overall"],
                     {"system": "integrated"}),
        MetricRecord("qwk", report.qwk_fast["overall"], {"system": "fast-only"}),
    ]
    if "overall" in report.qwk_slow:
        records.append(MetricRecord("qwk", report.qwk_slow["overall"],
                                    {"system": "slow-where-routed"}))
    records += [MetricRecord("route_count", count, {"route": route})
                for route, count in sorted(report.route_counts.items())]
    print(render_metric_table(records))
    print("\nper-confidence-bucket QWK (fast scores):")
    for i, (count, value) in enumerate(zip(report.buckets.counts,
                                           report.buckets.qwks)):
        lo, hi = report.buckets.edges[i], report.buckets.edges[i + 1]
        shown = "n/a" if value is None else f"{value:.4f}"
        print(f"  [{lo:.1f}, {hi:.1f})  n={count:<5d} qwk={shown}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
