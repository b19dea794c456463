"""Operator CLI driving every offline workflow plus the HTTP service.

Exit codes: 0 success, 1 validation failure, 2 environment failure,
64 usage error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Optional, Sequence

from . import corpus, fast as fastmod, promptkit
from .corpus import Essay, SplitSpec, csee_rubric, overall_only_rubric
from .errors import (ConfigurationError, DuograderError, GatewayUnavailable,
                     IngestionError, ParseFailure, RequestRejected,
                     SlowGradingFailure, ValidationFailure)
from .gateway import Gateway, LlmRequestConfig
from .metrics import MetricRecord, render_metric_table, write_metric_records
from .router import (DualRouter, FastModelSet, LabeledSet, RouterPolicy, crosseval,
                     write_results)

EX_OK = 0
EX_VALIDATION = 1
EX_ENVIRONMENT = 2
EX_USAGE = 64


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(EX_USAGE)


def _read_embeddings(path: str) -> dict[str, list[float]]:
    vectors = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                obj = json.loads(line)
                vectors[str(obj["essay_id"])] = [float(x) for x in obj["vector"]]
    return vectors


def _write_embeddings(path: str, rows: Sequence[tuple[str, Sequence[float]]]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for essay_id, vector in rows:
            fh.write(json.dumps({"essay_id": essay_id, "vector": list(vector)}) + "\n")


def _aligned_embeddings(essays: Sequence[Essay], path: str) -> list[list[float]]:
    table = _read_embeddings(path)
    missing = [e.essay_id for e in essays if e.essay_id not in table]
    if missing:
        raise ValidationFailure(
            f"{len(missing)} essays lack embeddings (first: {missing[:3]})")
    return [table[e.essay_id] for e in essays]


def _rubric_for(args) -> tuple:
    if getattr(args, "rubric", "csee") == "csee":
        return csee_rubric(), "csee"
    lo, hi = (int(x) for x in args.range)
    return overall_only_rubric((lo, hi)), f"overall[{lo},{hi}]"


def _gateway(args) -> tuple[Gateway, LlmRequestConfig]:
    config = LlmRequestConfig(
        endpoint_url=args.endpoint, model_name=args.model_name,
        temperature=args.temperature, trial_count=args.trials,
        timeout=args.timeout)
    return Gateway(args.cache_dir), config


def _emit(args, records: list[MetricRecord]) -> None:
    if args.format == "json":
        for rec in records:
            print(json.dumps(rec.to_json(), ensure_ascii=False))
    else:
        print(render_metric_table(records))
    if getattr(args, "out", None):
        write_metric_records(args.out, records)


# -- subcommands -----------------------------------------------------------------


def cmd_ingest(args) -> int:
    if args.asap:
        table = corpus.load_set_table(args.set_table) if args.set_table else None
        result = corpus.load_asap(args.asap, set_filter=args.set,
                                  strict=args.strict, set_table=table)
    else:
        result = corpus.load_csee(args.csee, strict=args.strict)
    for err in result.errors:
        print(f"skipped: {err}", file=sys.stderr)
    corpus.write_essays(args.out, result.essays)
    print(f"ingested {len(result.essays)} essays "
          f"({len(result.errors)} rejected) -> {args.out}")
    return EX_OK


def cmd_split(args) -> int:
    essays = corpus.read_essays(getattr(args, "in"))
    train, test = corpus.split(essays, SplitSpec(args.fraction, args.seed))
    corpus.write_essays(args.train, train)
    corpus.write_essays(args.test, test)
    print(f"split {len(essays)} essays -> {len(train)} train / {len(test)} test")
    return EX_OK


def cmd_embed(args) -> int:
    essays = corpus.read_essays(getattr(args, "in"))
    gateway, config = _gateway(args)
    vectors = gateway.embed(config, [e.text for e in essays])
    _write_embeddings(args.out, list(zip((e.essay_id for e in essays), vectors)))
    print(f"embedded {len(essays)} essays -> {args.out}")
    return EX_OK


def cmd_augment(args) -> int:
    rubric, _ = _rubric_for(args)
    essays = [e for e in corpus.read_essays(getattr(args, "in")) if e.gold is not None]
    if not essays:
        raise ValidationFailure("no essays with gold scores to augment")
    gateway, config = _gateway(args)
    curated = [Path(p).read_text("utf-8").strip() for p in args.curated or []]
    prompt_spec = corpus.EssayPromptSpec(
        set_id=essays[0].set_id or "default", prompt_text=args.prompt_text or "",
        essay_type="", score_range=rubric.overall_range)
    items = []
    failures = 0
    for essay in essays:
        request = promptkit.build_augmentation_request(
            essay, essay.gold, curated, prompt_spec, rubric)
        try:
            text = gateway.chat(config, request)
            parsed = promptkit.parse_grading_output(text, rubric)
        except (ParseFailure, ValidationFailure) as e:
            print(f"unusable explanation for {essay.essay_id}: {e}", file=sys.stderr)
            failures += 1
            continue
        items.append((essay, essay.gold, parsed))
    records, drifts = promptkit.build_sft_dataset(items, prompt_spec, rubric)
    promptkit.write_sft_records(args.out, records)
    for entry in drifts:
        print(f"drift: {entry}", file=sys.stderr)
    print(f"wrote {len(records)} records -> {args.out} "
          f"({len(drifts)} drifted, {failures} unusable)")
    if drifts or failures:
        return EX_VALIDATION
    return EX_OK


def cmd_train_fast(args) -> int:
    essays = [e for e in corpus.read_essays(getattr(args, "in")) if e.gold is not None]
    if not essays:
        raise ValidationFailure("no essays with gold scores to train on")
    embeddings = _aligned_embeddings(essays, args.embeddings)
    lo, hi = (int(x) for x in args.range)
    if args.dimension:
        labels = [corpus.score_to_class(e.gold.per_dimension[args.dimension], (lo, hi))
                  for e in essays]
    else:
        labels = [corpus.score_to_class(e.gold.overall, (lo, hi)) for e in essays]
    config = fastmod.FastTrainConfig(
        learning_rate=args.learning_rate, epochs=args.epochs,
        batch_size=args.batch_size, seed=args.seed,
        early_stop_patience=args.patience,
        validation_fraction=args.validation_fraction)
    model = fastmod.train(embeddings, labels, (lo, hi), config)
    fastmod.save(model, args.out)
    meta = model.training_meta
    print(f"trained on {len(essays)} essays, {meta.epochs_run} epochs, "
          f"final loss {meta.final_loss:.4f} -> {args.out}")
    return EX_OK


def _policy_from(args) -> RouterPolicy:
    return RouterPolicy(
        confidence_threshold=args.threshold,
        slow_enabled=bool(args.endpoint) and not args.no_slow,
        escalate_enabled=not args.no_escalate,
        force_slow=args.force_slow,
        escalate_below=args.escalate_below)


def _router_from(args, rubric) -> DualRouter:
    models = FastModelSet(
        overall=fastmod.load(args.model),
        dimensions={name: fastmod.load(path)
                    for name, path in (pair.split("=", 1)
                                       for pair in args.dim_model or [])})
    prompt_spec = corpus.EssayPromptSpec(
        set_id="default", prompt_text=args.prompt_text or "", essay_type="",
        score_range=rubric.overall_range)
    gateway = chat_config = embed_config = None
    if args.endpoint:
        gateway = Gateway(args.cache_dir)
        chat_config = LlmRequestConfig(
            endpoint_url=args.endpoint, model_name=args.model_name,
            temperature=args.temperature, trial_count=args.trials,
            timeout=args.timeout)
        embed_config = chat_config
    return DualRouter(models, rubric, prompt_spec, gateway=gateway,
                      chat_config=chat_config, embed_config=embed_config)


def cmd_grade(args) -> int:
    rubric, _ = _rubric_for(args)
    essays = corpus.read_essays(getattr(args, "in"))
    router = _router_from(args, rubric)
    embeddings = _aligned_embeddings(essays, args.embeddings)
    results, summary = router.grade_batch(essays, _policy_from(args),
                                          embeddings=embeddings)
    write_results(args.out, [r for r in results if r is not None])
    print(f"graded {len(essays)} essays -> {args.out}")
    print(f"routes: {summary.route_counts}")
    for essay_id, error in summary.failures:
        print(f"failed: {essay_id}: {error}", file=sys.stderr)
    return EX_VALIDATION if summary.failures else EX_OK


def cmd_eval(args) -> int:
    rubric, _ = _rubric_for(args)
    essays = corpus.read_essays(args.test)
    router = _router_from(args, rubric)
    embeddings = _aligned_embeddings(essays, args.embeddings)
    report = router.evaluate(essays, _policy_from(args), embeddings=embeddings)
    records = [MetricRecord("qwk_integrated", value, {"dimension": dim})
               for dim, value in report.qwk_integrated.items()]
    records += [MetricRecord("qwk_fast", value, {"dimension": dim})
                for dim, value in report.qwk_fast.items()]
    records += [MetricRecord("qwk_slow", value, {"dimension": dim})
                for dim, value in report.qwk_slow.items()]
    records += [MetricRecord("route_count", count, {"route": route})
                for route, count in sorted(report.route_counts.items())]
    for i, (count, value) in enumerate(zip(report.buckets.counts,
                                           report.buckets.qwks)):
        lo, hi = report.buckets.edges[i], report.buckets.edges[i + 1]
        records.append(MetricRecord(
            "bucket_qwk", value, {"bucket": f"[{lo},{hi})", "count": count}))
    _emit(args, records)
    return EX_OK


def cmd_crosseval(args) -> int:
    essays = [e for e in corpus.read_essays(getattr(args, "in"))
              if e.gold is not None]
    table = (corpus.load_set_table(args.set_table) if args.set_table
             else corpus.builtin_asap_sets())
    vectors = _read_embeddings(args.embeddings)
    by_set: dict[str, list[Essay]] = {}
    for essay in essays:
        by_set.setdefault(essay.set_id, []).append(essay)
    if len(by_set) < 2:
        raise ValidationFailure("cross-set evaluation needs essays from >= 2 sets")
    sets = {}
    for set_id, items in sorted(by_set.items()):
        spec = table.get(set_id)
        if spec is None:
            raise ValidationFailure(f"set {set_id!r} missing from the set table")
        sets[set_id] = LabeledSet(
            essays=tuple(items),
            embeddings=tuple(tuple(vectors[e.essay_id]) for e in items),
            score_range=spec.score_range)
    matrix = crosseval(sets)
    if args.format == "json":
        print(json.dumps(matrix.to_json(), ensure_ascii=False))
    else:
        print(matrix.render_text())
    if args.out:
        records = []
        for i, train_id in enumerate(matrix.set_ids):
            for j, test_id in enumerate(matrix.set_ids):
                value = matrix.values[i][j]
                if value is not None:
                    records.append(MetricRecord(
                        "crosseval_qwk", value,
                        {"train_set": train_id, "test_set": test_id}))
        write_metric_records(args.out, records)
    return EX_OK


def cmd_consistency(args) -> int:
    rubric, _ = _rubric_for(args)
    essays = corpus.read_essays(getattr(args, "in"))
    if not essays:
        raise ValidationFailure("no essays to grade")
    gateway, config = _gateway(args)
    prompt_spec = corpus.EssayPromptSpec(
        set_id=essays[0].set_id or "default", prompt_text=args.prompt_text or "",
        essay_type="", score_range=rubric.overall_range)
    fractions = []
    records = []
    for essay in essays:
        prompt = promptkit.render_prompt(promptkit.SFT_INSTRUCTION, prompt_spec,
                                         essay, rubric=rubric)
        outcome = gateway.chat_trials(config, prompt, rubric)
        fractions.append(outcome.fraction_unchanged)
        records.append(MetricRecord(
            "trial_consistency", outcome.fraction_unchanged,
            {"essay_id": essay.essay_id, "final": outcome.final.overall}))
    records.append(MetricRecord("mean_consistency",
                                sum(fractions) / len(fractions), {}))
    _emit(args, records)
    return EX_OK


def cmd_serve(args) -> int:
    import uvicorn

    from .config import build_service, load_config
    from .service import create_app

    config = load_config(args.config)
    app = create_app(build_service(config))
    uvicorn.run(app, host=args.host or config.host, port=args.port or config.port)
    return EX_OK


# -- wiring ------------------------------------------------------------------------


def _add_gateway_args(p, required: bool = True) -> None:
    p.add_argument("--endpoint", required=required,
                   help="OpenAI-compatible base URL (or GATEWAY_BASE_URL)")
    p.add_argument("--model-name", default="grader")
    p.add_argument("--temperature", type=float, default=0.0)
    p.add_argument("--trials", type=int, default=3)
    p.add_argument("--timeout", type=float, default=60.0)
    p.add_argument("--cache-dir", default=".cache/llm")


def _add_rubric_args(p) -> None:
    p.add_argument("--rubric", choices=["csee", "overall"], default="csee")
    p.add_argument("--range", nargs=2, metavar=("LO", "HI"), default=("0", "20"),
                   help="overall score range when --rubric overall")


def _add_format_args(p) -> None:
    p.add_argument("--format", choices=["json", "table"], default="table")
    p.add_argument("--out", help="also write metric records to this file")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="duograder",
                     description="dual-path essay grading toolkit")
    sub = parser.add_subparsers(dest="command", required=True,
                                parser_class=_Parser)

    p = sub.add_parser("ingest", help="read a corpus file into essay records")
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--asap", help="ASAP-style TSV export")
    group.add_argument("--csee", help="CSEE-style newline-delimited records")
    p.add_argument("--set", help="keep only this essay set (ASAP)")
    p.add_argument("--set-table", help="custom set range table (JSON)")
    p.add_argument("--strict", action="store_true",
                   help="abort on the first invalid row")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("split", help="deterministic train/test partition")
    p.add_argument("--in", required=True)
    p.add_argument("--train", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--fraction", type=float, default=0.8)
    p.add_argument("--seed", type=int, default=42)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("embed", help="fetch embeddings for every essay")
    p.add_argument("--in", required=True)
    p.add_argument("--out", required=True)
    _add_gateway_args(p)
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("augment",
                       help="build the explanation-augmented instruction dataset")
    p.add_argument("--in", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--curated", action="append",
                   help="file with one expert-written example explanation")
    p.add_argument("--prompt-text", default="")
    _add_rubric_args(p)
    _add_gateway_args(p)
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("train-fast", help="train the embedding classifier")
    p.add_argument("--in", required=True)
    p.add_argument("--embeddings", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--range", nargs=2, metavar=("LO", "HI"), required=True)
    p.add_argument("--dimension", help="train on this dimension instead of overall")
    p.add_argument("--learning-rate", type=float, default=0.01)
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--patience", type=int, default=5)
    p.add_argument("--validation-fraction", type=float, default=0.1)
    p.set_defaults(func=cmd_train_fast)

    for name, func, essay_flag in (("grade", cmd_grade, "--in"),
                                   ("eval", cmd_eval, "--test")):
        p = sub.add_parser(name)
        p.add_argument(essay_flag, required=True)
        p.add_argument("--model", required=True, help="overall fast model file")
        p.add_argument("--dim-model", action="append",
                       metavar="NAME=PATH", help="per-dimension fast model")
        p.add_argument("--embeddings", required=True)
        p.add_argument("--prompt-text", default="")
        p.add_argument("--threshold", type=float, default=0.2)
        p.add_argument("--escalate-below", type=float, default=0.1)
        p.add_argument("--no-slow", action="store_true")
        p.add_argument("--no-escalate", action="store_true")
        p.add_argument("--force-slow", action="store_true")
        _add_rubric_args(p)
        _add_gateway_args(p, required=False)
        if name == "grade":
            p.add_argument("--out", required=True)
        else:
            _add_format_args(p)
        p.set_defaults(func=func)

    p = sub.add_parser("crosseval", help="train-on-one, test-on-rest matrix")
    p.add_argument("--in", required=True, help="essays from >= 2 sets")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--set-table", help="set range table (default: built-in)")
    _add_format_args(p)
    p.set_defaults(func=cmd_crosseval)

    p = sub.add_parser("consistency", help="repeated-trial agreement per essay")
    p.add_argument("--in", required=True)
    p.add_argument("--prompt-text", default="")
    _add_rubric_args(p)
    _add_gateway_args(p)
    _add_format_args(p)
    p.set_defaults(func=cmd_consistency)

    p = sub.add_parser("serve", help="run the grading + review HTTP service")
    p.add_argument("--config", required=True)
    p.add_argument("--host")
    p.add_argument("--port", type=int)
    p.set_defaults(func=cmd_serve)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else EX_USAGE
    try:
        return args.func(args)
    except (ValidationFailure, ParseFailure, IngestionError,
            ConfigurationError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EX_VALIDATION
    except (GatewayUnavailable, RequestRejected, SlowGradingFailure) as e:
        print(f"error: {e}", file=sys.stderr)
        return EX_ENVIRONMENT
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EX_ENVIRONMENT
    except DuograderError as e:
        print(f"error: {e}", file=sys.stderr)
        return EX_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
