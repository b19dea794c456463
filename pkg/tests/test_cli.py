import json

import numpy as np
import pytest

from duograder import cli, corpus
from duograder.corpus import Essay, ScoreVector

from helpers import LiveOpenAIServer, confidence_embedding, total_score_text

ASAP_HEADER = "essay_id\tessay_set\tessay\tdomain1_score\n"


def write_embeddings(path, rows):
    with open(path, "w", encoding="utf-8") as fh:
        for essay_id, vec in rows:
            fh.write(json.dumps({"essay_id": essay_id, "vector": list(vec)}) + "\n")


def synthetic_corpus(tmp_path, n=40, span=5, seed=0, set_id="1"):
    """Essays whose one-hot embeddings encode the gold label."""
    rng = np.random.default_rng(seed)
    essays, rows = [], []
    for i in range(n):
        gold = int(rng.integers(0, span + 1))
        essays.append(Essay(essay_id=f"c{i}", set_id=set_id,
                            text=f"synthetic essay c{i}",
                            gold=ScoreVector(overall=gold)))
        vec = np.zeros(span + 1)
        vec[gold] = 3.0
        rows.append((f"c{i}", vec.tolist()))
    essays_path = tmp_path / "essays.ndjson"
    emb_path = tmp_path / "embeddings.ndjson"
    corpus.write_essays(essays_path, essays)
    write_embeddings(emb_path, rows)
    return essays_path, emb_path


class TestIngest:
    def test_asap_ingest(self, tmp_path, capsys):
        tsv = tmp_path / "asap.tsv"
        tsv.write_text(ASAP_HEADER + "1\t1\tbody text\t8\n2\t1\tmore text\t13\n",
                       encoding="utf-8")
        out = tmp_path / "essays.ndjson"
        code = cli.main(["ingest", "--asap", str(tsv), "--out", str(out)])
        assert code == 0
        assert len(corpus.read_essays(out)) == 1
        captured = capsys.readouterr()
        assert "1 rejected" in captured.out
        assert "score 13 outside" in captured.err

    def test_csee_ingest_strict_failure(self, tmp_path):
        path = tmp_path / "essays.jsonl"
        record = {"format": "csee-v1", "essay_id": "x", "prompt_id": "p",
                  "text": "body", "scores": {"overall": 19, "content": 8,
                                             "language": 8, "structure": 4}}
        path.write_text(json.dumps(record) + "\n", encoding="utf-8")
        out = tmp_path / "out.ndjson"
        code = cli.main(["ingest", "--csee", str(path), "--strict",
                         "--out", str(out)])
        assert code == 1

    def test_missing_file_is_environment_failure(self, tmp_path):
        code = cli.main(["ingest", "--csee", str(tmp_path / "nope.jsonl"),
                         "--out", str(tmp_path / "out.ndjson")])
        assert code == 2


class TestSplit:
    def test_split_files(self, tmp_path):
        essays_path, _ = synthetic_corpus(tmp_path, n=10)
        train, test = tmp_path / "train.ndjson", tmp_path / "test.ndjson"
        code = cli.main(["split", "--in", str(essays_path), "--train", str(train),
                         "--test", str(test), "--fraction", "0.8", "--seed", "42"])
        assert code == 0
        assert len(corpus.read_essays(train)) == 8
        assert len(corpus.read_essays(test)) == 2


class TestTrainFast:
    def test_deterministic_model_files(self, tmp_path):
        essays_path, emb_path = synthetic_corpus(tmp_path)
        out1, out2 = tmp_path / "m1.bin", tmp_path / "m2.bin"
        argv = ["train-fast", "--in", str(essays_path), "--embeddings",
                str(emb_path), "--range", "0", "5", "--seed", "42"]
        assert cli.main(argv + ["--out", str(out1)]) == 0
        assert cli.main(argv + ["--out", str(out2)]) == 0
        assert out1.read_bytes() == out2.read_bytes()

    def test_missing_embedding_is_validation_failure(self, tmp_path):
        essays_path, emb_path = synthetic_corpus(tmp_path, n=5)
        emb_path.write_text("", encoding="utf-8")
        code = cli.main(["train-fast", "--in", str(essays_path), "--embeddings",
                         str(emb_path), "--range", "0", "5",
                         "--out", str(tmp_path / "m.bin")])
        assert code == 1


class TestEvalAndGrade:
    def make_model(self, tmp_path):
        essays_path, emb_path = synthetic_corpus(tmp_path, n=60)
        model_path = tmp_path / "fast.bin"
        assert cli.main(["train-fast", "--in", str(essays_path), "--embeddings",
                         str(emb_path), "--range", "0", "5",
                         "--out", str(model_path)]) == 0
        return essays_path, emb_path, model_path

    def test_eval_prints_qwk_table(self, tmp_path, capsys):
        essays_path, emb_path, model_path = self.make_model(tmp_path)
        code = cli.main(["eval", "--test", str(essays_path), "--model",
                         str(model_path), "--embeddings", str(emb_path),
                         "--rubric", "overall", "--range", "0", "5",
                         "--threshold", "0"])
        assert code == 0
        out = capsys.readouterr().out
        assert "qwk_integrated" in out and "route_count" in out

    def test_eval_json_format(self, tmp_path, capsys):
        essays_path, emb_path, model_path = self.make_model(tmp_path)
        capsys.readouterr()  # drop the train-fast output
        report_path = tmp_path / "report.ndjson"
        code = cli.main(["eval", "--test", str(essays_path), "--model",
                         str(model_path), "--embeddings", str(emb_path),
                         "--rubric", "overall", "--range", "0", "5",
                         "--threshold", "0", "--format", "json",
                         "--out", str(report_path)])
        assert code == 0
        lines = [json.loads(l) for l in capsys.readouterr().out.splitlines() if l]
        assert any(r["metric"] == "qwk_fast" for r in lines)
        assert report_path.exists()

    def test_grade_writes_results(self, tmp_path):
        essays_path, emb_path, model_path = self.make_model(tmp_path)
        out = tmp_path / "results.ndjson"
        code = cli.main(["grade", "--in", str(essays_path), "--model",
                         str(model_path), "--embeddings", str(emb_path),
                         "--rubric", "overall", "--range", "0", "5",
                         "--threshold", "0", "--out", str(out)])
        assert code == 0
        rows = [json.loads(l) for l in out.read_text().splitlines() if l]
        assert len(rows) == 60
        assert all(row["route"] == "Fast" for row in rows)


class TestCrosseval:
    def test_two_set_matrix(self, tmp_path, capsys):
        essays, rows = [], []
        rng = np.random.default_rng(5)
        for set_id, informative in (("3", True), ("4", True)):
            for i in range(30):
                gold = int(rng.integers(0, 4))
                essays.append(Essay(essay_id=f"{set_id}-{i}", set_id=set_id,
                                    text=f"essay {set_id}-{i}",
                                    gold=ScoreVector(overall=gold)))
                vec = np.zeros(4)
                vec[gold] = 2.0
                rows.append((f"{set_id}-{i}", vec.tolist()))
        essays_path = tmp_path / "essays.ndjson"
        emb_path = tmp_path / "emb.ndjson"
        corpus.write_essays(essays_path, essays)
        write_embeddings(emb_path, rows)
        code = cli.main(["crosseval", "--in", str(essays_path), "--embeddings",
                         str(emb_path)])
        assert code == 0
        out = capsys.readouterr().out
        assert "train\\test" in out and "-" in out


class TestAugment:
    def csee_corpus(self, tmp_path, n=3):
        essays = []
        for i in range(n):
            essays.append(Essay(
                essay_id=f"e{i}", set_id="p1", text=f"essay body {i}",
                gold=ScoreVector(overall=16, per_dimension={
                    "Content": 8, "Language": 4, "Structure": 4})))
        path = tmp_path / "essays.ndjson"
        corpus.write_essays(path, essays)
        return path

    @staticmethod
    def response(overall, content, language, structure):
        return json.dumps({
            "content": {"explanation": "solid", "score_point": content},
            "language": {"explanation": "fine", "score_point": language},
            "structure": {"explanation": "clear", "score_point": structure},
            "overall": {"explanation": "good", "score_point": overall},
        })

    def test_faithful_mock_produces_dataset(self, tmp_path):
        essays_path = self.csee_corpus(tmp_path)
        out = tmp_path / "sft.ndjson"
        with LiveOpenAIServer(
                chat_handler=lambda p, i: self.response(16, 8, 4, 4)) as server:
            code = cli.main(["augment", "--in", str(essays_path), "--out",
                             str(out), "--endpoint", server.url,
                             "--cache-dir", str(tmp_path / "cache")])
        assert code == 0
        rows = [json.loads(l) for l in out.read_text().splitlines() if l]
        assert len(rows) == 3
        assert set(rows[0]) == {"instruction", "input", "response"}

    def test_drift_inducing_mock_exits_1(self, tmp_path):
        essays_path = self.csee_corpus(tmp_path)
        out = tmp_path / "sft.ndjson"
        with LiveOpenAIServer(
                chat_handler=lambda p, i: self.response(15, 8, 4, 3)) as server:
            code = cli.main(["augment", "--in", str(essays_path), "--out",
                             str(out), "--endpoint", server.url,
                             "--cache-dir", str(tmp_path / "cache")])
        assert code == 1


class TestConsistency:
    def test_deterministic_endpoint(self, tmp_path, capsys):
        essays_path, _ = synthetic_corpus(tmp_path, n=2)
        with LiveOpenAIServer(
                chat_handler=lambda p, i: total_score_text(3)) as server:
            code = cli.main(["consistency", "--in", str(essays_path),
                             "--rubric", "overall", "--range", "0", "5",
                             "--endpoint", server.url, "--trials", "3",
                             "--cache-dir", str(tmp_path / "cache"),
                             "--format", "json"])
        assert code == 0
        lines = [json.loads(l) for l in capsys.readouterr().out.splitlines() if l]
        mean = [r for r in lines if r["metric"] == "mean_consistency"]
        assert mean[0]["value"] == 1.0


class TestEmbedCommand:
    def test_embed_writes_vectors(self, tmp_path):
        essays_path, _ = synthetic_corpus(tmp_path, n=4)
        out = tmp_path / "vectors.ndjson"
        with LiveOpenAIServer(
                embed_handler=lambda texts: [[float(len(t)), 1.0]
                                             for t in texts]) as server:
            code = cli.main(["embed", "--in", str(essays_path), "--out", str(out),
                             "--endpoint", server.url,
                             "--cache-dir", str(tmp_path / "cache")])
        assert code == 0
        rows = [json.loads(l) for l in out.read_text().splitlines() if l]
        assert len(rows) == 4


class TestUsageErrors:
    def test_unknown_flag_exit_64(self, capsys):
        assert cli.main(["split", "--bogus"]) == 64
        assert "usage" in capsys.readouterr().err

    def test_unknown_command_exit_64(self, capsys):
        assert cli.main(["frobnicate"]) == 64

    def test_no_args_exit_64(self):
        assert cli.main([]) == 64
