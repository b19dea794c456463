"""Shared test machinery: an in-process OpenAI-style endpoint mock and
synthetic essay/embedding builders with controllable fast-path confidence."""

from __future__ import annotations

import json
import math
import re
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import httpx
import numpy as np

from duograder.corpus import Essay, EssayPromptSpec, Rubric, ScoreVector, overall_only_rubric
from duograder.fast import FastModel
from duograder.gateway import Gateway, LlmRequestConfig


class OpenAIMock:
    """MockTransport endpoint speaking the chat/embeddings wire format.

    chat_handler(payload, call_index) -> completion text or httpx.Response.
    embed_handler(texts) -> list of vectors.
    """

    def __init__(self, chat_handler=None, embed_handler=None):
        self.chat_handler = chat_handler
        self.embed_handler = embed_handler
        self.chat_requests: list[dict] = []
        self.embed_requests: list[dict] = []
        self.transport = httpx.MockTransport(self._handle)

    def client(self) -> httpx.Client:
        return httpx.Client(transport=self.transport)

    def _handle(self, request: httpx.Request) -> httpx.Response:
        payload = json.loads(request.content)
        if request.url.path.endswith("/chat/completions"):
            self.chat_requests.append(payload)
            out = self.chat_handler(payload, len(self.chat_requests) - 1)
            if isinstance(out, httpx.Response):
                return out
            return httpx.Response(
                200, json={"choices": [{"message": {"content": out}}]})
        if request.url.path.endswith("/embeddings"):
            self.embed_requests.append(payload)
            vectors = self.embed_handler(payload["input"])
            return httpx.Response(
                200, json={"data": [{"index": i, "embedding": list(v)}
                                    for i, v in enumerate(vectors)]})
        return httpx.Response(404, text="no such endpoint")

    def chat_texts(self) -> list[str]:
        """Concatenated message contents of every chat request, in order."""
        return ["\n".join(m["content"] for m in p["messages"])
                for p in self.chat_requests]


def make_gateway(tmp_path, mock: OpenAIMock, **kwargs) -> Gateway:
    kwargs.setdefault("backoff_seconds", 0.0)
    return Gateway(tmp_path / "cache", client=mock.client(), **kwargs)


def llm_config(**kwargs) -> LlmRequestConfig:
    defaults = dict(endpoint_url="http://mock/v1", model_name="test-model",
                    temperature=0.0, trial_count=3, timeout=5.0)
    defaults.update(kwargs)
    return LlmRequestConfig(**defaults)


# -- controllable fast-path confidence ------------------------------------------
#
# With identity weights and zero bias, the embedding a*onehot(k) yields
# softmax max-probability exactly c when a = ln(c*(n-1)/(1-c)), argmax k,
# for any c in (1/n, 1).


def identity_model(score_range: tuple[int, int]) -> FastModel:
    n = score_range[1] - score_range[0] + 1
    return FastModel(weights=np.eye(n), bias=np.zeros(n), score_range=score_range)


def confidence_embedding(klass: int, confidence: float, n_classes: int) -> list[float]:
    if not 1.0 / n_classes < confidence < 1.0:
        raise ValueError(f"confidence {confidence} unreachable with "
                         f"{n_classes} classes")
    a = math.log(confidence * (n_classes - 1) / (1.0 - confidence))
    vec = [0.0] * n_classes
    vec[klass] = a
    return vec


ESSAY_ID_RE = re.compile(r"synthetic essay (\S+)")


def synthetic_essay(essay_id: str, gold_overall: int | None = None,
                    set_id: str = "syn") -> Essay:
    gold = ScoreVector(overall=gold_overall) if gold_overall is not None else None
    return Essay(essay_id=essay_id, set_id=set_id,
                 text=f"synthetic essay {essay_id} body text", gold=gold)


def essay_id_in(text: str) -> str:
    match = ESSAY_ID_RE.search(text)
    if not match:
        raise AssertionError(f"no essay marker in prompt: {text[:120]!r}")
    return match.group(1)


def overall_rubric(lo: int = 0, hi: int = 10) -> Rubric:
    return overall_only_rubric((lo, hi))


def prompt_spec_for(rubric: Rubric, set_id: str = "syn") -> EssayPromptSpec:
    return EssayPromptSpec(set_id=set_id, prompt_text="Write about the topic.",
                           essay_type="synthetic", score_range=rubric.overall_range)


def total_score_text(score: int) -> str:
    return f"Explanations: synthetic.\n\nYour final evaluation:\n\n[Total Score: {score}]"


# essays whose text encodes the fast-path class and confidence, so a mock
# embeddings endpoint can reconstruct them
MARKER_RE = re.compile(r"conf=([0-9.]+) k=(\d+) n=(\d+)")


def marker_essay(essay_id: str, conf: float, klass: int, n_classes: int,
                 gold_overall: int | None = None, set_id: str = "syn") -> Essay:
    gold = ScoreVector(overall=gold_overall) if gold_overall is not None else None
    text = (f"synthetic essay {essay_id} conf={conf} k={klass} n={n_classes} "
            f"body text")
    return Essay(essay_id=essay_id, set_id=set_id, text=text, gold=gold)


def marker_embedding_handler(texts):
    vectors = []
    for text in texts:
        match = MARKER_RE.search(text)
        if not match:
            raise AssertionError(f"no embedding marker in {text[:80]!r}")
        conf, klass, n = float(match[1]), int(match[2]), int(match[3])
        vectors.append(confidence_embedding(klass, conf, n))
    return vectors


class LiveOpenAIServer:
    """Real localhost HTTP server for exercising CLI-built gateways."""

    def __init__(self, chat_handler=None, embed_handler=None):
        outer = self
        self.chat_requests: list[dict] = []
        self.embed_requests: list[dict] = []

        class Handler(BaseHTTPRequestHandler):
            def do_POST(self):
                length = int(self.headers.get("Content-Length", 0))
                payload = json.loads(self.rfile.read(length))
                if self.path.endswith("/chat/completions"):
                    outer.chat_requests.append(payload)
                    text = outer.chat_handler(payload, len(outer.chat_requests) - 1)
                    body = {"choices": [{"message": {"content": text}}]}
                elif self.path.endswith("/embeddings"):
                    outer.embed_requests.append(payload)
                    vectors = outer.embed_handler(payload["input"])
                    body = {"data": [{"index": i, "embedding": list(v)}
                                     for i, v in enumerate(vectors)]}
                else:
                    self.send_response(404)
                    self.end_headers()
                    return
                blob = json.dumps(body).encode("utf-8")
                self.send_response(200)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(blob)))
                self.end_headers()
                self.wfile.write(blob)

            def log_message(self, *args):
                pass

        self.chat_handler = chat_handler
        self.embed_handler = embed_handler
        self._server = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self._thread = threading.Thread(target=self._server.serve_forever,
                                        daemon=True)

    @property
    def url(self) -> str:
        host, port = self._server.server_address
        return f"http://{host}:{port}/v1"

    def __enter__(self):
        self._thread.start()
        return self

    def __exit__(self, *exc):
        self._server.shutdown()
        self._server.server_close()
