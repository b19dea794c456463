"""YAML config for the service and offline workflows; env vars override."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import yaml

from . import fast as fastmod
from .corpus import EssayPromptSpec, Rubric, csee_rubric, overall_only_rubric
from .errors import ConfigurationError
from .events import EventStore
from .gateway import Gateway, LlmRequestConfig
from .router import DualRouter, FastModelSet, RouterPolicy
from .service import GradingService


@dataclass
class GatewaySettings:
    base_url: str = ""
    chat_model: str = ""
    embed_model: str = ""
    temperature: float = 0.0
    max_output_tokens: int = 1024
    timeout: float = 60.0
    trial_count: int = 3
    embed_chunk_size: int = 100
    cache_dir: str = ".cache/llm"
    parallelism: int = 4

    def chat_config(self) -> LlmRequestConfig:
        return LlmRequestConfig(
            endpoint_url=self.base_url, model_name=self.chat_model,
            temperature=self.temperature, max_output_tokens=self.max_output_tokens,
            timeout=self.timeout, trial_count=self.trial_count,
            embed_chunk_size=self.embed_chunk_size)

    def embed_config(self) -> LlmRequestConfig:
        return LlmRequestConfig(
            endpoint_url=self.base_url, model_name=self.embed_model,
            temperature=self.temperature, max_output_tokens=self.max_output_tokens,
            timeout=self.timeout, trial_count=self.trial_count,
            embed_chunk_size=self.embed_chunk_size)


@dataclass
class AppConfig:
    rubric: Rubric = field(default_factory=csee_rubric)
    rubric_id: str = "csee"
    policy: RouterPolicy = field(default_factory=RouterPolicy)
    gateway: Optional[GatewaySettings] = None
    prompt_spec: Optional[EssayPromptSpec] = None
    overall_model_path: Optional[str] = None
    dimension_model_paths: dict[str, str] = field(default_factory=dict)
    event_log: str = "events.log"
    snapshot: Optional[str] = None
    reviewer_tokens: dict[str, str] = field(default_factory=dict)
    host: str = "127.0.0.1"
    port: int = 8080


def _rubric_from(node) -> tuple[Rubric, str]:
    if node in (None, "csee"):
        return csee_rubric(), "csee"
    if isinstance(node, dict):
        if "score_range" in node and "dimensions" not in node:
            lo, hi = node["score_range"]
            return overall_only_rubric((int(lo), int(hi))), node.get("id", "overall-only")
        return Rubric.from_json(node), node.get("id", "custom")
    raise ConfigurationError(f"unsupported rubric config: {node!r}")


def load_config(path: str | Path) -> AppConfig:
    raw = yaml.safe_load(Path(path).read_text("utf-8")) or {}
    config = AppConfig()
    config.rubric, config.rubric_id = _rubric_from(raw.get("rubric"))
    if "policy" in raw:
        valid = {f.name for f in dataclasses.fields(RouterPolicy)}
        unknown = set(raw["policy"]) - valid
        if unknown:
            raise ConfigurationError(f"unknown policy fields: {sorted(unknown)}")
        config.policy = RouterPolicy(**raw["policy"])
    if "gateway" in raw:
        config.gateway = GatewaySettings(**raw["gateway"])
    if "prompt_spec" in raw:
        node = raw["prompt_spec"]
        config.prompt_spec = EssayPromptSpec(
            set_id=str(node.get("set_id", "default")),
            prompt_text=node.get("prompt_text", ""),
            essay_type=node.get("essay_type", ""),
            score_range=tuple(node.get("score_range", config.rubric.overall_range)))
    models = raw.get("models", {})
    config.overall_model_path = models.get("overall")
    config.dimension_model_paths = dict(models.get("dimensions", {}))
    storage = raw.get("storage", {})
    config.event_log = storage.get("event_log", config.event_log)
    config.snapshot = storage.get("snapshot")
    config.reviewer_tokens = dict(raw.get("reviewer_tokens", {}))
    server = raw.get("server", {})
    config.host = server.get("host", config.host)
    config.port = int(server.get("port", config.port))
    return config


def build_service(config: AppConfig) -> GradingService:
    store = EventStore(config.event_log, snapshot_path=config.snapshot)
    router = None
    if config.overall_model_path:
        models = FastModelSet(
            overall=fastmod.load(config.overall_model_path),
            dimensions={name: fastmod.load(path)
                        for name, path in config.dimension_model_paths.items()})
        prompt_spec = config.prompt_spec or EssayPromptSpec(
            set_id="default", prompt_text="", essay_type="",
            score_range=config.rubric.overall_range)
        gateway = None
        chat_config = embed_config = None
        if config.gateway is not None:
            gateway = Gateway(config.gateway.cache_dir,
                              parallelism=config.gateway.parallelism)
            chat_config = config.gateway.chat_config()
            embed_config = config.gateway.embed_config()
        router = DualRouter(models, config.rubric, prompt_spec, gateway=gateway,
                            chat_config=chat_config, embed_config=embed_config)
    return GradingService(rubric=config.rubric, store=store, router=router,
                          default_policy=config.policy,
                          reviewer_tokens=config.reviewer_tokens,
                          rubric_id=config.rubric_id)
