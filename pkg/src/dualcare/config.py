"""System configuration: YAML file, environment overrides for secrets, backend construction."""

from __future__ import annotations

import os
from pathlib import Path
from typing import Mapping, Optional, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, model_validator

from dualcare.agents import DEFAULT_DEPARTMENTS, Pipeline, ReflectionConfig
from dualcare.kb import DEFAULT_MAX_CHARS, DEFAULT_OVERLAP, KnowledgeBase
from dualcare.llm.client import DEFAULT_RETRY
from dualcare.llm.http import HttpReranker, OpenAICompatChat, OpenAICompatEmbedder
from dualcare.llm.mock import HashEmbedder, OverlapReranker, ScriptedChat
from dualcare.retrieval import DEFAULT_TOP_K, DEFAULT_TOP_N, RetrievalParams

ENV_PREFIX = "DUALCARE_"


class ConfigError(ValueError):
    pass


class BackendConfig(BaseModel):
    """Either ``mock: true`` (optionally with a script) or a remote endpoint, never both."""

    model_config = ConfigDict(extra="forbid")

    mock: bool = False
    script: Optional[Path] = None
    base_url: Optional[str] = None
    model: Optional[str] = None
    api_key: Optional[str] = Field(default=None, repr=False)
    timeout: float = Field(default=60.0, gt=0)

    @model_validator(mode="after")
    def _exclusive(self):
        remote = self.base_url is not None or self.model is not None
        if self.mock and remote:
            raise ValueError("a backend is either mock or remote, not both")
        if self.script is not None and not self.mock:
            raise ValueError("script is only valid for mock backends")
        if not self.mock and not (self.base_url and self.model):
            raise ValueError("remote backends need base_url and model (or set mock: true)")
        return self


def _mock() -> BackendConfig:
    return BackendConfig(mock=True)


class RetrievalSection(BaseModel):
    model_config = ConfigDict(extra="forbid")
    top_k: int = Field(default=DEFAULT_TOP_K, ge=1)
    top_n: int = Field(default=DEFAULT_TOP_N, ge=1)


class ReflectionSection(BaseModel):
    model_config = ConfigDict(extra="forbid")
    tau: float = Field(default=0.6, ge=0.0, le=1.0)
    r_max: int = Field(default=2, ge=0)
    q_max: int = Field(default=4, ge=1)


class ChunkingSection(BaseModel):
    model_config = ConfigDict(extra="forbid")
    max_chars: int = Field(default=DEFAULT_MAX_CHARS, ge=1)
    overlap_chars: int = Field(default=DEFAULT_OVERLAP, ge=0)


class SystemConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    chat: BackendConfig = Field(default_factory=_mock)
    embed: BackendConfig = Field(default_factory=_mock)
    rerank: BackendConfig = Field(default_factory=_mock)
    judge: Optional[BackendConfig] = None  # defaults to the chat backend
    embed_dim: int = Field(default=256, ge=1)
    retrieval: RetrievalSection = Field(default_factory=RetrievalSection)
    reflection: ReflectionSection = Field(default_factory=ReflectionSection)
    chunking: ChunkingSection = Field(default_factory=ChunkingSection)
    departments: tuple[str, ...] = DEFAULT_DEPARTMENTS
    workers: int = Field(default=1, ge=1)
    out_dir: Path = Path("out")
    index_dir: Optional[Path] = None
    seed: int = 0

    @model_validator(mode="after")
    def _bounds(self):
        # delegate the cross-field checks to the owning types
        RetrievalParams(self.retrieval.top_k, self.retrieval.top_n)
        if self.chunking.overlap_chars >= self.chunking.max_chars:
            raise ValueError("chunking.overlap_chars must be < chunking.max_chars")
        return self

    def retrieval_params(self) -> RetrievalParams:
        return RetrievalParams(self.retrieval.top_k, self.retrieval.top_n)

    def reflection_config(self) -> ReflectionConfig:
        return ReflectionConfig(self.reflection.tau, self.reflection.r_max, self.reflection.q_max)

    def all_mock(self, script: Optional[Path] = None) -> "SystemConfig":
        """Copy with every backend switched to mock mode."""
        chat = BackendConfig(mock=True, script=script or (self.chat.script if self.chat.mock else None))
        return self.model_copy(update={"chat": chat, "embed": _mock(), "rerank": _mock(), "judge": None})


def _apply_env(data: dict, env: Mapping) -> dict:
    for name in ("chat", "embed", "rerank", "judge"):
        key = env.get(f"{ENV_PREFIX}{name.upper()}_API_KEY")
        if key and isinstance(data.get(name), dict) and not data[name].get("mock"):
            data[name] = {**data[name], "api_key": key}
    return data


def load_config(path: Union[str, Path, None] = None, env: Optional[Mapping] = None) -> SystemConfig:
    """Read YAML config; ``DUALCARE_<BACKEND>_API_KEY`` env vars override keys in the file."""
    env = os.environ if env is None else env
    data: dict = {}
    if path is not None:
        try:
            raw = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: invalid YAML: {exc}") from exc
        if raw is not None and not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        data = raw or {}
    try:
        return SystemConfig.model_validate(_apply_env(data, env))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def make_chat(cfg: BackendConfig):
    if cfg.mock:
        return ScriptedChat.from_file(cfg.script) if cfg.script else ScriptedChat()
    return OpenAICompatChat(cfg.base_url, cfg.model, api_key=cfg.api_key, timeout=cfg.timeout)


def make_embedder(cfg: SystemConfig):
    b = cfg.embed
    if b.mock:
        return HashEmbedder(dim=cfg.embed_dim, seed=cfg.seed)
    return OpenAICompatEmbedder(b.base_url, b.model, cfg.embed_dim, api_key=b.api_key, timeout=b.timeout)


def make_reranker(cfg: BackendConfig):
    if cfg.mock:
        return OverlapReranker()
    return HttpReranker(cfg.base_url, cfg.model, api_key=cfg.api_key, timeout=cfg.timeout)


def make_pipeline(cfg: SystemConfig, kb: KnowledgeBase, chat=None) -> Pipeline:
    return Pipeline(
        kb=kb,
        chat=chat if chat is not None else make_chat(cfg.chat),
        embedder=make_embedder(cfg),
        reranker=make_reranker(cfg.rerank),
        retrieval=cfg.retrieval_params(),
        reflection=cfg.reflection_config(),
        departments=tuple(cfg.departments),
        retry=DEFAULT_RETRY,
    )
