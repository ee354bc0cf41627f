# -*- coding: utf-8 -*-
"""
配置

TOML 文件 -> 分节 dataclass。字符串值支持 ${VAR} / ${VAR:-default} 环境变量插值；
FAIRRAG_CONFIG / FAIRRAG_BASE_URL / FAIRRAG_LOG_LEVEL 覆盖对应项，命令行参数再覆盖一切。
"""
import dataclasses
import os
import re
import tomllib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

import psutil
import structlog

from .domain import DEFAULT_CHUNK_LIMIT, ModelTier, TierSpec
from .econ import DEFAULT_MIX, DEFAULT_PRICES, CostModel, LatencyModel
from .errors import ConfigError
from .llm_gateway import HttpChatBackend, LLMGateway, RoutingTable, ScriptedBackend
from .orchestrator import PIPELINE_MODES, PipelineConfig
from .retrieval import IndexParams

logger = structlog.get_logger(__name__)

CONFIG_ENV = "FAIRRAG_CONFIG"
BASE_URL_ENV = "FAIRRAG_BASE_URL"
LOG_LEVEL_ENV = "FAIRRAG_LOG_LEVEL"
GATEWAY_MODES = ("http", "scripted")
SAVE_FORMATS = ("parquet", "json")

_ENV_RE = re.compile(r"\$\{([A-Za-z_][A-Za-z0-9_]*)(?::-([^}]*))?\}")


@dataclass
class PathsConfig:
    corpus: str = "data/corpus.jsonl"
    vectors: str = ""
    index_dir: str = "data/index"
    prompts_dir: str = ""
    results_dir: str = "results"


@dataclass
class IngestConfig:
    chunk_tokens: int = DEFAULT_CHUNK_LIMIT
    strict: bool = True


@dataclass
class RetrievalConfig:
    k1: float = 1.2
    b: float = 0.75
    rrf_k: int = 60
    top_k: int = 3
    sparse_only_fallback: bool = False
    embedding: str = "hashing"  # none | hashing | fasttext | http
    embedding_dimension: int = 64
    embedding_model_path: str = ""
    embedding_base_url: str = ""


@dataclass
class PipelineSection:
    max_iter: int = 3
    filter_batch_size: int = 10
    filter_memoization: bool = True
    parse_retries: int = 1
    mode: str = "fair"
    routing: str = "dynamic"


@dataclass
class GatewayConfig:
    """模型网关；api key 只存环境变量名"""
    mode: str = "scripted"
    base_url: str = "http://localhost:8000/v1"
    api_key_env: str = "FAIRRAG_API_KEY"
    timeout: float = 120.0
    max_in_flight: int = 8
    retries: int = 3
    temperature: float = 0.0
    max_output_tokens: int = 2048
    scripted_rules: str = ""
    models: Dict[str, str] = field(default_factory=lambda: {tier.value: f"llm-{tier.value}" for tier in ModelTier})


@dataclass
class EconConfig:
    m: float = 0.001866
    h: float = 0.50
    r: float = 1.0
    alpha: float = 0.90
    prices: Dict[str, List[float]] = field(
        default_factory=lambda: {tier.value: list(prices) for tier, prices in DEFAULT_PRICES.items()})
    mix: Dict[str, float] = field(default_factory=lambda: {tier.value: weight for tier, weight in DEFAULT_MIX.items()})


@dataclass
class EvalConfig:
    correctness_threshold: float = 4.0
    jobs: int = 0  # 0 表示按 CPU 数
    save_format: str = "parquet"
    judge: GatewayConfig = field(default_factory=GatewayConfig)


@dataclass
class LoggingConfig:
    level: str = "INFO"
    file: str = ""
    json: bool = False


@dataclass
class FairRagConfig:
    """全部配置"""
    paths: PathsConfig = field(default_factory=PathsConfig)
    ingest: IngestConfig = field(default_factory=IngestConfig)
    retrieval: RetrievalConfig = field(default_factory=RetrievalConfig)
    pipeline: PipelineSection = field(default_factory=PipelineSection)
    gateway: GatewayConfig = field(default_factory=GatewayConfig)
    econ: EconConfig = field(default_factory=EconConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    logging: LoggingConfig = field(default_factory=LoggingConfig)

    def validate(self):
        """校验取值范围；延迟参数超出敏感性区间只告警"""
        if not 1 <= self.pipeline.max_iter <= 4:
            raise ConfigError(f"pipeline.max_iter must be in [1, 4], got {self.pipeline.max_iter}")
        if self.pipeline.mode not in PIPELINE_MODES:
            raise ConfigError(f"pipeline.mode must be one of {PIPELINE_MODES}, got {self.pipeline.mode!r}")
        for name, section in (("gateway", self.gateway), ("eval.judge", self.eval.judge)):
            if section.mode not in GATEWAY_MODES:
                raise ConfigError(f"{name}.mode must be one of {GATEWAY_MODES}, got {section.mode!r}")
            unknown = set(section.models) - {tier.value for tier in ModelTier}
            if unknown:
                raise ConfigError(f"{name}.models has unknown tiers {sorted(unknown)}")
        if self.eval.save_format not in SAVE_FORMATS:
            raise ConfigError(f"eval.save_format must be one of {SAVE_FORMATS}")
        if self.eval.jobs < 0:
            raise ConfigError("eval.jobs must be >= 0")
        RoutingTable.preset(self.pipeline.routing)
        cost_model(self)
        latency = latency_model(self)
        if not latency.in_sensitivity_range():
            logger.warning("latency parameters outside the calibrated sensitivity range", h=latency.h, r=latency.r)
        return self


# ==================== 加载 ====================

def interpolate(value: Any) -> Any:
    """递归展开字符串中的 ${VAR} 与 ${VAR:-default}"""
    if isinstance(value, str):
        def replace(match: re.Match) -> str:
            name, default = match.group(1), match.group(2)
            if name in os.environ:
                return os.environ[name]
            if default is not None:
                return default
            raise ConfigError(f"environment variable {name} is not set and has no default")
        return _ENV_RE.sub(replace, value)
    if isinstance(value, dict):
        return {key: interpolate(item) for key, item in value.items()}
    if isinstance(value, list):
        return [interpolate(item) for item in value]
    return value


def _section(cls, data: Dict[str, Any], name: str):
    if not isinstance(data, dict):
        raise ConfigError(f"[{name}] must be a table")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"[{name}] has unknown keys: {', '.join(unknown)}")
    values = {}
    for key, item in data.items():
        nested = known[key].default_factory if known[key].default_factory is not dataclasses.MISSING else None
        if dataclasses.is_dataclass(nested):
            values[key] = _section(nested, item, f"{name}.{key}")
        else:
            values[key] = item
    try:
        return cls(**values)
    except TypeError as e:
        raise ConfigError(f"[{name}] {e}") from e


def config_from_dict(data: Dict[str, Any]) -> FairRagConfig:
    return _section(FairRagConfig, interpolate(data), "config")


def load_config(path: Optional[Union[str, Path]] = None) -> FairRagConfig:
    """
    读取配置文件并应用环境变量覆盖

    path 为空时依次尝试 $FAIRRAG_CONFIG 和内置默认值。
    """
    path = path or os.environ.get(CONFIG_ENV)
    data: Dict[str, Any] = {}
    if path:
        try:
            with open(path, "rb") as f:
                data = tomllib.load(f)
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        except tomllib.TOMLDecodeError as e:
            raise ConfigError(f"invalid TOML in {path}: {e}") from e
    config = config_from_dict(data)

    if os.environ.get(BASE_URL_ENV):
        config.gateway.base_url = os.environ[BASE_URL_ENV]
    if os.environ.get(LOG_LEVEL_ENV):
        config.logging.level = os.environ[LOG_LEVEL_ENV].upper()
    return config.validate()


# ==================== 构造运行时对象 ====================

def _tier(name: str) -> ModelTier:
    try:
        return ModelTier(name)
    except ValueError:
        raise ConfigError(f"unknown model tier {name!r}") from None


def cost_model(config: FairRagConfig) -> CostModel:
    prices = {}
    for name, pair in config.econ.prices.items():
        if len(pair) != 2:
            raise ConfigError(f"econ.prices.{name} must be [input, output]")
        prices[_tier(name)] = (float(pair[0]), float(pair[1]))
    mix = {_tier(name): float(weight) for name, weight in config.econ.mix.items()}
    return CostModel(prices=prices, alpha=config.econ.alpha, mix=mix)


def latency_model(config: FairRagConfig) -> LatencyModel:
    return LatencyModel(m=config.econ.m, h=config.econ.h, r=config.econ.r)


def tier_specs(section: GatewayConfig, config: FairRagConfig) -> Dict[ModelTier, TierSpec]:
    prices = cost_model(config).prices
    specs = {}
    for tier in ModelTier:
        input_price, output_price = prices.get(tier, DEFAULT_PRICES[tier])
        specs[tier] = TierSpec(tier=tier, model=section.models.get(tier.value, f"llm-{tier.value}"),
                               input_price=input_price, output_price=output_price)
    return specs


def build_gateway(section: GatewayConfig, config: FairRagConfig) -> LLMGateway:
    if section.mode == "scripted":
        if not section.scripted_rules:
            raise ConfigError("scripted gateway needs 'scripted_rules' (a JSONL rules file)")
        backend = ScriptedBackend.from_jsonl(section.scripted_rules)
    else:
        backend = HttpChatBackend(section.base_url, api_key_env=section.api_key_env, timeout=section.timeout,
                                  max_concurrent=section.max_in_flight, retries=section.retries)
    return LLMGateway(backend=backend, tiers=tier_specs(section, config), max_in_flight=section.max_in_flight,
                      temperature=section.temperature, max_output_tokens=section.max_output_tokens)


def pipeline_config(config: FairRagConfig) -> PipelineConfig:
    section = config.pipeline
    return PipelineConfig(
        max_iter=section.max_iter,
        top_k=config.retrieval.top_k,
        filter_batch_size=section.filter_batch_size,
        routing=RoutingTable.preset(section.routing),
        sparse_only_fallback=config.retrieval.sparse_only_fallback,
        filter_memoization=section.filter_memoization,
        parse_retries=section.parse_retries,
        mode=section.mode,
        latency=latency_model(config),
        chunk_limit=config.ingest.chunk_tokens,
    )


def index_params(config: FairRagConfig) -> IndexParams:
    return IndexParams(k1=config.retrieval.k1, b=config.retrieval.b, rrf_k=config.retrieval.rrf_k)


def eval_jobs(config: FairRagConfig, override: Optional[int] = None) -> int:
    """
    评估并发数：命令行 > 配置 > CPU 数

    任一网关是脚本化后端时固定为 1：规则按顺序消费，并发会让记录互相拿到对方的回复。
    """
    jobs = override if override else config.eval.jobs
    if "scripted" in (config.gateway.mode, config.eval.judge.mode):
        if jobs and jobs > 1:
            logger.warning("scripted backend forces sequential evaluation", requested_jobs=jobs)
        return 1
    return jobs or psutil.cpu_count() or 1
