# -*- coding: utf-8 -*-
"""
LLM 网关

三档模型（small / large / reasoner）之上的统一 chat-completion 接口：
- HttpChatBackend: OpenAI 兼容的 /chat/completions（aiohttp，带重试）
- ScriptedBackend: 按子串匹配回放预设响应，用于确定性测试
- LLMGateway: 并发上限、token 计数与按 trace 上下文的调用记账
"""
import asyncio
import os
import threading
from collections import deque
from contextlib import contextmanager
from contextvars import ContextVar
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Deque, Dict, Iterator, List, Mapping, Optional, Protocol, Sequence

import aiohttp
import structlog

from .domain import CallRecord, ModelTier, QueryClass, TierSpec
from .econ import DEFAULT_PRICES, call_cost
from .errors import ConfigError, GatewayError, ScriptedRuleMiss, TransportError
from .ingest import RegexTokenizer, Tokenizer, iter_jsonl

logger = structlog.get_logger(__name__)


class AgentRole(str, Enum):
    VALIDATOR = "validator"
    DECOMPOSER = "decomposer"
    FILTER = "filter"
    SEA = "sea"
    REFINER = "refiner"
    GENERATOR = "generator"
    DIRECT_ANSWER = "direct_answer"
    JUDGE = "judge"


@dataclass(frozen=True)
class RoutingTable:
    """agent 角色 -> 档位；generator 另按查询分类路由"""
    roles: Mapping[AgentRole, ModelTier]
    generator: Mapping[QueryClass, ModelTier]

    def __post_init__(self):
        missing = [role.value for role in AgentRole if role not in self.roles]
        if missing:
            raise ConfigError(f"routing table is missing roles: {missing}")

    @classmethod
    def default(cls) -> "RoutingTable":
        return cls(
            roles={
                AgentRole.VALIDATOR: ModelTier.LARGE,
                AgentRole.DECOMPOSER: ModelTier.SMALL,
                AgentRole.FILTER: ModelTier.LARGE,
                AgentRole.SEA: ModelTier.SMALL,
                AgentRole.REFINER: ModelTier.LARGE,
                AgentRole.GENERATOR: ModelTier.LARGE,
                AgentRole.DIRECT_ANSWER: ModelTier.SMALL,
                AgentRole.JUDGE: ModelTier.LARGE,
            },
            generator={
                QueryClass.VALID_SMALL: ModelTier.SMALL,
                QueryClass.VALID_LARGE: ModelTier.LARGE,
                QueryClass.VALID_REASONER: ModelTier.REASONER,
            },
        )

    @classmethod
    def static(cls, tier: ModelTier) -> "RoutingTable":
        """静态消融：所有角色都用同一档位"""
        return cls(roles={role: tier for role in AgentRole}, generator={cls_: tier for cls_ in QueryClass})

    @classmethod
    def preset(cls, name: str) -> "RoutingTable":
        if name == "dynamic":
            return cls.default()
        presets = {
            "static_small": ModelTier.SMALL,
            "static_large": ModelTier.LARGE,
            "static_reasoner": ModelTier.REASONER,
        }
        if name not in presets:
            raise ConfigError(f"unknown routing preset {name!r} (expected dynamic|{'|'.join(presets)})")
        return cls.static(presets[name])


def route(role: AgentRole, query_class: Optional[QueryClass], table: RoutingTable) -> ModelTier:
    if role == AgentRole.GENERATOR and query_class is not None and query_class in table.generator:
        return table.generator[query_class]
    return table.roles[role]


@dataclass(frozen=True)
class ChatRequest:
    tier: ModelTier
    prompt: str
    max_output_tokens: int = 2048
    temperature: float = 0.0
    role: str = "generic"

    def __post_init__(self):
        if not self.prompt:
            raise ValueError("prompt must be non-empty")
        if self.max_output_tokens <= 0:
            raise ValueError("max_output_tokens must be positive")
        if not 0.0 <= self.temperature <= 2.0:
            raise ValueError(f"temperature {self.temperature} outside [0, 2]")


@dataclass(frozen=True)
class ChatResponse:
    text: str
    prompt_tokens: int
    completion_tokens: int
    model: str = ""


@dataclass(frozen=True)
class BackendReply:
    """后端原始回复；usage 缺失时 token 数为 None，由网关本地计数"""
    text: str
    prompt_tokens: Optional[int] = None
    completion_tokens: Optional[int] = None


class ChatBackend(Protocol):
    async def chat(self, model: str, request: ChatRequest) -> BackendReply:
        ...


# ==================== 调用记账 ====================

class CallLedger:
    """一个查询上下文内的调用记录；追加操作加锁"""

    def __init__(self):
        self._records: List[CallRecord] = []
        self._lock = threading.Lock()

    def add(self, record: CallRecord):
        with self._lock:
            self._records.append(record)

    @property
    def records(self) -> List[CallRecord]:
        with self._lock:
            return list(self._records)

    @property
    def api_calls(self) -> int:
        return len(self.records)

    @property
    def prompt_tokens(self) -> int:
        return sum(r.prompt_tokens for r in self.records)

    @property
    def completion_tokens(self) -> int:
        return sum(r.completion_tokens for r in self.records)

    @property
    def cost_usd(self) -> float:
        return sum(r.cost_usd for r in self.records)


_current_ledger: ContextVar[Optional[CallLedger]] = ContextVar("fairrag_call_ledger", default=None)


@contextmanager
def track_calls() -> Iterator[CallLedger]:
    """在当前上下文（通常是一个 asyncio task）内收集网关调用"""
    ledger = CallLedger()
    token = _current_ledger.set(ledger)
    try:
        yield ledger
    finally:
        _current_ledger.reset(token)


# ==================== 后端 ====================

class HttpChatBackend:
    """OpenAI 兼容 chat-completion 端点"""

    def __init__(self, base_url: str, api_key_env: str = "FAIRRAG_API_KEY", timeout: float = 120.0,
                 max_concurrent: int = 8, retries: int = 3, backoff_base: float = 1.0):
        self.base_url = base_url.rstrip("/")
        self.api_key_env = api_key_env
        self.timeout = timeout
        self.max_concurrent = max_concurrent
        self.retries = retries
        self.backoff_base = backoff_base
        self.session: Optional[aiohttp.ClientSession] = None

    async def __aenter__(self):
        connector = aiohttp.TCPConnector(
            limit=self.max_concurrent * 2,
            limit_per_host=self.max_concurrent,
            ttl_dns_cache=300,
            use_dns_cache=True,
        )
        timeout = aiohttp.ClientTimeout(total=self.timeout)
        self.session = aiohttp.ClientSession(connector=connector, timeout=timeout)
        if not os.environ.get(self.api_key_env):
            logger.warning("api key env var is not set, sending requests without Authorization",
                           api_key_env=self.api_key_env)
        return self

    async def __aexit__(self, exc_type, exc_val, exc_tb):
        if self.session:
            await self.session.close()
            self.session = None

    def _headers(self) -> Dict[str, str]:
        headers = {"Content-Type": "application/json"}
        api_key = os.environ.get(self.api_key_env)
        if api_key:
            headers["Authorization"] = f"Bearer {api_key}"
        return headers

    @staticmethod
    def _parse(payload: dict) -> BackendReply:
        try:
            text = payload["choices"][0]["message"]["content"] or ""
        except (KeyError, IndexError, TypeError) as e:
            raise GatewayError(f"malformed chat-completion response: {e!r}") from e
        usage = payload.get("usage") or {}
        return BackendReply(text=text, prompt_tokens=usage.get("prompt_tokens"),
                            completion_tokens=usage.get("completion_tokens"))

    async def chat(self, model: str, request: ChatRequest) -> BackendReply:
        if self.session is None:
            raise GatewayError("HttpChatBackend used outside 'async with'")
        url = f"{self.base_url}/chat/completions"
        body = {
            "model": model,
            "messages": [{"role": "user", "content": request.prompt}],
            "temperature": request.temperature,
            "max_tokens": request.max_output_tokens,
        }

        last_error: Optional[Exception] = None
        for attempt in range(self.retries + 1):
            try:
                async with self.session.post(url, json=body, headers=self._headers()) as response:
                    if response.status == 200:
                        return self._parse(await response.json(content_type=None))
                    error_text = (await response.text())[:200]
                    if response.status < 500:
                        raise GatewayError(f"HTTP {response.status} from {url}: {error_text}")
                    last_error = TransportError(f"HTTP {response.status} from {url}: {error_text}")
            except asyncio.TimeoutError:
                last_error = TransportError(f"request to {url} timed out after {self.timeout}s")
            except aiohttp.ClientError as e:
                last_error = TransportError(f"{type(e).__name__}: {e}")

            if attempt < self.retries:
                delay = self.backoff_base * (2 ** attempt)
                logger.warning("chat request failed, retrying", attempt=attempt + 1, delay_s=delay,
                               error=str(last_error))
                await asyncio.sleep(delay)

        raise TransportError(f"chat completion failed after {self.retries + 1} attempts: {last_error}")


SCRIPTED_HISTORY_LIMIT = 1000


@dataclass(frozen=True)
class ScriptedRule:
    match: str
    response: str
    prompt_tokens: Optional[int] = None
    completion_tokens: Optional[int] = None


class ScriptedBackend:
    """
    确定性回放后端

    按顺序取第一条未消费且 match 是 prompt 子串的规则；没有则回退到第一条匹配的
    规则（即使已消费）；仍没有则抛 ScriptedRuleMiss。规则消费串行化。
    """

    def __init__(self, rules: Sequence[ScriptedRule], history_limit: int = SCRIPTED_HISTORY_LIMIT):
        self.rules = list(rules)
        self._consumed = [False] * len(self.rules)
        self._lock = threading.Lock()
        # 只保留最近 history_limit 次调用
        self.call_history: Deque[Dict[str, str]] = deque(maxlen=history_limit)

    @classmethod
    def from_jsonl(cls, path) -> "ScriptedBackend":
        rules = []
        for line_number, payload in iter_jsonl(Path(path)):
            match, response = payload.get("match"), payload.get("response")
            if not isinstance(match, str) or not isinstance(response, str):
                raise ConfigError(f"{path} line {line_number}: rule needs string 'match' and 'response'")
            rules.append(ScriptedRule(match, response, payload.get("prompt_tokens"),
                                      payload.get("completion_tokens")))
        logger.debug("scripted rules loaded", path=str(path), rules=len(rules))
        return cls(rules)

    async def __aenter__(self):
        return self

    async def __aexit__(self, exc_type, exc_val, exc_tb):
        return None

    def _select(self, prompt: str) -> ScriptedRule:
        with self._lock:
            fallback = None
            for position, rule in enumerate(self.rules):
                if rule.match not in prompt:
                    continue
                if not self._consumed[position]:
                    self._consumed[position] = True
                    return rule
                if fallback is None:
                    fallback = rule
            if fallback is None:
                raise ScriptedRuleMiss(prompt)
            return fallback

    async def chat(self, model: str, request: ChatRequest) -> BackendReply:
        rule = self._select(request.prompt)
        self.call_history.append({"model": model, "role": request.role, "match": rule.match})
        return BackendReply(rule.response, rule.prompt_tokens, rule.completion_tokens)

    def reset(self):
        with self._lock:
            self._consumed = [False] * len(self.rules)
            self.call_history.clear()


# ==================== 网关 ====================

def default_tiers() -> Dict[ModelTier, TierSpec]:
    return {
        tier: TierSpec(tier=tier, model=f"llm-{tier.value}", input_price=prices[0], output_price=prices[1])
        for tier, prices in DEFAULT_PRICES.items()
    }


@dataclass
class LLMGateway:
    """
    网关：限流 + token 计数 + 记账

    backend 给出 usage 时以其为准，否则用本地分词器计数。每次调用都会写入当前上下文的
    CallLedger（如果有）。
    """
    backend: ChatBackend
    tiers: Dict[ModelTier, TierSpec] = field(default_factory=default_tiers)
    tokenizer: Tokenizer = field(default_factory=RegexTokenizer)
    max_in_flight: int = 8
    temperature: float = 0.0
    max_output_tokens: int = 2048

    def __post_init__(self):
        if self.max_in_flight <= 0:
            raise ConfigError("max_in_flight must be positive")
        missing = [tier.value for tier in ModelTier if tier not in self.tiers]
        if missing:
            raise ConfigError(f"gateway has no model for tiers {missing}")
        self._semaphore: Optional[asyncio.Semaphore] = None
        self._semaphore_loop = None

    async def __aenter__(self):
        enter = getattr(self.backend, "__aenter__", None)
        if enter is not None:
            await enter()
        return self

    async def __aexit__(self, exc_type, exc_val, exc_tb):
        leave = getattr(self.backend, "__aexit__", None)
        if leave is not None:
            await leave(exc_type, exc_val, exc_tb)

    def _in_flight(self) -> asyncio.Semaphore:
        loop = asyncio.get_running_loop()
        if self._semaphore is None or self._semaphore_loop is not loop:
            self._semaphore = asyncio.Semaphore(self.max_in_flight)
            self._semaphore_loop = loop
        return self._semaphore

    async def complete(self, request: ChatRequest) -> ChatResponse:
        spec = self.tiers[request.tier]
        async with self._in_flight():
            reply = await self.backend.chat(spec.model, request)

        prompt_tokens = reply.prompt_tokens
        if prompt_tokens is None:
            prompt_tokens = len(self.tokenizer.tokenize(request.prompt))
        completion_tokens = reply.completion_tokens
        if completion_tokens is None:
            completion_tokens = len(self.tokenizer.tokenize(reply.text))

        record = CallRecord(
            role=request.role,
            tier=request.tier,
            model=spec.model,
            prompt_tokens=prompt_tokens,
            completion_tokens=completion_tokens,
            cost_usd=call_cost(spec, prompt_tokens, completion_tokens),
        )
        ledger = _current_ledger.get()
        if ledger is not None:
            ledger.add(record)
        logger.debug("llm call", role=request.role, tier=request.tier.value, model=spec.model,
                     prompt_tokens=prompt_tokens, completion_tokens=completion_tokens)
        return ChatResponse(reply.text, prompt_tokens, completion_tokens, spec.model)

    async def ask(self, role: AgentRole, tier: ModelTier, prompt: str) -> ChatResponse:
        """按网关默认采样参数发一次请求"""
        return await self.complete(ChatRequest(
            tier=tier,
            prompt=prompt,
            max_output_tokens=self.max_output_tokens,
            temperature=self.temperature,
            role=role.value,
        ))
