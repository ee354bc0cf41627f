# -*- coding: utf-8 -*-
"""
延迟与成本模型

延迟：t = m·N + h·C + R（N 总 token，C 调用次数，R 每次运行的固定开销）。
成本：blended = α·input + (1−α)·output（$/Mtok），动态路由按档位占比加权，
单次查询成本 = N · rate / 1e6。
"""
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Mapping, Optional, Tuple

from .domain import ModelTier, QueryTrace, TierSpec
from .errors import ConfigError

SIMPLIFIED_SECONDS_PER_TOKEN = 0.00221
H_SENSITIVITY = (0.3, 0.7)
R_SENSITIVITY = (0.5, 1.5)

DEFAULT_PRICES: Dict[ModelTier, Tuple[float, float]] = {
    ModelTier.SMALL: (0.03, 0.06),
    ModelTier.LARGE: (0.23, 0.40),
    ModelTier.REASONER: (0.70, 2.40),
}
DEFAULT_MIX: Dict[ModelTier, float] = {
    ModelTier.LARGE: 0.80,
    ModelTier.SMALL: 0.15,
    ModelTier.REASONER: 0.05,
}


@dataclass(frozen=True)
class LatencyModel:
    """m 秒/token，h 秒/调用，r 秒/运行"""
    m: float = 0.001866
    h: float = 0.50
    r: float = 1.0

    def __post_init__(self):
        for name in ("m", "h", "r"):
            if getattr(self, name) < 0:
                raise ConfigError(f"latency parameter {name} must be non-negative")

    def predict(self, tokens: float, calls: float) -> float:
        if tokens < 0 or calls < 0:
            raise ValueError("tokens and calls must be non-negative")
        return self.m * tokens + self.h * calls + self.r

    def recover_model_time(self, measured: float, calls: float) -> float:
        """从实测端到端时间里扣掉调用开销与固定开销，得到模型本身耗时"""
        overhead = self.h * calls + self.r
        if measured < overhead:
            raise ValueError(f"measured {measured} s is below call+run overhead {overhead} s")
        return measured - overhead

    def per_token_contributions(self, calls: float, tokens: float) -> Dict[str, float]:
        """在给定调用密度下，把 h 与 R 摊到每个 token 上（秒/token）"""
        if tokens <= 0:
            raise ValueError("tokens must be positive")
        return {
            "m": self.m,
            "h": self.h * calls / tokens,
            "r": self.r / tokens,
        }

    def in_sensitivity_range(self) -> bool:
        return H_SENSITIVITY[0] <= self.h <= H_SENSITIVITY[1] and R_SENSITIVITY[0] <= self.r <= R_SENSITIVITY[1]


def predict_latency(tokens: float, calls: float, model: Optional[LatencyModel] = None) -> float:
    return (model or LatencyModel()).predict(tokens, calls)


def predict_latency_simplified(tokens: float, seconds_per_token: float = SIMPLIFIED_SECONDS_PER_TOKEN) -> float:
    """只看 token 数的单参数近似"""
    return seconds_per_token * tokens


def recover_model_time(measured: float, calls: float, model: Optional[LatencyModel] = None) -> float:
    return (model or LatencyModel()).recover_model_time(measured, calls)


def sensitivity_bounds(calls: float, tokens: float) -> Dict[str, Tuple[float, float]]:
    """h、R 在敏感性区间两端时每 token 的摊销（秒/token）"""
    if tokens <= 0:
        raise ValueError("tokens must be positive")
    return {
        "h": (H_SENSITIVITY[0] * calls / tokens, H_SENSITIVITY[1] * calls / tokens),
        "r": (R_SENSITIVITY[0] / tokens, R_SENSITIVITY[1] / tokens),
    }


@dataclass(frozen=True)
class CostModel:
    """各档位 (input, output) 单价、输入占比 alpha、动态路由下各档位的查询占比"""
    prices: Mapping[ModelTier, Tuple[float, float]] = field(default_factory=lambda: dict(DEFAULT_PRICES))
    alpha: float = 0.90
    mix: Mapping[ModelTier, float] = field(default_factory=lambda: dict(DEFAULT_MIX))

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must be in [0, 1], got {self.alpha}")
        for tier, (input_price, output_price) in self.prices.items():
            if input_price < 0 or output_price < 0:
                raise ConfigError(f"prices for tier {tier.value} must be non-negative")
        unknown = set(self.mix) - set(self.prices)
        if unknown:
            raise ConfigError(f"mix references tiers without prices: {sorted(t.value for t in unknown)}")
        if any(weight < 0 for weight in self.mix.values()):
            raise ConfigError("mix weights must be non-negative")
        if abs(sum(self.mix.values()) - 1.0) > 1e-9:
            raise ConfigError(f"mix weights must sum to 1, got {sum(self.mix.values())}")

    @classmethod
    def from_tiers(cls, tiers: Mapping[ModelTier, TierSpec], alpha: float = 0.90,
                   mix: Optional[Mapping[ModelTier, float]] = None) -> "CostModel":
        prices = {tier: (spec.input_price, spec.output_price) for tier, spec in tiers.items()}
        return cls(prices=prices, alpha=alpha, mix=dict(mix) if mix is not None else dict(DEFAULT_MIX))

    def blended_rate(self, tier: ModelTier) -> float:
        input_price, output_price = self.prices[tier]
        return self.alpha * input_price + (1.0 - self.alpha) * output_price

    def dynamic_rate(self) -> float:
        return sum(weight * self.blended_rate(tier) for tier, weight in self.mix.items())


def blended_rate(tier: ModelTier, model: Optional[CostModel] = None) -> float:
    return (model or CostModel()).blended_rate(tier)


def dynamic_rate(model: Optional[CostModel] = None) -> float:
    return (model or CostModel()).dynamic_rate()


def cost_per_query(tokens: float, rate: float) -> float:
    """N 个 token 在 rate $/Mtok 下的美元成本"""
    if tokens < 0:
        raise ValueError("tokens must be non-negative")
    return tokens * rate / 1_000_000


def call_cost(spec: TierSpec, prompt_tokens: int, completion_tokens: int) -> float:
    """单次调用的实际成本：输入、输出分别按各自单价计"""
    return (prompt_tokens * spec.input_price + completion_tokens * spec.output_price) / 1_000_000


def round_sig(value: float, digits: int = 3) -> float:
    if value == 0:
        return 0.0
    return float(f"{value:.{digits - 1}e}")


def format_usd(value: float, digits: int = 3) -> str:
    """3 位有效数字的科学计数法，例如 2.89e-03"""
    return f"{value:.{digits - 1}e}"


@dataclass(frozen=True)
class CostConfiguration:
    """成本表中的一行：平均 token 数 + 档位（None 表示动态路由）"""
    name: str
    tokens: int
    tier: Optional[ModelTier] = None


REFERENCE_CONFIGURATIONS: Tuple[CostConfiguration, ...] = (
    CostConfiguration("Static Small", 16_145, ModelTier.SMALL),
    CostConfiguration("Static Large", 11_681, ModelTier.LARGE),
    CostConfiguration("Static Reasoner", 33_934, ModelTier.REASONER),
    CostConfiguration("Dynamic", 11_863, None),
)


def cost_table(model: Optional[CostModel] = None,
               configurations: Iterable[CostConfiguration] = REFERENCE_CONFIGURATIONS) -> List[Dict[str, object]]:
    """
    每种配置的 blended rate 与单次查询成本

    动态配置使用按占比加权后、保留 3 位有效数字的费率。
    """
    model = model or CostModel()
    rows = []
    for configuration in configurations:
        if configuration.tier is None:
            rate = round_sig(model.dynamic_rate())
        else:
            rate = round_sig(model.blended_rate(configuration.tier))
        cost = cost_per_query(configuration.tokens, rate)
        rows.append({
            "configuration": configuration.name,
            "avg_tokens": configuration.tokens,
            "rate_usd_per_mtok": rate,
            "cost_per_query_usd": cost,
            "cost_display": format_usd(cost),
        })
    return rows


def summarize_traces(traces: Iterable[QueryTrace]) -> Dict[str, float]:
    """每查询平均调用数、token、成本与延迟；跳过中止的 trace"""
    completed = [trace for trace in traces if not trace.aborted]
    count = len(completed)
    if count == 0:
        return {"queries": 0, "api_calls": 0.0, "total_tokens": 0.0, "cost_usd": 0.0, "latency_s": 0.0}
    return {
        "queries": count,
        "api_calls": sum(t.accounting.api_calls for t in completed) / count,
        "total_tokens": sum(t.accounting.total_tokens for t in completed) / count,
        "cost_usd": sum(t.accounting.cost_usd for t in completed) / count,
        "latency_s": sum(t.accounting.latency_s for t in completed) / count,
    }
