# -*- coding: utf-8 -*-
"""
核心数据类型

各阶段共享的不可变数据结构（pydantic frozen model），除校验外不含业务逻辑。
JSON 字段名全部 snake_case；QueryTrace 的查询分类字段在 JSON 中叫 "class"。
"""
from enum import Enum
from typing import List, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, field_validator

DEFAULT_CHUNK_LIMIT = 378

_NONE_MARKERS = {"", "none", "n/a", "-", "هیچ"}


class _Frozen(BaseModel):
    model_config = ConfigDict(frozen=True, populate_by_name=True, use_enum_values=False)


class ChunkKind(str, Enum):
    ENCYCLOPEDIA = "encyclopedia"
    QA = "qa"


class QueryClass(str, Enum):
    """分诊标签，恰好六种"""
    VALID_OBVIOUS = "VALID_OBVIOUS"
    VALID_SMALL = "VALID_SMALL"
    VALID_LARGE = "VALID_LARGE"
    VALID_REASONER = "VALID_REASONER"
    OUT_OF_SCOPE_ISLAMIC = "OUT_OF_SCOPE_ISLAMIC"
    UNETHICAL = "UNETHICAL"

    @classmethod
    def parse(cls, label: str) -> "QueryClass":
        """严格解析：只接受六个标签字符串本身"""
        try:
            return cls(label)
        except ValueError:
            raise ValueError(f"unknown query class: {label!r}") from None

    @property
    def is_rejection(self) -> bool:
        return self in (QueryClass.OUT_OF_SCOPE_ISLAMIC, QueryClass.UNETHICAL)


class ModelTier(str, Enum):
    SMALL = "small"
    LARGE = "large"
    REASONER = "reasoner"


class TierSpec(_Frozen):
    """某个模型档位：模型名 + 输入/输出单价（$/Mtok）"""
    tier: ModelTier
    model: str
    input_price: float = Field(ge=0)
    output_price: float = Field(ge=0)


class Chunk(_Frozen):
    id: str
    text: str
    source_url: str = ""
    token_count: int = Field(ge=0)
    kind: ChunkKind = ChunkKind.ENCYCLOPEDIA
    embedding: Optional[Tuple[float, ...]] = None


class SubQueryOrigin(str, Enum):
    DECOMPOSITION = "decomposition"
    REFINEMENT = "refinement"


class SubQuery(_Frozen):
    text: str
    origin: SubQueryOrigin
    iteration: int = Field(ge=1)

    @field_validator("text")
    @classmethod
    def _not_blank(cls, value: str) -> str:
        value = value.strip()
        if not value:
            raise ValueError("sub-query text is empty after trimming")
        return value


class SEAReport(_Frozen):
    main_goal: str = ""
    required_findings: Tuple[str, ...] = ()
    confirmed_findings: str = ""
    remaining_gaps: str = "None"
    conclusion: str = ""
    sufficient: bool = False

    @property
    def gaps_empty(self) -> bool:
        return self.remaining_gaps.strip().strip(".").strip().lower() in _NONE_MARKERS

    def analysis_summary(self) -> str:
        """交给 refiner 的摘要：已确认事实 + 缺口"""
        return f"Confirmed Findings: {self.confirmed_findings}\nRemaining Gaps: {self.remaining_gaps}"


class IterationRecord(_Frozen):
    index: int = Field(ge=1)
    sub_queries: Tuple[SubQuery, ...] = ()
    retrieved_ids: Tuple[Tuple[str, ...], ...] = ()
    injected_ids: Tuple[str, ...] = ()
    discarded_ids: Tuple[str, ...] = ()
    kept_ids: Tuple[str, ...] = ()
    sea: Optional[SEAReport] = None


class Disclaimer(str, Enum):
    FATWA_WARNING = "fatwa_warning"
    PARTIAL_EVIDENCE = "partial_evidence"
    NO_EVIDENCE = "no_evidence"
    REJECTION = "rejection"


class Answer(_Frozen):
    text: str
    citations: Tuple[int, ...] = ()
    disclaimers: Tuple[Disclaimer, ...] = ()


class CallRecord(_Frozen):
    """一次网关调用的记账"""
    role: str
    tier: ModelTier
    model: str
    prompt_tokens: int = Field(ge=0)
    completion_tokens: int = Field(ge=0)
    cost_usd: float = Field(ge=0)


class Accounting(_Frozen):
    api_calls: int = 0
    prompt_tokens: int = 0
    completion_tokens: int = 0
    cost_usd: float = 0.0
    latency_s: float = 0.0

    @property
    def total_tokens(self) -> int:
        return self.prompt_tokens + self.completion_tokens


class TraceError(_Frozen):
    stage: str
    message: str
    raw_head: str = ""


class QueryTrace(_Frozen):
    query: str
    query_class: Optional[QueryClass] = Field(default=None, alias="class")
    max_iter: int = Field(default=3, ge=1)
    iterations: Tuple[IterationRecord, ...] = ()
    final_evidence: Tuple[Chunk, ...] = ()
    answer: Optional[Answer] = None
    accounting: Accounting = Accounting()
    calls: Tuple[CallRecord, ...] = ()
    error: Optional[TraceError] = None
    violations: Tuple[str, ...] = ()

    @property
    def aborted(self) -> bool:
        return self.error is not None

    def to_json(self, indent: Optional[int] = None) -> str:
        return self.model_dump_json(by_alias=True, indent=indent)

    @classmethod
    def from_json(cls, raw: str) -> "QueryTrace":
        return cls.model_validate_json(raw)


def validate_trace(trace: QueryTrace, chunk_limit: int = DEFAULT_CHUNK_LIMIT) -> List[str]:
    """
    检查 trace 是否满足全部类型不变量

    Returns:
        违规描述列表；为空表示合法。违规是数据而不是异常。
    """
    violations: List[str] = []

    if len(trace.iterations) > trace.max_iter:
        violations.append(f"iterations {len(trace.iterations)} > max_iter {trace.max_iter}")

    seen_retrieved = set()
    for position, record in enumerate(trace.iterations, start=1):
        if record.index != position:
            violations.append(f"iteration index {record.index} at position {position}")
        for ids in record.retrieved_ids:
            seen_retrieved.update(ids)
        seen_retrieved.update(record.injected_ids)
        stray = sorted(set(record.discarded_ids) - seen_retrieved)
        for chunk_id in stray:
            violations.append(f"iteration {record.index} discarded id {chunk_id} was never retrieved")
        overlap = sorted(set(record.discarded_ids) & set(record.kept_ids))
        for chunk_id in overlap:
            violations.append(f"iteration {record.index} chunk {chunk_id} both kept and discarded")
        if record.sea is not None and record.sea.sufficient and not record.sea.gaps_empty:
            violations.append(
                f"iteration {record.index} sea sufficient but remaining_gaps {record.sea.remaining_gaps!r}")

    evidence_ids = [chunk.id for chunk in trace.final_evidence]
    if len(set(evidence_ids)) != len(evidence_ids):
        violations.append("final_evidence contains duplicate chunk ids")
    dims = set()
    for chunk in trace.final_evidence:
        if chunk.token_count > chunk_limit:
            violations.append(f"chunk {chunk.id} token_count {chunk.token_count} > limit {chunk_limit}")
        if chunk.embedding is not None:
            dims.add(len(chunk.embedding))
    if len(dims) > 1:
        violations.append(f"final_evidence embeddings have mixed dimensions {sorted(dims)}")

    if trace.answer is not None:
        n_evidence = len(trace.final_evidence)
        for citation in trace.answer.citations:
            if not 1 <= citation <= n_evidence:
                violations.append(f"citation {citation} out of range 1..{n_evidence}")

    accounting = trace.accounting
    if accounting.api_calls != len(trace.calls):
        violations.append(f"api_calls {accounting.api_calls} != recorded calls {len(trace.calls)}")
    prompt_sum = sum(call.prompt_tokens for call in trace.calls)
    completion_sum = sum(call.completion_tokens for call in trace.calls)
    if accounting.prompt_tokens != prompt_sum:
        violations.append(f"prompt_tokens {accounting.prompt_tokens} != sum over calls {prompt_sum}")
    if accounting.completion_tokens != completion_sum:
        violations.append(f"completion_tokens {accounting.completion_tokens} != sum over calls {completion_sum}")

    return violations
