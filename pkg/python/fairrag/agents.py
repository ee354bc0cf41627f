# -*- coding: utf-8 -*-
"""
Agent prompt 渲染与输出解析

模板以 UTF-8 文本文件形式放在 prompts/ 下，占位符语法为单花括号 {name}。
每个解析器要么返回类型化结果，要么抛出携带原始文本的 ParseError。
"""
import json
import re
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Dict, FrozenSet, List, Literal, Mapping, Optional, Sequence, Tuple, Union

import structlog
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from .domain import Answer, Chunk, Disclaimer, QueryClass, SEAReport, SubQuery, SubQueryOrigin
from .errors import JudgeParseError, ParseError, TemplateError

logger = structlog.get_logger(__name__)

DEFAULT_PROMPTS_DIR = Path(__file__).parent / "prompts"
NO_EVIDENCE_TEXT = "No evidence collected."

_PLACEHOLDER_RE = re.compile(r"\{([A-Za-z_][A-Za-z0-9_]*)\}")


# ==================== 模板 ====================

@dataclass(frozen=True)
class PromptTemplate:
    name: str
    body: str

    @property
    def required(self) -> FrozenSet[str]:
        return frozenset(_PLACEHOLDER_RE.findall(self.body))

    def render(self, bindings: Mapping[str, str]) -> str:
        """精确替换，不转义；绑定值中的花括号不会被二次展开"""
        missing = sorted(self.required - set(bindings))
        if missing:
            raise TemplateError(f"template {self.name!r} has unbound placeholder(s): {', '.join(missing)}")
        return _PLACEHOLDER_RE.sub(lambda m: str(bindings[m.group(1)]), self.body)


class TemplateLibrary:
    """按名字（相对 prompts 目录、不含扩展名）加载并缓存模板"""

    def __init__(self, prompts_dir: Optional[Union[str, Path]] = None):
        self.prompts_dir = Path(prompts_dir) if prompts_dir else DEFAULT_PROMPTS_DIR
        self._cache: Dict[str, PromptTemplate] = {}

    def get(self, name: str) -> PromptTemplate:
        if name not in self._cache:
            path = self.prompts_dir / f"{name}.txt"
            try:
                body = path.read_text(encoding="utf-8")
            except OSError as e:
                raise TemplateError(f"cannot read prompt template {path}: {e}") from e
            self._cache[name] = PromptTemplate(name, body)
        return self._cache[name]

    def render(self, name: str, **bindings: str) -> str:
        return self.get(name).render(bindings)


# ==================== 证据格式化 ====================

def format_numbered_evidence(chunks: Sequence[Chunk]) -> str:
    """生成 SEA / generator 用的 [n] 编号证据，从 1 开始"""
    if not chunks:
        return NO_EVIDENCE_TEXT
    return "\n\n".join(
        f"[{number}] Source_URL: {chunk.source_url}\n{chunk.text}"
        for number, chunk in enumerate(chunks, start=1)
    )


def temp_doc_ids(count: int) -> List[str]:
    return [f"doc_{number}" for number in range(1, count + 1)]


def format_filter_batch(chunks: Sequence[Chunk]) -> str:
    return "\n\n".join(f"[{doc_id}]: {chunk.text}" for doc_id, chunk in zip(temp_doc_ids(len(chunks)), chunks))


def format_query_list(queries: Sequence[Union[SubQuery, str]]) -> str:
    return "\n".join(f"- {q.text if isinstance(q, SubQuery) else q}" for q in queries)


# ==================== 验证器 ====================

_LABEL_RE = re.compile(r"\b(" + "|".join(c.value for c in QueryClass) + r")\b")
_SELECTED_RE = re.compile(r"selected\s+label", re.IGNORECASE)


def parse_validation(raw: str, lenient: bool = True) -> QueryClass:
    """
    取最后一个 "Selected Label" 行上（或其下一行）的标签

    lenient 模式下，整段输出只有一个标签也接受。
    """
    lines = raw.splitlines()
    label = None
    for position, line in enumerate(lines):
        marker = _SELECTED_RE.search(line)
        if not marker:
            continue
        found = _LABEL_RE.search(line[marker.end():])
        if found is None:
            following = next((candidate for candidate in lines[position + 1:] if candidate.strip()), "")
            found = _LABEL_RE.search(following)
        if found is not None:
            label = found.group(1)

    if label is None and lenient:
        bare = raw.strip().strip("\"'`*. ")
        if bare in {c.value for c in QueryClass}:
            label = bare

    if label is None:
        raise ParseError("validator", "no recognizable query class label", raw)
    return QueryClass.parse(label)


# ==================== 子查询列表 ====================

_QUERY_HEADER_RE = re.compile(r"(optimized|improved)\s+queries", re.IGNORECASE)
_LIST_ITEM_RE = re.compile(r"^\s*(?:[-*•–]|\d+\s*[.)\-])\s+(.*\S)\s*$")


def parse_query_list(raw: str, min_count: int = 1, max_count: int = 4,
                     origin: SubQueryOrigin = SubQueryOrigin.DECOMPOSITION, iteration: int = 1,
                     agent: str = "decomposer") -> List[SubQuery]:
    """收集（最后一个）标题之后的 "-" 或编号行；超过 max_count 截断，少于 min_count 报错"""
    lines = raw.splitlines()
    start = 0
    for position, line in enumerate(lines):
        if _QUERY_HEADER_RE.search(line):
            start = position + 1

    texts: List[str] = []
    for line in lines[start:]:
        match = _LIST_ITEM_RE.match(line)
        if not match:
            continue
        text = match.group(1).strip().strip("\"'").replace("**", "").strip()
        if text and text not in texts:
            texts.append(text)

    if len(texts) < min_count:
        raise ParseError(agent, f"expected at least {min_count} queries, got {len(texts)}", raw)
    if len(texts) > max_count:
        logger.warning("query list truncated", agent=agent, got=len(texts), kept=max_count)
        texts = texts[:max_count]
    return [SubQuery(text=text, origin=origin, iteration=iteration) for text in texts]


# ==================== 过滤器 ====================

@dataclass(frozen=True)
class FilterVerdict:
    """unhelpful_ids 为本批临时 id（按批内顺序）；dropped_ids 为不在本批中的 id"""
    unhelpful_ids: Tuple[str, ...] = ()
    dropped_ids: Tuple[str, ...] = ()


_DOC_ID_RE = re.compile(r"\bdoc_\d+\b")
_NONE_RE = re.compile(r"\bnone\b", re.IGNORECASE)
_UNHELPFUL_HEADER_RE = re.compile(r"unhelpful\s+document\s+ids\s*:", re.IGNORECASE)


def parse_filter(raw: str, batch_ids: Sequence[str]) -> FilterVerdict:
    """"None" -> 空集合；否则提取所有 [doc_X]；批外 id 丢弃并告警"""
    if not batch_ids:
        raise ValueError("batch_ids must be non-empty")
    headers = list(_UNHELPFUL_HEADER_RE.finditer(raw))
    answer = raw[headers[-1].end():] if headers else raw
    mentioned = list(dict.fromkeys(_DOC_ID_RE.findall(answer)))
    if not mentioned:
        if _NONE_RE.search(answer):
            return FilterVerdict()
        raise ParseError("filter", "neither 'None' nor any [doc_X] id found", raw)

    batch = set(batch_ids)
    dropped = tuple(doc_id for doc_id in mentioned if doc_id not in batch)
    if dropped:
        logger.warning("filter named ids outside the batch", dropped=list(dropped), batch_size=len(batch_ids))
    unhelpful = tuple(doc_id for doc_id in batch_ids if doc_id in set(mentioned))
    return FilterVerdict(unhelpful_ids=unhelpful, dropped_ids=dropped)


# ==================== SEA ====================

_SEA_FIELDS = {
    "main goal": "main_goal",
    "required findings": "required_findings",
    "confirmed findings": "confirmed_findings",
    "remaining gaps": "remaining_gaps",
    "conclusion": "conclusion",
    "sufficient": "sufficient",
    "is_sufficient": "sufficient",
}
_SEA_LABEL_RE = re.compile(
    r"^(main goal|required findings|confirmed findings|remaining gaps|conclusion|is_sufficient|sufficient)\s*:\s*(.*)$",
    re.IGNORECASE)
_SEA_SECTION_RE = re.compile(r"^\.?\d+\.?\s*(mission deconstruction|intelligence synthesis|final assessment)",
                             re.IGNORECASE)
_BULLET_RE = re.compile(r"^(?:[-*•]|\d+[.)])\s+")


def _clean_sea_line(line: str) -> str:
    return line.replace("**", "").strip().lstrip("-*• ").strip()


def parse_sea(raw: str) -> SEAReport:
    """解析结构化证据评估输出；缺少 Sufficient 行或取值不是 Yes/No 时报错"""
    values: Dict[str, List[str]] = {}
    findings_items: List[str] = []
    current: Optional[str] = None

    for line in raw.splitlines():
        stripped = line.strip()
        if not stripped:
            continue
        if _SEA_SECTION_RE.match(stripped.replace("**", "")):
            current = None
            continue
        cleaned = _clean_sea_line(stripped)
        match = _SEA_LABEL_RE.match(cleaned)
        if match:
            current = _SEA_FIELDS[match.group(1).lower()]
            values[current] = [match.group(2).strip()] if match.group(2).strip() else []
            continue
        if current is None:
            continue
        if current == "required_findings" and _BULLET_RE.match(stripped):
            findings_items.append(_BULLET_RE.sub("", stripped).replace("**", "").strip())
        else:
            values[current].append(cleaned)

    if "sufficient" not in values or not values["sufficient"]:
        raise ParseError("sea", "missing 'Sufficient:' verdict", raw)
    word = re.match(r"[\"'\[]*([A-Za-z]+)", values["sufficient"][0])
    verdict = word.group(1).lower() if word else ""
    if verdict not in ("yes", "no"):
        raise ParseError("sea", f"'Sufficient' must be Yes or No, got {values['sufficient'][0]!r}", raw)

    findings: List[str] = []
    for part in values.get("required_findings", []):
        findings.extend(item.strip() for item in part.split(";") if item.strip())
    findings.extend(item for item in findings_items if item)

    def joined(key: str, default: str = "") -> str:
        text = " ".join(values.get(key, [])).strip()
        return text or default

    return SEAReport(
        main_goal=joined("main_goal"),
        required_findings=tuple(findings),
        confirmed_findings=joined("confirmed_findings"),
        remaining_gaps=joined("remaining_gaps", "None"),
        conclusion=joined("conclusion"),
        sufficient=verdict == "yes",
    )


# ==================== 最终答案 ====================

FATWA_SENTINEL = "مرجع صدور فتوا نیستم"
PARTIAL_EVIDENCE_SENTINEL = "اطلاعات کاملی برای پاسخ قطعی"
NO_EVIDENCE_SENTINEL = "شواهد ارائه شده حاوی اطلاعات مرتبطی"

_CITATION_RE = re.compile(r"\[(\d+(?:\s*[,،]\s*\d+)*)\]")


def parse_answer(raw: str, n_evidence: int) -> Answer:
    """提取 [k] 引用（按首次出现顺序去重）与三种波斯语提示语；正文原样保留"""
    citations: List[int] = []
    for group in _CITATION_RE.findall(raw):
        for number in re.split(r"\s*[,،]\s*", group):
            value = int(number)
            if value not in citations:
                citations.append(value)
    out_of_range = [c for c in citations if not 1 <= c <= n_evidence]
    if out_of_range:
        logger.warning("answer cites evidence out of range", citations=out_of_range, n_evidence=n_evidence)

    disclaimers: List[Disclaimer] = []
    if FATWA_SENTINEL in raw:
        disclaimers.append(Disclaimer.FATWA_WARNING)
    if PARTIAL_EVIDENCE_SENTINEL in raw:
        disclaimers.append(Disclaimer.PARTIAL_EVIDENCE)
    if NO_EVIDENCE_SENTINEL in raw:
        disclaimers.append(Disclaimer.NO_EVIDENCE)
    return Answer(text=raw, citations=tuple(citations), disclaimers=tuple(disclaimers))


# ==================== Judge 结果 ====================

class JudgeKind(str, Enum):
    DECOMPOSITION_SCORE = "decomposition_score"
    FILTER_AUDIT = "filter_audit"
    SUFFICIENCY = "sufficiency"
    REFINEMENT_SCORE = "refinement_score"
    CONTEXT_RELEVANCE = "context_relevance"
    FAITHFULNESS = "faithfulness"
    RELEVANCE_CORRECTNESS = "relevance_correctness"
    NEGATIVE_REJECTION = "negative_rejection"
    NOISE_ROBUSTNESS = "noise_robustness"
    ITERATIVE_RANKING = "iterative_ranking"
    FAILURE_MODE = "failure_mode"

    @property
    def template_name(self) -> str:
        if self is JudgeKind.FAILURE_MODE:
            return "failure_analysis"
        return f"judges/{self.value}"


FAILURE_CATEGORIES = (
    "Query Decomposition Error",
    "Retrieval Failure",
    "Evidence Filtering Error",
    "SEA Error",
    "Query Refinement Error",
    "Generation Failure",
)

Score = Field(ge=1.0, le=5.0)


class _Verdict(BaseModel):
    model_config = ConfigDict(frozen=True, extra="ignore")


class ScoreVerdict(_Verdict):
    score: float = Score
    reasoning: str = ""


class FilterAuditVerdict(_Verdict):
    incorrectly_kept_ids: Tuple[str, ...] = ()
    incorrectly_discarded_ids: Tuple[str, ...] = ()

    @field_validator("incorrectly_kept_ids", "incorrectly_discarded_ids", mode="before")
    @classmethod
    def _as_list(cls, value):
        if value is None:
            return ()
        if isinstance(value, str):
            return tuple(part.strip(" []\"'") for part in value.split(",") if part.strip(" []\"'"))
        return value


class SufficiencyVerdict(_Verdict):
    is_sufficient: bool
    reasoning: str = ""


class DocScore(_Verdict):
    doc_id: str
    score: float = Score


class ContextRelevanceVerdict(_Verdict):
    relevance_scores: Tuple[DocScore, ...] = ()

    @property
    def mean(self) -> Optional[float]:
        if not self.relevance_scores:
            return None
        return sum(item.score for item in self.relevance_scores) / len(self.relevance_scores)


class FaithfulnessVerdict(_Verdict):
    faithfulness_verdict: Literal["Fully Faithful", "Partially Faithful", "Not Faithful"]
    reasoning: str = ""


class RelevanceCorrectnessVerdict(_Verdict):
    relevance_score: float = Score
    correctness_score: float = Score
    reasoning: str = ""


class NegativeRejectionVerdict(_Verdict):
    correctly_rejected: bool


class NoiseRobustnessVerdict(_Verdict):
    is_robust: bool
    is_correct: bool
    reasoning: str = ""


class IterativeRankingVerdict(_Verdict):
    ranking: str
    reasoning: str = ""

    @property
    def order(self) -> List[str]:
        return [part.strip(" '\"") for part in self.ranking.split(",") if part.strip(" '\"")]


class FailureVerdict(_Verdict):
    failure_category: Literal[FAILURE_CATEGORIES]
    reasoning: str = ""
    root_cause_analysis: str = ""
    suggested_improvement: str = ""


VERDICT_MODELS = {
    JudgeKind.DECOMPOSITION_SCORE: ScoreVerdict,
    JudgeKind.FILTER_AUDIT: FilterAuditVerdict,
    JudgeKind.SUFFICIENCY: SufficiencyVerdict,
    JudgeKind.REFINEMENT_SCORE: ScoreVerdict,
    JudgeKind.CONTEXT_RELEVANCE: ContextRelevanceVerdict,
    JudgeKind.FAITHFULNESS: FaithfulnessVerdict,
    JudgeKind.RELEVANCE_CORRECTNESS: RelevanceCorrectnessVerdict,
    JudgeKind.NEGATIVE_REJECTION: NegativeRejectionVerdict,
    JudgeKind.NOISE_ROBUSTNESS: NoiseRobustnessVerdict,
    JudgeKind.ITERATIVE_RANKING: IterativeRankingVerdict,
    JudgeKind.FAILURE_MODE: FailureVerdict,
}

_FENCE_RE = re.compile(r"```(?:json)?", re.IGNORECASE)


def parse_judge_json(raw: str, kind: Union[JudgeKind, str]) -> _Verdict:
    """去掉代码围栏，截取第一个 { 到最后一个 }，按 kind 对应的模型校验"""
    kind = JudgeKind(kind)
    agent = f"judge:{kind.value}"
    text = _FENCE_RE.sub("", raw)
    start, end = text.find("{"), text.rfind("}")
    if start < 0 or end <= start:
        raise JudgeParseError(agent, "no JSON object found", raw)
    try:
        payload = json.loads(text[start:end + 1])
    except json.JSONDecodeError as e:
        raise JudgeParseError(agent, f"malformed JSON: {e.msg}", raw) from e
    if not isinstance(payload, dict):
        raise JudgeParseError(agent, "verdict is not a JSON object", raw)
    try:
        return VERDICT_MODELS[kind].model_validate(payload)
    except ValidationError as e:
        first = e.errors()[0]
        location = ".".join(str(part) for part in first["loc"])
        raise JudgeParseError(agent, f"invalid verdict field {location!r}: {first['msg']}", raw) from e
