# -*- coding: utf-8 -*-
"""
fairrag 编排器

一次查询 = 分诊/分解 -> 每个子查询的混合检索 -> 过滤、SEA、终止或改写的循环 -> 有据生成。
所有阶段写入同一个 QueryTrace；阶段失败不会抛出 run_query，而是记录为 trace.error。
"""
import asyncio
import time
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple, TypeVar

import structlog

from .agents import (
    TemplateLibrary, format_filter_batch, format_numbered_evidence, format_query_list, parse_answer,
    parse_filter, parse_query_list, parse_sea, parse_validation, temp_doc_ids,
)
from .domain import (
    DEFAULT_CHUNK_LIMIT, Accounting, Answer, Chunk, Disclaimer, IterationRecord, QueryClass, QueryTrace,
    SEAReport, SubQuery, SubQueryOrigin, TraceError, validate_trace,
)
from .econ import LatencyModel
from .embeddings import EmbeddingProvider
from .errors import ConfigError, FairRagError, ParseError
from .llm_gateway import AgentRole, CallLedger, LLMGateway, RoutingTable, route, track_calls
from .retrieval import HybridRetriever, Index

logger = structlog.get_logger(__name__)

REJECTION_TEXT = (
    "با پوزش، این پرسش خارج از حوزه‌ای است که این دستیار معارف اسلامی به آن پاسخ می‌دهد"
    " یا با اصول اخلاقی سازگار نیست؛ بنابراین نمی‌توانم به آن پاسخ دهم."
)
RAW_HEAD_CHARS = 200
PIPELINE_MODES = ("fair", "naive")

T = TypeVar("T")


@dataclass
class PipelineConfig:
    """流水线参数"""
    max_iter: int = 3
    top_k: int = 3
    filter_batch_size: int = 10
    routing: RoutingTable = field(default_factory=RoutingTable.default)
    sparse_only_fallback: bool = False
    filter_memoization: bool = True
    parse_retries: int = 1
    mode: str = "fair"
    latency: LatencyModel = field(default_factory=LatencyModel)
    chunk_limit: int = DEFAULT_CHUNK_LIMIT

    def __post_init__(self):
        if not 1 <= self.max_iter <= 4:
            raise ConfigError(f"max_iter must be in [1, 4], got {self.max_iter}")
        if self.top_k <= 0:
            raise ConfigError("top_k must be positive")
        if self.filter_batch_size <= 0:
            raise ConfigError("filter_batch_size must be positive")
        if self.parse_retries < 0:
            raise ConfigError("parse_retries must be non-negative")
        if self.mode not in PIPELINE_MODES:
            raise ConfigError(f"pipeline mode must be one of {PIPELINE_MODES}, got {self.mode!r}")


class EvidencePool:
    """跨迭代的证据池：kept 按首次保留顺序排列，kept 与 discarded 不相交"""

    def __init__(self):
        self.kept: "OrderedDict[str, Chunk]" = OrderedDict()
        self.discarded: set = set()
        self.provenance: Dict[str, List[Tuple[int, str]]] = {}

    def note(self, chunk_id: str, iteration: int, sub_query: str):
        self.provenance.setdefault(chunk_id, []).append((iteration, sub_query))

    def keep(self, chunk: Chunk):
        self.discarded.discard(chunk.id)
        self.kept.setdefault(chunk.id, chunk)

    def discard(self, chunk_id: str):
        self.kept.pop(chunk_id, None)
        self.discarded.add(chunk_id)

    @property
    def kept_chunks(self) -> List[Chunk]:
        return list(self.kept.values())

    @property
    def kept_ids(self) -> Tuple[str, ...]:
        return tuple(self.kept)


class _StageFailure(Exception):
    def __init__(self, stage: str, error: Exception):
        super().__init__(str(error))
        self.stage = stage
        self.error = error


@dataclass
class _RunState:
    query_class: Optional[QueryClass] = None
    iterations: List[IterationRecord] = field(default_factory=list)
    final_evidence: Tuple[Chunk, ...] = ()
    answer: Optional[Answer] = None


class FairRagPipeline:
    """
    编排器

    索引只读、可在并发查询间共享；每次 run_query 持有自己的证据池与调用账本。
    """

    def __init__(self, index: Index, gateway: LLMGateway, provider: Optional[EmbeddingProvider] = None,
                 config: Optional[PipelineConfig] = None, library: Optional[TemplateLibrary] = None):
        self.index = index
        self.gateway = gateway
        self.config = config or PipelineConfig()
        self.library = library or TemplateLibrary()
        self.retriever = HybridRetriever(index, provider, self.config.top_k, self.config.sparse_only_fallback)

    # ==================== 公共入口 ====================

    async def run_query(self, query: str, distractors: Sequence[Chunk] = ()) -> QueryTrace:
        """执行一次完整查询，返回 trace（包含失败信息与不变量检查结果）"""
        started = time.perf_counter()
        state = _RunState()
        error: Optional[TraceError] = None

        with track_calls() as ledger:
            try:
                if self.config.mode == "naive":
                    await self._run_naive(query, state, distractors)
                else:
                    await self._run_fair(query, state, distractors)
            except _StageFailure as failure:
                error = self._trace_error(failure)
                logger.warning("query aborted", stage=error.stage, error=error.message)

        trace = self._assemble(query, state, ledger, error)
        logger.info("query finished", query_class=trace.query_class.value if trace.query_class else None,
                    iterations=len(trace.iterations), api_calls=trace.accounting.api_calls,
                    total_tokens=trace.accounting.total_tokens, aborted=trace.aborted,
                    wall_clock_s=round(time.perf_counter() - started, 3))
        return trace

    # ==================== FAIR 流程 ====================

    async def _run_fair(self, query: str, state: _RunState, distractors: Sequence[Chunk]):
        routing = self.config.routing

        query_class = await self._ask_parsed(
            AgentRole.VALIDATOR, route(AgentRole.VALIDATOR, None, routing),
            self.library.render("validator", user_query=query), parse_validation)
        state.query_class = query_class
        logger.debug("query classified", query_class=query_class.value)

        if query_class.is_rejection:
            state.answer = Answer(text=REJECTION_TEXT, disclaimers=(Disclaimer.REJECTION,))
            return

        if query_class == QueryClass.VALID_OBVIOUS:
            response = await self._ask(AgentRole.DIRECT_ANSWER, route(AgentRole.DIRECT_ANSWER, query_class, routing),
                                       self.library.render("direct_answer", user_query=query))
            state.answer = parse_answer(response.text, 0)
            return

        sub_queries = await self._ask_parsed(
            AgentRole.DECOMPOSER, route(AgentRole.DECOMPOSER, query_class, routing),
            self.library.render("decomposer", user_query=query),
            lambda raw: parse_query_list(raw, origin=SubQueryOrigin.DECOMPOSITION, iteration=1, agent="decomposer"))

        pool = EvidencePool()
        previous_queries: List[SubQuery] = []
        for iteration in range(1, self.config.max_iter + 1):
            retrieved = await self._retrieve_all(sub_queries)
            injected = tuple(distractors) if iteration == 1 else ()
            candidates = self._collect_candidates(pool, sub_queries, retrieved, injected, iteration)

            discarded: Tuple[str, ...] = ()
            if candidates:
                discarded = await self.filter_evidence(candidates, query, pool)

            previous_queries.extend(sub_queries)
            last = iteration == self.config.max_iter
            sea, refined = await self.assess_and_refine(pool, query, previous_queries, iteration, refine=not last)

            state.iterations.append(IterationRecord(
                index=iteration,
                sub_queries=tuple(sub_queries),
                retrieved_ids=tuple(tuple(chunk.id for chunk in chunks) for chunks in retrieved),
                injected_ids=tuple(chunk.id for chunk in injected),
                discarded_ids=discarded,
                kept_ids=pool.kept_ids,
                sea=sea,
            ))
            logger.debug("iteration finished", iteration=iteration, candidates=len(candidates),
                         discarded=len(discarded), kept=len(pool.kept), sufficient=sea.sufficient)
            if sea.sufficient or refined is None:
                break
            sub_queries = refined

        evidence = pool.kept_chunks
        response = await self._ask(
            AgentRole.GENERATOR, route(AgentRole.GENERATOR, query_class, routing),
            self.library.render("generator", combined_evidence=format_numbered_evidence(evidence),
                                original_query=query))
        state.final_evidence = tuple(evidence)
        state.answer = parse_answer(response.text, len(evidence))

    async def filter_evidence(self, candidates: Sequence[Chunk], original_query: str,
                              pool: EvidencePool) -> Tuple[str, ...]:
        """
        分批过滤候选证据，并把结果写回证据池

        Returns:
            本次被判为无用的 chunk id（按候选顺序）
        """
        if not candidates:
            raise ValueError("filter_evidence needs at least one candidate")
        tier = route(AgentRole.FILTER, None, self.config.routing)
        size = self.config.filter_batch_size
        discarded: List[str] = []

        for batch_number, start in enumerate(range(0, len(candidates), size), start=1):
            batch = list(candidates[start:start + size])
            batch_ids = temp_doc_ids(len(batch))
            prompt = self.library.render(
                "filter",
                original_query=original_query,
                batch_number=str(batch_number),
                numbered_candidates_text_for_prompt=format_filter_batch(batch),
            )
            verdict = await self._ask_parsed(AgentRole.FILTER, tier, prompt,
                                             lambda raw, ids=batch_ids: parse_filter(raw, ids))
            unhelpful = set(verdict.unhelpful_ids)
            for temp_id, chunk in zip(batch_ids, batch):
                if temp_id in unhelpful:
                    pool.discard(chunk.id)
                    discarded.append(chunk.id)
                else:
                    pool.keep(chunk)
            logger.debug("filter batch", batch_number=batch_number, size=len(batch), unhelpful=len(unhelpful))
        return tuple(discarded)

    async def assess_and_refine(self, pool: EvidencePool, original_query: str, previous_queries: Sequence[SubQuery],
                                iteration: int = 1, refine: bool = True) -> Tuple[SEAReport, Optional[List[SubQuery]]]:
        """SEA 评估已保留证据；不充分且允许改写时调用 refiner 生成下一轮子查询"""
        routing = self.config.routing
        sea = await self._ask_parsed(
            AgentRole.SEA, route(AgentRole.SEA, None, routing),
            self.library.render("sea", original_query=original_query,
                                combined_evidence=format_numbered_evidence(pool.kept_chunks)),
            parse_sea)
        if sea.sufficient or not refine:
            return sea, None

        refined = await self._ask_parsed(
            AgentRole.REFINER, route(AgentRole.REFINER, None, routing),
            self.library.render("refiner", original_query=original_query, analysis_summary=sea.analysis_summary(),
                                combined_previous_queries=format_query_list(previous_queries)),
            lambda raw: parse_query_list(raw, origin=SubQueryOrigin.REFINEMENT, iteration=iteration + 1,
                                         agent="refiner"))
        return sea, refined

    # ==================== 单轮基线 ====================

    async def _run_naive(self, query: str, state: _RunState, distractors: Sequence[Chunk]):
        """一次检索 + 一次生成，无分诊、过滤与评估"""
        sub_query = SubQuery(text=query, origin=SubQueryOrigin.DECOMPOSITION, iteration=1)
        retrieved = await self._retrieve_all([sub_query])
        pool = EvidencePool()
        self._collect_candidates(pool, [sub_query], retrieved, tuple(distractors), 1)
        for chunks in retrieved:
            for chunk in chunks:
                pool.keep(chunk)
        for chunk in distractors:
            pool.keep(chunk)

        state.iterations.append(IterationRecord(
            index=1,
            sub_queries=(sub_query,),
            retrieved_ids=tuple(tuple(chunk.id for chunk in chunks) for chunks in retrieved),
            injected_ids=tuple(chunk.id for chunk in distractors),
            kept_ids=pool.kept_ids,
        ))
        evidence = pool.kept_chunks
        response = await self._ask(
            AgentRole.GENERATOR, self.config.routing.roles[AgentRole.GENERATOR],
            self.library.render("generator", combined_evidence=format_numbered_evidence(evidence),
                                original_query=query))
        state.final_evidence = tuple(evidence)
        state.answer = parse_answer(response.text, len(evidence))

    # ==================== 内部工具 ====================

    async def _retrieve_all(self, sub_queries: Sequence[SubQuery]) -> List[List[Chunk]]:
        """子查询之间相互独立，放到工作线程里并发检索"""
        try:
            return list(await asyncio.gather(
                *(asyncio.to_thread(self.retriever.retrieve, sub_query.text) for sub_query in sub_queries)))
        except FairRagError as e:
            raise _StageFailure("retrieval", e) from e

    def _collect_candidates(self, pool: EvidencePool, sub_queries: Sequence[SubQuery],
                            retrieved: Sequence[Sequence[Chunk]], injected: Sequence[Chunk],
                            iteration: int) -> List[Chunk]:
        """汇总本轮新候选：去重，跳过已保留的，开启记忆时跳过已丢弃的"""
        candidates: List[Chunk] = []
        seen = set()
        pairs = [(sub_query.text, chunk) for sub_query, chunks in zip(sub_queries, retrieved) for chunk in chunks]
        pairs.extend(("<injected>", chunk) for chunk in injected)
        for source, chunk in pairs:
            pool.note(chunk.id, iteration, source)
            if chunk.id in seen or chunk.id in pool.kept:
                continue
            if self.config.filter_memoization and chunk.id in pool.discarded:
                continue
            seen.add(chunk.id)
            candidates.append(chunk)
        return candidates

    async def _ask(self, role: AgentRole, tier, prompt: str):
        try:
            return await self.gateway.ask(role, tier, prompt)
        except FairRagError as e:
            raise _StageFailure(role.value, e) from e

    async def _ask_parsed(self, role: AgentRole, tier, prompt: str, parser: Callable[[str], T]) -> T:
        """调用并解析；解析失败时按 parse_retries 重试同一个 prompt"""
        last_error: Optional[ParseError] = None
        for attempt in range(self.config.parse_retries + 1):
            response = await self._ask(role, tier, prompt)
            try:
                return parser(response.text)
            except ParseError as e:
                last_error = e
                logger.warning("agent output unparseable", agent=e.agent, attempt=attempt + 1, error=str(e))
        raise _StageFailure(role.value, last_error)

    @staticmethod
    def _trace_error(failure: _StageFailure) -> TraceError:
        raw = getattr(failure.error, "raw", "") or getattr(failure.error, "prompt_head", "")
        return TraceError(stage=failure.stage, message=str(failure.error), raw_head=raw[:RAW_HEAD_CHARS])

    def _assemble(self, query: str, state: _RunState, ledger: CallLedger,
                  error: Optional[TraceError]) -> QueryTrace:
        calls = tuple(ledger.records)
        prompt_tokens = sum(call.prompt_tokens for call in calls)
        completion_tokens = sum(call.completion_tokens for call in calls)
        accounting = Accounting(
            api_calls=len(calls),
            prompt_tokens=prompt_tokens,
            completion_tokens=completion_tokens,
            cost_usd=sum(call.cost_usd for call in calls),
            latency_s=self.config.latency.predict(prompt_tokens + completion_tokens, len(calls)),
        )
        trace = QueryTrace(
            query=query,
            query_class=state.query_class,
            max_iter=self.config.max_iter,
            iterations=tuple(state.iterations),
            final_evidence=state.final_evidence if error is None else (),
            answer=state.answer if error is None else None,
            accounting=accounting,
            calls=calls,
            error=error,
        )
        violations = validate_trace(trace, self.config.chunk_limit)
        if violations:
            logger.warning("trace invariant violations", count=len(violations), first=violations[0])
        return trace.model_copy(update={"violations": tuple(violations)})
