# -*- coding: utf-8 -*-
"""
评估框架

跑流水线 -> 按类别调用 LLM judge -> 汇总指标。结果文件每行一条
{record, trace, verdicts, judge_errors}，report 命令只依赖这个文件重算全部数字。
"""
import asyncio
import json
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import pandas as pd
import structlog
from pydantic import ValidationError, model_validator

from .agents import (
    FAILURE_CATEGORIES, ContextRelevanceVerdict, FailureVerdict, FaithfulnessVerdict, FilterAuditVerdict,
    IterativeRankingVerdict, JudgeKind, NegativeRejectionVerdict, NoiseRobustnessVerdict,
    RelevanceCorrectnessVerdict, ScoreVerdict, SufficiencyVerdict, TemplateLibrary, format_query_list,
    parse_judge_json,
)
from .domain import Chunk, QueryTrace, TraceError, _Frozen
from .econ import summarize_traces
from .errors import CorpusError, FairRagError, JudgeParseError
from .ingest import iter_jsonl
from .llm_gateway import AgentRole, LLMGateway, route, RoutingTable
from .orchestrator import FairRagPipeline, PipelineConfig

logger = structlog.get_logger(__name__)

DEFAULT_CORRECTNESS_THRESHOLD = 4.0
ITERATION_LEVELS = (1, 2, 3, 4)
UNCLASSIFIED = "unclassified"


class EvalCategory(str, Enum):
    MULTIHOP = "multihop"
    NEGATIVE_REJECTION = "negative_rejection"
    NOISE = "noise"
    OBVIOUS = "obvious"


class EvalRecord(_Frozen):
    id: str
    question: str
    ground_truth: str = ""
    category: EvalCategory
    distractor_ids: Tuple[str, ...] = ()

    @model_validator(mode="after")
    def _noise_needs_distractors(self) -> "EvalRecord":
        if self.category == EvalCategory.NOISE and not self.distractor_ids:
            raise ValueError("noise records need a non-empty distractor_ids list")
        return self


class JudgeFailure(_Frozen):
    kind: str
    message: str


class RecordResult(_Frozen):
    """一条评估记录：verdicts 为 kind -> verdict 列表（sufficiency / refinement 每轮一条）"""
    record: EvalRecord
    trace: QueryTrace
    verdicts: Dict[str, Tuple[dict, ...]] = {}
    judge_errors: Tuple[JudgeFailure, ...] = ()

    def verdicts_of(self, kind: JudgeKind) -> Tuple[dict, ...]:
        return self.verdicts.get(kind.value, ())


def load_dataset(path, strict: bool = True) -> List[EvalRecord]:
    """读取评估集 JSONL；字段错误带行号抛出 CorpusError"""
    records = []
    for line_number, payload in iter_jsonl(Path(path), strict=strict):
        try:
            records.append(EvalRecord.model_validate(payload))
        except ValidationError as e:
            first = e.errors()[0]
            message = f"invalid eval record: {first['msg']} ({'.'.join(str(p) for p in first['loc'])})"
            if strict:
                raise CorpusError(message, line_number) from e
            logger.warning("skipping eval record", line=line_number, error=message)
    logger.info("eval dataset loaded", path=str(path), records=len(records))
    return records


def save_results(results: Iterable[RecordResult], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for result in results:
            f.write(result.model_dump_json(by_alias=True) + "\n")
    return path


def load_results(path) -> List[RecordResult]:
    results = []
    for line_number, payload in iter_jsonl(Path(path)):
        try:
            results.append(RecordResult.model_validate(payload))
        except ValidationError as e:
            raise CorpusError(f"invalid result row: {e.errors()[0]['msg']}", line_number) from e
    return results


# ==================== Judge ====================

def _format_docs(chunks: Iterable[Chunk]) -> str:
    text = "\n\n".join(f"[{chunk.id}] Source_URL: {chunk.source_url}\n{chunk.text}" for chunk in chunks)
    return text or "None"


class Judge:
    """LLM-as-Judge：独立网关 + 模板 + JSON 解析"""

    def __init__(self, gateway: LLMGateway, library: Optional[TemplateLibrary] = None,
                 routing: Optional[RoutingTable] = None):
        self.gateway = gateway
        self.library = library or TemplateLibrary()
        self.tier = route(AgentRole.JUDGE, None, routing or RoutingTable.default())

    async def __call__(self, kind: JudgeKind, **bindings: str):
        prompt = self.library.render(kind.template_name, **bindings)
        response = await self.gateway.ask(AgentRole.JUDGE, self.tier, prompt)
        return parse_judge_json(response.text, kind)


@dataclass
class _VerdictSink:
    verdicts: Dict[str, List[dict]] = field(default_factory=dict)
    errors: List[JudgeFailure] = field(default_factory=list)

    async def collect(self, judge: Judge, kind: JudgeKind, **bindings: str):
        try:
            verdict = await judge(kind, **bindings)
        except JudgeParseError as e:
            logger.warning("judge verdict unparseable", kind=kind.value, error=str(e))
            self.errors.append(JudgeFailure(kind=kind.value, message=str(e)))
            return None
        except FairRagError as e:
            logger.warning("judge call failed", kind=kind.value, error=str(e))
            self.errors.append(JudgeFailure(kind=kind.value, message=str(e)))
            return None
        self.verdicts.setdefault(kind.value, []).append(verdict.model_dump())
        return verdict


def _chunks(pipeline: FairRagPipeline, ids: Iterable[str]) -> List[Chunk]:
    return [pipeline.index.get(chunk_id) for chunk_id in ids if chunk_id in pipeline.index.chunks]


async def judge_record(record: EvalRecord, trace: QueryTrace, pipeline: FairRagPipeline,
                       judge: Judge) -> RecordResult:
    """按类别挑选 judge；中止的 trace 不评判"""
    sink = _VerdictSink()
    answer = trace.answer.text if trace.answer else ""
    if trace.aborted:
        return RecordResult(record=record, trace=trace)

    if record.category == EvalCategory.NEGATIVE_REJECTION:
        await sink.collect(judge, JudgeKind.NEGATIVE_REJECTION, question=record.question, final_answer=answer)
        return RecordResult(record=record, trace=trace, verdicts={k: tuple(v) for k, v in sink.verdicts.items()},
                            judge_errors=tuple(sink.errors))

    await sink.collect(judge, JudgeKind.RELEVANCE_CORRECTNESS, question=record.question,
                       ground_truth_answer=record.ground_truth, final_answer=answer)

    if record.category in (EvalCategory.MULTIHOP, EvalCategory.NOISE):
        final_docs = _format_docs(trace.final_evidence)
        await sink.collect(judge, JudgeKind.FAITHFULNESS, question=record.question, final_evidence=final_docs,
                           final_answer=answer)
        await sink.collect(judge, JudgeKind.CONTEXT_RELEVANCE, question=record.question, final_evidence=final_docs)

        if trace.iterations:
            first = trace.iterations[0]
            await sink.collect(judge, JudgeKind.DECOMPOSITION_SCORE, question=record.question,
                               sub_queries=format_query_list(first.sub_queries))
            discarded = [chunk_id for record_ in trace.iterations for chunk_id in record_.discarded_ids]
            await sink.collect(judge, JudgeKind.FILTER_AUDIT, question=record.question,
                               kept_docs=_format_docs(trace.final_evidence),
                               discarded_docs=_format_docs(_chunks(pipeline, dict.fromkeys(discarded))))

        for position, iteration in enumerate(trace.iterations):
            if iteration.sea is None:
                continue
            evidence = _format_docs(_chunks(pipeline, iteration.kept_ids))
            await sink.collect(judge, JudgeKind.SUFFICIENCY, question=record.question, evidence=evidence)
            if not iteration.sea.sufficient and position + 1 < len(trace.iterations):
                following = trace.iterations[position + 1]
                await sink.collect(judge, JudgeKind.REFINEMENT_SCORE, question=record.question, evidence=evidence,
                                   new_queries=format_query_list(following.sub_queries))

    if record.category == EvalCategory.NOISE:
        await sink.collect(judge, JudgeKind.NOISE_ROBUSTNESS, question=record.question,
                           ground_truth_answer=record.ground_truth,
                           final_evidence=_format_docs(trace.final_evidence), final_answer=answer)

    return RecordResult(record=record, trace=trace, verdicts={k: tuple(v) for k, v in sink.verdicts.items()},
                        judge_errors=tuple(sink.errors))


async def evaluate_record(record: EvalRecord, pipeline: FairRagPipeline, judge: Judge) -> RecordResult:
    distractors = []
    for chunk_id in record.distractor_ids:
        if chunk_id not in pipeline.index.chunks:
            raise CorpusError(f"record {record.id}: distractor {chunk_id!r} is not in the index")
        distractors.append(pipeline.index.get(chunk_id))
    trace = await pipeline.run_query(record.question, distractors=distractors)
    return await judge_record(record, trace, pipeline, judge)


def aborted_result(record: EvalRecord, error: Exception) -> RecordResult:
    """记录本身无法运行（例如干扰文档不在索引里）时，记为阶段 eval 中止"""
    trace = QueryTrace(query=record.question, error=TraceError(stage="eval", message=str(error)))
    return RecordResult(record=record, trace=trace)


async def run_eval(records: Sequence[EvalRecord], pipeline: FairRagPipeline, judge: Judge,
                   jobs: int = 4) -> List[RecordResult]:
    """并发评估（Semaphore 限制 jobs）；单条记录异常记为中止结果，不中断整批"""
    semaphore = asyncio.Semaphore(max(1, jobs))

    async def bounded(record: EvalRecord) -> RecordResult:
        async with semaphore:
            return await evaluate_record(record, pipeline, judge)

    outcomes = await asyncio.gather(*(bounded(record) for record in records), return_exceptions=True)
    results = []
    for record, outcome in zip(records, outcomes):
        if isinstance(outcome, Exception):
            logger.error("record evaluation failed", record_id=record.id, error=str(outcome))
            outcome = aborted_result(record, outcome)
        elif isinstance(outcome, BaseException):
            raise outcome
        results.append(outcome)
    logger.info("eval finished", records=len(records), evaluated=len(results),
                aborted=sum(1 for r in results if r.trace.aborted))
    return results


# ==================== 指标 ====================

def f1(precision: float, recall: float) -> float:
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def _filter_counts(kept_ids: Iterable[str], discarded_ids: Iterable[str],
                   verdict: FilterAuditVerdict) -> Tuple[int, int, int]:
    kept, discarded = set(kept_ids), set(discarded_ids)
    unknown = (set(verdict.incorrectly_kept_ids) - kept) | (set(verdict.incorrectly_discarded_ids) - discarded)
    if unknown:
        logger.warning("filter audit names ids outside kept/discarded", ids=sorted(unknown))
    wrong_kept = len(set(verdict.incorrectly_kept_ids) & kept)
    wrong_discarded = len(set(verdict.incorrectly_discarded_ids) & discarded)
    return len(kept), wrong_kept, wrong_discarded


def filter_audit_metrics(kept_ids: Iterable[str], discarded_ids: Iterable[str],
                         verdict: FilterAuditVerdict) -> Tuple[Optional[float], Optional[float]]:
    """单条记录的过滤精确率/召回率；kept 为空时精确率为 None"""
    kept, wrong_kept, wrong_discarded = _filter_counts(kept_ids, discarded_ids, verdict)
    correct = kept - wrong_kept
    precision = correct / kept if kept else None
    recall = correct / (correct + wrong_discarded) if correct + wrong_discarded else None
    return precision, recall


def _mean(values: Sequence[float]) -> Optional[float]:
    return sum(values) / len(values) if values else None


def _fraction(flags: Sequence[bool]) -> Optional[float]:
    return sum(1 for flag in flags if flag) / len(flags) if flags else None


class ComponentMetrics(_Frozen):
    decomposition_mean: Optional[float] = None
    filter_precision: Optional[float] = None
    filter_recall: Optional[float] = None
    filter_f1: Optional[float] = None
    sea_accuracy: Optional[float] = None
    sea_precision: Optional[float] = None
    sea_recall: Optional[float] = None
    sea_f1: Optional[float] = None
    refinement_mean: Optional[float] = None


class IterationMetrics(_Frozen):
    avg_rank: Dict[str, float] = {}
    improvement_rate: Dict[str, float] = {}
    evaluated: int = 0
    excluded: int = 0


class MetricsReport(_Frozen):
    records: int = 0
    aborted: int = 0
    judge_errors: int = 0
    answer_relevance_mean: Optional[float] = None
    correctness_mean: Optional[float] = None
    correctness_acc: Optional[float] = None
    faithfulness_fully_pct: Optional[float] = None
    context_relevance_mean: Optional[float] = None
    negative_rejection_acc: Optional[float] = None
    noise_robustness_acc: Optional[float] = None
    component: ComponentMetrics = ComponentMetrics()
    iteration: Optional[IterationMetrics] = None
    efficiency: Dict[str, float] = {}


def sea_metrics(pairs: Sequence[Tuple[bool, bool]]) -> Dict[str, Optional[float]]:
    """
    pairs 为 (SEA 判不充分, judge 判不充分)；"继续检索" 为正类
    """
    if not pairs:
        return {"accuracy": None, "precision": None, "recall": None, "f1": None}
    tp = sum(1 for predicted, actual in pairs if predicted and actual)
    fp = sum(1 for predicted, actual in pairs if predicted and not actual)
    fn = sum(1 for predicted, actual in pairs if not predicted and actual)
    accuracy = sum(1 for predicted, actual in pairs if predicted == actual) / len(pairs)
    precision = tp / (tp + fp) if tp + fp else None
    recall = tp / (tp + fn) if tp + fn else None
    score = f1(precision, recall) if precision is not None and recall is not None else None
    return {"accuracy": accuracy, "precision": precision, "recall": recall, "f1": score}


def aggregate(results: Sequence[RecordResult], threshold: float = DEFAULT_CORRECTNESS_THRESHOLD,
              iteration: Optional[IterationMetrics] = None) -> MetricsReport:
    """把每条记录的 verdict 归约成报告；无法解析的 verdict 已在 judge_errors 中，直接不计入"""
    relevance, correctness, faithful, context = [], [], [], []
    rejection, robust, decomposition, refinement = [], [], [], []
    filter_kept = filter_wrong_kept = filter_wrong_discarded = 0
    sea_pairs: List[Tuple[bool, bool]] = []

    for result in results:
        trace = result.trace
        for raw in result.verdicts_of(JudgeKind.RELEVANCE_CORRECTNESS):
            verdict = RelevanceCorrectnessVerdict.model_validate(raw)
            relevance.append(verdict.relevance_score)
            correctness.append(verdict.correctness_score)
        for raw in result.verdicts_of(JudgeKind.FAITHFULNESS):
            faithful.append(FaithfulnessVerdict.model_validate(raw).faithfulness_verdict == "Fully Faithful")
        for raw in result.verdicts_of(JudgeKind.CONTEXT_RELEVANCE):
            mean = ContextRelevanceVerdict.model_validate(raw).mean
            if mean is not None:
                context.append(mean)
        for raw in result.verdicts_of(JudgeKind.NEGATIVE_REJECTION):
            rejection.append(NegativeRejectionVerdict.model_validate(raw).correctly_rejected)
        for raw in result.verdicts_of(JudgeKind.NOISE_ROBUSTNESS):
            verdict = NoiseRobustnessVerdict.model_validate(raw)
            robust.append(verdict.is_robust and verdict.is_correct)
        for raw in result.verdicts_of(JudgeKind.DECOMPOSITION_SCORE):
            decomposition.append(ScoreVerdict.model_validate(raw).score)
        for raw in result.verdicts_of(JudgeKind.REFINEMENT_SCORE):
            refinement.append(ScoreVerdict.model_validate(raw).score)
        for raw in result.verdicts_of(JudgeKind.FILTER_AUDIT):
            discarded = [chunk_id for record in trace.iterations for chunk_id in record.discarded_ids]
            kept, wrong_kept, wrong_discarded = _filter_counts(
                (chunk.id for chunk in trace.final_evidence), discarded, FilterAuditVerdict.model_validate(raw))
            filter_kept += kept
            filter_wrong_kept += wrong_kept
            filter_wrong_discarded += wrong_discarded

        decisions = [record.sea for record in trace.iterations if record.sea is not None]
        audits = result.verdicts_of(JudgeKind.SUFFICIENCY)
        if len(audits) == len(decisions):
            for sea, raw in zip(decisions, audits):
                sea_pairs.append((not sea.sufficient, not SufficiencyVerdict.model_validate(raw).is_sufficient))
        elif audits:
            logger.warning("sufficiency audits do not line up with SEA decisions", record_id=result.record.id)

    correct_kept = filter_kept - filter_wrong_kept
    filter_precision = correct_kept / filter_kept if filter_kept else None
    recall_base = correct_kept + filter_wrong_discarded
    filter_recall = correct_kept / recall_base if recall_base else None
    sea = sea_metrics(sea_pairs)

    component = ComponentMetrics(
        decomposition_mean=_mean(decomposition),
        filter_precision=filter_precision,
        filter_recall=filter_recall,
        filter_f1=f1(filter_precision, filter_recall)
        if filter_precision is not None and filter_recall is not None else None,
        sea_accuracy=sea["accuracy"],
        sea_precision=sea["precision"],
        sea_recall=sea["recall"],
        sea_f1=sea["f1"],
        refinement_mean=_mean(refinement),
    )
    return MetricsReport(
        records=len(results),
        aborted=sum(1 for result in results if result.trace.aborted),
        judge_errors=sum(len(result.judge_errors) for result in results),
        answer_relevance_mean=_mean(relevance),
        correctness_mean=_mean(correctness),
        correctness_acc=_fraction([score >= threshold for score in correctness]),
        faithfulness_fully_pct=_fraction(faithful),
        context_relevance_mean=_mean(context),
        negative_rejection_acc=_fraction(rejection),
        noise_robustness_acc=_fraction(robust),
        component=component,
        iteration=iteration,
        efficiency=summarize_traces(result.trace for result in results),
    )


# ==================== 迭代消融 ====================

def _valid_ranking(order: Sequence[str]) -> bool:
    return sorted(order) == sorted(f"iter_{level}" for level in ITERATION_LEVELS)


def iteration_metrics(rankings: Iterable[Optional[Sequence[str]]]) -> IterationMetrics:
    """平均名次（越小越好）与相对 iter_1 的改进率；不是 iter_1..4 排列的结果剔除"""
    valid, excluded = [], 0
    for order in rankings:
        if order is None or not _valid_ranking(order):
            excluded += 1
            continue
        valid.append(list(order))
    if not valid:
        return IterationMetrics(excluded=excluded)

    avg_rank = {}
    improvement = {}
    for level in ITERATION_LEVELS:
        label = f"iter_{level}"
        avg_rank[label] = sum(order.index(label) + 1 for order in valid) / len(valid)
        if level > 1:
            improvement[label] = sum(1 for order in valid if order.index(label) < order.index("iter_1")) / len(valid)
    return IterationMetrics(avg_rank=avg_rank, improvement_rate=improvement, evaluated=len(valid), excluded=excluded)


@dataclass
class IterationAblation:
    rankings: List[Optional[List[str]]]
    traces: Dict[int, List[QueryTrace]]
    metrics: IterationMetrics

    def efficiency(self) -> Dict[int, Dict[str, float]]:
        return {level: summarize_traces(traces) for level, traces in self.traces.items()}


async def run_iteration_ablation(records: Sequence[EvalRecord], pipelines: Dict[int, FairRagPipeline],
                                 judge: Judge) -> IterationAblation:
    """
    每个问题分别以 max_iter = 1..4 运行，再让 judge 对四个答案排序

    Args:
        pipelines: max_iter -> 对应配置的流水线（通常共享索引与网关）
    """
    missing = [level for level in ITERATION_LEVELS if level not in pipelines]
    if missing:
        raise ValueError(f"iteration ablation needs pipelines for max_iter {missing}")

    rankings: List[Optional[List[str]]] = []
    traces: Dict[int, List[QueryTrace]] = {level: [] for level in ITERATION_LEVELS}
    for record in records:
        answers = {}
        for level in ITERATION_LEVELS:
            trace = await pipelines[level].run_query(record.question)
            traces[level].append(trace)
            answers[f"answer_{level}"] = trace.answer.text if trace.answer else ""
        try:
            verdict: IterativeRankingVerdict = await judge(JudgeKind.ITERATIVE_RANKING, question=record.question,
                                                            **answers)
            rankings.append(verdict.order)
        except FairRagError as e:
            logger.warning("iterative ranking failed", record_id=record.id, error=str(e))
            rankings.append(None)
    return IterationAblation(rankings=rankings, traces=traces, metrics=iteration_metrics(rankings))


def ablation_pipelines(pipeline: FairRagPipeline) -> Dict[int, FairRagPipeline]:
    """基于同一索引、网关与 provider，为每个 max_iter 构造流水线"""
    pipelines = {}
    for level in ITERATION_LEVELS:
        base = pipeline.config
        config = PipelineConfig(
            max_iter=level, top_k=base.top_k, filter_batch_size=base.filter_batch_size, routing=base.routing,
            sparse_only_fallback=base.sparse_only_fallback, filter_memoization=base.filter_memoization,
            parse_retries=base.parse_retries, mode=base.mode, latency=base.latency, chunk_limit=base.chunk_limit)
        pipelines[level] = FairRagPipeline(pipeline.index, pipeline.gateway, pipeline.retriever.provider, config,
                                           pipeline.library)
    return pipelines


# ==================== 失败分析 ====================

def _iteration_reports(trace: QueryTrace) -> str:
    blocks = []
    for record in trace.iterations:
        lines = [f"Iteration {record.index}:", "Sub-queries:", format_query_list(record.sub_queries)]
        if record.sea is not None:
            lines.append(f"Sufficient: {'Yes' if record.sea.sufficient else 'No'}")
            lines.append(record.sea.analysis_summary())
        blocks.append("\n".join(lines))
    return "\n\n".join(blocks) or "None"


def failed_results(results: Iterable[RecordResult],
                   threshold: float = DEFAULT_CORRECTNESS_THRESHOLD) -> List[RecordResult]:
    """correctness 低于阈值的已完成记录"""
    failed = []
    for result in results:
        if result.trace.aborted:
            continue
        scores = [RelevanceCorrectnessVerdict.model_validate(raw).correctness_score
                  for raw in result.verdicts_of(JudgeKind.RELEVANCE_CORRECTNESS)]
        if scores and scores[0] < threshold:
            failed.append(result)
    return failed


async def classify_failures(failed: Sequence[RecordResult], pipeline: FairRagPipeline,
                            judge: Judge) -> List[str]:
    """对每条失败记录调用诊断 judge；解析失败或类别不在六类之内记为 unclassified"""
    categories = []
    for result in failed:
        trace = result.trace
        retrieved = dict.fromkeys(chunk_id for record in trace.iterations
                                  for ids in record.retrieved_ids for chunk_id in ids)
        discarded = dict.fromkeys(chunk_id for record in trace.iterations for chunk_id in record.discarded_ids)
        try:
            verdict: FailureVerdict = await judge(
                JudgeKind.FAILURE_MODE,
                question=result.record.question,
                ground_truth_answer=result.record.ground_truth,
                final_answer=trace.answer.text if trace.answer else "",
                sub_queries=format_query_list(trace.iterations[0].sub_queries) if trace.iterations else "None",
                all_retrieved_docs=_format_docs(_chunks(pipeline, retrieved)),
                discarded_docs=_format_docs(_chunks(pipeline, discarded)),
                final_evidence=_format_docs(trace.final_evidence),
                iteration_reports=_iteration_reports(trace),
            )
            categories.append(verdict.failure_category)
        except FairRagError as e:
            logger.warning("failure classification unusable", record_id=result.record.id, error=str(e))
            categories.append(UNCLASSIFIED)
    return categories


def failure_histogram(categories: Iterable[str]) -> Dict[str, Dict[str, float]]:
    """六类 + unclassified 的计数与百分比（保留一位小数）"""
    counts = Counter(category if category in FAILURE_CATEGORIES else UNCLASSIFIED for category in categories)
    total = sum(counts.values())
    histogram = {}
    for category in (*FAILURE_CATEGORIES, UNCLASSIFIED):
        count = counts.get(category, 0)
        if category == UNCLASSIFIED and count == 0:
            continue
        histogram[category] = {"count": count, "pct": round(100.0 * count / total, 1) if total else 0.0}
    return histogram


# ==================== 输出 ====================

def results_frame(results: Sequence[RecordResult]) -> pd.DataFrame:
    """每条记录一行的扁平表，用于 parquet / json 导出"""
    rows = []
    for result in results:
        trace = result.trace
        correctness = [RelevanceCorrectnessVerdict.model_validate(raw).correctness_score
                       for raw in result.verdicts_of(JudgeKind.RELEVANCE_CORRECTNESS)]
        rows.append({
            "id": result.record.id,
            "category": result.record.category.value,
            "query_class": trace.query_class.value if trace.query_class else None,
            "iterations": len(trace.iterations),
            "evidence": len(trace.final_evidence),
            "api_calls": trace.accounting.api_calls,
            "total_tokens": trace.accounting.total_tokens,
            "cost_usd": trace.accounting.cost_usd,
            "latency_s": trace.accounting.latency_s,
            "correctness": correctness[0] if correctness else None,
            "aborted": trace.aborted,
            "error_stage": trace.error.stage if trace.error else None,
            "judge_errors": len(result.judge_errors),
            "violations": len(trace.violations),
        })
    return pd.DataFrame(rows)


def export_frame(frame: pd.DataFrame, path, save_format: str = "parquet") -> Path:
    path = Path(path).with_suffix(f".{save_format}")
    if save_format == "parquet":
        frame.to_parquet(path, index=False)
    elif save_format == "json":
        with open(path, "w", encoding="utf-8") as f:
            json.dump(frame.to_dict(orient="records"), f, indent=2, ensure_ascii=False)
    else:
        raise ValueError(f"unknown save format {save_format!r}")
    return path


def _pct(value: Optional[float]) -> str:
    return "n/a" if value is None else f"{100 * value:.1f}%"


def _num(value: Optional[float]) -> str:
    return "n/a" if value is None else f"{value:.2f}"


def render_tables(report: MetricsReport, cost_rows: Optional[Sequence[dict]] = None,
                  histogram: Optional[Dict[str, Dict[str, float]]] = None) -> str:
    """纯文本表格：端到端质量、组件、迭代、效率、成本、失败分布"""
    sections = []
    quality = pd.DataFrame([
        ("Answer Relevance (1-5)", _num(report.answer_relevance_mean)),
        ("Correctness (1-5)", _num(report.correctness_mean)),
        ("Correctness Accuracy", _pct(report.correctness_acc)),
        ("Fully Faithful", _pct(report.faithfulness_fully_pct)),
        ("Context Relevance (1-5)", _num(report.context_relevance_mean)),
        ("Negative Rejection Accuracy", _pct(report.negative_rejection_acc)),
        ("Noise Robustness Accuracy", _pct(report.noise_robustness_acc)),
    ], columns=["metric", "value"])
    sections.append("End-to-end quality\n" + quality.to_string(index=False))

    c = report.component
    component = pd.DataFrame([
        ("Query Decomposition", "Score (1-5)", _num(c.decomposition_mean)),
        ("Evidence Filtering", "Precision", _pct(c.filter_precision)),
        ("Evidence Filtering", "Recall", _pct(c.filter_recall)),
        ("Evidence Filtering", "F1-Score", _pct(c.filter_f1)),
        ("SEA", "Accuracy", _pct(c.sea_accuracy)),
        ("SEA", "Precision", _pct(c.sea_precision)),
        ("SEA", "Recall", _pct(c.sea_recall)),
        ("SEA", "F1-Score", _pct(c.sea_f1)),
        ("Query Refinement", "Score (1-5)", _num(c.refinement_mean)),
    ], columns=["component", "metric", "value"])
    sections.append("Components\n" + component.to_string(index=False))

    if report.iteration is not None and report.iteration.avg_rank:
        it = report.iteration
        iteration = pd.DataFrame([
            (label, _num(rank), _pct(it.improvement_rate.get(label)) if label != "iter_1" else "-")
            for label, rank in it.avg_rank.items()
        ], columns=["level", "avg_rank", "improvement_rate"])
        sections.append(f"Iterations (evaluated={it.evaluated}, excluded={it.excluded})\n"
                        + iteration.to_string(index=False))

    if report.efficiency:
        efficiency = pd.DataFrame([report.efficiency])
        sections.append("Efficiency per query\n" + efficiency.to_string(index=False))

    if cost_rows:
        cost = pd.DataFrame(cost_rows)[["configuration", "avg_tokens", "rate_usd_per_mtok", "cost_display"]]
        sections.append("Cost per query\n" + cost.to_string(index=False))

    if histogram:
        failures = pd.DataFrame([(name, int(v["count"]), f"{v['pct']:.1f}%") for name, v in histogram.items()],
                                columns=["category", "count", "pct"])
        sections.append("Failure modes\n" + failures.to_string(index=False))

    sections.append(f"records={report.records} aborted={report.aborted} judge_errors={report.judge_errors}")
    return "\n\n".join(sections)
