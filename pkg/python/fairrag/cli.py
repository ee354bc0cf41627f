# -*- coding: utf-8 -*-
"""
fairrag 命令行入口

子命令：ingest（建索引）、ask（单问题）、eval（批量评估）、report（从结果文件重算报告）。
"""
import argparse
import asyncio
import json
import sys
from pathlib import Path
from typing import List, Optional

import structlog

from . import __version__
from .agents import TemplateLibrary
from .config import (
    FairRagConfig, build_gateway, cost_model, eval_jobs, index_params, load_config, pipeline_config,
)
from .domain import QueryTrace
from .econ import cost_table
from .embeddings import build_provider
from .errors import FairRagError
from .evalharness import (
    Judge, ablation_pipelines, aggregate, classify_failures, export_frame, failed_results, failure_histogram,
    iteration_metrics, load_dataset, load_results, render_tables, results_frame, run_eval, run_iteration_ablation,
    save_results,
)
from .ingest import load_corpus, load_vectors
from .logging_setup import LOG_LEVELS, setup_logging
from .orchestrator import FairRagPipeline
from .retrieval import build_index, load_index, save_index

logger = structlog.get_logger(__name__)

RESULTS_FILE = "results.jsonl"
ABLATION_FILE = "iteration_ablation.json"
FAILURES_FILE = "failures.json"
REPORT_FILE = "report.json"


def _provider(config: FairRagConfig):
    section = config.retrieval
    return build_provider(section.embedding, section.embedding_dimension, section.embedding_model_path,
                          section.embedding_base_url)


def _pipeline(config: FairRagConfig, gateway) -> FairRagPipeline:
    index = load_index(config.paths.index_dir)
    library = TemplateLibrary(config.paths.prompts_dir or None)
    return FairRagPipeline(index, gateway, _provider(config), pipeline_config(config), library)


def _apply_overrides(config: FairRagConfig, args):
    if getattr(args, "index", None):
        config.paths.index_dir = args.index
    if getattr(args, "max_iter", None) is not None:
        config.pipeline.max_iter = args.max_iter
    if getattr(args, "backend", None):
        config.gateway.mode = args.backend
    if getattr(args, "rules", None):
        config.gateway.scripted_rules = args.rules
    if getattr(args, "judge_rules", None):
        config.eval.judge.scripted_rules = args.judge_rules
        config.eval.judge.mode = "scripted"
    if getattr(args, "mode", None):
        config.pipeline.mode = args.mode
    if getattr(args, "routing", None):
        config.pipeline.routing = args.routing
    if getattr(args, "save_format", None):
        config.eval.save_format = args.save_format
    config.validate()


# ==================== ingest ====================

def cmd_ingest(config: FairRagConfig, args) -> int:
    corpus = args.corpus or config.paths.corpus
    out = args.out or config.paths.index_dir
    chunks = load_corpus(corpus, config.ingest.chunk_tokens, strict=config.ingest.strict)
    vectors_path = args.vectors or config.paths.vectors
    vectors = load_vectors(vectors_path) if vectors_path else None
    provider = None if vectors else _provider(config)
    index = build_index(chunks, index_params(config), provider=provider, vectors=vectors)
    save_index(index, out)

    documents = len({chunk.id.rsplit("#", 1)[0] for chunk in chunks})
    if args.json:
        print(json.dumps({"documents": documents, "chunks": index.size, "dimension": index.dimension,
                          "index_dir": str(out)}, ensure_ascii=False))
    else:
        print(f"✅ 索引已写入: {out}")
        print(f"📊 文档数: {documents}  chunk 数: {index.size}  向量维度: {index.dimension or '无'}")
    return 0


# ==================== ask ====================

def print_trace_summary(trace: QueryTrace):
    """打印答案与紧凑的迭代摘要"""
    if trace.answer is not None:
        print(trace.answer.text)
        print()
    print(f"📊 分类: {trace.query_class.value if trace.query_class else '-'}")
    for record in trace.iterations:
        queries = " | ".join(q.text for q in record.sub_queries)
        verdict = "-" if record.sea is None else ("是" if record.sea.sufficient else "否")
        print(f"  第 {record.index} 轮: 子查询 [{queries}]  保留 {len(record.kept_ids)}  "
              f"丢弃 {len(record.discarded_ids)}  充分: {verdict}")
    if trace.answer is not None:
        print(f"  引用: {len(trace.answer.citations)} 条 / 证据 {len(trace.final_evidence)} 条")
    a = trace.accounting
    print(f"  调用: {a.api_calls}  tokens: {a.total_tokens}  成本: ${a.cost_usd:.2e}  估计延迟: {a.latency_s:.2f}s")
    if trace.violations:
        print(f"⚠️ 不变量违规 {len(trace.violations)} 条: {trace.violations[0]}")
    if trace.error is not None:
        print(f"❌ 阶段 {trace.error.stage} 失败: {trace.error.message}")


async def _ask(config: FairRagConfig, question: str) -> QueryTrace:
    async with build_gateway(config.gateway, config) as gateway:
        pipeline = _pipeline(config, gateway)
        return await pipeline.run_query(question)


def cmd_ask(config: FairRagConfig, args) -> int:
    trace = asyncio.run(_ask(config, args.question))
    if args.trace_out:
        path = Path(args.trace_out)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(trace.to_json(indent=2), encoding="utf-8")
    if args.json:
        print(trace.to_json(indent=2))
    else:
        print_trace_summary(trace)
    return 1 if trace.aborted else 0


# ==================== eval ====================

async def _eval(config: FairRagConfig, args, out_dir: Path):
    records = load_dataset(args.dataset, strict=config.ingest.strict)
    async with build_gateway(config.gateway, config) as gateway, \
            build_gateway(config.eval.judge, config) as judge_gateway:
        pipeline = _pipeline(config, gateway)
        judge = Judge(judge_gateway, pipeline.library)
        results = await run_eval(records, pipeline, judge, jobs=eval_jobs(config, args.jobs))

        ablation = None
        if args.ablation:
            multihop = [record for record in records if record.category.value == "multihop"]
            ablation = await run_iteration_ablation(multihop, ablation_pipelines(pipeline), judge)
            (out_dir / ABLATION_FILE).write_text(json.dumps({
                "rankings": ablation.rankings,
                "efficiency": {str(level): summary for level, summary in ablation.efficiency().items()},
            }, ensure_ascii=False, indent=2), encoding="utf-8")

        categories = None
        if args.failures:
            failed = failed_results(results, config.eval.correctness_threshold)
            categories = await classify_failures(failed, pipeline, judge)
            (out_dir / FAILURES_FILE).write_text(json.dumps(categories, ensure_ascii=False, indent=2),
                                                 encoding="utf-8")
    return results, ablation, categories


def _emit_report(config: FairRagConfig, report, histogram, out_dir: Optional[Path], as_json: bool):
    costs = cost_table(cost_model(config))
    payload = {"metrics": report.model_dump(), "cost_table": costs, "failure_histogram": histogram}
    if out_dir is not None:
        (out_dir / REPORT_FILE).write_text(json.dumps(payload, ensure_ascii=False, indent=2), encoding="utf-8")
    if as_json:
        print(json.dumps(payload, ensure_ascii=False, indent=2))
    else:
        print(render_tables(report, costs, histogram))


def cmd_eval(config: FairRagConfig, args) -> int:
    out_dir = Path(args.out or config.paths.results_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    results, ablation, categories = asyncio.run(_eval(config, args, out_dir))

    save_results(results, out_dir / RESULTS_FILE)
    export_frame(results_frame(results), out_dir / "records", config.eval.save_format)
    report = aggregate(results, config.eval.correctness_threshold, ablation.metrics if ablation else None)
    histogram = failure_histogram(categories) if categories is not None else None
    _emit_report(config, report, histogram, out_dir, args.json)

    if not args.json:
        print(f"\n✅ 结果已写入: {out_dir / RESULTS_FILE}")
    if report.aborted:
        print(f"⚠️ {report.aborted} 条记录中止", file=sys.stderr)
        return 1
    return 0


# ==================== report ====================

def cmd_report(config: FairRagConfig, args) -> int:
    results_path = Path(args.results)
    results = load_results(results_path) if results_path.exists() or not args.allow_missing else []
    base = results_path.parent

    iteration = None
    ablation_path = Path(args.ablation) if args.ablation else base / ABLATION_FILE
    if ablation_path.exists():
        iteration = iteration_metrics(json.loads(ablation_path.read_text(encoding="utf-8"))["rankings"])

    histogram = None
    failures_path = Path(args.failures) if args.failures else base / FAILURES_FILE
    if failures_path.exists():
        histogram = failure_histogram(json.loads(failures_path.read_text(encoding="utf-8")))

    report = aggregate(results, config.eval.correctness_threshold, iteration)
    _emit_report(config, report, histogram, None, args.json)
    return 1 if report.aborted else 0


# ==================== 参数 ====================

def _common_flags(suppress: bool) -> argparse.ArgumentParser:
    """全局参数；子命令上的同名参数不设默认值，避免覆盖写在子命令之前的取值"""
    defaults = {"default": argparse.SUPPRESS} if suppress else {}
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', help='TOML 配置文件 (默认: $FAIRRAG_CONFIG 或内置默认值)', **defaults)
    common.add_argument('--json', action='store_true', help='输出机器可读的 JSON', **defaults)
    common.add_argument('--jobs', type=int, help='评估并发数 (默认: CPU 数)', **defaults)
    common.add_argument('--log-level', choices=list(LOG_LEVELS), help='日志级别 (默认: INFO)', **defaults)
    common.add_argument('--log-file', help='额外写入的日志文件', **defaults)
    return common


def build_parser() -> argparse.ArgumentParser:
    common = _common_flags(suppress=True)

    parser = argparse.ArgumentParser(
        prog='fairrag',
        description='fairrag 迭代检索增强问答流水线',
        formatter_class=argparse.RawDescriptionHelpFormatter,
        parents=[_common_flags(suppress=False)],
        epilog="""
使用示例:
  # 构建索引
  fairrag ingest --corpus data/corpus.jsonl --out data/index

  # 单个问题（脚本化后端，便于复现）
  fairrag --config config.toml ask "کدام پیامبر توسط نهنگ بلعیده شد؟" \\
    --backend scripted --rules tests/fixtures/case_study_rules.jsonl --trace-out trace.json

  # 批量评估 + 迭代消融 + 失败分析
  fairrag --config config.toml eval data/eval.jsonl --ablation --failures --jobs 8

  # 从结果文件重算报告
  fairrag report results/results.jsonl --json
        """
    )
    parser.add_argument('--version', action='version', version=f'%(prog)s {__version__}')
    sub = parser.add_subparsers(dest='command', required=True)

    ingest = sub.add_parser('ingest', parents=[common], help='切块并构建混合索引')
    ingest.add_argument('--corpus', help='语料 JSONL (默认: paths.corpus)')
    ingest.add_argument('--out', help='索引输出目录 (默认: paths.index_dir)')
    ingest.add_argument('--vectors', help='预计算向量 JSONL')
    ingest.set_defaults(handler=cmd_ingest)

    def pipeline_flags(p):
        p.add_argument('--index', help='索引目录 (默认: paths.index_dir)')
        p.add_argument('--max-iter', type=int, choices=[1, 2, 3, 4], help='最大迭代次数 (默认: 3)')
        p.add_argument('--backend', choices=['http', 'scripted'], help='模型后端')
        p.add_argument('--rules', help='脚本化后端规则 JSONL')
        p.add_argument('--mode', choices=['fair', 'naive'], help='流水线模式 (默认: fair)')
        p.add_argument('--routing', choices=['dynamic', 'static_small', 'static_large', 'static_reasoner'],
                       help='模型路由 (默认: dynamic)')

    ask = sub.add_parser('ask', parents=[common], help='回答单个问题并输出 trace')
    ask.add_argument('question', help='用户问题')
    ask.add_argument('--trace-out', help='完整 trace JSON 输出路径')
    pipeline_flags(ask)
    ask.set_defaults(handler=cmd_ask)

    evaluate = sub.add_parser('eval', parents=[common], help='批量评估')
    evaluate.add_argument('dataset', help='评估集 JSONL')
    evaluate.add_argument('--out', help='结果目录 (默认: paths.results_dir)')
    evaluate.add_argument('--judge-rules', help='judge 的脚本化规则 JSONL')
    evaluate.add_argument('--ablation', action='store_true', help='对 multihop 问题做 max_iter 1..4 消融')
    evaluate.add_argument('--failures', action='store_true', help='对失败记录做失败模式分类')
    evaluate.add_argument('--save-format', choices=['parquet', 'json'], help='逐条记录导出格式 (默认: parquet)')
    pipeline_flags(evaluate)
    evaluate.set_defaults(handler=cmd_eval)

    report = sub.add_parser('report', parents=[common], help='从结果文件重算指标表')
    report.add_argument('results', help='eval 写出的 results.jsonl')
    report.add_argument('--ablation', help='迭代消融结果 (默认: 同目录 iteration_ablation.json)')
    report.add_argument('--failures', help='失败分类结果 (默认: 同目录 failures.json)')
    report.add_argument('--allow-missing', action='store_true', help='结果文件不存在时输出空报告')
    report.set_defaults(handler=cmd_report)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = load_config(args.config)
        setup_logging(args.log_level or config.logging.level, args.log_file or config.logging.file or None,
                      config.logging.json)
        _apply_overrides(config, args)
        return args.handler(config, args)
    except FairRagError as e:
        print(f"❌ {type(e).__name__}: {e}", file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        print("\n⚠️ 已中断", file=sys.stderr)
        return 130


if __name__ == "__main__":
    sys.exit(main())
