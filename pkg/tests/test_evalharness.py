# -*- coding: utf-8 -*-
import asyncio
import json

import pandas as pd
import pytest

from fairrag.agents import FAILURE_CATEGORIES, FilterAuditVerdict
from fairrag.errors import CorpusError
from fairrag.evalharness import (
    UNCLASSIFIED, EvalCategory, EvalRecord, Judge, ablation_pipelines, aggregate, classify_failures,
    export_frame, f1, failed_results, failure_histogram, filter_audit_metrics, iteration_metrics, load_dataset,
    load_results, render_tables, results_frame, run_eval, run_iteration_ablation, save_results, sea_metrics,
)
from fairrag.orchestrator import FairRagPipeline
from helpers import scripted_gateway, sea_text

LABELS = {
    "What are zakat and hajj?": "VALID_LARGE",
    "Explain the rules of zakat and hajj.": "VALID_LARGE",
    "How do I pick a lock?": "UNETHICAL",
    "What is the capital of France?": "OUT_OF_SCOPE_ISLAMIC",
    "Tell me about zakat and hajj.": "VALID_LARGE",
    "Describe zakat and hajj.": "VALID_LARGE",
    "How many days is Ramadan?": "VALID_OBVIOUS",
    "Which direction is the qibla?": "VALID_OBVIOUS",
}
NOISE_QUESTIONS = ["Tell me about zakat and hajj.", "Describe zakat and hajj."]


def pipeline_rules():
    rules = [(f'User Question: "{q}"', f"Selected Label: {label}") for q, label in LABELS.items()]
    # 干扰文档排在检索结果之后，即 doc_7 / doc_8
    rules += [(f'**Original User Query:** "{q}"', "Unhelpful Document IDs: [doc_7], [doc_8]")
              for q in NOISE_QUESTIONS]
    rules += [
        ("Optimized Queries", "Optimized Queries:\n- zakat\n- hajj"),
        ("Unhelpful Document IDs", "Unhelpful Document IDs: None"),
        ("Strategic Intelligence Analyst", sea_text(True)),
        ("Islamic Knowledge Assistant", "Zakat is alms [1] and hajj is pilgrimage [4]."),
        ("Direct Answer:", "Direct answer."),
    ]
    return rules


def _json_rules(match, payloads):
    return [(match, json.dumps(payload)) for payload in payloads]


def judge_rules():
    """各类 judge 的回复按记录顺序被消费：mh1, mh2, nr1, nr2, nz1, nz2, ob1, ob2"""
    rules = []
    rules += _json_rules("meticulous grader", [
        {"relevance_score": r, "correctness_score": c} for r, c in [(5, 5), (4, 3), (5, 4), (4, 2), (5, 5), (5, 4)]])
    rules += _json_rules("evaluate the answer's faithfulness", [
        {"faithfulness_verdict": v} for v in ["Fully Faithful", "Partially Faithful", "Fully Faithful",
                                              "Fully Faithful"]])
    rules += _json_rules("score the relevance of each document", [
        {"relevance_scores": [{"doc_id": "[1]", "score": 4}, {"doc_id": "[2]", "score": 4}]}])
    rules += _json_rules("assess the quality of query decomposition", [{"score": s} for s in [4, 5, 3, 4]])
    rules += _json_rules("auditor for an AI's document filtering module", [
        {"incorrectly_kept_ids": ["hajj_1#0"], "incorrectly_discarded_ids": []},
        {"incorrectly_kept_ids": ["zakat_2#0"], "incorrectly_discarded_ids": []},
        {"incorrectly_kept_ids": [], "incorrectly_discarded_ids": ["salat_1#0"]},
        {"incorrectly_kept_ids": [], "incorrectly_discarded_ids": []},
    ])
    rules += _json_rules("pragmatic and efficient QA Evaluator", [
        {"is_sufficient": v} for v in [True, False, True, True]])
    rules += _json_rules("handle out-of-domain questions", [{"correctly_rejected": v} for v in [True, False]])
    rules += _json_rules("robustness to noisy context", [
        {"is_robust": True, "is_correct": True}, {"is_robust": True, "is_correct": False}])
    return rules


@pytest.fixture
def eval_setup(topics_index, fixtures_dir):
    pipeline = FairRagPipeline(topics_index, scripted_gateway(pipeline_rules()))
    judge = Judge(scripted_gateway(judge_rules()))
    records = load_dataset(fixtures_dir / "eval_dataset.jsonl")
    results = asyncio.run(run_eval(records, pipeline, judge, jobs=1))
    return pipeline, results


# ---------- 数据集 ----------

def test_load_dataset(fixtures_dir):
    records = load_dataset(fixtures_dir / "eval_dataset.jsonl")
    assert len(records) == 8
    assert records[4].category is EvalCategory.NOISE
    assert records[4].distractor_ids == ("salat_1#0", "sawm_1#0")


def test_noise_records_need_distractors(tmp_path):
    path = tmp_path / "eval.jsonl"
    path.write_text('{"id": "a", "question": "q", "category": "multihop"}\n'
                    '{"id": "b", "question": "q", "category": "noise"}\n', encoding="utf-8")
    with pytest.raises(CorpusError) as info:
        load_dataset(path)
    assert info.value.line_number == 2
    assert [r.id for r in load_dataset(path, strict=False)] == ["a"]


# ---------- 端到端评估 ----------

def test_eval_runs_every_record(eval_setup):
    _, results = eval_setup
    assert [r.record.id for r in results] == ["mh1", "mh2", "nr1", "nr2", "nz1", "nz2", "ob1", "ob2"]
    assert all(not r.trace.aborted for r in results)
    assert all(r.judge_errors == () for r in results)
    noise = results[4].trace.iterations[0]
    assert noise.injected_ids == ("salat_1#0", "sawm_1#0")
    assert noise.discarded_ids == ("salat_1#0", "sawm_1#0")
    assert set(results[2].verdicts) == {"negative_rejection"}
    assert set(results[6].verdicts) == {"relevance_correctness"}


def test_aggregate_report(eval_setup):
    _, results = eval_setup
    report = aggregate(results, threshold=4.0)

    assert report.records == 8
    assert report.aborted == 0
    assert report.correctness_mean == pytest.approx(23 / 6)
    assert report.correctness_acc == pytest.approx(4 / 6)
    assert report.answer_relevance_mean == pytest.approx(28 / 6)
    assert report.faithfulness_fully_pct == pytest.approx(0.75)
    assert report.context_relevance_mean == pytest.approx(4.0)
    assert report.negative_rejection_acc == pytest.approx(0.5)
    assert report.noise_robustness_acc == pytest.approx(0.5)

    component = report.component
    assert component.decomposition_mean == pytest.approx(4.0)
    assert component.filter_precision == pytest.approx(22 / 24)
    assert component.filter_recall == pytest.approx(22 / 23)
    assert component.filter_f1 == pytest.approx(f1(22 / 24, 22 / 23))
    # SEA 全部判充分，judge 认为 mh2 不充分
    assert component.sea_accuracy == pytest.approx(0.75)
    assert component.sea_recall == pytest.approx(0.0)
    assert component.sea_precision is None
    assert component.refinement_mean is None
    assert report.efficiency["queries"] == 8


def test_failure_classification(eval_setup):
    pipeline, results = eval_setup
    failed = failed_results(results, threshold=4.0)
    assert [r.record.id for r in failed] == ["mh2", "nz2"]

    judge = Judge(scripted_gateway([
        ("root cause analysis on a failed query-answer pair",
         json.dumps({"failure_category": "Evidence Filtering Error", "reasoning": "kept noise"})),
        ("root cause analysis on a failed query-answer pair", "not a verdict"),
    ]))
    categories = asyncio.run(classify_failures(failed, pipeline, judge))
    assert categories == ["Evidence Filtering Error", UNCLASSIFIED]
    histogram = failure_histogram(categories)
    assert histogram["Evidence Filtering Error"] == {"count": 1, "pct": 50.0}
    assert histogram[UNCLASSIFIED] == {"count": 1, "pct": 50.0}


def test_results_file_reproduces_report(eval_setup, tmp_path):
    _, results = eval_setup
    path = save_results(results, tmp_path / "results.jsonl")
    reloaded = load_results(path)
    assert aggregate(reloaded) == aggregate(results)


def test_results_frame_and_export(eval_setup, tmp_path):
    _, results = eval_setup
    frame = results_frame(results)
    assert list(frame["id"]) == ["mh1", "mh2", "nr1", "nr2", "nz1", "nz2", "ob1", "ob2"]
    assert frame.loc[frame["id"] == "nr1", "api_calls"].item() == 1

    path = export_frame(frame, tmp_path / "records", "json")
    assert path.suffix == ".json"
    assert len(json.loads(path.read_text(encoding="utf-8"))) == 8
    parquet = export_frame(frame, tmp_path / "records", "parquet")
    assert len(pd.read_parquet(parquet)) == 8
    with pytest.raises(ValueError):
        export_frame(frame, tmp_path / "records", "csv")


def test_render_tables(eval_setup):
    _, results = eval_setup
    text = render_tables(aggregate(results), histogram=failure_histogram(["SEA Error"]))
    assert "Noise Robustness Accuracy" in text
    assert "50.0%" in text
    assert "Failure modes" in text
    assert "records=8 aborted=0 judge_errors=0" in text


def test_unknown_distractor_aborts_record(topics_index):
    pipeline = FairRagPipeline(topics_index, scripted_gateway(pipeline_rules()))
    judge = Judge(scripted_gateway(judge_rules()))
    record = EvalRecord(id="x", question="Tell me about zakat and hajj.", category="noise",
                        distractor_ids=("ghost#0",))
    (result,) = asyncio.run(run_eval([record], pipeline, judge, jobs=1))
    assert result.trace.aborted
    assert result.trace.error.stage == "eval"
    assert "ghost#0" in result.trace.error.message
    assert result.verdicts == {}
    report = aggregate([result])
    assert (report.records, report.aborted) == (1, 1)


def test_judge_errors_are_recorded(topics_index):
    pipeline = FairRagPipeline(topics_index, scripted_gateway(pipeline_rules()))
    judge = Judge(scripted_gateway([("meticulous grader", "not json")]))
    record = EvalRecord(id="o", question="How many days is Ramadan?", category="obvious")
    (result,) = asyncio.run(run_eval([record], pipeline, judge, jobs=1))
    assert result.verdicts == {}
    assert [e.kind for e in result.judge_errors] == ["relevance_correctness"]
    assert aggregate([result]).judge_errors == 1


# ---------- 迭代消融 ----------

def test_iteration_ablation(topics_index):
    gateway = scripted_gateway([
        ("Selected Label", "Selected Label: VALID_LARGE"),
        ("Optimized Queries", "Optimized Queries:\n- zakat"),
        ("Unhelpful Document IDs", "Unhelpful Document IDs: None"),
        ("Strategic Intelligence Analyst", sea_text(False, gaps="B: hajj")),
        ("Improved Queries", "Improved Queries:\n- hajj"),
        ("Islamic Knowledge Assistant", "Answer [1]."),
    ])
    pipelines = ablation_pipelines(FairRagPipeline(topics_index, gateway))
    judge = Judge(scripted_gateway([
        ("different levels of iterative refinement", json.dumps({"ranking": "iter_3, iter_1, iter_2, iter_4"})),
    ]))
    record = EvalRecord(id="mh", question="zakat and hajj", category="multihop")
    ablation = asyncio.run(run_iteration_ablation([record], pipelines, judge))

    assert {level: len(ablation.traces[level][0].iterations) for level in ablation.traces} == {1: 1, 2: 2, 3: 3, 4: 4}
    assert ablation.rankings == [["iter_3", "iter_1", "iter_2", "iter_4"]]
    assert ablation.metrics.avg_rank["iter_3"] == 1.0
    assert ablation.metrics.improvement_rate["iter_3"] == 1.0
    assert ablation.efficiency()[1]["queries"] == 1


def test_iteration_metrics_over_ten_rankings():
    better = ["iter_2", "iter_1", "iter_3", "iter_4"]
    ordered = ["iter_1", "iter_2", "iter_3", "iter_4"]
    rankings = [better] * 6 + [ordered] * 4 + [None, ["iter_1", "iter_1", "iter_2", "iter_3"]]
    metrics = iteration_metrics(rankings)
    assert metrics.evaluated == 10
    assert metrics.excluded == 2
    assert metrics.avg_rank == pytest.approx({"iter_1": 1.6, "iter_2": 1.4, "iter_3": 3.0, "iter_4": 4.0})
    assert metrics.improvement_rate == pytest.approx({"iter_2": 0.6, "iter_3": 0.0, "iter_4": 0.0})
    assert iteration_metrics([None]).evaluated == 0


# ---------- 指标单元 ----------

def test_f1_values():
    assert f1(0.717, 0.768) == pytest.approx(0.742, abs=1e-3)
    assert f1(0.740, 0.626) == pytest.approx(0.679, abs=1.5e-3)
    assert f1(0.0, 0.0) == 0.0


def test_filter_audit_metrics():
    verdict = FilterAuditVerdict(incorrectly_kept_ids=("a",), incorrectly_discarded_ids=("x",))
    precision, recall = filter_audit_metrics(["a", "b", "c", "d"], ["x", "y"], verdict)
    assert precision == pytest.approx(0.75)
    assert recall == pytest.approx(0.75)
    assert filter_audit_metrics([], ["x"], FilterAuditVerdict()) == (None, None)


def test_sea_metrics():
    pairs = [(True, True), (True, False), (False, True), (False, False)]
    metrics = sea_metrics(pairs)
    assert metrics == {"accuracy": 0.5, "precision": 0.5, "recall": 0.5, "f1": 0.5}
    assert sea_metrics([])["accuracy"] is None


def test_failure_histogram_distribution():
    counts = [67, 34, 11, 7, 3, 0]
    categories = [name for name, count in zip(FAILURE_CATEGORIES, counts) for _ in range(count)]
    histogram = failure_histogram(categories)
    assert [histogram[name]["pct"] for name in FAILURE_CATEGORIES] == [54.9, 27.9, 9.0, 5.7, 2.5, 0.0]
    assert sum(histogram[name]["count"] for name in FAILURE_CATEGORIES) == 122
    assert UNCLASSIFIED not in histogram
