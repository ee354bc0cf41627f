# -*- coding: utf-8 -*-
import pytest

from fairrag.domain import Accounting, ModelTier, QueryTrace, TraceError
from fairrag.econ import (
    CostModel, LatencyModel, blended_rate, cost_per_query, cost_table, dynamic_rate, format_usd, predict_latency,
    predict_latency_simplified, recover_model_time, round_sig, sensitivity_bounds, summarize_traces,
)
from fairrag.errors import ConfigError


def test_blended_rates():
    assert blended_rate(ModelTier.LARGE) == pytest.approx(0.247)
    assert blended_rate(ModelTier.SMALL) == pytest.approx(0.033)
    assert blended_rate(ModelTier.REASONER) == pytest.approx(0.870)
    assert dynamic_rate() == pytest.approx(0.24605)
    assert round_sig(dynamic_rate()) == 0.246


def test_cost_table_rows():
    rows = {row["configuration"]: row for row in cost_table()}
    assert rows["Static Small"]["cost_display"] == "5.33e-04"
    assert rows["Static Large"]["cost_display"] == "2.89e-03"
    assert rows["Static Reasoner"]["cost_per_query_usd"] == pytest.approx(2.96e-2, rel=5e-3)
    assert rows["Dynamic"]["rate_usd_per_mtok"] == 0.246
    assert rows["Dynamic"]["cost_display"] == "2.92e-03"


def test_cost_per_query():
    assert cost_per_query(0, 1.0) == 0.0
    assert cost_per_query(1_000_000, 0.247) == pytest.approx(0.247)
    with pytest.raises(ValueError):
        cost_per_query(-1, 1.0)


def test_cost_model_validation():
    with pytest.raises(ConfigError):
        CostModel(alpha=1.5)
    with pytest.raises(ConfigError):
        CostModel(mix={ModelTier.LARGE: 0.5})
    with pytest.raises(ConfigError):
        CostModel(prices={ModelTier.LARGE: (0.23, 0.40)})


def test_latency_prediction():
    assert predict_latency(10_000, 6) == pytest.approx(22.66)
    assert predict_latency(0, 0) == pytest.approx(1.0)
    assert predict_latency_simplified(10_000) == pytest.approx(22.1)
    with pytest.raises(ValueError):
        predict_latency(-1, 0)


def test_recover_model_time():
    assert recover_model_time(22.14, 6.07) == pytest.approx(18.105)
    with pytest.raises(ValueError):
        recover_model_time(1.0, 6)


def test_per_token_shares():
    shares = LatencyModel().per_token_contributions(calls=5.64, tokens=10_900)
    assert shares["h"] * 1000 == pytest.approx(0.259, abs=1e-3)
    assert shares["r"] * 1000 == pytest.approx(0.092, abs=1e-3)

    bounds = sensitivity_bounds(calls=5.64, tokens=10_900)
    assert bounds["h"][0] * 1000 == pytest.approx(0.155, abs=1e-3)
    assert bounds["h"][1] * 1000 == pytest.approx(0.362, abs=1e-3)
    assert bounds["r"][0] * 1000 == pytest.approx(0.046, abs=1e-3)
    assert bounds["r"][1] * 1000 == pytest.approx(0.138, abs=1e-3)


def test_latency_model_validation():
    with pytest.raises(ConfigError):
        LatencyModel(h=-0.1)
    assert LatencyModel().in_sensitivity_range()
    assert not LatencyModel(h=0.9).in_sensitivity_range()


def test_format_usd():
    assert format_usd(0.000532785) == "5.33e-04"
    assert round_sig(0) == 0.0


def test_summarize_traces_skips_aborted():
    done = QueryTrace(query="a", accounting=Accounting(api_calls=4, prompt_tokens=900, completion_tokens=100,
                                                       cost_usd=0.002, latency_s=6.0))
    other = QueryTrace(query="b", accounting=Accounting(api_calls=2, prompt_tokens=80, completion_tokens=20,
                                                        cost_usd=0.0, latency_s=2.0))
    aborted = QueryTrace(query="c", error=TraceError(stage="decomposer", message="boom"),
                         accounting=Accounting(api_calls=9))
    summary = summarize_traces([done, other, aborted])
    assert summary["queries"] == 2
    assert summary["api_calls"] == 3.0
    assert summary["total_tokens"] == 550.0
    assert summary["cost_usd"] == pytest.approx(0.001)
    assert summary["latency_s"] == 4.0
    assert summarize_traces([])["queries"] == 0
