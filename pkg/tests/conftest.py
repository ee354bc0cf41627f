# -*- coding: utf-8 -*-
"""共享 fixture：测试语料、索引与脚本化网关"""
from pathlib import Path

import pytest

from fairrag.ingest import load_corpus
from fairrag.llm_gateway import LLMGateway, ScriptedBackend
from fairrag.retrieval import build_index

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture
def fixtures_dir() -> Path:
    return FIXTURES


@pytest.fixture
def case_study_chunks():
    return load_corpus(FIXTURES / "case_study_corpus.jsonl")


@pytest.fixture
def case_study_index(case_study_chunks):
    return build_index(case_study_chunks)


@pytest.fixture
def topics_index():
    return build_index(load_corpus(FIXTURES / "topics_corpus.jsonl"))


@pytest.fixture
def case_study_gateway():
    return LLMGateway(backend=ScriptedBackend.from_jsonl(FIXTURES / "case_study_rules.jsonl"))
