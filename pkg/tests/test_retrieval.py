# -*- coding: utf-8 -*-
import json
import math
import random

import numpy as np
import pytest

from fairrag.domain import Chunk
from fairrag.embeddings import HashingEmbeddingProvider
from fairrag.errors import DimensionMismatchError, EmbeddingError, IndexBuildError, IndexFormatError
from fairrag.retrieval import (
    HEADER_FILE, HybridRetriever, IndexParams, RankedList, bm25_search, build_index, dense_search, hybrid_retrieve,
    load_index, rrf_fuse, save_index,
)

VOCAB = ["a", "b", "c", "d", "e", "f", "g", "h"]


def _chunk(chunk_id, text, embedding=None):
    return Chunk(id=chunk_id, text=text, token_count=len(text.split()), embedding=embedding)


def _bm25_oracle(docs, query, k1=1.2, b=0.75):
    n = len(docs)
    avgdl = sum(len(tokens) for tokens in docs.values()) / n
    scores = {}
    for doc_id, tokens in docs.items():
        score = 0.0
        for term in dict.fromkeys(query):
            n_t = sum(1 for other in docs.values() if term in other)
            tf = tokens.count(term)
            if tf == 0:
                continue
            idf = math.log(1 + (n - n_t + 0.5) / (n_t + 0.5))
            score += idf * tf * (k1 + 1) / (tf + k1 * (1 - b + b * len(tokens) / avgdl))
        if score > 0:
            scores[doc_id] = score
    return [doc_id for doc_id, _ in sorted(scores.items(), key=lambda item: (-item[1], item[0]))]


class _FailingProvider:
    dimension = 4

    def embed(self, text):
        raise EmbeddingError("provider down")


def test_single_document_bm25_value():
    index = build_index([_chunk("x#0", "alpha")])
    ranked = bm25_search(index, "alpha", 5)
    assert ranked.ids == ["x#0"]
    assert ranked.items[0][1] == pytest.approx(math.log(1 + 0.5 / 1.5), abs=1e-6)
    assert ranked.items[0][1] == pytest.approx(0.287682, abs=1e-6)


def test_bm25_only_positive_and_unknown_terms():
    index = build_index([_chunk("x#0", "alpha beta"), _chunk("y#0", "gamma")])
    assert bm25_search(index, "zzz", 5).ids == []
    assert bm25_search(index, "alpha", 5).ids == ["x#0"]
    assert len(bm25_search(build_index([]), "alpha", 5)) == 0


def test_bm25_matches_brute_force_on_random_corpora():
    rng = random.Random(7)
    for _ in range(100):
        docs = {f"d{i:02d}#0": [rng.choice(VOCAB) for _ in range(rng.randint(1, 12))]
                for i in range(rng.randint(1, 50))}
        index = build_index([_chunk(doc_id, " ".join(tokens)) for doc_id, tokens in docs.items()])
        query = [rng.choice(VOCAB) for _ in range(rng.randint(1, 4))]
        expected = _bm25_oracle(docs, query)
        assert bm25_search(index, " ".join(query), len(docs)).ids == expected


def test_dense_matches_brute_force_cosine():
    rng = np.random.default_rng(11)
    for _ in range(100):
        count = int(rng.integers(1, 51))
        matrix = rng.normal(size=(count, 6))
        matrix[0] = 0.0
        chunks = [_chunk(f"d{i:02d}#0", "x", tuple(row)) for i, row in enumerate(matrix)]
        index = build_index(chunks)
        query = rng.normal(size=6)
        sims = {}
        for i, row in enumerate(matrix):
            norm = np.linalg.norm(row) * np.linalg.norm(query)
            sims[f"d{i:02d}#0"] = float(row @ query / norm) if norm > 0 else 0.0
        expected = [doc_id for doc_id, _ in sorted(sims.items(), key=lambda item: (-item[1], item[0]))]
        assert dense_search(index, query, count).ids == expected


def test_dense_dimension_mismatch():
    index = build_index([_chunk("a#0", "x", (1.0, 0.0))])
    with pytest.raises(DimensionMismatchError):
        dense_search(index, np.ones(3), 1)
    with pytest.raises(IndexFormatError):
        dense_search(build_index([_chunk("a#0", "x")]), np.ones(2), 1)


def test_rrf_hand_values():
    a = RankedList((("x", 3.0), ("y", 1.0)))
    b = RankedList((("x", 0.9), ("z", 0.8), ("y", 0.1)))
    fused = rrf_fuse([a, b], rrf_k=60)
    scores = dict(fused.items)
    assert scores["x"] == pytest.approx(2 / 61)
    assert scores["z"] == pytest.approx(1 / 62)
    assert scores["y"] == pytest.approx(1 / 62 + 1 / 63)
    assert fused.ids[0] == "x"
    assert dict(rrf_fuse([b]).items)["y"] == pytest.approx(1 / 63)


def test_rrf_monotone_under_list_addition():
    rng = random.Random(3)
    for _ in range(50):
        lists = []
        for _ in range(rng.randint(1, 4)):
            ids = rng.sample(VOCAB, rng.randint(1, len(VOCAB)))
            lists.append(RankedList.from_scores({doc_id: float(len(ids) - i) for i, doc_id in enumerate(ids)}))
        before = dict(rrf_fuse(lists).items)
        extra = RankedList.from_scores({doc_id: 1.0 for doc_id in rng.sample(VOCAB, 3)})
        after = dict(rrf_fuse(lists + [extra]).items)
        for doc_id, score in before.items():
            assert after[doc_id] >= score


def test_ranked_list_invariants():
    with pytest.raises(ValueError):
        RankedList((("x", 1.0), ("x", 0.5)))
    with pytest.raises(ValueError):
        RankedList((("x", 1.0), ("y", 2.0)))
    assert RankedList.from_scores({"b": 1.0, "a": 1.0}).ids == ["a", "b"]


def test_duplicate_chunk_id_rejected():
    with pytest.raises(IndexBuildError):
        build_index([_chunk("a#0", "x"), _chunk("a#0", "y")])


def test_partial_vectors_rejected():
    with pytest.raises(IndexBuildError):
        build_index([_chunk("a#0", "x", (1.0, 0.0)), _chunk("b#0", "y")])
    with pytest.raises(DimensionMismatchError):
        build_index([_chunk("a#0", "x", (1.0, 0.0)), _chunk("b#0", "y", (1.0, 0.0, 0.0))])


def test_hybrid_retrieve_top_k_and_fallback(topics_index):
    assert len(hybrid_retrieve(topics_index, "zakat", top_k=3)) == 3
    assert {c.id.split("_")[0] for c in hybrid_retrieve(topics_index, "zakat", top_k=3)} == {"zakat"}

    dense = build_index(list(topics_index.chunks.values()), provider=HashingEmbeddingProvider(4))
    with pytest.raises(EmbeddingError):
        hybrid_retrieve(dense, "zakat", _FailingProvider(), top_k=3)
    retriever = HybridRetriever(dense, _FailingProvider(), top_k=3, sparse_only_fallback=True)
    assert [c.id for c in retriever.retrieve("zakat")] == [c.id for c in hybrid_retrieve(topics_index, "zakat")]


def test_save_and_load_index(tmp_path, topics_index):
    provider = HashingEmbeddingProvider(16)
    index = build_index(list(topics_index.chunks.values()), IndexParams(k1=1.5), provider=provider)
    save_index(index, tmp_path / "idx")
    loaded = load_index(tmp_path / "idx")
    assert loaded.size == index.size
    assert loaded.dimension == 16
    assert loaded.params.k1 == 1.5
    assert list(loaded.chunks) == list(index.chunks)
    assert bm25_search(loaded, "hajj arafat", 3) == bm25_search(index, "hajj arafat", 3)
    query = provider.embed("hajj")
    assert dense_search(loaded, query, 5).ids == dense_search(index, query, 5).ids


def test_empty_index_round_trips(tmp_path):
    save_index(build_index([]), tmp_path / "empty")
    assert load_index(tmp_path / "empty").size == 0


def test_load_index_rejects_other_versions(tmp_path, topics_index):
    save_index(topics_index, tmp_path / "idx")
    header_path = tmp_path / "idx" / HEADER_FILE
    header = json.loads(header_path.read_text(encoding="utf-8"))
    header["format_version"] = 99
    header_path.write_text(json.dumps(header), encoding="utf-8")
    with pytest.raises(IndexFormatError):
        load_index(tmp_path / "idx")
    with pytest.raises(IndexFormatError):
        load_index(tmp_path / "missing")
