# -*- coding: utf-8 -*-
import json
import random

import numpy as np
import pytest

from fairrag.domain import ChunkKind
from fairrag.errors import CorpusError, DimensionMismatchError
from fairrag.ingest import (
    ANSWER_MARKER, QUESTION_MARKER, RegexTokenizer, SourceDocument, chunk_document, iter_jsonl, load_corpus,
    load_documents, load_vectors, strip_qa_markers,
)

TOK = RegexTokenizer()
WORDS = ["نماز", "روزه", "زکات", "حج", "خمس", "قرآن", "سوره", "آیه", "alpha", "beta", "gamma", "delta"]


def _random_text(rng: random.Random, paragraphs: int) -> str:
    blocks = []
    for _ in range(paragraphs):
        sentences = []
        for _ in range(rng.randint(1, 12)):
            words = " ".join(rng.choice(WORDS) for _ in range(rng.randint(3, 60)))
            sentences.append(words + rng.choice([".", "؟", "!"]))
        blocks.append(" ".join(sentences))
    return "\n\n".join(blocks)


def test_tokenizer_lowercases_ascii_only():
    assert TOK.tokenize("Zakat, نماز!") == ["zakat", ",", "نماز", "!"]


def test_short_document_is_one_chunk():
    doc = SourceDocument(id="d1", text="حضرت یونس پیامبر بود.", source_url="u")
    chunks = chunk_document(doc)
    assert [c.id for c in chunks] == ["d1#0"]
    assert chunks[0].text == doc.text
    assert chunks[0].token_count == TOK.count(doc.text)
    assert chunks[0].source_url == "u"


def test_paragraphs_are_never_merged():
    doc = SourceDocument(id="d", text="first paragraph.\n\nsecond paragraph.")
    assert [c.text for c in chunk_document(doc)] == ["first paragraph.", "second paragraph."]


def test_max_tokens_lower_bound():
    with pytest.raises(ValueError):
        chunk_document(SourceDocument(id="d", text="x"), max_tokens=15)


def test_qa_chunks_carry_both_markers():
    body = " ".join(["پاسخ"] * 500)
    doc = SourceDocument(id="qa1", kind="qa", question="حکم روزه مسافر چیست؟", text=body)
    chunks = chunk_document(doc, max_tokens=100)
    assert len(chunks) > 1
    for chunk in chunks:
        assert chunk.kind == ChunkKind.QA
        assert chunk.text.startswith(f"{QUESTION_MARKER} حکم روزه مسافر چیست؟\n{ANSWER_MARKER}\n")
        assert chunk.token_count <= 100
    assert " ".join(strip_qa_markers(c.text) for c in chunks) == body


def test_qa_requires_question():
    with pytest.raises(Exception):
        SourceDocument(id="qa", kind="qa", text="answer")


def test_long_question_is_truncated_to_half_the_limit():
    question = " ".join(["سوال"] * 200)
    doc = SourceDocument(id="qa", kind="qa", question=question, text="پاسخ کوتاه.")
    chunk = chunk_document(doc, max_tokens=64)[0]
    assert chunk.token_count <= 64
    assert chunk.text.endswith("پاسخ کوتاه.")


@pytest.mark.parametrize("limit", [16, 40, 378])
def test_no_chunk_exceeds_limit_and_bodies_reconstruct(limit):
    rng = random.Random(limit)
    for number in range(20):
        text = _random_text(rng, rng.randint(1, 4))
        doc = SourceDocument(id=f"doc{number}", text=text)
        chunks = chunk_document(doc, max_tokens=limit)
        assert all(c.token_count <= limit for c in chunks)
        assert [c.id for c in chunks] == [f"doc{number}#{i}" for i in range(len(chunks))]
        # 拼回去只差空白
        assert "".join("".join(c.text for c in chunks).split()) == "".join(text.split())


def test_iter_jsonl_reports_line_numbers(tmp_path):
    path = tmp_path / "corpus.jsonl"
    path.write_text('{"id": "a", "text": "x"}\n\nnot json\n', encoding="utf-8")
    with pytest.raises(CorpusError) as info:
        list(iter_jsonl(path))
    assert info.value.line_number == 3
    assert "line 3" in str(info.value)


def test_non_strict_skips_bad_lines(tmp_path):
    path = tmp_path / "corpus.jsonl"
    path.write_text('{"id": "a", "text": "x"}\n[1, 2]\nbroken\n{"id": "b", "text": "y"}\n', encoding="utf-8")
    assert [d.id for d in load_documents(path, strict=False)] == ["a", "b"]


def test_missing_corpus_is_corpus_error(tmp_path):
    with pytest.raises(CorpusError):
        load_corpus(tmp_path / "missing.jsonl")


def test_schema_violation_carries_line(tmp_path):
    path = tmp_path / "corpus.jsonl"
    path.write_text('{"id": "a", "text": "x"}\n{"id": "b", "kind": "qa", "text": "y"}\n', encoding="utf-8")
    with pytest.raises(CorpusError) as info:
        load_documents(path)
    assert info.value.line_number == 2


def test_case_study_corpus(fixtures_dir):
    chunks = load_corpus(fixtures_dir / "case_study_corpus.jsonl")
    assert [c.id for c in chunks] == ["yunus_whale#0", "ibrahim_kaaba#0", "yunus_tomb#0", "ibrahim_birth#0"]
    assert chunks[3].text.startswith(QUESTION_MARKER)


def test_load_vectors(tmp_path):
    path = tmp_path / "vectors.jsonl"
    rows = [{"id": "a#0", "embedding": [1.0, 0.0]}, {"id": "b#0", "embedding": [0.0, 1.0]}]
    path.write_text("\n".join(json.dumps(r) for r in rows), encoding="utf-8")
    vectors = load_vectors(path)
    np.testing.assert_array_equal(vectors["b#0"], np.array([0.0, 1.0]))

    path.write_text("\n".join(json.dumps(r) for r in rows + [{"id": "c#0", "embedding": [1.0]}]), encoding="utf-8")
    with pytest.raises(DimensionMismatchError):
        load_vectors(path)
