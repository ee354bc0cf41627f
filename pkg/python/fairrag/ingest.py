# -*- coding: utf-8 -*-
"""
语料加载与切块

JSONL 语料 -> SourceDocument -> Chunk。切块策略：先按空行分段，超长段落再按句子
贪心打包，单句超长则在 token 边界硬切。问答类文档的每个块都带上问题前缀，前缀 token
计入长度上限。
"""
import json
import re
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Protocol, Tuple

import numpy as np
import structlog
from pydantic import ValidationError, model_validator

from .domain import DEFAULT_CHUNK_LIMIT, Chunk, ChunkKind, _Frozen
from .errors import CorpusError, DimensionMismatchError

logger = structlog.get_logger(__name__)

MIN_CHUNK_TOKENS = 16
QUESTION_MARKER = "(سؤال کاربر):"
ANSWER_MARKER = "(پاسخ کارشناس):"

_PARAGRAPH_RE = re.compile(r"\n\s*\n")
_SENTENCE_RE = re.compile(r"(?<=[.؟!?…۔])\s+")
_TOKEN_RE = re.compile(r"\w+|[^\w\s]", re.UNICODE)
_WORD_RE = re.compile(r"\S+")


class Tokenizer(Protocol):
    """text -> tokens，必须确定且无副作用"""

    name: str

    def tokenize(self, text: str) -> List[str]:
        ...


class RegexTokenizer:
    """
    默认分词器：按 Unicode 单词与标点切分

    只对 ASCII token 做小写化，波斯语/阿拉伯语等非拉丁文本保持原样。
    """

    name = "regex-v1"

    def tokenize(self, text: str) -> List[str]:
        return [tok.lower() if tok.isascii() else tok for tok in _TOKEN_RE.findall(text)]

    def spans(self, text: str) -> List[Tuple[int, int]]:
        return [m.span() for m in _TOKEN_RE.finditer(text)]

    def count(self, text: str) -> int:
        return len(self.tokenize(text))


class SourceDocument(_Frozen):
    id: str
    kind: ChunkKind = ChunkKind.ENCYCLOPEDIA
    text: str
    question: Optional[str] = None
    source_url: str = ""

    @model_validator(mode="after")
    def _qa_needs_question(self) -> "SourceDocument":
        if self.kind == ChunkKind.QA and not (self.question or "").strip():
            raise ValueError(f"qa document {self.id!r} has no question")
        return self


def _token_spans(tok: Tokenizer, text: str) -> List[Tuple[int, int]]:
    spans = getattr(tok, "spans", None)
    if callable(spans):
        return spans(text)
    # 自定义分词器没有 spans 时退化为空白切分
    return [m.span() for m in _WORD_RE.finditer(text)]


def _count(tok: Tokenizer, text: str) -> int:
    return len(tok.tokenize(text))


def _qa_prefix(question: str, max_tokens: int, tok: Tokenizer, doc_id: str) -> str:
    """构造问答前缀；问题过长时截断到上限的一半"""
    question = question.strip()
    markers = _count(tok, f"{QUESTION_MARKER}\n{ANSWER_MARKER}\n")
    allowed = max(1, max_tokens // 2 - markers)
    spans = _token_spans(tok, question)
    if len(spans) > allowed:
        logger.warning("qa question truncated", doc_id=doc_id, question_tokens=len(spans), allowed=allowed)
        question = question[:spans[allowed - 1][1]]
    return f"{QUESTION_MARKER} {question}\n{ANSWER_MARKER}\n"


def _hard_split(sentence: str, fits, tok: Tokenizer) -> List[str]:
    """单句超长：在 token 边界切开，每片都满足 fits"""
    spans = _token_spans(tok, sentence)
    if not spans:
        return []
    pieces: List[str] = []
    start = 0
    while start < len(spans):
        end = start + 1
        while end < len(spans) and fits(sentence[spans[start][0]:spans[end][1]]):
            end += 1
        pieces.append(sentence[spans[start][0]:spans[end - 1][1]])
        start = end
    return pieces


def _split_paragraph(paragraph: str, fits, tok: Tokenizer) -> List[str]:
    if fits(paragraph):
        return [paragraph]

    bodies: List[str] = []
    current = ""
    for sentence in _SENTENCE_RE.split(paragraph):
        sentence = sentence.strip()
        if not sentence:
            continue
        candidate = f"{current} {sentence}" if current else sentence
        if fits(candidate):
            current = candidate
            continue
        if current:
            bodies.append(current)
            current = ""
        if fits(sentence):
            current = sentence
            continue
        pieces = _hard_split(sentence, fits, tok)
        bodies.extend(pieces[:-1])
        current = pieces[-1] if pieces else ""
    if current:
        bodies.append(current)
    return bodies


def chunk_document(doc: SourceDocument, max_tokens: int = DEFAULT_CHUNK_LIMIT,
                   tok: Optional[Tokenizer] = None) -> List[Chunk]:
    """
    把一篇文档切成若干 Chunk

    Args:
        doc: 源文档
        max_tokens: 每块 token 上限（含问答前缀），至少 16
        tok: 分词器，默认 RegexTokenizer

    Returns:
        按顺序编号的 Chunk 列表，id 为 "{doc.id}#k"
    """
    if max_tokens < MIN_CHUNK_TOKENS:
        raise ValueError(f"max_tokens must be >= {MIN_CHUNK_TOKENS}, got {max_tokens}")
    tok = tok or RegexTokenizer()

    prefix = ""
    if doc.kind == ChunkKind.QA:
        prefix = _qa_prefix(doc.question or "", max_tokens, tok, doc.id)

    def fits(body: str) -> bool:
        return _count(tok, prefix + body) <= max_tokens

    bodies: List[str] = []
    for paragraph in _PARAGRAPH_RE.split(doc.text):
        paragraph = paragraph.strip()
        if paragraph:
            bodies.extend(_split_paragraph(paragraph, fits, tok))

    chunks = []
    for ordinal, body in enumerate(bodies):
        text = prefix + body
        chunks.append(Chunk(
            id=f"{doc.id}#{ordinal}",
            text=text,
            source_url=doc.source_url,
            token_count=_count(tok, text),
            kind=doc.kind,
        ))
    return chunks


def strip_qa_markers(text: str) -> str:
    """去掉问答前缀，只留答案正文"""
    if not text.startswith(QUESTION_MARKER):
        return text
    _, sep, body = text.partition(f"{ANSWER_MARKER}\n")
    return body if sep else text


def iter_jsonl(path: Path, strict: bool = True) -> Iterable[Tuple[int, dict]]:
    """逐行读取 JSONL，跳过空行；返回 (行号, 对象)。非 strict 模式下坏行记警告后跳过"""
    try:
        handle = open(path, "r", encoding="utf-8")
    except OSError as e:
        raise CorpusError(f"cannot read {path}: {e}") from e
    with handle:
        for line_number, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                payload = json.loads(line)
            except json.JSONDecodeError as e:
                error = CorpusError(f"invalid JSON: {e.msg}", line_number)
                if strict:
                    raise error from e
                logger.warning("skipping jsonl line", path=str(path), error=str(error))
                continue
            if not isinstance(payload, dict):
                error = CorpusError("record is not a JSON object", line_number)
                if strict:
                    raise error
                logger.warning("skipping jsonl line", path=str(path), error=str(error))
                continue
            yield line_number, payload


def load_documents(path, strict: bool = True) -> List[SourceDocument]:
    documents = []
    for line_number, payload in iter_jsonl(Path(path), strict=strict):
        try:
            documents.append(SourceDocument.model_validate(payload))
        except ValidationError as e:
            error = CorpusError(f"schema violation: {e.errors()[0]['msg']}", line_number)
            if strict:
                raise error from e
            logger.warning("skipping corpus record", error=str(error))
    return documents


def load_corpus(path, max_tokens: int = DEFAULT_CHUNK_LIMIT, tok: Optional[Tokenizer] = None,
                strict: bool = True) -> List[Chunk]:
    """
    读取语料 JSONL 并切块

    Returns:
        按文件顺序排列的全部 Chunk；strict 模式下首个坏行抛 CorpusError（含行号）
    """
    tok = tok or RegexTokenizer()
    chunks: List[Chunk] = []
    documents = load_documents(path, strict=strict)
    for doc in documents:
        chunks.extend(chunk_document(doc, max_tokens, tok))
    logger.info("corpus loaded", path=str(path), documents=len(documents), chunks=len(chunks))
    return chunks


def load_vectors(path) -> Dict[str, np.ndarray]:
    """读取预计算向量 JSONL：{"id": chunk_id, "embedding": [...]}"""
    vectors: Dict[str, np.ndarray] = {}
    dimension = None
    for line_number, payload in iter_jsonl(Path(path)):
        if "id" not in payload or "embedding" not in payload:
            raise CorpusError("vector record needs 'id' and 'embedding'", line_number)
        vector = np.asarray(payload["embedding"], dtype=np.float64)
        if vector.ndim != 1:
            raise CorpusError("embedding must be a flat list of numbers", line_number)
        if dimension is None:
            dimension = vector.shape[0]
        elif vector.shape[0] != dimension:
            raise DimensionMismatchError(
                f"line {line_number}: embedding dimension {vector.shape[0]} != {dimension}")
        vectors[str(payload["id"])] = vector
    return vectors
