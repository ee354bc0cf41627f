# -*- coding: utf-8 -*-
"""
进程内混合索引

BM25 倒排索引 + 余弦向量检索 + Reciprocal Rank Fusion。
索引构建后不可变，可在多个查询之间并发只读共享。所有排序的平局按 chunk id 字典序打破。
"""
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import structlog

from .domain import Chunk, ChunkKind
from .embeddings import EmbeddingProvider
from .errors import DimensionMismatchError, EmbeddingError, IndexBuildError, IndexFormatError
from .ingest import RegexTokenizer, Tokenizer

logger = structlog.get_logger(__name__)

INDEX_FORMAT_VERSION = 1
HEADER_FILE = "header.json"
CHUNKS_FILE = "chunks.parquet"
POSTINGS_FILE = "postings.json"
VECTORS_FILE = "vectors.npy"
VECTOR_IDS_FILE = "vector_ids.json"


@dataclass(frozen=True)
class IndexParams:
    """BM25 与 RRF 参数"""
    k1: float = 1.2
    b: float = 0.75
    rrf_k: int = 60


@dataclass(frozen=True)
class RankedList:
    """按分数降序的 (chunk id, score) 列表，名次从 1 开始"""
    items: Tuple[Tuple[str, float], ...] = ()

    def __post_init__(self):
        ids = [chunk_id for chunk_id, _ in self.items]
        if len(set(ids)) != len(ids):
            raise ValueError("RankedList contains duplicate ids")
        for (_, current), (_, following) in zip(self.items, self.items[1:]):
            if following > current:
                raise ValueError("RankedList scores must be non-increasing")

    @classmethod
    def from_scores(cls, scores: Mapping[str, float], k: Optional[int] = None) -> "RankedList":
        ordered = sorted(scores.items(), key=lambda item: (-item[1], item[0]))
        if k is not None:
            ordered = ordered[:k]
        return cls(tuple(ordered))

    @property
    def ids(self) -> List[str]:
        return [chunk_id for chunk_id, _ in self.items]

    def __len__(self) -> int:
        return len(self.items)

    def __iter__(self):
        return iter(self.items)


class Index:
    """
    不可变的混合索引

    Attributes:
        chunks: chunk id -> Chunk（保持构建顺序）
        postings: term -> ((chunk id, 词频), ...)
        lengths: chunk id -> token 数
        avgdl: 平均长度
        vector_ids / matrix / dimension: 可选的稠密存储
    """

    def __init__(self, chunks: Dict[str, Chunk], postings: Dict[str, Tuple[Tuple[str, int], ...]],
                 lengths: Dict[str, int], params: IndexParams, tokenizer: Tokenizer,
                 vector_ids: Tuple[str, ...] = (), matrix: Optional[np.ndarray] = None):
        self.chunks = chunks
        self.postings = postings
        self.lengths = lengths
        self.params = params
        self.tokenizer = tokenizer
        self.avgdl = (sum(lengths.values()) / len(lengths)) if lengths else 0.0
        self.vector_ids = vector_ids
        self.matrix = matrix
        if matrix is not None:
            matrix.setflags(write=False)
            self._norms = np.linalg.norm(matrix, axis=1)
        else:
            self._norms = None

    @property
    def size(self) -> int:
        return len(self.chunks)

    @property
    def dimension(self) -> Optional[int]:
        return None if self.matrix is None else int(self.matrix.shape[1])

    @property
    def has_dense(self) -> bool:
        return self.matrix is not None

    def get(self, chunk_id: str) -> Chunk:
        return self.chunks[chunk_id]


def build_index(chunks: Iterable[Chunk], params: Optional[IndexParams] = None,
                tokenizer: Optional[Tokenizer] = None, provider: Optional[EmbeddingProvider] = None,
                vectors: Optional[Mapping[str, np.ndarray]] = None) -> Index:
    """
    构建索引

    向量来源优先级：Chunk.embedding > vectors 映射 > provider.embed。
    三者都没有时索引只有稀疏部分；只有部分 chunk 有向量则报错。
    """
    params = params or IndexParams()
    tokenizer = tokenizer or RegexTokenizer()
    vectors = vectors or {}

    by_id: Dict[str, Chunk] = {}
    term_postings: Dict[str, List[Tuple[str, int]]] = {}
    lengths: Dict[str, int] = {}
    for chunk in chunks:
        if chunk.id in by_id:
            raise IndexBuildError(f"duplicate chunk id {chunk.id!r}")
        by_id[chunk.id] = chunk
        tokens = tokenizer.tokenize(chunk.text)
        lengths[chunk.id] = len(tokens)
        frequencies: Dict[str, int] = {}
        for token in tokens:
            frequencies[token] = frequencies.get(token, 0) + 1
        for term, tf in frequencies.items():
            term_postings.setdefault(term, []).append((chunk.id, tf))

    postings = {term: tuple(entries) for term, entries in term_postings.items()}

    dense: List[np.ndarray] = []
    missing: List[str] = []
    for chunk_id, chunk in by_id.items():
        if chunk.embedding is not None:
            dense.append(np.asarray(chunk.embedding, dtype=np.float64))
        elif chunk_id in vectors:
            dense.append(np.asarray(vectors[chunk_id], dtype=np.float64))
        elif provider is not None:
            dense.append(provider.embed(chunk.text))
        else:
            missing.append(chunk_id)

    matrix = None
    vector_ids: Tuple[str, ...] = ()
    if dense:
        if missing:
            raise IndexBuildError(f"{len(missing)} chunks have no vector, first {missing[0]!r}")
        dims = {vector.shape[0] for vector in dense}
        if len(dims) != 1:
            raise DimensionMismatchError(f"chunk vectors have mixed dimensions {sorted(dims)}")
        matrix = np.vstack(dense)
        vector_ids = tuple(by_id)

    logger.info("index built", chunks=len(by_id), terms=len(postings),
                dimension=None if matrix is None else matrix.shape[1])
    return Index(by_id, postings, lengths, params, tokenizer, vector_ids, matrix)


def bm25_search(index: Index, query: str, k: int) -> RankedList:
    """BM25 稀疏检索，只返回正分文档"""
    terms = list(dict.fromkeys(index.tokenizer.tokenize(query)))
    n_docs = index.size
    if not terms or n_docs == 0:
        return RankedList()

    k1, b = index.params.k1, index.params.b
    scores: Dict[str, float] = {}
    for term in terms:
        entries = index.postings.get(term)
        if not entries:
            continue
        n_t = len(entries)
        idf = math.log(1.0 + (n_docs - n_t + 0.5) / (n_t + 0.5))
        for chunk_id, tf in entries:
            norm = k1 * (1.0 - b + b * index.lengths[chunk_id] / index.avgdl)
            scores[chunk_id] = scores.get(chunk_id, 0.0) + idf * tf * (k1 + 1.0) / (tf + norm)

    positive = {chunk_id: score for chunk_id, score in scores.items() if score > 0.0}
    return RankedList.from_scores(positive, k)


def dense_search(index: Index, query_vec: np.ndarray, k: int) -> RankedList:
    """穷举余弦检索；零向量的相似度记 0"""
    if index.matrix is None:
        raise IndexFormatError("index has no dense store")
    query_vec = np.asarray(query_vec, dtype=np.float64)
    if query_vec.shape != (index.dimension,):
        raise DimensionMismatchError(
            f"query vector dimension {query_vec.shape[-1] if query_vec.ndim else 0} != index {index.dimension}")

    query_norm = float(np.linalg.norm(query_vec))
    dots = index.matrix @ query_vec
    denominators = index._norms * query_norm
    with np.errstate(divide="ignore", invalid="ignore"):
        sims = np.where(denominators > 0, dots / denominators, 0.0)
    scores = {chunk_id: float(sim) for chunk_id, sim in zip(index.vector_ids, sims)}
    return RankedList.from_scores(scores, k)


def rrf_fuse(lists: Sequence[RankedList], rrf_k: int = 60) -> RankedList:
    """RRF：score(d) = Σ 1/(rrf_k + rank)，同一 id 在多个列表中合并计分"""
    scores: Dict[str, float] = {}
    for ranked in lists:
        for rank, (chunk_id, _) in enumerate(ranked, start=1):
            scores[chunk_id] = scores.get(chunk_id, 0.0) + 1.0 / (rrf_k + rank)
    return RankedList.from_scores(scores)


def hybrid_retrieve(index: Index, sub_query: str, provider: Optional[EmbeddingProvider] = None,
                    top_k: int = 3, sparse_only_fallback: bool = False) -> List[Chunk]:
    """
    单个子查询的混合检索：BM25 top-k 与稠密 top-k 做 RRF，返回融合后前 top_k 个 chunk

    没有稠密存储或没有 provider 时只融合一个稀疏列表。
    provider 失败时，sparse_only_fallback 为真则退化为纯稀疏，否则异常上抛。
    """
    lists = [bm25_search(index, sub_query, top_k)]
    if index.has_dense and provider is not None:
        try:
            lists.append(dense_search(index, provider.embed(sub_query), top_k))
        except (EmbeddingError, DimensionMismatchError) as e:
            if not sparse_only_fallback:
                raise
            logger.warning("dense retrieval failed, using sparse only", sub_query=sub_query, error=str(e))
    fused = rrf_fuse(lists, index.params.rrf_k)
    return [index.chunks[chunk_id] for chunk_id in fused.ids[:top_k]]


@dataclass
class HybridRetriever:
    """绑定索引、provider 与检索策略，供编排器调用"""
    index: Index
    provider: Optional[EmbeddingProvider] = None
    top_k: int = 3
    sparse_only_fallback: bool = False

    def retrieve(self, sub_query: str) -> List[Chunk]:
        return hybrid_retrieve(self.index, sub_query, self.provider, self.top_k, self.sparse_only_fallback)


def save_index(index: Index, path) -> Path:
    """把索引写成目录：header.json / chunks.parquet / postings.json / 可选 vectors.npy"""
    directory = Path(path)
    directory.mkdir(parents=True, exist_ok=True)

    header = {
        "format_version": INDEX_FORMAT_VERSION,
        "params": asdict(index.params),
        "dimension": index.dimension,
        "tokenizer": getattr(index.tokenizer, "name", type(index.tokenizer).__name__),
        "chunk_count": index.size,
    }
    with open(directory / HEADER_FILE, "w", encoding="utf-8") as f:
        json.dump(header, f, indent=2, ensure_ascii=False)

    rows = [
        {
            "id": chunk.id,
            "text": chunk.text,
            "source_url": chunk.source_url,
            "token_count": chunk.token_count,
            "kind": chunk.kind.value,
            "length": index.lengths[chunk.id],
        }
        for chunk in index.chunks.values()
    ]
    frame = pd.DataFrame(rows, columns=["id", "text", "source_url", "token_count", "kind", "length"])
    frame = frame.astype({"id": str, "text": str, "source_url": str, "kind": str,
                          "token_count": "int64", "length": "int64"})
    frame.to_parquet(directory / CHUNKS_FILE, index=False, engine="pyarrow")

    postings = {term: [[chunk_id, tf] for chunk_id, tf in entries] for term, entries in index.postings.items()}
    with open(directory / POSTINGS_FILE, "w", encoding="utf-8") as f:
        json.dump(postings, f, ensure_ascii=False, sort_keys=True)

    if index.matrix is not None:
        np.save(directory / VECTORS_FILE, index.matrix)
        with open(directory / VECTOR_IDS_FILE, "w", encoding="utf-8") as f:
            json.dump(list(index.vector_ids), f, ensure_ascii=False)

    logger.info("index saved", path=str(directory), chunks=index.size)
    return directory


def load_index(path, tokenizer: Optional[Tokenizer] = None) -> Index:
    """读取 save_index 写出的目录；版本不符或缺文件抛 IndexFormatError"""
    directory = Path(path)
    tokenizer = tokenizer or RegexTokenizer()
    try:
        with open(directory / HEADER_FILE, "r", encoding="utf-8") as f:
            header = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise IndexFormatError(f"cannot read index header in {directory}: {e}") from e

    version = header.get("format_version")
    if version != INDEX_FORMAT_VERSION:
        raise IndexFormatError(f"index format version {version} != supported {INDEX_FORMAT_VERSION}")
    stored_tokenizer = header.get("tokenizer")
    current_tokenizer = getattr(tokenizer, "name", type(tokenizer).__name__)
    if stored_tokenizer != current_tokenizer:
        logger.warning("index tokenizer differs", stored=stored_tokenizer, current=current_tokenizer)

    try:
        frame = pd.read_parquet(directory / CHUNKS_FILE, engine="pyarrow")
        with open(directory / POSTINGS_FILE, "r", encoding="utf-8") as f:
            raw_postings = json.load(f)
    except (OSError, ValueError) as e:
        raise IndexFormatError(f"cannot read index data in {directory}: {e}") from e

    chunks: Dict[str, Chunk] = {}
    lengths: Dict[str, int] = {}
    for row in frame.itertuples(index=False):
        chunks[row.id] = Chunk(id=row.id, text=row.text, source_url=row.source_url,
                               token_count=int(row.token_count), kind=ChunkKind(row.kind))
        lengths[row.id] = int(row.length)
    postings = {term: tuple((chunk_id, int(tf)) for chunk_id, tf in entries)
                for term, entries in raw_postings.items()}

    matrix = None
    vector_ids: Tuple[str, ...] = ()
    if header.get("dimension") is not None:
        try:
            matrix = np.load(directory / VECTORS_FILE)
            with open(directory / VECTOR_IDS_FILE, "r", encoding="utf-8") as f:
                vector_ids = tuple(json.load(f))
        except (OSError, ValueError) as e:
            raise IndexFormatError(f"cannot read index vectors in {directory}: {e}") from e
        if matrix.ndim != 2 or matrix.shape[1] != header["dimension"] or len(vector_ids) != matrix.shape[0]:
            raise IndexFormatError(f"vectors file does not match declared dimension {header['dimension']}")

    if header.get("chunk_count", len(chunks)) != len(chunks):
        raise IndexFormatError(f"header declares {header['chunk_count']} chunks, found {len(chunks)}")

    params = IndexParams(**header.get("params", {}))
    logger.info("index loaded", path=str(directory), chunks=len(chunks))
    return Index(chunks, postings, lengths, params, tokenizer, vector_ids, matrix)
