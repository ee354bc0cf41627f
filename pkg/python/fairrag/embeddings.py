# -*- coding: utf-8 -*-
"""
向量提供方

三种实现共享同一个契约：text -> 固定维度的 float64 向量。
- HashingEmbeddingProvider: 纯本地、确定性的特征哈希，测试和离线运行默认用它
- FastTextEmbeddingProvider: 本地 fastText 模型的 get_sentence_vector
- HttpEmbeddingProvider: 调用运行中的 fastText serving 实例的 POST /sentence-vector
"""
import hashlib
from typing import List, Optional, Protocol, Sequence

import numpy as np
import requests
import structlog

from .errors import ConfigError, DimensionMismatchError, EmbeddingError
from .ingest import RegexTokenizer, Tokenizer

logger = structlog.get_logger(__name__)


class EmbeddingProvider(Protocol):
    dimension: int

    def embed(self, text: str) -> np.ndarray:
        ...


class HashingEmbeddingProvider:
    """把 token 哈希进 dimension 个桶（带符号），再做 L2 归一化"""

    def __init__(self, dimension: int = 64, tokenizer: Optional[Tokenizer] = None):
        if dimension <= 0:
            raise ConfigError(f"embedding dimension must be positive, got {dimension}")
        self.dimension = dimension
        self.tokenizer = tokenizer or RegexTokenizer()

    def embed(self, text: str) -> np.ndarray:
        vector = np.zeros(self.dimension, dtype=np.float64)
        for token in self.tokenizer.tokenize(text):
            digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest()
            value = int.from_bytes(digest, "little")
            sign = 1.0 if (value >> 63) & 1 == 0 else -1.0
            vector[value % self.dimension] += sign
        norm = np.linalg.norm(vector)
        if norm > 0:
            vector /= norm
        return vector


class FastTextEmbeddingProvider:
    """本地 fastText 模型；fasttext 是可选依赖，按需导入"""

    def __init__(self, model_path: str):
        try:
            import fasttext
        except ImportError as e:
            raise ConfigError("fastText provider needs the optional 'fasttext' package") from e
        logger.info("loading fastText model", model_path=model_path)
        try:
            self.model = fasttext.load_model(model_path)
        except Exception as e:
            raise EmbeddingError(f"failed to load fastText model {model_path}: {e}") from e
        self.dimension = int(self.model.get_dimension())

    def embed(self, text: str) -> np.ndarray:
        # get_sentence_vector 不接受换行
        text = " ".join(text.split())
        if not text:
            return np.zeros(self.dimension, dtype=np.float64)
        return np.asarray(self.model.get_sentence_vector(text), dtype=np.float64)


class HttpEmbeddingProvider:
    """远程 fastText serving：POST {base_url}/sentence-vector，请求体为字符串列表"""

    def __init__(self, base_url: str, dimension: int, timeout: float = 30.0,
                 session: Optional[requests.Session] = None):
        self.base_url = base_url.rstrip("/")
        self.dimension = dimension
        self.timeout = timeout
        self.session = session or requests.Session()

    def embed_many(self, texts: Sequence[str]) -> List[np.ndarray]:
        try:
            response = self.session.post(f"{self.base_url}/sentence-vector", json=list(texts), timeout=self.timeout)
            response.raise_for_status()
            payload = response.json()
        except (requests.RequestException, ValueError) as e:
            raise EmbeddingError(f"sentence-vector request to {self.base_url} failed: {e}") from e
        if not isinstance(payload, list) or len(payload) != len(texts):
            raise EmbeddingError(f"sentence-vector returned {type(payload).__name__} for {len(texts)} texts")
        vectors = [np.asarray(row, dtype=np.float64) for row in payload]
        for vector in vectors:
            if vector.shape != (self.dimension,):
                raise DimensionMismatchError(
                    f"sentence-vector returned dimension {vector.shape[-1]} != {self.dimension}")
        return vectors

    def embed(self, text: str) -> np.ndarray:
        return self.embed_many([text])[0]


def build_provider(kind: str, dimension: int = 64, model_path: str = "", base_url: str = "",
                   timeout: float = 30.0) -> Optional[EmbeddingProvider]:
    """按配置名构造提供方；"none" 表示纯稀疏检索"""
    if kind == "none":
        return None
    if kind == "hashing":
        return HashingEmbeddingProvider(dimension)
    if kind == "fasttext":
        if not model_path:
            raise ConfigError("embedding.kind = 'fasttext' needs embedding.model_path")
        return FastTextEmbeddingProvider(model_path)
    if kind == "http":
        if not base_url:
            raise ConfigError("embedding.kind = 'http' needs embedding.base_url")
        return HttpEmbeddingProvider(base_url, dimension, timeout)
    raise ConfigError(f"unknown embedding provider {kind!r} (expected none|hashing|fasttext|http)")
