# -*- coding: utf-8 -*-
import numpy as np
import pytest
import requests

from fairrag.embeddings import HashingEmbeddingProvider, HttpEmbeddingProvider, build_provider
from fairrag.errors import ConfigError, DimensionMismatchError, EmbeddingError


class _Response:
    def __init__(self, payload, status=200):
        self.payload = payload
        self.status = status

    def raise_for_status(self):
        if self.status >= 400:
            raise requests.HTTPError(f"{self.status} error")

    def json(self):
        return self.payload


class _Session:
    """记录请求并返回固定响应"""

    def __init__(self, response):
        self.response = response
        self.calls = []

    def post(self, url, json=None, timeout=None):
        self.calls.append((url, json))
        return self.response


def test_hashing_is_deterministic_and_normalized():
    provider = HashingEmbeddingProvider(32)
    first = provider.embed("زکات فطره")
    np.testing.assert_array_equal(first, HashingEmbeddingProvider(32).embed("زکات فطره"))
    assert first.shape == (32,)
    assert np.linalg.norm(first) == pytest.approx(1.0)
    assert np.count_nonzero(provider.embed("")) == 0


def test_hashing_rejects_bad_dimension():
    with pytest.raises(ConfigError):
        HashingEmbeddingProvider(0)


def test_http_provider_posts_text_list():
    session = _Session(_Response([[0.1, 0.2, 0.3]]))
    provider = HttpEmbeddingProvider("http://fasttext-api:8000/", dimension=3, session=session)
    np.testing.assert_allclose(provider.embed("hello"), [0.1, 0.2, 0.3])
    assert session.calls == [("http://fasttext-api:8000/sentence-vector", ["hello"])]


def test_http_provider_errors():
    wrong_dim = HttpEmbeddingProvider("http://x", dimension=4, session=_Session(_Response([[0.1, 0.2]])))
    with pytest.raises(DimensionMismatchError):
        wrong_dim.embed("a")

    wrong_count = HttpEmbeddingProvider("http://x", dimension=2, session=_Session(_Response([])))
    with pytest.raises(EmbeddingError):
        wrong_count.embed("a")

    server_error = HttpEmbeddingProvider("http://x", dimension=2, session=_Session(_Response({}, status=503)))
    with pytest.raises(EmbeddingError):
        server_error.embed("a")


def test_build_provider_kinds():
    assert build_provider("none") is None
    assert build_provider("hashing", dimension=8).dimension == 8
    assert isinstance(build_provider("http", dimension=8, base_url="http://x"), HttpEmbeddingProvider)
    with pytest.raises(ConfigError):
        build_provider("fasttext")
    with pytest.raises(ConfigError):
        build_provider("http")
    with pytest.raises(ConfigError):
        build_provider("word2vec")
