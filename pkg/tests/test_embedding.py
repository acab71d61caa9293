"""Embedding providers and the candidate matrix."""

from __future__ import annotations

import numpy as np
import pytest

import grouptopo as gt
from grouptopo.errors import BackendError, ValidationError


def test_hash_embedder_is_deterministic():
    emb = gt.HashingTextEmbedder(32)
    a = emb.encode_one("solve the riddle carefully")
    b = emb.encode_one("solve the riddle carefully")
    assert np.array_equal(a, b)


def test_hash_embedder_unit_norm():
    emb = gt.HashingTextEmbedder(64)
    vec = emb.encode_one("numbers and words mixed 42 times")
    assert np.isclose(np.linalg.norm(vec), 1.0)


def test_hash_embedder_empty_text_is_zero():
    emb = gt.HashingTextEmbedder(16)
    assert np.array_equal(emb.encode_one(""), np.zeros(16))
    assert np.array_equal(emb.encode_one("   ?!,  "), np.zeros(16))


def test_hash_embedder_distinguishes_texts():
    emb = gt.HashingTextEmbedder(64)
    a = emb.encode_one("add the two numbers")
    b = emb.encode_one("multiply the two numbers")
    assert not np.allclose(a, b)


def test_hash_embedder_word_order_matters():
    emb = gt.HashingTextEmbedder(64)
    a = emb.encode_one("alpha beta gamma")
    b = emb.encode_one("gamma beta alpha")
    assert not np.allclose(a, b)


def test_hash_embedder_case_insensitive():
    emb = gt.HashingTextEmbedder(32)
    assert np.array_equal(emb.encode_one("Solve This"), emb.encode_one("solve this"))


def test_hash_embedder_batch_shapes():
    emb = gt.HashingTextEmbedder(8)
    out = emb.encode(["one", "two", "three"])
    assert out.shape == (3, 8)
    assert emb.encode([]).shape == (0, 8)


def test_hash_embedder_rejects_bad_dim():
    with pytest.raises(ValidationError):
        gt.HashingTextEmbedder(0)


def test_encode_task_wraps_vector():
    emb = gt.HashingTextEmbedder(16)
    task = gt.encode_task(emb, "compute the total")
    assert task.text == "compute the total"
    assert task.vector.shape == (16,)


def test_candidate_matrix_layout():
    pool = gt.default_pool()
    emb = gt.HashingTextEmbedder(24)
    cand = gt.build_candidate_matrix(emb, pool)
    assert cand.matrix.shape == (pool.size + 1, 24)
    assert cand.end_index == pool.size
    assert cand.dim == 24
    assert np.array_equal(cand.matrix[-1], np.zeros(24))
    # Frozen rows are the embeddings of each group's canonical text.
    assert np.array_equal(cand.matrix[0], emb.encode_one(pool[0].text()))


def test_candidate_matrix_validates_shape():
    with pytest.raises(ValidationError, match="rows"):
        gt.CandidateMatrix(matrix=np.zeros((3, 8)), pool_size=4)


class FakeResponse:
    def __init__(self, status_code=200, payload=None, text=""):
        self.status_code = status_code
        self._payload = payload
        self.text = text

    def json(self):
        if self._payload is None:
            raise ValueError("no body")
        return self._payload


class FakeSession:
    def __init__(self, responses):
        self.responses = list(responses)
        self.calls = []

    def post(self, url, **kwargs):
        self.calls.append((url, kwargs))
        result = self.responses.pop(0)
        if isinstance(result, Exception):
            raise result
        return result


def test_http_encoder_success():
    session = FakeSession(
        [FakeResponse(payload={"embeddings": [[1.0, 0.0], [0.0, 1.0]]})]
    )
    client = gt.HttpEncoderClient(2, url="http://enc.test/v1", key="sk-1",
                                  session=session)
    out = client.encode(["a", "b"])
    assert out.shape == (2, 2)
    _, kwargs = session.calls[0]
    assert kwargs["headers"]["Authorization"] == "Bearer sk-1"
    assert kwargs["json"] == {"texts": ["a", "b"]}


def test_http_encoder_bad_status():
    session = FakeSession([FakeResponse(status_code=503, text="down")])
    client = gt.HttpEncoderClient(2, url="http://enc.test", session=session)
    with pytest.raises(BackendError, match="503"):
        client.encode(["a"])


def test_http_encoder_wrong_shape():
    session = FakeSession([FakeResponse(payload={"embeddings": [[1.0, 2.0, 3.0]]})])
    client = gt.HttpEncoderClient(2, url="http://enc.test", session=session)
    with pytest.raises(BackendError, match="shape"):
        client.encode(["a"])


def test_http_encoder_transport_error():
    session = FakeSession([ConnectionError("refused")])
    client = gt.HttpEncoderClient(2, url="http://enc.test", session=session)
    with pytest.raises(BackendError, match="failed"):
        client.encode(["a"])


def test_http_encoder_requires_url(monkeypatch):
    monkeypatch.delenv("GOA_ENCODER_URL", raising=False)
    with pytest.raises(BackendError, match="GOA_ENCODER_URL"):
        gt.HttpEncoderClient(4)


def test_http_encoder_reads_env(monkeypatch):
    monkeypatch.setenv("GOA_ENCODER_URL", "http://enc.env")
    monkeypatch.setenv("GOA_ENCODER_KEY", "k-env")
    session = FakeSession([FakeResponse(payload={"embeddings": [[0.0] * 4]})])
    client = gt.HttpEncoderClient(4, session=session)
    client.encode(["x"])
    url, kwargs = session.calls[0]
    assert url == "http://enc.env"
    assert kwargs["headers"]["Authorization"] == "Bearer k-env"
