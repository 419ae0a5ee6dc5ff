"""Shared pytest fixtures."""

from __future__ import annotations

import pytest

from crex.corpus import serialize_samples
from crex.embedding import HashingEmbedder
from crex.synth import synthetic_corpus


@pytest.fixture()
def embedder():
    return HashingEmbedder(dim=64)


@pytest.fixture(scope="session")
def toy_samples():
    return synthetic_corpus(seed=5)


@pytest.fixture()
def toy_corpus_path(tmp_path, toy_samples):
    path = tmp_path / "toy.jsonl"
    serialize_samples(toy_samples, path)
    return path
