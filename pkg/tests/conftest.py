from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import pytest

from amcr.backends import DeterministicTestEncoder, StaticCandidateTable, fixture_encoder, load_vocabulary
from amcr.risk import load_corpus

ROOT = Path(__file__).resolve().parents[1]
FIXTURES = ROOT / "fixtures"


@pytest.fixture(scope="session")
def fixtures_dir() -> Path:
    return FIXTURES


@pytest.fixture(scope="session")
def encoder() -> DeterministicTestEncoder:
    return fixture_encoder()


@pytest.fixture(scope="session")
def corpus(encoder):
    return load_corpus(FIXTURES / "corpus.jsonl", encoder)


@pytest.fixture(scope="session")
def three_slot():
    d = FIXTURES / "sanitizer_3slot"
    enc = DeterministicTestEncoder.from_vocabulary(load_vocabulary(d / "vocab.json"))
    meta = json.loads((d / "prompt.json").read_text())
    table = StaticCandidateTable(json.loads((d / "candidates.json").read_text()))
    return {
        "encoder": enc,
        "corpus": load_corpus(d / "corpus.jsonl", enc),
        "prompt": meta["prompt"],
        "config": meta["config"],
        "table": table,
    }


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)
