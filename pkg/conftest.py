"""
Shared pytest fixtures: shipped corpora, a pair factory, an oracle-labelled
synthetic corpus and an offline pipeline config.
"""

from dataclasses import replace
from datetime import datetime, timedelta, timezone
from pathlib import Path

import numpy as np
import pytest

from config import PipelineConfig
from corpus import CommentEditPair, load_corpus, save_corpus
from retrieval import HashingEmbeddingBackend
from rules import machine_oracle

ROOT = Path(__file__).resolve().parent
TOY_CORPUS = ROOT / "data" / "toy_corpus.jsonl"
SOUP_SAMPLE = ROOT / "testdata" / "soup_sample.jsonl"
SOUP_CSV = ROOT / "testdata" / "soup_sample.csv"
GOLDEN_DIR = ROOT / "testdata" / "golden"

T0 = datetime(2021, 1, 1, tzinfo=timezone.utc)


def make_pair(pair_id="p1", comment="Use `sum` here.", before="total = 0", after="total = sum(xs)",
              label=None, comment_time=None, edit_time=None, commenter="u1", editor="u2",
              language=None, **extra) -> CommentEditPair:
    return CommentEditPair(
        pair_id=pair_id,
        comment_text=comment,
        code_before=before,
        code_after=after,
        label=label,
        comment_time=comment_time,
        edit_time=edit_time,
        commenter_id=commenter,
        editor_id=editor,
        language_tag=language,
        extra=tuple(extra.items()),
    )


SYNTHETIC_COMMENTS = (
    "Pass `retries` to compute_{i} so it survives timeouts.",
    "Thanks, great answer!",
    "Pass `retries` to compute_{i} so it survives timeouts.",
    "Which version of Python is this?",
    "You should add error handling.",
)


def synthetic_corpus(n=200, seed=0):
    """Pairs whose labels are whatever the machine-rule oracle says."""
    rng = np.random.default_rng(seed)
    pairs = []
    for i in range(n):
        variant = int(rng.integers(len(SYNTHETIC_COMMENTS)))
        comment_time = T0 + timedelta(hours=i)
        # variant 2 reuses a helpful comment but posts it after the edit
        offset = timedelta(minutes=-30) if variant == 2 else timedelta(minutes=30)
        draft = make_pair(
            pair_id=f"syn-{i:03d}",
            comment=SYNTHETIC_COMMENTS[variant].format(i=i),
            before=f"value_{i} = compute_{i}(data)",
            after=f"value_{i} = compute_{i}(data, retries={i % 5 + 1})",
            comment_time=comment_time,
            edit_time=comment_time + offset,
            commenter=f"c{i}",
            editor=f"e{i}",
            language="python",
            split="test" if i % 4 == 0 else "train",
        )
        pairs.append(replace(draft, label=machine_oracle(draft)))
    return pairs


@pytest.fixture
def pair_factory():
    return make_pair


@pytest.fixture
def toy_pairs():
    return load_corpus(TOY_CORPUS)


@pytest.fixture
def soup_pairs():
    return load_corpus(SOUP_SAMPLE)


@pytest.fixture
def hashing_backend():
    return HashingEmbeddingBackend(dim=64)


@pytest.fixture
def toy_config(tmp_path):
    config = PipelineConfig()
    config.corpus.path = str(TOY_CORPUS)
    config.output_dir = str(tmp_path / "run")
    return config


@pytest.fixture
def synthetic_config(tmp_path):
    path = save_corpus(synthetic_corpus(), tmp_path / "synthetic.jsonl")
    config = PipelineConfig()
    config.corpus.path = str(path)
    config.output_dir = str(tmp_path / "run")
    return config

