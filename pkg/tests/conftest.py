"""Shared fixtures: synthetic keyword datasets and a toy model."""

from pathlib import Path

import numpy as np
import pytest

from src.data import TREC_LABELS, load_dataset
from src.model import ClassifierParams, NoiseHeadParams

QUESTION_WORDS = ("How", "What", "Who", "Where", "When", "Which")
FILLER = tuple(f"filler{i}" for i in range(40))


def write_synthetic_trec(path: Path, per_class: int, seed: int) -> Path:
    """TREC-format file where each coarse class owns a set of keywords.

    Texts mix three class keywords with a variable number of shared filler words, so
    a bag-of-embeddings model can learn the clean labels quickly.
    """
    rng = np.random.default_rng(seed)
    lines = []
    for label_idx, label in enumerate(TREC_LABELS):
        keywords = [f"{label.lower()}word{k}" for k in range(8)]
        for _ in range(per_class):
            opener = QUESTION_WORDS[int(rng.integers(len(QUESTION_WORDS)))]
            body = [keywords[int(k)] for k in rng.integers(len(keywords), size=3)]
            body += [FILLER[int(k)] for k in rng.integers(len(FILLER), size=int(rng.integers(1, 8)))]
            rng.shuffle(body)
            lines.append(f"{label}:sub{label_idx} {opener} {' '.join(body)} ?")
    order = rng.permutation(len(lines))
    path.write_text("\n".join(lines[i] for i in order) + "\n", encoding="utf-8")
    return path


@pytest.fixture
def trec_train_path(tmp_path):
    return write_synthetic_trec(tmp_path / "train.trec", per_class=60, seed=1)


@pytest.fixture
def trec_test_path(tmp_path):
    return write_synthetic_trec(tmp_path / "test.trec", per_class=15, seed=2)


@pytest.fixture
def trec_dataset(trec_train_path):
    return load_dataset(trec_train_path, "trec")


@pytest.fixture
def toy_params():
    """Toy classifier (d=4, h=6, C=3, vocab 10) and noise heads for both representations."""
    rng = np.random.default_rng(11)
    cparams = ClassifierParams(
        embedding=rng.normal(0, 0.5, size=(10, 4)),
        W1=rng.normal(0, 0.5, size=(4, 6)),
        b1=rng.normal(0, 0.1, size=6),
        W2=rng.normal(0, 0.5, size=(6, 3)),
        b2=rng.normal(0, 0.1, size=3),
        dropout_rate=0.3,
    )
    heads = {
        "logits": NoiseHeadParams(
            V1=rng.normal(0, 0.5, size=(3, 12)),
            c1=rng.normal(0, 0.1, size=12),
            V2=rng.normal(0, 0.5, size=(12, 3)),
            c2=rng.normal(0, 0.1, size=3),
        ),
        "concat": NoiseHeadParams(
            V1=rng.normal(0, 0.5, size=(9, 36)),
            c1=rng.normal(0, 0.1, size=36),
            V2=rng.normal(0, 0.5, size=(36, 3)),
            c2=rng.normal(0, 0.1, size=3),
        ),
    }
    return cparams, heads


@pytest.fixture
def toy_batch():
    """Five examples over a 10-token vocabulary, with their noisy labels."""
    batch = [[1, 2, 3], [4], [5, 5, 6, 7], [8, 9], [2, 4, 6]]
    labels = np.array([0, 1, 2, 1, 0])
    return batch, labels
