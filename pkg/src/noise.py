"""Seeded, reproducible label corruption.

Three protocols: uniform random noise, noise restricted to texts carrying trigger
tokens, and noise on the longest texts. Selection is exact-count, and every
selected label moves to a uniformly drawn different class. Original labels travel
in ``clean_label`` for diagnostics only.
"""

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from src.data import Dataset, raw_tokens, write_tsv
from src.numerics import derive_seed

logger = logging.getLogger(__name__)

NOISE_KINDS = ("random", "token_conditional", "length_conditional")
MATCH_MODES = ("contains", "starts_with")


@dataclass
class NoiseSpec:
    kind: str = "random"
    level: float = 0.0
    trigger_tokens: Tuple[str, ...] = ()
    match_mode: str = "starts_with"
    seed: int = 0

    def __post_init__(self):
        self.trigger_tokens = tuple(self.trigger_tokens)
        if self.kind not in NOISE_KINDS:
            raise ValueError(f"unknown noise kind {self.kind!r}; expected one of {NOISE_KINDS}")
        if not 0.0 <= self.level <= 1.0:
            raise ValueError(f"noise level must lie in [0, 1], got {self.level}")
        if self.match_mode not in MATCH_MODES:
            raise ValueError(f"unknown match mode {self.match_mode!r}")
        if self.kind == "token_conditional" and not self.trigger_tokens:
            raise ValueError("token_conditional noise needs at least one trigger token")
        if self.kind == "length_conditional" and self.level == 0.0:
            raise ValueError("length_conditional noise needs a fraction in (0, 1]")


@dataclass
class NoiseReport:
    selected_count: int
    flipped_count: int
    eligible_count: int
    total_count: int
    realized_noise_fraction: float
    per_class_flip_matrix: List[List[int]] = field(default_factory=list)

    def to_dict(self) -> Dict:
        return {
            "selected_count": self.selected_count,
            "flipped_count": self.flipped_count,
            "eligible_count": self.eligible_count,
            "total_count": self.total_count,
            "realized_noise_fraction": self.realized_noise_fraction,
            "per_class_flip_matrix": self.per_class_flip_matrix,
        }


def exact_count(level: float, n: int) -> int:
    """round(level * n) with halves rounded up."""
    return int(np.floor(level * n + 0.5))


def _flip(
    dataset: Dataset, positions: Sequence[int], rng: np.random.Generator, eligible: int
) -> Tuple[Dataset, NoiseReport]:
    num_classes = dataset.num_classes
    if num_classes < 2:
        raise ValueError("label noise needs at least 2 classes")

    examples = list(dataset.examples)
    for pos in sorted(positions):
        ex = examples[pos]
        # uniform over the C-1 classes other than the original
        draw = int(rng.integers(num_classes - 1))
        new_label = draw if draw < ex.clean_label else draw + 1
        examples[pos] = replace(ex, noisy_label=new_label)

    matrix = np.zeros((num_classes, num_classes), dtype=np.int64)
    for ex in examples:
        matrix[ex.clean_label, ex.noisy_label] += 1
    noisy_total = sum(ex.noisy_label != ex.clean_label for ex in examples)

    report = NoiseReport(
        selected_count=len(positions),
        flipped_count=len(positions),
        eligible_count=eligible,
        total_count=len(examples),
        realized_noise_fraction=noisy_total / len(examples) if examples else 0.0,
        per_class_flip_matrix=matrix.tolist(),
    )
    logger.info(
        "Flipped %d of %d eligible / %d total labels (realized noise %.4f)",
        report.flipped_count,
        eligible,
        report.total_count,
        report.realized_noise_fraction,
    )
    return dataset.with_examples(examples), report


def inject_random(dataset: Dataset, level: float, seed: int) -> Tuple[Dataset, NoiseReport]:
    """Flip exactly round(level * N) uniformly chosen labels.

    Raises:
        ValueError: If the dataset has fewer than 2 classes or level is outside [0, 1]
    """
    if dataset.num_classes < 2:
        raise ValueError("label noise needs at least 2 classes")
    if not 0.0 <= level <= 1.0:
        raise ValueError(f"noise level must lie in [0, 1], got {level}")
    rng = np.random.default_rng(seed)
    n = len(dataset)
    positions = rng.choice(n, size=exact_count(level, n), replace=False).tolist()
    return _flip(dataset, positions, rng, eligible=n)


def matches_triggers(text: str, triggers: Sequence[str], match_mode: str) -> bool:
    """Case-sensitive trigger match on raw tokens."""
    tokens = raw_tokens(text)
    if not tokens:
        return False
    if match_mode == "starts_with":
        return tokens[0] in triggers
    if match_mode == "contains":
        trigger_set = set(triggers)
        return any(tok in trigger_set for tok in tokens)
    raise ValueError(f"unknown match mode {match_mode!r}")


def inject_token_conditional(
    dataset: Dataset,
    trigger_tokens: Sequence[str],
    match_mode: str,
    level: float,
    seed: int,
) -> Tuple[Dataset, NoiseReport]:
    """Flip round(level * |eligible|) labels among texts matching the triggers.

    Raises:
        ValueError: If no triggers are given or no example matches them
    """
    if not trigger_tokens:
        raise ValueError("at least one trigger token is required")
    if not 0.0 <= level <= 1.0:
        raise ValueError(f"noise level must lie in [0, 1], got {level}")
    eligible = [
        i
        for i, ex in enumerate(dataset.examples)
        if matches_triggers(ex.text, trigger_tokens, match_mode)
    ]
    if not eligible:
        raise ValueError("no samples match triggers")
    rng = np.random.default_rng(seed)
    chosen = rng.choice(len(eligible), size=exact_count(level, len(eligible)), replace=False)
    positions = [eligible[i] for i in chosen.tolist()]
    return _flip(dataset, positions, rng, eligible=len(eligible))


def inject_length_conditional(
    dataset: Dataset, fraction: float, seed: int
) -> Tuple[Dataset, NoiseReport]:
    """Flip the labels of the longest round(fraction * N) texts.

    Longer token count first, ties broken by ascending id.
    """
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"length fraction must lie in (0, 1], got {fraction}")
    ranked = sorted(
        range(len(dataset)),
        key=lambda i: (-dataset.examples[i].text_length, dataset.examples[i].id),
    )
    positions = ranked[: exact_count(fraction, len(dataset))]
    return _flip(dataset, positions, np.random.default_rng(seed), eligible=len(dataset))


def apply_noise(
    dataset: Dataset, spec: NoiseSpec, seed: Optional[int] = None
) -> Tuple[Dataset, NoiseReport]:
    """Dispatch on ``spec.kind``; ``seed`` overrides ``spec.seed`` when given."""
    seed = spec.seed if seed is None else seed
    if spec.kind == "random":
        return inject_random(dataset, spec.level, seed)
    if spec.kind == "token_conditional":
        return inject_token_conditional(
            dataset, spec.trigger_tokens, spec.match_mode, spec.level, seed
        )
    return inject_length_conditional(dataset, spec.level, seed)


def noise_validation_seed(seed: int) -> int:
    """Independent sub-seed for noising the validation split with the same spec."""
    return derive_seed(seed, "validation-noise")


def write_noisy_dataset(dataset: Dataset, path: Union[str, Path]) -> None:
    """Write a (noisy) dataset in the internal TSV format."""
    write_tsv(dataset, path)
    logger.info("Wrote %d examples to %s", len(dataset), path)
