"""Dataset ingestion: TREC, AG-News and the internal noisy TSV format.

Also tokenization, train-only vocabulary construction, validation carve-out and
optional pretrained embedding loading.
"""

import csv
import logging
import unicodedata
from collections import Counter
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Tuple, Union

import numpy as np
import pandas as pd

from src.numerics import Matrix

logger = logging.getLogger(__name__)

UNK = "<unk>"
UNK_ID = 0

TREC_LABELS = ("ABBR", "DESC", "ENTY", "HUM", "LOC", "NUM")
AGNEWS_LABELS = ("World", "Sports", "Business", "Sci/Tech")
FORMATS = ("trec", "agnews", "tsv")
SPLITS = ("train", "validation", "test")
TSV_COLUMNS = ("id", "noisy_label", "clean_label", "text")
TSV_HEADER = "\t".join(TSV_COLUMNS)
# no quoting; the escape character protects tabs, newlines and itself
TSV_OPTIONS = dict(sep="\t", quoting=csv.QUOTE_NONE, escapechar="\\")

PathLike = Union[str, Path]
Vocab = Dict[str, int]


@dataclass(frozen=True)
class Example:
    id: int
    text: str
    tokens: Tuple[int, ...]
    noisy_label: int
    clean_label: int

    @property
    def text_length(self) -> int:
        return len(self.tokens)

    @property
    def is_noisy(self) -> bool:
        """Diagnostic only: whether the observed label differs from the original."""
        return self.noisy_label != self.clean_label


@dataclass(frozen=True)
class Dataset:
    examples: Tuple[Example, ...]
    num_classes: int
    vocab: Vocab
    split: str = "train"

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ValueError(f"unknown split {self.split!r}")

    def __len__(self) -> int:
        return len(self.examples)

    @property
    def ids(self) -> List[int]:
        return [ex.id for ex in self.examples]

    def texts(self) -> List[str]:
        return [ex.text for ex in self.examples]

    def noisy_labels(self) -> np.ndarray:
        return np.array([ex.noisy_label for ex in self.examples], dtype=np.int64)

    def clean_labels(self) -> np.ndarray:
        return np.array([ex.clean_label for ex in self.examples], dtype=np.int64)

    def with_examples(self, examples: Iterable[Example], split: Optional[str] = None) -> "Dataset":
        return replace(self, examples=tuple(examples), split=split or self.split)


# ------------------------------------------------------------------------------
# Tokenization and vocabulary
# ------------------------------------------------------------------------------


def _is_punct(char: str) -> bool:
    return unicodedata.category(char).startswith("P")


def _strip_punct(token: str) -> str:
    start, end = 0, len(token)
    while start < end and _is_punct(token[start]):
        start += 1
    while end > start and _is_punct(token[end - 1]):
        end -= 1
    # standalone punctuation ("-", "?") is kept as its own token
    return token[start:end] or token


def raw_tokens(text: str) -> List[str]:
    """Case-preserving tokens with surrounding punctuation stripped.

    Used for trigger-token matching, where "AP" and "ap" must differ.
    """
    return [_strip_punct(tok) for tok in text.split()]


def tokenize(text: str) -> List[str]:
    """Lowercase, whitespace-split and punctuation-strip a text.

    Args:
        text: Raw text

    Returns:
        Token strings; ["<unk>"] for empty input
    """
    tokens = [tok.lower() for tok in raw_tokens(text)]
    return tokens or [UNK]


def build_vocab(corpus: Iterable[str], min_freq: int = 1) -> Vocab:
    """Build a vocabulary from train-split texts.

    Ids are assigned by descending frequency, ties broken lexicographically.
    Id 0 is reserved for "<unk>".

    Raises:
        ValueError: If min_freq < 1 or the corpus is empty
    """
    if min_freq < 1:
        raise ValueError("min_freq must be >= 1")
    counts: Counter = Counter()
    n_texts = 0
    for text in corpus:
        n_texts += 1
        counts.update(tokenize(text))
    if n_texts == 0:
        raise ValueError("cannot build a vocabulary from an empty corpus")

    counts.pop(UNK, None)
    kept = sorted(
        (tok for tok, n in counts.items() if n >= min_freq), key=lambda tok: (-counts[tok], tok)
    )
    vocab = {UNK: UNK_ID}
    for tok in kept:
        vocab[tok] = len(vocab)
    return vocab


def encode(text: str, vocab: Vocab) -> Tuple[int, ...]:
    return tuple(vocab.get(tok, UNK_ID) for tok in tokenize(text))


def encode_dataset(dataset: Dataset, vocab: Vocab) -> Dataset:
    """Re-encode every example's tokens with another vocabulary."""
    examples = [replace(ex, tokens=encode(ex.text, vocab)) for ex in dataset.examples]
    return replace(dataset, examples=tuple(examples), vocab=vocab)


# ------------------------------------------------------------------------------
# File formats
# ------------------------------------------------------------------------------

Record = Tuple[int, str, int, int]  # id, text, noisy_label, clean_label


def _read_trec(path: Path) -> Tuple[List[Record], int]:
    records: List[Record] = []
    with open(path, encoding="utf-8", errors="replace") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            tag, _, text = line.partition(" ")
            coarse, colon, _fine = tag.partition(":")
            if not colon or not coarse:
                raise ValueError(f"{path}: line {lineno}: expected 'COARSE:fine text', got {line!r}")
            if coarse not in TREC_LABELS:
                raise ValueError(f"{path}: line {lineno}: unknown label {coarse!r}")
            label = TREC_LABELS.index(coarse)
            records.append((len(records), text.strip(), label, label))
    return records, len(TREC_LABELS)


def _read_agnews(path: Path) -> Tuple[List[Record], int]:
    try:
        frame = pd.read_csv(path, header=None, dtype=str, keep_default_na=False)
    except pd.errors.ParserError as e:
        raise ValueError(f"{path}: malformed CSV: {e}") from e
    if frame.shape[1] != 3:
        raise ValueError(f"{path}: expected 3 columns (class,title,description), got {frame.shape[1]}")

    records: List[Record] = []
    for lineno, (cls, title, description) in enumerate(frame.itertuples(index=False), start=1):
        try:
            label = int(cls) - 1
        except ValueError:
            raise ValueError(f"{path}: line {lineno}: unknown label {cls!r}") from None
        if not 0 <= label < len(AGNEWS_LABELS):
            raise ValueError(f"{path}: line {lineno}: unknown label {cls!r}")
        text = f"{title} {description}".strip()
        records.append((len(records), text, label, label))
    return records, len(AGNEWS_LABELS)


def _read_tsv(path: Path) -> Tuple[List[Record], int]:
    try:
        frame = pd.read_csv(path, **TSV_OPTIONS, index_col=False, dtype=str, keep_default_na=False)
    except pd.errors.EmptyDataError:
        raise ValueError(f"{path}: line 1: expected header {TSV_HEADER!r}") from None
    except pd.errors.ParserError as e:
        raise ValueError(f"{path}: malformed TSV: {e}") from e
    if tuple(frame.columns) != TSV_COLUMNS:
        got = "\t".join(map(str, frame.columns))
        raise ValueError(f"{path}: line 1: expected header {TSV_HEADER!r}, got {got!r}")

    records: List[Record] = []
    for lineno, (ex_id, noisy, clean, text) in enumerate(frame.itertuples(index=False), start=2):
        if not isinstance(text, str):
            raise ValueError(f"{path}: line {lineno}: expected 4 tab-separated fields")
        try:
            ex_id, noisy, clean = int(ex_id), int(noisy), int(clean)
        except (TypeError, ValueError):
            raise ValueError(f"{path}: line {lineno}: non-integer id or label") from None
        if noisy < 0 or clean < 0:
            raise ValueError(f"{path}: line {lineno}: negative label")
        records.append((ex_id, text, noisy, clean))
    if not records:
        raise ValueError(f"{path}: no examples")
    ids = [r[0] for r in records]
    if len(set(ids)) != len(ids):
        raise ValueError(f"{path}: duplicate example ids")
    num_classes = max(max(r[2], r[3]) for r in records) + 1
    return records, num_classes


def load_dataset(
    path: PathLike,
    fmt: str,
    split: str = "train",
    vocab: Optional[Vocab] = None,
    min_freq: int = 1,
    num_classes: Optional[int] = None,
) -> Dataset:
    """Load a dataset file.

    Args:
        path: File path
        fmt: One of "trec", "agnews", "tsv"
        split: Split membership of the loaded examples
        vocab: Vocabulary to encode with; built from this file when None
        min_freq: Minimum token frequency when building the vocabulary
        num_classes: Overrides the class count inferred for tsv files

    Returns:
        The loaded Dataset

    Raises:
        ValueError: On unknown formats, malformed lines or unknown labels
    """
    path = Path(path)
    readers = {"trec": _read_trec, "agnews": _read_agnews, "tsv": _read_tsv}
    if fmt not in readers:
        raise ValueError(f"unknown dataset format {fmt!r}; expected one of {FORMATS}")
    records, inferred_classes = readers[fmt](path)
    if num_classes is not None:
        if num_classes < inferred_classes:
            raise ValueError(f"{path}: labels exceed num_classes={num_classes}")
        inferred_classes = num_classes

    if vocab is None:
        vocab = build_vocab((r[1] for r in records), min_freq=min_freq)
    examples = tuple(
        Example(id=ex_id, text=text, tokens=encode(text, vocab), noisy_label=noisy, clean_label=clean)
        for ex_id, text, noisy, clean in records
    )
    logger.info("Loaded %d %s examples from %s (%s format)", len(examples), split, path, fmt)
    return Dataset(examples=examples, num_classes=inferred_classes, vocab=vocab, split=split)


def write_tsv(dataset: Dataset, path: PathLike) -> None:
    """Write the internal TSV format read back by ``load_dataset(fmt="tsv")``.

    Tabs, newlines and backslashes inside texts are backslash-escaped.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame = pd.DataFrame(
        [(ex.id, ex.noisy_label, ex.clean_label, ex.text) for ex in dataset.examples],
        columns=list(TSV_COLUMNS),
    )
    frame.to_csv(path, **TSV_OPTIONS, index=False, lineterminator="\n", encoding="utf-8")


# ------------------------------------------------------------------------------
# Splits and embeddings
# ------------------------------------------------------------------------------


def split_validation(train: Dataset, fraction: float, seed: int) -> Tuple[Dataset, Dataset]:
    """Carve a validation split out of a train split with a seeded shuffle.

    Both splits keep the original example ids and the order they had in ``train``.

    Raises:
        ValueError: If fraction is outside (0, 1) or either split would be empty
    """
    if not 0 < fraction < 1:
        raise ValueError("validation fraction must lie in (0, 1)")
    n = len(train)
    n_val = int(np.floor(fraction * n + 0.5))
    if n_val == 0 or n_val == n:
        raise ValueError(f"validation fraction {fraction} leaves an empty split of {n} examples")

    order = np.random.default_rng(seed).permutation(n)
    val_positions = set(order[:n_val].tolist())
    train_part = [ex for i, ex in enumerate(train.examples) if i not in val_positions]
    val_part = [ex for i, ex in enumerate(train.examples) if i in val_positions]
    logger.info("Split %d examples into %d train / %d validation", n, len(train_part), n_val)
    return train.with_examples(train_part, "train"), train.with_examples(val_part, "validation")


def load_embeddings(
    path: PathLike, vocab: Vocab, dim: int, seed: int
) -> Tuple[Matrix, int]:
    """Initialise an embedding matrix from a "token v1 ... vdim" text file.

    Tokens absent from the file, and UNK, keep a uniform [-0.1, 0.1] initialisation.

    Returns:
        (vocab_size x dim matrix, number of vocabulary tokens found in the file)

    Raises:
        ValueError: If any line's vector length differs from dim
    """
    rng = np.random.default_rng(seed)
    matrix = rng.uniform(-0.1, 0.1, size=(len(vocab), dim))
    covered = 0
    with open(path, encoding="utf-8", errors="replace") as f:
        for line in f:
            parts = line.rstrip().split(" ")
            if not parts or not parts[0]:
                continue
            token, values = parts[0], parts[1:]
            if len(values) != dim:
                raise ValueError(
                    f"embedding for token {token!r} has {len(values)} values, expected {dim}"
                )
            idx = vocab.get(token)
            if idx is None or idx == UNK_ID:
                continue
            matrix[idx] = np.array(values, dtype=np.float64)
            covered += 1
    logger.info("Loaded pretrained vectors for %d / %d vocabulary tokens", covered, len(vocab) - 1)
    return matrix, covered

