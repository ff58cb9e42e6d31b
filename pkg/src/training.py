"""End-to-end training: warmup, mixture fit, de-noising phase, evaluation.

The training path reads only noisy labels. Clean labels are read for the test
split (which is never noised) and for diagnostics written next to the metrics.
"""

import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from sklearn.metrics import roc_auc_score

from src.bmm import (
    BetaMixture,
    DegenerateLossesError,
    PosteriorTable,
    build_posterior_table,
    fit_bmm,
    mixture_density_curve,
    normalize_losses,
    write_bmm_json,
)
from src.config import ConfigError
from src.data import (
    Dataset,
    build_vocab,
    encode_dataset,
    load_dataset,
    load_embeddings,
    split_validation,
)
from src.model import (
    ClassifierParams,
    NoiseHeadParams,
    backward,
    config_hash,
    forward,
    loss_denoise,
    per_sample_losses,
    predict,
    representation_width,
    save_checkpoint,
    warmup_loss_and_grad,
)
from src.noise import NoiseReport, NoiseSpec, apply_noise, noise_validation_seed
from src.numerics import AdamState, adam_step, derive_seed

logger = logging.getLogger(__name__)

MODES = ("baseline", "dn_soft", "dn_hard")
# noise-head input when rep_mode is unset
REPRESENTATION_BY_NOISE = {
    "random": "logits",
    "token_conditional": "concat",
    "length_conditional": "concat",
}
POISON_LABEL = -1
CHUNK = 1024

PathLike = Union[str, Path]


@dataclass
class TrainConfig:
    t0: int = 10
    epochs: int = 60
    beta: float = 4.0
    mode: str = "dn_hard"
    rep_mode: Optional[str] = None
    lr: float = 1e-3
    batch_size: int = 32
    dropout_rate: float = 0.3
    embed_dim: int = 50
    hidden_dim: int = 128
    seed: int = 0
    eval_every: int = 1
    record_epochs: Tuple[int, ...] = ()

    def __post_init__(self):
        self.mode = self.mode.replace("-", "_")
        self.record_epochs = tuple(sorted(set(self.record_epochs)))
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}; expected baseline, dn-soft or dn-hard")
        if self.rep_mode not in (None, "logits", "concat"):
            raise ConfigError(f"unknown rep_mode {self.rep_mode!r}; expected logits or concat")
        if not 1 <= self.t0 < self.epochs:
            raise ConfigError(f"need 1 <= t0 < epochs, got t0={self.t0}, epochs={self.epochs}")
        if self.mode != "baseline" and self.beta <= 0:
            raise ConfigError("beta must be positive for the de-noising modes")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.batch_size < 1 or self.embed_dim < 1 or self.hidden_dim < 1:
            raise ConfigError("batch_size, embed_dim and hidden_dim must be >= 1")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        if self.eval_every < 1:
            raise ConfigError("eval_every must be >= 1")
        if any(e < 1 or e > self.epochs for e in self.record_epochs):
            raise ConfigError("record_epochs must lie within 1..epochs")

    @property
    def variant(self) -> Optional[str]:
        return {"dn_soft": "soft", "dn_hard": "hard"}.get(self.mode)

    def to_dict(self) -> Dict:
        out = asdict(self)
        out["record_epochs"] = list(self.record_epochs)
        return out


@dataclass
class DataConfig:
    train: str
    test: str
    train_format: str = "tsv"
    test_format: str = "trec"
    validation: Optional[str] = None
    validation_format: str = "tsv"
    validation_fraction: float = 0.1
    min_freq: int = 1
    embeddings: Optional[str] = None
    data_seed: int = 0


@dataclass
class Datasets:
    train: Dataset
    validation: Dataset
    test: Dataset

    @property
    def num_classes(self) -> int:
        return max(self.train.num_classes, self.validation.num_classes, self.test.num_classes)


@dataclass
class EpochRecord:
    epoch: int
    phase: str
    train_loss: float
    validation_accuracy: Optional[float] = None
    test_accuracy: Optional[float] = None


@dataclass
class MetricsReport:
    mode: str
    epochs: List[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    best_validation_accuracy: float = -1.0
    best_test_accuracy: float = 0.0
    last_test_accuracy: float = 0.0
    gap: float = 0.0
    bmm_fallback: bool = False
    bmm_diagnostics: Dict = field(default_factory=dict)

    def to_dict(self) -> Dict:
        return {
            "mode": self.mode,
            "epochs": [asdict(rec) for rec in self.epochs],
            "best_epoch": self.best_epoch,
            "best_validation_accuracy": self.best_validation_accuracy,
            "best_test_accuracy": self.best_test_accuracy,
            "last_test_accuracy": self.last_test_accuracy,
            "gap": self.gap,
            "bmm_fallback": self.bmm_fallback,
            "bmm_diagnostics": self.bmm_diagnostics,
        }


@dataclass
class TrainingState:
    """Everything one training run mutates."""

    cparams: ClassifierParams
    classifier_opt: AdamState
    shuffle_rng: np.random.Generator
    dropout_rng: np.random.Generator
    config_digest: str
    nparams: Optional[NoiseHeadParams] = None
    noise_opt: Optional[AdamState] = None
    epoch: int = 0
    report: Optional[MetricsReport] = None
    loss_snapshots: List[Tuple[int, np.ndarray]] = field(default_factory=list)


# ------------------------------------------------------------------------------
# Data
# ------------------------------------------------------------------------------


def load_experiment_data(
    data_config: DataConfig, noise_spec: Optional[NoiseSpec] = None
) -> Tuple[Datasets, Dict[str, NoiseReport]]:
    """Load splits, build the train-only vocabulary and noise train/validation.

    Without a validation file the validation split is carved from train. The test
    split is always left clean.
    """
    train = load_dataset(data_config.train, data_config.train_format, split="train")
    if data_config.validation:
        validation = load_dataset(
            data_config.validation, data_config.validation_format, split="validation"
        )
    else:
        train, validation = split_validation(
            train,
            data_config.validation_fraction,
            derive_seed(data_config.data_seed, "validation-split"),
        )

    vocab = build_vocab(train.texts(), min_freq=data_config.min_freq)
    train = encode_dataset(train, vocab)
    validation = encode_dataset(validation, vocab)
    test = load_dataset(data_config.test, data_config.test_format, split="test", vocab=vocab)

    num_classes = max(train.num_classes, validation.num_classes, test.num_classes)
    train = replace(train, num_classes=num_classes)
    validation = replace(validation, num_classes=num_classes)
    test = replace(test, num_classes=num_classes)

    reports: Dict[str, NoiseReport] = {}
    if noise_spec is not None:
        train, reports["train"] = apply_noise(train, noise_spec)
        validation, reports["validation"] = apply_noise(
            validation, noise_spec, seed=noise_validation_seed(noise_spec.seed)
        )
    logger.info(
        "Data ready: %d train / %d validation / %d test, %d classes, vocabulary %d",
        len(train),
        len(validation),
        len(test),
        num_classes,
        len(vocab),
    )
    return Datasets(train, validation, test), reports


def with_noise_representation(config: TrainConfig, noise_spec: Optional[NoiseSpec]) -> TrainConfig:
    """Fill an unset rep_mode from the noise kind; an explicit rep_mode is kept.

    Without a noise spec (labels already noisy on disk) the logits are used.
    """
    if config.rep_mode is not None:
        return config
    kind = noise_spec.kind if noise_spec is not None else "random"
    return replace(config, rep_mode=REPRESENTATION_BY_NOISE[kind])


def poison_clean_labels(dataset: Dataset) -> Dataset:
    """Audit helper: overwrite every clean label with a sentinel."""
    return dataset.with_examples(replace(ex, clean_label=POISON_LABEL) for ex in dataset.examples)


def _token_arrays(dataset: Dataset) -> List[np.ndarray]:
    return [np.asarray(ex.tokens, dtype=np.int64) for ex in dataset.examples]


def _chunked_losses(cparams: ClassifierParams, dataset: Dataset) -> np.ndarray:
    tokens = _token_arrays(dataset)
    labels = dataset.noisy_labels()
    parts = [
        per_sample_losses(cparams, tokens[i : i + CHUNK], labels[i : i + CHUNK])
        for i in range(0, len(tokens), CHUNK)
    ]
    return np.concatenate(parts)


def evaluate(cparams: ClassifierParams, dataset: Dataset) -> float:
    """Accuracy of the classifier argmax prediction.

    Validation (and train) splits are scored against noisy labels, the test split
    against clean labels.

    Raises:
        ValueError: If the split is empty
    """
    if len(dataset) == 0:
        raise ValueError(f"cannot evaluate an empty {dataset.split} split")
    tokens = _token_arrays(dataset)
    labels = dataset.clean_labels() if dataset.split == "test" else dataset.noisy_labels()
    predictions = np.concatenate(
        [predict(cparams, tokens[i : i + CHUNK]) for i in range(0, len(tokens), CHUNK)]
    )
    return float(np.mean(predictions == labels))


# ------------------------------------------------------------------------------
# Training loop
# ------------------------------------------------------------------------------


def init_training_state(
    config: TrainConfig, datasets: Datasets, embedding: Optional[np.ndarray] = None
) -> TrainingState:
    rng = np.random.default_rng(derive_seed(config.seed, "classifier-init"))
    cparams = ClassifierParams.init(
        vocab_size=len(datasets.train.vocab),
        embed_dim=config.embed_dim,
        hidden_dim=config.hidden_dim,
        num_classes=datasets.num_classes,
        rng=rng,
        dropout_rate=config.dropout_rate,
        embedding=embedding,
    )
    return TrainingState(
        cparams=cparams,
        classifier_opt=AdamState(lr=config.lr),
        shuffle_rng=np.random.default_rng(derive_seed(config.seed, "shuffle")),
        dropout_rng=np.random.default_rng(derive_seed(config.seed, "dropout")),
        config_digest=config_hash(config.to_dict()),
        report=MetricsReport(mode=config.mode),
    )


def _train_epoch(config: TrainConfig, state: TrainingState, dataset: Dataset, step) -> float:
    tokens = _token_arrays(dataset)
    labels = dataset.noisy_labels()
    order = state.shuffle_rng.permutation(len(tokens))
    total = 0.0
    for start in range(0, len(order), config.batch_size):
        idx = order[start : start + config.batch_size]
        total += step([tokens[i] for i in idx], labels[idx], idx) * len(idx)
    return total / len(order)


def _classifier_step(config: TrainConfig, state: TrainingState):
    def step(batch, labels, _idx):
        trace = forward(state.cparams, None, batch, mode="train", rng=state.dropout_rng)
        loss, grads = warmup_loss_and_grad(state.cparams, trace, labels)
        adam_step(state.cparams.arrays(), grads, state.classifier_opt)
        return loss

    return step


def _denoise_step(config: TrainConfig, state: TrainingState, posteriors: np.ndarray):
    def step(batch, labels, idx):
        trace = forward(
            state.cparams,
            state.nparams,
            batch,
            mode="train",
            rep_mode=config.rep_mode,
            rng=state.dropout_rng,
        )
        batch_posteriors = posteriors[idx]
        loss = loss_denoise(trace, labels, config.beta, batch_posteriors, config.variant)
        cgrads, ngrads = backward(
            state.cparams, state.nparams, trace, labels, config.beta, batch_posteriors, config.variant
        )
        adam_step(state.cparams.arrays(), cgrads, state.classifier_opt)
        adam_step(state.nparams.arrays(), ngrads, state.noise_opt)
        return loss

    return step


def _end_epoch(
    config: TrainConfig,
    state: TrainingState,
    datasets: Datasets,
    phase: str,
    train_loss: float,
    output_dir: Optional[Path],
) -> None:
    report = state.report
    record = EpochRecord(epoch=state.epoch, phase=phase, train_loss=train_loss)
    if state.epoch % config.eval_every == 0 or state.epoch == config.epochs:
        record.validation_accuracy = evaluate(state.cparams, datasets.validation)
        record.test_accuracy = evaluate(state.cparams, datasets.test)
        # strict improvement keeps the earliest epoch on ties
        if record.validation_accuracy > report.best_validation_accuracy:
            report.best_epoch = state.epoch
            report.best_validation_accuracy = record.validation_accuracy
            report.best_test_accuracy = record.test_accuracy
            if output_dir is not None:
                save_checkpoint(
                    output_dir / "checkpoint_best.bin",
                    state.cparams,
                    state.nparams,
                    state.config_digest,
                    state.epoch,
                )
        logger.info(
            "epoch %d [%s] loss=%.4f val=%.4f test=%.4f",
            state.epoch,
            phase,
            train_loss,
            record.validation_accuracy,
            record.test_accuracy,
        )
    report.epochs.append(record)

    if state.epoch in config.record_epochs:
        state.loss_snapshots.append((state.epoch, _chunked_losses(state.cparams, datasets.train)))


def run_warmup(
    config: TrainConfig,
    datasets: Datasets,
    state: TrainingState,
    output_dir: Optional[PathLike] = None,
) -> Tuple[TrainingState, np.ndarray]:
    """Train the classifier with plain cross entropy for t0 epochs, then record per-sample losses.

    The recording pass runs in eval mode and changes no parameters.

    Returns:
        (state, raw losses aligned with ``datasets.train.examples``)
    """
    output_dir = Path(output_dir) if output_dir is not None else None
    step = _classifier_step(config, state)
    while state.epoch < config.t0:
        state.epoch += 1
        loss = _train_epoch(config, state, datasets.train, step)
        _end_epoch(config, state, datasets, "warmup", loss, output_dir)
    raw_losses = _chunked_losses(state.cparams, datasets.train)
    logger.info(
        "Recorded %d warmup losses at epoch %d (mean %.4f)",
        len(raw_losses),
        state.epoch,
        float(raw_losses.mean()),
    )
    return state, raw_losses


def run_denoise_phase(
    config: TrainConfig,
    datasets: Datasets,
    state: TrainingState,
    posterior_table: PosteriorTable,
    output_dir: Optional[PathLike] = None,
) -> MetricsReport:
    """Epochs t0+1..T: joint classifier and noise-head training, or plain CE in baseline mode.

    The noise head is initialised at the start of this phase. Inference always
    uses the classifier alone.
    """
    config = with_noise_representation(config, None)
    output_dir = Path(output_dir) if output_dir is not None else None
    if config.mode == "baseline":
        step = _classifier_step(config, state)
        phase = "baseline"
    else:
        width = representation_width(config.rep_mode, config.hidden_dim, datasets.num_classes)
        rng = np.random.default_rng(derive_seed(config.seed, "noise-head-init"))
        state.nparams = NoiseHeadParams.init(width, datasets.num_classes, rng)
        state.noise_opt = AdamState(lr=config.lr)
        posteriors = posterior_table.lookup(datasets.train.ids)
        step = _denoise_step(config, state, posteriors)
        phase = config.mode

    while state.epoch < config.epochs:
        state.epoch += 1
        loss = _train_epoch(config, state, datasets.train, step)
        _end_epoch(config, state, datasets, phase, loss, output_dir)

    report = state.report
    report.last_test_accuracy = report.epochs[-1].test_accuracy
    report.gap = report.last_test_accuracy - report.best_test_accuracy
    if output_dir is not None:
        save_checkpoint(
            output_dir / "checkpoint_last.bin",
            state.cparams,
            state.nparams,
            state.config_digest,
            state.epoch,
        )
    logger.info(
        "Finished %s: best=%.4f (epoch %d) last=%.4f gap=%.4f",
        config.mode,
        report.best_test_accuracy,
        report.best_epoch,
        report.last_test_accuracy,
        report.gap,
    )
    return report


# ------------------------------------------------------------------------------
# Diagnostics and artifacts
# ------------------------------------------------------------------------------


def _mean_or_none(values: np.ndarray) -> Optional[float]:
    return float(values.mean()) if values.size else None


def bmm_diagnostics(posteriors: np.ndarray, raw_losses: np.ndarray, is_noisy: np.ndarray) -> Dict:
    """How well 1[posterior > 0.5] recovers the true clean/noisy split. Diagnostics only."""
    is_clean = ~is_noisy
    predicted_clean = posteriors > 0.5
    auc = None
    if is_clean.any() and is_noisy.any():
        auc = float(roc_auc_score(is_clean.astype(int), posteriors))
    return {
        "separation_accuracy": float(np.mean(predicted_clean == is_clean)),
        "auc": auc,
        "noise_fraction": float(np.mean(is_noisy)),
        "predicted_clean_fraction": float(np.mean(predicted_clean)),
        "mean_loss_clean": _mean_or_none(raw_losses[is_clean]),
        "mean_loss_noisy": _mean_or_none(raw_losses[is_noisy]),
    }


def fit_posteriors(
    raw_losses: np.ndarray, ids: Sequence[int], fit_epoch: int
) -> Tuple[Optional[BetaMixture], PosteriorTable, np.ndarray]:
    """Normalize, fit and tabulate clean posteriors, falling back to all-clean posteriors."""
    normalized, degenerate = normalize_losses(raw_losses)
    try:
        if degenerate:
            raise DegenerateLossesError("warmup losses are constant")
        mixture = fit_bmm(normalized)
    except DegenerateLossesError as e:
        logger.warning(
            "BMM fit failed (%s); training continues with every posterior set to 1.0", e
        )
        return None, PosteriorTable.all_clean(ids, fit_epoch), normalized
    return mixture, build_posterior_table(mixture, normalized, ids, fit_epoch), normalized


def _write_json(payload: Dict, path: Path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")


def _write_artifacts(
    output_dir: Path,
    report: MetricsReport,
    mixture: Optional[BetaMixture],
    train: Dataset,
    raw_losses: np.ndarray,
    normalized: np.ndarray,
    table: PosteriorTable,
    state: TrainingState,
    config: TrainConfig,
    noise_reports: Dict[str, NoiseReport],
) -> None:
    is_noisy = np.array([ex.noisy_label != ex.clean_label for ex in train.examples])

    if mixture is not None:
        write_bmm_json(mixture, output_dir / "bmm.json")
        pd.DataFrame(mixture_density_curve(mixture)).to_csv(output_dir / "bmm_curve.csv", index=False)
    else:
        _write_json({"fallback": True}, output_dir / "bmm.json")

    pd.DataFrame(
        {
            "id": train.ids,
            "raw_loss": raw_losses,
            "normalized_loss": normalized,
            "posterior": table.lookup(train.ids),
            "is_noisy": is_noisy.astype(int),
        }
    ).to_csv(output_dir / "losses_T0.csv", index=False)

    pd.DataFrame([asdict(rec) for rec in report.epochs]).to_csv(
        output_dir / "epochs.csv", index=False
    )

    if state.loss_snapshots:
        frames = [
            pd.DataFrame(
                {"id": train.ids, "epoch": epoch, "raw_loss": losses, "is_noisy": is_noisy.astype(int)}
            )
            for epoch, losses in state.loss_snapshots
        ]
        pd.concat(frames).to_csv(output_dir / "loss_history.csv", index=False)

    if noise_reports:
        _write_json({k: v.to_dict() for k, v in noise_reports.items()}, output_dir / "noise_report.json")

    metrics = report.to_dict()
    metrics["config"] = config.to_dict()
    _write_json(metrics, output_dir / "metrics.json")


def run_experiment(
    config: TrainConfig,
    noise_spec: Optional[NoiseSpec],
    data_config: DataConfig,
    output_dir: Optional[PathLike] = None,
    poison_clean_labels_for_audit: bool = False,
) -> MetricsReport:
    """Inject noise, warm up, fit the mixture, run the de-noising phase, write artifacts.

    Args:
        config: Training hyperparameters
        noise_spec: Noise to inject into train and validation, or None when the
            train file already carries noisy labels
        data_config: Dataset locations and loading options
        output_dir: Directory for metrics.json, bmm.json, losses_T0.csv and
            checkpoints; nothing is written when None
        poison_clean_labels_for_audit: Overwrite train/validation clean labels with a
            sentinel; only the diagnostics may change

    Returns:
        The MetricsReport, with BMM diagnostics filled in
    """
    config = with_noise_representation(config, noise_spec)
    out = Path(output_dir) if output_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    datasets, noise_reports = load_experiment_data(data_config, noise_spec)
    if poison_clean_labels_for_audit:
        datasets = Datasets(
            poison_clean_labels(datasets.train),
            poison_clean_labels(datasets.validation),
            datasets.test,
        )

    embedding = None
    if data_config.embeddings:
        embedding, _ = load_embeddings(
            data_config.embeddings,
            datasets.train.vocab,
            config.embed_dim,
            derive_seed(config.seed, "embedding-init"),
        )

    state = init_training_state(config, datasets, embedding)
    state, raw_losses = run_warmup(config, datasets, state, out)
    mixture, table, normalized = fit_posteriors(raw_losses, datasets.train.ids, config.t0)

    report = run_denoise_phase(config, datasets, state, table, out)
    report.bmm_fallback = mixture is None
    is_noisy = np.array([ex.noisy_label != ex.clean_label for ex in datasets.train.examples])
    report.bmm_diagnostics = bmm_diagnostics(table.lookup(datasets.train.ids), raw_losses, is_noisy)

    if out is not None:
        _write_artifacts(
            out, report, mixture, datasets.train, raw_losses, normalized, table, state, config, noise_reports
        )
    return report
