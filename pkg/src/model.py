"""Classifier, noise-model head and the de-noising losses.

The classifier is a mean-of-embeddings network with one ReLU hidden layer and
inverted dropout. The noise head is a two-layer ReLU network whose hidden width is
four times its input width; its input is either the classifier logits or the
classifier hidden layer concatenated with the logits. All gradients are analytic and averaged over the batch.
"""

import hashlib
import json
import logging
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Dict, Optional, Sequence, Tuple, Union

import numpy as np
import numpy.typing as npt

from src.numerics import (
    Matrix,
    ParamDict,
    batch_cross_entropy,
    one_hot,
    relu,
    softmax,
)

logger = logging.getLogger(__name__)

REP_MODES = ("logits", "concat")
VARIANTS = ("soft", "hard")
CHECKPOINT_MAGIC = b"TEXTDENOISE-CKPT\n"
CHECKPOINT_VERSION = 1

TokenBatch = Sequence[Sequence[int]]


@dataclass
class ClassifierParams:
    embedding: Matrix
    W1: Matrix
    b1: Matrix
    W2: Matrix
    b2: Matrix
    dropout_rate: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")
        d, h, c = self.embedding.shape[1], self.W1.shape[1], self.W2.shape[1]
        if self.W1.shape != (d, h) or self.b1.shape != (h,):
            raise ValueError("hidden layer shapes are inconsistent with the embedding width")
        if self.W2.shape != (h, c) or self.b2.shape != (c,):
            raise ValueError("output layer shapes are inconsistent with the hidden width")

    @property
    def num_classes(self) -> int:
        return self.W2.shape[1]

    @property
    def hidden_dim(self) -> int:
        return self.W1.shape[1]

    def arrays(self) -> ParamDict:
        return {"embedding": self.embedding, "W1": self.W1, "b1": self.b1, "W2": self.W2, "b2": self.b2}

    @classmethod
    def init(
        cls,
        vocab_size: int,
        embed_dim: int,
        hidden_dim: int,
        num_classes: int,
        rng: np.random.Generator,
        dropout_rate: float = 0.0,
        embedding: Optional[Matrix] = None,
    ) -> "ClassifierParams":
        """Uniform [-0.1, 0.1] embeddings (unless given), He-scaled weights, zero biases."""
        if embedding is None:
            embedding = rng.uniform(-0.1, 0.1, size=(vocab_size, embed_dim))
        elif embedding.shape != (vocab_size, embed_dim):
            raise ValueError(f"embedding shape {embedding.shape} != {(vocab_size, embed_dim)}")
        return cls(
            embedding=np.array(embedding, dtype=np.float64),
            W1=rng.normal(0.0, np.sqrt(2.0 / embed_dim), size=(embed_dim, hidden_dim)),
            b1=np.zeros(hidden_dim),
            W2=rng.normal(0.0, np.sqrt(2.0 / hidden_dim), size=(hidden_dim, num_classes)),
            b2=np.zeros(num_classes),
            dropout_rate=dropout_rate,
        )


@dataclass
class NoiseHeadParams:
    V1: Matrix
    c1: Matrix
    V2: Matrix
    c2: Matrix

    def __post_init__(self):
        r, hidden = self.V1.shape
        if hidden != 4 * r:
            raise ValueError(f"noise head hidden width {hidden} must be 4 x input width {r}")
        if self.c1.shape != (hidden,) or self.V2.shape[0] != hidden:
            raise ValueError("noise head shapes are inconsistent")
        if self.c2.shape != (self.V2.shape[1],):
            raise ValueError("noise head output bias has the wrong shape")

    @property
    def input_width(self) -> int:
        return self.V1.shape[0]

    def arrays(self) -> ParamDict:
        return {"V1": self.V1, "c1": self.c1, "V2": self.V2, "c2": self.c2}

    @classmethod
    def init(cls, input_width: int, num_classes: int, rng: np.random.Generator) -> "NoiseHeadParams":
        hidden = 4 * input_width
        return cls(
            V1=rng.normal(0.0, np.sqrt(2.0 / input_width), size=(input_width, hidden)),
            c1=np.zeros(hidden),
            V2=rng.normal(0.0, np.sqrt(2.0 / hidden), size=(hidden, num_classes)),
            c2=np.zeros(num_classes),
        )


def representation_width(rep_mode: str, hidden_dim: int, num_classes: int) -> int:
    if rep_mode == "logits":
        return num_classes
    if rep_mode == "concat":
        return hidden_dim + num_classes
    raise ValueError(f"unknown representation mode {rep_mode!r}; expected one of {REP_MODES}")


@dataclass
class ForwardTrace:
    """Batched activations kept for the backward pass."""

    token_ids: npt.NDArray[np.int64]
    lengths: npt.NDArray[np.int64]
    mean_embedding: Matrix
    hidden_pre: Matrix
    hidden_post: Matrix
    dropout_mask: Matrix
    logits_c: Matrix
    rep_mode: str
    representation: Optional[Matrix] = None
    noise_hidden_pre: Optional[Matrix] = None
    noise_hidden: Optional[Matrix] = None
    logits_n: Optional[Matrix] = None

    @property
    def batch_size(self) -> int:
        return len(self.lengths)


# ------------------------------------------------------------------------------
# Forward
# ------------------------------------------------------------------------------


def forward(
    cparams: ClassifierParams,
    nparams: Optional[NoiseHeadParams],
    batch: TokenBatch,
    mode: str = "eval",
    rep_mode: str = "logits",
    rng: Optional[np.random.Generator] = None,
) -> ForwardTrace:
    """Run the classifier (and the noise head when ``nparams`` is given) on a batch of token-id sequences.

    Args:
        cparams: Classifier parameters
        nparams: Noise-head parameters, or None for the classifier alone
        batch: Token-id sequences, each non-empty
        mode: "train" applies dropout, "eval" does not
        rep_mode: "logits" or "concat" representation fed to the noise head
        rng: Dropout randomness, required in train mode with a non-zero rate

    Raises:
        ValueError: On an empty sequence or a token id outside the vocabulary
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"unknown mode {mode!r}")
    lengths = np.array([len(seq) for seq in batch], dtype=np.int64)
    if len(lengths) == 0 or np.any(lengths == 0):
        raise ValueError("every example needs at least one token")
    token_ids = np.concatenate([np.asarray(seq, dtype=np.int64) for seq in batch])
    vocab_size = cparams.embedding.shape[0]
    if np.any(token_ids < 0) or np.any(token_ids >= vocab_size):
        raise ValueError(f"token id out of range for vocabulary of size {vocab_size}")

    offsets = np.concatenate([[0], np.cumsum(lengths)[:-1]])
    mean_embedding = np.add.reduceat(cparams.embedding[token_ids], offsets, axis=0)
    mean_embedding /= lengths[:, None]

    hidden_pre = mean_embedding @ cparams.W1 + cparams.b1
    p = cparams.dropout_rate
    if mode == "train" and p > 0.0:
        if rng is None:
            raise ValueError("train-mode dropout needs an rng")
        keep = rng.random(hidden_pre.shape) >= p
        dropout_mask = keep / (1.0 - p)
    else:
        dropout_mask = np.ones_like(hidden_pre)
    hidden_post = relu(hidden_pre) * dropout_mask
    logits_c = hidden_post @ cparams.W2 + cparams.b2

    trace = ForwardTrace(
        token_ids=token_ids,
        lengths=lengths,
        mean_embedding=mean_embedding,
        hidden_pre=hidden_pre,
        hidden_post=hidden_post,
        dropout_mask=dropout_mask,
        logits_c=logits_c,
        rep_mode=rep_mode,
    )
    if nparams is None:
        return trace

    if rep_mode == "logits":
        representation = logits_c
    elif rep_mode == "concat":
        representation = np.concatenate([hidden_post, logits_c], axis=1)
    else:
        raise ValueError(f"unknown representation mode {rep_mode!r}")
    if representation.shape[1] != nparams.input_width:
        raise ValueError(
            f"representation width {representation.shape[1]} != noise head input {nparams.input_width}"
        )
    trace.representation = representation
    trace.noise_hidden_pre = representation @ nparams.V1 + nparams.c1
    trace.noise_hidden = relu(trace.noise_hidden_pre)
    trace.logits_n = trace.noise_hidden @ nparams.V2 + nparams.c2
    return trace


# ------------------------------------------------------------------------------
# Losses
# ------------------------------------------------------------------------------


def denoise_weights(beta: float, posterior: npt.ArrayLike, variant: str) -> np.ndarray:
    """Per-sample weight on the classifier term: beta * posterior or beta * 1[posterior > 0.5]."""
    posterior = np.asarray(posterior, dtype=np.float64)
    if variant == "soft":
        gate = posterior
    elif variant == "hard":
        gate = (posterior > 0.5).astype(np.float64)
    else:
        raise ValueError(f"unknown loss variant {variant!r}; expected one of {VARIANTS}")
    return beta * gate


def _labels(labels: Union[int, npt.ArrayLike], n: int) -> npt.NDArray[np.int64]:
    out = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if out.shape != (n,):
        raise ValueError(f"expected {n} labels, got {out.shape}")
    return out


def _broadcast(values: Union[float, npt.ArrayLike], n: int) -> np.ndarray:
    return np.broadcast_to(np.asarray(values, dtype=np.float64), (n,))


def loss_denoise(
    trace: ForwardTrace,
    noisy_labels: Union[int, npt.ArrayLike],
    beta: float,
    posterior: Union[float, npt.ArrayLike],
    variant: str = "soft",
) -> float:
    """Batch-mean of CE(noise head, y) + w(x) * CE(classifier, y)."""
    if trace.logits_n is None:
        raise ValueError("trace has no noise-head output")
    n = trace.batch_size
    y = _labels(noisy_labels, n)
    weights = denoise_weights(beta, _broadcast(posterior, n), variant)
    cascade = batch_cross_entropy(softmax(trace.logits_n), y)
    direct = batch_cross_entropy(softmax(trace.logits_c), y)
    return float(np.mean(cascade + weights * direct))


def _classifier_backward(
    cparams: ClassifierParams,
    trace: ForwardTrace,
    dlogits_c: Matrix,
    dhidden_extra: Optional[Matrix] = None,
) -> ParamDict:
    dW2 = trace.hidden_post.T @ dlogits_c
    db2 = dlogits_c.sum(axis=0)
    dhidden_post = dlogits_c @ cparams.W2.T
    if dhidden_extra is not None:
        dhidden_post = dhidden_post + dhidden_extra
    dhidden_pre = dhidden_post * trace.dropout_mask * (trace.hidden_pre > 0.0)
    dW1 = trace.mean_embedding.T @ dhidden_pre
    db1 = dhidden_pre.sum(axis=0)
    dmean = dhidden_pre @ cparams.W1.T

    # each token row receives its example's mean-pool share
    per_token = np.repeat(dmean / trace.lengths[:, None], trace.lengths, axis=0)
    dembedding = np.zeros_like(cparams.embedding)
    np.add.at(dembedding, trace.token_ids, per_token)
    return {"embedding": dembedding, "W1": dW1, "b1": db1, "W2": dW2, "b2": db2}


def backward(
    cparams: ClassifierParams,
    nparams: NoiseHeadParams,
    trace: ForwardTrace,
    noisy_labels: Union[int, npt.ArrayLike],
    beta: float,
    posterior: Union[float, npt.ArrayLike],
    variant: str = "soft",
) -> Tuple[ParamDict, ParamDict]:
    """Exact gradients of ``loss_denoise`` for classifier and noise-head tensors.

    The cascade term reaches the classifier through its representation; the gated term reaches it directly.
    The dropout mask stored in the trace is reused.

    Returns:
        (classifier gradients, noise-head gradients), keyed like ``arrays()``
    """
    if trace.logits_n is None:
        raise ValueError("trace has no noise-head output")
    n = trace.batch_size
    y = _labels(noisy_labels, n)
    targets = one_hot(y, cparams.num_classes)
    weights = denoise_weights(beta, _broadcast(posterior, n), variant)

    dlogits_n = (softmax(trace.logits_n) - targets) / n
    dV2 = trace.noise_hidden.T @ dlogits_n
    dc2 = dlogits_n.sum(axis=0)
    dnoise_pre = (dlogits_n @ nparams.V2.T) * (trace.noise_hidden_pre > 0.0)
    dV1 = trace.representation.T @ dnoise_pre
    dc1 = dnoise_pre.sum(axis=0)
    drep = dnoise_pre @ nparams.V1.T

    dlogits_c = weights[:, None] * (softmax(trace.logits_c) - targets) / n
    dhidden_extra = None
    if trace.rep_mode == "logits":
        dlogits_c = dlogits_c + drep
    else:
        h = cparams.hidden_dim
        dhidden_extra = drep[:, :h]
        dlogits_c = dlogits_c + drep[:, h:]

    cgrads = _classifier_backward(cparams, trace, dlogits_c, dhidden_extra)
    ngrads = {"V1": dV1, "c1": dc1, "V2": dV2, "c2": dc2}
    return cgrads, ngrads


def warmup_loss_and_grad(
    cparams: ClassifierParams, trace: ForwardTrace, noisy_labels: Union[int, npt.ArrayLike]
) -> Tuple[float, ParamDict]:
    """Plain batch-mean cross entropy on the classifier logits and its classifier gradients."""
    n = trace.batch_size
    y = _labels(noisy_labels, n)
    probs = softmax(trace.logits_c)
    loss = float(np.mean(batch_cross_entropy(probs, y)))
    dlogits_c = (probs - one_hot(y, cparams.num_classes)) / n
    return loss, _classifier_backward(cparams, trace, dlogits_c)


def per_sample_losses(cparams: ClassifierParams, batch: TokenBatch, labels: npt.ArrayLike) -> Matrix:
    """Eval-mode classifier cross entropy for every sample, no parameter change."""
    trace = forward(cparams, None, batch, mode="eval")
    return batch_cross_entropy(softmax(trace.logits_c), np.asarray(labels, dtype=np.int64))


def predict(cparams: ClassifierParams, batch: TokenBatch) -> npt.NDArray[np.int64]:
    """Argmax of the classifier logits; ties go to the lowest class index."""
    trace = forward(cparams, None, batch, mode="eval")
    return np.argmax(trace.logits_c, axis=1)


# ------------------------------------------------------------------------------
# Checkpoints
# ------------------------------------------------------------------------------


def config_hash(config: Dict) -> str:
    payload = json.dumps(config, sort_keys=True).encode("utf-8")
    return hashlib.sha256(payload).hexdigest()


def save_checkpoint(
    path: Union[str, Path],
    cparams: ClassifierParams,
    nparams: Optional[NoiseHeadParams],
    config_digest: str,
    epoch: int,
) -> None:
    """Write a deterministic binary checkpoint.

    Layout: magic line, one JSON header line, then every tensor as raw
    little-endian float64 in header order.
    """
    tensors = {f"classifier.{k}": v for k, v in cparams.arrays().items()}
    if nparams is not None:
        tensors.update({f"noise_head.{k}": v for k, v in nparams.arrays().items()})
    header = {
        "version": CHECKPOINT_VERSION,
        "config_hash": config_digest,
        "epoch": epoch,
        "dropout_rate": cparams.dropout_rate,
        "tensors": [{"name": name, "shape": list(t.shape)} for name, t in tensors.items()],
    }
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        for tensor in tensors.values():
            f.write(np.ascontiguousarray(tensor, dtype="<f8").tobytes())


def load_checkpoint(
    path: Union[str, Path],
) -> Tuple[ClassifierParams, Optional[NoiseHeadParams], Dict]:
    """Read a checkpoint written by ``save_checkpoint``.

    Returns:
        (classifier params, noise-head params or None, header metadata)
    """
    with open(path, "rb") as f:
        if f.readline() != CHECKPOINT_MAGIC:
            raise ValueError(f"{path} is not a checkpoint")
        header = json.loads(f.readline().decode("utf-8"))
        if header.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {header.get('version')}")
        tensors = {}
        for spec in header["tensors"]:
            shape = tuple(spec["shape"])
            count = int(np.prod(shape)) if shape else 1
            raw = f.read(8 * count)
            if len(raw) != 8 * count:
                raise ValueError(f"{path} is truncated at tensor {spec['name']}")
            tensors[spec["name"]] = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)

    cnames = [fld.name for fld in fields(ClassifierParams) if fld.name != "dropout_rate"]
    cparams = ClassifierParams(
        **{name: tensors[f"classifier.{name}"] for name in cnames},
        dropout_rate=header["dropout_rate"],
    )
    nparams = None
    if "noise_head.V1" in tensors:
        nparams = NoiseHeadParams(**{k: tensors[f"noise_head.{k}"] for k in ("V1", "c1", "V2", "c2")})
    return cparams, nparams, header
