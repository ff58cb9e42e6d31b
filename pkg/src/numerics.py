"""Numeric kernels shared by every other module.

Activations, cross entropy, the Adam optimizer, a finite-difference gradient
checker and seed derivation. All arrays are float64.
"""

import hashlib
import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, Mapping, Union

import numpy as np
import numpy.typing as npt

logger = logging.getLogger(__name__)

Matrix = npt.NDArray[np.float64]
ParamDict = Dict[str, Matrix]

PROB_FLOOR = 1e-12


def derive_seed(master: int, *labels: object) -> int:
    """Derive a reproducible 63-bit sub-seed from a master seed and labels.

    Args:
        master: Master seed
        *labels: Any values identifying the stream (e.g. "dropout", t0, beta)

    Returns:
        Non-negative integer usable as a numpy seed
    """
    key = "|".join([str(int(master))] + [repr(label) for label in labels])
    digest = hashlib.sha256(key.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") & (2**63 - 1)


def relu(x: Matrix) -> Matrix:
    return np.maximum(x, 0.0)


def softmax(logits: npt.ArrayLike) -> Matrix:
    """Row-wise softmax with max subtraction.

    Accepts a vector or a batch of row vectors.

    Raises:
        ValueError: If logits are empty or not finite
    """
    z = np.asarray(logits, dtype=np.float64)
    if z.size == 0 or z.shape[-1] == 0:
        raise ValueError("empty logits")
    if not np.all(np.isfinite(z)):
        raise ValueError("logits must be finite")
    shifted = z - z.max(axis=-1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=-1, keepdims=True)


def cross_entropy(probs: npt.ArrayLike, label: int) -> float:
    """Negative log probability of ``label`` with the probability floored at 1e-12.

    Args:
        probs: Probability vector
        label: Class index

    Returns:
        Non-negative loss

    Raises:
        ValueError: If label is out of range
    """
    p = np.asarray(probs, dtype=np.float64)
    if not 0 <= label < p.shape[-1]:
        raise ValueError(f"label {label} out of range for {p.shape[-1]} classes")
    return float(-np.log(max(p[label], PROB_FLOOR)))


def batch_cross_entropy(probs: Matrix, labels: npt.NDArray[np.int64]) -> Matrix:
    """Per-row cross entropy for a batch of probability rows."""
    if np.any(labels < 0) or np.any(labels >= probs.shape[1]):
        raise ValueError(f"labels out of range for {probs.shape[1]} classes")
    picked = probs[np.arange(len(labels)), labels]
    return -np.log(np.maximum(picked, PROB_FLOOR))


def one_hot(labels: npt.NDArray[np.int64], num_classes: int) -> Matrix:
    out = np.zeros((len(labels), num_classes), dtype=np.float64)
    out[np.arange(len(labels)), labels] = 1.0
    return out


# ------------------------------------------------------------------------------
# Adam
# ------------------------------------------------------------------------------


@dataclass
class AdamState:
    """Moment accumulators and hyperparameters for one group of tensors."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: ParamDict = field(default_factory=dict)
    v: ParamDict = field(default_factory=dict)

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError("learning rate must be non-negative")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("beta1 and beta2 must lie in (0, 1)")
        if self.eps <= 0:
            raise ValueError("eps must be positive")


def adam_step(
    params: Mapping[str, Matrix], grads: Mapping[str, Matrix], state: AdamState
) -> Mapping[str, Matrix]:
    """Apply one bias-corrected Adam update in place.

    Args:
        params: Named parameter tensors, updated in place
        grads: Gradients with the same names and shapes
        state: Optimizer state, advanced by one step

    Returns:
        The updated ``params`` mapping

    Raises:
        ValueError: If names or shapes of params and grads disagree
    """
    if set(params) != set(grads):
        raise ValueError(f"parameter/gradient names differ: {sorted(params)} vs {sorted(grads)}")
    for name, p in params.items():
        if p.shape != grads[name].shape:
            raise ValueError(f"shape mismatch for {name}: {p.shape} vs {grads[name].shape}")

    state.t += 1
    bc1 = 1.0 - state.beta1**state.t
    bc2 = 1.0 - state.beta2**state.t
    step_size = state.lr / bc1

    for name, p in params.items():
        g = grads[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m = state.m[name]
        v = state.v[name]
        if m.shape != p.shape:
            raise ValueError(f"moment shape mismatch for {name}")

        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)

        # lr = 0 must leave parameters bit-identical, including signed zeros
        if state.lr == 0.0:
            continue
        denom = np.sqrt(v / bc2) + state.eps
        p -= step_size * m / denom

    return params


# ------------------------------------------------------------------------------
# Gradient checking
# ------------------------------------------------------------------------------

Params = Union[Matrix, Mapping[str, Matrix]]


def _as_dict(params: Params) -> Mapping[str, Matrix]:
    if isinstance(params, np.ndarray):
        return {"": params}
    return params


def grad_check(
    loss_fn: Callable[[Params], float],
    params: Params,
    analytic_grads: Params,
    probes: int = 20,
    seed: int = 0,
    step: float = 1e-5,
) -> float:
    """Compare analytic gradients with central differences on random coordinates.

    ``params`` is perturbed in place and restored after each probe, so ``loss_fn``
    may close over it or read the argument it is given.

    Args:
        loss_fn: Deterministic function of the parameters returning a scalar
        params: Parameter array or mapping of named arrays
        analytic_grads: Gradients with the same structure as params
        probes: Number of coordinates to test
        seed: Seed for choosing coordinates
        step: Finite-difference step

    Returns:
        Maximum relative error max(|a - n| / max(|a|, |n|, 1e-8))
    """
    if probes < 1:
        raise ValueError("probes must be >= 1")
    named = _as_dict(params)
    named_grads = _as_dict(analytic_grads)
    names = sorted(named)
    sizes = np.array([named[name].size for name in names])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    rng = np.random.default_rng(seed)

    worst = 0.0
    for flat in rng.integers(0, offsets[-1], size=probes):
        slot = int(np.searchsorted(offsets, flat, side="right") - 1)
        name = names[slot]
        tensor = named[name].reshape(-1)
        idx = int(flat - offsets[slot])

        original = tensor[idx]
        tensor[idx] = original + step
        plus = float(loss_fn(params))
        tensor[idx] = original - step
        minus = float(loss_fn(params))
        tensor[idx] = original

        numeric = (plus - minus) / (2.0 * step)
        analytic = float(named_grads[name].reshape(-1)[idx])
        err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)
        worst = max(worst, err)

    logger.debug("grad_check over %d probes: max relative error %.3e", probes, worst)
    return worst
