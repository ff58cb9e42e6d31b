"""Two-component beta mixture over normalized per-sample losses.

The low-mean component models clean labels. Fitting is EM with a weighted
method-of-moments M-step; the posterior of the clean component gates the
de-noising loss.
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Sequence, Tuple, Union

import numpy as np
import numpy.typing as npt
from scipy.special import gammaln

logger = logging.getLogger(__name__)

LOSS_EPS = 1e-4
SHAPE_MIN = 0.1
SHAPE_MAX = 100.0
MAX_ITERATIONS = 50
TOLERANCE = 1e-6
MIN_SAMPLES = 10
DENOM_FLOOR = 1e-300
VARIANCE_FLOOR = 1e-12

ArrayLike = Union[float, npt.ArrayLike]


class DegenerateLossesError(ValueError):
    """Raised when a loss array cannot support a two-component fit."""


@dataclass
class BetaMixture:
    lambda_c: float
    lambda_n: float
    alpha_c: float
    beta_c: float
    alpha_n: float
    beta_n: float
    fit_log_likelihood: float = float("nan")
    iterations_run: int = 0
    converged: bool = False
    clamp_iterations: int = 0
    log_likelihood_trace: List[float] = field(default_factory=list)
    # clamp_trace[i]: the M-step behind log_likelihood_trace[i] clamped a shape
    clamp_trace: List[bool] = field(default_factory=list)

    def component_means(self) -> Tuple[float, float]:
        return (
            self.alpha_c / (self.alpha_c + self.beta_c),
            self.alpha_n / (self.alpha_n + self.beta_n),
        )

    def to_dict(self) -> Dict:
        return {
            "lambda_c": self.lambda_c,
            "lambda_n": self.lambda_n,
            "alpha_c": self.alpha_c,
            "beta_c": self.beta_c,
            "alpha_n": self.alpha_n,
            "beta_n": self.beta_n,
            "fit_log_likelihood": self.fit_log_likelihood,
            "iterations_run": self.iterations_run,
            "converged": self.converged,
            "clamp_iterations": self.clamp_iterations,
        }


@dataclass
class PosteriorTable:
    """Clean-label posteriors, frozen after the fit at epoch ``fit_epoch``."""

    ids: np.ndarray
    values: np.ndarray
    fit_epoch: int

    def __post_init__(self):
        if len(self.ids) != len(self.values):
            raise ValueError("ids and posterior values differ in length")
        self._index = {int(i): k for k, i in enumerate(self.ids)}

    def lookup(self, ids: Sequence[int]) -> np.ndarray:
        return self.values[[self._index[int(i)] for i in ids]]

    @classmethod
    def all_clean(cls, ids: Sequence[int], fit_epoch: int) -> "PosteriorTable":
        """Fallback table used when the mixture cannot be fitted."""
        return cls(np.asarray(ids, dtype=np.int64), np.ones(len(ids)), fit_epoch)


# ------------------------------------------------------------------------------
# Density and posterior
# ------------------------------------------------------------------------------


def beta_pdf(l: ArrayLike, alpha: float, beta: float) -> np.ndarray:
    """Beta density evaluated in log space.

    Raises:
        ValueError: If any l lies outside (0, 1) or a shape is not positive
    """
    x = np.asarray(l, dtype=np.float64)
    if np.any(x <= 0.0) or np.any(x >= 1.0):
        raise ValueError("beta_pdf is defined on the open interval (0, 1); clamp first")
    if alpha <= 0 or beta <= 0:
        raise ValueError("beta shapes must be positive")
    log_norm = gammaln(alpha + beta) - gammaln(alpha) - gammaln(beta)
    return np.exp(log_norm + (alpha - 1.0) * np.log(x) + (beta - 1.0) * np.log1p(-x))


def _weighted_densities(mixture: BetaMixture, l: ArrayLike) -> Tuple[np.ndarray, np.ndarray]:
    clean = mixture.lambda_c * beta_pdf(l, mixture.alpha_c, mixture.beta_c)
    noisy = mixture.lambda_n * beta_pdf(l, mixture.alpha_n, mixture.beta_n)
    return clean, noisy


def posterior_clean(mixture: BetaMixture, l: ArrayLike) -> np.ndarray:
    """Posterior probability that a normalized loss came from the clean component."""
    clean, noisy = _weighted_densities(mixture, l)
    return clean / np.maximum(clean + noisy, DENOM_FLOOR)


def posterior_noisy(mixture: BetaMixture, l: ArrayLike) -> np.ndarray:
    clean, noisy = _weighted_densities(mixture, l)
    return noisy / np.maximum(clean + noisy, DENOM_FLOOR)


def mixture_density_curve(mixture: BetaMixture, points: int = 201) -> Dict[str, np.ndarray]:
    """Weighted component densities on an interior grid of (0, 1)."""
    grid = np.linspace(LOSS_EPS, 1.0 - LOSS_EPS, points)
    clean, noisy = _weighted_densities(mixture, grid)
    return {"loss": grid, "clean_density": clean, "noisy_density": noisy, "mixture": clean + noisy}


# ------------------------------------------------------------------------------
# Fitting
# ------------------------------------------------------------------------------


def normalize_losses(raw_losses: npt.ArrayLike) -> Tuple[np.ndarray, bool]:
    """Min-max normalize losses into [1e-4, 1 - 1e-4].

    Returns:
        (normalized losses, degenerate flag); a constant array maps to 0.5 everywhere

    Raises:
        ValueError: If fewer than 2 losses are given
    """
    losses = np.asarray(raw_losses, dtype=np.float64)
    if losses.size < 2:
        raise ValueError("need at least 2 losses to normalize")
    lo, hi = losses.min(), losses.max()
    if hi == lo:
        return np.full(losses.shape, 0.5), True
    scaled = (losses - lo) / (hi - lo)
    return np.clip(scaled, LOSS_EPS, 1.0 - LOSS_EPS), False


def _moments_to_shapes(x: np.ndarray, w: np.ndarray) -> Tuple[float, float, bool]:
    total = w.sum()
    mean = float((w * x).sum() / total)
    var = max(float((w * (x - mean) ** 2).sum() / total), VARIANCE_FLOOR)
    common = mean * (1.0 - mean) / var - 1.0
    alpha = mean * common
    beta = (1.0 - mean) * common
    clamped_alpha = float(np.clip(alpha, SHAPE_MIN, SHAPE_MAX))
    clamped_beta = float(np.clip(beta, SHAPE_MIN, SHAPE_MAX))
    return clamped_alpha, clamped_beta, (clamped_alpha != alpha or clamped_beta != beta)


def _m_step(x: np.ndarray, r_clean: np.ndarray) -> Tuple[BetaMixture, bool]:
    r_noisy = 1.0 - r_clean
    # a component that lost all its mass keeps a sliver so its moments stay defined
    r_clean = np.maximum(r_clean, 1e-12)
    r_noisy = np.maximum(r_noisy, 1e-12)
    lambda_c = float(r_clean.sum() / (r_clean.sum() + r_noisy.sum()))
    alpha_c, beta_c, clamp_c = _moments_to_shapes(x, r_clean)
    alpha_n, beta_n, clamp_n = _moments_to_shapes(x, r_noisy)
    mixture = BetaMixture(lambda_c, 1.0 - lambda_c, alpha_c, beta_c, alpha_n, beta_n)
    return mixture, clamp_c or clamp_n


def _e_step(mixture: BetaMixture, x: np.ndarray) -> Tuple[np.ndarray, float]:
    clean, noisy = _weighted_densities(mixture, x)
    total = np.maximum(clean + noisy, DENOM_FLOOR)
    return clean / total, float(np.log(total).sum())


def _relabel(mixture: BetaMixture) -> BetaMixture:
    mean_c, mean_n = mixture.component_means()
    if mean_c <= mean_n:
        return mixture
    return BetaMixture(
        lambda_c=mixture.lambda_n,
        lambda_n=mixture.lambda_c,
        alpha_c=mixture.alpha_n,
        beta_c=mixture.beta_n,
        alpha_n=mixture.alpha_c,
        beta_n=mixture.beta_c,
        fit_log_likelihood=mixture.fit_log_likelihood,
        iterations_run=mixture.iterations_run,
        converged=mixture.converged,
        clamp_iterations=mixture.clamp_iterations,
        log_likelihood_trace=mixture.log_likelihood_trace,
        clamp_trace=mixture.clamp_trace,
    )


def fit_bmm(normalized_losses: npt.ArrayLike, max_iterations: int = MAX_ITERATIONS) -> BetaMixture:
    """Fit a two-component beta mixture with EM.

    Responsibilities start hard: samples below the mean are clean. Iteration stops
    when the log-likelihood improves by less than 1e-6 or after ``max_iterations``.
    An iteration that lowers the likelihood without a shape clamp is rolled back.

    Raises:
        DegenerateLossesError: With fewer than 10 samples, values outside (0, 1), or
            constant input; callers fall back to an all-clean posterior table
    """
    x = np.asarray(normalized_losses, dtype=np.float64)
    if x.size < MIN_SAMPLES:
        raise DegenerateLossesError(
            f"need at least {MIN_SAMPLES} losses to fit a mixture, got {x.size}; "
            "fall back to uniform clean posteriors"
        )
    if np.any(x <= 0.0) or np.any(x >= 1.0):
        raise DegenerateLossesError("normalized losses must lie in (0, 1); normalize first")
    if np.ptp(x) == 0.0:
        raise DegenerateLossesError(
            "losses are constant, so clean and noisy samples cannot be separated; "
            "fall back to uniform clean posteriors"
        )

    r_clean = (x < x.mean()).astype(np.float64)
    mixture, clamped = _m_step(x, r_clean)
    r_clean, log_likelihood = _e_step(mixture, x)
    trace = [log_likelihood]
    clamp_trace = [clamped]
    clamp_iterations = int(clamped)
    converged = False
    iterations = 1

    while iterations < max_iterations:
        candidate, clamped = _m_step(x, r_clean)
        candidate_r, candidate_ll = _e_step(candidate, x)
        iterations += 1
        clamp_iterations += int(clamped)
        improvement = candidate_ll - log_likelihood
        if improvement < -1e-9 and not clamped:
            logger.debug("EM iteration %d lowered log-likelihood; keeping previous fit", iterations)
            converged = True
            break
        mixture, r_clean, log_likelihood = candidate, candidate_r, candidate_ll
        trace.append(log_likelihood)
        clamp_trace.append(clamped)
        logger.debug("EM iteration %d: log-likelihood %.6f", iterations, log_likelihood)
        if improvement < TOLERANCE:
            converged = True
            break

    mixture.fit_log_likelihood = log_likelihood
    mixture.iterations_run = iterations
    mixture.converged = converged
    mixture.clamp_iterations = clamp_iterations
    mixture.log_likelihood_trace = trace
    mixture.clamp_trace = clamp_trace
    mixture = _relabel(mixture)

    mean_c, mean_n = mixture.component_means()
    logger.info(
        "BMM fit: lambda_c=%.3f clean mean=%.3f noisy mean=%.3f after %d iterations (converged=%s)",
        mixture.lambda_c,
        mean_c,
        mean_n,
        iterations,
        converged,
    )
    return mixture


def build_posterior_table(
    mixture: BetaMixture,
    normalized_losses: npt.ArrayLike,
    ids: Sequence[int],
    fit_epoch: int = 0,
) -> PosteriorTable:
    """Evaluate the clean posterior for every sample once; the table stays frozen afterwards."""
    losses = np.asarray(normalized_losses, dtype=np.float64)
    if len(losses) != len(ids):
        raise ValueError("losses and ids differ in length")
    values = np.clip(posterior_clean(mixture, losses), 0.0, 1.0)
    return PosteriorTable(np.asarray(ids, dtype=np.int64), values, fit_epoch)


def write_bmm_json(mixture: BetaMixture, path: Union[str, Path]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(mixture.to_dict(), f, indent=2, sort_keys=True)
        f.write("\n")
