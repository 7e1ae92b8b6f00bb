"""
Quantile loss and verification scores.

All functions are pure. Scalars in, float out; arrays in, arrays out for
the elementwise functions. Indicator conventions follow the loss
definition: a zero residual counts as I(u >= 0) = 1, and an observation
equal to its prediction counts as covered.
"""

import logging
from typing import Sequence, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from src.errors import DataError, UndefinedSkillError

# Configure logger
logger = logging.getLogger(__name__)

DEFAULT_TAU_LEVELS = (0.5, 0.6, 0.7, 0.8, 0.9, 0.95, 0.97, 0.99, 0.999)


class QuantileLevel(BaseModel):
    """Probability level of a predicted quantile, strictly inside (0, 1)."""

    model_config = ConfigDict(frozen=True)

    tau: float = Field(gt=0.0, lt=1.0)

    def __float__(self) -> float:
        return self.tau


TauLike = Union[float, QuantileLevel]
ArrayLike = Union[float, Sequence[float], np.ndarray]


class ScoreSummary(BaseModel):
    """Mean quantile score and frequency score of one prediction set."""

    model_config = ConfigDict(frozen=True)

    tau: QuantileLevel
    mean_quantile_score: float = Field(ge=0.0)
    frequency_score: float = Field(ge=0.0, le=1.0)
    n: int = Field(gt=0)

    @model_validator(mode="after")
    def check_frequency_bound(self):
        bound = max(self.tau.tau, 1.0 - self.tau.tau)
        if self.frequency_score > bound + 1e-12:
            raise ValueError(
                f"frequency_score {self.frequency_score} exceeds max(tau, 1 - tau)"
            )
        return self


def as_tau(tau: TauLike) -> float:
    """
    Validate a quantile level.

    Args:
        tau: Float or QuantileLevel

    Returns:
        The level as a float in (0, 1)
    """
    if isinstance(tau, QuantileLevel):
        return tau.tau
    return QuantileLevel(tau=float(tau)).tau


def _finite(values: ArrayLike, name: str) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise DataError(f"{name} must be finite")
    return arr


def _paired(predictions: ArrayLike, observations: ArrayLike):
    x = np.atleast_1d(_finite(predictions, "predictions"))
    y = np.atleast_1d(_finite(observations, "observations"))
    if x.shape != y.shape:
        raise DataError(
            f"predictions and observations differ in length: {x.size} != {y.size}"
        )
    if x.size == 0:
        raise DataError("at least one prediction/observation pair is required")
    return x, y


def pinball_loss(u: ArrayLike, tau: TauLike):
    """
    Quantile (pinball) loss u * (I(u >= 0) - tau).

    Args:
        u: Residual(s), prediction minus observation
        tau: Quantile level

    Returns:
        Nonnegative loss, same shape as ``u``
    """
    level = as_tau(tau)
    arr = _finite(u, "residual")
    loss = arr * (np.where(arr >= 0.0, 1.0, 0.0) - level)
    if loss.ndim == 0:
        return float(loss)
    return loss


def quantile_score(x: ArrayLike, y: ArrayLike, tau: TauLike):
    """
    Quantile scoring function S_tau(x, y) = pinball_loss(x - y, tau).

    Args:
        x: Predicted quantile(s)
        y: Observation(s)
        tau: Quantile level

    Returns:
        Nonnegative score(s); smaller is better
    """
    residual = _finite(x, "prediction") - _finite(y, "observation")
    return pinball_loss(residual, tau)


def mean_quantile_score(
    predictions: ArrayLike, observations: ArrayLike, tau: TauLike
) -> float:
    """Arithmetic mean of the quantile score over paired elements."""
    x, y = _paired(predictions, observations)
    return float(np.mean(pinball_loss(x - y, tau)))


def quantile_skill_score(
    mean_score_candidate: float, mean_score_reference: float
) -> float:
    """
    Skill of a candidate against a reference, 1 - candidate / reference.

    Raises:
        UndefinedSkillError: if the reference mean score is 0
    """
    if mean_score_reference < 0 or mean_score_candidate < 0:
        raise DataError("mean scores must be nonnegative")
    if mean_score_reference == 0:
        raise UndefinedSkillError("skill undefined for a reference mean score of 0")
    return 1.0 - mean_score_candidate / mean_score_reference


def coverage(predictions: ArrayLike, observations: ArrayLike) -> float:
    """Fraction of observations lower than or equal to their predictions."""
    x, y = _paired(predictions, observations)
    return float(np.mean(y <= x))


def frequency_score(
    predictions: ArrayLike, observations: ArrayLike, tau: TauLike
) -> float:
    """Absolute deviation of the empirical coverage from tau."""
    level = as_tau(tau)
    return abs(coverage(predictions, observations) - level)


def frequency_skill_score(fr_candidate: float, fr_reference: float) -> float:
    """
    Frequency skill 1 - fr_candidate / fr_reference.

    Raises:
        UndefinedSkillError: if the reference frequency score is 0
    """
    if fr_reference < 0 or fr_candidate < 0:
        raise DataError("frequency scores must be nonnegative")
    if fr_reference == 0:
        raise UndefinedSkillError(
            "skill undefined for a reference frequency score of 0"
        )
    return 1.0 - fr_candidate / fr_reference


def summarize(
    predictions: ArrayLike, observations: ArrayLike, tau: TauLike
) -> ScoreSummary:
    """
    Score one prediction set at one level.

    Returns:
        ScoreSummary with mean quantile score, frequency score and size
    """
    x, y = _paired(predictions, observations)
    level = QuantileLevel(tau=as_tau(tau))
    return ScoreSummary(
        tau=level,
        mean_quantile_score=mean_quantile_score(x, y, level),
        frequency_score=frequency_score(x, y, level),
        n=int(x.size),
    )
