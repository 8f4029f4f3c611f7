"""Consumer behavior: expectations, consumption, item choice, trust, posting.

Every stochastic helper draws exactly one value from ``rng`` per call, even
when the outcome is forced (probability 0 or 1), so random streams stay
aligned across parameter settings.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .data import RATING_MAX, RATING_MIN
from .social import DOWN, UP, ReputationLedger

NEUTRAL_REPUTATION = 0.5


def trust_of(alpha: float, beta: float) -> float:
    total = alpha + beta
    if total <= 0:
        return NEUTRAL_REPUTATION
    return alpha / total


@dataclass
class ConsumerState:
    alpha: float
    beta: float
    threshold: float
    cached_reputation: float = NEUTRAL_REPUTATION
    consumed: set = field(default_factory=set)

    @property
    def trust(self) -> float:
        return trust_of(self.alpha, self.beta)

    def update_trust(self, utility: float, threshold: float | None = None) -> bool:
        """Apply one experience; returns whether the consumer was satisfied."""
        if threshold is None:
            threshold = self.threshold
        self.alpha, self.beta, satisfied = update_experience(self.alpha, self.beta, utility, threshold)
        return satisfied


def expectation_threshold(predicted_utils, psi: float) -> float:
    """Nearest-rank ``psi`` quantile: the ceil(psi * n)-th smallest value."""
    values = np.sort(np.asarray(predicted_utils, dtype=np.float64).ravel())
    n = values.size
    if n == 0:
        raise ValueError("expectation threshold of an empty item set")
    if not 0.0 < psi < 1.0:
        raise ValueError(f"psi must lie in (0, 1), got {psi}")
    rank = max(math.ceil(psi * n), 1)
    return float(values[rank - 1])


def expectation_thresholds(predictions: np.ndarray, consumed: np.ndarray, psi: float) -> np.ndarray:
    """Row-wise :func:`expectation_threshold` over each consumer's unconsumed items.

    Consumers with nothing left get NaN.
    """
    masked = np.where(consumed, np.inf, predictions)
    masked.sort(axis=1)
    remaining = (~consumed).sum(axis=1)
    rank = np.maximum(np.ceil(psi * remaining).astype(np.int64), 1)
    out = masked[np.arange(len(masked)), np.minimum(rank, masked.shape[1]) - 1]
    return np.where(remaining > 0, out, np.nan)


def consumption_probability(trust: float, reputation: float, volume: float, delta: float) -> float:
    """Mean of trust and reputation, limited to ``trust +/- volume * delta`` within [0, 1]."""
    band = volume * delta
    low = max(trust - band, 0.0)
    high = min(trust + band, 1.0)
    mean = (trust + reputation) / 2
    return min(max(mean, low), high)


def decide_consume(trust, reputation, volume, delta, rng) -> tuple[bool, float]:
    p = consumption_probability(trust, reputation, volume, delta)
    return bool(rng.random() < p), p


@dataclass(frozen=True)
class PositionBias:
    """Descending selection probabilities over list positions."""

    probs: np.ndarray

    def __post_init__(self):
        probs = np.asarray(self.probs, dtype=np.float64)
        if probs.ndim != 1 or probs.size == 0:
            raise ValueError("position bias needs a non-empty 1-d probability vector")
        if np.any(probs < 0) or np.any(np.diff(probs) > 0):
            raise ValueError("position bias must be non-negative and non-increasing")
        if abs(probs.sum() - 1.0) > 1e-9:
            raise ValueError("position bias must sum to 1")
        object.__setattr__(self, "probs", probs)
        object.__setattr__(self, "_cdf", np.cumsum(probs))

    @classmethod
    def draw(cls, rng, length: int = 10, concentration: float = 1.0) -> "PositionBias":
        probs = rng.dirichlet(np.full(length, concentration))
        probs = np.sort(probs)[::-1]
        return cls(probs / probs.sum())

    @classmethod
    def uniform(cls, length: int) -> "PositionBias":
        return cls(np.full(length, 1.0 / length))

    def truncated(self, length: int) -> "PositionBias":
        if length >= self.probs.size:
            return self
        head = self.probs[:length]
        total = head.sum()
        if total <= 0:
            return PositionBias.uniform(length)
        return PositionBias(head / total)

    def sample_rank(self, u: float) -> int:
        """Map a uniform draw to a rank through the cumulative distribution."""
        rank = int(np.searchsorted(self._cdf, u * self._cdf[-1], side="right"))
        return min(rank, self.probs.size - 1)


def choose_item(items, bias: PositionBias, rng) -> int:
    if len(items) == 0:
        raise ValueError("cannot choose from an empty recommendation list")
    bias = bias.truncated(len(items))
    return int(items[bias.sample_rank(rng.random())])


def experience_utility(r_hat: float, rng, noise_sd: float = 0.3) -> float:
    """Predicted rating plus Gaussian noise, kept on the rating scale."""
    u = r_hat + noise_sd * rng.standard_normal()
    return min(max(u, RATING_MIN), RATING_MAX)


def update_experience(alpha: float, beta: float, utility: float, threshold: float) -> tuple[float, float, bool]:
    """Add the squared deviation from the threshold to alpha (satisfied) or beta."""
    d = (utility - threshold) ** 2
    if utility >= threshold:
        return alpha + d, beta, True
    return alpha, beta + d, False


def maybe_feedback(utility: float, rng, p_feed: float = 0.10) -> float | None:
    if rng.random() < p_feed:
        return utility
    return None


def posting_probability(utility: float) -> float:
    """U-shaped chance of posting: 1 at the scale ends, 0 at the midpoint."""
    x = (utility - RATING_MIN) / (RATING_MAX - RATING_MIN)
    return 1.0 - 4.0 * x * (1.0 - x)


def maybe_post(utility: float, satisfied: bool, rng, post_prob=posting_probability) -> str | None:
    if rng.random() < post_prob(utility):
        return UP if satisfied else DOWN
    return None


def maybe_refresh_reputation(cached: float, ledger: ReputationLedger, rng, p_soc: float = 0.15) -> float:
    if rng.random() < p_soc:
        current = ledger.reputation()
        if current is not None:
            return current
    return cached
