"""Provider recommendation strategies and top-N list construction."""
from __future__ import annotations

from dataclasses import dataclass, field

import numba
import numpy as np

STRATEGY_OMEGA = {
    "consumer_centric": 1.0,
    "profit_centric": 0.0,
    "consumer_biased": 0.9,
    "balanced": 0.5,
    "popularity": None,
}
STRATEGIES = tuple(STRATEGY_OMEGA)


@dataclass(frozen=True)
class StrategyConfig:
    kind: str
    omega: float | None = None
    list_len: int = 10

    def __post_init__(self):
        if self.kind not in STRATEGY_OMEGA:
            raise ValueError(f"unknown strategy {self.kind!r}; valid: {', '.join(STRATEGIES)}")
        if self.omega is None:
            object.__setattr__(self, "omega", STRATEGY_OMEGA[self.kind])
        if self.omega is not None and not 0.0 <= self.omega <= 1.0:
            raise ValueError(f"omega must lie in [0, 1], got {self.omega}")
        if self.list_len < 1:
            raise ValueError("list_len must be >= 1")


@dataclass
class RecommendationList:
    consumer: int
    items: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))
    scores: np.ndarray = field(default_factory=lambda: np.empty(0))

    def __len__(self):
        return len(self.items)


def score(kind: str, omega, r_hat, rho, pop_count):
    """Ordering key of an item under a strategy (works elementwise on arrays)."""
    if kind == "popularity":
        return pop_count
    if kind == "consumer_centric":
        return r_hat
    if kind == "profit_centric":
        return rho
    if kind in ("balanced", "consumer_biased"):
        return omega * r_hat + (1 - omega) * rho
    raise ValueError(f"unknown strategy {kind!r}")


def ranking_order(keys: np.ndarray) -> np.ndarray:
    """Indices sorted by key descending, ties by ascending index (along the last axis)."""
    keys = np.asarray(keys)
    # stable sort of the negated key keeps ascending ids within ties
    return np.argsort(-keys, axis=-1, kind="stable")


def recommend(consumer, predictions, profits, item_counts, consumed, cfg: StrategyConfig) -> RecommendationList:
    """Top-N list for a single consumer, by full sort of the candidate items.

    ``predictions`` is the C x M matrix (or ``PredictionMatrix``), ``consumed``
    any collection of item ids or a boolean mask over the catalog.
    """
    values = getattr(predictions, "values", predictions)
    n_items = len(profits)
    mask = np.zeros(n_items, dtype=bool)
    consumed = np.asarray(list(consumed) if isinstance(consumed, (set, frozenset)) else consumed)
    if consumed.dtype == bool:
        mask |= consumed
    elif consumed.size:
        mask[consumed.astype(np.int64)] = True
    candidates = np.flatnonzero(~mask)
    if candidates.size == 0:
        return RecommendationList(consumer)
    keys = np.asarray(
        score(cfg.kind, cfg.omega, values[consumer, candidates], np.asarray(profits)[candidates],
              np.asarray(item_counts)[candidates]),
        dtype=np.float64,
    )
    top = ranking_order(keys)[: cfg.list_len]
    return RecommendationList(consumer, candidates[top], keys[top])


@numba.njit(cache=True)
def _first_unconsumed(order, consumed, start, n, out, out_len):
    # order: per-consumer ranking (C x M), or a single shared row when C rows share it
    shared = order.shape[0] == 1
    for c in range(consumed.shape[0]):
        row = 0 if shared else c
        pos = start[c]
        # leading consumed items never come back; skip them permanently
        while pos < order.shape[1] and consumed[c, order[row, pos]]:
            pos += 1
        if not shared:
            start[c] = pos
        filled = 0
        while pos < order.shape[1] and filled < n:
            item = order[row, pos]
            if not consumed[c, item]:
                out[c, filled] = item
                filled += 1
            pos += 1
        out_len[c] = filled


class ListBuilder:
    """Builds every consumer's top-N list per step.

    Personalized strategies sort each consumer's keys once per prediction
    update and then walk the ranking past consumed items. Popularity keys
    change with incoming feedback, so the shared ranking is rebuilt on
    every call. Output matches :func:`recommend` item for item.
    """

    def __init__(self, cfg: StrategyConfig, profits: np.ndarray):
        self.cfg = cfg
        self.profits = np.asarray(profits, dtype=np.float64)
        self._order = None
        self._start = None

    def update_predictions(self, predictions: np.ndarray) -> None:
        if self.cfg.kind == "popularity":
            return
        if self.cfg.kind == "profit_centric":
            order = ranking_order(self.profits)[None, :]
        else:
            keys = score(self.cfg.kind, self.cfg.omega, predictions, self.profits[None, :], None)
            order = ranking_order(keys)
        self._order = np.ascontiguousarray(order, dtype=np.int64)
        self._start = np.zeros(predictions.shape[0], dtype=np.int64)

    def build(self, consumed: np.ndarray, item_counts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Return ``(items, lengths)``; row c holds ``lengths[c]`` valid ids."""
        n_consumers = consumed.shape[0]
        if self.cfg.kind == "popularity":
            order = ranking_order(np.asarray(item_counts, dtype=np.float64))[None, :].astype(np.int64)
            start = np.zeros(n_consumers, dtype=np.int64)
        elif self.cfg.kind == "profit_centric":
            order = self._order
            start = np.zeros(n_consumers, dtype=np.int64)
        else:
            if self._order is None:
                raise RuntimeError("update_predictions must be called before build")
            order, start = self._order, self._start
        out = np.full((n_consumers, self.cfg.list_len), -1, dtype=np.int64)
        lengths = np.zeros(n_consumers, dtype=np.int64)
        _first_unconsumed(order, consumed, start, self.cfg.list_len, out, lengths)
        return out, lengths
