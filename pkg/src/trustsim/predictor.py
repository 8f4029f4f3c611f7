"""Biased matrix factorization trained by stochastic gradient descent.

The model predicts ``mu + b_c + b_i + <p_c, q_i>`` and minimizes, over the
observed ratings,

    sum (r - r_hat)^2 + reg * sum (b_c^2 + b_i^2 + |p_c|^2 + |q_i|^2)

where the regularization sum runs over the same observed records. The
global mean ``mu`` is fixed to the training mean and not learned.
"""
from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted, check_X_y, check_array

from .data import RATING_MAX, RATING_MIN, RatingStore


class TrainingError(RuntimeError):
    pass


@numba.njit(cache=True)
def _sgd_epoch(consumers, items, ratings, order, mu, bu, bi, P, Q, lr, reg):
    k = P.shape[1]
    for idx in order:
        u = consumers[idx]
        i = items[idx]
        dot = 0.0
        for f in range(k):
            dot += P[u, f] * Q[i, f]
        err = ratings[idx] - (mu + bu[u] + bi[i] + dot)
        bu[u] += lr * (err - reg * bu[u])
        bi[i] += lr * (err - reg * bi[i])
        for f in range(k):
            puf = P[u, f]
            qif = Q[i, f]
            P[u, f] += lr * (err * qif - reg * puf)
            Q[i, f] += lr * (err * puf - reg * qif)


class FactorizationRegressor(RegressorMixin, BaseEstimator):
    """Rating predictor over ``(consumer, item)`` index pairs.

    ``X`` is an integer array of shape (n, 2); ``y`` holds the ratings.
    Records are shuffled once with the seeded generator, then every epoch
    visits them in that fixed order, so fitting is deterministic given
    ``random_state``.
    """

    def __init__(
        self,
        n_factors=100,
        n_epochs=20,
        learning_rate=0.005,
        regularization=0.02,
        init_mean=0.0,
        init_std=0.1,
        n_consumers=None,
        n_items=None,
        random_state=None,
    ):
        self.n_factors = n_factors
        self.n_epochs = n_epochs
        self.learning_rate = learning_rate
        self.regularization = regularization
        self.init_mean = init_mean
        self.init_std = init_std
        self.n_consumers = n_consumers
        self.n_items = n_items
        self.random_state = random_state

    def _validate_pairs(self, X):
        X = np.asarray(X)
        if X.ndim != 2 or X.shape[1] != 2:
            raise ValueError(f"X must have shape (n, 2), got {X.shape}")
        if not np.issubdtype(X.dtype, np.integer):
            if not np.all(np.mod(X, 1) == 0):
                raise ValueError("X must hold integer consumer/item indices")
        X = X.astype(np.int64)
        if X.size and X.min() < 0:
            raise ValueError("indices must be non-negative")
        return X

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=None, y_numeric=True)
        X = self._validate_pairs(X)
        y = np.asarray(y, dtype=np.float64)
        if len(y) == 0:
            raise ValueError("cannot fit on an empty rating set")
        n_consumers = self.n_consumers or int(X[:, 0].max()) + 1
        n_items = self.n_items or int(X[:, 1].max()) + 1
        if X[:, 0].max() >= n_consumers or X[:, 1].max() >= n_items:
            raise ValueError("index exceeds n_consumers / n_items")

        rng = np.random.default_rng(self.random_state)
        order = rng.permutation(len(y))
        k = int(self.n_factors)
        P = rng.normal(self.init_mean, self.init_std, size=(n_consumers, k))
        Q = rng.normal(self.init_mean, self.init_std, size=(n_items, k))
        bu = np.zeros(n_consumers)
        bi = np.zeros(n_items)
        mu = float(y.mean())

        consumers = np.ascontiguousarray(X[:, 0])
        items = np.ascontiguousarray(X[:, 1])
        for epoch in range(int(self.n_epochs)):
            _sgd_epoch(
                consumers, items, y, order, mu, bu, bi, P, Q,
                float(self.learning_rate), float(self.regularization),
            )
            if not (np.isfinite(P).all() and np.isfinite(Q).all()
                    and np.isfinite(bu).all() and np.isfinite(bi).all()):
                raise TrainingError(f"parameters diverged in epoch {epoch}")

        self.global_mean_ = mu
        self.consumer_bias_ = bu
        self.item_bias_ = bi
        self.consumer_factors_ = P
        self.item_factors_ = Q
        # rows never seen in training fall back to mean + available biases
        self.consumer_seen_ = np.bincount(consumers, minlength=n_consumers) > 0
        self.item_seen_ = np.bincount(items, minlength=n_items) > 0
        self.n_features_in_ = 2
        return self

    def decision_function(self, X):
        """Unclamped model scores."""
        check_is_fitted(self)
        X = self._validate_pairs(check_array(X, dtype=None))
        u, i = X[:, 0], X[:, 1]
        dot = np.einsum("nk,nk->n", self.consumer_factors_[u], self.item_factors_[i])
        dot = np.where(self.consumer_seen_[u] & self.item_seen_[i], dot, 0.0)
        return self.global_mean_ + self.consumer_bias_[u] + self.item_bias_[i] + dot

    def predict(self, X):
        return np.clip(self.decision_function(X), RATING_MIN, RATING_MAX)

    def predict_all(self):
        """Clamped predictions for every consumer x item pair."""
        check_is_fitted(self)
        P = self.consumer_factors_ * self.consumer_seen_[:, None]
        Q = self.item_factors_ * self.item_seen_[:, None]
        scores = P @ Q.T
        scores += self.consumer_bias_[:, None]
        scores += self.item_bias_[None, :]
        scores += self.global_mean_
        return np.clip(scores, RATING_MIN, RATING_MAX, out=scores)


@dataclass(frozen=True)
class TrainConfig:
    n_factors: int = 100
    n_epochs: int = 20
    learning_rate: float = 0.005
    regularization: float = 0.02
    init_std: float = 0.1


@dataclass
class PredictionMatrix:
    values: np.ndarray
    trained_at: int = 0


def train(store: RatingStore, config: TrainConfig | None = None, rng=None) -> FactorizationRegressor:
    """Fit a :class:`FactorizationRegressor` on every record in ``store``."""
    if len(store) == 0:
        raise ValueError("cannot train on an empty rating store")
    config = config or TrainConfig()
    consumers, items, ratings = store.arrays()
    model = FactorizationRegressor(
        n_factors=config.n_factors,
        n_epochs=config.n_epochs,
        learning_rate=config.learning_rate,
        regularization=config.regularization,
        init_std=config.init_std,
        n_consumers=store.n_consumers,
        n_items=store.n_items,
        random_state=rng,
    )
    return model.fit(np.column_stack([consumers, items]), ratings)


def predict_all(model: FactorizationRegressor, store: RatingStore | None = None, step: int = 0) -> PredictionMatrix:
    """Full prediction matrix; observed ratings in ``store`` replace model scores."""
    values = model.predict_all()
    if store is not None:
        consumers, items, ratings = store.arrays()
        values[consumers, items] = ratings
    return PredictionMatrix(values, trained_at=step)


def retrain_due(step: int, period: int) -> bool:
    if period <= 0:
        raise ValueError("retrain period must be positive")
    return step > 0 and step % period == 0


# Loss and gradient of the SGD objective, used to check the kernel.

@dataclass
class FactorParams:
    global_mean: float
    consumer_bias: np.ndarray
    item_bias: np.ndarray
    consumer_factors: np.ndarray
    item_factors: np.ndarray

    @classmethod
    def from_model(cls, model: FactorizationRegressor) -> "FactorParams":
        return cls(
            model.global_mean_,
            model.consumer_bias_.copy(),
            model.item_bias_.copy(),
            model.consumer_factors_.copy(),
            model.item_factors_.copy(),
        )

    def flat(self) -> np.ndarray:
        return np.concatenate([
            self.consumer_bias, self.item_bias,
            self.consumer_factors.ravel(), self.item_factors.ravel(),
        ])

    def with_flat(self, vec: np.ndarray) -> "FactorParams":
        nc, ni = len(self.consumer_bias), len(self.item_bias)
        k = self.consumer_factors.shape[1]
        parts = np.split(np.asarray(vec, dtype=np.float64), np.cumsum([nc, ni, nc * k]))
        return FactorParams(
            self.global_mean, parts[0], parts[1],
            parts[2].reshape(nc, k), parts[3].reshape(ni, k),
        )


def regularized_loss(params: FactorParams, consumers, items, ratings, reg: float) -> float:
    P, Q = params.consumer_factors[consumers], params.item_factors[items]
    bu, bi = params.consumer_bias[consumers], params.item_bias[items]
    err = ratings - (params.global_mean + bu + bi + np.einsum("nk,nk->n", P, Q))
    penalty = bu**2 + bi**2 + (P**2).sum(axis=1) + (Q**2).sum(axis=1)
    return float(np.sum(err**2) + reg * np.sum(penalty))


def loss_gradient(params: FactorParams, consumers, items, ratings, reg: float) -> FactorParams:
    """Analytic gradient of :func:`regularized_loss` (global mean held fixed)."""
    P, Q = params.consumer_factors[consumers], params.item_factors[items]
    bu, bi = params.consumer_bias[consumers], params.item_bias[items]
    err = ratings - (params.global_mean + bu + bi + np.einsum("nk,nk->n", P, Q))

    g_bu = np.zeros_like(params.consumer_bias)
    g_bi = np.zeros_like(params.item_bias)
    g_P = np.zeros_like(params.consumer_factors)
    g_Q = np.zeros_like(params.item_factors)
    np.add.at(g_bu, consumers, -2 * err + 2 * reg * bu)
    np.add.at(g_bi, items, -2 * err + 2 * reg * bi)
    np.add.at(g_P, consumers, -2 * err[:, None] * Q + 2 * reg * P)
    np.add.at(g_Q, items, -2 * err[:, None] * P + 2 * reg * Q)
    return FactorParams(0.0, g_bu, g_bi, g_P, g_Q)


def sgd_step(params: FactorParams, consumer: int, item: int, rating: float, lr: float, reg: float) -> FactorParams:
    """One kernel update on a single record (returns a new parameter set)."""
    out = FactorParams(
        params.global_mean,
        params.consumer_bias.copy(), params.item_bias.copy(),
        params.consumer_factors.copy(), params.item_factors.copy(),
    )
    _sgd_epoch(
        np.array([consumer], dtype=np.int64), np.array([item], dtype=np.int64),
        np.array([rating], dtype=np.float64), np.array([0], dtype=np.int64),
        out.global_mean, out.consumer_bias, out.item_bias,
        out.consumer_factors, out.item_factors, lr, reg,
    )
    return out
