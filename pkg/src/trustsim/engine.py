"""Simulation loop, replications and experiment grids.

Within a step consumers act in id order. Per consumer the random draws
happen in this order: consumption decision, list position, utility
noise, feedback, social post (the last four only after consuming), then
the reputation refresh. Recommendations are built from the state at the
start of the step; feedback and posts take effect immediately, while the
rating model and expectation thresholds only change at retrain steps.

Each replication seed is split into four independent streams (profits,
model initialization, position bias, behavior), so replications that
share a seed also share profits, initial model and position bias
regardless of strategy.
"""
from __future__ import annotations

import itertools
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np
from scipy import stats

from . import consumer as cons
from .data import RatingStore, init_consumer, sample_profits
from .predictor import TrainConfig, predict_all, retrain_due, train
from .social import ReputationLedger
from .strategy import STRATEGIES, STRATEGY_OMEGA, ListBuilder, StrategyConfig

logger = logging.getLogger(__name__)

METRICS = (
    "mean_trust",
    "mean_consumption_prob",
    "profit_step",
    "cumulative_profit",
    "s_plus",
    "s_minus",
    "consumption_count",
)


class SimulationError(RuntimeError):
    pass


@dataclass(frozen=True)
class RunConfig:
    strategy: str = "consumer_centric"
    omega: float | None = None
    delta: float = 0.0
    psi: float = 0.75
    steps: int = 1000
    replications: int = 3
    retrain_period: int = 100
    seed: int = 0
    p_feed: float = 0.10
    p_soc: float = 0.15
    nu: float = 5000
    noise_sd: float = 0.3
    list_len: int = 10
    dirichlet_concentration: float = 1.0
    posting: bool = True
    n_factors: int = 100
    n_epochs: int = 20
    learning_rate: float = 0.005
    regularization: float = 0.02
    init_std: float = 0.1

    def __post_init__(self):
        if self.strategy not in STRATEGY_OMEGA:
            raise ValueError(f"unknown strategy {self.strategy!r}; valid: {', '.join(STRATEGIES)}")
        if self.omega is None:
            object.__setattr__(self, "omega", STRATEGY_OMEGA[self.strategy])
        for name in ("p_feed", "p_soc"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.omega is not None and not 0.0 <= self.omega <= 1.0:
            raise ValueError("omega must lie in [0, 1]")
        if not 0.0 < self.psi < 1.0:
            raise ValueError("psi must lie in (0, 1)")
        if self.delta < 0:
            raise ValueError("delta must be >= 0")
        if self.steps < 0 or self.replications < 1 or self.retrain_period < 1:
            raise ValueError("steps >= 0, replications >= 1 and retrain_period >= 1 required")
        if self.nu < 1 or self.list_len < 1 or self.noise_sd < 0:
            raise ValueError("nu >= 1, list_len >= 1 and noise_sd >= 0 required")

    @property
    def strategy_config(self) -> StrategyConfig:
        return StrategyConfig(self.strategy, self.omega, self.list_len)

    @property
    def train_config(self) -> TrainConfig:
        return TrainConfig(
            n_factors=self.n_factors,
            n_epochs=self.n_epochs,
            learning_rate=self.learning_rate,
            regularization=self.regularization,
            init_std=self.init_std,
        )

    def replication_seed(self, index: int) -> int:
        return self.seed + index


@dataclass(frozen=True)
class StepMetrics:
    step: int
    mean_trust: float
    mean_consumption_prob: float
    profit_step: float
    cumulative_profit: float
    s_plus: int
    s_minus: int
    consumption_count: int


@dataclass(frozen=True)
class ConsumptionEvent:
    step: int
    consumer: int
    item: int
    utility: float
    satisfied: bool
    profit: float
    gave_feedback: bool
    posted: str | None


@dataclass
class ReplicationTrace:
    """Optional detail from :func:`run_replication` used by checks and tests."""

    events: list = field(default_factory=list)
    probabilities: list = field(default_factory=list)  # per step, C consumption probabilities
    trusts: list = field(default_factory=list)  # per step, C decision-time trust values
    final_store_size: int = 0
    initial_store_size: int = 0


def _never(utility):
    return 0.0


def replication_profits(seed: int, n_items: int) -> np.ndarray:
    """The profit draw a replication with ``seed`` uses when none is pinned."""
    profit_ss = np.random.SeedSequence(seed).spawn(4)[0]
    return sample_profits(n_items, np.random.default_rng(profit_ss))


def run_replication(
    cfg: RunConfig,
    store: RatingStore,
    seed: int,
    profits: np.ndarray | None = None,
    trace: ReplicationTrace | None = None,
) -> list[StepMetrics]:
    """Simulate one replication and return its per-step metrics."""
    _, model_ss, bias_ss, behave_ss = np.random.SeedSequence(seed).spawn(4)
    store = store.copy()
    n_consumers, n_items = store.n_consumers, store.n_items
    if profits is None:
        profits = replication_profits(seed, n_items)
    profits = np.asarray(profits, dtype=np.float64)
    if len(profits) != n_items:
        raise SimulationError(f"{len(profits)} profits for {n_items} items")
    model_rng = np.random.default_rng(model_ss)
    bias = cons.PositionBias.draw(np.random.default_rng(bias_ss), cfg.list_len, cfg.dirichlet_concentration)
    rng = np.random.default_rng(behave_ss)

    alpha = np.empty(n_consumers)
    beta = np.empty(n_consumers)
    consumed = np.zeros((n_consumers, n_items), dtype=bool)
    for c in range(n_consumers):
        init = init_consumer(store, c)
        alpha[c], beta[c] = init.alpha0, init.beta0
        consumed[c, list(init.rated_items)] = True
    cached = np.full(n_consumers, cons.NEUTRAL_REPUTATION)
    ledger = ReputationLedger()
    builder = ListBuilder(cfg.strategy_config, profits)
    post_prob = cons.posting_probability if cfg.posting else _never

    def refresh_model(step):
        model = train(store, cfg.train_config, model_rng)
        pred = predict_all(model, store, step).values
        builder.update_predictions(pred)
        return pred, cons.expectation_thresholds(pred, consumed, cfg.psi)

    predictions, thresholds = refresh_model(0)
    if trace is not None:
        trace.initial_store_size = len(store)

    metrics: list[StepMetrics] = []
    cumulative = 0.0
    posts = 0
    warned = set()
    for t in range(cfg.steps):
        if retrain_due(t, cfg.retrain_period):
            predictions, thresholds = refresh_model(t)
        lists, lengths = builder.build(consumed, store.item_counts)

        profit_step = 0.0
        count = 0
        trust_sum = 0.0
        prob_sum = 0.0
        step_probs = np.empty(n_consumers) if trace is not None else None
        step_trust = np.empty(n_consumers) if trace is not None else None
        for c in range(n_consumers):
            trust = cons.trust_of(alpha[c], beta[c])
            volume = ledger.volume_weight(cfg.nu)
            take, p = cons.decide_consume(trust, cached[c], volume, cfg.delta, rng)
            trust_sum += trust
            prob_sum += p
            if trace is not None:
                step_probs[c] = p
                step_trust[c] = trust
            n_listed = lengths[c]
            if n_listed == 0:
                if c not in warned:
                    logger.warning("consumer %d has consumed the whole catalog; skipping", c)
                    warned.add(c)
                take = False
            if take:
                item = cons.choose_item(lists[c, :n_listed], bias, rng)
                utility = cons.experience_utility(predictions[c, item], rng, cfg.noise_sd)
                alpha[c], beta[c], satisfied = cons.update_experience(alpha[c], beta[c], utility, thresholds[c])
                consumed[c, item] = True
                profit_step += profits[item]
                count += 1
                rating = cons.maybe_feedback(utility, rng, cfg.p_feed)
                if rating is not None:
                    store.add(c, item, rating)
                post = cons.maybe_post(utility, satisfied, rng, post_prob)
                if post is not None:
                    ledger.record_post(post)
                    posts += 1
                if trace is not None:
                    trace.events.append(ConsumptionEvent(
                        t + 1, c, item, utility, satisfied, float(profits[item]), rating is not None, post,
                    ))
            cached[c] = cons.maybe_refresh_reputation(cached[c], ledger, rng, cfg.p_soc)

        cumulative += profit_step
        row = StepMetrics(
            step=t + 1,
            mean_trust=float(trust_sum / n_consumers),
            mean_consumption_prob=float(prob_sum / n_consumers),
            profit_step=float(profit_step),
            cumulative_profit=float(cumulative),
            s_plus=ledger.s_plus,
            s_minus=ledger.s_minus,
            consumption_count=count,
        )
        if not all(math.isfinite(v) for v in (row.mean_trust, row.mean_consumption_prob, cumulative)):
            raise SimulationError(f"non-finite metrics at step {t + 1}: {row}")
        if (t + 1) % 100 == 0 and ledger.total != posts:
            raise SimulationError(f"ledger total {ledger.total} != {posts} posted events at step {t + 1}")
        metrics.append(row)
        if trace is not None:
            trace.probabilities.append(step_probs)
            trace.trusts.append(step_trust)
    if trace is not None:
        trace.final_store_size = len(store)
    return metrics


@dataclass
class RunResult:
    config: RunConfig
    seeds: list[int]
    per_replication: list[list[StepMetrics]]
    aggregate: dict[str, tuple[np.ndarray, np.ndarray]]  # metric -> (mean, ci half-width)


def metric_matrix(per_replication, metric: str) -> np.ndarray:
    return np.array([[getattr(m, metric) for m in rep] for rep in per_replication], dtype=np.float64)


def mean_and_ci(values: np.ndarray, confidence: float = 0.95) -> tuple[np.ndarray, np.ndarray]:
    """Per-column mean and Student-t half-width over replications (rows).

    With a single replication the half-width is NaN (not applicable).
    """
    values = np.asarray(values, dtype=np.float64)
    n = values.shape[0]
    mean = values.mean(axis=0)
    if n < 2:
        return mean, np.full_like(mean, np.nan)
    sd = values.std(axis=0, ddof=1)
    q = stats.t.ppf(0.5 + confidence / 2, n - 1)
    return mean, q * sd / math.sqrt(n)


def aggregate(per_replication) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    return {m: mean_and_ci(metric_matrix(per_replication, m)) for m in METRICS}


def _run_one(args):
    cfg, store, seed, profits = args
    try:
        return run_replication(cfg, store, seed, profits)
    except Exception as exc:
        raise SimulationError(f"replication with seed {seed} failed: {exc}") from exc


def run_experiment(cfg: RunConfig, store: RatingStore, profits=None, jobs: int = 1) -> RunResult:
    results = run_many([cfg], store, profits=profits, jobs=jobs)
    return results[0]


def run_many(configs, store: RatingStore, profits=None, jobs: int = 1) -> list[RunResult]:
    """Run every replication of every config; outputs do not depend on ``jobs``."""
    tasks = [
        (cfg, store, cfg.replication_seed(r), profits)
        for cfg in configs
        for r in range(cfg.replications)
    ]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            outputs = list(pool.map(_run_one, tasks))
    else:
        outputs = []
        for i, task in enumerate(tasks):
            logger.info("replication %d/%d: %s seed=%d", i + 1, len(tasks), task[0].strategy, task[2])
            outputs.append(_run_one(task))
    results = []
    pos = 0
    for cfg in configs:
        reps = outputs[pos:pos + cfg.replications]
        pos += cfg.replications
        results.append(RunResult(
            config=cfg,
            seeds=[cfg.replication_seed(r) for r in range(cfg.replications)],
            per_replication=reps,
            aggregate=aggregate(reps) if cfg.steps else {},
        ))
    return results


def grid(strategies, deltas, psis, base: RunConfig | None = None) -> list[RunConfig]:
    """Cartesian product ordered by strategy, then delta, then psi."""
    strategies, deltas, psis = list(strategies), list(deltas), list(psis)
    if not strategies or not deltas or not psis:
        raise ValueError("grid factors must be non-empty")
    base = base or RunConfig()
    return [
        replace(base, strategy=s, omega=None, delta=float(d), psi=float(p))
        for s, d, p in itertools.product(strategies, deltas, psis)
    ]


def config_dict(cfg: RunConfig) -> dict:
    return asdict(cfg)


CONFIG_FIELDS = {f.name: f for f in fields(RunConfig)}
