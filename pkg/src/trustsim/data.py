"""Rating data ingestion, the fixed item catalog and consumer initialization.

Ratings are read from MovieLens-style delimited files. External user and
movie ids are re-indexed densely (sorted ascending) so that consumers cover
``0..C-1`` and items cover ``0..M-1``.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

RATING_MIN = 0.0
RATING_MAX = 5.0


class DataError(ValueError):
    """Raised for malformed or invalid rating data."""


@dataclass(frozen=True)
class RatingSchema:
    """Column mapping for a ratings file.

    Each column is either a header name (requires ``header``) or a
    zero-based field position.
    """

    consumer: str | int = "userId"
    item: str | int = "movieId"
    rating: str | int = "rating"
    timestamp: str | int = "timestamp"
    delimiter: str = ","
    header: bool = True


SCHEMAS = {
    # ml-latest-small / ml-latest layout
    "movielens-csv": RatingSchema(),
    # ml-100k u.data: tab separated, no header
    "ml-100k": RatingSchema(0, 1, 2, 3, delimiter="\t", header=False),
    # RecBole atomic .inter files
    "atomic": RatingSchema(
        "user_id:token", "item_id:token", "rating:float", "timestamp:float", delimiter="\t"
    ),
}


@dataclass(frozen=True)
class RatingRecord:
    consumer_id: int
    item_id: int
    rating: float
    timestamp: int = 0


class RatingStore:
    """Sparse consumer x item feedback, append-only during a run."""

    def __init__(self, n_consumers: int, n_items: int):
        self.n_consumers = int(n_consumers)
        self.n_items = int(n_items)
        self._consumers: list[int] = []
        self._items: list[int] = []
        self._ratings: list[float] = []
        self._timestamps: list[int] = []
        self.by_consumer: list[dict[int, float]] = [dict() for _ in range(self.n_consumers)]
        self.item_counts = np.zeros(self.n_items, dtype=np.int64)

    def __len__(self) -> int:
        return len(self._ratings)

    def add(self, consumer: int, item: int, rating: float, timestamp: int = 0) -> None:
        if not 0 <= consumer < self.n_consumers:
            raise DataError(f"consumer id {consumer} outside 0..{self.n_consumers - 1}")
        if not 0 <= item < self.n_items:
            raise DataError(f"item id {item} outside 0..{self.n_items - 1}")
        rating = float(rating)
        if not RATING_MIN <= rating <= RATING_MAX:
            raise DataError(f"rating {rating} outside [{RATING_MIN}, {RATING_MAX}]")
        row = self.by_consumer[consumer]
        if item in row:
            raise DataError(f"duplicate rating for consumer {consumer}, item {item}")
        row[item] = rating
        self._consumers.append(consumer)
        self._items.append(item)
        self._ratings.append(rating)
        self._timestamps.append(int(timestamp))
        self.item_counts[item] += 1

    def records(self):
        for c, i, r, ts in zip(self._consumers, self._items, self._ratings, self._timestamps):
            yield RatingRecord(c, i, r, ts)

    def arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Return ``(consumers, items, ratings)`` in insertion order."""
        return (
            np.asarray(self._consumers, dtype=np.int64),
            np.asarray(self._items, dtype=np.int64),
            np.asarray(self._ratings, dtype=np.float64),
        )

    def ratings_of(self, consumer: int) -> dict[int, float]:
        return self.by_consumer[consumer]

    def copy(self) -> "RatingStore":
        new = RatingStore(self.n_consumers, self.n_items)
        new._consumers = list(self._consumers)
        new._items = list(self._items)
        new._ratings = list(self._ratings)
        new._timestamps = list(self._timestamps)
        new.by_consumer = [dict(row) for row in self.by_consumer]
        new.item_counts = self.item_counts.copy()
        return new

    def subset(self, consumers) -> "RatingStore":
        """Store restricted to ``consumers``, re-indexed densely in the given order.

        Items keep their ids so the catalog stays the same.
        """
        consumers = [int(c) for c in consumers]
        new = RatingStore(len(consumers), self.n_items)
        for new_id, old_id in enumerate(consumers):
            for item, rating in self.by_consumer[old_id].items():
                new.add(new_id, item, rating)
        return new


@dataclass
class ItemCatalog:
    profits: np.ndarray
    item_ids: np.ndarray = field(default=None)  # external id of each dense index

    def __post_init__(self):
        self.profits = np.asarray(self.profits, dtype=np.float64)
        if self.item_ids is None:
            self.item_ids = np.arange(len(self.profits))
        if self.profits.min(initial=RATING_MIN) < RATING_MIN or self.profits.max(initial=0) > RATING_MAX:
            raise DataError("profits must lie in [0, 5]")

    @property
    def item_count(self) -> int:
        return len(self.profits)


@dataclass(frozen=True)
class ConsumerInit:
    alpha0: float
    beta0: float
    threshold0: float
    rated_items: frozenset

    @property
    def trust0(self) -> float:
        return self.alpha0 / (self.alpha0 + self.beta0)


@dataclass
class LoadedRatings:
    """Result of :func:`load_ratings`: the store plus the external id maps."""

    store: RatingStore
    consumer_ids: np.ndarray
    item_ids: np.ndarray


def _column_index(schema_key, header_row, path):
    if isinstance(schema_key, int):
        return schema_key
    if header_row is None:
        raise DataError(f"{path}: named column {schema_key!r} requires a header row")
    try:
        return header_row.index(schema_key)
    except ValueError:
        raise DataError(f"{path}: missing column {schema_key!r} in header {header_row}") from None


def load_ratings(path, schema: RatingSchema | str = "movielens-csv") -> LoadedRatings:
    """Read a ratings file into a densely re-indexed :class:`RatingStore`."""
    if isinstance(schema, str):
        try:
            schema = SCHEMAS[schema]
        except KeyError:
            raise DataError(f"unknown ratings format {schema!r}; valid: {sorted(SCHEMAS)}") from None
    path = Path(path)
    if not path.exists():
        raise DataError(f"ratings file not found: {path}")

    rows = []
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh, delimiter=schema.delimiter)
        header = None
        if schema.header:
            header = next(reader, None)
            if header is None:
                raise DataError(f"{path}: empty file")
        cols = [
            _column_index(k, header, path)
            for k in (schema.consumer, schema.item, schema.rating, schema.timestamp)
        ]
        width = max(cols) + 1
        for row in reader:
            lineno = reader.line_num
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) < width:
                raise DataError(f"{path}:{lineno}: expected at least {width} fields, got {len(row)}")
            try:
                user = row[cols[0]].strip()
                movie = row[cols[1]].strip()
                rating = float(row[cols[2]])
                timestamp = int(float(row[cols[3]]))
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: cannot parse row {row!r}: {exc}") from None
            if not user or not movie:
                raise DataError(f"{path}:{lineno}: empty id field")
            if not (RATING_MIN <= rating <= RATING_MAX) or math.isnan(rating):
                raise DataError(f"{path}:{lineno}: rating {rating} outside [0, 5]")
            rows.append((user, movie, rating, timestamp, lineno))
    if not rows:
        raise DataError(f"{path}: no rating records")

    consumer_ids = _sorted_ids({r[0] for r in rows})
    item_ids = _sorted_ids({r[1] for r in rows})
    consumer_index = {v: k for k, v in enumerate(consumer_ids)}
    item_index = {v: k for k, v in enumerate(item_ids)}

    store = RatingStore(len(consumer_ids), len(item_ids))
    for user, movie, rating, timestamp, lineno in rows:
        try:
            store.add(consumer_index[user], item_index[movie], rating, timestamp)
        except DataError as exc:
            raise DataError(f"{path}:{lineno}: {exc}") from None
    logger.info(
        "loaded %s: %d consumers, %d items, %d ratings",
        path, store.n_consumers, store.n_items, len(store),
    )
    return LoadedRatings(store, np.asarray(consumer_ids), np.asarray(item_ids))


def _sorted_ids(values):
    # numeric ids sort numerically, anything else lexically
    try:
        return sorted(values, key=int)
    except ValueError:
        return sorted(values)


def sample_profits(
    item_count: int,
    rng: np.random.Generator,
    mean: float = 2.5,
    sd: float = 1.0,
    low: float = 0.0,
    high: float = 5.0,
    max_rounds: int = 1000,
) -> np.ndarray:
    """Draw per-item profits from N(mean, sd) truncated to [low, high] by rejection."""
    if item_count < 1:
        raise ValueError("item_count must be >= 1")
    out = rng.normal(mean, sd, size=item_count)
    bad = (out < low) | (out > high)
    rounds = 0
    while bad.any():
        rounds += 1
        if rounds > max_rounds:
            raise RuntimeError("truncated normal rejection loop did not converge")
        out[bad] = rng.normal(mean, sd, size=int(bad.sum()))
        bad = (out < low) | (out > high)
    return out


def save_profits(path, profits) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["item_id", "profit"])
        for i, p in enumerate(profits):
            writer.writerow([i, repr(float(p))])


def load_profits(path, item_count: int | None = None) -> np.ndarray:
    path = Path(path)
    values = {}
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or {"item_id", "profit"} - set(reader.fieldnames):
            raise DataError(f"{path}: expected header item_id,profit")
        for row in reader:
            try:
                values[int(row["item_id"])] = float(row["profit"])
            except ValueError as exc:
                raise DataError(f"{path}:{reader.line_num}: {exc}") from None
    n = item_count if item_count is not None else len(values)
    if sorted(values) != list(range(n)):
        raise DataError(f"{path}: profit ids must cover 0..{n - 1} exactly")
    profits = np.array([values[i] for i in range(n)])
    if profits.min() < RATING_MIN or profits.max() > RATING_MAX:
        raise DataError(f"{path}: profits must lie in [0, 5]")
    return profits


def init_consumer(store: RatingStore, consumer: int) -> ConsumerInit:
    """Initial experience counts of ``consumer`` from its dataset ratings.

    The threshold is the mean rating; ratings at or above it count as
    positive experiences (alpha), the rest as negative ones (beta).
    """
    ratings = store.ratings_of(consumer)
    if not ratings:
        raise DataError(f"consumer {consumer} has no initial ratings")
    values = np.fromiter(ratings.values(), dtype=np.float64, count=len(ratings))
    threshold = math.fsum(values) / len(values)
    # tolerance keeps an all-equal profile from losing ties to rounding
    alpha = int(np.count_nonzero(values >= threshold - 1e-12))
    return ConsumerInit(
        alpha0=float(alpha),
        beta0=float(len(values) - alpha),
        threshold0=threshold,
        rated_items=frozenset(ratings),
    )
