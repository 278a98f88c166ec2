"""Interaction-event ingestion and exposure-series construction.

An interaction event is one (user, item, group, rating, timestamp) record.
Per user and group, events ordered by timestamp (input order breaking ties)
become an exposure series: binary engagement e(n) indexed by the sequential
interaction count n = 1..L.  Per-user analysis smooths the binary series
with a truncated symmetric moving average; population analysis averages the
raw binary values into weighted exposure bins.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

__all__ = [
    "SchemaError",
    "InteractionEvent",
    "IngestReport",
    "ExposureSeries",
    "SmoothedSeries",
    "BinnedCurve",
    "ingest_events",
    "build_exposure_series",
    "moving_average",
    "smooth_series",
    "MovingAverageSmoother",
    "aggregate_curve",
    "series_to_csv",
    "series_from_csv",
    "events_to_csv",
]

EVENT_COLUMNS = ("user_id", "item_id", "group", "rating", "timestamp")
SERIES_COLUMNS = ("user_id", "group", "n", "e", "raw_rating")


class SchemaError(ValueError):
    """Input file header does not match the declared column mapping."""


@dataclass(frozen=True)
class InteractionEvent:
    user_id: str
    item_id: str
    group: str
    rating: float
    timestamp: int | None = None


@dataclass
class IngestReport:
    rows_total: int = 0
    accepted: int = 0
    rejected_rating: int = 0
    malformed: int = 0
    n_users: int = 0
    n_groups: int = 0

    @property
    def rejected(self) -> int:
        return self.rejected_rating + self.malformed

    def to_dict(self) -> dict:
        return {
            "rows_total": self.rows_total,
            "accepted": self.accepted,
            "rejected": self.rejected,
            "rejected_rating": self.rejected_rating,
            "malformed": self.malformed,
            "n_users": self.n_users,
            "n_groups": self.n_groups,
        }


@dataclass
class ExposureSeries:
    """One user's ordered binary engagement within a group.

    ``engagement[i]`` is e(n) for exposure n = i + 1; indices are contiguous
    by construction.  Raw ratings ride along for continuous-engagement use.
    """

    user_id: str
    group: str
    engagement: np.ndarray
    raw_ratings: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self) -> None:
        self.engagement = np.asarray(self.engagement, dtype=np.int8)
        if self.engagement.size < 1:
            raise ValueError("exposure series must have length >= 1")
        if self.raw_ratings is None:
            self.raw_ratings = self.engagement.astype(float)
        else:
            self.raw_ratings = np.asarray(self.raw_ratings, dtype=float)
            if self.raw_ratings.shape != self.engagement.shape:
                raise ValueError("raw_ratings must parallel engagement")

    def __len__(self) -> int:
        return int(self.engagement.size)

    @property
    def exposures(self) -> np.ndarray:
        return np.arange(1, len(self) + 1)


@dataclass
class SmoothedSeries:
    user_id: str
    group: str
    values: np.ndarray

    def __len__(self) -> int:
        return int(self.values.size)

    @property
    def exposures(self) -> np.ndarray:
        return np.arange(1, len(self) + 1)


@dataclass
class BinnedCurve:
    """Population engagement curve: weighted bin averages per exposure count.

    ``counts[i]`` is the number of users still contributing at
    ``exposures[i]`` (the survivor count), which doubles as the fit weight.
    """

    exposures: np.ndarray
    means: np.ndarray
    counts: np.ndarray
    group: str = "all"

    def __post_init__(self) -> None:
        self.exposures = np.asarray(self.exposures, dtype=int)
        self.means = np.asarray(self.means, dtype=float)
        self.counts = np.asarray(self.counts, dtype=int)
        if not (len(self.exposures) == len(self.means) == len(self.counts)):
            raise ValueError("bin arrays must have equal length")
        if np.any(np.diff(self.exposures) <= 0):
            raise ValueError("bin exposures must be strictly increasing")

    def __len__(self) -> int:
        return int(self.exposures.size)


def _open_source(source) -> io.TextIOBase:
    if isinstance(source, (str, Path)):
        return open(source, "r", encoding="utf-8", newline="")
    if isinstance(source, bytes):
        return io.StringIO(source.decode("utf-8"))
    return source


def ingest_events(
    source,
    schema: Mapping[str, str] | None = None,
) -> tuple[list[InteractionEvent], IngestReport]:
    """Parse the event CSV into interaction events, single pass.

    ``schema`` maps the logical names (user_id, item_id, group, rating,
    timestamp) to the file's column headers; default is the identity
    mapping.  A missing header or unmappable column is a hard
    :class:`SchemaError`; malformed rows and ratings outside [0, 5] are
    skipped and counted.  Duplicate rows are kept: events are occurrences,
    not keys.
    """
    mapping = dict(zip(EVENT_COLUMNS, EVENT_COLUMNS))
    if schema:
        unknown = set(schema) - set(EVENT_COLUMNS)
        if unknown:
            raise SchemaError(f"unknown schema keys: {sorted(unknown)}")
        mapping.update(schema)

    report = IngestReport()
    events: list[InteractionEvent] = []
    users: set[str] = set()
    groups: set[str] = set()

    stream = _open_source(source)
    close = isinstance(source, (str, Path, bytes))
    try:
        reader = csv.DictReader(stream)
        if reader.fieldnames is None:
            raise SchemaError("input has no header row")
        missing = [col for col in mapping.values() if col not in reader.fieldnames]
        if missing:
            raise SchemaError(f"missing columns: {missing}")
        for row in reader:
            report.rows_total += 1
            try:
                rating = float(row[mapping["rating"]])
                raw_ts = (row[mapping["timestamp"]] or "").strip()
                timestamp = int(raw_ts) if raw_ts else None
                user = row[mapping["user_id"]]
                item = row[mapping["item_id"]]
                group = row[mapping["group"]]
                if user is None or item is None or group is None or user == "":
                    raise ValueError("empty key field")
            except (TypeError, ValueError, KeyError):
                report.malformed += 1
                continue
            if not 0.0 <= rating <= 5.0:
                report.rejected_rating += 1
                continue
            events.append(InteractionEvent(user, item, group, rating, timestamp))
            users.add(user)
            groups.add(group)
            report.accepted += 1
    finally:
        if close:
            stream.close()

    report.n_users = len(users)
    report.n_groups = len(groups)
    return events, report


def build_exposure_series(
    events: Iterable[InteractionEvent],
    group: str | None = None,
    threshold: float = 4.0,
) -> list[ExposureSeries]:
    """Turn events into per-(user, group) exposure series.

    Events are ordered by timestamp with input order breaking ties (missing
    timestamps sort as 0); e(n) = 1 iff rating >= threshold.  ``group``
    filters to one group; None keeps all.  Output is sorted by
    (user_id, group) for deterministic downstream iteration.
    """
    if not 0.0 < threshold <= 5.0:
        raise ValueError(f"threshold must be in (0, 5], got {threshold}")
    buckets: dict[tuple[str, str], list[tuple[int, int, float]]] = {}
    for order, ev in enumerate(events):
        if group is not None and ev.group != group:
            continue
        ts = ev.timestamp if ev.timestamp is not None else 0
        buckets.setdefault((ev.user_id, ev.group), []).append((ts, order, ev.rating))

    out: list[ExposureSeries] = []
    for (user, grp), rows in sorted(buckets.items()):
        rows.sort(key=lambda r: (r[0], r[1]))
        ratings = np.array([r[2] for r in rows], dtype=float)
        out.append(
            ExposureSeries(
                user_id=user,
                group=grp,
                engagement=(ratings >= threshold).astype(np.int8),
                raw_ratings=ratings,
            )
        )
    return out


def moving_average(values, window: int = 5) -> np.ndarray:
    """Centered moving average with truncated windows at the edges.

    Output keeps the input length: position i averages indices
    [i - w, i + w] clipped to the series, w = (window - 1) / 2.  Truncation
    (rather than padding) avoids biasing the early exposures where peaks
    live.
    """
    if window < 1 or window % 2 == 0:
        raise ValueError(f"window must be a positive odd integer, got {window}")
    x = np.asarray(values, dtype=float)
    if window == 1:
        return x.copy()
    w = (window - 1) // 2
    csum = np.concatenate([[0.0], np.cumsum(x)])
    idx = np.arange(len(x))
    lo = np.maximum(idx - w, 0)
    hi = np.minimum(idx + w, len(x) - 1)
    return (csum[hi + 1] - csum[lo]) / (hi - lo + 1)


def smooth_series(series: ExposureSeries, window: int = 5) -> SmoothedSeries:
    """Apply the truncated moving average to a series' binary engagement."""
    return SmoothedSeries(
        user_id=series.user_id,
        group=series.group,
        values=moving_average(series.engagement, window),
    )


class MovingAverageSmoother(TransformerMixin, BaseEstimator):
    """Stateless transformer form of :func:`moving_average` (1-D input)."""

    def __init__(self, window: int = 5):
        self.window = window

    def fit(self, X, y=None):
        if self.window < 1 or self.window % 2 == 0:
            raise ValueError(f"window must be a positive odd integer, got {self.window}")
        return self

    def transform(self, X):
        return moving_average(np.asarray(X, dtype=float).ravel(), self.window)


def aggregate_curve(
    series: Sequence[ExposureSeries],
    max_exposure: int | None = None,
    min_bin_count: int = 1,
    group: str = "all",
) -> BinnedCurve:
    """Population-average engagement per exposure count (bin width 1).

    The bin at n averages e_u(n) over every user whose series reaches n, so
    the bin count is exactly the survivor count at that exposure.  Bins with
    fewer than ``min_bin_count`` contributors are dropped; if nothing
    survives the filter the population cannot support an aggregate fit.
    """
    if min_bin_count < 1:
        raise ValueError("min_bin_count must be >= 1")
    series = list(series)
    if not series:
        raise ValueError("insufficient population coverage: no series")
    longest = max(len(s) for s in series)
    limit = min(longest, max_exposure) if max_exposure else longest

    sums = np.zeros(limit)
    counts = np.zeros(limit, dtype=int)
    for s in series:
        upto = min(len(s), limit)
        sums[:upto] += s.engagement[:upto]
        counts[:upto] += 1

    keep = counts >= min_bin_count
    if not np.any(keep):
        raise ValueError("insufficient population coverage")
    exposures = np.arange(1, limit + 1)[keep]
    with np.errstate(invalid="ignore"):
        means = sums[keep] / counts[keep]
    return BinnedCurve(exposures=exposures, means=means, counts=counts[keep], group=group)


def series_to_csv(series: Sequence[ExposureSeries], path) -> None:
    """Write series in the exposure-series CSV layout (one row per exposure)."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(SERIES_COLUMNS)
        for s in series:
            for i in range(len(s)):
                writer.writerow(
                    [s.user_id, s.group, i + 1, int(s.engagement[i]), f"{s.raw_ratings[i]:g}"]
                )


def series_from_csv(source) -> list[ExposureSeries]:
    """Read the exposure-series CSV back into series objects.

    Rows must be grouped per (user, group) with n contiguous from 1; this is
    validated because every downstream statistic assumes it.
    """
    stream = _open_source(source)
    close = isinstance(source, (str, Path, bytes))
    try:
        reader = csv.DictReader(stream)
        if reader.fieldnames is None or set(SERIES_COLUMNS) - set(reader.fieldnames):
            raise SchemaError(f"series CSV requires columns {SERIES_COLUMNS}")
        rows: dict[tuple[str, str], list[tuple[int, int, float]]] = {}
        for row in reader:
            key = (row["user_id"], row["group"])
            rows.setdefault(key, []).append(
                (int(row["n"]), int(row["e"]), float(row["raw_rating"]))
            )
    finally:
        if close:
            stream.close()

    out = []
    for (user, grp), triples in sorted(rows.items()):
        triples.sort(key=lambda t: t[0])
        ns = [t[0] for t in triples]
        if ns != list(range(1, len(ns) + 1)):
            raise SchemaError(f"series ({user}, {grp}) has non-contiguous exposures")
        out.append(
            ExposureSeries(
                user_id=user,
                group=grp,
                engagement=np.array([t[1] for t in triples], dtype=np.int8),
                raw_ratings=np.array([t[2] for t in triples], dtype=float),
            )
        )
    return out


def events_to_csv(events: Iterable[InteractionEvent], path) -> None:
    """Write events in the ingestion CSV layout."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(EVENT_COLUMNS)
        for ev in events:
            writer.writerow(
                [
                    ev.user_id,
                    ev.item_id,
                    ev.group,
                    f"{ev.rating:g}",
                    "" if ev.timestamp is None else ev.timestamp,
                ]
            )
