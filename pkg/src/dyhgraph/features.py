"""Per-target linker-reuse features and the linear baseline on top of them.

Each target is summarized by how heavily its linkers are shared across the
whole event log: total usage counts plus distinct-week counts per linker
type, computed either over all time or truncated at the target's creation
week.  A standardized logistic regression and permutation importance turn
those counts into a ranking baseline with per-feature attributions.
"""

from __future__ import annotations

import csv
import warnings
import zlib
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import expit

from .errors import ValidationError
from .graph import EntityRef, EventRecord
from .metrics import average_precision
from .validation import (
    as_float_matrix,
    as_label_vector,
    check_option,
    check_positive_int,
    check_same_length,
)

LINKER_TYPES = ("address", "ip", "phone", "email")
FEATURE_NAMES = tuple(f"relations_{t}" for t in LINKER_TYPES) + tuple(
    f"snapshots_{t}" for t in LINKER_TYPES
)
MODES = ("global", "incremental")

FEATURE_HEADER = ["target_id", "day", "week", *FEATURE_NAMES, "label"]
IMPORTANCE_HEADER = ["feature", "mean_ap_drop", "std"]


@dataclass(frozen=True)
class FeatureRow:
    """Creation time plus reuse counts of one target's busiest linkers."""

    day: int
    week: int
    relations_address: int
    relations_ip: int
    relations_phone: int
    relations_email: int
    snapshots_address: int
    snapshots_ip: int
    snapshots_phone: int
    snapshots_email: int

    def __post_init__(self):
        for t in LINKER_TYPES:
            rel = getattr(self, f"relations_{t}")
            snap = getattr(self, f"snapshots_{t}")
            if rel < 0 or snap < 0:
                raise ValidationError(f"negative count for linker type {t!r}")
            if snap > rel:
                raise ValidationError(
                    f"snapshots_{t}={snap} exceeds relations_{t}={rel}"
                )

    def counts(self) -> tuple[int, ...]:
        return tuple(getattr(self, name) for name in FEATURE_NAMES)

    def as_tuple(self) -> tuple[int, ...]:
        return (self.day, self.week, *self.counts())


def feature_matrix(rows: Sequence[FeatureRow]) -> np.ndarray:
    """Stack the count features into a float matrix, one row per target."""
    return np.array([row.counts() for row in rows], dtype=np.float64).reshape(
        len(rows), len(FEATURE_NAMES)
    )


def extract_features(
    events: Sequence[EventRecord],
    targets: Sequence[EntityRef],
    mode: str = "global",
) -> list[FeatureRow]:
    """Summarize each target by the reuse of its attached linkers.

    For every linker type the target's busiest linker is scored: its total
    event count and the number of distinct weeks it appears in.  Incremental
    mode sees only events up to the target's creation week, so the counts a
    model trains on were observable when the target appeared.  Targets with
    several linkers of one type keep the highest-count one.
    """
    check_option("mode", mode, MODES)
    events = list(events)
    creation: dict[EntityRef, tuple[int, int]] = {}
    linker_weeks: dict[EntityRef, list[int]] = {}
    # (target, linker) -> earliest week the pair appears, so the incremental
    # window can exclude linkers attached only after creation
    attach_week: dict[tuple[EntityRef, EntityRef], int] = {}
    attached: dict[EntityRef, dict[str, set[EntityRef]]] = {}
    for e in events:
        when = (e.week, e.day)
        if e.target not in creation or when < creation[e.target]:
            creation[e.target] = when
        linker_weeks.setdefault(e.linker, []).append(e.week)
        if e.linker.node_type in LINKER_TYPES:
            by_type = attached.setdefault(e.target, {})
            by_type.setdefault(e.linker.node_type, set()).add(e.linker)
            key = (e.target, e.linker)
            if key not in attach_week or e.week < attach_week[key]:
                attach_week[key] = e.week

    sorted_weeks = {
        linker: np.sort(np.asarray(weeks, dtype=np.int64))
        for linker, weeks in linker_weeks.items()
    }

    def windowed(linker: EntityRef, cap: int | None) -> tuple[int, int]:
        weeks = sorted_weeks[linker]
        if cap is not None:
            weeks = weeks[: np.searchsorted(weeks, cap, side="right")]
        return int(weeks.size), int(np.unique(weeks).size)

    rows: list[FeatureRow] = []
    multi = 0
    for target in targets:
        if target not in creation:
            raise ValidationError(f"target {target} has no events")
        week, day = creation[target][0], creation[target][1]
        cap = week if mode == "incremental" else None
        counts: dict[str, int] = {}
        for t in LINKER_TYPES:
            candidates = attached.get(target, {}).get(t, set())
            if cap is not None:
                candidates = {
                    l for l in candidates if attach_week[(target, l)] <= cap
                }
            if len(candidates) > 1:
                multi += 1
            best = (0, 0)
            # highest count wins; entity id breaks ties so record order
            # cannot change the outcome
            for linker in sorted(candidates, key=lambda l: l.entity_id):
                scored = windowed(linker, cap)
                if scored[0] > best[0]:
                    best = scored
            counts[f"relations_{t}"] = best[0]
            counts[f"snapshots_{t}"] = best[1]
        rows.append(FeatureRow(day=day, week=week, **counts))
    if multi:
        warnings.warn(
            f"{multi} target/type pairs had several linkers; kept the busiest",
            stacklevel=2,
        )
    return rows


@dataclass
class LinearModel:
    """Logistic regression over standardized feature columns.

    ``mean``/``std`` reproduce the training standardization at scoring time;
    zero-variance columns carry std 1 and weight 0 so full-width input stays
    valid.
    """

    feature_names: tuple[str, ...]
    weights: np.ndarray
    bias: float
    l2: float
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        if not (np.isfinite(self.weights).all() and np.isfinite(self.bias)):
            raise ValidationError("linear model parameters must be finite")

    def _standardize(self, rows) -> np.ndarray:
        x = rows if isinstance(rows, np.ndarray) else feature_matrix(rows)
        x = as_float_matrix(x, "rows")
        if x.shape[1] != len(self.feature_names):
            raise ValidationError(
                f"expected {len(self.feature_names)} feature columns, "
                f"got {x.shape[1]}"
            )
        return (x - self.mean) / self.std

    def decision_function(self, rows) -> np.ndarray:
        return self._standardize(rows) @ self.weights + self.bias

    def predict_proba(self, rows) -> np.ndarray:
        return expit(self.decision_function(rows))

    def predict(self, rows) -> np.ndarray:
        return (self.decision_function(rows) >= 0.0).astype(np.int64)


def fit_linear(
    rows,
    labels,
    l2: float = 1e-3,
    lr: float = 0.1,
    epochs: int = 500,
    feature_names: Sequence[str] | None = None,
) -> LinearModel:
    """Fit L2-regularized logistic regression by full-batch gradient descent.

    Features are standardized with the training mean and std before fitting,
    so the returned model scores raw count rows directly.  The bias is left
    unregularized.  Zero-variance columns are dropped with a warning; their
    standardized column is zero, which pins the weight at exactly 0.
    """
    x = rows if isinstance(rows, np.ndarray) else feature_matrix(rows)
    x = as_float_matrix(x, "rows")
    y = as_label_vector(labels, x.shape[0])
    if x.shape[0] == 0:
        raise ValidationError("cannot fit a model on zero rows")
    if l2 < 0 or lr <= 0:
        raise ValidationError(f"need l2 >= 0 and lr > 0, got l2={l2}, lr={lr}")
    epochs = check_positive_int("epochs", epochs)
    if feature_names is None:
        if x.shape[1] == len(FEATURE_NAMES):
            feature_names = FEATURE_NAMES
        else:
            feature_names = tuple(f"f{j}" for j in range(x.shape[1]))
    feature_names = tuple(feature_names)
    if len(feature_names) != x.shape[1]:
        raise ValidationError(
            f"{len(feature_names)} names for {x.shape[1]} columns"
        )

    mean = x.mean(axis=0)
    std = x.std(axis=0)
    dead = std == 0.0
    if dead.any():
        dropped = [n for n, d in zip(feature_names, dead) if d]
        warnings.warn(
            f"dropping zero-variance feature(s): {dropped}", stacklevel=2
        )
        std = np.where(dead, 1.0, std)
    xs = (x - mean) / std

    n = x.shape[0]
    w = np.zeros(x.shape[1])
    b = 0.0
    for _ in range(epochs):
        residual = (expit(xs @ w + b) - y) / n
        w -= lr * (xs.T @ residual + l2 * w)
        b -= lr * float(residual.sum())
    return LinearModel(feature_names, w, float(b), float(l2), mean, std)


@dataclass(frozen=True)
class FeatureImportance:
    feature: str
    mean_ap_drop: float
    std: float


def permutation_importance(
    model: LinearModel,
    rows,
    labels,
    repeats: int = 10,
    seed: int = 0,
) -> list[FeatureImportance]:
    """Mean AP drop when one feature column is shuffled, per feature.

    Each feature draws its permutations from a stream keyed by the feature's
    name, so a report never depends on where a column happens to sit.
    """
    repeats = check_positive_int("repeats", repeats)
    x = rows if isinstance(rows, np.ndarray) else feature_matrix(rows)
    x = as_float_matrix(x, "rows")
    y = as_label_vector(labels, x.shape[0])
    base = average_precision(model.decision_function(x), y)
    report = []
    for j, name in enumerate(model.feature_names):
        rng = np.random.default_rng([seed, zlib.crc32(name.encode())])
        drops = np.empty(repeats)
        for k in range(repeats):
            shuffled = x.copy()
            shuffled[:, j] = shuffled[rng.permutation(x.shape[0]), j]
            drops[k] = base - average_precision(
                model.decision_function(shuffled), y
            )
        report.append(FeatureImportance(name, float(drops.mean()), float(drops.std())))
    return report


def write_feature_rows_csv(path, targets, rows, labels) -> None:
    check_same_length("targets", targets, "rows", rows)
    check_same_length("targets", targets, "labels", labels)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(FEATURE_HEADER)
        for ref, row, label in zip(targets, rows, labels):
            writer.writerow([ref.entity_id, *row.as_tuple(), int(label)])


def read_feature_rows_csv(path) -> tuple[list[int], list[FeatureRow], np.ndarray]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValidationError(f"{path}: empty file") from None
        if header != FEATURE_HEADER:
            raise ValidationError(
                f"{path}: header {header!r} does not match {FEATURE_HEADER!r}"
            )
        ids, rows, labels = [], [], []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(FEATURE_HEADER):
                raise ValidationError(
                    f"{path}:{lineno}: expected {len(FEATURE_HEADER)} fields,"
                    f" got {len(row)}"
                )
            try:
                values = [int(v) for v in row]
            except ValueError as exc:
                raise ValidationError(f"{path}:{lineno}: {exc}") from None
            ids.append(values[0])
            rows.append(FeatureRow(*values[1:-1]))
            labels.append(values[-1])
    return ids, rows, np.asarray(labels, dtype=np.int64)


def write_importance_csv(path, report: Sequence[FeatureImportance]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(IMPORTANCE_HEADER)
        for item in report:
            writer.writerow([item.feature, repr(item.mean_ap_drop), repr(item.std)])
