"""Synthetic event logs, chronological splits, and CSV round-trips.

The generator plants a weekly fraud-rate schedule (labels drawn per creation
week), a structural pattern (risky targets preferentially attach to a small
"hot" subset of one linker pool), a timing pattern (risky targets register
late in the week), and a feature signal (class-conditional Gaussian with a
fixed mean shift).  Everything is a pure function of the configuration,
including its seed, so regenerated CSVs are byte-identical.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, ValidationError
from .graph import EntityRef, EventRecord, LabelSet, UnrolledGraph
from .validation import check_option, check_positive_int, check_unit_interval

__all__ = [
    "UNEVEN_RATES",
    "PRESETS",
    "SPLIT_POLICIES",
    "GeneratorConfig",
    "Split",
    "preset_config",
    "generate",
    "chronological_split",
    "write_events_csv",
    "read_events_csv",
    "write_labels_csv",
    "read_labels_csv",
    "write_features_csv",
    "read_features_csv",
    "write_dataset",
    "read_dataset",
]

# weekly positive-label probabilities: band 0.40-0.65, peaks at weeks 2 and 8
UNEVEN_RATES = (
    0.50, 0.65, 0.55, 0.48, 0.42, 0.40, 0.45, 0.65, 0.52, 0.45, 0.42, 0.40, 0.45,
)

PRESETS = ("uneven", "even", "imbalanced-txn", "imbalanced-account")

SPLIT_POLICIES = ("chronological", "random_trainval")


@dataclass
class GeneratorConfig:
    """Knobs for one synthetic dataset.

    ``planted_strength`` is the probability that a positive target draws its
    ``planted_relation`` linker from the hot subset of that pool;
    ``weekend_bias`` is the probability that a positive target's creation
    lands on weekday 6 or 7 instead of a uniform weekday (registration-bot
    rhythm; the only signal carried by event timing rather than structure);
    ``reuse_rate_pos``/``reuse_rate_neg`` are per-week probabilities that a
    target re-touches one of its linkers in each week after creation, so
    risky infrastructure accumulates multi-week activity;
    ``feature_draws > 1`` averages several Gaussian draws per target, the way
    account features summarize the account's transactions.
    """

    T: int = 13
    n_targets: int = 1000
    target_type: str = "account"
    linker_pools: dict[str, int] = field(
        default_factory=lambda: {"address": 250, "ip": 250, "phone": 250, "email": 250}
    )
    fraud_rate: tuple[float, ...] = UNEVEN_RATES
    planted_strength: float = 0.7
    hot_fraction: float = 0.05
    planted_relation: str = "ip"
    weekend_bias: float = 0.0
    reuse_rate_pos: float = 0.0
    reuse_rate_neg: float = 0.0
    feature_dim: int = 264
    separation: float = 1.5
    with_risk_levels: bool = True
    feature_draws: int = 1
    seed: int = 0

    def __post_init__(self):
        self.T = check_positive_int("T", self.T)
        self.n_targets = check_positive_int("n_targets", self.n_targets)
        self.feature_dim = check_positive_int("feature_dim", self.feature_dim)
        self.feature_draws = check_positive_int("feature_draws", self.feature_draws)
        if not self.linker_pools:
            raise ConfigurationError("linker_pools must name at least one pool")
        for name, size in self.linker_pools.items():
            check_positive_int(f"linker pool {name!r}", size)
        if len(self.fraud_rate) != self.T:
            raise ConfigurationError(
                f"fraud_rate has {len(self.fraud_rate)} weeks for T={self.T}"
            )
        for week, rate in enumerate(self.fraud_rate, start=1):
            check_unit_interval(f"fraud_rate[week {week}]", rate)
        check_unit_interval("planted_strength", self.planted_strength)
        check_unit_interval("hot_fraction", self.hot_fraction)
        check_unit_interval("weekend_bias", self.weekend_bias)
        check_unit_interval("reuse_rate_pos", self.reuse_rate_pos)
        check_unit_interval("reuse_rate_neg", self.reuse_rate_neg)
        if self.planted_relation not in self.linker_pools:
            raise ConfigurationError(
                f"planted_relation {self.planted_relation!r} has no linker pool"
            )
        if self.separation < 0:
            raise ConfigurationError(f"separation must be >= 0, got {self.separation}")


def _resample(rates: tuple[float, ...], T: int) -> tuple[float, ...]:
    """Stretch or squeeze a weekly schedule to ``T`` weeks by interpolation."""
    if T == len(rates):
        return rates
    source = np.linspace(0.0, 1.0, len(rates))
    wanted = np.linspace(0.0, 1.0, T)
    return tuple(float(v) for v in np.interp(wanted, source, rates))


def preset_config(name: str, n_targets: int = 1000, T: int = 13, seed: int = 0) -> GeneratorConfig:
    """Named dataset shapes; pools scale with the target count."""
    check_option("preset", name, PRESETS)
    pool = max(4, n_targets // 4)
    if name in ("uneven", "even"):
        rates = _resample(UNEVEN_RATES, T) if name == "uneven" else (0.5,) * T
        return GeneratorConfig(
            T=T,
            n_targets=n_targets,
            target_type="account",
            linker_pools={"address": pool, "ip": pool, "phone": pool, "email": pool},
            fraud_rate=rates,
            planted_strength=0.8,
            weekend_bias=0.6 if name == "uneven" else 0.0,
            reuse_rate_pos=0.3 if name == "uneven" else 0.0,
            reuse_rate_neg=0.05 if name == "uneven" else 0.0,
            feature_dim=264,
            with_risk_levels=True,
            seed=seed,
        )
    if name == "imbalanced-txn":
        return GeneratorConfig(
            T=T,
            n_targets=n_targets,
            target_type="txn",
            linker_pools={"buyer": pool, "seller": max(4, pool // 2), "ip": max(4, pool // 4)},
            fraud_rate=(0.015,) * T,
            feature_dim=114,
            with_risk_levels=False,
            seed=seed,
        )
    return GeneratorConfig(
        T=T,
        n_targets=n_targets,
        target_type="account",
        linker_pools={"ip": pool, "email": pool, "address": max(4, pool // 2)},
        fraud_rate=(0.035,) * T,
        feature_dim=114,
        with_risk_levels=False,
        feature_draws=3,
        seed=seed,
    )


def generate(config: GeneratorConfig):
    """Draw one dataset: (events, labels, features).

    ``features`` is the same mapping carried inside ``labels``; it is returned
    separately for callers that only want the table.
    """
    rng = np.random.default_rng(config.seed)
    n, T = config.n_targets, config.T
    weeks = rng.integers(1, T + 1, size=n)
    rates = np.asarray(config.fraud_rate)[weeks - 1]
    positive = rng.random(n) < rates
    weekdays = rng.integers(1, 8, size=n)
    shifted = positive & (rng.random(n) < config.weekend_bias)
    weekdays[shifted] = rng.integers(6, 8, size=int(shifted.sum()))
    days = 7 * (weeks - 1) + weekdays

    pool_names = sorted(config.linker_pools)
    hot_counts = {
        name: max(1, int(round(config.hot_fraction * size)))
        for name, size in config.linker_pools.items()
    }

    events: list[EventRecord] = []
    binary: dict[EntityRef, int] = {}
    risk: dict[EntityRef, int] = {}
    features: dict[EntityRef, np.ndarray] = {}
    shift = config.separation / np.sqrt(config.feature_dim)
    for i in range(n):
        target = EntityRef(config.target_type, i)
        y = int(positive[i])
        binary[target] = y
        if config.with_risk_levels:
            risk[target] = int(rng.integers(1, 4)) if y else 0
        attached: dict[str, EntityRef] = {}
        for name in pool_names:
            size = config.linker_pools[name]
            planted = (
                y == 1
                and name == config.planted_relation
                and rng.random() < config.planted_strength
            )
            linker_id = int(rng.integers(0, hot_counts[name] if planted else size))
            attached[name] = EntityRef(name, linker_id)
            events.append(
                EventRecord(target, attached[name], name, int(weeks[i]), int(days[i]))
            )
        # follow-up activity: risky targets keep exercising the planted linker
        # in later weeks, organic targets only occasionally re-touch anything
        reuse_rate = config.reuse_rate_pos if y else config.reuse_rate_neg
        if reuse_rate:
            for week in range(int(weeks[i]) + 1, T + 1):
                if rng.random() >= reuse_rate:
                    continue
                name = (
                    config.planted_relation
                    if y
                    else pool_names[int(rng.integers(len(pool_names)))]
                )
                weekday = (
                    int(rng.integers(6, 8))
                    if y and rng.random() < config.weekend_bias
                    else int(rng.integers(1, 8))
                )
                events.append(
                    EventRecord(
                        target, attached[name], name, week, 7 * (week - 1) + weekday
                    )
                )
        draws = rng.standard_normal((config.feature_draws, config.feature_dim))
        features[target] = draws.mean(axis=0) + y * shift

    labels = LabelSet(
        binary=binary,
        risk_level=risk if config.with_risk_levels else None,
        features=features,
        feature_dim=config.feature_dim,
    )
    return events, labels, features


@dataclass
class Split:
    """Positions into the caller's target list, pairwise disjoint."""

    train: np.ndarray
    val: np.ndarray
    test: np.ndarray
    policy: str


def chronological_split(
    entities,
    weeks,
    days,
    ratios: tuple[float, float, float] = (0.7, 0.1, 0.2),
    policy: str = "chronological",
    seed: int = 0,
) -> Split:
    """Hold out the latest targets, then divide the rest into train/val.

    ``random_trainval`` shuffles only the train/val membership; the test set
    is always the chronological tail.
    """
    check_option("policy", policy, SPLIT_POLICIES)
    entities = list(entities)
    n = len(entities)
    if n < 3:
        raise ValidationError(f"need at least 3 targets to split, got {n}")
    if len(weeks) != n or len(days) != n:
        raise ValidationError("entities, weeks and days must have equal lengths")
    if any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigurationError(f"ratios must be non-negative and sum to 1, got {ratios}")
    order = sorted(range(n), key=lambda i: (weeks[i], days[i], entities[i]))
    n_test = int(round(ratios[2] * n))
    n_val = int(round(ratios[1] * n))
    n_train = n - n_val - n_test
    if n_train < 1:
        raise ValidationError(f"ratios {ratios} leave no training targets for n={n}")
    ordered = np.array(order, dtype=np.int64)
    test = ordered[n - n_test :] if n_test else np.empty(0, dtype=np.int64)
    trainval = ordered[: n - n_test]
    if policy == "random_trainval":
        perm = np.random.default_rng(seed).permutation(len(trainval))
        trainval = trainval[perm]
    return Split(
        train=np.sort(trainval[:n_train]),
        val=np.sort(trainval[n_train:]),
        test=np.sort(test),
        policy=policy,
    )


# ---------------------------------------------------------------------------
# CSV round-trips.  Floats are written with repr so reading recovers the exact
# double; all files use \n line endings regardless of platform.

EVENT_HEADER = ["target_type", "target_id", "linker_type", "linker_id", "relation", "week", "day"]
LABEL_HEADER = ["target_type", "target_id", "binary_label", "risk_level"]


def _open_writer(path):
    fh = open(path, "w", newline="")
    return fh, csv.writer(fh, lineterminator="\n")


def _read_rows(path, expected_header: list[str], width: int | None = None):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValidationError(f"{path}: empty file") from None
        if expected_header is not None and header != expected_header:
            raise ValidationError(
                f"{path}: header {header!r} does not match {expected_header!r}"
            )
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if width is not None and len(row) != width:
                raise ValidationError(
                    f"{path}:{lineno}: expected {width} fields, got {len(row)}"
                )
            rows.append((lineno, row))
    return header, rows


def write_events_csv(path, events) -> None:
    fh, writer = _open_writer(path)
    with fh:
        writer.writerow(EVENT_HEADER)
        for e in events:
            writer.writerow(
                [
                    e.target.node_type,
                    e.target.entity_id,
                    e.linker.node_type,
                    e.linker.entity_id,
                    e.relation,
                    e.week,
                    e.day,
                ]
            )


def read_events_csv(path) -> list[EventRecord]:
    _, rows = _read_rows(path, EVENT_HEADER, width=7)
    events = []
    for lineno, row in rows:
        try:
            events.append(
                EventRecord(
                    EntityRef(row[0], int(row[1])),
                    EntityRef(row[2], int(row[3])),
                    row[4],
                    int(row[5]),
                    int(row[6]),
                )
            )
        except ValueError as exc:
            raise ValidationError(f"{path}:{lineno}: {exc}") from None
    return events


def write_labels_csv(path, labels: LabelSet) -> None:
    fh, writer = _open_writer(path)
    with fh:
        writer.writerow(LABEL_HEADER)
        for ent in sorted(labels.binary):
            risk = "" if labels.risk_level is None else labels.risk_level.get(ent, 0)
            writer.writerow([ent.node_type, ent.entity_id, labels.binary[ent], risk])


def read_labels_csv(path) -> LabelSet:
    _, rows = _read_rows(path, LABEL_HEADER, width=4)
    binary: dict[EntityRef, int] = {}
    risk: dict[EntityRef, int] = {}
    blank_risk = 0
    for lineno, row in rows:
        try:
            ent = EntityRef(row[0], int(row[1]))
            binary[ent] = int(row[2])
            if row[3] == "":
                blank_risk += 1
            else:
                risk[ent] = int(row[3])
        except ValueError as exc:
            raise ValidationError(f"{path}:{lineno}: {exc}") from None
    if blank_risk and risk:
        raise ValidationError(f"{path}: risk_level set on some rows but blank on others")
    return LabelSet(binary=binary, risk_level=risk if risk else None)


def write_features_csv(path, features: dict[EntityRef, np.ndarray]) -> None:
    dims = {np.asarray(v).shape[0] for v in features.values()}
    if len(dims) > 1:
        raise ValidationError(f"feature vectors have mixed lengths: {sorted(dims)}")
    dim = dims.pop() if dims else 0
    fh, writer = _open_writer(path)
    with fh:
        writer.writerow(["target_type", "target_id"] + [f"f{i}" for i in range(dim)])
        for ent in sorted(features):
            writer.writerow(
                [ent.node_type, ent.entity_id]
                + [repr(float(v)) for v in np.asarray(features[ent])]
            )


def read_features_csv(path) -> dict[EntityRef, np.ndarray]:
    header, rows = _read_rows(path, None)
    if header[:2] != ["target_type", "target_id"]:
        raise ValidationError(f"{path}: header must start with target_type,target_id")
    width = len(header)
    features: dict[EntityRef, np.ndarray] = {}
    for lineno, row in rows:
        if len(row) != width:
            raise ValidationError(f"{path}:{lineno}: expected {width} fields, got {len(row)}")
        try:
            ent = EntityRef(row[0], int(row[1]))
            features[ent] = np.array([float(v) for v in row[2:]], dtype=np.float64)
        except ValueError as exc:
            raise ValidationError(f"{path}:{lineno}: {exc}") from None
    return features


def write_dataset(out_dir, events, labels: LabelSet) -> dict[str, str]:
    """Write events.csv, labels.csv and (when present) features.csv."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"events": str(out / "events.csv"), "labels": str(out / "labels.csv")}
    write_events_csv(paths["events"], events)
    write_labels_csv(paths["labels"], labels)
    if labels.features:
        paths["features"] = str(out / "features.csv")
        write_features_csv(paths["features"], labels.features)
    return paths


def read_dataset(data_dir, T: int | None = None):
    """Read a dataset directory back into (events, labels, T).

    ``T`` defaults to the latest event week; pass it explicitly when trailing
    empty weeks matter.
    """
    data_dir = Path(data_dir)
    events = read_events_csv(data_dir / "events.csv")
    labels = read_labels_csv(data_dir / "labels.csv")
    feature_path = data_dir / "features.csv"
    if feature_path.exists():
        features = read_features_csv(feature_path)
        labels = LabelSet(
            binary=labels.binary, risk_level=labels.risk_level, features=features
        )
    if T is None:
        if not events:
            raise ValidationError(f"{data_dir}: no events and no explicit T")
        T = max(e.week for e in events)
    return events, labels, T
