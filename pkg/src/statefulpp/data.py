"""Dataset ingestion (GiveMeSomeCredit-style CSV) and a seeded synthetic stand-in."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from .distribution import Population

log = logging.getLogger(__name__)

REFERENCE_ROW_COUNT = 18357
INTERCEPT = "intercept"

GMSC_LABEL = "SeriousDlqin2yrs"
GMSC_FEATURES = (
    "RevolvingUtilizationOfUnsecuredLines",
    "age",
    "NumberOfTime30-59DaysPastDueNotWorse",
    "DebtRatio",
    "MonthlyIncome",
    "NumberOfOpenCreditLinesAndLoans",
    "NumberOfTimes90DaysLate",
    "NumberRealEstateLoansOrLines",
    "NumberOfTime60-89DaysPastDueNotWorse",
    "NumberOfDependents",
)


class DataError(ValueError):
    """Problem with an input file or its columns."""


@dataclass(frozen=True)
class DatasetSpec:
    path: str
    label_column: str = GMSC_LABEL
    feature_columns: tuple = GMSC_FEATURES
    strategic_columns: tuple = ()
    normalize: bool = True
    subsample: tuple | None = None  # (count, seed)
    negative_subsample: tuple | None = None  # (count, seed): keep all positives, sample negatives

    def __post_init__(self):
        feats = tuple(self.feature_columns)
        object.__setattr__(self, "feature_columns", feats)
        object.__setattr__(self, "strategic_columns", tuple(self.strategic_columns))
        if self.label_column in feats:
            raise DataError(f"label column {self.label_column!r} is also listed as a feature")
        extra = set(self.strategic_columns) - set(feats)
        if extra:
            raise DataError(f"strategic columns not among the features: {sorted(extra)}")
        if len(set(feats)) != len(feats):
            raise DataError("duplicate feature columns")


@dataclass
class Normalization:
    columns: list
    mean: np.ndarray
    std: np.ndarray


@dataclass
class DatasetInfo:
    columns: list
    strategic_indices: list
    raw_rows: int
    rows_after_na: int
    n: int
    filters: list = field(default_factory=list)
    normalization: Normalization | None = None
    source: str = ""

    @property
    def matches_reference_count(self) -> bool:
        return self.n == REFERENCE_ROW_COUNT

    def to_dict(self) -> dict:
        out = {
            "source": self.source,
            "columns": list(self.columns),
            "strategic_indices": list(self.strategic_indices),
            "raw_rows": self.raw_rows,
            "rows_after_na": self.rows_after_na,
            "n": self.n,
            "filters": list(self.filters),
            "reference_row_count": REFERENCE_ROW_COUNT,
            "matches_reference_row_count": self.matches_reference_count,
        }
        if self.normalization is not None:
            out["normalization"] = {
                "columns": list(self.normalization.columns),
                "mean": [float(v) for v in self.normalization.mean],
                "std": [float(v) for v in self.normalization.std],
            }
        return out


def _map_labels(raw: np.ndarray, column: str) -> np.ndarray:
    values = set(np.unique(raw).tolist())
    if values <= {0.0, 1.0}:
        return np.where(raw == 1.0, 1.0, -1.0)
    if values <= {-1.0, 1.0}:
        return raw.astype(float)
    raise DataError(f"label column {column!r} must hold 0/1 values, found {sorted(values)[:5]}")


def zscore(X: np.ndarray, columns, skip_last: bool = True) -> tuple[np.ndarray, Normalization]:
    """Per-column z-scoring with population standard deviation.

    With ``skip_last`` the last column (the intercept) is left untouched.
    """
    X = np.asarray(X, dtype=float)
    cols = slice(0, X.shape[1] - 1) if skip_last else slice(None)
    body = X[:, cols]
    mean = body.mean(axis=0)
    std = body.std(axis=0)
    bad = [c for c, s in zip(list(columns)[cols], std) if s == 0]
    if bad:
        raise DataError(f"cannot normalize zero-variance column(s): {bad}")
    out = X.copy()
    out[:, cols] = (body - mean) / std
    return out, Normalization(list(columns)[cols], mean, std)


def denormalize(X: np.ndarray, norm: Normalization) -> np.ndarray:
    """Undo :func:`zscore` on the normalized leading columns."""
    X = np.array(X, dtype=float)
    k = len(norm.columns)
    X[:, :k] = X[:, :k] * norm.std + norm.mean
    return X


def load_dataset(spec: DatasetSpec) -> tuple[Population, DatasetInfo]:
    """Read a CSV into a uniform population with an intercept column appended last.

    Rows with missing values in the declared columns are dropped; labels 0/1
    become -1/+1 (1 = the positive, financially distressed class).
    """
    path = Path(spec.path)
    if not path.exists():
        raise DataError(f"{path}: file not found")
    try:
        frame = pd.read_csv(path, float_precision="round_trip")
    except (pd.errors.ParserError, UnicodeDecodeError) as exc:
        raise DataError(f"{path}: cannot parse CSV ({exc})") from exc
    wanted = [spec.label_column, *spec.feature_columns]
    missing = [c for c in wanted if c not in frame.columns]
    if missing:
        raise DataError(f"{path}: missing column(s) {missing}")
    raw_rows = len(frame)
    frame = frame[wanted].dropna()
    rows_after_na = len(frame)
    if rows_after_na == 0:
        raise DataError(f"{path}: no rows left after dropping missing values")
    try:
        values = frame.to_numpy(dtype=float)
    except ValueError as exc:
        raise DataError(f"{path}: non-numeric values in declared columns ({exc})") from exc

    filters = [f"drop rows with missing values in declared columns ({raw_rows} -> {rows_after_na})"]
    labels = _map_labels(values[:, 0], spec.label_column)
    keep = np.arange(rows_after_na)
    if spec.negative_subsample is not None:
        count, seed = spec.negative_subsample
        neg = np.flatnonzero(labels < 0)
        if count > neg.size:
            raise DataError(f"negative_subsample count {count} exceeds {neg.size} negative rows")
        chosen = np.random.default_rng(seed).permutation(neg)[:count]
        keep = np.sort(np.concatenate([np.flatnonzero(labels > 0), chosen]))
        filters.append(f"keep all positives, {count} seeded negatives (seed {seed}) -> {keep.size}")
    if spec.subsample is not None:
        count, seed = spec.subsample
        if count > keep.size:
            raise DataError(f"subsample count {count} exceeds {keep.size} available rows")
        keep = np.sort(keep[np.random.default_rng(seed).permutation(keep.size)[:count]])
        filters.append(f"seeded subsample of {count} rows (seed {seed})")

    X = np.column_stack([values[keep, 1:], np.ones(keep.size)])
    columns = [*spec.feature_columns, INTERCEPT]
    norm = None
    if spec.normalize:
        X, norm = zscore(X, columns)
    pop = Population.uniform(X, labels[keep])
    info = DatasetInfo(
        columns=columns,
        strategic_indices=[columns.index(c) for c in spec.strategic_columns],
        raw_rows=raw_rows,
        rows_after_na=rows_after_na,
        n=pop.n,
        filters=filters,
        normalization=norm,
        source=str(path),
    )
    if info.n != REFERENCE_ROW_COUNT:
        log.info("loaded %d rows (reference dataset size is %d)", info.n, REFERENCE_ROW_COUNT)
    return pop, info


def generate_synthetic(n: int, p: int, seed: int = 0, class_balance: float = 0.5,
                       separation: float = 1.0) -> Population:
    """Gaussian class-conditional features plus an intercept column (``p + 1`` columns).

    Positives are centred at ``+separation/2`` and negatives at
    ``-separation/2`` in every raw coordinate, with unit variance.
    """
    if n < 2 or p < 1:
        raise ValueError(f"need n >= 2 and p >= 1, got n={n}, p={p}")
    if not 0.0 < class_balance < 1.0:
        raise ValueError("class_balance must lie strictly between 0 and 1")
    rng = np.random.default_rng(seed)
    labels = np.where(rng.random(n) < class_balance, 1.0, -1.0)
    X = rng.standard_normal((n, p)) + 0.5 * separation * labels[:, None]
    return Population.uniform(np.column_stack([X, np.ones(n)]), labels)


def synthetic_columns(p: int) -> list[str]:
    return [f"x{i}" for i in range(p)] + [INTERCEPT]


def write_population(path, pop: Population, columns=None) -> None:
    """Canonical CSV: index, weight, label, then features, at full precision."""
    columns = list(columns) if columns is not None else [f"f{i}" for i in range(pop.p)]
    if len(columns) != pop.p:
        raise DataError(f"{len(columns)} column names for {pop.p} features")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["index", "weight", "label", *columns])
        for i in range(pop.n):
            writer.writerow([int(pop.index[i]), repr(float(pop.weights[i])), repr(float(pop.labels[i])),
                             *(repr(float(v)) for v in pop.features[i])])


def read_population(path) -> tuple[Population, list[str]]:
    """Inverse of :func:`write_population`."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or header[:3] != ["index", "weight", "label"]:
            raise DataError(f"{path}: not a canonical population file")
        rows = [r for r in reader if r]
    if not rows:
        raise DataError(f"{path}: no rows")
    idx = np.array([int(r[0]) for r in rows])
    w = np.array([float(r[1]) for r in rows])
    y = np.array([float(r[2]) for r in rows])
    X = np.array([[float(v) for v in r[3:]] for r in rows])
    return Population(X, y, w, idx), header[3:]
