"""Dataset ingestion, train/test splitting, and multi-source partitioning.

A :class:`Dataset` is an immutable table of feature vectors with real-valued
labels. :func:`partition` splits a training set into K disjoint shards under
one of three schemes: equally sized, unequally sized (first shard roughly
twice the others), or non-IID (first shard oversamples high-label rows).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

SCHEMES = ("equal", "unequal", "non_iid")


class CsvFormatError(ValueError):
    """Malformed cell or row in an input CSV, with its location."""


@dataclass(frozen=True)
class Example:
    """One labeled example: a feature vector and its real-valued label."""

    features: np.ndarray
    label: float


class Dataset:
    """Ordered collection of examples sharing a feature count.

    Arrays are copied and frozen on construction; instances are safe to
    share across threads and repeated experiment runs.
    """

    def __init__(self, features: np.ndarray, labels: np.ndarray):
        X = np.array(features, dtype=float)
        y = np.array(labels, dtype=float)
        if X.ndim != 2:
            raise ValueError(f"features must be 2-D, got shape {X.shape}")
        if y.ndim != 1 or y.shape[0] != X.shape[0]:
            raise ValueError("labels must be 1-D with one entry per row")
        if X.shape[0] == 0:
            raise ValueError("dataset must contain at least one example")
        if not (np.isfinite(X).all() and np.isfinite(y).all()):
            raise ValueError("dataset values must be finite")
        X.setflags(write=False)
        y.setflags(write=False)
        self._X = X
        self._y = y

    @property
    def features(self) -> np.ndarray:
        return self._X

    @property
    def labels(self) -> np.ndarray:
        return self._y

    @property
    def feature_count(self) -> int:
        return self._X.shape[1]

    def __len__(self) -> int:
        return self._X.shape[0]

    def example(self, i: int) -> Example:
        return Example(self._X[i], float(self._y[i]))

    def __iter__(self) -> Iterator[Example]:
        return (self.example(i) for i in range(len(self)))

    def subset(self, indices: Sequence[int] | np.ndarray) -> "Dataset":
        ix = np.asarray(indices, dtype=int)
        return Dataset(self._X[ix], self._y[ix])

    def __repr__(self) -> str:
        return f"Dataset(n={len(self)}, p={self.feature_count})"


@dataclass(frozen=True)
class PartitionPlan:
    """How to split a training set into ``source_count`` shards."""

    scheme: str
    source_count: int
    seed: int
    non_iid_quantile: float = 0.75
    non_iid_boost: float = 2.0

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ValueError(f"scheme must be one of {SCHEMES}, got {self.scheme!r}")
        if self.source_count < 2:
            raise ValueError("source_count must be at least 2")
        if not 0.0 < self.non_iid_quantile < 1.0:
            raise ValueError("non_iid_quantile must be strictly between 0 and 1")
        if self.non_iid_boost < 1.0:
            raise ValueError("non_iid_boost must be >= 1")


def round_half_up(x: float) -> int:
    """Round to nearest integer, halves away from zero (for sizes, x >= 0)."""
    return int(math.floor(x + 0.5))


def load_csv(path, label_column: str | int | None = None) -> Dataset:
    """Load a numeric, comma-delimited table with one header row.

    ``label_column`` may be a header name, a 0-based column index, or None
    to use the last column. Every other column becomes a feature, in file
    order. Raises :class:`CsvFormatError` with the offending row/column for
    ragged rows and non-numeric or non-finite cells.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise CsvFormatError(f"{path}: file is empty") from None
        header = [h.strip() for h in header]
        ncol = len(header)
        if ncol < 2:
            raise CsvFormatError(f"{path}: need at least one feature and one label column")

        if label_column is None:
            label_ix = ncol - 1
        elif isinstance(label_column, int):
            label_ix = label_column
            if not 0 <= label_ix < ncol:
                raise CsvFormatError(f"{path}: label column index {label_ix} out of range")
        else:
            try:
                label_ix = header.index(label_column)
            except ValueError:
                raise CsvFormatError(
                    f"{path}: label column {label_column!r} not in header {header}"
                ) from None

        rows: list[list[float]] = []
        labels: list[float] = []
        for rownum, raw in enumerate(reader, start=2):
            if not raw or (len(raw) == 1 and not raw[0].strip()):
                continue  # blank trailing line
            if len(raw) != ncol:
                raise CsvFormatError(
                    f"{path}: row {rownum} has {len(raw)} columns, expected {ncol}"
                )
            parsed = []
            for colnum, cell in enumerate(raw):
                try:
                    value = float(cell)
                except ValueError:
                    raise CsvFormatError(
                        f"{path}: row {rownum}, column {colnum + 1}: "
                        f"non-numeric cell {cell.strip()!r}"
                    ) from None
                if not math.isfinite(value):
                    raise CsvFormatError(
                        f"{path}: row {rownum}, column {colnum + 1}: non-finite value {cell.strip()!r}"
                    )
                parsed.append(value)
            labels.append(parsed.pop(label_ix))
            rows.append(parsed)

    if not rows:
        raise CsvFormatError(f"{path}: no data rows")
    return Dataset(np.array(rows), np.array(labels))


def train_test_split_indices(n: int, test_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Index version of :func:`train_test_split`; both halves sorted."""
    if not 0.0 < test_fraction < 1.0:
        raise ValueError("test_fraction must be in (0, 1)")
    n_test = round_half_up(n * test_fraction)
    if n_test < 1 or n_test > n - 1:
        raise ValueError(
            f"test_fraction {test_fraction} leaves an empty side for n={n}"
        )
    perm = np.random.default_rng(seed).permutation(n)
    test = np.sort(perm[:n_test])
    train = np.sort(perm[n_test:])
    return train, test


def train_test_split(d: Dataset, test_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Split into disjoint (train, test); test size = round(n * fraction)."""
    train_ix, test_ix = train_test_split_indices(len(d), test_fraction, seed)
    return d.subset(train_ix), d.subset(test_ix)


def _equal_sizes(n: int, k: int) -> list[int]:
    # Later shards absorb the remainder: 927, K=2 -> [463, 464].
    base, rem = divmod(n, k)
    return [base + (1 if i >= k - rem else 0) for i in range(k)]


def _unequal_sizes(n: int, k: int) -> list[int]:
    # Ideal proportions (2, 1, ..., 1); floor, then hand leftover rows to
    # the trailing shards one each: 927, K=4 -> [370, 185, 186, 186].
    weights = [2.0] + [1.0] * (k - 1)
    total = sum(weights)
    sizes = [int(math.floor(n * w / total)) for w in weights]
    leftover = n - sum(sizes)
    for i in range(leftover):
        sizes[k - 1 - i] += 1
    return sizes


def partition_indices(train: Dataset, plan: PartitionPlan) -> list[np.ndarray]:
    """Disjoint, exhaustive shard indices into ``train`` under ``plan``."""
    n, k = len(train), plan.source_count
    if n < 2 * k:
        raise ValueError(f"need at least {2 * k} examples to build {k} shards, have {n}")
    rng = np.random.default_rng(plan.seed)

    if plan.scheme in ("equal", "unequal"):
        sizes = _equal_sizes(n, k) if plan.scheme == "equal" else _unequal_sizes(n, k)
        perm = rng.permutation(n)
        shards, offset = [], 0
        for size in sizes:
            shards.append(np.sort(perm[offset:offset + size]))
            offset += size
        return shards

    return _non_iid_indices(train, plan, rng)


def _non_iid_indices(train: Dataset, plan: PartitionPlan, rng: np.random.Generator) -> list[np.ndarray]:
    """Equal-size shards; shard 1 oversamples rows whose label exceeds the
    ``non_iid_quantile`` threshold by a factor ``non_iid_boost`` over the
    global high-label rate, capped by availability. Leftover high-label rows
    are dealt uniformly across the other shards."""
    n, k = len(train), plan.source_count
    sizes = _equal_sizes(n, k)
    threshold = float(np.quantile(train.labels, plan.non_iid_quantile))
    high = np.flatnonzero(train.labels > threshold)
    low = np.flatnonzero(train.labels <= threshold)
    rng.shuffle(high)
    rng.shuffle(low)

    n_high = len(high)
    target = round_half_up(plan.non_iid_boost * (n_high / n) * sizes[0])
    # Keep shard 1 at least as high-heavy as any other shard can end up.
    target = max(target, math.ceil(n_high / k))
    take1 = min(target, n_high, sizes[0])
    if sizes[0] - take1 > len(low):
        raise ValueError("not enough low-label examples to fill shard 1")

    shards = [list(high[:take1])]
    remaining_high = list(high[take1:])
    pos_low = sizes[0] - take1
    shards[0].extend(low[:pos_low])

    rest: list[list[int]] = [[] for _ in range(k - 1)]
    # Round-robin deal of leftover high-label rows, respecting shard capacity.
    j = 0
    for idx in remaining_high:
        placed = False
        for _ in range(k - 1):
            if len(rest[j]) < sizes[1 + j]:
                rest[j].append(idx)
                j = (j + 1) % (k - 1)
                placed = True
                break
            j = (j + 1) % (k - 1)
        if not placed:
            raise ValueError("high-label rows exceed capacity of non-first shards")
    for j in range(k - 1):
        need = sizes[1 + j] - len(rest[j])
        rest[j].extend(low[pos_low:pos_low + need])
        pos_low += need
    shards.extend(rest)
    return [np.sort(np.array(s, dtype=int)) for s in shards]


def partition(train: Dataset, plan: PartitionPlan) -> list[Dataset]:
    """Split ``train`` into ``plan.source_count`` disjoint shard datasets."""
    return [train.subset(ix) for ix in partition_indices(train, plan)]
