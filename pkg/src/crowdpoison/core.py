"""Shared domain types and the estimation-error metric."""

from __future__ import annotations

import csv
import enum
import io
import json
from dataclasses import dataclass, field
from functools import cached_property
from typing import Any, Iterable, Mapping

import numpy as np


class CrowdError(Exception):
    """Base class for errors raised by this package."""


class DegenerateItemError(CrowdError):
    """An item's aggregation weights sum to zero."""

    def __init__(self, item: int, message: str | None = None):
        self.item = int(item)
        super().__init__(message or f"item {self.item}: aggregation weights sum to zero")


class ModelKind(str, enum.Enum):
    CRH = "CRH"
    GTM = "GTM"


def _frozen(arr, dtype) -> np.ndarray:
    out = np.array(arr, dtype=dtype, copy=True).reshape(-1)
    out.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class ObservationSet:
    """Sparse (worker, item) -> value ratings over dense integer ids.

    Workers are ``0 .. num_workers-1`` and items ``0 .. num_items-1``; an id
    may have no entries. Optional label tuples map dense ids back to the
    identifiers found in an input file.
    """

    workers: np.ndarray
    items: np.ndarray
    values: np.ndarray
    num_workers: int
    num_items: int
    worker_labels: tuple[str, ...] | None = None
    item_labels: tuple[str, ...] | None = None

    def __post_init__(self):
        w = _frozen(self.workers, np.int64)
        i = _frozen(self.items, np.int64)
        v = _frozen(self.values, np.float64)
        if not (len(w) == len(i) == len(v)):
            raise ValueError("workers, items and values must have equal length")
        if len(w):
            if w.min() < 0 or w.max() >= self.num_workers:
                raise ValueError("worker id out of range")
            if i.min() < 0 or i.max() >= self.num_items:
                raise ValueError("item id out of range")
        if not np.all(np.isfinite(v)):
            raise ValueError("observation values must be finite")
        keys = w * self.num_items + i
        if len(np.unique(keys)) != len(keys):
            raise ValueError("duplicate (worker, item) pair")
        object.__setattr__(self, "workers", w)
        object.__setattr__(self, "items", i)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "num_workers", int(self.num_workers))
        object.__setattr__(self, "num_items", int(self.num_items))

    @classmethod
    def from_entries(cls, entries: Iterable[tuple[int, int, float]],
                     num_workers: int | None = None,
                     num_items: int | None = None) -> "ObservationSet":
        rows = list(entries)
        if rows:
            w, i, v = (np.array(c) for c in zip(*rows))
        else:
            w = i = np.zeros(0, dtype=np.int64)
            v = np.zeros(0)
        if num_workers is None:
            num_workers = int(w.max()) + 1 if len(w) else 0
        if num_items is None:
            num_items = int(i.max()) + 1 if len(i) else 0
        return cls(w, i, v, num_workers, num_items)

    def __len__(self) -> int:
        return len(self.values)

    @cached_property
    def item_counts(self) -> np.ndarray:
        return np.bincount(self.items, minlength=self.num_items)

    @cached_property
    def worker_counts(self) -> np.ndarray:
        return np.bincount(self.workers, minlength=self.num_workers)

    @cached_property
    def item_workers(self) -> list[np.ndarray]:
        """Per-item array of observing workers (ascending)."""
        return _group(self.items, self.workers, self.num_items)

    @cached_property
    def worker_items(self) -> list[np.ndarray]:
        """Per-worker array of rated items (ascending)."""
        return _group(self.workers, self.items, self.num_workers)

    @cached_property
    def _index(self) -> dict[tuple[int, int], int]:
        return {(int(w), int(i)): k for k, (w, i) in enumerate(zip(self.workers, self.items))}

    def value(self, worker: int, item: int) -> float:
        return float(self.values[self._index[(int(worker), int(item))]])

    def entry_position(self, worker: int, item: int) -> int | None:
        return self._index.get((int(worker), int(item)))

    def observed_items(self) -> np.ndarray:
        return np.flatnonzero(self.item_counts > 0)

    def active_workers(self) -> np.ndarray:
        return np.flatnonzero(self.worker_counts > 0)

    def select(self, mask: np.ndarray) -> "ObservationSet":
        """Keep the entries where ``mask`` is true; id spaces are preserved."""
        mask = np.asarray(mask, dtype=bool)
        return ObservationSet(self.workers[mask], self.items[mask], self.values[mask],
                              self.num_workers, self.num_items,
                              self.worker_labels, self.item_labels)

    def without_workers(self, removed: Iterable[int]) -> "ObservationSet":
        removed = np.fromiter((int(u) for u in removed), dtype=np.int64)
        return self.select(~np.isin(self.workers, removed))

    def extend(self, workers, items, values, num_workers: int | None = None) -> "ObservationSet":
        """Return a new set with extra entries appended (e.g. malicious rows)."""
        workers = np.asarray(workers, dtype=np.int64)
        nw = num_workers if num_workers is not None else max(
            self.num_workers, int(workers.max()) + 1 if len(workers) else 0)
        return ObservationSet(np.concatenate([self.workers, workers]),
                              np.concatenate([self.items, np.asarray(items, dtype=np.int64)]),
                              np.concatenate([self.values, np.asarray(values, dtype=float)]),
                              nw, self.num_items)

    def sorted(self) -> "ObservationSet":
        order = np.lexsort((self.items, self.workers))
        return ObservationSet(self.workers[order], self.items[order], self.values[order],
                              self.num_workers, self.num_items,
                              self.worker_labels, self.item_labels)

    def same_entries(self, other: "ObservationSet") -> bool:
        """True when both sets hold exactly the same (worker, item, value) triples."""
        if len(self) != len(other):
            return False
        a, b = self.sorted(), other.sorted()
        return (np.array_equal(a.workers, b.workers) and np.array_equal(a.items, b.items)
                and np.array_equal(a.values, b.values))


def _group(keys: np.ndarray, vals: np.ndarray, n: int) -> list[np.ndarray]:
    order = np.lexsort((vals, keys))
    bounds = np.searchsorted(keys[order], np.arange(n + 1))
    sorted_vals = vals[order]
    return [sorted_vals[bounds[k]:bounds[k + 1]] for k in range(n)]


@dataclass(frozen=True, eq=False)
class AggregationState:
    """Aggregated item values plus per-worker reliabilities.

    ``values`` is NaN for items without observations. ``reliability`` holds
    CRH weights or GTM variances depending on ``model_kind``.
    """

    values: np.ndarray
    reliability: np.ndarray
    model_kind: ModelKind
    iterations: int = 0
    converged: bool = True

    def __post_init__(self):
        object.__setattr__(self, "values", _frozen(self.values, np.float64))
        object.__setattr__(self, "reliability", _frozen(self.reliability, np.float64))
        object.__setattr__(self, "model_kind", ModelKind(self.model_kind))


def squared_distance(a: float, b: float) -> float:
    return (a - b) ** 2


def _lookup(values, item: int) -> float:
    if isinstance(values, AggregationState):
        values = values.values
    if isinstance(values, Mapping):
        if item not in values:
            raise KeyError(item)
        return float(values[item])
    if item < 0 or item >= len(values):
        raise KeyError(item)
    return float(values[item])


@dataclass(frozen=True)
class EvaluationReport:
    per_item_error: dict[int, float]
    average_error: float
    metadata: dict[str, Any] = field(default_factory=dict)

    FIELDS = ("average_error", "per_item_error", "metadata")

    def to_json(self) -> str:
        return json.dumps({
            "per_item_error": {str(k): v for k, v in self.per_item_error.items()},
            "average_error": self.average_error,
            "metadata": self.metadata,
        }, sort_keys=False)

    @classmethod
    def from_json(cls, text: str) -> "EvaluationReport":
        doc = json.loads(text)
        return cls({int(k): float(v) for k, v in doc["per_item_error"].items()},
                   float(doc["average_error"]), doc.get("metadata", {}))

    def to_csv_row(self) -> str:
        """One CSV line: per_item_error, average_error, then metadata fields in order."""
        buf = io.StringIO()
        row = [json.dumps({str(k): v for k, v in self.per_item_error.items()}),
               repr(self.average_error)]
        row += [self.metadata[k] for k in self.metadata]
        csv.writer(buf, lineterminator="\n").writerow(row)
        return buf.getvalue()

    def csv_header(self) -> str:
        return ",".join(["per_item_error", "average_error", *self.metadata]) + "\n"


def average_estimation_error(before, after, targets: Iterable[int],
                             metadata: dict[str, Any] | None = None) -> EvaluationReport:
    """Mean squared shift of the targeted items' aggregated values."""
    targets = sorted({int(t) for t in targets})
    if not targets:
        raise ValueError("target set is empty")
    per_item = {}
    for t in targets:
        try:
            b = _lookup(before, t)
            a = _lookup(after, t)
        except KeyError:
            raise KeyError(f"missing aggregated value for target item {t}") from None
        if not (np.isfinite(a) and np.isfinite(b)):
            raise KeyError(f"missing aggregated value for target item {t}")
        per_item[t] = squared_distance(a, b)
    avg = sum(per_item.values()) / len(per_item)
    return EvaluationReport(per_item, avg, dict(metadata or {}))
