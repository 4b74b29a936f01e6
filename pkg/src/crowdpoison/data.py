"""Synthetic crowdsourcing data and CSV ingestion/export."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import CrowdError, ObservationSet

HEADER = ("worker_id", "item_id", "value")


class DataFormatError(CrowdError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


@dataclass(frozen=True)
class SyntheticConfig:
    num_workers: int = 500
    num_items: int = 4000
    num_values: int = 50000
    truth_low: float = 20.0
    truth_high: float = 30.0
    sigma_low: float = 0.0
    sigma_high: float = 30.0
    seed: int = 0

    def __post_init__(self):
        if self.num_workers < 1 or self.num_items < 1 or self.num_values < 0:
            raise ValueError("counts must be positive")
        if self.num_values > self.num_workers * self.num_items:
            raise ValueError("num_values exceeds the number of (worker, item) pairs")
        if self.truth_low > self.truth_high:
            raise ValueError("truth_low > truth_high")
        if not 0 <= self.sigma_low <= self.sigma_high:
            raise ValueError("need 0 <= sigma_low <= sigma_high")


@dataclass(frozen=True, eq=False)
class GroundTruth:
    values: np.ndarray
    worker_sigmas: np.ndarray


def generate_synthetic(cfg: SyntheticConfig = SyntheticConfig()):
    """Item truths and worker noise levels are uniform; ratings are Gaussian.

    (worker, item) cells are drawn uniformly without replacement from the full
    grid, so some items may have few observers.
    """
    rng = np.random.default_rng(cfg.seed)
    mu = rng.uniform(cfg.truth_low, cfg.truth_high, cfg.num_items)
    sigma = rng.uniform(cfg.sigma_low, cfg.sigma_high, cfg.num_workers)
    cells = np.sort(rng.choice(cfg.num_workers * cfg.num_items, cfg.num_values, replace=False))
    workers = cells // cfg.num_items
    items = cells % cfg.num_items
    values = rng.normal(mu[items], sigma[workers])
    obs = ObservationSet(workers, items, values, cfg.num_workers, cfg.num_items)
    return obs, GroundTruth(mu, sigma)


# --------------------------------------------------------------------------- CSV

def _fmt(v: float) -> str:
    return format(float(v), ".17g")


def _labels(labels, n):
    return labels if labels is not None else tuple(str(k) for k in range(n))


def export_observations(obs: ObservationSet, path, malicious=None) -> None:
    """Write ``worker_id,item_id,value[,is_malicious]`` with lossless values."""
    wl = _labels(obs.worker_labels, obs.num_workers)
    il = _labels(obs.item_labels, obs.num_items)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(HEADER + (("is_malicious",) if malicious is not None else ()))
        flags = np.zeros(len(obs), bool) if malicious is None else np.asarray(malicious, bool)
        for w, i, v, f in zip(obs.workers, obs.items, obs.values, flags):
            row = [wl[w], il[i], _fmt(v)]
            if malicious is not None:
                row.append(int(f))
            out.writerow(row)


class _SymbolTable:
    def __init__(self):
        self.ids: dict[str, int] = {}

    def __call__(self, key: str) -> int:
        if key not in self.ids:
            self.ids[key] = len(self.ids)
        return self.ids[key]

    def labels(self) -> tuple[str, ...]:
        return tuple(self.ids)


def _dense(raw: list[str]) -> tuple[np.ndarray, int, tuple[str, ...] | None]:
    """Integer ids are used as-is; anything else goes through a symbol table."""
    try:
        ints = np.array([int(r) for r in raw], dtype=np.int64)
        if len(ints) and ints.min() < 0:
            raise ValueError
        return ints, int(ints.max()) + 1 if len(ints) else 0, None
    except ValueError:
        table = _SymbolTable()
        ids = np.array([table(r) for r in raw], dtype=np.int64)
        return ids, len(table.ids), table.labels()


def _parse_value(text: str, line: int) -> float:
    try:
        v = float(text)
    except ValueError:
        raise DataFormatError(f"non-numeric value {text!r}", line) from None
    if not np.isfinite(v):
        raise DataFormatError(f"non-finite value {text!r}", line)
    return v


def _build(rows: list[tuple[str, str, float, int]], flags=None) -> ObservationSet:
    if not rows:
        raise DataFormatError("no observations found")
    seen = {}
    for w, i, _, line in rows:
        if (w, i) in seen:
            raise DataFormatError(f"duplicate (worker, item) = ({w}, {i}); first seen on line "
                                  f"{seen[(w, i)]}", line)
        seen[(w, i)] = line
    wid, nw, wl = _dense([r[0] for r in rows])
    iid, ni, il = _dense([r[1] for r in rows])
    return ObservationSet(wid, iid, np.array([r[2] for r in rows]), nw, ni, wl, il)


def _read_generic(fh):
    reader = csv.reader(fh)
    header = next(reader, None)
    if header is None:
        raise DataFormatError("empty file")
    header = [h.strip() for h in header]
    if tuple(header[:3]) != HEADER or len(header) > 4 or (len(header) == 4
                                                          and header[3] != "is_malicious"):
        raise DataFormatError(f"unexpected header {header}", 1)
    rows, flags = [], []
    for line, rec in enumerate(reader, start=2):
        if not rec:
            continue
        if len(rec) != len(header):
            raise DataFormatError(f"expected {len(header)} fields, got {len(rec)}", line)
        rows.append((rec[0].strip(), rec[1].strip(), _parse_value(rec[2], line), line))
        if len(header) == 4:
            flags.append(rec[3].strip() in ("1", "true", "True"))
    return rows, (np.array(flags, bool) if len(header) == 4 else None)


def _read_emotion(paths):
    """Snow et al. affect TSVs: ``!amt_annotation_ids  !amt_worker_ids  orig_id  <emotion>``.

    Each (text, emotion) pair becomes one item keyed ``<emotion>:<orig_id>``.
    """
    rows = []
    for path in paths:
        with open(path, encoding="utf-8") as fh:
            reader = csv.reader(fh, delimiter="\t")
            header = next(reader, None)
            if header is None:
                raise DataFormatError(f"{path}: empty file")
            try:
                wcol = header.index("!amt_worker_ids")
                icol = header.index("orig_id")
            except ValueError:
                raise DataFormatError(f"{path}: missing !amt_worker_ids/orig_id columns", 1) from None
            vcols = [k for k, h in enumerate(header) if k not in (0, wcol, icol)]
            for line, rec in enumerate(reader, start=2):
                if not rec:
                    continue
                if len(rec) != len(header):
                    raise DataFormatError(f"{path}: expected {len(header)} fields", line)
                for k in vcols:
                    rows.append((rec[wcol], f"{header[k]}:{rec[icol]}",
                                 _parse_value(rec[k], line), line))
    return rows


WEATHER_ITEM_COLUMNS = ("city", "date")


def _read_weather(fh):
    """Weather forecasts: ``source,city,date,temperature`` (one forecast per row)."""
    reader = csv.DictReader(fh)
    if reader.fieldnames is None:
        raise DataFormatError("empty file")
    need = {"source", "temperature", *WEATHER_ITEM_COLUMNS}
    if not need <= set(reader.fieldnames):
        raise DataFormatError(f"weather schema needs columns {sorted(need)}", 1)
    rows = []
    for line, rec in enumerate(reader, start=2):
        item = "|".join(rec[c] for c in WEATHER_ITEM_COLUMNS)
        rows.append((rec["source"], item, _parse_value(rec["temperature"], line), line))
    return rows


def load_observations(path, schema: str = "generic", return_flags: bool = False):
    path = Path(path)
    flags = None
    if schema == "generic":
        with open(path, newline="", encoding="utf-8") as fh:
            rows, flags = _read_generic(fh)
    elif schema == "emotion":
        paths = sorted(path.glob("*.tsv")) if path.is_dir() else [path]
        rows = _read_emotion(paths)
    elif schema == "weather":
        with open(path, newline="", encoding="utf-8") as fh:
            rows = _read_weather(fh)
    else:
        raise ValueError(f"unknown schema {schema!r}")
    obs = _build(rows)
    if return_flags:
        return obs, flags
    return obs


def dataset_summary(obs: ObservationSet) -> dict[str, int]:
    """Row/worker/item counts, for comparison against published dataset sizes."""
    return {"workers": int(len(obs.active_workers())),
            "items": int(len(obs.observed_items())),
            "values": len(obs)}


def export_ground_truth(truth: GroundTruth, items_path, workers_path) -> None:
    with open(items_path, "w", newline="", encoding="utf-8") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(["item_id", "truth"])
        out.writerows([k, _fmt(v)] for k, v in enumerate(truth.values))
    with open(workers_path, "w", newline="", encoding="utf-8") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(["worker_id", "sigma"])
        out.writerows([k, _fmt(v)] for k, v in enumerate(truth.worker_sigmas))


def load_ground_truth(items_path, workers_path) -> GroundTruth:
    def col(p):
        with open(p, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))[1:]
        out = np.zeros(len(rows))
        for k, v in rows:
            out[int(k)] = float(v)
        return out
    return GroundTruth(col(items_path), col(workers_path))

