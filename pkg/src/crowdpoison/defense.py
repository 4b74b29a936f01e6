"""Robust aggregation (MWA) and influence-based worker removal (MIE)."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .core import AggregationState, CrowdError, DegenerateItemError, ModelKind, ObservationSet
from .truth_discovery import CrhConfig, _alternate, _per_worker, crh_update_weights, run_crh

INFLUENCE_DOMAINS = ("all_items", "rated_items")


@dataclass(frozen=True)
class MwaConfig:
    num_groups: int = 5
    max_iterations: int = 100
    tolerance: float = 1e-6
    initial_weight: float | np.ndarray = 1.0

    def __post_init__(self):
        if self.num_groups < 1:
            raise ValueError("num_groups must be >= 1")


@dataclass(frozen=True)
class MieConfig:
    assumed_attack_fraction: float = 0.2
    engine_cfg: CrhConfig = field(default_factory=CrhConfig)
    influence_sum_domain: str = "all_items"

    def __post_init__(self):
        if not 0 <= self.assumed_attack_fraction < 0.5:
            raise ValueError("assumed_attack_fraction must lie in [0, 0.5)")
        if self.influence_sum_domain not in INFLUENCE_DOMAINS:
            raise ValueError(f"influence_sum_domain must be one of {INFLUENCE_DOMAINS}")


# --------------------------------------------------------------------------- MWA

def _group_index(rank: np.ndarray, n: np.ndarray, groups: np.ndarray) -> np.ndarray:
    # contiguous, near-equal groups; the first n % groups groups take one extra
    base = n // groups
    rem = n % groups
    cut = rem * (base + 1)
    with np.errstate(divide="ignore", invalid="ignore"):
        tail = rem + (rank - cut) // np.maximum(base, 1)
    return np.where(rank < cut, rank // (base + 1), tail)


def mwa_update_values(obs: ObservationSet, weights: np.ndarray, num_groups: int) -> np.ndarray:
    """Median over value-sorted worker groups of each group's weighted mean."""
    if num_groups < 1:
        raise ValueError("num_groups must be >= 1")
    weights = np.asarray(weights, dtype=float)
    counts = obs.item_counts
    order = np.lexsort((obs.workers, obs.values, obs.items))
    first = np.searchsorted(obs.items[order], obs.items[order], side="left")
    rank = np.empty(len(obs), dtype=np.int64)
    rank[order] = np.arange(len(obs)) - first
    groups = np.minimum(num_groups, counts)
    g = _group_index(rank, counts[obs.items], groups[obs.items])
    key = obs.items * num_groups + g
    w = weights[obs.workers]
    size = obs.num_items * num_groups
    # accumulate in entry order so that one group reproduces the plain weighted mean exactly
    num = np.bincount(key, weights=w * obs.values, minlength=size).reshape(obs.num_items, num_groups)
    den = np.bincount(key, weights=w, minlength=size).reshape(obs.num_items, num_groups)
    used = np.arange(num_groups)[None, :] < groups[:, None]
    bad = used & (den == 0)
    if bad.any():
        item = int(np.flatnonzero(bad.any(axis=1))[0])
        raise DegenerateItemError(item, f"item {item}: a value group has zero total weight")
    means = np.full((obs.num_items, num_groups), np.nan)
    means[used] = num[used] / den[used]
    out = np.full(obs.num_items, np.nan)
    observed = counts > 0
    if num_groups == 1:
        out[observed] = means[observed, 0]
    else:
        out[observed] = np.nanmedian(means[observed], axis=1)
    return out


def run_mwa(obs: ObservationSet, cfg: MwaConfig = MwaConfig()) -> AggregationState:
    w0 = _per_worker(cfg.initial_weight, obs.num_workers)
    values, w, it, ok = _alternate(
        obs, lambda o, r: mwa_update_values(o, r, cfg.num_groups), crh_update_weights,
        w0, cfg.max_iterations, cfg.tolerance)
    return AggregationState(values, w, ModelKind.CRH, it, ok)


# --------------------------------------------------------------------------- MIE

class InfluenceCache:
    """Counterfactual CRH runs keyed by the removed worker."""

    def __init__(self, obs: ObservationSet, engine_cfg: CrhConfig = CrhConfig(),
                 domain: str = "all_items"):
        if domain not in INFLUENCE_DOMAINS:
            raise ValueError(f"domain must be one of {INFLUENCE_DOMAINS}")
        self.obs = obs
        self.engine_cfg = engine_cfg
        self.domain = domain
        self.full = run_crh(obs, engine_cfg)
        self._phi: dict[int, float] = {}

    def influence(self, u: int) -> float:
        u = int(u)
        if not 0 <= u < self.obs.num_workers:
            raise CrowdError(f"worker {u} is not in the observation set")
        if u not in self._phi:
            self._phi[u] = self._compute(u)
        return self._phi[u]

    def _compute(self, u: int) -> float:
        rated = self.obs.worker_items[u]
        if len(rated) == 0:
            return 0.0
        reduced = run_crh(self.obs.without_workers([u]), self.engine_cfg)
        shift = (self.full.values - reduced.values) ** 2
        if self.domain == "rated_items":
            shift = shift[rated]
        # items that lose every observer have no counterfactual estimate
        return float(np.nansum(shift) / len(rated))

    def all_scores(self) -> np.ndarray:
        return np.array([self.influence(u) for u in range(self.obs.num_workers)])


def worker_influence(obs: ObservationSet, u: int, engine_cfg: CrhConfig = CrhConfig(),
                     domain: str = "all_items", cache: InfluenceCache | None = None) -> float:
    """Mean squared shift of the aggregates when worker ``u`` is left out."""
    cache = cache or InfluenceCache(obs, engine_cfg, domain)
    if int(u) not in range(obs.num_workers) or obs.worker_counts[int(u)] == 0:
        raise CrowdError(f"worker {u} is not in the observation set")
    return cache.influence(u)


def set_influence(obs: ObservationSet, workers, engine_cfg: CrhConfig = CrhConfig(),
                  scores=None, cache: InfluenceCache | None = None) -> float:
    workers = [int(u) for u in workers]
    if scores is None:
        if not workers:
            return 0.0
        cache = cache or InfluenceCache(obs, engine_cfg)
        return float(sum(cache.influence(u) for u in workers))
    return float(sum(scores[u] for u in workers))


def select_influential_workers(obs: ObservationSet, k: int, engine_cfg: CrhConfig = CrhConfig(),
                               scores=None, cache: InfluenceCache | None = None) -> list[int]:
    """Greedy selection of ``k`` workers maximising total influence.

    Candidates are workers with at least one observation; ties go to the
    smaller id.
    """
    candidates = [int(u) for u in obs.active_workers()]
    if k > len(candidates):
        raise ValueError(f"k={k} exceeds the number of workers ({len(candidates)})")
    if scores is None:
        cache = cache or InfluenceCache(obs, engine_cfg)
        scores = {u: cache.influence(u) for u in candidates} if k else {}
    chosen: list[int] = []
    remaining = set(candidates)
    while len(chosen) < k:
        best = max(sorted(remaining), key=lambda u: scores[u])
        chosen.append(best)
        remaining.remove(best)
    return chosen


@dataclass(frozen=True, eq=False)
class MieResult:
    state: AggregationState
    removed: dict[int, float]
    unestimable: tuple[int, ...]


def run_mie(obs: ObservationSet, cfg: MieConfig = MieConfig()) -> MieResult:
    """Drop the floor(alpha * |workers|) most influential workers, then run CRH."""
    if len(obs) == 0:
        raise CrowdError("observation set is empty")
    k = int(math.floor(cfg.assumed_attack_fraction * len(obs.active_workers()) + 1e-9))
    removed: dict[int, float] = {}
    if k:
        cache = InfluenceCache(obs, cfg.engine_cfg, cfg.influence_sum_domain)
        scores = {int(u): cache.influence(u) for u in obs.active_workers()}
        for u in select_influential_workers(obs, k, scores=scores):
            removed[u] = scores[u]
    kept = obs.without_workers(removed)
    lost = (obs.item_counts > 0) & (kept.item_counts == 0)
    if len(kept) == 0:
        raise CrowdError("removing the influential workers leaves no observations")
    state = run_crh(kept, cfg.engine_cfg)
    return MieResult(state, removed, tuple(int(i) for i in np.flatnonzero(lost)))
