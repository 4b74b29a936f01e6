"""Data poisoning attacks on CRH/GTM aggregation.

Malicious workers get ids appended after the normal workers
(``obs.num_workers + k``), so an attacked dataset is simply the normal
observations extended with the malicious rows.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .core import AggregationState, CrowdError, ModelKind, ObservationSet
from .truth_discovery import (
    CrhConfig,
    GtmConfig,
    _per_worker,
    crh_update_weights,
    gtm_normalize,
    gtm_update_variances,
    run_engine,
)

log = logging.getLogger(__name__)


def attacker_count(fraction: float, n: int) -> int:
    """floor(fraction * n / (1 - fraction)), guarded against float round-off."""
    return int(math.floor(fraction * n / (1.0 - fraction) + 1e-9))


@dataclass(frozen=True, eq=False)
class AttackPlan:
    attack_fraction: float
    targets: tuple[int, ...]
    malicious_pool: tuple[int, ...]
    per_item_attackers: dict[int, tuple[int, ...]]
    bounds: dict[int, tuple[float, float]]
    rng_seed: int
    num_normal_workers: int

    @property
    def num_workers_total(self) -> int:
        return self.num_normal_workers + len(self.malicious_pool)

    def pairs(self) -> tuple[np.ndarray, np.ndarray]:
        """(attacker, item) pairs in a fixed order: by target, then attacker id."""
        ws, its = [], []
        for t in self.targets:
            for a in self.per_item_attackers[t]:
                ws.append(a)
                its.append(t)
        return np.array(ws, dtype=np.int64), np.array(its, dtype=np.int64)

    def pair_bounds(self, bounds: dict[int, tuple[float, float]] | None = None):
        bounds = self.bounds if bounds is None else bounds
        _, items = self.pairs()
        lo = np.array([bounds[int(t)][0] for t in items], dtype=float)
        hi = np.array([bounds[int(t)][1] for t in items], dtype=float)
        return lo, hi

    def with_bounds(self, bounds: dict[int, tuple[float, float]]) -> "AttackPlan":
        return AttackPlan(self.attack_fraction, self.targets, self.malicious_pool,
                          self.per_item_attackers, dict(bounds), self.rng_seed,
                          self.num_normal_workers)


@dataclass(frozen=True, eq=False)
class MaliciousValues:
    workers: np.ndarray
    items: np.ndarray
    values: np.ndarray
    num_workers_total: int
    meta: dict = field(default_factory=dict)

    @classmethod
    def for_plan(cls, plan: AttackPlan, values, **meta) -> "MaliciousValues":
        w, i = plan.pairs()
        values = np.asarray(values, dtype=float)
        if values.shape != w.shape:
            raise ValueError("one value per (attacker, target) pair is required")
        return cls(w, i, values, plan.num_workers_total, meta)

    def __len__(self) -> int:
        return len(self.values)

    def as_dict(self) -> dict[tuple[int, int], float]:
        return {(int(w), int(i)): float(v) for w, i, v in zip(self.workers, self.items, self.values)}

    def inject(self, obs: ObservationSet) -> ObservationSet:
        return obs.extend(self.workers, self.items, self.values, self.num_workers_total)


STEP_RULES = ("scaled", "sign", "raw")


@dataclass(frozen=True)
class GradientAscentConfig:
    """Projected gradient ascent settings.

    The step on item ``t`` at outer iteration ``r`` is
    ``eta_scale * range_t / sqrt(r)``, applied according to ``step_rule``:

    * ``"scaled"`` (default): the gradient vector is divided by its largest
      absolute component, so the biggest move is one full step in value
      units and the relative sizes across pairs are kept;
    * ``"sign"``: every pair moves one full step in its gradient's direction;
    * ``"raw"``: the step multiplies the raw gradient, which crawls when an
      attacker's share of an item is small.
    """

    eta_scale: float = 0.1
    max_outer_iterations: int = 50
    loss_tolerance: float = 1e-4
    init_offset: float = 0.1
    step_rule: str = "scaled"

    def __post_init__(self):
        if not self.eta_scale > 0:
            raise ValueError("eta_scale must be > 0")
        if self.max_outer_iterations < 1:
            raise ValueError("max_outer_iterations must be >= 1")
        if self.step_rule not in STEP_RULES:
            raise ValueError(f"step_rule must be one of {STEP_RULES}")


@dataclass(frozen=True)
class PartialKnowledgeConfig:
    knowledge_fraction: float = 1.0
    bootstrap_rounds: int = 500
    use_bootstrap: bool = True
    rng_seed: int = 0

    def __post_init__(self):
        if not 0 < self.knowledge_fraction <= 1:
            raise ValueError("knowledge_fraction must lie in (0, 1]")
        if self.bootstrap_rounds < 1:
            raise ValueError("bootstrap_rounds must be >= 1")


# --------------------------------------------------------------------------- plan

def build_attack_plan(obs: ObservationSet, attack_fraction: float, num_targets: int,
                      seed: int, min_observers: int = 10) -> AttackPlan:
    if not 0 <= attack_fraction < 0.5:
        raise ValueError("attack_fraction must lie in [0, 0.5) so normal workers stay the majority")
    eligible = np.flatnonzero(obs.item_counts >= min_observers)
    if len(eligible) < num_targets:
        raise CrowdError(f"only {len(eligible)} items have >= {min_observers} observers; "
                         f"{num_targets} targets requested")
    rng = np.random.default_rng(seed)
    targets = tuple(int(t) for t in np.sort(rng.choice(eligible, num_targets, replace=False)))
    n_active = len(obs.active_workers())
    pool = tuple(range(obs.num_workers, obs.num_workers + attacker_count(attack_fraction, n_active)))
    per_item, bounds = {}, {}
    for t in targets:
        k = attacker_count(attack_fraction, int(obs.item_counts[t]))
        chosen = rng.choice(np.array(pool, dtype=np.int64), k, replace=False) if k else []
        per_item[t] = tuple(sorted(int(a) for a in chosen))
        vals = obs.values[obs.items == t]
        bounds[t] = (float(vals.min()), float(vals.max()))
    return AttackPlan(attack_fraction, targets, pool, per_item, bounds, seed, obs.num_workers)


# --------------------------------------------------------------------------- aggregation with attackers

def _item_rows(obs: ObservationSet, mal: MaliciousValues | None, item: int):
    m = obs.items == item
    w, v = obs.workers[m], obs.values[m]
    if mal is not None and len(mal):
        mm = mal.items == item
        w = np.concatenate([w, mal.workers[mm]])
        v = np.concatenate([v, mal.values[mm]])
    return w, v


def attacked_aggregate_crh(obs: ObservationSet, mal: MaliciousValues | None,
                           weights: np.ndarray, item: int) -> float:
    w_ids, v = _item_rows(obs, mal, item)
    if len(v) == 0:
        raise CrowdError(f"item {item} has no observers")
    w = np.asarray(weights, dtype=float)[w_ids]
    den = w.sum()
    if den == 0:
        raise CrowdError(f"item {item}: combined weight sum is zero")
    return float(np.dot(w, v) / den)


def attacked_aggregate_gtm(obs: ObservationSet, mal: MaliciousValues | None,
                           variances: np.ndarray, cfg: GtmConfig, item: int) -> float:
    w_ids, v = _item_rows(obs, mal, item)
    var = np.asarray(variances, dtype=float)[w_ids]
    if np.any(var <= 0):
        raise ValueError("GTM variances must be > 0")
    prec = 1.0 / var
    return float((cfg.mu0 / cfg.sigma0_sq + np.dot(prec, v)) / (1.0 / cfg.sigma0_sq + prec.sum()))


def attack_loss(before, after_values, targets) -> float:
    before = before.values if isinstance(before, AggregationState) else before
    after = after_values.values if isinstance(after_values, AggregationState) else after_values
    return float(sum((after[t] - before[t]) ** 2 for t in targets))


def _pair_gradients(combined: ObservationSet, state: AggregationState, before_values,
                    pair_workers: np.ndarray, pair_items: np.ndarray,
                    sigma0_sq: float = 1.0) -> np.ndarray:
    rel = state.reliability
    if state.model_kind is ModelKind.CRH:
        den = np.bincount(combined.items, weights=rel[combined.workers],
                          minlength=combined.num_items)
        share = rel[pair_workers] / den[pair_items]
    else:
        den = 1.0 / sigma0_sq + np.bincount(combined.items, weights=1.0 / rel[combined.workers],
                                            minlength=combined.num_items)
        share = (1.0 / rel[pair_workers]) / den[pair_items]
    before_values = np.asarray(before_values, dtype=float)
    resid = state.values[pair_items] - before_values[pair_items]
    return 2.0 * resid * share


def attack_gradient(obs: ObservationSet, plan: AttackPlan, state: AggregationState,
                    before, mal: MaliciousValues, attacker: int, item: int,
                    sigma0_sq: float = 1.0) -> float:
    """d loss / d (attacker's value on item), reliabilities held fixed.

    ``state`` is the aggregation over normal plus malicious rows. Only the
    attacked item's aggregate depends on the value, so cross-item terms vanish.
    """
    if attacker not in plan.per_item_attackers.get(item, ()):
        raise CrowdError(f"worker {attacker} is not assigned to item {item}")
    before = before.values if isinstance(before, AggregationState) else before
    combined = mal.inject(obs)
    g = _pair_gradients(combined, state, before, np.array([attacker]), np.array([item]),
                        sigma0_sq)
    return float(g[0])


def projected_step(value, gradient, eta, bounds):
    lo, hi = bounds
    return np.clip(value + eta * gradient, lo, hi)


# --------------------------------------------------------------------------- optimisation attacks

def initial_values(before_values, items: np.ndarray, lo: np.ndarray, hi: np.ndarray,
                   offset: float = 0.1) -> np.ndarray:
    """Start at the clean aggregate, nudged toward the farther bound (max on ties)."""
    x0 = np.asarray(before_values, dtype=float)[items]
    up = (hi - x0) >= (x0 - lo)
    step = offset * (hi - lo)
    return np.clip(np.where(up, x0 + step, x0 - step), lo, hi)


def _sigma0_sq(model: ModelKind, engine_cfg) -> float:
    if model is ModelKind.GTM:
        return (engine_cfg or GtmConfig()).sigma0_sq
    return 1.0


def _gradient_ascent(obs: ObservationSet, plan: AttackPlan, lo: np.ndarray, hi: np.ndarray,
                     before_values: np.ndarray, model: ModelKind,
                     ga_cfg: GradientAscentConfig, engine_cfg) -> tuple[np.ndarray, list[float]]:
    pw, pi = plan.pairs()
    x = initial_values(before_values, pi, lo, hi, ga_cfg.init_offset)
    eta0 = ga_cfg.eta_scale * (hi - lo)
    targets = list(plan.targets)
    s0 = _sigma0_sq(model, engine_cfg)
    history: list[float] = []
    best_x, best_loss = x.copy(), -np.inf
    for r in range(1, ga_cfg.max_outer_iterations + 1):
        combined = obs.extend(pw, pi, x, plan.num_workers_total)
        state = run_engine(combined, model, engine_cfg)
        loss = attack_loss(before_values, state.values, targets)
        history.append(loss)
        if loss > best_loss:
            best_loss, best_x = loss, x.copy()
        if r > 1:
            prev = history[-2]
            if abs(loss - prev) <= ga_cfg.loss_tolerance * max(abs(prev), 1e-300):
                break
        grad = _pair_gradients(combined, state, before_values, pw, pi, s0)
        if ga_cfg.step_rule == "sign":
            grad = np.sign(grad)
        elif ga_cfg.step_rule == "scaled" and np.max(np.abs(grad)) > 0:
            grad = grad / np.max(np.abs(grad))
        x = projected_step(x, grad, eta0 / math.sqrt(r), (lo, hi))
    return best_x, history


def run_full_knowledge_attack(obs: ObservationSet, plan: AttackPlan, model=ModelKind.CRH,
                              ga_cfg: GradientAscentConfig = GradientAscentConfig(),
                              engine_cfg=None) -> MaliciousValues:
    """Bi-level attack with full view of the normal workers' values.

    Alternates a full re-aggregation over normal and malicious rows with a
    projected gradient step on every (attacker, target) value. Returns the
    iterate with the highest attack loss seen.
    """
    model = ModelKind(model)
    pw, _ = plan.pairs()
    if len(pw) == 0:
        return MaliciousValues.for_plan(plan, np.zeros(0), attack="full_knowledge")
    before = run_engine(obs, model, engine_cfg)
    lo, hi = plan.pair_bounds()
    x, history = _gradient_ascent(obs, plan, lo, hi, before.values, model, ga_cfg, engine_cfg)
    return MaliciousValues.for_plan(plan, x, attack="full_knowledge", loss_history=history)


def random_attack(plan: AttackPlan, seed: int) -> MaliciousValues:
    lo, hi = plan.pair_bounds()
    rng = np.random.default_rng(seed)
    return MaliciousValues.for_plan(plan, rng.uniform(lo, hi), attack="random")


def maximum_attack(plan: AttackPlan) -> MaliciousValues:
    _, hi = plan.pair_bounds()
    return MaliciousValues.for_plan(plan, hi, attack="maximum")


# --------------------------------------------------------------------------- bootstrap

def _resampled_aggregates(values: np.ndarray, rel: np.ndarray, idx: np.ndarray,
                          model: ModelKind, gtm_cfg: GtmConfig | None) -> np.ndarray:
    v = values[idx]
    r = rel[idx]
    if model is ModelKind.CRH:
        den = r.sum(axis=1)
        with np.errstate(invalid="ignore", divide="ignore"):
            out = (r * v).sum(axis=1) / den
        return out[den != 0]
    cfg = gtm_cfg or GtmConfig()
    p = 1.0 / r
    return (cfg.mu0 / cfg.sigma0_sq + (p * v).sum(axis=1)) / (1.0 / cfg.sigma0_sq + p.sum(axis=1))


def bootstrap_replicates(values, reliabilities, model=ModelKind.CRH, B: int = 500,
                         seed=0, gtm_cfg: GtmConfig | None = None) -> np.ndarray:
    """B aggregates, each over a same-size resample (with replacement) of the workers."""
    values = np.asarray(values, dtype=float)
    rel = np.asarray(reliabilities, dtype=float)
    if len(values) == 0:
        raise CrowdError("bootstrap needs at least one worker")
    if B < 1:
        raise ValueError("B must be >= 1")
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, len(values), size=(B, len(values)))
    return _resampled_aggregates(values, rel, idx, ModelKind(model), gtm_cfg)


def bootstrap_estimate(values, reliabilities, model=ModelKind.CRH, B: int = 500,
                       seed=0, gtm_cfg: GtmConfig | None = None) -> float:
    reps = bootstrap_replicates(values, reliabilities, model, B, seed, gtm_cfg)
    if len(reps) == 0:
        raise CrowdError("every bootstrap resample had zero total weight")
    return float(reps.mean())


# --------------------------------------------------------------------------- partial knowledge

def observed_view(obs: ObservationSet, plan: AttackPlan, knowledge_fraction: float,
                  rng: np.random.Generator) -> ObservationSet:
    """The attacker's sample of normal values on the targeted items."""
    keep = np.zeros(len(obs), dtype=bool)
    for t in plan.targets:
        rows = np.flatnonzero(obs.items == t)
        m = max(1, int(round(knowledge_fraction * len(rows))))
        keep[rng.choice(rows, m, replace=False)] = True
    return obs.select(keep)


def _estimate_before_bootstrap(view: ObservationSet, targets, model: ModelKind, engine_cfg,
                               B: int, rng: np.random.Generator) -> np.ndarray:
    """Alternate bootstrap value estimates with reliability updates on the view.

    Resample index sets are drawn once per target and reused every round so the
    fixed-point iteration is deterministic and can converge.
    """
    if model is ModelKind.CRH:
        cfg = engine_cfg or CrhConfig()
        work, transform = view, None
        rel = _per_worker(cfg.initial_weight, view.num_workers)
        update_rel = crh_update_weights
    else:
        cfg = engine_cfg or GtmConfig()
        work, transform = gtm_normalize(view) if cfg.normalize else (view, None)
        rel = _per_worker(cfg.initial_variance, view.num_workers)
        update_rel = lambda o, x: gtm_update_variances(o, x, cfg)  # noqa: E731

    rows = {t: np.flatnonzero(work.items == t) for t in targets}
    draws = {t: rng.integers(0, len(r), size=(B, len(r))) for t, r in rows.items()}

    def estimate(rel):
        est = np.full(work.num_items, np.nan)
        for t in targets:
            r = rows[t]
            reps = _resampled_aggregates(work.values[r], rel[work.workers[r]], draws[t], model,
                                         cfg if model is ModelKind.GTM else None)
            est[t] = reps.mean() if len(reps) else np.nan
        return est

    est = estimate(rel)
    tv = np.array(targets)
    for _ in range(cfg.max_iterations):
        rel = update_rel(work, est)
        new = estimate(rel)
        delta = np.nanmax(np.abs(new[tv] - est[tv]))
        est = new
        if delta < cfg.tolerance:
            break
    if transform is not None:
        est = transform.denormalize(est)
    return est


def run_partial_knowledge_attack(obs: ObservationSet, plan: AttackPlan,
                                 pk_cfg: PartialKnowledgeConfig = PartialKnowledgeConfig(),
                                 model=ModelKind.CRH,
                                 ga_cfg: GradientAscentConfig = GradientAscentConfig(),
                                 engine_cfg=None) -> MaliciousValues:
    """Attack from a sampled subset of normal values on the targeted items.

    The attacker estimates clean aggregates from the sample (bootstrapped, or
    directly when ``use_bootstrap`` is off), bounds each target by the range it
    has observed, and then runs the same ascent as the full-knowledge attack
    on the sample plus its own rows.
    """
    model = ModelKind(model)
    pw, _ = plan.pairs()
    if len(pw) == 0:
        return MaliciousValues.for_plan(plan, np.zeros(0), attack="partial_knowledge")
    view_seed, boot_seed = np.random.SeedSequence(pk_cfg.rng_seed).spawn(2)
    view = observed_view(obs, plan, pk_cfg.knowledge_fraction, np.random.default_rng(view_seed))
    if pk_cfg.use_bootstrap:
        before = _estimate_before_bootstrap(view, list(plan.targets), model, engine_cfg,
                                            pk_cfg.bootstrap_rounds,
                                            np.random.default_rng(boot_seed))
    else:
        before = run_engine(view, model, engine_cfg).values
    bounds = {}
    for t in plan.targets:
        seen = view.values[view.items == t]
        bounds[t] = (float(seen.min()), float(seen.max()))
    lo, hi = plan.pair_bounds(bounds)
    x, history = _gradient_ascent(view, plan, lo, hi, before, model, ga_cfg, engine_cfg)
    return MaliciousValues.for_plan(plan, x, attack="partial_knowledge", loss_history=history,
                                    knowledge_fraction=pk_cfg.knowledge_fraction,
                                    use_bootstrap=pk_cfg.use_bootstrap)
