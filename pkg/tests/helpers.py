"""Fixture builders shared by the attack and acceptance tests."""

import numpy as np

from crowdpoison.attack import (
    AttackPlan,
    MaliciousValues,
    attack_gradient,
    attack_loss,
    attacked_aggregate_crh,
    attacked_aggregate_gtm,
)
from crowdpoison.core import AggregationState, ModelKind, ObservationSet
from crowdpoison.truth_discovery import GtmConfig


def manual_plan(obs, assignments, bounds=None):
    """Plan with explicit {item: n_attackers}; attackers numbered after normal workers."""
    pool_size = max(assignments.values(), default=0)
    pool = tuple(range(obs.num_workers, obs.num_workers + pool_size))
    per_item = {t: pool[:k] for t, k in assignments.items()}
    if bounds is None:
        bounds = {t: (float(obs.values[obs.items == t].min()), float(obs.values[obs.items == t].max()))
                  for t in assignments}
    return AttackPlan(0.2, tuple(sorted(assignments)), pool, per_item, bounds, 0, obs.num_workers)


def gradient_fd_error(model, seed):
    """Worst relative gap between the analytic gradient and central differences."""
    rng = np.random.default_rng(seed)
    n_normal = int(rng.integers(5, 21))
    n_items = int(rng.integers(1, 6))
    rows = [(u, i, float(rng.normal(10, 3))) for u in range(n_normal) for i in range(n_items)
            if rng.random() < 0.8 or u == 0]
    obs = ObservationSet.from_entries(rows, num_workers=n_normal, num_items=n_items)
    assign = {i: int(rng.integers(1, 4)) for i in range(n_items)}
    plan = manual_plan(obs, assign)
    pw, pi = plan.pairs()
    lo, hi = plan.pair_bounds()
    x = rng.uniform(lo, hi)
    rel = rng.uniform(0.5, 3.0, plan.num_workers_total)
    cfg = GtmConfig(mu0=float(rng.normal()), sigma0_sq=float(rng.uniform(0.5, 4)))
    before = rng.normal(10, 3, n_items)

    def aggregates(xv):
        mal = MaliciousValues.for_plan(plan, xv)
        if model is ModelKind.CRH:
            return np.array([attacked_aggregate_crh(obs, mal, rel, i) for i in range(n_items)])
        return np.array([attacked_aggregate_gtm(obs, mal, rel, cfg, i) for i in range(n_items)])

    def loss(xv):
        return attack_loss(before, aggregates(xv), list(plan.targets))

    mal = MaliciousValues.for_plan(plan, x)
    state = AggregationState(aggregates(x), rel, model)
    worst = 0.0
    for k in range(len(x)):
        h = 1e-5 * max(1.0, abs(x[k]))
        xp, xm = x.copy(), x.copy()
        xp[k] += h
        xm[k] -= h
        fd = (loss(xp) - loss(xm)) / (2 * h)
        g = attack_gradient(obs, plan, state, before, mal, int(pw[k]), int(pi[k]), cfg.sigma0_sq)
        worst = max(worst, abs(g - fd) / max(abs(fd), 1e-8))
    return worst
