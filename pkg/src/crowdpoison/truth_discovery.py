"""CRH and GTM truth discovery engines.

Both engines alternate between a value step and a reliability step until the
largest change in any aggregated value drops below ``tolerance``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .core import AggregationState, CrowdError, DegenerateItemError, ModelKind, ObservationSet

log = logging.getLogger(__name__)

# floor on a worker's distance sum in the CRH weight step
WEIGHT_EPS = 1e-12


@dataclass(frozen=True)
class CrhConfig:
    max_iterations: int = 100
    tolerance: float = 1e-6
    initial_weight: float | np.ndarray = 1.0

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if not self.tolerance > 0:
            raise ValueError("tolerance must be > 0")


@dataclass(frozen=True)
class GtmConfig:
    mu0: float = 0.0
    sigma0_sq: float = 1.0
    alpha_hyper: float = 1.0
    beta_hyper: float = 1.0
    max_iterations: int = 100
    tolerance: float = 1e-6
    initial_variance: float | np.ndarray = 1.0
    normalize: bool = True

    def __post_init__(self):
        if not self.sigma0_sq > 0:
            raise ValueError("sigma0_sq must be > 0")
        if not self.beta_hyper > 0:
            raise ValueError("beta_hyper must be > 0")
        if np.any(np.asarray(self.initial_variance) <= 0):
            raise ValueError("initial_variance must be > 0")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if not self.tolerance > 0:
            raise ValueError("tolerance must be > 0")


def _per_worker(init, n: int) -> np.ndarray:
    arr = np.asarray(init, dtype=float)
    if arr.ndim == 0:
        return np.full(n, float(arr))
    if len(arr) < n:
        raise ValueError(f"initial reliability map covers {len(arr)} workers, need {n}")
    return arr[:n].copy()


# --------------------------------------------------------------------------- CRH

def crh_update_values(obs: ObservationSet, weights: np.ndarray) -> np.ndarray:
    weights = np.asarray(weights, dtype=float)
    w = weights[obs.workers]
    num = np.bincount(obs.items, weights=w * obs.values, minlength=obs.num_items)
    den = np.bincount(obs.items, weights=w, minlength=obs.num_items)
    observed = obs.item_counts > 0
    bad = observed & (den == 0)
    if bad.any():
        raise DegenerateItemError(int(np.flatnonzero(bad)[0]))
    out = np.full(obs.num_items, np.nan)
    out[observed] = num[observed] / den[observed]
    return out


def crh_update_weights(obs: ObservationSet, values: np.ndarray) -> np.ndarray:
    """Log-ratio weights; workers without observations get weight 0.

    When every observation matches its aggregate exactly the ratio is
    undefined, so uniform weights are returned.
    """
    d = (obs.values - values[obs.items]) ** 2
    per_worker = np.bincount(obs.workers, weights=d, minlength=obs.num_workers)
    total = per_worker.sum()
    active = obs.worker_counts > 0
    w = np.zeros(obs.num_workers)
    if total == 0:
        w[active] = 1.0
        return w
    w[active] = np.log(total / (per_worker[active] + WEIGHT_EPS))
    return w


def crh_objective(obs: ObservationSet, state: AggregationState) -> float:
    if state.model_kind is not ModelKind.CRH:
        raise ValueError("crh_objective needs a CRH state")
    d = (obs.values - state.values[obs.items]) ** 2
    return float(np.sum(state.reliability[obs.workers] * d))


def _alternate(obs: ObservationSet, value_step: Callable, reliability_step: Callable,
               reliability: np.ndarray, max_iterations: int, tolerance: float):
    if len(obs) == 0:
        raise CrowdError("observation set is empty")
    values = value_step(obs, reliability)
    observed = obs.item_counts > 0
    converged = False
    it = 0
    for it in range(1, max_iterations + 1):
        reliability = reliability_step(obs, values)
        new = value_step(obs, reliability)
        delta = np.max(np.abs(new[observed] - values[observed]))
        values = new
        if delta < tolerance:
            converged = True
            break
    if not converged:
        log.debug("no convergence after %d iterations", it)
    return values, reliability, it, converged


def run_crh(obs: ObservationSet, cfg: CrhConfig = CrhConfig()) -> AggregationState:
    w0 = _per_worker(cfg.initial_weight, obs.num_workers)
    values, w, it, ok = _alternate(obs, crh_update_values, crh_update_weights, w0,
                                   cfg.max_iterations, cfg.tolerance)
    return AggregationState(values, w, ModelKind.CRH, it, ok)


# --------------------------------------------------------------------------- GTM

@dataclass(frozen=True)
class ZScoreTransform:
    """Per-item affine map between raw units and z-scores."""

    mean: np.ndarray
    scale: np.ndarray
    zero_spread: np.ndarray

    def denormalize(self, values: np.ndarray) -> np.ndarray:
        return self.mean + self.scale * values

    def normalize(self, values: np.ndarray, items: np.ndarray | None = None) -> np.ndarray:
        if items is None:
            return (values - self.mean) / self.scale
        return (values - self.mean[items]) / self.scale[items]


def gtm_normalize(obs: ObservationSet) -> tuple[ObservationSet, ZScoreTransform]:
    """Per-item z-scores (sample std); single-valued or constant items pass through."""
    if len(obs) == 0:
        raise CrowdError("observation set is empty")
    n = obs.item_counts.astype(float)
    s1 = np.bincount(obs.items, weights=obs.values, minlength=obs.num_items)
    mean = np.divide(s1, n, out=np.zeros(obs.num_items), where=n > 0)
    resid = obs.values - mean[obs.items]
    ss = np.bincount(obs.items, weights=resid ** 2, minlength=obs.num_items)
    var = np.divide(ss, n - 1, out=np.zeros(obs.num_items), where=n > 1)
    std = np.sqrt(var)
    zero = std == 0
    mean = np.where(zero, 0.0, mean)
    scale = np.where(zero, 1.0, std)
    z = (obs.values - mean[obs.items]) / scale[obs.items]
    normed = ObservationSet(obs.workers, obs.items, z, obs.num_workers, obs.num_items)
    return normed, ZScoreTransform(mean, scale, zero)


def _check_variances(variances: np.ndarray):
    if np.any(variances <= 0) or not np.all(np.isfinite(variances)):
        raise ValueError("GTM variances must be finite and > 0")


def gtm_update_values(obs: ObservationSet, variances: np.ndarray,
                      cfg: GtmConfig = GtmConfig()) -> np.ndarray:
    variances = np.asarray(variances, dtype=float)
    _check_variances(variances[obs.workers])
    prec = 1.0 / variances[obs.workers]
    num = cfg.mu0 / cfg.sigma0_sq + np.bincount(obs.items, weights=prec * obs.values,
                                                minlength=obs.num_items)
    den = 1.0 / cfg.sigma0_sq + np.bincount(obs.items, weights=prec, minlength=obs.num_items)
    out = num / den
    out[obs.item_counts == 0] = np.nan
    return out


def gtm_update_variances(obs: ObservationSet, values: np.ndarray,
                         cfg: GtmConfig = GtmConfig()) -> np.ndarray:
    resid = (obs.values - values[obs.items]) ** 2
    ss = np.bincount(obs.workers, weights=resid, minlength=obs.num_workers)
    return (2 * cfg.beta_hyper + ss) / (2 * (cfg.alpha_hyper + 1) + obs.worker_counts)


def run_gtm(obs: ObservationSet, cfg: GtmConfig = GtmConfig()) -> AggregationState:
    """EM for the Gaussian truth model; reported values are in raw units."""
    if len(obs) == 0:
        raise CrowdError("observation set is empty")
    work, transform = gtm_normalize(obs) if cfg.normalize else (obs, None)
    v0 = _per_worker(cfg.initial_variance, obs.num_workers)
    values, var, it, ok = _alternate(
        work,
        lambda o, r: gtm_update_values(o, r, cfg),
        lambda o, x: gtm_update_variances(o, x, cfg),
        v0, cfg.max_iterations, cfg.tolerance)
    if transform is not None:
        values = transform.denormalize(values)
    return AggregationState(values, var, ModelKind.GTM, it, ok)


def run_engine(obs: ObservationSet, model: ModelKind | str, cfg) -> AggregationState:
    model = ModelKind(model)
    if model is ModelKind.CRH:
        return run_crh(obs, cfg if cfg is not None else CrhConfig())
    return run_gtm(obs, cfg if cfg is not None else GtmConfig())


def plain_mean(obs: ObservationSet) -> np.ndarray:
    """Unweighted per-item mean; NaN for unobserved items."""
    s = np.bincount(obs.items, weights=obs.values, minlength=obs.num_items)
    n = obs.item_counts
    out = np.full(obs.num_items, np.nan)
    out[n > 0] = s[n > 0] / n[n > 0]
    return out
