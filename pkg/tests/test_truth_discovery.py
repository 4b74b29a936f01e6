import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from crowdpoison.core import AggregationState, DegenerateItemError, ModelKind, ObservationSet
from crowdpoison.data import SyntheticConfig, generate_synthetic
from crowdpoison.truth_discovery import (
    CrhConfig,
    GtmConfig,
    crh_objective,
    crh_update_values,
    crh_update_weights,
    gtm_normalize,
    gtm_update_values,
    gtm_update_variances,
    plain_mean,
    run_crh,
    run_gtm,
)

from oracles import crh_fixed_point, gtm_fixed_point

FIXTURE = [(0, 0, 1.0), (0, 1, 4.0), (1, 0, 2.0), (1, 1, 5.5), (2, 0, 6.0), (2, 1, 3.0)]


def obs_of(rows, **kw):
    return ObservationSet.from_entries(rows, **kw)


# --------------------------------------------------------------------------- CRH steps

def test_crh_values_examples():
    assert crh_update_values(obs_of([(0, 0, 7.0)]), np.array([5.0]))[0] == 7.0
    assert crh_update_values(obs_of([(0, 0, 2.0), (1, 0, 4.0)]), np.ones(2))[0] == 3.0
    assert crh_update_values(obs_of([(0, 0, 0.0), (1, 0, 4.0)]), np.array([1.0, 3.0]))[0] == 3.0


def test_crh_values_zero_weight_sum_names_item():
    obs = obs_of([(0, 0, 1.0), (1, 1, 2.0)])
    with pytest.raises(DegenerateItemError) as exc:
        crh_update_values(obs, np.array([1.0, 0.0]))
    assert exc.value.item == 1


def test_crh_weights_examples():
    obs = obs_of([(0, 0, 1.0), (1, 0, -1.0)])
    w = crh_update_weights(obs, np.array([0.0]))
    assert w == pytest.approx([math.log(2)] * 2, abs=1e-10)

    obs = obs_of([(0, 0, 1.0), (1, 1, math.sqrt(3.0))])
    w = crh_update_weights(obs, np.array([0.0, 0.0]))
    assert w == pytest.approx([math.log(4), math.log(4 / 3)], abs=1e-10)

    w = crh_update_weights(obs_of([(0, 0, 3.0)]), np.array([1.0]))
    assert w[0] == pytest.approx(0.0, abs=1e-10)


def test_crh_weights_zero_distance_worker_is_finite():
    obs = obs_of([(0, 0, 1.0), (1, 0, 3.0)])
    w = crh_update_weights(obs, np.array([1.0]))
    assert np.all(np.isfinite(w)) and w[0] > w[1]


def test_crh_objective():
    rows = FIXTURE
    obs = obs_of(rows)
    zero = AggregationState([0.0, 0.0], [1, 1, 1], ModelKind.CRH)
    assert crh_objective(obs, zero) == sum(v * v for _, _, v in rows)
    single = obs_of([(0, 0, 3.0)])
    assert crh_objective(single, AggregationState([1.0], [1.0], ModelKind.CRH)) == 4.0
    agree = obs_of([(0, 0, 2.0), (1, 0, 2.0)])
    assert crh_objective(agree, AggregationState([2.0], [3.0, 1.0], ModelKind.CRH)) == 0.0

    x = {0: 2.5, 1: 4.0}
    w = {0: 0.3, 1: 1.2, 2: 0.7}
    brute = sum(w[u] * (v - x[i]) ** 2 for u, i, v in rows)
    state = AggregationState([x[0], x[1]], [w[0], w[1], w[2]], ModelKind.CRH)
    assert crh_objective(obs, state) == pytest.approx(brute, rel=1e-14)


def test_run_crh_matches_oracle():
    state = run_crh(obs_of(FIXTURE))
    x, w = crh_fixed_point(FIXTURE)
    assert state.values == pytest.approx([x[0], x[1]], abs=1e-10)
    assert state.reliability == pytest.approx([w[0], w[1], w[2]], abs=1e-10)
    assert state.model_kind is ModelKind.CRH


def test_run_crh_consensus_converges_in_one_step():
    obs = obs_of([(u, i, 10.0 + i) for u in range(4) for i in range(3)])
    state = run_crh(obs)
    assert list(state.values) == [10.0, 11.0, 12.0]
    assert state.iterations == 1 and state.converged


@pytest.fixture(scope="module")
def synthetic():
    return generate_synthetic(SyntheticConfig(100, 500, 5000, seed=3))


def _truth_error(values, truth, obs):
    m = obs.item_counts > 0
    return np.mean((values[m] - truth.values[m]) ** 2)


def test_crh_beats_plain_mean_on_synthetic(synthetic):
    obs, truth = synthetic
    assert _truth_error(run_crh(obs).values, truth, obs) < _truth_error(plain_mean(obs), truth, obs)


def test_crh_weight_scale_invariance():
    obs = obs_of(FIXTURE)
    w = np.array([0.4, 2.0, 1.1])
    a = crh_update_values(obs, w)
    b = crh_update_values(obs, 7.5 * w)
    assert b == pytest.approx(a, rel=1e-14)


def test_crh_worker_permutation_invariance():
    perm = {0: 2, 1: 0, 2: 1}
    permuted = [(perm[u], i, v) for u, i, v in FIXTURE]
    a = run_crh(obs_of(FIXTURE))
    b = run_crh(obs_of(permuted))
    assert b.values == pytest.approx(a.values, abs=1e-12)
    for u, pu in perm.items():
        assert b.reliability[pu] == pytest.approx(a.reliability[u], abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_crh_objective_non_increasing(seed):
    rng = np.random.default_rng(seed)
    n_w, n_i = 6, 5
    rows = [(u, i, float(rng.normal(10, 1 + u))) for u in range(n_w) for i in range(n_i)]
    obs = obs_of(rows)
    w = np.ones(n_w)
    prev = None
    for _ in range(15):
        x = crh_update_values(obs, w)
        w = crh_update_weights(obs, x)
        if np.any(w <= 0):
            break
        x = crh_update_values(obs, w)
        f = crh_objective(obs, AggregationState(x, w, ModelKind.CRH))
        if prev is not None:
            assert f <= prev * (1 + 1e-9)
        prev = f


def test_engines_are_deterministic(synthetic):
    obs, _ = synthetic
    assert np.array_equal(run_crh(obs).values, run_crh(obs).values)
    assert np.array_equal(run_gtm(obs).values, run_gtm(obs).values)


# --------------------------------------------------------------------------- GTM

def test_gtm_normalize_examples():
    obs = obs_of([(0, 0, 1.0), (1, 0, 2.0), (2, 0, 3.0), (0, 1, 5.0), (1, 1, 5.0)])
    normed, tf = gtm_normalize(obs)
    z = {(w, i): v for w, i, v in zip(normed.workers, normed.items, normed.values)}
    assert [z[(0, 0)], z[(1, 0)], z[(2, 0)]] == pytest.approx([-1, 0, 1])
    assert z[(0, 1)] == 5.0 and z[(1, 1)] == 5.0
    assert list(tf.zero_spread) == [False, True]


@given(st.lists(st.floats(-1e4, 1e4), min_size=2, max_size=12))
def test_gtm_normalize_round_trip(xs):
    obs = obs_of([(u, 0, x) for u, x in enumerate(xs)])
    normed, tf = gtm_normalize(obs)
    back = tf.denormalize(normed.values[:, None])[:, 0]
    assert back == pytest.approx(obs.values, abs=1e-12 * max(1.0, max(map(abs, xs))))


def test_gtm_values_examples():
    cfg = GtmConfig(sigma0_sq=1e12)
    assert gtm_update_values(obs_of([(0, 0, 4.2)]), np.array([0.5]), cfg)[0] == pytest.approx(4.2)
    assert gtm_update_values(obs_of([(0, 0, 2.0)]), np.array([1.0]), GtmConfig())[0] == 1.0
    sym = obs_of([(0, 0, -1.0), (1, 0, 1.0)])
    assert gtm_update_values(sym, np.array([2.0, 2.0]), GtmConfig())[0] == 0.0
    with pytest.raises(ValueError):
        gtm_update_values(sym, np.array([1.0, 0.0]), GtmConfig())


def test_gtm_variance_examples():
    obs = obs_of([(0, 0, 1.0), (0, 1, 2.0)])
    var = gtm_update_variances(obs, np.array([1.0, 2.0]), GtmConfig(alpha_hyper=1, beta_hyper=1))
    assert var[0] == pytest.approx(1 / 3)
    obs = obs_of([(0, 0, 2.0)])
    var = gtm_update_variances(obs, np.array([0.0]), GtmConfig(alpha_hyper=0, beta_hyper=0.5))
    assert var[0] == pytest.approx(5 / 3)


def test_run_gtm_matches_oracle():
    cfg = GtmConfig(normalize=False)
    state = run_gtm(obs_of(FIXTURE), cfg)
    x, var = gtm_fixed_point(FIXTURE)
    assert state.values == pytest.approx([x[0], x[1]], abs=1e-10)
    assert state.reliability == pytest.approx([var[0], var[1], var[2]], abs=1e-10)


def test_run_gtm_consensus_uses_prior_weights():
    cfg = GtmConfig(normalize=False, mu0=0.0, sigma0_sq=2.0)
    obs = obs_of([(u, 0, 3.0) for u in range(3)])
    state = run_gtm(obs, cfg)
    prec = 1.0 / state.reliability
    expected = (cfg.mu0 / cfg.sigma0_sq + 3.0 * prec.sum()) / (1 / cfg.sigma0_sq + prec.sum())
    assert state.values[0] == pytest.approx(expected, abs=1e-12)
    assert cfg.mu0 < state.values[0] < 3.0


def test_run_gtm_single_worker_closed_form():
    cfg = GtmConfig(normalize=False, tolerance=1e-12, max_iterations=1000)
    state = run_gtm(obs_of([(0, 0, 2.0)]), cfg)
    x, v = state.values[0], state.reliability[0]
    assert v == pytest.approx((2 * cfg.beta_hyper + (2.0 - x) ** 2) / (2 * (cfg.alpha_hyper + 1) + 1),
                              abs=1e-10)
    assert x == pytest.approx((2.0 / v) / (1 + 1 / v), abs=1e-10)


def test_gtm_beats_plain_mean_on_synthetic(synthetic):
    obs, truth = synthetic
    assert _truth_error(run_gtm(obs).values, truth, obs) < _truth_error(plain_mean(obs), truth, obs)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.booleans())
def test_gtm_positivity_and_range(seed, normalize):
    rng = np.random.default_rng(seed)
    rows = [(u, i, float(rng.normal(5, 3))) for u in range(5) for i in range(4)
            if rng.random() < 0.8]
    if not rows:
        return
    cfg = GtmConfig(normalize=normalize, mu0=0.0)
    obs = obs_of(rows, num_workers=5, num_items=4)
    state = run_gtm(obs, cfg)
    assert np.all(state.reliability > 0)
    for i in obs.observed_items():
        vals = obs.values[obs.items == i]
        lo, hi = vals.min(), vals.max()
        if normalize:
            # prior mean maps back to the item mean, which lies inside the data range
            if len(vals) > 1 and vals.std() > 0:
                assert lo - 1e-9 <= state.values[i] <= hi + 1e-9
        else:
            assert min(lo, cfg.mu0) - 1e-9 <= state.values[i] <= max(hi, cfg.mu0) + 1e-9


def test_config_validation():
    with pytest.raises(ValueError):
        CrhConfig(max_iterations=0)
    with pytest.raises(ValueError):
        CrhConfig(tolerance=0)
    with pytest.raises(ValueError):
        GtmConfig(sigma0_sq=0)
    with pytest.raises(ValueError):
        GtmConfig(beta_hyper=0)
    with pytest.raises(ValueError):
        GtmConfig(initial_variance=-1.0)
