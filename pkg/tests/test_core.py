import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from hnh.core import (
    INF,
    CostLedger,
    EstimationError,
    FailureEstimate,
    FailureLabelVector,
    HybridConfig,
    ParameterDistribution,
    hybrid_estimate,
    mc_estimate,
    merge_ledgers,
    sample,
)
from hnh.models import BenchmarkModel

from standins import TableModel, index_batch


# --- distributions and sampling -------------------------------------------

def test_distribution_validation():
    with pytest.raises(ValueError):
        ParameterDistribution("normal", 0)
    with pytest.raises(ValueError):
        ParameterDistribution("uniform", 2, 1.0, 1.0)
    with pytest.raises(ValueError):
        ParameterDistribution("cauchy", 2)


def test_sample_is_deterministic_in_seed():
    d = ParameterDistribution("normal", 2)
    a, b = sample(d, 3, 7), sample(d, 3, 7)
    assert np.array_equal(a.values, b.values)
    assert a.values.shape == (3, 2)
    assert not np.array_equal(a.values, sample(d, 3, 8).values)


def test_sample_column_means_within_clt_bound():
    M = 10**5
    batch = sample(ParameterDistribution("normal", 50), M, 1)
    assert np.all(np.abs(batch.values.mean(axis=0)) < 4 / math.sqrt(M))


def test_uniform_support():
    batch = sample(ParameterDistribution("uniform", 1, -1.0, 1.0), 10**4, 2)
    assert batch.values.min() >= -1 and batch.values.max() <= 1


def test_sample_rejects_empty():
    with pytest.raises(ValueError):
        sample(ParameterDistribution(), 0, 1)


# --- plain Monte Carlo ----------------------------------------------------

def test_mc_ratio():
    est = mc_estimate(np.array([0, 0, 1, 0]))
    assert est.p_hat == 0.25 and est.failures == 1 and est.samples == 4


def test_mc_all_zero_flags_no_failures():
    est = mc_estimate(np.zeros(10**6, dtype=np.int8))
    assert est.p_hat == 0 and est.std_err == 0 and est.no_failures


def test_mc_empty_raises():
    with pytest.raises(EstimationError):
        mc_estimate(np.array([], dtype=np.int8))


@given(st.lists(st.integers(0, 1), min_size=1, max_size=200), st.randoms(use_true_random=False))
def test_mc_permutation_invariant_and_doubling(labels, rnd):
    arr = np.array(labels, dtype=np.int8)
    shuffled = arr.copy()
    rnd.shuffle(shuffled)
    base = mc_estimate(arr)
    assert mc_estimate(shuffled).p_hat == base.p_hat
    assert mc_estimate(np.concatenate([arr, arr])).p_hat == base.p_hat


@given(st.integers(1, 10**7), st.data())
def test_std_err_identity(M, data):
    k = data.draw(st.integers(0, M))
    est = FailureEstimate.from_counts(k, M)
    assert est.p_hat == k / M
    assert math.isclose(est.std_err ** 2 * M, est.p_hat * (1 - est.p_hat), rel_tol=1e-12, abs_tol=1e-300)


def test_mc_benchmark_oracle():
    model = BenchmarkModel()
    batch = sample(model.distribution, 10**6, 5)
    est = mc_estimate(FailureLabelVector.from_values(model.evaluate_batch(batch.values), 0))
    exact = 0.5 * math.erfc(3.5 / math.sqrt(2))
    assert abs(est.p_hat - exact) <= 3 * math.sqrt(exact * (1 - exact) / 10**6)


def test_label_vector_validation():
    with pytest.raises(ValueError):
        FailureLabelVector([0, 2], [1, 1])
    with pytest.raises(ValueError):
        FailureLabelVector([0, 1], [1])


# --- hybrid estimator -----------------------------------------------------

def _hybrid_setup(M=100, seed=0):
    rng = np.random.default_rng(seed)
    g_true = rng.uniform(-2, 2, M)
    g_hat = g_true + rng.normal(0, 0.6, M)
    return g_hat, TableModel(g_true), index_batch(M)


def test_hybrid_inf_equals_true_mc():
    g_hat, model, batch = _hybrid_setup()
    led = CostLedger((1,), 1)
    est = hybrid_estimate(g_hat, model, batch, INF, led)
    assert est == mc_estimate(FailureLabelVector.from_values(model.table, 0))
    assert led.true_solves == batch.M


def test_hybrid_gamma_zero_uses_surrogate_sign():
    g_hat, model, batch = _hybrid_setup()
    led = CostLedger((1,), 1)
    est = hybrid_estimate(g_hat, model, batch, 0.0, led)
    assert est.failures == int(np.sum(g_hat < 0))
    assert led.true_solves == 0 and model.calls == 0


def test_hybrid_matches_term_by_term_sum():
    g_hat, model, batch = _hybrid_setup()
    gamma = 0.5
    total = 0
    for gh, gt in zip(g_hat, model.table):
        if gh < -gamma:
            total += 1
        elif abs(gh) <= gamma:
            total += gt < 0
    led = CostLedger((1,), 1)
    est = hybrid_estimate(g_hat, model, batch, gamma, led)
    assert est.failures == total
    assert led.true_solves == int(np.sum(np.abs(g_hat) <= gamma))


@given(st.floats(0, 3), st.floats(0, 3))
def test_hybrid_reverification_is_monotone(g1, g2):
    g_hat, model, batch = _hybrid_setup(50, 1)
    lo, hi = sorted((g1, g2))
    a, b = CostLedger((1,), 1), CostLedger((1,), 1)
    hybrid_estimate(g_hat, model, batch, lo, a)
    hybrid_estimate(g_hat, model, batch, hi, b)
    assert set(np.flatnonzero(np.abs(g_hat) <= lo)) <= set(np.flatnonzero(np.abs(g_hat) <= hi))
    assert a.true_solves <= b.true_solves


def test_hybrid_nonfinite_names_index():
    g_hat, model, batch = _hybrid_setup(10)
    g_hat[7] = np.nan
    with pytest.raises(EstimationError, match="index 7"):
        hybrid_estimate(g_hat, model, batch, 0.1)


def test_hybrid_rejects_negative_gamma():
    g_hat, model, batch = _hybrid_setup(10)
    with pytest.raises(ValueError):
        hybrid_estimate(g_hat, model, batch, -1.0)


# --- ledgers and config ---------------------------------------------------

ledgers = st.builds(
    lambda t, e: CostLedger((2, 4, 6), 8, t, e),
    st.integers(0, 10**9),
    st.lists(st.integers(0, 10**9), min_size=3, max_size=3),
)


@given(ledgers, ledgers, ledgers)
def test_merge_commutative_associative(a, b, c):
    assert merge_ledgers(a, b) == merge_ledgers(b, a)
    assert merge_ledgers(merge_ledgers(a, b), c) == merge_ledgers(a, merge_ledgers(b, c))
    assert merge_ledgers(a, a.empty_like()) == a


@given(ledgers)
def test_layer_units_closed_form(a):
    assert a.layer_units == sum(e * p * 64 for e, p in zip(a.surrogate_evals, (2, 4, 6)))
    assert CostLedger.from_dict(a.to_dict()) == a


def test_merge_counts():
    a, b = CostLedger((1,), 2, 3), CostLedger((1,), 2, 5)
    assert merge_ledgers(a, b).true_solves == 8


def test_merge_metadata_mismatch():
    with pytest.raises(ValueError, match="mismatch"):
        merge_ledgers(CostLedger((1, 2), 4), CostLedger((1, 3), 4))


def test_hybrid_config_defaults_and_bounds():
    cfg = HybridConfig().resolved(1000, 3)
    assert cfg.eps_opt == 0.5 / 1000 and cfg.eta == 1.5 / 1000
    with pytest.raises(ValueError):
        HybridConfig(delta_M=600).resolved(500, 2)
    with pytest.raises(ValueError):
        HybridConfig(eps_opt=0.0)
    with pytest.raises(ValueError):
        HybridConfig(gamma=-1)
