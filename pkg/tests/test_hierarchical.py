import json
import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, strategies as st

from hnh.core import CostLedger, FailureLabelVector, HybridConfig, ParameterDistribution, mc_estimate, sample
from hnh.hierarchical import (
    DiagnosticsConfig,
    TrueModelError,
    compose_hnh_value,
    estimate_failure_probability,
    iterate,
    misclassification_diagnostic,
    mixture_weights,
    modify_labels,
    part_bounds,
    predicted_cost,
)
from hnh.core import make_rng
from hnh.models import BenchmarkModel
from hnh.surrogate import SurrogateHierarchy, init_network

from standins import FunctionLevel, TableModel, index_batch, table_hierarchy


# --- golden traces --------------------------------------------------------

@pytest.mark.parametrize("name", ["modify_L2_M4.json", "modify_L3_M10.json"])
def test_modify_golden(golden_dir, name):
    g = json.loads((golden_dir / name).read_text())
    M, L = g["M"], g["L"]
    for case in g["cases"]:
        hier = table_hierarchy(g["g"], g["depths"])
        led = hier.new_ledger()
        labels, state = modify_labels(hier, index_batch(M), case["eta"], led, case["signed_eps"])
        assert state.order.tolist() == case["order"]
        assert [list(p) for p in state.parts] == case["parts"]
        assert labels.labels.tolist() == case["labels"]
        assert labels.provenance.tolist() == case["provenance"]
        assert state.per_part_eps == [k / M for k in case["eps_times_M"]]
        assert state.parts_visited == case["parts_visited"]
        assert state.corrections_applied == case["m"]
        assert state.xi == case["xi"]
        assert led.surrogate_evals == case["surrogate_evals"]


def test_iterate_golden(golden_dir):
    g = json.loads((golden_dir / "iterate_M10_dM2.json").read_text())
    M = g["M"]
    hier = table_hierarchy([g["g1"]])
    batch = index_batch(M)
    labels, state = modify_labels(hier, batch, 0.0)
    assert state.order.tolist() == g["order"]
    assert labels.labels.tolist() == g["initial_labels"]
    model = TableModel(g["g_true"])
    led = hier.new_ledger()
    est, trace = iterate(labels, state, batch, model, HybridConfig(delta_M=g["delta_M"], eps_opt=g["eps_opt"]), led)
    p = [c / M for c in g["failure_counts"]]
    assert trace.p_sequence == p
    assert trace.delta_p == [b - a for a, b in zip(p[:-1], p[1:])]
    assert trace.true_solves == g["true_solves"]
    assert trace.stop_reason == g["stop_reason"]
    assert labels.labels.tolist() == g["labels"]
    assert labels.provenance.tolist() == g["provenance"]
    assert est.failures == g["failures"] and led.true_solves == g["true_solves"][-1]


# --- modification ---------------------------------------------------------

def test_single_level_has_no_modification():
    g1 = np.array([0.3, -0.2, 0.1, -1.0])
    labels, state = modify_labels(table_hierarchy([g1]), index_batch(4), 0.0)
    assert labels.labels.tolist() == [0, 1, 0, 1]
    assert state.corrections_applied == 0 and state.parts_visited == 0 and state.xi == 0


def test_sign_agreeing_levels_stop_after_first_part():
    rng = np.random.default_rng(0)
    g1 = rng.normal(size=30)
    tables = [g1, 2 * g1, 3 * g1]
    labels, state = modify_labels(table_hierarchy(tables), index_batch(30), 1e-9)
    assert state.per_part_eps == [0.0] and state.parts_visited == 1
    assert labels.labels.tolist() == (g1 < 0).astype(int).tolist()


def test_nonfinite_level_output_names_index():
    g1 = np.array([0.3, -0.2, 0.1, -1.0])
    g2 = np.array([0.3, np.inf, 0.1, -1.0])
    with pytest.raises(Exception, match="index"):
        modify_labels(table_hierarchy([g1, g2]), index_batch(4), 0.0)


def test_modify_rejects_negative_eta():
    with pytest.raises(ValueError):
        modify_labels(table_hierarchy([[1.0]]), index_batch(1), -1.0)


@given(st.integers(1, 40), st.integers(1, 5), st.data())
def test_label_conservation_and_partition(M, L, data):
    rng = np.random.default_rng(data.draw(st.integers(0, 2**32 - 1)))
    tables = [rng.normal(size=M) for _ in range(L)]
    eta = data.draw(st.floats(0, 2))
    labels, state = modify_labels(table_hierarchy(tables), index_batch(M), eta)
    assert np.array_equal(np.sort(state.order), np.arange(M))
    sizes = [b - a for a, b in state.parts]
    assert sum(sizes) == M and len(set(sizes[:-1])) <= 1
    touched = state.order[:state.corrections_applied]
    untouched = np.setdiff1d(np.arange(M), touched)
    assert np.all(labels.provenance[untouched] == 1)
    assert np.array_equal(labels.labels[untouched], (tables[0][untouched] < 0).astype(np.int8))
    assert state.xi == math.ceil(state.corrections_applied * L / M)


# --- iteration ------------------------------------------------------------

def test_perfect_surrogate_stops_after_one_batch():
    g = np.random.default_rng(1).normal(size=50)
    hier, batch = table_hierarchy([g]), index_batch(50)
    labels, state = modify_labels(hier, batch, 0.0)
    p0 = labels.labels.mean()
    est, trace = iterate(labels, state, batch, TableModel(g), HybridConfig(delta_M=7))
    assert trace.iterations == 1 and trace.delta_p == [0.0]
    assert est.p_hat == p0 and trace.true_solves_used == 7 and trace.stop_reason == "converged"


def test_exhausting_all_samples_gives_plain_mc():
    rng = np.random.default_rng(2)
    g_true = rng.normal(size=40)
    # every surrogate label is wrong, so each batch changes the estimate
    hier, batch = table_hierarchy([-g_true]), index_batch(40)
    labels, state = modify_labels(hier, batch, 0.0)
    model = TableModel(g_true)
    est, trace = iterate(labels, state, batch, model, HybridConfig(delta_M=3, eps_opt=1e-9))
    assert trace.stop_reason == "exhausted" and trace.true_solves_used == 40
    assert est == mc_estimate(FailureLabelVector.from_values(g_true, 0))
    assert trace.true_solves == [min(3 * k, 40) for k in range(trace.iterations + 1)]


@given(st.integers(2, 60), st.integers(1, 10), st.integers(0, 2**32 - 1))
def test_trace_invariants(M, dM, seed):
    rng = np.random.default_rng(seed)
    g_true = rng.normal(size=M)
    g1 = g_true + rng.normal(0, 0.5, M)
    hier, batch = table_hierarchy([g1]), index_batch(M)
    labels, state = modify_labels(hier, batch, 0.0)
    cfg = HybridConfig(delta_M=min(dM, M))
    est, trace = iterate(labels, state, batch, TableModel(g_true), cfg)
    for k in range(1, len(trace.p_sequence)):
        assert abs(trace.p_sequence[k] - trace.p_sequence[k - 1]) == abs(trace.delta_p[k - 1])
        assert trace.true_solves[k] == min(k * cfg.delta_M, M)
    if trace.stop_reason == "converged":
        assert trace.eps[-1] <= 0.5 / M
    assert est.p_hat == trace.p_sequence[-1]


def test_true_model_failure_carries_index_and_trace():
    class Flaky(TableModel):
        def evaluate_batch(self, Z):
            if np.any(np.asarray(Z)[:, 0] == 6):
                raise RuntimeError("solver blew up")
            return super().evaluate_batch(Z)

    g = np.array([0.9, -0.05, 0.3, -0.6, 1.2, 0.02, -0.4, 2.0, -1.5, 0.15])
    hier, batch = table_hierarchy([g]), index_batch(10)
    labels, state = modify_labels(hier, batch, 0.0)
    with pytest.raises(TrueModelError) as exc:
        iterate(labels, state, batch, Flaky(-np.abs(g) - 1), HybridConfig(delta_M=2, eps_opt=1e-9))
    assert exc.value.index == 6
    assert exc.value.trace.true_solves == [0, 2, 4]


# --- mixture --------------------------------------------------------------

@pytest.mark.parametrize("M", [10, 100])
@pytest.mark.parametrize("L", [1, 2, 3, 5])
def test_mixture_weights_sum_to_one(M, L):
    for m in range(M + 1):
        w = mixture_weights(m, M, L)
        assert abs(sum(w) - 1.0) <= 1e-15
        assert all(x >= 0 for x in w)


@given(st.integers(1, 500), st.integers(1, 8), st.data())
def test_mixture_weights_exact_rational(M, L, data):
    m = data.draw(st.integers(0, M))
    xi = math.ceil(m * L / M)
    w = [Fraction(0)] * (L + 1)
    if m == 0:
        w[1] = Fraction(1)
    else:
        for i in range(1, xi):
            w[L + 1 - i] += Fraction(1, L)
        w[L - xi + 1] += Fraction(m * L - (xi - 1) * M, M * L)
        w[1] += Fraction(M - m, M)
    assert sum(w) == 1
    assert mixture_weights(m, M, L) == [float(x) for x in w[1:]]


def test_mixture_weights_rejects_bad_m():
    with pytest.raises(ValueError):
        mixture_weights(11, 10, 2)


def _random_net_hierarchy(L, d=4, N=6, seed=0):
    rng = make_rng(seed)
    return SurrogateHierarchy([init_network(d, p, N, rng) for p in range(1, L + 1)])


@pytest.mark.parametrize("L", [1, 2, 3, 5])
def test_compose_endpoints_on_random_nets(L):
    hier = _random_net_hierarchy(L)
    Z = make_rng(1).standard_normal((25, 4))
    g1 = hier.predict(1, Z)
    assert np.max(np.abs(compose_hnh_value(hier, 0, 100, Z) - g1)) <= 1e-12
    equal = np.mean([hier.predict(ell, Z) for ell in range(1, L + 1)], axis=0)
    assert np.max(np.abs(compose_hnh_value(hier, 100, 100, Z) - equal)) <= 1e-12
    assert compose_hnh_value(hier, 0, 100, Z[0]) == pytest.approx(g1[0], abs=1e-15)


def test_unbiasedness_with_zero_mean_noise():
    M, L, d = 10**5, 3, 5
    batch = sample(ParameterDistribution("normal", d), M, 21)
    g = lambda Z: 2.0 - Z.sum(axis=1)
    rng = np.random.default_rng(3)
    # odd functions of a symmetric input law have mean zero
    dirs = rng.normal(size=(L, d))
    levels = [FunctionLevel(lambda Z, a=a, s=s: g(Z) + s * np.sin(Z @ a), ell, 4, d)
              for ell, (a, s) in enumerate(zip(dirs, (0.8, 0.4, 0.2)), start=1)]
    hier = SurrogateHierarchy(levels)
    for m in (0, M // 7, M // 2, M):
        diff = compose_hnh_value(hier, m, M, batch.values) - g(batch.values)
        se = diff.std(ddof=1) / math.sqrt(M)
        assert abs(diff.mean()) <= 4 * se


# --- cost model -----------------------------------------------------------

def _loop_cost(M, L, depths, N, m):
    xi = math.ceil(m * L / M)
    total = M * depths[0] * N * N
    for ell in range(L + 1 - xi, L + 1):
        if ell >= 2:
            total += (M // L) * depths[ell - 1] * N * N
    return total


def test_predicted_cost_examples():
    assert predicted_cost(1000, 3, [2, 4, 6], 8, 0) == (1000 * 2 * 64, 1000 * 6 * 64)
    assert predicted_cost(1000, 1, [5], 8, 0) == (1000 * 5 * 64, 1000 * 5 * 64)
    M, N = 10**6, 500
    hnh, nh = predicted_cost(M, 3, [6, 15, 30], N, 10**5)
    assert hnh == M * 6 * N * N + (M // 3) * 30 * N * N == _loop_cost(M, 3, [6, 15, 30], N, 10**5)
    assert hnh < nh == M * 30 * N * N


@given(st.integers(1, 10**6), st.integers(1, 6), st.data())
def test_predicted_cost_matches_loop(Mq, L, data):
    M = Mq * L  # L divides M so the (M/L) closed form is exact
    depths = sorted(data.draw(st.lists(st.integers(1, 50), min_size=L, max_size=L, unique=True)))
    m = data.draw(st.integers(0, (L - 1) * (M // L)))
    hnh, nh = predicted_cost(M, L, depths, 7, m)
    assert hnh == _loop_cost(M, L, depths, 7, m)
    # dominance holds whenever the worst case (every part relabeled) is cheaper than NH
    if depths[0] + sum(depths[1:]) / L <= depths[-1]:
        assert hnh <= nh


def test_dominance_needs_more_than_ascending_depths():
    # P1 <= PL alone is not enough: two levels with depths 2 and 3
    hnh, nh = predicted_cost(2, 2, [2, 3], 1, 1)
    assert (hnh, nh) == (7, 6)


@given(st.integers(1, 200), st.integers(1, 5), st.integers(0, 2**32 - 1), st.floats(0, 1))
def test_counted_units_equal_prediction(M, L, seed, eta):
    rng = np.random.default_rng(seed)
    tables = [rng.normal(size=M) for _ in range(L)]
    depths = list(range(2, 2 * L + 1, 2))
    hier = table_hierarchy(tables, depths, width=3)
    led = hier.new_ledger()
    _, state = modify_labels(hier, index_batch(M), eta, led)
    assert led.layer_units == predicted_cost(M, L, depths, 3, state.corrections_applied)[0]


# --- diagnostic -----------------------------------------------------------

def test_diagnostic_zero_for_perfect_surrogates():
    model = BenchmarkModel()
    batch = sample(model.distribution, 2000, 4)
    g = model.evaluate_batch(batch.values)
    hier = SurrogateHierarchy([FunctionLevel(model.evaluate_batch, p, 1, 50) for p in (1, 2)])
    diag = misclassification_diagnostic(hier, batch, FailureLabelVector.from_values(g, 0), DiagnosticsConfig())
    assert np.all(diag.empirical == 0)


def test_diagnostic_monotone_for_noisy_surrogate():
    model = BenchmarkModel(beta=1.0)
    batch = sample(model.distribution, 10**4, 5)
    g = model.evaluate_batch(batch.values)
    noise = np.random.default_rng(0).normal(0, 2.0, batch.M)
    table = g + noise
    lookup = {z.tobytes(): v for z, v in zip(batch.values, table)}
    lv = FunctionLevel(lambda Z: np.array([lookup[z.tobytes()] for z in Z]), 1, 1, 50)
    diag = misclassification_diagnostic(SurrogateHierarchy([lv]), batch,
                                        FailureLabelVector.from_values(g, 0), DiagnosticsConfig())
    emp = diag.empirical[0]
    assert np.all(np.diff(emp) <= 0) and emp[0] > 0
    fail = g < 0
    for eta, e in zip(diag.eta, emp):
        assert e == np.count_nonzero(fail & (table > eta)) / batch.M


def test_eta_t_definition_inversion():
    cfg = DiagnosticsConfig(C=2.0, a=3.0, epsilon=1e-3)
    eta_max = 1.7
    eta_t = cfg.eta_t(eta_max)
    # exponential tail equals epsilon exactly; the sigmoid form differs by the factor 1/(1 + C eps)
    assert math.isclose((1 / cfg.C) * math.exp(-cfg.a * eta_t / eta_max), cfg.epsilon, rel_tol=1e-12)
    eps = cfg.epsilon
    assert math.isclose(float(cfg.bound(eta_t, eta_max, 1)), eps / (1 + cfg.C * eps), rel_tol=1e-12)


def test_diagnostics_config_validation():
    for bad in ({"C": 1.0}, {"a": 0.5}, {"rho": 1.0}, {"epsilon": 0}):
        with pytest.raises(ValueError):
            DiagnosticsConfig(**bad)


# --- end to end -----------------------------------------------------------

def test_perfect_hierarchy_equals_plain_mc():
    model = BenchmarkModel(beta=2.0)
    hier = SurrogateHierarchy([FunctionLevel(model.evaluate_batch, 1, 1, 50)])
    res = estimate_failure_probability(model, hier, 20000, HybridConfig(), seed=3)
    batch = sample(model.distribution, 20000, 3)
    assert res.estimate == mc_estimate(FailureLabelVector.from_values(model.evaluate_batch(batch.values), 0))
    est, trace, ledger = res
    assert ledger.true_solves == trace.true_solves_used == 500


def test_dimension_mismatch_names_both():
    model = BenchmarkModel(n=50)
    hier = SurrogateHierarchy([FunctionLevel(lambda Z: Z[:, 0], 1, 1, 3)])
    with pytest.raises(ValueError, match="3.*50"):
        estimate_failure_probability(model, hier, 100, HybridConfig(delta_M=10), seed=0)


def test_trained_hierarchy_run_is_reproducible(benchmark_hierarchy):
    model, hier = benchmark_hierarchy
    a = estimate_failure_probability(model, hier, 20000, HybridConfig(), seed=9)
    b = estimate_failure_probability(model, hier, 20000, HybridConfig(), seed=9)
    assert a.estimate == b.estimate and a.trace.to_dict() == b.trace.to_dict()
    assert a.ledger.layer_units == predicted_cost(20000, 3, hier.depths, hier.width,
                                                  a.state.corrections_applied)[0]
    manifest = a.manifest()
    assert manifest["seed"] == 9 and manifest["ledger"]["true_solves"] == a.trace.true_solves_used
    json.dumps(manifest)


def test_part_bounds_remainder():
    assert part_bounds(10, 3) == [(0, 3), (3, 6), (6, 10)]
    assert part_bounds(2, 3) == [(0, 0), (0, 0), (0, 2)]
