"""Hierarchical neural hybrid estimation.

Pipeline: label every sample with the coarsest surrogate, sort by how close
that surrogate is to the limit state, relabel the most suspicious parts with
progressively finer surrogates (``modify_labels``), then replace labels with
true-model indicators ``delta_M`` samples at a time until the estimate stops
moving (``iterate``).
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .core import (
    TRUE_MODEL,
    CostLedger,
    EstimationError,
    FailureEstimate,
    FailureLabelVector,
    HybridConfig,
    SampleBatch,
    check_finite,
    evaluate_true,
    sample,
)


class TrueModelError(EstimationError):
    def __init__(self, index: int, trace: "IterationTrace", cause: Exception):
        self.index = index
        self.trace = trace
        super().__init__(f"true model failed on sample index {index}: {cause}")


def ceil_div(a: int, b: int) -> int:
    return -(-a // b)


def part_bounds(M: int, L: int) -> list:
    """``L`` contiguous ``[start, stop)`` ranges of equal size; the last absorbs the remainder."""
    size = M // L
    bounds = [(i * size, (i + 1) * size) for i in range(L - 1)]
    bounds.append(((L - 1) * size, M))
    return bounds


@dataclass
class ModificationState:
    order: np.ndarray
    parts: list
    per_part_eps: list = field(default_factory=list)
    parts_visited: int = 0
    corrections_applied: int = 0
    coarse_values: np.ndarray | None = None

    @property
    def M(self) -> int:
        return self.order.size

    @property
    def L(self) -> int:
        return len(self.parts)

    @property
    def xi(self) -> int:
        return ceil_div(self.corrections_applied * self.L, self.M)

    def to_dict(self) -> dict:
        return {
            "M": self.M,
            "L": self.L,
            "parts": [list(p) for p in self.parts],
            "per_part_eps": list(self.per_part_eps),
            "parts_visited": self.parts_visited,
            "corrections_applied": self.corrections_applied,
            "xi": self.xi,
        }


def modify_labels(hier, batch: SampleBatch, eta: float, ledger: CostLedger | None = None,
                  signed_eps: bool = False, coarse_values=None):
    """Relabel the sorted suspicious parts with finer surrogates.

    Part ``i`` (``i = 1..L-1``, most suspicious first) is relabeled by level
    ``L+1-i``.  After each part the correction size
    ``eps_i = (L/M) * sum |new - old|`` is compared with ``eta`` and the loop
    stops at the first part with ``eps_i < eta``.  ``signed_eps`` uses the
    signed sum instead of absolute values.

    Returns ``(FailureLabelVector, ModificationState)``.
    """
    L = hier.L if hier is not None else 0
    if L < 1:
        raise ValueError("hierarchy must have at least one level")
    if not eta >= 0:
        raise ValueError("eta must be nonnegative")
    M = batch.M
    if coarse_values is None:
        coarse_values = hier.predict(1, batch.values)
    g1 = check_finite(coarse_values, "level-1 surrogate")
    if ledger is not None:
        ledger.add_surrogate(1, M)
    labels = FailureLabelVector.from_values(g1, 1)
    order = np.argsort(np.abs(g1), kind="stable")
    state = ModificationState(order, part_bounds(M, L), coarse_values=g1)

    for i in range(1, L):
        start, stop = state.parts[i - 1]
        idx = order[start:stop]
        level = L + 1 - i
        g_fine = check_finite(hier.predict(level, batch.values[idx]), f"level-{level} surrogate")
        if ledger is not None:
            ledger.add_surrogate(level, idx.size)
        new = (g_fine < 0).astype(np.int8)
        delta = new.astype(np.int64) - labels.labels[idx]
        labels.labels[idx] = new
        labels.provenance[idx] = level
        total = int(delta.sum()) if signed_eps else int(np.abs(delta).sum())
        eps = L * total / M
        state.per_part_eps.append(eps)
        state.parts_visited = i
        state.corrections_applied += idx.size
        if eps < eta:
            break
    return labels, state


@dataclass
class IterationTrace:
    p_sequence: list = field(default_factory=list)
    delta_p: list = field(default_factory=list)
    eps: list = field(default_factory=list)
    true_solves: list = field(default_factory=list)
    stop_reason: str = ""

    @property
    def iterations(self) -> int:
        return len(self.delta_p)

    @property
    def true_solves_used(self) -> int:
        return self.true_solves[-1] if self.true_solves else 0

    def to_dict(self) -> dict:
        return {
            "p_sequence": list(self.p_sequence),
            "delta_p": list(self.delta_p),
            "eps": list(self.eps),
            "true_solves": list(self.true_solves),
            "stop_reason": self.stop_reason,
        }


def _true_labels(true_model, values: np.ndarray, positions: np.ndarray, trace) -> np.ndarray:
    try:
        g = evaluate_true(true_model, values)
    except Exception:
        # pin down the offending sample
        for pos, z in zip(positions, values):
            try:
                evaluate_true(true_model, z[None, :])
            except Exception as exc:
                raise TrueModelError(int(pos), trace, exc) from exc
        raise
    bad = np.flatnonzero(~np.isfinite(g))
    if bad.size:
        raise TrueModelError(int(positions[bad[0]]), trace, ValueError("non-finite value"))
    return (g < 0).astype(np.int8)


def iterate(labels: FailureLabelVector, state: ModificationState, batch: SampleBatch,
            true_model, cfg: HybridConfig, ledger: CostLedger | None = None):
    """True-model correction in sorted-suspicion order.

    Iteration ``k`` replaces the labels of the next ``delta_M`` samples with
    true-model indicators and stops once ``|P_k - P_{k-1}| <= eps_opt`` or
    every sample has been re-verified.  The loop starts with
    ``eps = 10 * eps_opt`` so it always runs at least once.

    Returns ``(FailureEstimate, IterationTrace)``; ``labels`` is updated in place.
    """
    M = batch.M
    cfg = cfg.resolved(M, state.L)
    order = state.order
    failures = int(np.count_nonzero(labels.labels))
    trace = IterationTrace(p_sequence=[failures / M], true_solves=[0])
    eps = 10.0 * cfg.eps_opt
    consumed = 0
    while eps > cfg.eps_opt:
        if consumed >= M:
            break
        idx = order[consumed:consumed + cfg.delta_M]
        new = _true_labels(true_model, batch.values[idx], idx, trace)
        if ledger is not None:
            ledger.add_true(idx.size)
        failures += int(new.sum()) - int(labels.labels[idx].sum())
        labels.labels[idx] = new
        labels.provenance[idx] = TRUE_MODEL
        consumed += idx.size
        p_new = failures / M
        dp = p_new - trace.p_sequence[-1]
        eps = abs(dp)
        trace.p_sequence.append(p_new)
        trace.delta_p.append(dp)
        trace.eps.append(eps)
        trace.true_solves.append(consumed)
    trace.stop_reason = "converged" if eps <= cfg.eps_opt else "exhausted"
    return FailureEstimate.from_counts(failures, M), trace


def mixture_weights(m: int, M: int, L: int) -> list:
    """Weights of levels ``1..L`` in the HNH surrogate after ``m`` modifications.

    Computed exactly with rationals; the returned floats sum to 1 up to
    rounding.
    """
    if not 0 <= m <= M or M < 1 or L < 1:
        raise ValueError(f"need 0 <= m <= M and L >= 1, got m={m}, M={M}, L={L}")
    w = [Fraction(0)] * (L + 1)
    if m == 0:
        w[1] = Fraction(1)
    else:
        xi = ceil_div(m * L, M)
        for i in range(1, xi):
            w[L + 1 - i] += Fraction(1, L)
        w[L - xi + 1] += Fraction(m * L - (xi - 1) * M, M * L)
        w[1] += Fraction(M - m, M)
    return [float(x) for x in w[1:]]


def compose_hnh_value(hier, m: int, M: int, z) -> np.ndarray | float:
    """Evaluate the HNH mixture surrogate at ``z`` (one vector or rows of a matrix)."""
    weights = mixture_weights(m, M, hier.L)
    Z = np.asarray(z, dtype=float)
    single = Z.ndim == 1
    Z = Z[None, :] if single else Z
    out = np.zeros(Z.shape[0])
    for ell, w in enumerate(weights, start=1):
        if w:
            out += w * hier.predict(ell, Z)
    return float(out[0]) if single else out


def predicted_cost(M: int, L: int, depths, N: int, m: int) -> tuple:
    """Layer-unit cost of the surrogate phase: ``(hnh, nh)``.

    HNH evaluates the coarse level on all ``M`` samples plus level
    ``L+1-i`` on part ``i`` for ``i = 1..xi``, ``xi = ceil(mL/M)``.  Part sizes
    follow ``part_bounds`` so the count is exact; when ``L`` divides ``M`` it
    equals ``M P_1 N^2 + (M/L)(P_L + ... + P_{L+1-xi}) N^2``.  NH runs the
    finest level on everything: ``M P_L N^2``.
    """
    depths = [int(p) for p in depths]
    if len(depths) != L:
        raise ValueError("need one depth per level")
    if not 0 <= m <= M:
        raise ValueError("need 0 <= m <= M")
    n2 = int(N) ** 2
    xi = ceil_div(m * L, M)
    parts = part_bounds(M, L)
    hnh = M * depths[0] * n2
    for i in range(1, min(xi, L - 1) + 1):
        start, stop = parts[i - 1]
        hnh += (stop - start) * depths[L - i] * n2
    nh = M * depths[-1] * n2
    return hnh, nh


# --- Assumption-style misclassification diagnostic ------------------------

@dataclass(frozen=True)
class DiagnosticsConfig:
    C: float = 2.0
    a: float = 2.0
    rho: float = 0.1
    epsilon: float = 1e-3
    n_eta: int = 25

    def __post_init__(self):
        if not self.C > 1:
            raise ValueError("C must exceed 1")
        if not self.a > 1:
            raise ValueError("a must exceed 1")
        if not 0 < self.rho < 1:
            raise ValueError("rho must lie in (0, 1)")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")

    def eta_max(self, sorted_abs_coarse: np.ndarray) -> float:
        M = sorted_abs_coarse.size
        k = max(1, math.ceil((1.0 - self.rho) * M))
        return float(sorted_abs_coarse[k - 1])

    def eta_t(self, eta_max: float, epsilon: float | None = None) -> float:
        eps = self.epsilon if epsilon is None else epsilon
        return math.log(1.0 / (self.C * eps)) * eta_max / self.a

    def bound(self, eta, eta_max: float, level: int):
        x = np.asarray(eta, dtype=float) / eta_max
        return (1.0 / self.C / (1.0 + np.exp(self.a * x))) ** level


@dataclass
class Diagnostic:
    eta: np.ndarray
    empirical: np.ndarray  # shape (L, n_eta)
    bound: np.ndarray  # shape (L, n_eta)
    eta_max: float
    eta_t: float
    level_thresholds: list

    def rows(self):
        for ell in range(self.empirical.shape[0]):
            for k, e in enumerate(self.eta):
                yield ell + 1, float(e), float(self.empirical[ell, k]), float(self.bound[ell, k])


def misclassification_diagnostic(hier, batch: SampleBatch, oracle_labels, diag: DiagnosticsConfig,
                                 etas=None) -> Diagnostic:
    """Empirical rate of ``{g_l > eta} & {g < 0}`` per level against the sigmoid-type bound.

    The rate is taken over the whole sample set.  Purely descriptive.
    """
    fail = np.asarray(oracle_labels.labels if isinstance(oracle_labels, FailureLabelVector)
                      else oracle_labels).astype(bool)
    M = batch.M
    values = [hier.predict(ell, batch.values) for ell in range(1, hier.L + 1)]
    G = np.sort(np.abs(values[0]))
    eta_max = diag.eta_max(G)
    if etas is None:
        q = np.linspace(0.0, 1.0 - diag.rho, diag.n_eta)
        idx = np.clip(np.ceil(q * M).astype(int) - 1, 0, M - 1)
        etas = np.concatenate([[0.0], G[idx]])
    etas = np.asarray(etas, dtype=float)
    emp = np.empty((hier.L, etas.size))
    bnd = np.empty_like(emp)
    for ell, v in enumerate(values, start=1):
        fv = v[fail]
        srt = np.sort(fv)
        # count of failing samples with g_l > eta, for every eta at once
        emp[ell - 1] = (fv.size - np.searchsorted(srt, etas, side="right")) / M
        bnd[ell - 1] = diag.bound(etas, eta_max, ell) if eta_max > 0 else np.nan
    thresholds = [float(G[max(0, ell * M // hier.L - 1)]) for ell in range(1, hier.L + 1)]
    return Diagnostic(etas, emp, bnd, eta_max, diag.eta_t(eta_max), thresholds)


# --- end to end -----------------------------------------------------------

@dataclass
class HNHResult:
    estimate: FailureEstimate
    trace: IterationTrace
    ledger: CostLedger
    state: ModificationState
    labels: FailureLabelVector
    batch: SampleBatch
    config: HybridConfig
    timings: dict = field(default_factory=dict)

    def __iter__(self):
        # allows ``estimate, trace, ledger = result``
        return iter((self.estimate, self.trace, self.ledger))

    def manifest(self) -> dict:
        return {
            "seed": self.batch.seed,
            "samples": self.batch.M,
            "distribution": self.batch.distribution.to_dict(),
            "hybrid_config": {
                "delta_M": self.config.delta_M,
                "eps_opt": self.config.eps_opt,
                "eta": self.config.eta,
                "signed_eps": self.config.signed_eps,
            },
            "estimate": self.estimate.to_dict(),
            "modification": self.state.to_dict(),
            "trace": self.trace.to_dict(),
            "ledger": self.ledger.to_dict(),
            "timings": dict(self.timings),
        }


def estimate_failure_probability(model, hier, M: int, cfg: HybridConfig, seed: int,
                                 batch: SampleBatch | None = None) -> HNHResult:
    """Sample, modify labels through the hierarchy, then correct with the true model."""
    if hier.input_dim != model.dim:
        raise ValueError(f"hierarchy input dimension {hier.input_dim} does not match "
                         f"model dimension {model.dim}")
    cfg = cfg.resolved(M, hier.L)
    timings = {}
    t0 = time.perf_counter()
    if batch is None:
        batch = sample(model.distribution, M, seed)
    elif batch.M != M:
        raise ValueError("batch size does not match M")
    timings["sample"] = time.perf_counter() - t0
    ledger = hier.new_ledger()
    t0 = time.perf_counter()
    labels, state = modify_labels(hier, batch, cfg.eta, ledger, cfg.signed_eps)
    timings["modify"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    estimate, trace = iterate(labels, state, batch, model, cfg, ledger)
    timings["iterate"] = time.perf_counter() - t0
    return HNHResult(estimate, trace, ledger, state, labels, batch, cfg, timings)
