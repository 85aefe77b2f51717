"""Sampling, failure indicators, Monte Carlo / hybrid estimators and cost accounting.

Failure is always the event ``g(z) < 0``.  Random numbers come from numpy's
Philox4x64-10 counter-based bit generator, so a batch is fully determined by
``(distribution, M, seed)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

TRUE_MODEL = 0
"""Provenance tag for labels produced by the true limit-state model."""

INF = math.inf


class EstimationError(RuntimeError):
    """Raised when an estimator input is unusable (empty, non-finite, ...)."""


@dataclass(frozen=True)
class ParameterDistribution:
    """Law of the random input vector: iid standard normal or iid uniform(lo, hi)."""

    kind: str = "normal"
    dim: int = 1
    lo: float = -1.0
    hi: float = 1.0

    def __post_init__(self):
        if self.kind not in ("normal", "uniform"):
            raise ValueError(f"unknown distribution kind {self.kind!r}")
        if int(self.dim) != self.dim or self.dim < 1:
            raise ValueError(f"dim must be a positive integer, got {self.dim}")
        if self.kind == "uniform" and not self.lo < self.hi:
            raise ValueError(f"uniform bounds need lo < hi, got ({self.lo}, {self.hi})")

    @property
    def variance(self) -> float:
        if self.kind == "normal":
            return 1.0
        return (self.hi - self.lo) ** 2 / 12.0

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "dim": self.dim}
        if self.kind == "uniform":
            d.update(lo=self.lo, hi=self.hi)
        return d


def make_rng(seed: int) -> np.random.Generator:
    """Seeded Philox4x64-10 generator; the seed is reduced to 64 bits."""
    return np.random.Generator(np.random.Philox(int(seed) % 2**64))


@dataclass
class SampleBatch:
    values: np.ndarray
    seed: int
    distribution: ParameterDistribution

    def __post_init__(self):
        if self.values.ndim != 2 or self.values.shape[1] != self.distribution.dim:
            raise ValueError("sample matrix must be M x dim")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("sample matrix contains non-finite entries")

    def __len__(self) -> int:
        return self.values.shape[0]

    @property
    def M(self) -> int:
        return self.values.shape[0]


def sample(dist: ParameterDistribution, M: int, seed: int) -> SampleBatch:
    """Draw ``M`` iid vectors from ``dist``; deterministic in ``(dist, M, seed)``."""
    if M < 1:
        raise ValueError(f"need M >= 1 samples, got {M}")
    rng = make_rng(seed)
    if dist.kind == "normal":
        values = rng.standard_normal((M, dist.dim))
    else:
        values = rng.uniform(dist.lo, dist.hi, size=(M, dist.dim))
    return SampleBatch(values, int(seed), dist)


@dataclass
class FailureLabelVector:
    labels: np.ndarray
    provenance: np.ndarray

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int8)
        self.provenance = np.asarray(self.provenance, dtype=np.int16)
        if self.labels.shape != self.provenance.shape or self.labels.ndim != 1:
            raise ValueError("labels and provenance must be 1-d vectors of equal length")
        if np.any((self.labels != 0) & (self.labels != 1)):
            raise ValueError("labels must be 0 or 1")

    def __len__(self) -> int:
        return self.labels.size

    @classmethod
    def from_values(cls, g_values: np.ndarray, level: int) -> "FailureLabelVector":
        g_values = np.asarray(g_values, dtype=float)
        return cls((g_values < 0).astype(np.int8), np.full(g_values.size, level, dtype=np.int16))

    def copy(self) -> "FailureLabelVector":
        return FailureLabelVector(self.labels.copy(), self.provenance.copy())


@dataclass(frozen=True)
class FailureEstimate:
    p_hat: float
    failures: int
    samples: int
    std_err: float
    no_failures: bool = False

    @classmethod
    def from_counts(cls, failures: int, samples: int) -> "FailureEstimate":
        failures, samples = int(failures), int(samples)
        p = failures / samples
        se = math.sqrt(p * (1.0 - p) / samples)
        return cls(p, failures, samples, se, failures == 0)

    def to_dict(self) -> dict:
        return {
            "p_hat": self.p_hat,
            "failures": self.failures,
            "samples": self.samples,
            "std_err": self.std_err,
            "no_failures": self.no_failures,
        }


def mc_estimate(labels) -> FailureEstimate:
    """Plain Monte Carlo ratio of failures to samples."""
    arr = labels.labels if isinstance(labels, FailureLabelVector) else np.asarray(labels)
    if arr.size == 0:
        raise EstimationError("cannot estimate from an empty label vector")
    # the integer count is order independent, so the estimate is permutation invariant
    return FailureEstimate.from_counts(int(np.count_nonzero(arr)), arr.size)


@dataclass
class CostLedger:
    """Counts of true-model solves and per-level surrogate evaluations.

    ``depths`` and ``width`` describe the hierarchy and convert evaluations to
    layer units ``evals * depth * width**2``.
    """

    depths: tuple
    width: int
    true_solves: int = 0
    surrogate_evals: list = field(default_factory=list)

    def __post_init__(self):
        self.depths = tuple(int(p) for p in self.depths)
        self.width = int(self.width)
        if not self.surrogate_evals:
            self.surrogate_evals = [0] * len(self.depths)
        self.surrogate_evals = [int(c) for c in self.surrogate_evals]
        if len(self.surrogate_evals) != len(self.depths):
            raise ValueError("one evaluation counter per level is required")
        if self.true_solves < 0 or any(c < 0 for c in self.surrogate_evals):
            raise ValueError("ledger counts must be nonnegative")

    @property
    def L(self) -> int:
        return len(self.depths)

    def add_surrogate(self, level: int, count: int) -> None:
        """Record ``count`` evaluations of level ``level`` (1-based)."""
        if count < 0:
            raise ValueError("negative evaluation count")
        self.surrogate_evals[level - 1] += int(count)

    def add_true(self, count: int) -> None:
        if count < 0:
            raise ValueError("negative solve count")
        self.true_solves += int(count)

    @property
    def layer_units(self) -> int:
        n2 = self.width * self.width
        return sum(e * p * n2 for e, p in zip(self.surrogate_evals, self.depths))

    def empty_like(self) -> "CostLedger":
        return CostLedger(self.depths, self.width)

    def to_dict(self) -> dict:
        return {
            "depths": list(self.depths),
            "width": self.width,
            "true_solves": self.true_solves,
            "surrogate_evals": list(self.surrogate_evals),
            "layer_units": self.layer_units,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CostLedger":
        return cls(tuple(d["depths"]), d["width"], d["true_solves"], list(d["surrogate_evals"]))


def merge_ledgers(a: CostLedger, b: CostLedger) -> CostLedger:
    if a.depths != b.depths or a.width != b.width:
        raise ValueError(
            f"ledger metadata mismatch: depths {a.depths} vs {b.depths}, width {a.width} vs {b.width}"
        )
    return CostLedger(
        a.depths,
        a.width,
        a.true_solves + b.true_solves,
        [x + y for x, y in zip(a.surrogate_evals, b.surrogate_evals)],
    )


@dataclass(frozen=True)
class HybridConfig:
    """Estimator settings.

    gamma is the half-width of the suspicious band for the one-shot hybrid
    estimator; delta_M / eps_opt drive the iterative correction and eta the
    per-part stop threshold of the hierarchical modification.  ``None`` for
    eps_opt or eta means "half of one label change" at the run's M.
    """

    gamma: float = 0.0
    delta_M: int = 500
    eps_opt: float | None = None
    eta: float | None = None
    signed_eps: bool = False

    def __post_init__(self):
        if not self.gamma >= 0:
            raise ValueError("gamma must be nonnegative")
        if self.delta_M < 1:
            raise ValueError("delta_M must be a positive integer")
        if self.eps_opt is not None and not self.eps_opt > 0:
            raise ValueError("eps_opt must be positive")
        if self.eta is not None and not self.eta >= 0:
            raise ValueError("eta must be nonnegative")

    def resolved(self, M: int, L: int) -> "HybridConfig":
        if self.delta_M > M:
            raise ValueError(f"delta_M={self.delta_M} exceeds M={M}")
        eps = self.eps_opt if self.eps_opt is not None else 0.5 / M
        eta = self.eta if self.eta is not None else 0.5 * L / M
        return HybridConfig(self.gamma, self.delta_M, eps, eta, self.signed_eps)


def evaluate_true(true_model, values: np.ndarray) -> np.ndarray:
    """Evaluate a limit-state model on rows of ``values`` (batch API if available)."""
    if hasattr(true_model, "evaluate_batch"):
        out = np.asarray(true_model.evaluate_batch(values), dtype=float)
    else:
        out = np.array([float(true_model(z)) for z in values])
    return out


def check_finite(values: np.ndarray, what: str = "surrogate") -> np.ndarray:
    values = np.asarray(values, dtype=float)
    bad = np.flatnonzero(~np.isfinite(values))
    if bad.size:
        raise EstimationError(f"non-finite {what} value at sample index {int(bad[0])}")
    return values


def hybrid_estimate(
    surrogate_values: Sequence[float],
    true_model,
    batch: SampleBatch,
    gamma: float,
    ledger: CostLedger | None = None,
) -> FailureEstimate:
    """One-shot hybrid estimator with suspicious band ``|g_hat| <= gamma``.

    Samples with ``g_hat < -gamma`` count as failures outright; samples inside
    the band are re-checked with ``true_model``.
    """
    if not gamma >= 0:
        raise ValueError("gamma must be nonnegative")
    g_hat = check_finite(surrogate_values)
    if g_hat.size != batch.M:
        raise ValueError("one surrogate value per sample is required")
    suspicious = np.abs(g_hat) <= gamma
    labels = (g_hat < -gamma).astype(np.int8)
    idx = np.flatnonzero(suspicious)
    if idx.size:
        g_true = evaluate_true(true_model, batch.values[idx])
        labels[idx] = (g_true < 0).astype(np.int8)
        if ledger is not None:
            ledger.add_true(idx.size)
    return mc_estimate(labels)
