from __future__ import annotations

import math

import numpy as np

from ..core import ParameterDistribution
from .base import LimitStateModel


class BenchmarkModel(LimitStateModel):
    """Linear structural-safety benchmark ``g(z) = beta*sqrt(n) - sum(z)``, ``z ~ N(0, I_n)``.

    ``P(g < 0) = Phi(-beta)`` exactly.
    """

    cost_class = "analytic"

    def __init__(self, beta: float = 3.5, n: int = 50):
        if n < 1:
            raise ValueError("n must be >= 1")
        self.beta = float(beta)
        self.n = int(n)
        self.dim = self.n
        self.distribution = ParameterDistribution("normal", self.n)

    def evaluate_batch(self, Z) -> np.ndarray:
        Z = np.asarray(Z, dtype=float)
        if Z.ndim != 2 or Z.shape[1] != self.n:
            raise ValueError(f"inputs have shape {Z.shape}, model expects (*, {self.n})")
        return self.beta * math.sqrt(self.n) - Z.sum(axis=1)

    def exact_failure_probability(self) -> float:
        return 0.5 * math.erfc(self.beta / math.sqrt(2.0))


def benchmark_evaluate(model: BenchmarkModel, z) -> float:
    return model.evaluate(z)
