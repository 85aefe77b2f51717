"""Limit-state model interface and the threshold wrapper for PDE models."""
from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from ..core import ParameterDistribution
from .grid import sensor_read


class SolverError(RuntimeError):
    """A PDE solve failed (non-convergence, resonance, invalid coefficient)."""


WORKERS_ENV = "HNH_WORKERS"


def worker_count() -> int:
    """Process count for true-model solves, from ``HNH_WORKERS`` (default 1)."""
    raw = os.environ.get(WORKERS_ENV, "1")
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"{WORKERS_ENV} must be an integer, got {raw!r}") from None
    return max(1, n)


class LimitStateModel:
    """``g(z)`` with failure ``g < 0``.

    Subclasses set ``dim``, ``distribution`` and ``cost_class`` and implement
    ``evaluate_batch``.
    """

    dim: int
    distribution: ParameterDistribution
    cost_class: str = "analytic"

    def evaluate(self, z) -> float:
        z = np.asarray(z, dtype=float)
        if z.shape != (self.dim,):
            raise ValueError(f"input has shape {z.shape}, model expects ({self.dim},)")
        return float(self.evaluate_batch(z[None, :])[0])

    def evaluate_batch(self, Z) -> np.ndarray:
        return np.array([self.evaluate(z) for z in np.asarray(Z, dtype=float)])

    def __call__(self, z) -> float:
        return self.evaluate(z)


class ThresholdLimitState(LimitStateModel):
    """``g(xi) = threshold - u(sensor; xi)`` for a model exposing ``solve_fields``."""

    cost_class = "pde_solve"

    def __init__(self, model, sensor, threshold: float, chunk: int = 256):
        self.model = model
        self.sensor = (float(sensor[0]), float(sensor[1]))
        self.threshold = float(threshold)
        self.chunk = chunk
        self.dim = model.dim
        self.distribution = model.distribution
        model.grid.check_inside(self.sensor)

    def _chunk_values(self, Zc, first_index: int) -> np.ndarray:
        U = self.model.solve_fields(Zc, first_index=first_index)
        return np.array([sensor_read(u, self.sensor, self.model.grid) for u in U])

    def sensor_values(self, Z) -> np.ndarray:
        Z = np.asarray(Z, dtype=float)
        if Z.ndim != 2 or Z.shape[1] != self.dim:
            raise ValueError(f"inputs have shape {Z.shape}, model expects (*, {self.dim})")
        starts = list(range(0, Z.shape[0], self.chunk))
        workers = min(worker_count(), len(starts))
        if workers <= 1:
            parts = [self._chunk_values(Z[s:s + self.chunk], s) for s in starts]
        else:
            # results are gathered in submission order, so output is independent of workers
            with ProcessPoolExecutor(workers, initializer=_init_worker, initargs=(self,)) as pool:
                parts = list(pool.map(_worker_chunk, [(Z[s:s + self.chunk], s) for s in starts]))
        return np.concatenate(parts) if parts else np.empty(0)

    def evaluate_batch(self, Z) -> np.ndarray:
        return self.threshold - self.sensor_values(Z)


def model_as_limit_state(model, sensor=None, threshold=None, **kw):
    """Wrap a PDE model as ``g = threshold - u(sensor)``; limit-state models pass through."""
    if isinstance(model, LimitStateModel) and sensor is None and threshold is None:
        return model
    sensor = model.sensor if sensor is None else sensor
    threshold = model.threshold if threshold is None else threshold
    return ThresholdLimitState(model, sensor, threshold, **kw)


_WORKER_MODEL = None


def _init_worker(model):
    global _WORKER_MODEL
    _WORKER_MODEL = model


def _worker_chunk(args):
    Zc, s = args
    return _WORKER_MODEL._chunk_values(Zc, s)
