"""Limit-state models: analytic benchmark and two KL-driven PDE problems."""
from .base import LimitStateModel, SolverError, ThresholdLimitState, model_as_limit_state, worker_count
from .benchmark import BenchmarkModel, benchmark_evaluate
from .diffusion import ConvergenceError, DiffusionModel, DiffusionSolver, diffusion_solve
from .grid import Grid2D, read_grid, sensor_read, write_grid
from .helmholtz import HelmholtzModel, HelmholtzSolver, ResonanceError, helmholtz_solve
from .kl import KLField, PositivityError, kl_build, kl_realize, kl_realize_batch

__all__ = [
    "BenchmarkModel", "ConvergenceError", "DiffusionModel", "DiffusionSolver", "Grid2D",
    "HelmholtzModel", "HelmholtzSolver", "KLField", "LimitStateModel", "PositivityError",
    "ResonanceError", "SolverError", "ThresholdLimitState", "benchmark_evaluate",
    "diffusion_solve", "helmholtz_solve", "kl_build", "kl_realize", "kl_realize_batch",
    "model_as_limit_state", "read_grid", "sensor_read", "worker_count", "write_grid",
]
