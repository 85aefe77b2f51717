"""Five-point finite differences for ``-lap(u) - k(x)^2 u = 0`` on a rectangle.

Dirichlet data everywhere on the boundary: ``u = forcing(y)`` on ``x = x0``
(default ``sin(pi y)``), zero elsewhere.  The indefinite system is factored
with LAPACK's banded LU (``dgbtrf``); a pivot below ``pivot_tol`` relative
to the largest matrix entry is reported as a resonance.
"""
from __future__ import annotations

import numpy as np
import scipy.sparse as sp
from scipy.linalg import lapack

from ..core import ParameterDistribution
from .base import SolverError
from .grid import Grid2D
from .kl import KLField, kl_realize_batch


class ResonanceError(SolverError):
    def __init__(self, pivot: float, sample_index=None):
        self.pivot = pivot
        self.sample_index = sample_index
        who = f"sample {sample_index}: " if sample_index is not None else ""
        super().__init__(f"{who}near-singular Helmholtz system (relative pivot {pivot:.3e})")


def sine_forcing(y: np.ndarray) -> np.ndarray:
    return np.sin(np.pi * y)


class HelmholtzSolver:
    def __init__(self, grid: Grid2D, forcing=sine_forcing, pivot_tol: float = 1e-12,
                 residual_tol: float = 1e-10):
        self.grid = grid
        self.forcing = forcing
        self.pivot_tol = pivot_tol
        self.residual_tol = residual_tol
        self.mx, self.my = grid.nx - 2, grid.ny - 2
        if self.mx < 1 or self.my < 1:
            raise ValueError("grid has no interior nodes")
        self.n = self.mx * self.my
        self.cx, self.cy = 1.0 / grid.hx ** 2, 1.0 / grid.hy ** 2
        # boundary contribution to the right-hand side (left edge only carries data)
        rhs = np.zeros((self.my, self.mx))
        rhs[:, 0] = self.cx * np.asarray(forcing(grid.y[1:-1]), dtype=float)
        self.rhs = rhs.ravel()
        self.boundary = np.zeros((grid.ny, grid.nx))
        self.boundary[:, 0] = forcing(grid.y)

    def matrix(self, k_grid) -> sp.csr_matrix:
        k2 = np.asarray(k_grid, dtype=float)[1:-1, 1:-1].ravel() ** 2
        mx, n = self.mx, self.n
        main = 2 * self.cx + 2 * self.cy - k2
        east = np.full(n - 1, -self.cx)
        east[np.arange(1, n) % mx == 0] = 0.0
        north = np.full(n - mx, -self.cy)
        return sp.diags([main, east, east, north, north], [0, 1, -1, mx, -mx], format="csr")

    def _band(self, k_grid, scale: float = 1.0) -> np.ndarray:
        """LAPACK ``gb`` storage with ``kl`` extra rows for the LU fill-in."""
        k2 = np.asarray(k_grid, dtype=float)[1:-1, 1:-1].ravel() ** 2
        mx, n = self.mx, self.n
        kl = ku = mx
        ab = np.zeros((2 * kl + ku + 1, n))
        d0 = kl + ku  # row of the main diagonal
        ab[d0] = 2 * self.cx + 2 * self.cy - k2
        east = np.full(n, -self.cx)
        east[np.arange(n) % mx == 0] = 0.0  # A[j-1, j] = 0 across a row break
        ab[d0 - 1, 1:] = east[1:]
        west = np.full(n, -self.cx)
        west[np.arange(n) % mx == mx - 1] = 0.0  # A[j+1, j]
        ab[d0 + 1, :-1] = west[:-1]
        if mx < n:
            ab[d0 - mx, mx:] = -self.cy
            ab[d0 + mx, :-mx] = -self.cy
        return ab

    def solve(self, k_grid, scale: float = 1.0, sample_index=None) -> np.ndarray:
        """Nodal solution ``(ny, nx)``; ``scale`` multiplies the boundary forcing."""
        k_grid = np.asarray(k_grid, dtype=float)
        if k_grid.shape != (self.grid.ny, self.grid.nx):
            raise ValueError("k field shape does not match the grid")
        if not np.all(np.isfinite(k_grid)):
            raise SolverError(f"non-finite wavenumber field (sample {sample_index})")
        ab = self._band(k_grid)
        kl = ku = self.mx
        amax = np.abs(ab).max()
        lu, piv, info = lapack.dgbtrf(ab, kl, ku)
        diagU = np.abs(lu[kl + ku])
        rel = float(diagU.min() / amax)
        if info > 0 or rel < self.pivot_tol:
            raise ResonanceError(rel, sample_index)
        b = scale * self.rhs
        x, info = lapack.dgbtrs(lu, kl, ku, b, piv)
        if info != 0:
            raise SolverError(f"banded solve failed (info={info})")
        A = self.matrix(k_grid)
        res = np.linalg.norm(A @ x - b) / max(np.linalg.norm(b), 1e-300)
        if res > self.residual_tol:
            raise SolverError(f"sample {sample_index}: residual {res:.2e} above tolerance")
        u = scale * self.boundary.copy()
        u[1:-1, 1:-1] = x.reshape(self.my, self.mx)
        return u


class HelmholtzModel:
    """Wavenumber ``k = k0 * (1 + sum sqrt(lambda_k) a_k xi_k)`` from a KL field with mean 1."""

    cost_class = "pde_solve"

    def __init__(self, field: KLField, k0: float = 3.7, threshold: float = 1.09,
                 sensor=(0.7264, 0.4912), xi_kind: str = "uniform", pivot_tol: float = 1e-12):
        self.field = field
        self.grid = field.grid
        self.k0 = float(k0)
        self.threshold = float(threshold)
        self.sensor = tuple(sensor)
        self.grid.check_inside(self.sensor)
        self.dim = field.d
        if xi_kind == "uniform":
            self.distribution = ParameterDistribution("uniform", field.d, -1.0, 1.0)
        elif xi_kind == "normal":
            self.distribution = ParameterDistribution("normal", field.d)
        else:
            raise ValueError(f"unknown xi distribution {xi_kind!r}")
        self.solver = HelmholtzSolver(self.grid, pivot_tol=pivot_tol)

    def wavenumbers(self, Xi, first_index: int = 0) -> np.ndarray:
        return self.k0 * kl_realize_batch(self.field, Xi, a_min=None, first_index=first_index)

    def solve_fields(self, Xi, first_index: int = 0) -> np.ndarray:
        K = self.wavenumbers(Xi, first_index)
        return np.stack([self.solver.solve(k, sample_index=first_index + i) for i, k in enumerate(K)])


def helmholtz_solve(model, k_grid, scale: float = 1.0) -> np.ndarray:
    solver = model.solver if hasattr(model, "solver") else model
    return solver.solve(k_grid, scale)
