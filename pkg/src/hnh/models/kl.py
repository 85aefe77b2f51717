"""Truncated Karhunen-Loeve expansion of a separable exponential random field.

The covariance ``sigma^2 exp(-|x1-y1|/Lc - |x2-y2|/Lc)`` factorizes, so each
1-d kernel is discretized by a Nystrom scheme with trapezoid weights on the
grid nodes and 2-d eigenpairs are products of 1-d ones.  Eigenfunctions are
orthonormal in the tensor trapezoid inner product.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .base import SolverError
from .grid import Grid2D


class PositivityError(SolverError):
    def __init__(self, min_value: float, sample_index=None):
        self.sample_index = sample_index
        self.min_value = min_value
        who = f"sample {sample_index}" if sample_index is not None else "realization"
        super().__init__(f"{who}: coefficient field reaches {min_value:.4g}, below the positivity floor")


def trapezoid_weights(n: int, h: float) -> np.ndarray:
    w = np.full(n, h)
    w[0] = w[-1] = h / 2
    return w


def exp_kernel_1d(x: np.ndarray, corr_len: float) -> np.ndarray:
    return np.exp(-np.abs(x[:, None] - x[None, :]) / corr_len)


def _nystrom_1d(x, w, corr_len):
    """Eigenpairs (descending) of the weighted 1-d kernel; vectors are W-orthonormal."""
    sw = np.sqrt(w)
    A = sw[:, None] * exp_kernel_1d(x, corr_len) * sw[None, :]
    mu, v = np.linalg.eigh(A)
    mu, v = mu[::-1], v[:, ::-1]
    mu = np.clip(mu, 0.0, None)
    phi = v / sw[:, None]
    # sign convention: first non-negligible entry of each eigenvector is positive
    cols = np.arange(phi.shape[1])
    first = np.argmax(np.abs(phi) > 1e-8 * np.abs(phi).max(axis=0), axis=0)
    flip = np.sign(phi[first, cols])
    return mu, phi * flip


@dataclass
class KLField:
    a0: float | np.ndarray
    sigma: float
    corr_len: float
    grid: Grid2D
    eigenvalues: np.ndarray  # (d,) descending
    eigenfunctions: np.ndarray  # (d, ny, nx)
    captured_variance: float
    modes: np.ndarray  # (d, 2) indices (ix, iy) of the 1-d factors

    @property
    def d(self) -> int:
        return self.eigenvalues.size

    @property
    def weights(self) -> np.ndarray:
        """Tensor trapezoid quadrature weights, shape ``(ny, nx)``."""
        g = self.grid
        return np.outer(trapezoid_weights(g.ny, g.hy), trapezoid_weights(g.nx, g.hx))

    def scaled_modes(self) -> np.ndarray:
        """``sqrt(lambda_k) a_k`` flattened, shape ``(d, ny*nx)``."""
        return np.sqrt(self.eigenvalues)[:, None] * self.eigenfunctions.reshape(self.d, -1)


def kl_build(a0, sigma: float, corr_len: float, grid: Grid2D, d: int, check_tol: float = 1e-8) -> KLField:
    if d < 1:
        raise ValueError("need at least one KL term")
    if not corr_len > 0:
        raise ValueError("correlation length must be positive")
    if sigma < 0:
        raise ValueError("sigma must be nonnegative")
    if d > grid.n_nodes:
        raise ValueError(f"d={d} exceeds the grid rank {grid.n_nodes}")
    wx, wy = trapezoid_weights(grid.nx, grid.hx), trapezoid_weights(grid.ny, grid.hy)
    mux, phix = _nystrom_1d(grid.x, wx, corr_len)
    muy, phiy = _nystrom_1d(grid.y, wy, corr_len)
    prod = np.outer(muy, mux)  # [iy, ix]
    flat = prod.ravel()
    # descending eigenvalue, ties broken by index for determinism
    order = np.lexsort((np.arange(flat.size), -flat))[:d]
    iy, ix = np.unravel_index(order, prod.shape)
    lam = sigma ** 2 * flat[order]
    total = sigma ** 2 * float(flat.sum())
    funcs = phiy[:, iy].T[:, :, None] * phix[:, ix].T[:, None, :]  # (d, ny, nx)
    captured = float(lam.sum() / total) if total > 0 else 1.0
    field = KLField(a0, float(sigma), float(corr_len), grid, lam, funcs, captured,
                    np.stack([ix, iy], axis=1))
    gram = kl_gram(field)
    if np.max(np.abs(gram - np.eye(d))) > check_tol:
        raise RuntimeError("KL eigenfunctions failed the orthonormality check")
    if np.any(np.diff(lam) > 0) or np.any(lam < 0):
        raise RuntimeError("KL eigenvalues are not nonnegative and non-increasing")
    return field


def kl_gram(field: KLField) -> np.ndarray:
    F = field.eigenfunctions.reshape(field.d, -1)
    return (F * field.weights.ravel()) @ F.T


def _a0_flat(field: KLField) -> np.ndarray:
    a0 = np.asarray(field.a0, dtype=float)
    if a0.ndim == 0:
        return np.full(field.grid.n_nodes, float(a0))
    return a0.reshape(-1)


def kl_realize_batch(field: KLField, Xi, a_min: float | None = 1e-6, first_index: int = 0) -> np.ndarray:
    """Realizations for rows of ``Xi``; returns shape ``(B, ny, nx)``."""
    Xi = np.asarray(Xi, dtype=float)
    if Xi.ndim != 2 or Xi.shape[1] != field.d:
        raise ValueError(f"xi has shape {Xi.shape}, field expects (*, {field.d})")
    modes = field.scaled_modes()
    # term-by-term accumulation keeps each row's roundoff independent of the batch size
    A = np.repeat(_a0_flat(field)[None, :], Xi.shape[0], axis=0)
    for k in range(field.d):
        A += Xi[:, k:k + 1] * modes[k]
    if a_min is not None:
        mins = A.min(axis=1)
        bad = np.flatnonzero(mins <= a_min)
        if bad.size:
            raise PositivityError(float(mins[bad[0]]), first_index + int(bad[0]))
    return A.reshape(-1, field.grid.ny, field.grid.nx)


def kl_realize(field: KLField, xi, a_min: float | None = 1e-6, sample_index=None) -> np.ndarray:
    """``a0 + sum_k sqrt(lambda_k) a_k(x) xi_k`` on the grid nodes."""
    xi = np.asarray(xi, dtype=float)
    if xi.shape != (field.d,):
        raise ValueError(f"xi has shape {xi.shape}, field expects ({field.d},)")
    try:
        return kl_realize_batch(field, xi[None, :], a_min)[0]
    except PositivityError as exc:
        raise PositivityError(exc.min_value, sample_index) from None
