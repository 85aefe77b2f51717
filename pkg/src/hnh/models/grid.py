"""Uniform tensor grids, bilinear point sensors and the plain-text grid format.

Nodal fields are arrays of shape ``(ny, nx)``; node ``(i, j)`` sits at
``(x0 + i*hx, y0 + j*hy)`` and has flat index ``j*nx + i``.
"""
from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np


@dataclass(frozen=True)
class Grid2D:
    nx: int
    ny: int
    x0: float = 0.0
    x1: float = 1.0
    y0: float = 0.0
    y1: float = 1.0

    def __post_init__(self):
        if self.nx < 2 or self.ny < 2:
            raise ValueError("grid needs at least 2 nodes per direction")
        if not (self.x0 < self.x1 and self.y0 < self.y1):
            raise ValueError("grid extents must be increasing")

    @classmethod
    def square(cls, n: int) -> "Grid2D":
        return cls(n, n)

    @property
    def hx(self) -> float:
        return (self.x1 - self.x0) / (self.nx - 1)

    @property
    def hy(self) -> float:
        return (self.y1 - self.y0) / (self.ny - 1)

    @property
    def x(self) -> np.ndarray:
        return np.linspace(self.x0, self.x1, self.nx)

    @property
    def y(self) -> np.ndarray:
        return np.linspace(self.y0, self.y1, self.ny)

    @property
    def n_nodes(self) -> int:
        return self.nx * self.ny

    def mesh(self):
        """``(X, Y)`` coordinate arrays of shape ``(ny, nx)``."""
        return np.meshgrid(self.x, self.y)

    def check_inside(self, point) -> None:
        px, py = point
        if not (self.x0 <= px <= self.x1 and self.y0 <= py <= self.y1):
            raise ValueError(f"point {tuple(point)} lies outside the domain "
                             f"[{self.x0}, {self.x1}] x [{self.y0}, {self.y1}]")


def sensor_read(u, point, grid: Grid2D) -> float:
    """Bilinear interpolation of a nodal field at ``point``."""
    u = np.asarray(u)
    if u.shape != (grid.ny, grid.nx):
        raise ValueError(f"field shape {u.shape} does not match grid ({grid.ny}, {grid.nx})")
    grid.check_inside(point)
    sx = (point[0] - grid.x0) / grid.hx
    sy = (point[1] - grid.y0) / grid.hy
    i = min(int(np.floor(sx)), grid.nx - 2)
    j = min(int(np.floor(sy)), grid.ny - 2)
    tx, ty = sx - i, sy - j
    return float((1 - tx) * (1 - ty) * u[j, i] + tx * (1 - ty) * u[j, i + 1]
                 + (1 - tx) * ty * u[j + 1, i] + tx * ty * u[j + 1, i + 1])


def write_grid(path, field, grid: Grid2D) -> None:
    """Header line ``nx ny x0 x1 y0 y1``, then one row of ``nx`` values per y-line."""
    field = np.asarray(field, dtype=float)
    if field.shape != (grid.ny, grid.nx):
        raise ValueError("field shape does not match grid")
    lines = [f"{grid.nx} {grid.ny} {grid.x0!r} {grid.x1!r} {grid.y0!r} {grid.y1!r}"]
    lines += [" ".join(repr(float(v)) for v in row) for row in field]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.tmp{os.getpid()}")
    tmp.write_text("\n".join(lines) + "\n")
    os.replace(tmp, path)


def read_grid(path):
    """Inverse of ``write_grid``; returns ``(field, grid)``."""
    with open(path) as fh:
        head = fh.readline().split()
        grid = Grid2D(int(head[0]), int(head[1]), *map(float, head[2:6]))
        field = np.loadtxt(fh, ndmin=2)
    if field.shape != (grid.ny, grid.nx):
        raise ValueError(f"{path}: expected {grid.ny}x{grid.nx} values, found {field.shape}")
    return field, grid
