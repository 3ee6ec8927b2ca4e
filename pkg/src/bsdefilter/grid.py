"""Equidistant quadrature grids and Riemann-sum normalization."""

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateError


@dataclass(frozen=True)
class QuadratureGrid:
    lo: float = -5.0
    hi: float = 5.0
    J: int = 1000

    def __post_init__(self):
        if self.J < 2:
            raise ValueError("J must be at least 2")
        if not self.hi > self.lo:
            raise ValueError("need hi > lo")

    @property
    def dz(self):
        return (self.hi - self.lo) / (self.J - 1)

    @property
    def points(self):
        return np.linspace(self.lo, self.hi, self.J)

    def subset(self, count):
        """``count`` equidistant points spanning the same interval."""
        return np.linspace(self.lo, self.hi, count)


def eval_on_grid(g, grid):
    """Evaluate ``g`` at every grid point; ``g`` receives a ``(J, 1)`` array."""
    return np.asarray(g(grid.points[:, None]), dtype=float).reshape(grid.J)


def riemann_sum(values, grid):
    """``sum_j values[..., j] * dz`` over the trailing grid axis."""
    return np.sum(values, axis=-1) * grid.dz


def normalize(g, grid):
    """Riemann-sum mass of a nonnegative function on the grid.

    ``g`` may be a callable or the already evaluated values.
    """
    values = eval_on_grid(g, grid) if callable(g) else np.asarray(g, dtype=float)
    c = riemann_sum(values, grid)
    if np.any(c <= 0.0):
        raise DegenerateError("zero mass on the quadrature grid")
    return c
