"""Cell-centred discretisation of [0, 1] with reflecting (Neumann) boundaries.

A field is a plain ``numpy`` array whose last axis has length ``grid.n_cells``;
leading axes are treated as a batch everywhere in the package.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.fft

from .errors import ConformityError

# Above this size the cosine transform goes through scipy.fft instead of a dense matrix.
DENSE_TRANSFORM_MAX = 512


@dataclass(frozen=True)
class Grid:
    """Uniform grid with ``n_cells`` cells and centres ``(i + 1/2) dx``."""

    n_cells: int

    def __post_init__(self):
        if int(self.n_cells) != self.n_cells or self.n_cells < 1:
            raise ValueError(f"n_cells must be a positive integer, got {self.n_cells!r}")
        object.__setattr__(self, "n_cells", int(self.n_cells))

    @property
    def dx(self) -> float:
        return 1.0 / self.n_cells

    @cached_property
    def centers(self) -> np.ndarray:
        return (np.arange(self.n_cells) + 0.5) * self.dx

    @cached_property
    def eigenvalues(self) -> np.ndarray:
        """Eigenvalues ``mu_k`` of minus the discrete Neumann Laplacian."""
        n = self.n_cells
        k = np.arange(n)
        return 2.0 * n**2 * (1.0 - np.cos(k * np.pi / n))

    @cached_property
    def basis(self) -> np.ndarray:
        """H-orthonormal cosine modes, ``basis[k] = e_k`` sampled at the centres.

        ``e_0 = 1`` and ``e_k = sqrt(2) cos(k pi x)`` for ``k >= 1``.
        """
        k = np.arange(self.n_cells)[:, None]
        e = np.cos(np.pi * k * self.centers[None, :])
        e[1:] *= np.sqrt(2.0)
        return e

    @cached_property
    def laplacian_matrix(self) -> np.ndarray:
        n = self.n_cells
        lap = np.zeros((n, n))
        idx = np.arange(n)
        lap[idx, idx] = -2.0
        lap[idx[:-1], idx[:-1] + 1] = 1.0
        lap[idx[1:], idx[1:] - 1] = 1.0
        lap[0, 0] += 1.0
        lap[-1, -1] += 1.0
        return lap / self.dx**2

    def constant(self, value: float = 1.0) -> np.ndarray:
        return np.full(self.n_cells, float(value))

    def mode(self, k: int) -> np.ndarray:
        """Sampled cosine ``cos(k pi x_i)`` (not normalised)."""
        return np.cos(k * np.pi * self.centers)

    def probe_indices(self, xs) -> np.ndarray:
        """Indices of the cells containing the points ``xs``."""
        xs = np.asarray(xs, dtype=float)
        return np.clip(np.floor(xs * self.n_cells).astype(int), 0, self.n_cells - 1)


def check_field(grid: Grid, f) -> np.ndarray:
    f = np.asarray(f, dtype=float)
    if f.ndim == 0 or f.shape[-1] != grid.n_cells:
        raise ConformityError(
            f"field with shape {f.shape} does not conform to a grid of {grid.n_cells} cells"
        )
    return f


def inner_h(grid: Grid, f, g) -> np.ndarray | float:
    """Discrete L2[0, 1] inner product ``dx * sum_i f_i g_i`` (over the last axis)."""
    f = check_field(grid, f)
    g = check_field(grid, g)
    out = grid.dx * np.einsum("...i,...i->...", f, g)
    return float(out) if np.ndim(out) == 0 else out


def norm_h(grid: Grid, f):
    return np.sqrt(inner_h(grid, f, f))


def neumann_laplacian_apply(grid: Grid, f) -> np.ndarray:
    """Reflecting three-point stencil, ghost values ``f_{-1} = f_0``, ``f_n = f_{n-1}``."""
    f = check_field(grid, f)
    padded = np.concatenate([f[..., :1], f, f[..., -1:]], axis=-1)
    return (padded[..., :-2] - 2.0 * f + padded[..., 2:]) / grid.dx**2


def cosine_transform(grid: Grid, f, direction: str = "forward") -> np.ndarray:
    """Coefficients on the orthonormal cosine basis and back.

    ``forward`` returns ``a_k = <f, e_k>_H``; ``inverse`` maps coefficients back
    to grid values, ``f = sum_k a_k e_k``.
    """
    f = check_field(grid, f)
    n = grid.n_cells
    if n <= DENSE_TRANSFORM_MAX:
        if direction == "forward":
            return grid.dx * f @ grid.basis.T
        if direction == "inverse":
            return f @ grid.basis
    else:
        scale = np.sqrt(grid.dx)
        if direction == "forward":
            return scipy.fft.dct(f, type=2, norm="ortho", axis=-1) * scale
        if direction == "inverse":
            return scipy.fft.idct(f / scale, type=2, norm="ortho", axis=-1)
    raise ValueError(f"direction must be 'forward' or 'inverse', got {direction!r}")


def spectral_multiplier_matrix(grid: Grid, multipliers) -> np.ndarray:
    """Dense symmetric matrix ``M`` with ``f @ M = inverse(multipliers * forward(f))``."""
    e = grid.basis
    return grid.dx * (e.T * np.asarray(multipliers, dtype=float)) @ e


def wiener_covariance(grid: Grid) -> np.ndarray:
    """Covariance ``min(x_i, x_j)`` of Brownian motion at the cell centres."""
    x = grid.centers
    return np.minimum.outer(x, x)


def wiener_precision(grid: Grid) -> np.ndarray:
    """Tridiagonal inverse of :func:`wiener_covariance`, built from the increments."""
    n = grid.n_cells
    inc_var = np.full(n, grid.dx)
    inc_var[0] = grid.dx / 2.0
    diff = np.eye(n) - np.eye(n, k=-1)
    return diff.T @ (diff / inc_var[:, None])


def sample_wiener_shape(grid: Grid, rng: np.random.Generator, size=None) -> np.ndarray:
    """Brownian path from the origin sampled at the cell centres.

    The first increment (0 to ``x_0``) has variance ``dx/2``, later ones ``dx``.
    ``size`` adds leading batch dimensions.
    """
    shape = (() if size is None else tuple(np.atleast_1d(size))) + (grid.n_cells,)
    eta = rng.standard_normal(shape)
    eta *= np.sqrt(grid.dx)
    eta[..., 0] *= np.sqrt(0.5)
    return np.cumsum(eta, axis=-1)
