"""Gaussian kernel evaluation.

The kernel is ``K(x, y) = exp(-||x - y||^2 / (2 sigma^2))``.  Dense blocks
are produced tile by tile so that callers streaming over a large set of
rows never hold more than ``tile_rows x len(B)`` kernel values at once.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .errors import InputError

DEFAULT_TILE_ROWS = 256


@dataclass(frozen=True)
class GaussianKernelParams:
    sigma: float

    def __post_init__(self):
        if not np.isfinite(self.sigma) or self.sigma <= 0:
            raise InputError(f"kernel bandwidth must be positive, got sigma={self.sigma!r}")

    @property
    def gamma(self) -> float:
        """Coefficient of the squared distance in the exponent."""
        return 1.0 / (2.0 * self.sigma * self.sigma)


def _as_matrix(a, name: str) -> np.ndarray:
    a = np.asarray(a)
    if a.ndim == 1:
        a = a[None, :]
    if a.ndim != 2:
        raise InputError(f"{name} must be a 2-D array of feature vectors, got shape {a.shape}")
    return a


def gaussian_kernel(x, y, params: GaussianKernelParams) -> float:
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.shape != y.shape or x.size == 0:
        raise InputError(f"dimension mismatch: {x.shape} vs {y.shape}")
    diff = x - y
    return float(np.exp(-params.gamma * np.dot(diff, diff)))


class KernelTiler:
    """Evaluate kernel rows ``K(A[i:j], B)`` against a fixed right-hand set.

    Squared norms and the centering shift of ``B`` are computed once, which
    is what the solver needs when it sweeps over ``A`` at every iteration.
    """

    def __init__(self, B, params: GaussianKernelParams):
        B = _as_matrix(B, "B").astype(np.float64, copy=False)
        self.params = params
        # centering limits cancellation in the expanded squared distance
        self.shift = B.mean(axis=0) if B.shape[0] else np.zeros(B.shape[1])
        self.B = B - self.shift
        self.B_sq = np.einsum("ij,ij->i", self.B, self.B)

    @property
    def dim(self) -> int:
        return self.B.shape[1]

    def rows(self, A_tile) -> np.ndarray:
        A_tile = _as_matrix(A_tile, "A").astype(np.float64, copy=False)
        if A_tile.shape[1] != self.dim:
            raise InputError(
                f"dimension mismatch: queries have d={A_tile.shape[1]}, centers have d={self.dim}")
        a = A_tile - self.shift
        a_sq = np.einsum("ij,ij->i", a, a)
        out = a @ self.B.T
        out *= -2.0
        out += a_sq[:, None]
        out += self.B_sq[None, :]
        np.maximum(out, 0.0, out=out)
        out *= -self.params.gamma
        np.exp(out, out=out)
        return out


def iter_kernel_tiles(A, B, params: GaussianKernelParams,
                      tile_rows: int = DEFAULT_TILE_ROWS,
                      tiler: KernelTiler | None = None) -> Iterator[tuple[int, int, np.ndarray]]:
    """Yield ``(start, stop, K(A[start:stop], B))`` for consecutive row tiles."""
    if tile_rows < 1:
        raise InputError(f"tile_rows must be >= 1, got {tile_rows}")
    A = _as_matrix(A, "A")
    tiler = tiler or KernelTiler(B, params)
    if A.shape[1] != tiler.dim:
        raise InputError(f"dimension mismatch: A has d={A.shape[1]}, B has d={tiler.dim}")
    for start in range(0, A.shape[0], tile_rows):
        stop = min(start + tile_rows, A.shape[0])
        yield start, stop, tiler.rows(A[start:stop])


def kernel_block(A, B, params: GaussianKernelParams,
                 tile_rows: int = DEFAULT_TILE_ROWS) -> np.ndarray:
    """Dense ``len(A) x len(B)`` Gaussian kernel matrix.

    When ``B`` is ``A`` (the same object) the result is a self-block: it is
    symmetrized and its diagonal is set to exactly 1.
    """
    same = B is A
    A = _as_matrix(A, "A")
    B = _as_matrix(B, "B")
    if A.shape[1] != B.shape[1]:
        raise InputError(f"dimension mismatch: A has d={A.shape[1]}, B has d={B.shape[1]}")
    out = np.empty((A.shape[0], B.shape[0]), dtype=np.float64)
    for start, stop, tile in iter_kernel_tiles(A, B, params, tile_rows):
        out[start:stop] = tile
    if same:
        out += out.T
        out *= 0.5
        np.fill_diagonal(out, 1.0)
    return out
