"""Dense float64 linear algebra and seeded counter-based randomness.

Every public operation validates shapes, rejects non-finite inputs, and is
deterministic for fixed inputs on a given platform. Matrices are plain
C-contiguous float64 numpy arrays throughout the package.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.linalg import solve_triangular

from .errors import NotPositiveDefiniteError, ShapeMismatchError
from .validation import as_matrix, check_finite, check_square

SYMMETRY_RTOL = 1e-12


def matmul(a, b) -> np.ndarray:
    """Matrix product with shape and finiteness checks on both sides."""
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeMismatchError(
            f"inner dimensions differ: {a.shape} @ {b.shape}"
        )
    out = a @ b
    check_finite(out, "matmul result")
    return out


def cholesky_spd(a) -> np.ndarray:
    """Lower-triangular Cholesky factor of a symmetric positive definite matrix.

    Raises NotPositiveDefiniteError if ``a`` is detectably asymmetric or any
    pivot fails to be strictly positive; the message names the offending pivot.
    """
    a = as_matrix(a, "a")
    check_square(a, "a")
    n = a.shape[0]
    scale = max(1.0, float(np.abs(a).max())) if n else 1.0
    if n and float(np.abs(a - a.T).max()) > SYMMETRY_RTOL * scale:
        raise NotPositiveDefiniteError("matrix is not symmetric")
    lower = np.zeros_like(a)
    for j in range(n):
        pivot = a[j, j] - lower[j, :j] @ lower[j, :j]
        if not (pivot > 0.0) or not math.isfinite(pivot):
            raise NotPositiveDefiniteError(
                f"pivot {j} is {pivot:.6e}; matrix is not positive definite"
            )
        ljj = math.sqrt(pivot)
        lower[j, j] = ljj
        if j + 1 < n:
            lower[j + 1 :, j] = (a[j + 1 :, j] - lower[j + 1 :, :j] @ lower[j, :j]) / ljj
    return lower


def solve_spd(a, b) -> np.ndarray:
    """Solve ``a @ x = b`` for symmetric positive definite ``a``."""
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    return solve_with_factor(cholesky_spd(a), b)


def solve_with_factor(lower: np.ndarray, b) -> np.ndarray:
    """Solve using a precomputed Cholesky factor (two triangular solves)."""
    b = as_matrix(b, "b")
    if lower.shape[0] != b.shape[0]:
        raise ShapeMismatchError(
            f"factor and right-hand side disagree: {lower.shape} vs {b.shape}"
        )
    y = solve_triangular(lower, b, lower=True, check_finite=False)
    x = solve_triangular(lower, y, lower=True, trans="T", check_finite=False)
    return x


def gumbel_from_uniform(u):
    """Map uniform(0, 1) draws to standard Gumbel variates, -log(-log(u))."""
    u = np.asarray(u, dtype=np.float64)
    if np.any(u <= 0.0) or np.any(u >= 1.0):
        raise ValueError("uniform draws must lie strictly inside (0, 1)")
    return -np.log(-np.log(u))


def rng_gumbel(rng: "Rng", shape) -> np.ndarray:
    """Standard Gumbel draws from ``rng`` with the open-interval guard applied."""
    return rng.gumbel(shape)


class Rng:
    """Counter-based (Philox) random stream keyed by (seed, stream).

    Equal keys give bitwise-identical draw sequences. ``substream`` derives an
    independent stream from the same root seed, so components that draw in
    different orders (weight init, shuffling, noise) never couple.
    """

    def __init__(self, seed: int, stream: int = 0):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.stream = int(stream) & 0xFFFFFFFFFFFFFFFF
        key = np.array([self.seed, self.stream], dtype=np.uint64)
        self._gen = np.random.Generator(np.random.Philox(key=key))

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        return f"Rng(seed={self.seed}, stream={self.stream})"

    def substream(self, stream: int) -> "Rng":
        """A fresh stream keyed off the root seed; independent of this one."""
        return Rng(self.seed, stream)

    def random(self, shape=None) -> np.ndarray:
        """Uniform draws on [0, 1)."""
        return self._gen.random(shape)

    def uniform_open(self, shape=None):
        """Uniform draws on the open interval (0, 1); zeros are redrawn."""
        u = self._gen.random(shape)
        if np.ndim(u) == 0:
            while u == 0.0:
                u = self._gen.random()
            return u
        mask = u == 0.0
        while mask.any():
            u[mask] = self._gen.random(int(mask.sum()))
            mask = u == 0.0
        return u

    def gumbel(self, shape=None):
        """Standard Gumbel draws via the inverse-CDF transform."""
        return gumbel_from_uniform(self.uniform_open(shape))

    def normal(self, shape=None, scale: float = 1.0):
        return self._gen.normal(0.0, scale, shape)

    def integers(self, low: int, high: int, shape=None):
        """Integer draws from [low, high)."""
        return self._gen.integers(low, high, size=shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)
