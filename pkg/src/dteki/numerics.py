"""Deterministic random streams and the dense linear-algebra kernels shared by all modules.

Everything is 64-bit floating point: ensemble Kalman updates factor empirical
covariances that are close to semi-definite, and 32-bit arithmetic is not safe
for them.
"""

from __future__ import annotations

import numpy as np
from numpy.typing import NDArray
from scipy.linalg import lapack

Array = NDArray[np.float64]


class IndefiniteSystemError(np.linalg.LinAlgError):
    """A supposedly SPD matrix failed its symmetric factorization."""

    def __init__(self, pivot: int):
        self.pivot = int(pivot)
        super().__init__(f"indefinite system: factorization failed at pivot {self.pivot}")


class SeededRng:
    """Counter-based random stream (Philox) with keyed splitting.

    A child stream is determined by (root seed, key path) only, so per-member /
    per-iteration draws are reproducible regardless of the order in which
    streams are created or consumed.
    """

    def __init__(self, seed: int, key: tuple[int, ...] = ()):
        self.seed = int(seed)
        self.key = tuple(int(k) for k in key)
        seq = np.random.SeedSequence(self.seed, spawn_key=self.key)
        self.gen = np.random.Generator(np.random.Philox(seq))

    def child(self, *key: int) -> "SeededRng":
        """Derive an independent stream keyed by integers (e.g. iteration index)."""
        return SeededRng(self.seed, self.key + tuple(int(k) for k in key))

    def standard_normal(self, shape) -> Array:
        return self.gen.standard_normal(shape, dtype=np.float64)

    def uniform(self, low: float, high: float, shape) -> Array:
        return self.gen.uniform(low, high, shape).astype(np.float64, copy=False)

    def bernoulli(self, rho: float, shape) -> Array:
        """0/1 draws with P(1) = rho, returned as float64 for masking."""
        if not 0.0 <= rho <= 1.0:
            raise ValueError(f"bernoulli probability must lie in [0, 1], got {rho}")
        if rho >= 1.0:
            return np.ones(shape, dtype=np.float64)
        return (self.gen.random(shape) < rho).astype(np.float64)

    def permutation(self, n: int) -> NDArray[np.int64]:
        return self.gen.permutation(n)

    def choice(self, n: int, size: int, replace: bool = False) -> NDArray[np.int64]:
        return self.gen.choice(n, size=size, replace=replace)


def sample_standard_normal(rng: SeededRng, n: int) -> Array:
    return rng.standard_normal(n)


def sample_bernoulli(rng: SeededRng, rho: float, n: int) -> Array:
    return rng.bernoulli(rho, n)


def spd_solve(a: Array, b: Array) -> Array:
    """Solve A X = B for symmetric positive definite A.

    One Cholesky factorization per call, reused across all columns of B. If the
    factorization fails (empirical covariances can be numerically semi-definite)
    a single diagonal jitter of 1e-10 * trace(A)/dim is added and the
    factorization retried; a second failure raises IndefiniteSystemError naming
    the failing pivot.
    """
    a = np.ascontiguousarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"expected square matrix, got shape {a.shape}")
    b = np.asarray(b, dtype=np.float64)
    squeeze = b.ndim == 1
    if squeeze:
        b = b[:, None]
    if b.shape[0] != a.shape[0]:
        raise ValueError(f"dimension mismatch: A is {a.shape}, B has {b.shape[0]} rows")

    c, info = lapack.dpotrf(a, lower=1, clean=0, overwrite_a=0)
    if info > 0:
        jitter = 1e-10 * np.trace(a) / a.shape[0]
        c, info = lapack.dpotrf(a + jitter * np.eye(a.shape[0]), lower=1, clean=0)
        if info > 0:
            raise IndefiniteSystemError(info)
    if info < 0:
        raise ValueError(f"illegal argument {-info} to dpotrf")

    x, info = lapack.dpotrs(c, b, lower=1)
    if info != 0:
        raise np.linalg.LinAlgError(f"triangular solve failed with info={info}")
    return x[:, 0] if squeeze else x


def thin_svd(g: Array) -> tuple[Array, Array, Array]:
    """Thin SVD: G = W diag(s) V^T with W (n x r), s descending, V (k x r).

    r = min(n, k). gesdd occasionally fails to converge; fall back to the
    slower gesvd driver in that case.
    """
    g = np.asarray(g, dtype=np.float64)
    if g.ndim != 2 or g.shape[0] < 1 or g.shape[1] < 1:
        raise ValueError(f"expected a non-empty 2-d matrix, got shape {g.shape}")
    try:
        w, s, vt = np.linalg.svd(g, full_matrices=False)
    except np.linalg.LinAlgError:
        import scipy.linalg as sla

        w, s, vt = sla.svd(g, full_matrices=False, lapack_driver="gesvd")
    return w, s, vt.T
