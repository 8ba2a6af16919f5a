"""Dense real matrix helpers shared by every other module.

Matrices are plain 2-D ``float64`` numpy arrays. The functions here add the
validation and determinism guarantees the initialization code relies on
(finite inputs, a fixed SVD sign convention, seeded orthonormal sampling).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

Matrix = np.ndarray


class NonFiniteError(ValueError):
    """Raised when a matrix contains NaN or infinite entries."""

    def __init__(self, index: tuple[int, ...], value: float, what: str = "matrix"):
        self.index = index
        self.value = value
        super().__init__(f"{what} has non-finite entry {value!r} at index {index}")


class SvdConvergenceError(RuntimeError):
    """Raised when every LAPACK driver fails to converge."""

    def __init__(self, attempts: int, detail: str):
        self.attempts = attempts
        super().__init__(f"SVD did not converge after {attempts} driver attempts: {detail}")


def as_matrix(m, what: str = "matrix") -> Matrix:
    """Coerce ``m`` to a finite 2-D float64 array."""
    arr = np.asarray(m, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr.reshape(1, -1)
    if arr.ndim != 2:
        raise ValueError(f"{what} must be 2-D, got shape {arr.shape}")
    if arr.size == 0:
        raise ValueError(f"{what} is empty")
    check_finite(arr, what)
    return arr


def check_finite(arr: np.ndarray, what: str = "matrix") -> None:
    bad = ~np.isfinite(arr)
    if bad.any():
        idx = tuple(int(i) for i in np.argwhere(bad)[0])
        raise NonFiniteError(idx, float(arr[idx]), what)


@dataclass(frozen=True)
class SvdFactors:
    """Thin SVD ``m = u @ diag(s) @ v.T`` with ``k = min(rows, cols)``."""

    u: Matrix
    s: np.ndarray
    v: Matrix

    def reconstruct(self) -> Matrix:
        return (self.u * self.s) @ self.v.T


def _fix_signs(u: Matrix, v: Matrix) -> tuple[Matrix, Matrix]:
    # largest-|entry| of each u column made non-negative; ties go to the first index
    idx = np.argmax(np.abs(u), axis=0)
    signs = np.sign(u[idx, np.arange(u.shape[1])])
    signs[signs == 0] = 1.0
    return u * signs, v * signs


def svd(m) -> SvdFactors:
    """Thin SVD with a deterministic sign convention.

    In every column of ``u`` the entry with the largest magnitude is made
    non-negative and the matching column of ``v`` is flipped with it.
    """
    arr = as_matrix(m)
    attempts = 0
    last = ""
    for driver in ("gesdd", "gesvd"):
        attempts += 1
        try:
            u, s, vt = scipy.linalg.svd(arr, full_matrices=False, lapack_driver=driver)
        except np.linalg.LinAlgError as exc:
            last = str(exc)
            continue
        u, v = _fix_signs(u, vt.T)
        return SvdFactors(u=u, s=s, v=v)
    raise SvdConvergenceError(attempts, last)


def singular_values(m) -> np.ndarray:
    return scipy.linalg.svdvals(as_matrix(m))


def frobenius_norm(m) -> float:
    arr = as_matrix(m)
    # scaled sum of squares keeps huge/tiny entries from overflowing
    scale = float(np.max(np.abs(arr)))
    if scale == 0.0:
        return 0.0
    return scale * float(np.sqrt(np.sum((arr / scale) ** 2)))


def best_rank_k(m, k: int) -> Matrix:
    """Best rank-``k`` approximation in Frobenius norm (truncated SVD)."""
    arr = as_matrix(m)
    kmax = min(arr.shape)
    if not 1 <= k <= kmax:
        raise ValueError(f"k={k} out of range [1, {kmax}] for shape {arr.shape}")
    f = svd(arr)
    return (f.u[:, :k] * f.s[:k]) @ f.v[:, :k].T


def tail_energy(s: np.ndarray, k: int) -> float:
    """sqrt(sum_{i>k} s_i^2): the Eckart-Young residual of a rank-k fit."""
    s = np.sort(np.asarray(s, dtype=np.float64))[::-1]
    return float(np.sqrt(np.sum(s[k:] ** 2)))


def random_orthonormal_columns(dim: int, count: int, seed) -> Matrix:
    """Haar-distributed ``dim x count`` matrix with orthonormal columns.

    ``seed`` may be anything ``numpy.random.default_rng`` accepts; the same
    seed always yields bit-identical output.
    """
    if dim < 1 or count < 1:
        raise ValueError("dim and count must be positive")
    if count > dim:
        raise ValueError(f"cannot draw {count} orthonormal columns in dimension {dim}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    g = rng.standard_normal((dim, count))
    q, r = np.linalg.qr(g)
    # sign correction makes the QR factor Haar distributed
    d = np.sign(np.diag(r))
    d[d == 0] = 1.0
    return q * d
