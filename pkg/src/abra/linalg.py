"""Dense float64 linear algebra used by all weight surgery.

Matrices are plain 2-D ``numpy.ndarray`` objects of dtype float64.  The only
structured type is :class:`SvdFactors`, which fixes a sign convention so that
two independent decompositions of the same matrix agree bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError, NumericError

__all__ = [
    "Tolerance",
    "SvdFactors",
    "as_matrix",
    "svd",
    "reconstruct",
    "frobenius_distance",
    "is_orthogonal",
    "orthogonality_residual",
    "apply_sign_convention",
]

ORTHONORMAL_TOL = 1e-10
ROUND_TRIP_TOL = 1e-9


@dataclass(frozen=True)
class Tolerance:
    abs: float = 1e-10
    rel: float = 0.0

    def __post_init__(self):
        if self.abs < 0 or self.rel < 0:
            raise ConfigError(f"tolerances must be non-negative, got abs={self.abs} rel={self.rel}")


def _tol(tol: Tolerance | float) -> Tolerance:
    return tol if isinstance(tol, Tolerance) else Tolerance(abs=float(tol))


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    """Return ``a`` as a finite 2-D float64 array (no copy when already one)."""
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise DimensionError(f"{name}: expected a 2-D matrix, got shape {m.shape}")
    if m.shape[0] < 1 or m.shape[1] < 1:
        raise DimensionError(f"{name}: empty matrix of shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise NumericError(f"{name}: non-finite entries in matrix of shape {m.shape}")
    return m


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=np.float64, copy=True)
    a.setflags(write=False)
    return a


def apply_sign_convention(u: np.ndarray, v_t: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Flip singular pairs so each column of ``u`` has a non-negative largest-magnitude entry.

    ``argmax`` returns the first maximiser, which breaks ties toward the lowest row index.
    """
    u = np.array(u, dtype=np.float64, copy=True)
    v_t = np.array(v_t, dtype=np.float64, copy=True)
    pivots = np.argmax(np.abs(u), axis=0)
    flip = u[pivots, np.arange(u.shape[1])] < 0
    u[:, flip] *= -1.0
    v_t[flip, :] *= -1.0
    return u, v_t


@dataclass(frozen=True, eq=False)
class SvdFactors:
    """Thin SVD ``u @ diag(sigma) @ v_t`` with sigma sorted non-increasing.

    Unsorted sigma is reordered at construction together with the matching
    columns of ``u`` and rows of ``v_t``, so the represented matrix never changes.
    """

    u: np.ndarray
    sigma: np.ndarray
    v_t: np.ndarray

    def __post_init__(self):
        u = np.asarray(self.u, dtype=np.float64)
        sigma = np.asarray(self.sigma, dtype=np.float64)
        v_t = np.asarray(self.v_t, dtype=np.float64)
        if u.ndim != 2 or v_t.ndim != 2 or sigma.ndim != 1:
            raise DimensionError(
                f"factor ranks must be (2, 1, 2), got u{u.shape} sigma{sigma.shape} v_t{v_t.shape}"
            )
        k = sigma.shape[0]
        if u.shape[1] != k or v_t.shape[0] != k:
            raise DimensionError(
                f"inconsistent factor shapes u{u.shape} sigma{sigma.shape} v_t{v_t.shape}"
            )
        if np.any(sigma < 0):
            raise ConfigError("singular values must be non-negative")
        order = np.argsort(-sigma, kind="stable")
        if np.any(order != np.arange(k)):
            u, sigma, v_t = u[:, order], sigma[order], v_t[order, :]
        object.__setattr__(self, "u", _frozen(u))
        object.__setattr__(self, "sigma", _frozen(sigma))
        object.__setattr__(self, "v_t", _frozen(v_t))

    @property
    def k(self) -> int:
        return self.sigma.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return (self.u.shape[0], self.v_t.shape[1])

    @property
    def v(self) -> np.ndarray:
        return self.v_t.T

    def __eq__(self, other):
        if not isinstance(other, SvdFactors):
            return NotImplemented
        return (
            np.array_equal(self.u, other.u)
            and np.array_equal(self.sigma, other.sigma)
            and np.array_equal(self.v_t, other.v_t)
        )

    __hash__ = None


def orthogonality_residual(q: np.ndarray) -> float:
    """``||Q^T Q - I||_F`` for a matrix with orthonormal columns expected."""
    q = np.asarray(q, dtype=np.float64)
    return float(np.linalg.norm(q.T @ q - np.eye(q.shape[1])))


def svd(w) -> SvdFactors:
    """Thin SVD with k = min(rows, cols), descending sigma, deterministic signs."""
    w = as_matrix(w, "svd input")
    try:
        u, s, v_t = np.linalg.svd(w, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"SVD did not converge for matrix of shape {w.shape}") from exc
    u, v_t = apply_sign_convention(u, v_t)
    factors = SvdFactors(u, s, v_t)

    ru, rv = orthogonality_residual(factors.u), orthogonality_residual(factors.v_t.T)
    if ru > ORTHONORMAL_TOL or rv > ORTHONORMAL_TOL:
        raise NumericError(
            f"SVD of shape {w.shape} lost orthonormality (U: {ru:.3e}, V: {rv:.3e})"
        )
    err = np.linalg.norm(reconstruct(factors) - w)
    if err > ROUND_TRIP_TOL * max(1.0, float(np.linalg.norm(w))):
        raise NumericError(f"SVD of shape {w.shape} failed round trip (error {err:.3e})")
    return factors


def reconstruct(f: SvdFactors) -> np.ndarray:
    """``U diag(sigma) V^T``."""
    if f.u.shape[1] != f.k or f.v_t.shape[0] != f.k:
        raise DimensionError(f"factor shapes u{f.u.shape} v_t{f.v_t.shape} do not match k={f.k}")
    return (f.u * f.sigma) @ f.v_t


def frobenius_distance(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"shape mismatch: {a.shape} vs {b.shape}")
    return float(np.sqrt(np.sum((a - b) ** 2)))


def is_orthogonal(m, tol: Tolerance | float = Tolerance()) -> bool:
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise DimensionError(f"orthogonality check needs a square matrix, got shape {m.shape}")
    return orthogonality_residual(m) <= _tol(tol).abs
