from __future__ import annotations

import numpy as np
import pytest

from abra.errors import ConfigError, DimensionError, NumericError
from abra.linalg import (
    SvdFactors,
    Tolerance,
    apply_sign_convention,
    frobenius_distance,
    is_orthogonal,
    orthogonality_residual,
    reconstruct,
    svd,
)
from helpers import rotation2


def eig_oracle_sigma(w: np.ndarray) -> np.ndarray:
    """Singular values from the symmetric eigenproblems of W^T W and W W^T."""
    a = np.sort(np.linalg.eigvalsh(w.T @ w))[::-1]
    b = np.sort(np.linalg.eigvalsh(w @ w.T))[::-1]
    k = min(w.shape)
    assert np.allclose(a[:k], b[:k], atol=1e-10)
    return np.sqrt(np.clip(a[:k], 0.0, None))


def test_svd_identity():
    f = svd(np.eye(3))
    assert np.array_equal(f.u, np.eye(3))
    assert np.array_equal(f.sigma, np.ones(3))
    assert np.array_equal(f.v_t, np.eye(3))


def test_svd_diagonal_values():
    assert np.allclose(svd(np.diag([3.0, 1.0])).sigma, [3.0, 1.0])
    assert np.allclose(svd(np.diag([1.0, -3.0])).sigma, [3.0, 1.0])


def test_svd_matches_eigendecomposition_oracle(rng):
    w = rng.standard_normal((8, 8))
    f = svd(w)
    assert np.allclose(f.sigma, eig_oracle_sigma(w), atol=1e-10)
    assert np.linalg.norm(reconstruct(f) - w) < 1e-10 * max(1.0, np.linalg.norm(w))
    # each left vector is an eigenvector of W W^T with eigenvalue sigma^2
    for j in range(8):
        lhs = w @ w.T @ f.u[:, j]
        assert np.allclose(lhs, f.sigma[j] ** 2 * f.u[:, j], atol=1e-9)
        assert np.allclose(w.T @ w @ f.v_t[j], f.sigma[j] ** 2 * f.v_t[j], atol=1e-9)


@pytest.mark.parametrize("shape", [(5, 3), (3, 5), (1, 4), (512, 512)])
def test_svd_round_trip_and_orthonormality(rng, shape):
    w = rng.standard_normal(shape)
    f = svd(w)
    k = min(shape)
    assert f.u.shape == (shape[0], k) and f.v_t.shape == (k, shape[1])
    assert np.linalg.norm(reconstruct(f) - w) <= 1e-9 * max(1.0, np.linalg.norm(w))
    assert orthogonality_residual(f.u) <= 1e-10
    assert orthogonality_residual(f.v_t.T) <= 1e-10
    assert np.all(np.diff(f.sigma) <= 0) and np.all(f.sigma >= 0)


def test_svd_sign_convention(rng):
    f = svd(rng.standard_normal((6, 4)))
    for j in range(4):
        col = f.u[:, j]
        assert col[np.argmax(np.abs(col))] >= 0


def test_sign_convention_tie_goes_to_lowest_row():
    u = np.array([[-1.0], [1.0]]) / np.sqrt(2)
    v_t = np.array([[1.0, 0.0]])
    u2, v2 = apply_sign_convention(u, v_t)
    assert u2[0, 0] > 0 and u2[1, 0] < 0
    assert np.allclose(u2 @ v2, u @ v_t)


def test_svd_deterministic_bytes(rng):
    w = rng.standard_normal((7, 7))
    a, b = svd(w), svd(w.copy())
    assert a.u.tobytes() == b.u.tobytes()
    assert a.sigma.tobytes() == b.sigma.tobytes()
    assert a.v_t.tobytes() == b.v_t.tobytes()


def test_svd_rejects_non_finite():
    w = np.eye(2)
    w[0, 1] = np.nan
    with pytest.raises(NumericError):
        svd(w)


def test_svd_failure_names_shape(monkeypatch):
    def boom(*args, **kwargs):
        raise np.linalg.LinAlgError("SVD did not converge")

    monkeypatch.setattr(np.linalg, "svd", boom)
    with pytest.raises(NumericError, match=r"3 ?x ?3|\(3, 3\)"):
        svd(np.eye(3))


def test_factors_sort_in_tandem():
    # sigma given as [2, 5] is stored as [5, 2]; the pairs move with it, so the product is unchanged.
    f = SvdFactors(np.eye(2), np.array([2.0, 5.0]), np.eye(2))
    assert np.array_equal(f.sigma, [5.0, 2.0])
    assert np.allclose(reconstruct(f), np.diag([2.0, 5.0]))
    assert np.allclose(f.u, [[0, 1], [1, 0]])


def test_factors_validation():
    with pytest.raises(ConfigError):
        SvdFactors(np.eye(2), np.array([1.0, -1.0]), np.eye(2))
    with pytest.raises(DimensionError):
        SvdFactors(np.eye(3), np.array([1.0, 1.0]), np.eye(2))


def test_reconstruct_identity_round_trip():
    assert np.allclose(reconstruct(svd(np.eye(3))), np.eye(3))


def test_frobenius_distance_cases(rng):
    a = rng.standard_normal((3, 4))
    assert frobenius_distance(a, a) == 0.0
    assert frobenius_distance(np.eye(2), np.zeros((2, 2))) == pytest.approx(np.sqrt(2), abs=1e-15)
    b = rng.standard_normal((3, 4))
    total = 0.0
    for i in range(3):
        for j in range(4):
            total += (a[i, j] - b[i, j]) ** 2
    assert frobenius_distance(a, b) == pytest.approx(np.sqrt(total), rel=1e-14)
    assert frobenius_distance(a, b) == frobenius_distance(b, a)
    with pytest.raises(DimensionError):
        frobenius_distance(a, b.T)


def test_is_orthogonal_cases():
    assert is_orthogonal(np.eye(4), Tolerance(1e-10))
    assert not is_orthogonal(2 * np.eye(4), Tolerance(1e-10))
    assert is_orthogonal(rotation2(0.7), 1e-12)
    with pytest.raises(DimensionError):
        is_orthogonal(np.ones((2, 3)), 1e-10)


def test_tolerance_must_be_non_negative():
    with pytest.raises(ConfigError):
        Tolerance(abs=-1.0)
    with pytest.raises(ConfigError):
        Tolerance(rel=-1e-3)
