import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from eitshape.matops import (
    BoxQpProblem,
    NotPositiveDefinite,
    QpNotConverged,
    cholesky_spd,
    lambda_min,
    matrix_abs,
    solve_box_qp,
    sym_eigen,
)


def random_symmetric(rng, m):
    A = rng.standard_normal((m, m))
    return A + A.T


# --------------------------------------------------------------------------
# eigensolver


def test_eigen_small_cases():
    w, V = sym_eigen(np.eye(3))
    np.testing.assert_allclose(w, [1, 1, 1])
    assert lambda_min(np.diag([-2.0, 0.0, 5.0])) == pytest.approx(-2.0)


def test_eigen_reconstruction_23(rng):
    A = random_symmetric(rng, 23)
    w, V = sym_eigen(A)
    assert np.all(np.diff(w) >= 0)
    assert np.linalg.norm(V @ np.diag(w) @ V.T - A) <= 1e-8 * np.linalg.norm(A)
    assert np.linalg.norm(A @ V - V * w) <= 1e-8 * np.linalg.norm(A)
    assert np.abs(V.T @ V - np.eye(23)).max() < 1e-10


def test_eigen_rejects_asymmetric():
    with pytest.raises(ValueError):
        sym_eigen(np.array([[1.0, 2.0], [0.0, 1.0]]))


@settings(max_examples=40, deadline=None)
@given(st.integers(min_value=1, max_value=12), st.integers(min_value=0, max_value=2**31))
def test_eigen_permutation_invariance(m, seed):
    rng = np.random.default_rng(seed)
    A = random_symmetric(rng, m)
    p = rng.permutation(m)
    w1 = sym_eigen(A)[0]
    w2 = sym_eigen(A[np.ix_(p, p)])[0]
    assert np.abs(w1 - w2).max() <= 1e-10 * max(np.linalg.norm(A), 1.0)
    np.testing.assert_allclose(w1, np.linalg.eigvalsh(A), atol=1e-10 * max(np.linalg.norm(A), 1.0))


# --------------------------------------------------------------------------
# Cholesky and |A|


def test_cholesky_examples():
    np.testing.assert_allclose(cholesky_spd(np.eye(4)).L, np.eye(4))
    L = cholesky_spd(np.array([[4.0, 2.0], [2.0, 3.0]])).L
    np.testing.assert_allclose(L, [[2.0, 0.0], [1.0, np.sqrt(2.0)]], atol=1e-15)


def test_cholesky_roundtrip_and_failure(rng):
    B = rng.standard_normal((10, 10))
    A = B @ B.T + 0.1 * np.eye(10)
    f = cholesky_spd(A)
    assert np.all(np.diag(f.L) > 0)
    assert np.linalg.norm(f.reconstruct() - A) <= 1e-10 * np.linalg.norm(A)
    S = random_symmetric(rng, 10)
    np.testing.assert_allclose(f.whiten(S), np.linalg.solve(f.L, np.linalg.solve(f.L, S).T), atol=1e-10)
    with pytest.raises(NotPositiveDefinite, match="not positive definite"):
        cholesky_spd(np.diag([1.0, -1.0]))


def test_matrix_abs(rng):
    B = rng.standard_normal((5, 5))
    P = B @ B.T + np.eye(5)
    assert np.abs(matrix_abs(P) - P).max() <= 1e-10 * np.abs(P).max()
    np.testing.assert_allclose(matrix_abs(np.diag([-3.0, 2.0])), np.diag([3.0, 2.0]), atol=1e-14)
    A = random_symmetric(rng, 8)
    X = matrix_abs(A)
    assert np.linalg.norm(X @ X - A @ A) <= 1e-8 * np.linalg.norm(A) ** 2
    assert np.linalg.norm(X @ A - A @ X) <= 1e-8 * np.linalg.norm(A) ** 2
    assert sym_eigen(X)[0][0] >= -1e-12
    with pytest.raises(ValueError):
        matrix_abs(np.array([[0.0, 1.0], [0.0, 0.0]]))


# --------------------------------------------------------------------------
# box QP


def nsd_stack(rng, n, m):
    out = []
    for _ in range(n):
        B = rng.standard_normal((m, m))
        out.append(-(B @ B.T))
    return np.array(out)


def test_qp_zero_target(rng):
    S = nsd_stack(rng, 4, 5)
    res = solve_box_qp(BoxQpProblem(S, np.zeros((5, 5)), np.ones(4)))
    assert np.array_equal(res.coefficients, np.zeros(4))


@pytest.mark.parametrize("c", [0.0, 0.3, 1.0])
def test_qp_single_exact(rng, c):
    S = nsd_stack(rng, 1, 4)
    res = solve_box_qp(BoxQpProblem(S, c * S[0], np.array([1.0])), tol=1e-10)
    assert res.coefficients[0] == pytest.approx(c, abs=1e-10)


def test_qp_clips_to_bound(rng):
    S = nsd_stack(rng, 1, 4)
    res = solve_box_qp(BoxQpProblem(S, 2.0 * S[0], np.array([0.5])))
    assert res.coefficients[0] == 0.5


@pytest.mark.parametrize("seed", [0, 1, 2, 3])
def test_qp_grid_search_oracle(seed):
    rng = np.random.default_rng(seed)
    S = rng.standard_normal((3, 4, 4))
    S = S + S.transpose(0, 2, 1)
    M = random_symmetric(rng, 4)
    prob = BoxQpProblem(S, M, np.ones(3))
    res = solve_box_qp(prob, tol=1e-10)
    assert np.all((res.coefficients >= 0) & (res.coefficients <= 1))
    H, b, c0 = prob.normal_equations()
    grid = np.linspace(0, 1, 101)
    A = np.stack(np.meshgrid(grid, grid, grid, indexing="ij"), axis=-1).reshape(-1, 3)
    best = np.min(c0 - 2 * A @ b + np.einsum("pi,ij,pj->p", A, H, A))
    # grid accuracy: objective variation within half a grid step of the optimum
    grad = 2 * (H @ res.coefficients - b)
    slack = 0.005 * np.abs(grad).sum() + 0.005**2 * np.abs(H).sum()
    assert res.objective <= best + 1e-12
    assert res.objective >= best - slack


def test_qp_monotone_history(rng):
    S = nsd_stack(rng, 10, 6)
    M = np.tensordot(rng.random(10), S, axes=1)
    res = solve_box_qp(BoxQpProblem(S, M, rng.random(10)))
    assert np.all(np.diff(res.history) <= 1e-12 * res.history[0])


def test_qp_not_converged(rng):
    S = nsd_stack(rng, 10, 6)
    M = np.tensordot(rng.random(10), S, axes=1)
    with pytest.raises(QpNotConverged) as info:
        solve_box_qp(BoxQpProblem(S, M, np.ones(10)), tol=1e-15, max_iter=2, obj_tol=0.0)
    assert info.value.coefficients.shape == (10,)
    assert info.value.residual > 0


def test_qp_problem_validation(rng):
    S = nsd_stack(rng, 2, 3)
    with pytest.raises(ValueError):
        BoxQpProblem(S, np.zeros((3, 3)), np.array([1.0, -1.0]))
    with pytest.raises(ValueError):
        BoxQpProblem(S, np.zeros((4, 4)), np.ones(2))
