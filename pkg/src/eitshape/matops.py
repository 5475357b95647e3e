"""Small dense symmetric linear algebra and the box-constrained least-squares QP."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular

SYM_TOL = 1e-8


class NotPositiveDefinite(np.linalg.LinAlgError):
    pass


class QpNotConverged(RuntimeError):
    def __init__(self, message, coefficients, residual):
        super().__init__(message)
        self.coefficients = coefficients
        self.residual = residual


def _check_symmetric(A) -> np.ndarray:
    A = np.asarray(A, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError("matrix must be square")
    scale = max(np.linalg.norm(A), 1e-300)
    if np.linalg.norm(A - A.T) > SYM_TOL * scale:
        raise ValueError("matrix is not symmetric")
    return 0.5 * (A + A.T)


def _round_robin(m: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Pairings of 0..m-1 into disjoint (p, q) rotations covering every pair once per sweep."""
    players = list(range(m)) + ([-1] if m % 2 else [])
    k = len(players)
    rounds = []
    for _ in range(k - 1):
        pairs = [(players[i], players[k - 1 - i]) for i in range(k // 2)]
        pairs = [(min(a, b), max(a, b)) for a, b in pairs if a >= 0 and b >= 0]
        if pairs:
            p, q = np.array(pairs).T
            rounds.append((p, q))
        players = [players[0], players[-1]] + players[1:-1]
    return rounds


def sym_eigen(A, tol: float = 1e-12, max_sweeps: int = 60) -> tuple[np.ndarray, np.ndarray]:
    """Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.

    Each sweep visits all index pairs in round-robin order; the rotations of
    one round act on disjoint rows/columns and are applied together.
    Returns ascending eigenvalues and the matching orthonormal eigenvectors
    as columns.
    """
    A = _check_symmetric(A).copy()
    m = A.shape[0]
    V = np.eye(m)
    if m == 1:
        return A.diagonal().copy(), V
    rounds = _round_robin(m)
    scale = np.linalg.norm(A)
    if scale == 0:
        return np.zeros(m), V
    for _ in range(max_sweeps):
        off = np.sqrt(max(np.sum(A * A) - np.sum(A.diagonal() ** 2), 0.0))
        if off <= tol * scale:
            break
        for p, q in rounds:
            app, aqq, apq = A[p, p], A[q, q], A[p, q]
            active = np.abs(apq) > 1e-20 * scale
            theta = np.where(active, (aqq - app) / (2 * np.where(active, apq, 1.0)), 0.0)
            t = np.sign(theta) / (np.abs(theta) + np.hypot(theta, 1.0))
            t = np.where(theta == 0, 1.0, t)
            t = np.where(active, t, 0.0)
            c = 1.0 / np.sqrt(t * t + 1.0)
            s = t * c
            # columns
            Ap, Aq = A[:, p].copy(), A[:, q].copy()
            A[:, p] = c * Ap - s * Aq
            A[:, q] = s * Ap + c * Aq
            # rows
            Ap, Aq = A[p, :].copy(), A[q, :].copy()
            A[p, :] = c[:, None] * Ap - s[:, None] * Aq
            A[q, :] = s[:, None] * Ap + c[:, None] * Aq
            Vp, Vq = V[:, p].copy(), V[:, q].copy()
            V[:, p] = c * Vp - s * Vq
            V[:, q] = s * Vp + c * Vq
    w = A.diagonal().copy()
    order = np.argsort(w, kind="stable")
    return w[order], V[:, order]


def lambda_min(A) -> float:
    return float(sym_eigen(A)[0][0])


@dataclass
class SpdFactor:
    L: np.ndarray

    def reconstruct(self) -> np.ndarray:
        return self.L @ self.L.T

    def whiten(self, S) -> np.ndarray:
        """``L^{-1} S L^{-T}``."""
        X = solve_triangular(self.L, S, lower=True)
        Y = solve_triangular(self.L, X.T, lower=True)
        return 0.5 * (Y + Y.T)


def cholesky_spd(A) -> SpdFactor:
    A = _check_symmetric(A)
    m = A.shape[0]
    L = np.zeros_like(A)
    for j in range(m):
        d = A[j, j] - L[j, :j] @ L[j, :j]
        if not d > 0:
            raise NotPositiveDefinite(f"not positive definite (pivot {j} = {d:.3e})")
        L[j, j] = np.sqrt(d)
        L[j + 1:, j] = (A[j + 1:, j] - L[j + 1:, :j] @ L[j, :j]) / L[j, j]
    return SpdFactor(L)


def matrix_abs(A) -> np.ndarray:
    w, V = sym_eigen(A)
    out = (V * np.abs(w)) @ V.T
    return 0.5 * (out + out.T)


# --------------------------------------------------------------------------
# box QP


@dataclass
class BoxQpProblem:
    """min ||M - sum_k a_k S_k||_F^2 subject to 0 <= a_k <= upper_k."""

    matrices: np.ndarray  # (n, m, m)
    target: np.ndarray  # (m, m)
    upper: np.ndarray  # (n,)

    def __post_init__(self):
        self.matrices = np.asarray(self.matrices, dtype=float)
        self.target = np.asarray(self.target, dtype=float)
        self.upper = np.asarray(self.upper, dtype=float).reshape(-1)
        if self.matrices.ndim != 3 or self.matrices.shape[1:] != self.target.shape:
            raise ValueError("matrix stack and target dimensions disagree")
        if len(self.upper) != len(self.matrices):
            raise ValueError("one upper bound per matrix required")
        if np.any(self.upper < 0) or not np.all(np.isfinite(self.upper)):
            raise ValueError("upper bounds must be finite and nonnegative")

    def normal_equations(self) -> tuple[np.ndarray, np.ndarray, float]:
        S = self.matrices.reshape(len(self.matrices), -1)
        return S @ S.T, S @ self.target.ravel(), float(self.target.ravel() @ self.target.ravel())

    def objective(self, a) -> float:
        R = self.target - np.tensordot(np.asarray(a, dtype=float), self.matrices, axes=1)
        return float(np.sum(R * R))


@dataclass
class QpResult:
    coefficients: np.ndarray
    objective: float
    sweeps: int
    optimality: float
    history: list


def _projected_gradient(a, grad, upper):
    pg = grad.copy()
    pg[(a <= 0) & (grad > 0)] = 0.0
    pg[(a >= upper) & (grad < 0)] = 0.0
    return pg


def solve_box_qp(problem: BoxQpProblem, tol: float = 1e-6, max_iter: int = 100_000,
                 obj_tol: float = 1e-10) -> QpResult:
    """Cyclic coordinate descent with exact clipped one-dimensional minimization.

    Stops when the projected gradient is below ``tol`` times the gradient norm
    at the origin, or when a full sweep changes the objective by less than
    ``obj_tol`` (relative) while the projected gradient test also holds within
    a factor 100.  Raises :class:`QpNotConverged` otherwise.
    """
    H, b, c0 = problem.normal_equations()
    u = problem.upper
    n = len(b)
    a = np.zeros(n)
    diag = H.diagonal()
    g0 = np.linalg.norm(-2 * b)
    if g0 == 0:
        return QpResult(a, c0, 0, 0.0, [c0])

    def obj(x):
        return c0 - 2 * b @ x + x @ H @ x

    Ha = np.zeros(n)
    f_prev = c0
    history = [c0]
    pg_norm = np.inf
    for sweep in range(1, max_iter + 1):
        for k in range(n):
            if diag[k] <= 0:
                continue
            r = b[k] - (Ha[k] - H[k, k] * a[k])
            new = min(max(r / diag[k], 0.0), u[k])
            step = new - a[k]
            if step != 0.0:
                Ha += step * H[:, k]
                a[k] = new
        f = obj(a)
        if f > f_prev * (1 + 1e-12) + 1e-300:
            raise AssertionError("coordinate descent increased the objective")
        history.append(f)
        pg_norm = np.linalg.norm(_projected_gradient(a, 2 * (Ha - b), u))
        if pg_norm <= tol * g0:
            return QpResult(a, f, sweep, pg_norm / g0, history)
        if abs(f_prev - f) <= obj_tol * max(abs(f_prev), 1e-300) and pg_norm <= 100 * tol * g0:
            return QpResult(a, f, sweep, pg_norm / g0, history)
        f_prev = f
    raise QpNotConverged(f"box QP did not converge in {max_iter} sweeps "
                         f"(projected gradient {pg_norm / g0:.2e})", a, pg_norm / g0)
