"""Monotonicity tests and monotonicity-constrained regularization.

All semidefiniteness decisions use the relative threshold
``lambda_min(T) >= -EIG_RTOL * ||T||_F``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grid_fem import CrossedMesh
from .matops import (
    BoxQpProblem,
    NotPositiveDefinite,
    cholesky_spd,
    lambda_min,
    matrix_abs,
    solve_box_qp,
)
from .ntd import CurrentBasis, NtdMatrix, ntd_matrix, region_from_ball

EIG_RTOL = 1e-8
SHIFT_RTOL = 1e-10
SUPPORT_FRACTION = 2e-2


class InconsistentData(ValueError):
    pass


def is_psd(T: np.ndarray, rtol: float = EIG_RTOL) -> bool:
    return lambda_min(T) >= -rtol * np.linalg.norm(T)


def linearized_alpha_bound(sigma0: float, sigma1: float) -> float:
    """Largest admissible contrast for the linearized test, ``sigma0 - sigma0^2/sigma1``."""
    return sigma0 - sigma0 ** 2 / sigma1


def _values(mat) -> np.ndarray:
    return mat.values if isinstance(mat, NtdMatrix) else np.asarray(mat, dtype=float)


@dataclass
class TestBallGrid:
    __test__ = False  # not a pytest class despite the name

    centers: np.ndarray  # (B, 2)
    radius: float
    marked: np.ndarray | None = None  # (B,) bool
    min_eigenvalues: np.ndarray | None = None

    __test__ = False  # not a pytest class

    def __post_init__(self):
        self.centers = np.asarray(self.centers, dtype=float)
        lo = self.centers - self.radius
        hi = self.centers + self.radius
        if np.any(lo < -1e-12) or np.any(hi > 1 + 1e-12):
            raise ValueError("test balls must lie inside the unit square")

    @classmethod
    def uniform(cls, per_side: int = 10, radius: float | None = None) -> "TestBallGrid":
        """Balls centered at the midpoints of a ``per_side`` x ``per_side`` grid."""
        c = (np.arange(per_side) + 0.5) / per_side
        cx, cy = np.meshgrid(c, c)
        r = 0.5 / per_side if radius is None else radius
        return cls(np.column_stack([cx.ravel(), cy.ravel()]), r)

    def __len__(self) -> int:
        return len(self.centers)

    def regions(self, mesh: CrossedMesh) -> list[np.ndarray]:
        return [region_from_ball(mesh, c, self.radius) for c in self.centers]

    def heat_map(self, resolution: int = 50) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Number of marked balls covering each sample point of a uniform raster."""
        t = (np.arange(resolution) + 0.5) / resolution
        X, Y = np.meshgrid(t, t)
        pts = np.column_stack([X.ravel(), Y.ravel()])
        count = np.zeros(len(pts), dtype=int)
        if self.marked is not None:
            for c in self.centers[self.marked]:
                count += np.linalg.norm(pts - c, axis=1) <= self.radius
        return X, Y, count.reshape(X.shape)


@dataclass
class PixelPartition:
    per_side: int
    bounds: np.ndarray
    coefficients: np.ndarray | None = None
    support_threshold: float = 0.0
    qp_sweeps: int = 0

    @property
    def support(self) -> np.ndarray:
        return self.coefficients > self.support_threshold

    @property
    def centers(self) -> np.ndarray:
        c = (np.arange(self.per_side) + 0.5) / self.per_side
        cx, cy = np.meshgrid(c, c)
        return np.column_stack([cx.ravel(), cy.ravel()])

    def as_grid(self, values=None) -> np.ndarray:
        """Reshape a per-pixel vector to [iy, ix]."""
        v = self.coefficients if values is None else values
        return np.asarray(v).reshape(self.per_side, self.per_side)


def standard_test(mesh: CrossedMesh, sigma0: float, sigma1: float, lam_sigma: NtdMatrix,
                  basis: CurrentBasis, ball: tuple, alpha: float) -> bool:
    """Non-linearized test: is ``Lambda(sigma0 + alpha chi_B) - Lambda(sigma)`` positive semidefinite?"""
    if not 0 < alpha <= sigma1 - sigma0:
        raise ValueError(f"alpha must lie in (0, sigma1 - sigma0] = (0, {sigma1 - sigma0}]")
    center, radius = ball
    chi = region_from_ball(mesh, center, radius)
    probe = ntd_matrix(mesh, sigma0 + alpha * chi, basis)
    return is_psd(probe.values - _values(lam_sigma))


def linearized_scan(diff, stack: np.ndarray, alpha: float, delta: float = 0.0,
                    balls: TestBallGrid | None = None, sigma0: float | None = None,
                    sigma1: float | None = None) -> TestBallGrid:
    """Linearized monotonicity test on every region of ``stack``.

    ``diff`` is the (possibly noisy) difference ``Lambda(sigma) - Lambda(sigma0)``.
    A region is marked when ``alpha*S_B - diff + delta*I`` is positive
    semidefinite; with ``delta = 0`` this is the exact-data test.
    """
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    if sigma0 is not None and sigma1 is not None:
        bound = linearized_alpha_bound(sigma0, sigma1)
        if alpha > bound * (1 + 1e-12):
            raise ValueError(f"alpha must not exceed sigma0 - sigma0^2/sigma1 = {bound}")
    if delta < 0:
        raise ValueError("delta must be nonnegative")
    D = _values(diff)
    shift = delta * np.eye(D.shape[0])
    lam = np.empty(len(stack))
    marked = np.empty(len(stack), dtype=bool)
    for i, S in enumerate(stack):
        T = alpha * S - D + shift
        lam[i] = lambda_min(T)
        marked[i] = lam[i] >= -EIG_RTOL * np.linalg.norm(T)
    out = balls if balls is not None else TestBallGrid(np.full((len(stack), 2), 0.5), 0.0)
    out.marked = marked
    out.min_eigenvalues = lam
    return out


def _bounds_from_factor(factor, stack: np.ndarray, cbar: float) -> np.ndarray:
    bounds = np.empty(len(stack))
    for k, S in enumerate(stack):
        lam = lambda_min(factor.whiten(S))
        bounds[k] = cbar if lam >= 0 else min(cbar, -1.0 / lam)
    return bounds


def pixel_bounds(diff, stack: np.ndarray, cbar: float) -> np.ndarray:
    """``min(cbar, c_k)`` with ``c_k = -1/lambda_min(L^-1 S_k L^-T)``, ``LL^T = Lambda(sigma0) - Lambda(sigma)``."""
    A = -_values(diff)
    lam = lambda_min(A)
    tol_shift = SHIFT_RTOL * np.linalg.norm(A)
    if lam <= -tol_shift:
        raise InconsistentData(f"data not monotonically consistent (lambda_min = {lam:.3e})")
    if lam <= tol_shift:
        A = A + tol_shift * np.eye(len(A))
    try:
        factor = cholesky_spd(A)
    except NotPositiveDefinite as exc:
        raise InconsistentData("data not monotonically consistent") from exc
    return _bounds_from_factor(factor, stack, cbar)


def pixel_bounds_noisy(noisy, delta: float, stack: np.ndarray, cbar: float) -> np.ndarray:
    """Noisy-data bounds from the factorization of ``|Lambda^delta| + delta I``."""
    if delta <= 0:
        raise ValueError("noisy bounds need delta > 0")
    D = _values(noisy)
    if stack.shape[1:] != D.shape:
        raise ValueError("dimension mismatch between data and sensitivity stack")
    factor = cholesky_spd(matrix_abs(D) + delta * np.eye(len(D)))
    return _bounds_from_factor(factor, stack, cbar)


def regularized_reconstruction(target, stack: np.ndarray, bounds: np.ndarray, cbar: float,
                               tol: float = 1e-6, max_iter: int = 200_000,
                               support_fraction: float = SUPPORT_FRACTION) -> PixelPartition:
    """Minimize ``||target - sum a_k S_k||_F`` over the monotonicity box.

    Pixels with ``a_k > support_fraction * cbar`` form the support.
    """
    per_side = int(round(np.sqrt(len(stack))))
    result = solve_box_qp(BoxQpProblem(stack, _values(target), bounds), tol=tol, max_iter=max_iter)
    return PixelPartition(per_side, np.asarray(bounds, dtype=float), result.coefficients,
                          support_fraction * cbar, result.sweeps)
