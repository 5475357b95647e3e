"""Boundary currents, Galerkin-projected Neumann-to-Dirichlet matrices,
linearized sensitivities, and the two synthetic noise models."""

from __future__ import annotations

import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .grid_fem import (
    BOTTOM,
    LEFT,
    RIGHT,
    TOP,
    CrossedMesh,
    FemError,
    NeumannSolver,
    boundary_inner_product,
    boundary_trace,
    boundary_values,
    gradients,
)


@dataclass
class CurrentBasis:
    mesh: CrossedMesh
    currents: np.ndarray  # (m, nb) boundary nodal values
    orthonormal: bool = False
    # currents = coefficients @ raw sinusoidal currents
    coefficients: np.ndarray | None = None

    @property
    def m(self) -> int:
        return len(self.currents)

    def gram(self) -> np.ndarray:
        return boundary_inner_product(self.mesh, self.currents, self.currents)


def sinusoidal_current(k: int):
    """Boundary current ``sin(k pi y)`` on x=0, ``-sin`` on x=1, ``cos(k pi x)`` on y=0, ``-cos`` on y=1."""

    def g(x, y, seg):
        if seg == LEFT:
            return np.sin(k * np.pi * y)
        if seg == RIGHT:
            return -np.sin(k * np.pi * y)
        if seg == BOTTOM:
            return np.cos(k * np.pi * x)
        if seg == TOP:
            return -np.cos(k * np.pi * x)
        raise ValueError(seg)

    return g


def make_current_basis(mesh: CrossedMesh, m: int, orthonormalize: bool = False,
                       coefficients: np.ndarray | None = None) -> CurrentBasis:
    """The first ``m`` sinusoidal currents, optionally Gram-Schmidt orthonormalized.

    Passing ``coefficients`` (from a basis built on another mesh) applies that
    exact linear combination instead of orthonormalizing afresh, so Galerkin
    matrices computed on two meshes refer to the same currents.
    """
    if int(m) != m or m < 1:
        raise ValueError("number of currents must be a positive integer")
    m = int(m)
    nb = len(mesh.boundary_nodes)
    if m > nb:
        raise ValueError(f"m={m} exceeds the {nb} boundary nodes")
    raw = np.array([boundary_values(mesh, sinusoidal_current(k)) for k in range(1, m + 1)])
    if coefficients is not None:
        coefficients = np.asarray(coefficients, dtype=float)
        if coefficients.shape != (m, m):
            raise ValueError("coefficient matrix must be m x m")
        return CurrentBasis(mesh, coefficients @ raw, orthonormalize, coefficients)
    if not orthonormalize:
        return CurrentBasis(mesh, raw, False, np.eye(m))
    # modified Gram-Schmidt in the boundary inner product, tracking coefficients
    q = raw.copy()
    coef = np.eye(m)
    for i in range(m):
        for j in range(i):
            r = boundary_inner_product(mesh, q[j], q[i])
            q[i] -= r * q[j]
            coef[i] -= r * coef[j]
        norm = np.sqrt(boundary_inner_product(mesh, q[i], q[i]))
        if norm < 1e-12:
            raise ValueError("currents are linearly dependent on this mesh")
        q[i] /= norm
        coef[i] /= norm
    return CurrentBasis(mesh, q, True, coef)


# --------------------------------------------------------------------------
# NtD matrices


@dataclass
class NtdMatrix:
    """Symmetric m x m Galerkin matrix with a provenance tag."""

    values: np.ndarray
    provenance: str = "exact"
    delta: float = 0.0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 2 or self.values.shape[0] != self.values.shape[1]:
            raise ValueError("NtD matrix must be square")

    @property
    def m(self) -> int:
        return self.values.shape[0]

    def __sub__(self, other: "NtdMatrix") -> "NtdMatrix":
        return NtdMatrix(self.values - other.values, "difference", max(self.delta, other.delta))

    def save(self, path) -> None:
        Path(path).write_text(format_ntd(self))

    @classmethod
    def load(cls, path) -> "NtdMatrix":
        return parse_ntd(Path(path).read_text())


def format_ntd(mat: NtdMatrix) -> str:
    buf = io.StringIO()
    buf.write(f"# m = {mat.m}\n# delta = {mat.delta!r}\n# provenance = {mat.provenance}\n")
    for row in mat.values:
        buf.write(" ".join(f"{v:.17e}" for v in row) + "\n")
    return buf.getvalue()


def parse_ntd(text: str) -> NtdMatrix:
    header = {}
    rows = []
    for line in text.splitlines():
        line = line.strip()
        if not line:
            continue
        if line.startswith("#"):
            key, _, val = line[1:].partition("=")
            header[key.strip()] = val.strip()
            continue
        rows.append([float(tok) for tok in line.split()])
    values = np.array(rows)
    m = int(header.get("m", len(rows)))
    if values.shape != (m, m):
        raise ValueError(f"matrix file declares m={m} but holds {values.shape}")
    return NtdMatrix(values, header.get("provenance", "exact"), float(header.get("delta", 0.0)))


def _check_basis(mesh: CrossedMesh, basis: CurrentBasis) -> None:
    if not mesh.same_boundary(basis.mesh):
        raise FemError("current basis was built on a different mesh")


def ntd_matrix(mesh: CrossedMesh, sigma, basis: CurrentBasis, solver: NeumannSolver | None = None,
               return_potentials: bool = False):
    """Galerkin matrix ``<g_j, Lambda(sigma) g_i>`` symmetrized as (A + A^T)/2."""
    _check_basis(mesh, basis)
    solver = solver or NeumannSolver(mesh, sigma)
    u = solver.solve(basis.currents)
    A = boundary_inner_product(mesh, boundary_trace(mesh, u.T).T, basis.currents)
    out = NtdMatrix(0.5 * (A + A.T), "exact", 0.0)
    return (out, u) if return_potentials else out


class SensitivityModel:
    """Cached background gradients for fast per-region Frechet-derivative matrices."""

    def __init__(self, mesh: CrossedMesh, sigma0: float, basis: CurrentBasis):
        _check_basis(mesh, basis)
        self.mesh = mesh
        self.sigma0 = float(sigma0)
        self.basis = basis
        self.potentials = NeumannSolver(mesh, self.sigma0).solve(basis.currents)
        # (T, m, 2) gradient of every background potential on every triangle
        self.grads = np.ascontiguousarray(np.transpose(gradients(mesh, self.potentials), (1, 0, 2)))

    def matrix(self, weights) -> np.ndarray:
        """``-int kappa grad u_i . grad u_j`` for a per-triangle weight ``kappa``."""
        w = np.asarray(weights, dtype=float).reshape(self.mesh.n_triangles)
        sel = np.flatnonzero(w)
        if len(sel) == 0:
            raise ValueError("degenerate region: no triangle selected")
        G = self.grads[sel]  # (s, m, 2)
        wa = (w[sel] * self.mesh.areas[sel])[:, None, None]
        S = -np.einsum("sid,sjd->ij", G * wa, G)
        return 0.5 * (S + S.T)

    def stack(self, regions) -> np.ndarray:
        return np.array([self.matrix(r) for r in regions])


def sensitivity_matrix(mesh: CrossedMesh, sigma0: float, basis: CurrentBasis, region) -> NtdMatrix:
    """Galerkin matrix of the Frechet derivative at constant ``sigma0`` in direction ``chi_region``."""
    return NtdMatrix(SensitivityModel(mesh, sigma0, basis).matrix(region), "sensitivity")


def region_from_ball(mesh: CrossedMesh, center, radius: float) -> np.ndarray:
    """Triangles whose centroid lies in the closed ball."""
    if radius <= 0:
        raise ValueError("degenerate region: ball radius must be positive")
    d = np.linalg.norm(mesh.centroids - np.asarray(center, dtype=float), axis=1)
    mask = d <= radius
    if not mask.any():
        raise ValueError("degenerate region: ball contains no triangle centroid")
    return mask


def pixel_regions(mesh: CrossedMesh, n_pixels: int) -> np.ndarray:
    """(n_pixels^2, T) boolean masks of the square pixel partition, row-major in (iy, ix)."""
    c = mesh.centroids
    ix = np.minimum((c[:, 0] * n_pixels).astype(int), n_pixels - 1)
    iy = np.minimum((c[:, 1] * n_pixels).astype(int), n_pixels - 1)
    label = iy * n_pixels + ix
    return label[None, :] == np.arange(n_pixels * n_pixels)[:, None]


# --------------------------------------------------------------------------
# noise


@dataclass(frozen=True)
class NoiseSpec:
    delta: float = 0.0
    eta: float = 0.0
    seed: int | None = None

    def __post_init__(self):
        if self.delta < 0 or self.eta < 0:
            raise ValueError("noise levels must be nonnegative")


def add_operator_noise(diff: NtdMatrix, delta: float, seed) -> NtdMatrix:
    """``diff + delta*||diff||_F * E/||E||_F`` with E a symmetrized standard normal matrix."""
    if delta < 0:
        raise ValueError("delta must be nonnegative")
    if delta == 0:
        return NtdMatrix(diff.values.copy(), diff.provenance, diff.delta)
    rng = np.random.default_rng(seed)
    E = rng.standard_normal(diff.values.shape)
    E = 0.5 * (E + E.T)
    noisy = diff.values + delta * np.linalg.norm(diff.values) * E / np.linalg.norm(E)
    return NtdMatrix(noisy, "noisy", float(delta))


def add_voltage_noise(f, eta: float, seed) -> np.ndarray:
    """Add i.i.d. normal noise with standard deviation ``eta * ||f||_inf`` to each row."""
    if eta < 0:
        raise ValueError("eta must be nonnegative")
    f = np.asarray(f, dtype=float)
    if eta == 0:
        return f.copy()
    rng = np.random.default_rng(seed)
    scale = eta * np.max(np.abs(np.atleast_2d(f)), axis=1)
    noise = rng.standard_normal(np.atleast_2d(f).shape) * scale[:, None]
    return f + (noise if f.ndim > 1 else noise[0])

