"""Crossed-grid triangulation of the unit square and P1 conductivity solvers.

Every square cell of an ``n x n`` grid is split into four triangles by its two
diagonals, which adds one vertex at the cell center.  Vertices are numbered
row-major over the ``(n+1)^2`` grid nodes first, then row-major over the
``n^2`` cell centers.

Boundary data are nodal values on the boundary vertices.  Boundary integrals
use the trapezoidal rule on boundary edges, so for any two boundary functions
``<a, b> = sum_i w_i a_i b_i`` with ``w_i`` the half-lengths of the edges
adjacent to node ``i``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

# segment ids in boundary_edges
LEFT, RIGHT, BOTTOM, TOP = 0, 1, 2, 3
SEGMENT_NAMES = {LEFT: "x=0", RIGHT: "x=1", BOTTOM: "y=0", TOP: "y=1"}

MEAN_TOL = 1e-10


class FemError(ValueError):
    """Raised for invalid meshes, data or conductivities."""


@dataclass(frozen=True, eq=False)
class CrossedMesh:
    n: int
    vertices: np.ndarray  # (N, 2)
    triangles: np.ndarray  # (T, 3), counter-clockwise
    boundary_edges: np.ndarray  # (E, 2) vertex pairs
    boundary_segments: np.ndarray  # (E,) segment id

    def __post_init__(self):
        for name in ("vertices", "triangles", "boundary_edges", "boundary_segments"):
            getattr(self, name).setflags(write=False)

    @property
    def h(self) -> float:
        return 1.0 / self.n

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    @cached_property
    def grid_shape(self) -> tuple[int, int]:
        return (self.n + 1, self.n + 1)

    @cached_property
    def n_grid(self) -> int:
        return (self.n + 1) ** 2

    @cached_property
    def _geometry(self):
        p = self.vertices[self.triangles]  # (T, 3, 2)
        d1 = p[:, 1] - p[:, 0]
        d2 = p[:, 2] - p[:, 0]
        det = d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]
        # gradients of the barycentric coordinates
        grads = np.empty((len(p), 3, 2))
        grads[:, 1, 0] = d2[:, 1] / det
        grads[:, 1, 1] = -d2[:, 0] / det
        grads[:, 2, 0] = -d1[:, 1] / det
        grads[:, 2, 1] = d1[:, 0] / det
        grads[:, 0] = -grads[:, 1] - grads[:, 2]
        return 0.5 * det, grads

    @property
    def areas(self) -> np.ndarray:
        return self._geometry[0]

    @property
    def basis_gradients(self) -> np.ndarray:
        """(T, 3, 2) gradients of the three local hat functions per triangle."""
        return self._geometry[1]

    @cached_property
    def centroids(self) -> np.ndarray:
        return self.vertices[self.triangles].mean(axis=1)

    @cached_property
    def boundary_nodes(self) -> np.ndarray:
        """Boundary vertex indices, counter-clockwise starting at the origin."""
        return _boundary_loop(self.n)

    @cached_property
    def boundary_arclength(self) -> np.ndarray:
        """Arclength position of each boundary node along the loop, in [0, 4)."""
        return np.arange(len(self.boundary_nodes)) * self.h

    @cached_property
    def interior_nodes(self) -> np.ndarray:
        mask = np.ones(self.n_vertices, dtype=bool)
        mask[self.boundary_nodes] = False
        return np.flatnonzero(mask)

    @cached_property
    def boundary_weights(self) -> np.ndarray:
        """Trapezoidal quadrature weight of each boundary node (same order as boundary_nodes)."""
        w = np.zeros(self.n_vertices)
        a, b = self.boundary_edges[:, 0], self.boundary_edges[:, 1]
        length = np.linalg.norm(self.vertices[a] - self.vertices[b], axis=1)
        np.add.at(w, a, 0.5 * length)
        np.add.at(w, b, 0.5 * length)
        return w[self.boundary_nodes]

    @cached_property
    def boundary_mass(self) -> np.ndarray:
        """Full-length vector c with c @ u = integral of u over the boundary."""
        c = np.zeros(self.n_vertices)
        c[self.boundary_nodes] = self.boundary_weights
        return c

    @cached_property
    def _stiffness_pattern(self):
        grads = self.basis_gradients
        local = np.einsum("tad,tbd->tab", grads, grads) * self.areas[:, None, None]
        rows = np.repeat(self.triangles, 3, axis=1).ravel()
        cols = np.tile(self.triangles, (1, 3)).ravel()
        return local.reshape(len(local), 9), rows, cols

    def stiffness(self, sigma) -> sp.csc_matrix:
        """P1 stiffness matrix for a per-triangle conductivity."""
        sigma = as_conductivity(self, sigma)
        local, rows, cols = self._stiffness_pattern
        vals = (local * sigma[:, None]).ravel()
        n = self.n_vertices
        return sp.coo_matrix((vals, (rows, cols)), shape=(n, n)).tocsc()

    @cached_property
    def grid_index(self) -> np.ndarray:
        """(n+1, n+1) array of vertex ids, indexed [iy, ix]."""
        return np.arange(self.n_grid).reshape(self.grid_shape)

    @cached_property
    def grid_x(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, self.n + 1)

    def deformed(self, displacement: np.ndarray) -> "CrossedMesh":
        """Same topology with every vertex moved by ``displacement`` (N, 2)."""
        displacement = np.asarray(displacement, dtype=float)
        if displacement.shape != self.vertices.shape:
            raise FemError("displacement must have shape (n_vertices, 2)")
        moved = CrossedMesh(self.n, self.vertices + displacement, self.triangles,
                            self.boundary_edges, self.boundary_segments)
        if np.any(moved.areas <= 0):
            raise FemError("deformation inverts a triangle")
        return moved

    def same_boundary(self, other: "CrossedMesh") -> bool:
        return other is self or (other.n == self.n and np.array_equal(
            other.vertices[other.boundary_nodes], self.vertices[self.boundary_nodes]))


def build_crossed_grid(n: int) -> CrossedMesh:
    """Crossed triangulation of [0,1]^2 with ``n`` cells per side."""
    if int(n) != n or n < 1:
        raise FemError(f"cells per side must be a positive integer, got {n!r}")
    n = int(n)
    t = np.linspace(0.0, 1.0, n + 1)
    gx, gy = np.meshgrid(t, t)
    c = (t[:-1] + t[1:]) / 2
    cx, cy = np.meshgrid(c, c)
    vertices = np.vstack([np.column_stack([gx.ravel(), gy.ravel()]),
                          np.column_stack([cx.ravel(), cy.ravel()])])

    iy, ix = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    ll = (iy * (n + 1) + ix).ravel()
    lr = ll + 1
    ul = ll + n + 1
    ur = ul + 1
    ctr = (n + 1) ** 2 + (iy * n + ix).ravel()
    # bottom, right, top, left triangle of each cell, all counter-clockwise
    tris = np.stack([
        np.column_stack([ll, lr, ctr]),
        np.column_stack([lr, ur, ctr]),
        np.column_stack([ur, ul, ctr]),
        np.column_stack([ul, ll, ctr]),
    ], axis=1).reshape(-1, 3)

    k = np.arange(n)
    edges, segs = [], []
    edges.append(np.column_stack([k * (n + 1), (k + 1) * (n + 1)]))
    segs.append(np.full(n, LEFT))
    edges.append(np.column_stack([k * (n + 1) + n, (k + 1) * (n + 1) + n]))
    segs.append(np.full(n, RIGHT))
    edges.append(np.column_stack([k, k + 1]))
    segs.append(np.full(n, BOTTOM))
    edges.append(np.column_stack([n * (n + 1) + k, n * (n + 1) + k + 1]))
    segs.append(np.full(n, TOP))
    return CrossedMesh(n, vertices, tris, np.vstack(edges), np.concatenate(segs))


def _boundary_loop(n: int) -> np.ndarray:
    idx = np.arange((n + 1) ** 2).reshape(n + 1, n + 1)
    bottom = idx[0, :-1]
    right = idx[:-1, -1]
    top = idx[-1, ::-1][:-1]
    left = idx[::-1, 0][:-1]
    return np.concatenate([bottom, right, top, left])


# --------------------------------------------------------------------------
# conductivities and boundary functions


@dataclass
class ConductivityField:
    """Per-triangle conductivity ``sigma0 + (sigma1 - sigma0) * chi``.

    ``chi`` is the fraction of each triangle covered by the inclusion; it is
    0/1 for a centroid rasterization and fractional for cut triangles.
    """

    values: np.ndarray
    sigma0: float = 1.0
    sigma1: float | None = None
    indicator: np.ndarray | None = None

    @classmethod
    def constant(cls, mesh: CrossedMesh, sigma0: float) -> "ConductivityField":
        return cls(np.full(mesh.n_triangles, float(sigma0)), sigma0, None, np.zeros(mesh.n_triangles))

    @classmethod
    def from_indicator(cls, sigma0: float, sigma1: float, chi) -> "ConductivityField":
        chi = np.clip(np.asarray(chi, dtype=float), 0.0, 1.0)
        return cls(sigma0 + (sigma1 - sigma0) * chi, sigma0, sigma1, chi)

    def scaled(self, c: float) -> "ConductivityField":
        return ConductivityField(self.values * c, self.sigma0 * c,
                                 None if self.sigma1 is None else self.sigma1 * c, self.indicator)


def as_conductivity(mesh: CrossedMesh, sigma) -> np.ndarray:
    if isinstance(sigma, ConductivityField):
        sigma = sigma.values
    sigma = np.asarray(sigma, dtype=float)
    if sigma.ndim == 0:
        sigma = np.full(mesh.n_triangles, float(sigma))
    if sigma.shape != (mesh.n_triangles,):
        raise FemError(f"conductivity needs one value per triangle ({mesh.n_triangles}), got {sigma.shape}")
    if not np.all(np.isfinite(sigma)) or np.any(sigma <= 0):
        raise FemError("conductivity must be strictly positive")
    return sigma


def boundary_values(mesh: CrossedMesh, func) -> np.ndarray:
    """Sample ``func(x, y, segment)`` at boundary nodes.

    Corner nodes get the mean of the two one-sided values from the adjacent
    segments, so data that jump at corners keep their exact discrete mean.
    """
    pts = mesh.vertices[mesh.boundary_nodes]
    x, y = pts[:, 0], pts[:, 1]
    vals = np.zeros(len(pts))
    count = np.zeros(len(pts))
    for seg, on in ((LEFT, np.isclose(x, 0.0)), (RIGHT, np.isclose(x, 1.0)),
                    (BOTTOM, np.isclose(y, 0.0)), (TOP, np.isclose(y, 1.0))):
        vals[on] += func(x[on], y[on], seg)
        count[on] += 1
    return vals / count


def boundary_trace(mesh: CrossedMesh, u: np.ndarray) -> np.ndarray:
    return np.asarray(u)[mesh.boundary_nodes]


def boundary_inner_product(mesh: CrossedMesh, a, b) -> float:
    """Trapezoidal ``int_{dOmega} a b ds`` for boundary nodal vectors (or 2D stacks)."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    nb = len(mesh.boundary_nodes)
    if a.shape[-1] != nb or b.shape[-1] != nb:
        raise FemError(f"boundary functions must have {nb} nodal values")
    w = mesh.boundary_weights
    return (a * w) @ b.T if (a.ndim > 1 or b.ndim > 1) else float(np.sum(a * b * w))


def boundary_mean(mesh: CrossedMesh, a) -> float:
    return boundary_inner_product(mesh, a, np.ones(len(mesh.boundary_nodes))) / 4.0


def resample_boundary(source: CrossedMesh, values, target: CrossedMesh) -> np.ndarray:
    """Linear interpolation of boundary data along arclength onto another mesh."""
    values = np.asarray(values, dtype=float)
    s = source.boundary_arclength
    s_ext = np.concatenate([s, [4.0]])
    out = []
    for row in np.atleast_2d(values):
        out.append(np.interp(target.boundary_arclength, s_ext, np.append(row, row[0])))
    out = np.array(out)
    return out if values.ndim > 1 else out[0]


# --------------------------------------------------------------------------
# solvers


class NeumannSolver:
    """Factorized Neumann problem for one conductivity.

    Solves ``int sigma grad u . grad w = <g, w>`` with ``int_{dOmega} u = 0``
    through a Lagrange multiplier bordering the stiffness matrix.
    """

    def __init__(self, mesh: CrossedMesh, sigma):
        self.mesh = mesh
        self.sigma = as_conductivity(mesh, sigma)
        self.K = mesh.stiffness(self.sigma)
        c = mesh.boundary_mass
        cc = sp.csc_matrix(c[:, None])
        A = sp.bmat([[self.K, cc], [cc.T, None]], format="csc")
        self._lu = splu(A)
        self._scale = max(float(c.sum()), 1.0)

    def load(self, g) -> np.ndarray:
        """Nodal load vectors (k, N) from boundary currents (k, nb)."""
        g = np.atleast_2d(np.asarray(g, dtype=float))
        mesh = self.mesh
        nb = len(mesh.boundary_nodes)
        if g.shape[1] != nb:
            raise FemError(f"current must have {nb} boundary values")
        b = np.zeros((len(g), mesh.n_vertices))
        b[:, mesh.boundary_nodes] = g * mesh.boundary_weights
        return b

    def solve(self, g) -> np.ndarray:
        g_arr = np.asarray(g, dtype=float)
        b = self.load(g_arr)
        total = np.abs(b.sum(axis=1))
        ref = np.maximum(np.abs(b).sum(axis=1), 1e-300)
        if np.any(total > MEAN_TOL * np.maximum(ref, 1.0)):
            raise FemError("incompatible Neumann datum: current has nonzero boundary mean")
        rhs = np.hstack([b, np.zeros((len(b), 1))]).T
        sol = self._lu.solve(rhs)
        u = sol[:-1].T
        return u if g_arr.ndim > 1 else u[0]

    def solve_load(self, b) -> np.ndarray:
        """Solve with nodal load vectors (k, N) whose entries sum to zero."""
        b = np.atleast_2d(np.asarray(b, dtype=float))
        if np.any(np.abs(b.sum(axis=1)) > MEAN_TOL * np.maximum(np.abs(b).sum(axis=1), 1.0)):
            raise FemError("incompatible Neumann datum: load has nonzero sum")
        sol = self._lu.solve(np.hstack([b, np.zeros((len(b), 1))]).T)
        return sol[:-1].T

    def residual(self, g, u) -> float:
        b = self.load(g)
        u = np.atleast_2d(u)
        r = np.linalg.norm(u @ self.K - b) if len(u) > 1 else np.linalg.norm(self.K @ u[0] - b[0])
        return float(r / max(np.linalg.norm(b), 1e-300))


class DirichletSolver:
    """Factorized Dirichlet problem ``-div(sigma grad v) = 0``, ``v = f`` on the boundary."""

    def __init__(self, mesh: CrossedMesh, sigma):
        self.mesh = mesh
        self.sigma = as_conductivity(mesh, sigma)
        K = mesh.stiffness(self.sigma)
        ii, bb = mesh.interior_nodes, mesh.boundary_nodes
        self.K_ib = K[ii][:, bb]
        self._lu = splu(sp.csc_matrix(K[ii][:, ii]))

    def solve(self, f) -> np.ndarray:
        f_arr = np.asarray(f, dtype=float)
        f2 = np.atleast_2d(f_arr)
        mesh = self.mesh
        if f2.shape[1] != len(mesh.boundary_nodes):
            raise FemError(f"Dirichlet datum must have {len(mesh.boundary_nodes)} boundary values")
        rhs = -(self.K_ib @ f2.T)
        vi = self._lu.solve(np.asarray(rhs))
        v = np.zeros((len(f2), mesh.n_vertices))
        v[:, mesh.interior_nodes] = vi.T
        v[:, mesh.boundary_nodes] = f2
        return v if f_arr.ndim > 1 else v[0]

    def solve_interior(self, b) -> np.ndarray:
        """Zero-boundary solutions (k, N) for nodal loads (k, N); boundary loads are ignored."""
        b = np.atleast_2d(np.asarray(b, dtype=float))
        v = np.zeros((len(b), self.mesh.n_vertices))
        v[:, self.mesh.interior_nodes] = self._lu.solve(b[:, self.mesh.interior_nodes].T).T
        return v


def weighted_stiffness_action(mesh: CrossedMesh, weight, u: np.ndarray) -> np.ndarray:
    """``K_w u`` for the stiffness matrix of a per-triangle weight ``w`` (may vanish)."""
    u = np.atleast_2d(np.asarray(u, dtype=float))
    gu = gradients(mesh, u)  # (k, T, 2)
    w = np.asarray(weight, dtype=float) * mesh.areas
    local = np.einsum("tad,ktd->kta", mesh.basis_gradients, gu) * w[None, :, None]
    out = np.zeros_like(u)
    for k in range(len(u)):
        out[k] = np.bincount(mesh.triangles.ravel(), local[k].ravel(), minlength=mesh.n_vertices)
    return out


def solve_neumann(mesh: CrossedMesh, sigma, g) -> np.ndarray:
    return NeumannSolver(mesh, sigma).solve(g)


def solve_dirichlet(mesh: CrossedMesh, sigma, f) -> np.ndarray:
    return DirichletSolver(mesh, sigma).solve(f)


def gradients(mesh: CrossedMesh, u: np.ndarray) -> np.ndarray:
    """Per-triangle gradients of P1 fields: (T, 2) for one field, (k, T, 2) for a stack."""
    u = np.asarray(u, dtype=float)
    return np.einsum("...ta,tad->...td", u[..., mesh.triangles], mesh.basis_gradients)


def energy(mesh: CrossedMesh, sigma, u: np.ndarray) -> float | np.ndarray:
    """``int sigma |grad u|^2``."""
    s = as_conductivity(mesh, sigma) * mesh.areas
    du = gradients(mesh, u)
    return np.sum(s * np.sum(du * du, axis=-1), axis=-1)


def p1_interpolate(mesh: CrossedMesh, nodal: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Evaluate a P1 field on the undeformed crossed grid at arbitrary points in [0,1]^2."""
    n = mesh.n
    pts = np.clip(np.asarray(points, dtype=float), 0.0, 1.0)
    x, y = pts[:, 0] * n, pts[:, 1] * n
    ix = np.minimum(np.floor(x).astype(int), n - 1)
    iy = np.minimum(np.floor(y).astype(int), n - 1)
    fx, fy = x - ix, y - iy
    # which of the four triangles of the cell
    below_d1 = fy <= fx  # below diagonal ll-ur
    below_d2 = fy <= 1 - fx  # below diagonal ul-lr
    quad = np.where(below_d1 & below_d2, 0, np.where(below_d1, 1, np.where(~below_d2, 2, 3)))
    tri = 4 * (iy * n + ix) + quad
    verts = mesh.vertices[mesh.triangles[tri]]
    # barycentric coordinates
    v0, v1, v2 = verts[:, 0], verts[:, 1], verts[:, 2]
    det = (v1[:, 0] - v0[:, 0]) * (v2[:, 1] - v0[:, 1]) - (v1[:, 1] - v0[:, 1]) * (v2[:, 0] - v0[:, 0])
    l1 = ((pts[:, 0] - v0[:, 0]) * (v2[:, 1] - v0[:, 1]) - (pts[:, 1] - v0[:, 1]) * (v2[:, 0] - v0[:, 0])) / det
    l2 = ((v1[:, 0] - v0[:, 0]) * (pts[:, 1] - v0[:, 1]) - (v1[:, 1] - v0[:, 1]) * (pts[:, 0] - v0[:, 0])) / det
    l0 = 1 - l1 - l2
    vals = np.asarray(nodal)[mesh.triangles[tri]]
    return l0 * vals[:, 0] + l1 * vals[:, 1] + l2 * vals[:, 2]
