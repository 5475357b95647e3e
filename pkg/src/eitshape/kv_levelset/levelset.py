"""Level-set representation on the nodal grid of a crossed mesh.

``phi`` lives on the ``(n+1) x (n+1)`` grid nodes, indexed ``[iy, ix]``; the
cell-center vertices of the crossed mesh take the mean of their four cell
corners.  The shape is ``D = {phi < 0}``.
"""

from __future__ import annotations

from dataclasses import dataclass

import contourpy
import numpy as np

from ..grid_fem import CrossedMesh


class CflError(ValueError):
    def __init__(self, dt, admissible):
        super().__init__(f"time step {dt:.3e} violates CFL bound {admissible:.3e}")
        self.admissible = admissible


# --------------------------------------------------------------------------
# primitives


@dataclass(frozen=True)
class Circle:
    cx: float
    cy: float
    r: float

    def signed_distance(self, pts: np.ndarray) -> np.ndarray:
        return np.hypot(pts[:, 0] - self.cx, pts[:, 1] - self.cy) - self.r

    def bbox(self):
        return self.cx - self.r, self.cy - self.r, self.cx + self.r, self.cy + self.r

    @property
    def area(self) -> float:
        return np.pi * self.r ** 2


@dataclass(frozen=True)
class Ellipse:
    cx: float
    cy: float
    a: float  # semi-axis along the rotated x direction
    b: float
    angle: float = 0.0  # radians, counter-clockwise

    def _local(self, pts):
        c, s = np.cos(self.angle), np.sin(self.angle)
        dx, dy = pts[:, 0] - self.cx, pts[:, 1] - self.cy
        return c * dx + s * dy, -s * dx + c * dy

    def signed_distance(self, pts: np.ndarray) -> np.ndarray:
        x, y = self._local(pts)
        d = _ellipse_distance(np.abs(x), np.abs(y), self.a, self.b)
        inside = (x / self.a) ** 2 + (y / self.b) ** 2 < 1
        return np.where(inside, -d, d)

    def bbox(self):
        c, s = np.cos(self.angle), np.sin(self.angle)
        hx = np.hypot(self.a * c, self.b * s)
        hy = np.hypot(self.a * s, self.b * c)
        return self.cx - hx, self.cy - hy, self.cx + hx, self.cy + hy

    @property
    def area(self) -> float:
        return np.pi * self.a * self.b


def _ellipse_distance(x, y, a, b, iters: int = 60):
    """Distance from first-quadrant points to the ellipse x^2/a^2 + y^2/b^2 = 1.

    With the major axis first, the closest point is
    ``(r z0 y0/(s + r), z1 y1/(s + 1))``-type scaled, where ``s`` is the root of
    ``(r z0/(s + r))^2 + (z1/(s + 1))^2 = 1`` (``z = point/axes``,
    ``r = (major/minor)^2``).  A few Newton steps polish a bracketing
    bisection.  Points on the major axis near the center have their closest
    point off the axis and use the closed form.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if b > a:
        return _ellipse_distance(y, x, b, a, iters)
    e0, e1 = a, b
    z0, z1 = x / e0, y / e1
    g = z0 * z0 + z1 * z1 - 1.0
    r0 = (e0 / e1) ** 2
    n0 = r0 * z0
    lo = z1 - 1.0
    hi = np.where(g < 0, 0.0, np.hypot(n0, z1) - 1.0)
    for _ in range(iters + 40):
        s = 0.5 * (lo + hi)
        with np.errstate(divide="ignore", invalid="ignore"):
            f = (n0 / (s + r0)) ** 2 + (z1 / (s + 1.0)) ** 2 - 1.0
        lo = np.where(f > 0, s, lo)
        hi = np.where(f > 0, hi, s)
    s = 0.5 * (lo + hi)
    with np.errstate(divide="ignore", invalid="ignore"):
        px = r0 * x / (s + r0)
        py = y / (s + 1.0)
    d = np.hypot(px - x, py - y)
    # on-axis special cases
    tiny = 1e-10
    on_minor = (x <= tiny * e0) & (y > tiny * e1)
    d = np.where(on_minor, np.abs(y - e1), d)
    on_major = y <= tiny * e1
    numer, denom = e0 * x, e0 * e0 - e1 * e1
    xde = np.where(denom > 0, numer / max(denom, 1e-300), 1.0)
    inner = on_major & (numer < denom)
    d_inner = np.hypot(e0 * xde - x, e1 * np.sqrt(np.clip(1 - xde * xde, 0, None)))
    d = np.where(inner, d_inner, np.where(on_major, np.abs(x - e0), d))
    return np.where(np.abs(g) == 0, 0.0, d)


def check_inside_unit_square(shape, clearance: float = 0.0) -> None:
    x0, y0, x1, y1 = shape.bbox()
    if x0 < clearance or y0 < clearance or x1 > 1 - clearance or y1 > 1 - clearance:
        raise ValueError(f"{shape} exceeds the unit square")


# --------------------------------------------------------------------------
# the field


@dataclass
class LevelSetField:
    mesh: CrossedMesh
    phi: np.ndarray  # (n+1, n+1), [iy, ix]

    def __post_init__(self):
        self.phi = np.asarray(self.phi, dtype=float)
        if self.phi.shape != self.mesh.grid_shape:
            raise ValueError(f"phi must have shape {self.mesh.grid_shape}")
        if not np.all(np.isfinite(self.phi)):
            raise ValueError("level-set values must be finite")

    def copy(self) -> "LevelSetField":
        return LevelSetField(self.mesh, self.phi.copy())

    def vertex_values(self) -> np.ndarray:
        p = self.phi
        centers = 0.25 * (p[:-1, :-1] + p[:-1, 1:] + p[1:, :-1] + p[1:, 1:])
        return np.concatenate([p.ravel(), centers.ravel()])

    def inside_fraction(self) -> np.ndarray:
        return area_fraction(self.mesh, self.vertex_values())

    def centroid_indicator(self) -> np.ndarray:
        vals = self.vertex_values()[self.mesh.triangles].mean(axis=1)
        return (vals < 0).astype(float)

    def area(self) -> float:
        return float(self.inside_fraction() @ self.mesh.areas)

    def contours(self) -> list[np.ndarray]:
        """Zero-level polylines as (k, 2) arrays of (x, y)."""
        x = self.mesh.grid_x
        gen = contourpy.contour_generator(x, x, self.phi, line_type="Separate")
        return [np.asarray(seg) for seg in gen.lines(0.0)]


def init_signed_distance(shapes, mesh: CrossedMesh, allow_empty: bool = False) -> LevelSetField:
    """Signed distance (negative inside) to the union of circles/ellipses."""
    shapes = list(shapes)
    if not shapes and not allow_empty:
        raise ValueError("no shapes given; pass allow_empty=True for an empty initialization")
    for s in shapes:
        check_inside_unit_square(s)
    pts = mesh.vertices[: mesh.n_grid]
    if not shapes:
        return LevelSetField(mesh, np.ones(mesh.grid_shape))
    phi = np.min([s.signed_distance(pts) for s in shapes], axis=0)
    return LevelSetField(mesh, phi.reshape(mesh.grid_shape))


def area_fraction(mesh: CrossedMesh, vertex_phi: np.ndarray) -> np.ndarray:
    """Fraction of each triangle where the linear interpolant of ``phi`` is negative."""
    v = np.asarray(vertex_phi, dtype=float)[mesh.triangles]
    neg = v < 0
    count = neg.sum(axis=1)
    frac = np.where(count == 3, 1.0, 0.0)

    def corner_fraction(vals, lone):
        # fraction of the sub-triangle at the vertex whose sign differs from the others
        p = np.take_along_axis(vals, lone[:, None], axis=1)[:, 0]
        others = np.sort(np.where(np.arange(3)[None, :] == lone[:, None], np.nan, vals), axis=1)[:, :2]
        q, r = others[:, 0], others[:, 1]
        return (p / (p - q)) * (p / (p - r))

    one = count == 1
    if one.any():
        lone = np.argmax(neg[one], axis=1)
        frac[one] = corner_fraction(v[one], lone)
    two = count == 2
    if two.any():
        lone = np.argmin(neg[two], axis=1)
        frac[two] = 1.0 - corner_fraction(v[two], lone)
    return np.clip(frac, 0.0, 1.0)


# --------------------------------------------------------------------------
# transport


def _pad_linear(p: np.ndarray) -> np.ndarray:
    out = np.pad(p, 1)
    out[1:-1, 0] = 2 * p[:, 0] - p[:, 1]
    out[1:-1, -1] = 2 * p[:, -1] - p[:, -2]
    out[0, :] = 2 * out[1, :] - out[2, :]
    out[-1, :] = 2 * out[-2, :] - out[-3, :]
    return out


def _neighborhood_max(a: np.ndarray) -> np.ndarray:
    p = np.pad(a, 1, mode="edge")
    out = a.copy()
    for dy in (0, 1, 2):
        for dx in (0, 1, 2):
            out = np.maximum(out, p[dy:dy + a.shape[0], dx:dx + a.shape[1]])
    return out


def cfl_time_step(mesh: CrossedMesh, velocity: np.ndarray, cfl: float = 0.5) -> float:
    vmax = float(np.max(np.hypot(velocity[..., 0], velocity[..., 1])))
    return np.inf if vmax == 0 else cfl * mesh.h / vmax


def transport_levelset(field: LevelSetField, velocity: np.ndarray, dt: float) -> LevelSetField:
    """One forward-Euler step of ``phi_t + V . grad phi = 0`` with a local Lax-Friedrichs Hamiltonian.

    ``velocity`` holds grid-node vectors with shape (n+1, n+1, 2).
    """
    mesh = field.mesh
    V = np.asarray(velocity, dtype=float)
    if V.shape != mesh.grid_shape + (2,):
        raise ValueError(f"velocity must have shape {mesh.grid_shape + (2,)}")
    admissible = cfl_time_step(mesh, V)
    if dt > admissible * (1 + 1e-12):
        raise CflError(dt, admissible)
    if dt == 0 or not np.any(V):
        return field.copy()
    h = mesh.h
    p = _pad_linear(field.phi)
    c = p[1:-1, 1:-1]
    dxm = (c - p[1:-1, :-2]) / h
    dxp = (p[1:-1, 2:] - c) / h
    dym = (c - p[:-2, 1:-1]) / h
    dyp = (p[2:, 1:-1] - c) / h
    vx, vy = V[..., 0], V[..., 1]
    ax = _neighborhood_max(np.abs(vx))
    ay = _neighborhood_max(np.abs(vy))
    H = (vx * 0.5 * (dxm + dxp) + vy * 0.5 * (dym + dyp)
         - ax * 0.5 * (dxp - dxm) - ay * 0.5 * (dyp - dym))
    return LevelSetField(mesh, field.phi - dt * H)


# --------------------------------------------------------------------------
# reinitialization


def _slope(p: np.ndarray, h: float) -> np.ndarray:
    gy, gx = np.gradient(p, h)
    return np.hypot(gx, gy)


def interface_nodes(phi: np.ndarray) -> np.ndarray:
    """Nodes whose 4-neighbourhood contains a sign change (or which are zero)."""
    s = phi < 0
    band = phi == 0
    band[:, :-1] |= s[:, :-1] != s[:, 1:]
    band[:, 1:] |= s[:, :-1] != s[:, 1:]
    band[:-1, :] |= s[:-1, :] != s[1:, :]
    band[1:, :] |= s[:-1, :] != s[1:, :]
    return band


def _fast_sweep(d: np.ndarray, fixed: np.ndarray, h: float, passes: int = 2) -> np.ndarray:
    ny, nx = d.shape
    d = d.copy()
    orders = [(range(ny), range(nx)), (range(ny), range(nx - 1, -1, -1)),
              (range(ny - 1, -1, -1), range(nx)), (range(ny - 1, -1, -1), range(nx - 1, -1, -1))]
    big = np.inf
    for _ in range(passes):
        changed = False
        for rows, cols in orders:
            cols = list(cols)
            for i in rows:
                di = d[i]
                up = d[i - 1] if i > 0 else None
                dn = d[i + 1] if i < ny - 1 else None
                fx = fixed[i]
                for j in cols:
                    if fx[j]:
                        continue
                    a = min(di[j - 1] if j > 0 else big, di[j + 1] if j < nx - 1 else big)
                    b = min(up[j] if up is not None else big, dn[j] if dn is not None else big)
                    if a == big and b == big:
                        continue
                    if abs(a - b) >= h:
                        new = min(a, b) + h
                    else:
                        new = 0.5 * (a + b + np.sqrt(2 * h * h - (a - b) ** 2))
                    if new < di[j]:
                        di[j] = new
                        changed = True
        if not changed:
            break
    return d


def reinitialize(field: LevelSetField, slope_tol: float = 0.1) -> LevelSetField:
    """Restore signed-distance character by fast sweeping.

    Nodes adjacent to the interface keep their value when the local slope is
    within ``slope_tol`` of one, otherwise they are divided by it; all other
    nodes are recomputed from the Eikonal equation and keep their sign.
    """
    mesh = field.mesh
    phi = field.phi
    h = mesh.h
    band = interface_nodes(phi)
    s = _slope(phi, h)
    seed = np.where(np.abs(s - 1) > slope_tol, phi / np.maximum(s, 1e-12), phi)
    if not band.any():
        return field.copy()
    d = _fast_sweep(np.where(band, np.abs(seed), np.inf), band, h)
    return LevelSetField(mesh, np.where(band, seed, np.where(phi < 0, -d, d)))
