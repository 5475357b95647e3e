"""Kohn-Vogelius misfit, its shape derivative and the level-set descent loop.

For measurement pairs ``(g_k, f_k)`` and a conductivity ``sigma`` the misfit is

    J = sum_k int sigma |grad(u_k - v_k)|^2,

with ``u_k`` the Neumann solution for ``g_k`` and ``v_k`` the Dirichlet solution
for ``f_k``.  Moving the mesh vertices by ``t W`` (boundary fixed, per-triangle
conductivity carried along) changes ``J`` at the rate

    dJ(W) = sum_k int sigma [A(W) grad v_k . grad v_k - A(W) grad u_k . grad u_k],
    A(W) = div(W) I - DW - DW^T,

which is assembled below exactly for vector P1 fields ``W``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from ..grid_fem import (
    CrossedMesh,
    DirichletSolver,
    FemError,
    NeumannSolver,
    boundary_trace,
    boundary_values,
    gradients,
    resample_boundary,
)
from ..ntd import add_voltage_noise, sinusoidal_current
from .levelset import CflError, LevelSetField, cfl_time_step, reinitialize, transport_levelset

DERIVATIVE_FORMS = ("standard", "unweighted")
RASTERIZATIONS = ("area", "centroid")


class StationaryInitialization(RuntimeError):
    pass


# --------------------------------------------------------------------------
# measurements


@dataclass
class MeasurementSet:
    """Currents and voltages on the reconstruction mesh.

    ``currents`` and ``voltages`` are (K, nb) boundary nodal arrays of
    ``recon_mesh``.  ``data_n`` records the grid the voltages were simulated
    on; it must be strictly finer than the reconstruction grid unless
    ``allow_same_mesh`` is set (for consistency tests only).
    """

    recon_mesh: CrossedMesh
    currents: np.ndarray
    voltages: np.ndarray
    eta: float = 0.0
    data_n: int | None = None
    allow_same_mesh: bool = False

    def __post_init__(self):
        self.currents = np.atleast_2d(np.asarray(self.currents, dtype=float))
        self.voltages = np.atleast_2d(np.asarray(self.voltages, dtype=float))
        nb = len(self.recon_mesh.boundary_nodes)
        if len(self.currents) == 0:
            raise ValueError("measurement set is empty")
        if self.currents.shape != self.voltages.shape or self.currents.shape[1] != nb:
            raise ValueError(f"currents and voltages must both be (K, {nb})")
        if self.data_n is None:
            self.data_n = self.recon_mesh.n
        if not self.allow_same_mesh and self.data_n <= self.recon_mesh.n:
            raise ValueError(f"inverse crime: data grid n={self.data_n} is not finer than "
                             f"the reconstruction grid n={self.recon_mesh.n}")

    def __len__(self) -> int:
        return len(self.currents)

    @property
    def recon_n(self) -> int:
        return self.recon_mesh.n

    def data_energy(self) -> float:
        """``sum_k <g_k, f_k>``, the scale used for relative tolerances."""
        w = self.recon_mesh.boundary_weights
        return float(np.sum(self.currents * self.voltages * w))


def level_set_currents(mesh: CrossedMesh, count: int = 5) -> np.ndarray:
    return np.array([boundary_values(mesh, sinusoidal_current(k)) for k in range(1, count + 1)])


def make_measurements(data_mesh: CrossedMesh, sigma_data, recon_mesh: CrossedMesh,
                      count: int = 5, eta: float = 0.0, seed=None,
                      allow_same_mesh: bool = False) -> MeasurementSet:
    """Simulate voltages on ``data_mesh``, add noise, and resample to ``recon_mesh``."""
    g_data = level_set_currents(data_mesh, count)
    u = NeumannSolver(data_mesh, sigma_data).solve(g_data)
    f = boundary_trace(data_mesh, u.T).T
    if eta > 0:
        if seed is None:
            raise ValueError("a seed is required for noisy measurements")
        f = add_voltage_noise(f, eta, seed)
    f_rec = f if data_mesh is recon_mesh else resample_boundary(data_mesh, f, recon_mesh)
    return MeasurementSet(recon_mesh, level_set_currents(recon_mesh, count), f_rec, eta,
                          data_mesh.n, allow_same_mesh)


# --------------------------------------------------------------------------
# conductivity from the level set


def conductivity_from_levelset(field: LevelSetField, sigma0: float, sigma1: float,
                               rasterization: str = "area") -> np.ndarray:
    if rasterization == "area":
        chi = field.inside_fraction()
    elif rasterization == "centroid":
        chi = field.centroid_indicator()
    else:
        raise ValueError(f"unknown rasterization {rasterization!r}")
    return sigma0 + (sigma1 - sigma0) * chi


@dataclass
class KvState:
    """Forward solutions for one conductivity."""

    sigma: np.ndarray
    u: np.ndarray  # (K, N) Neumann
    v: np.ndarray  # (K, N) Dirichlet
    J: float


def kv_state(mesh: CrossedMesh, sigma, meas: MeasurementSet) -> KvState:
    if len(meas) == 0:
        raise ValueError("measurement set is empty")
    neu = NeumannSolver(mesh, sigma)
    u = neu.solve(meas.currents)
    v = DirichletSolver(mesh, neu.sigma).solve(meas.voltages)
    dw = gradients(mesh, u - v)
    J = float(np.sum(neu.sigma * mesh.areas * np.sum(dw * dw, axis=-1)))
    return KvState(neu.sigma, u, v, J)


def kv_objective(mesh: CrossedMesh, sigma, meas: MeasurementSet) -> float:
    """``J = sum_k int sigma |grad(u_k - v_k)|^2``."""
    return kv_state(mesh, sigma, meas).J


# --------------------------------------------------------------------------
# shape derivative and smoothing


def shape_derivative(mesh: CrossedMesh, state: KvState, form: str = "standard") -> np.ndarray:
    """Nodal representation (N, 2) of ``W -> dJ(W)``: ``dJ(W) = sum_a W_a . G_a``.

    ``form="unweighted"`` drops the conductivity weight (for comparison only).
    """
    if form not in DERIVATIVE_FORMS:
        raise ValueError(f"unknown derivative form {form!r}")
    weight = mesh.areas * (state.sigma if form == "standard" else 1.0)
    gphi = mesh.basis_gradients  # (T, 3, 2)
    gu = gradients(mesh, state.u)  # (K, T, 2)
    gv = gradients(mesh, state.v)
    sq = np.sum(gv * gv - gu * gu, axis=(0, 2))  # (T,)
    # sum_k (grad phi_a . grad w)(d_c w) for w = v minus the same for w = u
    proj_v = np.einsum("tad,ktd->kta", gphi, gv)
    proj_u = np.einsum("tad,ktd->kta", gphi, gu)
    cross = np.einsum("kta,ktc->tac", proj_v, gv) - np.einsum("kta,ktc->tac", proj_u, gu)
    local = weight[:, None, None] * (gphi * sq[:, None, None] - 2.0 * cross)  # (T, 3, 2)
    G = np.zeros((mesh.n_vertices, 2))
    for c in range(2):
        G[:, c] = np.bincount(mesh.triangles.ravel(), local[..., c].ravel(), minlength=mesh.n_vertices)
    return G


def directional_derivative(mesh: CrossedMesh, state: KvState, W: np.ndarray, form: str = "standard") -> float:
    return float(np.sum(shape_derivative(mesh, state, form) * W))


class H1Smoother:
    """Solve ``int DV : DW = -dJ(W)`` for V in vector P1 with zero boundary values."""

    def __init__(self, mesh: CrossedMesh):
        self.mesh = mesh
        K = mesh.stiffness(np.ones(mesh.n_triangles))
        ii = mesh.interior_nodes
        self.interior = ii
        A = sp.csc_matrix(K[ii][:, ii])
        self._lu = splu(A)
        if not np.all(np.isfinite(self._lu.solve(np.ones(len(ii))))):
            raise FemError("singular smoothing system")

    def velocity(self, G: np.ndarray) -> np.ndarray:
        V = np.zeros_like(G)
        V[self.interior] = self._lu.solve(-G[self.interior])
        return V


def shape_gradient_velocity(field: LevelSetField, meas: MeasurementSet, sigma0: float, sigma1: float,
                            form: str = "standard", rasterization: str = "area",
                            smoother: H1Smoother | None = None) -> np.ndarray:
    """H^1_0-smoothed descent velocity on all mesh vertices, shape (N, 2)."""
    mesh = field.mesh
    state = kv_state(mesh, conductivity_from_levelset(field, sigma0, sigma1, rasterization), meas)
    smoother = smoother or H1Smoother(mesh)
    return smoother.velocity(shape_derivative(mesh, state, form))


def grid_velocity(mesh: CrossedMesh, V: np.ndarray) -> np.ndarray:
    """Restrict a vertex velocity (N, 2) to the (n+1, n+1, 2) node grid."""
    return V[: mesh.n_grid].reshape(mesh.grid_shape + (2,))


def narrow_band(phi: np.ndarray, width: float) -> np.ndarray:
    """Smooth cutoff: 1 for ``|phi| <= width``, 0 for ``|phi| >= 2 width``."""
    s = np.clip(2.0 - np.abs(phi) / width, 0.0, 1.0)
    return s * s * (3.0 - 2.0 * s)


# --------------------------------------------------------------------------
# descent


@dataclass
class DescentConfig:
    sigma0: float = 1.0
    sigma1: float = 2.0
    cfl: float = 0.5
    shrink: float = 0.5
    dt_min: float = 1e-6
    max_iter: int = 300
    stop_tol: float = 1e-4
    stop_window: int = 10
    # window decrease measured against J at the start of the run ("initial")
    # or at the start of the window ("window")
    stop_reference: str = "initial"
    reinit_every: int = 5
    derivative_form: str = "standard"
    rasterization: str = "area"
    # J below floor_rtol * sum_k <g_k, f_k> counts as already consistent
    floor_rtol: float = 1e-6
    # derivative and transport restricted to |phi| < 2*band (full weight below band);
    # None keeps the global distributed derivative
    band: float | None = 0.1

    def __post_init__(self):
        if not (self.sigma0 > 0 and self.sigma1 > 0) or self.sigma0 == self.sigma1:
            raise ValueError("need positive sigma0 != sigma1")
        if not 0 < self.shrink < 1:
            raise ValueError("shrink factor must lie in (0, 1)")
        for name in ("cfl", "dt_min", "stop_tol", "floor_rtol"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.cfl > 0.5:
            raise ValueError("cfl must not exceed 0.5")
        if self.band is not None and self.band <= 0:
            raise ValueError("band must be positive or None")
        if self.max_iter < 1 or self.stop_window < 1 or self.reinit_every < 1:
            raise ValueError("iteration counts must be positive")
        if self.stop_reference not in ("initial", "window"):
            raise ValueError("stop_reference must be 'initial' or 'window'")
        if self.derivative_form not in DERIVATIVE_FORMS:
            raise ValueError(f"derivative_form must be one of {DERIVATIVE_FORMS}")
        if self.rasterization not in RASTERIZATIONS:
            raise ValueError(f"rasterization must be one of {RASTERIZATIONS}")


@dataclass
class DescentRecord:
    iteration: int
    J: float
    dt: float
    rejected: int
    contours: list = field(default_factory=list)
    sigma1: float | None = None
    reinitialized: bool = False


@dataclass
class DescentResult:
    field: LevelSetField
    history: list[DescentRecord]
    stop_reason: str

    @property
    def iterations(self) -> int:
        return self.history[-1].iteration


def check_monotone(history: list[DescentRecord]) -> None:
    J = np.array([r.J for r in history])
    if np.any(np.diff(J) >= 0):
        k = int(np.argmax(np.diff(J) >= 0))
        raise AssertionError(f"objective did not decrease at record {k + 1}")


class DescentStepper:
    """One accepted level-set step at a time; shared by the plain and simultaneous loops."""

    def __init__(self, field: LevelSetField, meas: MeasurementSet, config: DescentConfig):
        if field.mesh is not meas.recon_mesh and not field.mesh.same_boundary(meas.recon_mesh):
            raise FemError("level set and measurements live on different meshes")
        self.config = config
        self.meas = meas
        self.mesh = field.mesh
        self.smoother = H1Smoother(self.mesh)
        self.field = field.copy()
        self.sigma1 = config.sigma1
        self.state = self._state(self.field)
        self.accepted = 0

    def _state(self, field: LevelSetField) -> KvState:
        c = self.config
        return kv_state(self.mesh, conductivity_from_levelset(field, c.sigma0, self.sigma1, c.rasterization),
                        self.meas)

    def refresh(self, sigma1: float) -> None:
        """Re-evaluate the current shape at a new inclusion conductivity."""
        self.sigma1 = float(sigma1)
        self.state = self._state(self.field)

    def at_floor(self) -> bool:
        return self.state.J <= self.config.floor_rtol * abs(self.meas.data_energy())

    def step(self) -> tuple[float, int, bool] | None:
        """Try one descent step; returns (dt, rejected, reinitialized) or None on dt underflow."""
        c = self.config
        G = shape_derivative(self.mesh, self.state, c.derivative_form)
        if c.band is not None:
            # the derivative away from the interface is discretization and data noise
            G = G * narrow_band(self.field.vertex_values(), c.band)[:, None]
        Vg = grid_velocity(self.mesh, self.smoother.velocity(G))
        if c.band is not None:
            Vg = Vg * narrow_band(self.field.phi, c.band)[..., None]
        dt = cfl_time_step(self.mesh, Vg, c.cfl)
        if not np.isfinite(dt):
            return None
        rejected = 0
        while dt >= c.dt_min:
            try:
                trial = transport_levelset(self.field, Vg, dt)
            except CflError:  # pragma: no cover - dt never exceeds the bound
                dt *= c.shrink
                continue
            st = self._state(trial)
            if st.J < self.state.J:
                break
            rejected += 1
            dt *= c.shrink
        else:
            return None
        J_before = self.state.J
        self.field, self.state = trial, st
        self.accepted += 1
        reinit = False
        if self.accepted % c.reinit_every == 0:
            cand = reinitialize(self.field)
            st_re = self._state(cand)
            # keep the redistanced field only if it preserves strict descent
            if st_re.J < J_before:
                self.field, self.state, reinit = cand, st_re, True
        return dt, rejected, reinit


def levelset_reconstruct(phi0: LevelSetField, meas: MeasurementSet,
                         config: DescentConfig | None = None, snapshots: bool = True) -> DescentResult:
    """Kohn-Vogelius descent by level-set transport along the H^1 shape gradient."""
    config = config or DescentConfig()
    stepper = DescentStepper(phi0, meas, config)
    history = [DescentRecord(0, stepper.state.J, 0.0, 0,
                             stepper.field.contours() if snapshots else [], config.sigma1)]
    reason = "max_iter"
    for it in range(1, config.max_iter + 1):
        out = stepper.step()
        if out is None:
            if it == 1 and not stepper.at_floor():
                raise StationaryInitialization(
                    f"stationary initialization: no descent down to dt_min={config.dt_min:g} (J={stepper.state.J:.3e})")
            reason = "dt_underflow" if it > 1 else "consistent_initialization"
            break
        dt, rejected, reinit = out
        history.append(DescentRecord(it, stepper.state.J, dt, rejected,
                                     stepper.field.contours() if snapshots else [], config.sigma1, reinit))
        if _window_converged(history, config):
            reason = "stop_tol"
            break
    check_monotone(history)
    return DescentResult(stepper.field, history, reason)


def _window_converged(history: list[DescentRecord], config: DescentConfig) -> bool:
    w = config.stop_window
    if len(history) <= w:
        return False
    J_old, J_new = history[-1 - w].J, history[-1].J
    ref = history[0].J if config.stop_reference == "initial" else J_old
    return (J_old - J_new) <= config.stop_tol * ref
