"""Phantoms, experiment configuration and the end-to-end reconstruction pipelines.

The combined pipeline runs

    forward data -> NtD matrices (+ operator noise) -> pixel bounds
    -> box-QP regularization -> circle/ellipse initial guess
    -> voltages (+ noise) -> level-set descent,

and the simultaneous variant additionally updates the inclusion conductivity
by a bracketed Newton iteration on the consistency residual.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .grid_fem import (
    CrossedMesh,
    DirichletSolver,
    NeumannSolver,
    build_crossed_grid,
    gradients,
    weighted_stiffness_action,
)
from .kv_levelset import (
    Circle,
    DescentConfig,
    DescentRecord,
    DescentResult,
    DescentStepper,
    Ellipse,
    LevelSetField,
    MeasurementSet,
    StationaryInitialization,
    check_inside_unit_square,
    conductivity_from_levelset,
    init_signed_distance,
    levelset_reconstruct,
    make_measurements,
)
from .matops import NotPositiveDefinite, sym_eigen
from .monotonicity import (
    PixelPartition,
    TestBallGrid,
    linearized_scan,
    pixel_bounds,
    pixel_bounds_noisy,
    regularized_reconstruction,
)
from .ntd import (
    NtdMatrix,
    SensitivityModel,
    add_operator_noise,
    make_current_basis,
    ntd_matrix,
    pixel_regions,
)


class PipelineError(RuntimeError):
    """An error raised inside one pipeline stage, tagged with that stage."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"[{stage}] {cause}")
        self.stage = stage
        self.cause = cause


class _Stage:
    def __init__(self, name: str):
        self.name = name

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc is not None and not isinstance(exc, PipelineError) and isinstance(exc, Exception):
            raise PipelineError(self.name, exc) from exc
        return False


# --------------------------------------------------------------------------
# phantom geometry


@dataclass(frozen=True)
class Box:
    """Axis-aligned square (or rectangle) given by center and half-widths."""

    cx: float
    cy: float
    hx: float
    hy: float

    def signed_distance(self, pts: np.ndarray) -> np.ndarray:
        qx = np.abs(pts[:, 0] - self.cx) - self.hx
        qy = np.abs(pts[:, 1] - self.cy) - self.hy
        outside = np.hypot(np.maximum(qx, 0), np.maximum(qy, 0))
        return outside + np.minimum(np.maximum(qx, qy), 0.0)

    def bbox(self):
        return self.cx - self.hx, self.cy - self.hy, self.cx + self.hx, self.cy + self.hy

    @property
    def area(self) -> float:
        return 4 * self.hx * self.hy


@dataclass(frozen=True)
class Difference:
    """``base`` minus ``cut``; the signed distance is the usual max-combination."""

    base: object
    cut: object

    def signed_distance(self, pts: np.ndarray) -> np.ndarray:
        return np.maximum(self.base.signed_distance(pts), -self.cut.signed_distance(pts))

    def bbox(self):
        return self.base.bbox()


@dataclass(frozen=True)
class Phantom:
    name: str
    shapes: tuple  # union of primitives
    sigma0: float = 1.0
    sigma1: float = 2.0
    description: str = ""

    def __post_init__(self):
        if self.sigma0 <= 0 or self.sigma1 <= 0 or self.sigma0 == self.sigma1:
            raise ValueError("phantom conductivities must be positive and distinct")
        for s in self.shapes:
            check_inside_unit_square(s, clearance=1e-3)

    def with_conductivity(self, sigma0: float, sigma1: float) -> "Phantom":
        return dataclasses.replace(self, sigma0=sigma0, sigma1=sigma1)

    def signed_distance(self, pts: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        return np.min([s.signed_distance(pts) for s in self.shapes], axis=0)

    def inside(self, pts: np.ndarray) -> np.ndarray:
        return self.signed_distance(pts) < 0

    def indicator(self, mesh: CrossedMesh, sub: int = 4) -> np.ndarray:
        """Covered fraction of every triangle from ``sub*(sub+1)/2`` interior sample points."""
        i, j = np.meshgrid(np.arange(sub), np.arange(sub), indexing="ij")
        keep = i + j < sub
        # barycentric centers of the sub^2 similar sub-triangles (upward ones suffice
        # for a uniform estimate up to O(1/sub^2))
        l1 = (i[keep] + 1 / 3) / sub
        l2 = (j[keep] + 1 / 3) / sub
        l0 = 1 - l1 - l2
        tri = mesh.vertices[mesh.triangles]  # (T, 3, 2)
        pts = (l0[None, :, None] * tri[:, None, 0] + l1[None, :, None] * tri[:, None, 1]
               + l2[None, :, None] * tri[:, None, 2])
        inside = self.inside(pts.reshape(-1, 2)).reshape(len(tri), -1)
        return inside.mean(axis=1)

    def conductivity(self, mesh: CrossedMesh, sub: int = 4) -> np.ndarray:
        return self.sigma0 + (self.sigma1 - self.sigma0) * self.indicator(mesh, sub)

    def raster(self, resolution: int = 1000) -> tuple[np.ndarray, np.ndarray]:
        """Cell-center sample points of a uniform raster and their inclusion mask."""
        t = (np.arange(resolution) + 0.5) / resolution
        X, Y = np.meshgrid(t, t)
        pts = np.column_stack([X.ravel(), Y.ravel()])
        return pts, self.inside(pts)

    def area(self, resolution: int = 1000) -> float:
        return float(self.raster(resolution)[1].mean())

    def pixel_truth(self, per_side: int, samples: int = 20) -> np.ndarray:
        """Pixels (row-major in [iy, ix]) that intersect the inclusion."""
        t = (np.arange(per_side * samples) + 0.5) / (per_side * samples)
        X, Y = np.meshgrid(t, t)
        ins = self.inside(np.column_stack([X.ravel(), Y.ravel()])).reshape(X.shape)
        return ins.reshape(per_side, samples, per_side, samples).any(axis=(1, 3)).ravel()

    def distance_to_closure(self, pts: np.ndarray) -> np.ndarray:
        """Euclidean distance from points to the closed inclusion (0 inside)."""
        return np.maximum(self.signed_distance(pts), 0.0)


def _gallery() -> dict[str, Phantom]:
    kite = Difference(Ellipse(0.5, 0.45, 0.28, 0.2), Circle(0.5, 0.72, 0.17))
    return {
        "disk": Phantom("disk", (Circle(0.5, 0.5, 0.2),), description="disk, center (0.5, 0.5), radius 0.2"),
        "square": Phantom("square", (Box(0.5, 0.5, 0.15, 0.15),),
                          description="axis-aligned square, center (0.5, 0.5), side 0.3"),
        "kite": Phantom("kite", (kite,), description="concave shape: ellipse (0.5, 0.45; 0.28 x 0.2) "
                                                    "minus disk (0.5, 0.72; 0.17)"),
        "disk_square": Phantom("disk_square", (Circle(0.3, 0.3, 0.12), Box(0.68, 0.68, 0.12, 0.12)),
                               description="disk (0.3, 0.3; r 0.12) and square (0.68, 0.68; side 0.24)"),
    }


PHANTOMS = _gallery()


def get_phantom(name: str, sigma0: float = 1.0, sigma1: float = 2.0) -> Phantom:
    try:
        ph = PHANTOMS[name]
    except KeyError:
        raise KeyError(f"unknown phantom {name!r}; available: {', '.join(PHANTOMS)}") from None
    return ph.with_conductivity(sigma0, sigma1)


def symmetric_difference(field: LevelSetField, phantom: Phantom, resolution: int = 1000) -> float:
    """Area of ``{phi < 0}`` xor the phantom, by sampling the P1 interpolant of ``phi``."""
    from .grid_fem import p1_interpolate

    pts, truth = phantom.raster(resolution)
    rec = p1_interpolate(field.mesh, field.vertex_values(), pts) < 0
    return float(np.mean(rec != truth))


# --------------------------------------------------------------------------
# configuration


@dataclass
class ExperimentConfig:
    phantom: str = "disk"
    sigma0: float = 1.0
    sigma1: float = 2.0
    data_n: int = 128
    recon_n: int = 64
    m: int = 23
    delta: float = 0.0
    eta: float = 0.0
    seed: int | None = None
    alpha: float = 0.5
    cbar: float = 0.5
    bounds: str = "monotone"  # or "simplified": 0 <= a_k <= cbar
    ntd_mesh: str = "recon"  # mesh for the monotonicity NtD data: "recon" or "data"
    support_fraction: float = 2e-2
    pixels: int = 10
    balls: int = 10
    ball_radius: float = 0.05
    qp_tol: float = 1e-6
    # level set
    n_currents: int = 5
    max_iter: int = 300
    stop_tol: float = 1e-4
    stop_window: int = 10
    stop_reference: str = "initial"
    dt_min: float = 1e-6
    cfl: float = 0.5
    reinit_every: int = 5
    band: float | None = 0.1
    derivative_form: str = "standard"
    rasterization: str = "area"
    # simultaneous recovery
    sigma1_init: float = 1.5
    sigma1_max_factor: float = 10.0
    sigma1_update: str = "misfit"
    output: str = "out"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.data_n <= self.recon_n:
            raise ValueError("data grid must be finer than the inversion grid")
        if self.recon_n < 2 or self.m < 1 or self.pixels < 1 or self.balls < 1 or self.n_currents < 1:
            raise ValueError("grid sizes and counts must be positive")
        for name in ("sigma0", "sigma1", "alpha", "cbar", "ball_radius", "qp_tol", "support_fraction", "stop_tol", "dt_min", "cfl"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.delta < 0 or self.eta < 0:
            raise ValueError("noise levels must be nonnegative")
        if (self.delta > 0 or self.eta > 0) and self.seed is None:
            raise ValueError("a seed is required for noisy runs")
        if self.bounds not in ("monotone", "simplified"):
            raise ValueError("bounds must be 'monotone' or 'simplified'")
        if self.ntd_mesh not in ("recon", "data"):
            raise ValueError("ntd_mesh must be 'recon' or 'data'")
        if self.sigma1_max_factor <= 1:
            raise ValueError("sigma1_max_factor must exceed 1")
        if self.sigma1_update not in SIGMA1_UPDATES:
            raise ValueError(f"sigma1_update must be one of {SIGMA1_UPDATES}")

    def descent_config(self, sigma1: float | None = None) -> DescentConfig:
        return DescentConfig(sigma0=self.sigma0, sigma1=self.sigma1 if sigma1 is None else sigma1,
                             cfl=self.cfl, dt_min=self.dt_min, max_iter=self.max_iter,
                             stop_tol=self.stop_tol, stop_window=self.stop_window,
                             stop_reference=self.stop_reference, reinit_every=self.reinit_every,
                             band=self.band, derivative_form=self.derivative_form,
                             rasterization=self.rasterization)

    def seeds(self) -> tuple:
        """Independent streams for operator noise and voltage noise."""
        if self.seed is None:
            return None, None
        ss = np.random.SeedSequence(self.seed).spawn(2)
        return ss[0], ss[1]

    def as_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            lines.append(f"{f.name} = {_format_value(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"

    def updated(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)


def _format_value(v) -> str:
    return "none" if v is None else repr(v) if isinstance(v, float) else str(v)


def _coerce(name: str, raw: str, typ):
    text = raw.strip()
    if text.lower() in ("none", "null", ""):
        return None
    base = typ.replace(" | None", "").strip() if isinstance(typ, str) else typ
    if base in ("int", int):
        return int(text)
    if base in ("float", float):
        return float(text)
    return text


CONFIG_FIELDS = {f.name: f.type for f in dataclasses.fields(ExperimentConfig)}


def parse_config(text: str) -> dict:
    """Parse ``key = value`` lines (``#`` comments) into typed overrides."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep:
            raise ValueError(f"line {lineno}: expected 'key = value'")
        if key not in CONFIG_FIELDS:
            raise ValueError(f"line {lineno}: unknown key {key!r}")
        try:
            out[key] = _coerce(key, value, CONFIG_FIELDS[key])
        except ValueError as exc:
            raise ValueError(f"line {lineno}: bad value for {key}: {value.strip()!r}") from exc
    return out


def load_config(path) -> ExperimentConfig:
    return ExperimentConfig(**parse_config(Path(path).read_text()))


# --------------------------------------------------------------------------
# monotonicity stage


@dataclass
class MonotonicityData:
    """NtD data of one phantom and the sensitivities on the inversion mesh.

    ``ntd_mesh`` is the mesh the NtD matrices were simulated on: either the
    inversion mesh itself (discrete monotonicity holds exactly) or the finer
    data mesh.
    """

    data_mesh: CrossedMesh
    recon_mesh: CrossedMesh
    lam_sigma: NtdMatrix
    lam_sigma0: NtdMatrix
    target: NtdMatrix  # exact difference or its noisy version
    model: SensitivityModel
    delta: float


def monotonicity_data(config: ExperimentConfig, phantom: Phantom, orthonormalize: bool,
                      data_mesh: CrossedMesh | None = None,
                      recon_mesh: CrossedMesh | None = None) -> MonotonicityData:
    recon_mesh = recon_mesh or build_crossed_grid(config.recon_n)
    if config.ntd_mesh == "recon":
        data_mesh = recon_mesh
    else:
        data_mesh = data_mesh or build_crossed_grid(config.data_n)
    rec_basis = make_current_basis(recon_mesh, config.m, orthonormalize)
    if data_mesh is recon_mesh:
        data_basis = rec_basis
    else:
        data_basis = make_current_basis(data_mesh, config.m, orthonormalize, coefficients=rec_basis.coefficients)
    lam = ntd_matrix(data_mesh, phantom.conductivity(data_mesh), data_basis)
    lam0 = ntd_matrix(data_mesh, phantom.sigma0, data_basis)
    diff = lam - lam0
    op_seed, _ = config.seeds()
    target = add_operator_noise(diff, config.delta, op_seed) if config.delta > 0 else diff
    model = SensitivityModel(recon_mesh, phantom.sigma0, rec_basis)
    return MonotonicityData(data_mesh, recon_mesh, lam, lam0, target, model, config.delta)


def absolute_shift(target: NtdMatrix, delta: float) -> float:
    """The noise level in matrix units: ``delta * ||target||_F``."""
    return float(delta * np.linalg.norm(target.values))


def run_scan(config: ExperimentConfig, phantom: Phantom, data: MonotonicityData | None = None) -> TestBallGrid:
    with _Stage("scan-data"):
        data = data or monotonicity_data(config, phantom, orthonormalize=False)
    with _Stage("scan"):
        balls = TestBallGrid.uniform(config.balls, config.ball_radius)
        stack = data.model.stack(balls.regions(data.recon_mesh))
        return linearized_scan(data.target, stack, config.alpha, absolute_shift(data.target, config.delta),
                               balls, phantom.sigma0, phantom.sigma1)


def run_regularization(config: ExperimentConfig, phantom: Phantom,
                       data: MonotonicityData | None = None) -> PixelPartition:
    with _Stage("regularize-data"):
        data = data or monotonicity_data(config, phantom, orthonormalize=True)
    with _Stage("bounds"):
        stack = data.model.stack(pixel_regions(data.recon_mesh, config.pixels))
        if config.bounds == "simplified":
            bounds = np.full(len(stack), config.cbar)
        elif config.delta > 0:
            bounds = pixel_bounds_noisy(data.target, absolute_shift(data.target, config.delta), stack, config.cbar)
        else:
            bounds = pixel_bounds(data.target, stack, config.cbar)
    with _Stage("regularize"):
        return regularized_reconstruction(data.target, stack, bounds, config.cbar, tol=config.qp_tol,
                                          support_fraction=config.support_fraction)


def f1_score(predicted: np.ndarray, truth: np.ndarray) -> float:
    predicted, truth = np.asarray(predicted, bool), np.asarray(truth, bool)
    tp = np.sum(predicted & truth)
    if tp == 0:
        return 0.0
    precision = tp / predicted.sum()
    recall = tp / truth.sum()
    return float(2 * precision * recall / (precision + recall))


# --------------------------------------------------------------------------
# initial guess


@dataclass
class InitialGuess:
    shapes: list
    coefficients: np.ndarray  # the [iy, ix] pixel field the guess was fitted to
    labels: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.shapes)


def _fit_component(mask: np.ndarray, hp: float):
    iy, ix = np.nonzero(mask)
    x = (ix + 0.5) * hp
    y = (iy + 0.5) * hp
    area = len(ix) * hp * hp
    cx, cy = float(x.mean()), float(y.mean())
    # second moments of the union of pixels (each pixel adds hp^2/12 per axis)
    C = np.cov(np.vstack([x, y]), bias=True) + np.eye(2) * hp * hp / 12
    w, V = sym_eigen(C)
    w = np.maximum(w, 1e-300)
    major, minor = 2 * np.sqrt(w[1]), 2 * np.sqrt(w[0])
    scale = np.sqrt(area / (np.pi * major * minor))
    a, b = float(major * scale), float(minor * scale)
    if 0.8 <= a / b <= 1.25:
        return Circle(cx, cy, float(np.sqrt(area / np.pi)))
    angle = float(np.arctan2(V[1, 1], V[0, 1]))
    return Ellipse(cx, cy, a, b, angle)


def _clip_to_domain(shape, clearance: float):
    """Shrink a primitive about its center until it lies inside the square with clearance."""
    cx = min(max(shape.cx, 2 * clearance), 1 - 2 * clearance)
    cy = min(max(shape.cy, 2 * clearance), 1 - 2 * clearance)
    shape = dataclasses.replace(shape, cx=cx, cy=cy)
    x0, y0, x1, y1 = shape.bbox()
    room = min(cx - clearance, cy - clearance, 1 - clearance - cx, 1 - clearance - cy)
    half = max(cx - x0, cy - y0, x1 - cx, y1 - cy)
    if half <= room:
        return shape
    f = room / half
    if isinstance(shape, Circle):
        return Circle(cx, cy, float(shape.r * f))
    return dataclasses.replace(shape, a=float(shape.a * f), b=float(shape.b * f))


def extract_initial_guess(partition: PixelPartition, threshold: float = 0.5, min_pixels: int = 2,
                          clearance: float = 0.02) -> InitialGuess:
    """Circles/ellipses fitted by moments to the thresholded components of the pixel field."""
    a = partition.as_grid()
    amax = float(np.max(a)) if a.size else 0.0
    if not amax > 0:
        raise ValueError("empty monotonicity reconstruction")
    mask = a >= threshold * amax
    labels, count = ndimage.label(mask)  # 4-connectivity
    hp = 1.0 / partition.per_side
    shapes = []
    for lab in range(1, count + 1):
        comp = labels == lab
        if comp.sum() < min_pixels:
            continue
        shapes.append(_clip_to_domain(_fit_component(comp, hp), clearance))
    return InitialGuess(shapes, a, labels)


# --------------------------------------------------------------------------
# level-set stages


def phantom_measurements(config: ExperimentConfig, phantom: Phantom, data_mesh: CrossedMesh | None = None,
                         recon_mesh: CrossedMesh | None = None) -> MeasurementSet:
    data_mesh = data_mesh or build_crossed_grid(config.data_n)
    recon_mesh = recon_mesh or build_crossed_grid(config.recon_n)
    _, volt_seed = config.seeds()
    return make_measurements(data_mesh, phantom.conductivity(data_mesh), recon_mesh,
                             config.n_currents, config.eta, volt_seed)


@dataclass
class CombinedResult:
    partition: PixelPartition
    guess: InitialGuess
    initial: LevelSetField
    descent: DescentResult
    measurements: MeasurementSet
    data: MonotonicityData

    @property
    def field(self) -> LevelSetField:
        return self.descent.field


def combined_reconstruct(config: ExperimentConfig, phantom: Phantom | None = None,
                         snapshots: bool = True) -> CombinedResult:
    """Monotonicity-regularized initialization followed by level-set refinement."""
    phantom = phantom or get_phantom(config.phantom, config.sigma0, config.sigma1)
    with _Stage("meshes"):
        data_mesh = build_crossed_grid(config.data_n)
        recon_mesh = build_crossed_grid(config.recon_n)
    with _Stage("ntd-data"):
        data = monotonicity_data(config, phantom, True, data_mesh, recon_mesh)
    partition = run_regularization(config, phantom, data)
    with _Stage("initial-guess"):
        guess = extract_initial_guess(partition)
        phi0 = init_signed_distance(guess.shapes, recon_mesh)
    with _Stage("voltages"):
        meas = phantom_measurements(config, phantom, data_mesh, recon_mesh)
    with _Stage("levelset"):
        descent = levelset_reconstruct(phi0, meas, config.descent_config(), snapshots)
    return CombinedResult(partition, guess, phi0, descent, meas, data)


# --------------------------------------------------------------------------
# simultaneous shape and conductivity recovery


def parameter_residual(sigma1_est: float, chi: np.ndarray, meas: MeasurementSet, sigma0: float,
                       mesh: CrossedMesh | None = None) -> tuple[float, float]:
    """``Phi = sum_k [int sigma |grad u_k|^2 - <g_k, f_k>]`` and ``dPhi/dsigma1``.

    ``sigma = sigma0 + (sigma1_est - sigma0) chi`` with ``chi`` the per-triangle
    inclusion fraction; the derivative is ``-sum_k int chi |grad u_k|^2``.
    """
    if not sigma1_est > sigma0:
        raise ValueError(f"sigma1 estimate {sigma1_est} must exceed sigma0 = {sigma0}")
    mesh = mesh or meas.recon_mesh
    chi = np.asarray(chi, dtype=float)
    sigma = sigma0 + (sigma1_est - sigma0) * chi
    u = NeumannSolver(mesh, sigma).solve(meas.currents)
    gsq = np.sum(gradients(mesh, u) ** 2, axis=-1)  # (K, T)
    energy = float(np.sum(gsq @ (sigma * mesh.areas)))
    phi = energy - meas.data_energy()
    dphi = -float(np.sum(gsq @ (chi * mesh.areas)))
    return phi, dphi


def misfit_sigma_derivatives(sigma1_est: float, chi: np.ndarray, meas: MeasurementSet, sigma0: float,
                             mesh: CrossedMesh | None = None) -> tuple[float, float, float]:
    """Misfit ``J`` with its first and second derivatives in sigma1 at a fixed shape.

    ``dJ = sum_k int chi (|grad v_k|^2 - |grad u_k|^2)``; the second derivative
    follows from differentiating both states,
    ``d2J = 2 sum_k [(K_chi u)^T K^+ (K_chi u) - (K_chi v)_I^T K_II^-1 (K_chi v)_I]``.
    """
    if not sigma1_est > sigma0:
        raise ValueError(f"sigma1 estimate {sigma1_est} must exceed sigma0 = {sigma0}")
    mesh = mesh or meas.recon_mesh
    chi = np.asarray(chi, dtype=float)
    sigma = sigma0 + (sigma1_est - sigma0) * chi
    neu = NeumannSolver(mesh, sigma)
    dir_ = DirichletSolver(mesh, sigma)
    u = neu.solve(meas.currents)
    v = dir_.solve(meas.voltages)
    du, dv = gradients(mesh, u), gradients(mesh, v)
    J = float(np.sum(np.sum((du - dv) ** 2, axis=-1) @ (sigma * mesh.areas)))
    wchi = chi * mesh.areas
    dJ = float(np.sum((np.sum(dv * dv, axis=-1) - np.sum(du * du, axis=-1)) @ wchi))
    bu = weighted_stiffness_action(mesh, chi, u)
    bv = weighted_stiffness_action(mesh, chi, v)
    d2J = 2.0 * float(np.sum(bu * neu.solve_load(bu)) - np.sum(bv * dir_.solve_interior(bv)))
    return J, dJ, d2J


SIGMA1_UPDATES = ("misfit", "residual")


def sigma1_residual(kind: str, sigma1_est: float, chi, meas: MeasurementSet, sigma0: float) -> tuple[float, float]:
    """Increasing scalar residual whose root is the sigma1 estimate, with its derivative.

    ``"misfit"`` is the stationarity condition ``dJ/dsigma1 = 0`` of the misfit;
    ``"residual"`` is the energy balance ``-Phi = 0``.
    """
    if kind == "misfit":
        _, r, dr = misfit_sigma_derivatives(sigma1_est, chi, meas, sigma0)
        return r, dr
    if kind == "residual":
        phi, dphi = parameter_residual(sigma1_est, chi, meas, sigma0)
        return -phi, -dphi
    raise ValueError(f"unknown sigma1 update {kind!r}; expected one of {SIGMA1_UPDATES}")


class BracketLost(RuntimeError):
    def __init__(self, message, history):
        super().__init__(message)
        self.history = history


@dataclass
class ParameterFitState:
    sigma1: float
    lo: float
    hi: float
    kind: str = "misfit"
    residual: float = np.nan
    slope: float = np.nan
    history: list = field(default_factory=list)

    def __post_init__(self):
        # closed bracket: once converged, bisection may land on an end point
        if not self.lo <= self.sigma1 <= self.hi:
            raise ValueError("sigma1 estimate must lie inside the bracket")
        if self.kind not in SIGMA1_UPDATES:
            raise ValueError(f"unknown sigma1 update {self.kind!r}")


def newton_update(state: ParameterFitState, chi, meas: MeasurementSet, sigma0: float,
                  floor: float | None = None, ceil: float | None = None) -> ParameterFitState:
    """One safeguarded Newton step on the sigma1 residual for a fixed shape.

    The bracket (residual nonpositive at ``lo``, nonnegative at ``hi``) is
    re-validated for the current shape since the shape moves between calls;
    a bound that no longer brackets is reset to the admissible interval end.
    The step falls back to bisection when Newton leaves the bracket.
    """
    floor = sigma0 + 1e-3 if floor is None else floor
    ceil = state.hi if ceil is None else ceil
    res = lambda s: sigma1_residual(state.kind, s, chi, meas, sigma0)  # noqa: E731
    lo, hi = state.lo, state.hi
    # closed sign conditions: an exact root at an end point still brackets
    r_lo = res(lo)[0]
    if r_lo > 0 and lo > floor:
        lo = floor
        r_lo = res(lo)[0]
    r_hi = res(hi)[0]
    if r_hi < 0 and hi < ceil:
        hi = ceil
        r_hi = res(hi)[0]
    if not (r_lo <= 0 <= r_hi):
        raise BracketLost(f"no sign change of the {state.kind} residual on [{lo:.6g}, {hi:.6g}] "
                          f"(values {r_lo:.3e}, {r_hi:.3e})", state.history)
    s = min(max(state.sigma1, lo), hi)
    r, dr = res(s)
    if r < 0:
        lo = s
    else:
        hi = s
    cand = s - r / dr if dr > 0 else np.nan
    new = cand if (np.isfinite(cand) and lo < cand < hi) else 0.5 * (lo + hi)
    state.history.append({"sigma1": s, "residual": r, "slope": dr, "lo": lo, "hi": hi})
    return ParameterFitState(float(new), lo, hi, state.kind, r, dr, state.history)


@dataclass
class SimultaneousResult:
    field: LevelSetField
    history: list[DescentRecord]
    sigma1: float
    fit: ParameterFitState
    stop_reason: str


def simultaneous_reconstruct(config: ExperimentConfig, phantom: Phantom | None, phi0: LevelSetField,
                             meas: MeasurementSet, snapshots: bool = False) -> SimultaneousResult:
    """Alternate one accepted level-set step with one guarded Newton step on sigma1."""
    sigma0 = config.sigma0
    floor, ceil = sigma0 + 1e-3, config.sigma1_max_factor * sigma0
    fit = ParameterFitState(config.sigma1_init, floor, ceil, config.sigma1_update)
    dconf = config.descent_config(fit.sigma1)
    stepper = DescentStepper(phi0, meas, dconf)
    history = [DescentRecord(0, stepper.state.J, 0.0, 0, stepper.field.contours() if snapshots else [],
                             fit.sigma1)]
    reason = "max_iter"
    for it in range(1, config.max_iter + 1):
        J_before = stepper.state.J
        out = stepper.step()
        if out is None:
            if it == 1 and not stepper.at_floor():
                raise StationaryInitialization("stationary initialization")
            reason = "dt_underflow"
            break
        if not stepper.state.J < J_before:
            raise AssertionError("accepted shape step did not decrease J")
        dt, rejected, reinit = out
        chi = stepper.field.inside_fraction() if dconf.rasterization == "area" else stepper.field.centroid_indicator()
        fit = newton_update(fit, chi, meas, sigma0, floor, ceil)
        stepper.refresh(fit.sigma1)
        history.append(DescentRecord(it, stepper.state.J, dt, rejected,
                                     stepper.field.contours() if snapshots else [], fit.sigma1, reinit))
        if _simultaneous_converged(history, config):
            reason = "stop_tol"
            break
    return SimultaneousResult(stepper.field, history, fit.sigma1, fit, reason)


def _simultaneous_converged(history: list[DescentRecord], config: ExperimentConfig) -> bool:
    w = config.stop_window
    if len(history) <= w:
        return False
    J_old, J_new = history[-1 - w].J, history[-1].J
    ref = history[0].J if config.stop_reference == "initial" else J_old
    s_old, s_new = history[-1 - w].sigma1, history[-1].sigma1
    return abs(J_old - J_new) <= config.stop_tol * ref and abs(s_new - s_old) <= config.stop_tol * s_new
