import numpy as np
import pytest

from eitshape.grid_fem import build_crossed_grid
from eitshape.kv_levelset import Circle, Ellipse, conductivity_from_levelset, init_signed_distance, make_measurements
from eitshape.monotonicity import PixelPartition
from eitshape.pipeline import (
    PHANTOMS,
    BracketLost,
    ExperimentConfig,
    ParameterFitState,
    PipelineError,
    _Stage,
    extract_initial_guess,
    f1_score,
    get_phantom,
    misfit_sigma_derivatives,
    newton_update,
    parameter_residual,
    parse_config,
    run_regularization,
    sigma1_residual,
    simultaneous_reconstruct,
    symmetric_difference,
)


def partition(grid):
    grid = np.asarray(grid, dtype=float)
    n = grid.shape[0]
    return PixelPartition(n, np.ones(n * n), grid.ravel(), 0.0, 0)


def jaccard(shapes, phantom, resolution=400):
    pts, truth = phantom.raster(resolution)
    guess = np.min([s.signed_distance(pts) for s in shapes], axis=0) < 0
    return np.sum(guess & truth) / np.sum(guess | truth)


@pytest.fixture(scope="module")
def disk_pair():
    """Disk data on n=64 resampled to n=32, with the true inclusion fraction on n=32."""
    data, recon = build_crossed_grid(64), build_crossed_grid(32)
    disk = get_phantom("disk")
    meas = make_measurements(data, disk.conductivity(data), recon)
    return recon, meas, disk.indicator(recon)


# --------------------------------------------------------------------------
# configuration


def test_parse_config():
    text = "phantom = kite  # comment\n\nsigma1 = 3\nseed = none\ndelta=0.1\n"
    assert parse_config(text) == {"phantom": "kite", "sigma1": 3.0, "seed": None, "delta": 0.1}
    with pytest.raises(ValueError, match="unknown key"):
        parse_config("colour = red")
    with pytest.raises(ValueError, match="expected"):
        parse_config("phantom kite")
    with pytest.raises(ValueError, match="bad value"):
        parse_config("m = many")


def test_config_roundtrip_and_validation():
    cfg = ExperimentConfig(phantom="square", delta=0.1, seed=4, band=None)
    assert ExperimentConfig(**parse_config(cfg.as_text())) == cfg
    for bad in ({"data_n": 64, "recon_n": 64}, {"delta": 0.1}, {"bounds": "loose"}, {"ntd_mesh": "other"},
                {"sigma1_update": "gradient"}, {"sigma1_max_factor": 1.0}, {"support_fraction": 0.0},
                {"cfl": -1.0}):
        with pytest.raises(ValueError):
            ExperimentConfig(**bad)


def test_config_seed_streams():
    a, b = ExperimentConfig(delta=0.1, seed=3).seeds()
    a2, _ = ExperimentConfig(delta=0.1, seed=3).seeds()
    assert np.random.default_rng(a).random() == np.random.default_rng(a2).random()
    assert np.random.default_rng(a).random() != np.random.default_rng(b).random()
    assert ExperimentConfig().seeds() == (None, None)


# --------------------------------------------------------------------------
# phantoms


def test_phantom_gallery():
    assert set(PHANTOMS) == {"disk", "square", "kite", "disk_square"}
    with pytest.raises(KeyError, match="unknown phantom"):
        get_phantom("star")
    assert get_phantom("disk", 1.0, 3.0).sigma1 == 3.0
    assert get_phantom("disk").area() == pytest.approx(np.pi * 0.04, rel=1e-3)
    assert get_phantom("square").area() == pytest.approx(0.09, rel=1e-3)
    with pytest.raises(ValueError):
        get_phantom("disk", 1.0, 1.0)


def test_phantom_rasterization(mesh64):
    for ph in PHANTOMS.values():
        ind = ph.indicator(mesh64)
        assert np.all((ind >= 0) & (ind <= 1))
        assert np.sum(ind * mesh64.areas) == pytest.approx(ph.area(), abs=2 * mesh64.h**2)
    kite = get_phantom("kite")
    # the concavity: the ellipse center region below the cut disk is inside, the cut is not
    assert kite.inside(np.array([[0.5, 0.35]]))[0] and not kite.inside(np.array([[0.5, 0.6]]))[0]


def test_pixel_truth_and_distance():
    disk = get_phantom("disk")
    truth = disk.pixel_truth(10).reshape(10, 10)
    assert truth[5, 5] and not truth[0, 0]
    assert truth.sum() == 16
    d = disk.distance_to_closure(np.array([[0.5, 0.5], [0.5, 0.9], [0.9, 0.9]]))
    np.testing.assert_allclose(d, [0.0, 0.2, np.hypot(0.4, 0.4) - 0.2])


def test_symmetric_difference(mesh64):
    disk = get_phantom("disk")
    exact = symmetric_difference(init_signed_distance([Circle(0.5, 0.5, 0.2)], mesh64), disk, 500)
    shifted = symmetric_difference(init_signed_distance([Circle(0.55, 0.5, 0.2)], mesh64), disk, 500)
    assert exact <= 2 * mesh64.h**2
    # two lenses of a 0.05 shift: about 4 r d
    assert shifted == pytest.approx(4 * 0.2 * 0.05, rel=0.05)


def test_f1_score():
    assert f1_score([1, 1, 0, 0], [1, 1, 0, 0]) == 1.0
    assert f1_score([0, 0, 1, 1], [1, 1, 0, 0]) == 0.0
    assert f1_score([1, 1, 1, 0], [1, 0, 0, 0]) == pytest.approx(0.5)


# --------------------------------------------------------------------------
# initial guess


def test_guess_single_block():
    grid = np.zeros((10, 10))
    grid[4:7, 2:5] = 0.4
    guess = extract_initial_guess(partition(grid))
    assert len(guess) == 1
    c = guess.shapes[0]
    assert isinstance(c, Circle)
    assert (c.cx, c.cy) == pytest.approx((0.35, 0.55))
    assert np.pi * c.r**2 == pytest.approx(0.09)


def test_guess_two_blocks_and_elongated():
    grid = np.zeros((10, 10))
    grid[1:3, 1:3] = 0.5
    grid[6:8, 3:9] = 0.5
    guess = extract_initial_guess(partition(grid))
    assert len(guess) == 2
    assert any(isinstance(s, Ellipse) and s.a > 2 * s.b for s in guess.shapes)


def test_guess_empty_and_border():
    with pytest.raises(ValueError, match="empty monotonicity reconstruction"):
        extract_initial_guess(partition(np.zeros((10, 10))))
    grid = np.zeros((10, 10))
    grid[0:3, 0:3] = 1.0
    s = extract_initial_guess(partition(grid)).shapes[0]
    x0, y0, x1, y1 = s.bbox()
    assert min(x0, y0) >= 0.02 - 1e-12 and max(x1, y1) <= 0.98


def test_guess_from_noisy_disk():
    cfg = ExperimentConfig(recon_n=32, data_n=64, m=16, delta=0.1, seed=2)
    disk = get_phantom("disk")
    guess = extract_initial_guess(run_regularization(cfg, disk))
    assert len(guess) >= 1
    assert jaccard(guess.shapes, disk) >= 0.3


def test_stage_tagging():
    with pytest.raises(PipelineError) as info:
        with _Stage("bounds"):
            raise ValueError("boom")
    assert info.value.stage == "bounds" and "[bounds] boom" in str(info.value)


# --------------------------------------------------------------------------
# conductivity parameter


def test_parameter_residual_same_mesh(mesh32):
    field = init_signed_distance([Circle(0.5, 0.5, 0.2)], mesh32)
    chi = field.inside_fraction()
    meas = make_measurements(mesh32, conductivity_from_levelset(field, 1.0, 2.0), mesh32, allow_same_mesh=True)
    phi, dphi = parameter_residual(2.0, chi, meas, 1.0)
    assert abs(phi) <= 1e-10 * meas.data_energy()
    assert dphi < 0
    with pytest.raises(ValueError):
        parameter_residual(0.9, chi, meas, 1.0)


def test_parameter_residual_sign_change(disk_pair):
    recon, meas, chi = disk_pair
    assert parameter_residual(1.1, chi, meas, 1.0)[0] > 0 > parameter_residual(4.0, chi, meas, 1.0)[0]
    vals = [parameter_residual(s, chi, meas, 1.0)[0] for s in (1.2, 1.6, 2.0, 2.4)]
    assert np.all(np.diff(vals) < 0)


def test_misfit_derivatives_finite_difference(disk_pair):
    _, meas, chi = disk_pair
    s, eps = 1.7, 1e-4
    J, dJ, d2J = misfit_sigma_derivatives(s, chi, meas, 1.0)
    Jp, dJp, _ = misfit_sigma_derivatives(s + eps, chi, meas, 1.0)
    Jm, dJm, _ = misfit_sigma_derivatives(s - eps, chi, meas, 1.0)
    assert dJ == pytest.approx((Jp - Jm) / (2 * eps), rel=1e-5)
    assert d2J == pytest.approx((dJp - dJm) / (2 * eps), rel=1e-5)
    assert d2J > 0


def test_newton_update_converges(disk_pair):
    _, meas, chi = disk_pair
    for kind in ("misfit", "residual"):
        state = ParameterFitState(1.5, 1.001, 10.0, kind)
        for _ in range(12):
            state = newton_update(state, chi, meas, 1.0)
        r, _ = sigma1_residual(kind, state.sigma1, chi, meas, 1.0)
        assert abs(r) <= 1e-8 * meas.data_energy()
        assert state.lo <= state.sigma1 <= state.hi
        assert len(state.history) == 12
    # the misfit stationary point sits at the true contrast to within the discretization error
    fit = ParameterFitState(1.5, 1.001, 10.0)
    for _ in range(12):
        fit = newton_update(fit, chi, meas, 1.0)
    assert fit.sigma1 == pytest.approx(2.0, rel=0.03)


def test_newton_update_bracket(disk_pair):
    _, meas, chi = disk_pair
    with pytest.raises(ValueError):
        ParameterFitState(1.0, 1.5, 10.0)
    with pytest.raises(ValueError):
        ParameterFitState(1.5, 1.001, 10.0, "other")
    with pytest.raises(ValueError):
        sigma1_residual("other", 1.5, chi, meas, 1.0)
    # a stale lower end that no longer brackets is reset to the floor
    state = newton_update(ParameterFitState(3.5, 3.0, 10.0), chi, meas, 1.0)
    assert state.lo == pytest.approx(1.001)
    # an admissible interval without a sign change cannot be repaired
    with pytest.raises(BracketLost, match="no sign change") as info:
        newton_update(ParameterFitState(5.0, 4.0, 6.0), chi, meas, 1.0, floor=4.0, ceil=6.0)
    assert isinstance(info.value.history, list)


def test_simultaneous_short_run(disk_pair):
    recon, meas, _ = disk_pair
    cfg = ExperimentConfig(recon_n=32, data_n=64, max_iter=6, sigma1_init=1.5)
    phi0 = init_signed_distance([Circle(0.47, 0.52, 0.18)], recon)
    res = simultaneous_reconstruct(cfg, None, phi0, meas)
    assert len(res.history) == 7
    assert all(1.0 < r.sigma1 <= 10.0 for r in res.history)
    assert res.history[-1].J < res.history[0].J
    assert abs(res.sigma1 - 2.0) < abs(1.5 - 2.0)
