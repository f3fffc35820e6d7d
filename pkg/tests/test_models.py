import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from score_assim.errors import ConfigError, DomainError
from score_assim.models import (
    BearingOnly,
    DoubleWell,
    LinearGaussian,
    Lorenz96,
    Trajectory,
    bearing_observe,
    bearing_propagate,
    double_well_propagate,
    linear_gaussian_model,
    loglik,
    loglik_grad,
    lorenz96_drift,
    lorenz96_propagate,
    lorenz96_spinup,
    read_trajectory_csv,
    simulate_truth,
    write_trajectory_csv,
)

ALL_MODELS = [DoubleWell(), BearingOnly(), Lorenz96(dim=6), LinearGaussian(0.9, 1.3, 0.04, 0.25)]


def _random_state(model, rng):
    if isinstance(model, BearingOnly):
        return rng.normal(size=2) * 2 + np.array([1.0, 1.0])
    if isinstance(model, Lorenz96):
        return rng.normal(size=model.state_dim) * 2
    return rng.normal(size=model.state_dim) * 1.5


@pytest.mark.parametrize("model", ALL_MODELS, ids=lambda m: m.name)
def test_jacobian_matches_finite_differences(model, rng):
    h = 1e-6
    for _ in range(20):
        x = _random_state(model, rng)
        jac = model.obs_jacobian(x)
        fd = np.stack([(model.obs_mean(x + h * e) - model.obs_mean(x - h * e)) / (2 * h)
                       for e in np.eye(model.state_dim)], axis=-1)
        np.testing.assert_allclose(jac, fd, rtol=1e-5, atol=1e-8)


@pytest.mark.parametrize("model", ALL_MODELS, ids=lambda m: m.name)
def test_loglik_gradient_matches_finite_differences(model, rng):
    h = 1e-6
    for _ in range(10):
        x = _random_state(model, rng)
        y = model.observe(_random_state(model, rng), rng)
        g = loglik_grad(model, x, y)
        fd = np.array([(loglik(model, x + h * e, y) - loglik(model, x - h * e, y)) / (2 * h)
                       for e in np.eye(model.state_dim)])
        np.testing.assert_allclose(g, fd, rtol=1e-5, atol=1e-6 * max(1.0, np.abs(fd).max()))


@pytest.mark.parametrize("model", ALL_MODELS, ids=lambda m: m.name)
def test_batched_methods_match_single_calls(model, rng):
    xs = np.stack([_random_state(model, rng) for _ in range(4)])
    y = model.observe(xs[0], rng)
    for i in range(4):
        np.testing.assert_allclose(model.loglik_grad(xs, y)[i], model.loglik_grad(xs[i], y), rtol=1e-13)
        np.testing.assert_allclose(model.loglik(xs, y)[i], model.loglik(xs[i], y), rtol=1e-13)
        np.testing.assert_allclose(model.obs_jacobian(xs)[i], model.obs_jacobian(xs[i]), rtol=1e-13)
        np.testing.assert_allclose(model.loglik_curvature(xs)[i], model.loglik_curvature(xs[i]), rtol=1e-13)


@pytest.mark.parametrize("model", ALL_MODELS, ids=lambda m: m.name)
def test_curvature_is_gauss_newton_diagonal(model, rng):
    x = _random_state(model, rng)
    jac = model.obs_jacobian(x)
    want = np.diag(jac.T @ model.obs_precision @ jac)
    np.testing.assert_allclose(model.loglik_curvature(x), want, rtol=1e-12)
    assert np.all(model.loglik_curvature(x) >= 0)


def test_general_path_matches_elementwise_shortcut(rng):
    model = Lorenz96(dim=5)
    x = rng.normal(size=(3, 5))
    y = model.observe(x[0], rng)
    fast = model.loglik_grad(x, y)
    model.elementwise_obs = False
    np.testing.assert_allclose(model.loglik_grad(x, y), fast, rtol=1e-12)


def test_zero_residual_gives_zero_gradient():
    for model in ALL_MODELS:
        x = _random_state(model, np.random.default_rng(0))
        np.testing.assert_allclose(loglik_grad(model, x, model.obs_mean(x)), 0.0, atol=1e-12)


def test_double_well_gradient_example():
    assert loglik_grad(DoubleWell(), np.array([1.1]), np.array([1.0]))[0] == pytest.approx(-10.0, rel=1e-12)


def test_singular_covariance_is_rejected():
    with pytest.raises(ConfigError):
        BearingOnly(obs_var=0.0)
    with pytest.raises(ConfigError):
        DoubleWell(obs_std=0.0)


def test_double_well_examples():
    assert double_well_propagate(1.0, 0.7, noise=0.0) == 1.0
    assert double_well_propagate(-1.0, 0.3, noise=0.0) == -1.0
    assert double_well_propagate(0.0, 0.3, noise=0.0) == 0.0
    assert double_well_propagate(0.5, 0.3, noise=0.0) == pytest.approx(0.65, abs=1e-15)
    m = DoubleWell(beta=0.3)
    assert m.propagate(np.array([0.5]), noise=np.zeros(1))[0] == pytest.approx(0.65, abs=1e-15)
    assert m.process_std[0] == pytest.approx(0.3 * np.sqrt(0.1))
    with pytest.raises(ConfigError):
        double_well_propagate(0.0, 0.0, noise=0.0)
    with pytest.raises(ConfigError):
        DoubleWell(beta=-1)


def test_double_well_drift_points_toward_nearer_well():
    m = DoubleWell()
    for x in np.linspace(-3, 3, 121):
        drift = m.propagate_mean(np.array([x]))[0] - x
        if abs(x) > 1 + 1e-12:
            assert np.sign(drift) == -np.sign(x)
        elif 1e-12 < abs(x) < 1 - 1e-12:
            assert np.sign(drift) == np.sign(x)


def test_bearing_examples():
    np.testing.assert_allclose(bearing_propagate(np.array([1.0, 1.0]), noise=np.zeros(2)), [1.2, 1.3])
    assert bearing_observe(np.array([-4.0, 10.0]))[0] == 0.0
    np.testing.assert_allclose(BearingOnly().obs_jacobian(np.array([1.0, 1.0])), [[9 / 117, 6 / 117]], rtol=1e-14)
    m = BearingOnly()
    assert m.obs_cov[0, 0] == 0.01
    np.testing.assert_allclose(m.prior_mean, [1.0, 1.0])


def test_bearing_undefined_on_platform_axis():
    with pytest.raises(DomainError):
        bearing_observe(np.array([-5.0, 3.0]))
    assert bearing_observe(np.array([-5.0, 3.0]), full_circle=True)[0] == pytest.approx(-np.pi / 2)


@given(st.floats(-50, 50), st.floats(-50, 50))
def test_bearing_range(x1, x2):
    if x1 == -5.0:
        return
    angle = bearing_observe(np.array([x1, x2]))[0]
    assert -np.pi / 2 <= angle <= np.pi / 2


def test_full_circle_bearing_agrees_east_of_platform(rng):
    x = rng.normal(size=(20, 2)) + np.array([3.0, 10.0])
    np.testing.assert_allclose(bearing_observe(x, full_circle=True), bearing_observe(x), rtol=1e-14)
    m = BearingOnly(full_circle=True)
    assert m.obs_mean(np.array([-6.0, 10.0]))[0] == pytest.approx(np.pi)


def test_lorenz_examples():
    for damping in (True, False):
        np.testing.assert_array_equal(lorenz96_drift(np.zeros(7), 8.0, damping), 8.0)
    np.testing.assert_array_equal(lorenz96_drift(np.full(7, 8.0), 8.0, True), 0.0)
    # independent index-table evaluation for d=4, x=(1,2,3,4)
    np.testing.assert_array_equal(lorenz96_drift(np.array([1.0, 2.0, 3.0, 4.0]), 8.0, False), [4.0, 7.0, 14.0, 5.0])
    with pytest.raises(ConfigError):
        lorenz96_drift(np.zeros(3))
    with pytest.raises(ConfigError):
        Lorenz96(dim=3)


@settings(max_examples=30)
@given(st.integers(4, 40), st.integers(0, 2**31))
def test_lorenz_advection_conserves_energy(d, seed):
    x = np.random.default_rng(seed).normal(size=d) * 5
    assert abs(x @ lorenz96_drift(x, 0.0, False)) <= 1e-10 * max(1.0, np.sum(x * x) ** 1.5)


def test_lorenz_model_pieces(rng):
    m = Lorenz96(dim=5)
    x = rng.normal(size=5)
    np.testing.assert_allclose(m.obs_mean(x), x**3)
    np.testing.assert_allclose(m.obs_jacobian(x), np.diag(3 * x**2))
    np.testing.assert_allclose(m.propagate(x, noise=np.zeros(5)), x + 0.01 * lorenz96_drift(x))
    np.testing.assert_allclose(lorenz96_propagate(x, noise=np.zeros(5)), m.propagate(x, noise=np.zeros(5)))
    assert np.all(m.process_std == 0.1)
    np.testing.assert_array_equal(m.prior_mean, lorenz96_spinup(5))


def test_lorenz_spinup_reaches_chaotic_regime():
    x0 = lorenz96_spinup(10)
    assert np.all(np.isfinite(x0))
    assert x0.std() > 1.0


def test_undamped_lorenz_starts_at_perturbed_equilibrium():
    m = Lorenz96(dim=6, damping=False)
    np.testing.assert_array_equal(m.prior_mean, [8.01, 8, 8, 8, 8, 8])
    with pytest.raises(ConfigError):
        lorenz96_spinup(10, damping=False, steps=1000)


def test_linear_gaussian_examples():
    m = linear_gaussian_model(1.0, 1.0, 1e-12, 1.0)
    np.testing.assert_allclose(m.propagate(np.array([0.4]), noise=np.ones(1)), [0.4], atol=1e-6)
    m = linear_gaussian_model(0.9, 1.0, 0.04, 1.0)
    assert m.propagate(np.array([1.0]), noise=np.zeros(1))[0] == pytest.approx(0.9)
    assert loglik_grad(m, np.array([1.0]), np.array([1.0]))[0] == 0.0
    with pytest.raises(ConfigError):
        LinearGaussian(q=0.0)


def test_simulate_truth_single_step():
    tr = simulate_truth(DoubleWell(), 1, seed=0)
    assert tr.truth.shape == (1, 1) and tr.observations.shape == (1, 1)
    assert np.all(np.isfinite(tr.truth)) and np.all(np.isfinite(tr.observations))
    with pytest.raises(ConfigError):
        simulate_truth(DoubleWell(), 0, seed=0)


def test_simulate_truth_is_deterministic():
    a = simulate_truth(Lorenz96(dim=8), 30, seed=5, shocks=[(10, 2.0)])
    b = simulate_truth(Lorenz96(dim=8), 30, seed=5, shocks=[(10, 2.0)])
    np.testing.assert_array_equal(a.truth, b.truth)
    np.testing.assert_array_equal(a.observations, b.observations)
    assert a.seed == 5


def test_noise_free_observations_equal_g_of_truth():
    m = BearingOnly()
    tr = simulate_truth(m, 15, seed=2, obs_noise=False)
    np.testing.assert_array_equal(tr.observations, m.obs_mean(tr.truth))


def test_shock_perturbs_only_from_its_step():
    m = Lorenz96(dim=6)
    calm = simulate_truth(m, 12, seed=4)
    shocked = simulate_truth(m, 12, seed=4, shocks=[(5, 2.0)])
    np.testing.assert_array_equal(calm.truth[:4], shocked.truth[:4])
    jump = shocked.truth[4] - calm.truth[4]
    assert np.all(np.abs(jump) <= 2.0) and np.any(jump != 0)


def test_trajectory_csv_round_trip(tmp_path):
    tr = simulate_truth(BearingOnly(), 7, seed=9)
    path = tmp_path / "traj.csv"
    write_trajectory_csv(tr, path)
    lines = path.read_text().splitlines()
    assert lines[0] == "step,x_0,x_1,y_0"
    assert len(lines) == 8
    back = read_trajectory_csv(path)
    np.testing.assert_array_equal(back.truth, tr.truth)
    np.testing.assert_array_equal(back.observations, tr.observations)


def test_trajectory_row_counts_must_match():
    with pytest.raises(ConfigError):
        Trajectory(np.zeros((3, 2)), np.zeros((2, 1)))


def test_describe_names_every_model():
    assert {m.describe()["name"] for m in ALL_MODELS} == {"double_well", "bearing", "lorenz96", "linear_gaussian"}
    assert Lorenz96(damping=False).describe()["damping"] is False


def test_obs_covariance_shape_and_symmetry_checked():
    with pytest.raises(ConfigError):
        DoubleWell()._setup_noise(np.eye(2), 0.1, 0.0, 0.1)
    asym = np.eye(4)
    asym[0, 1] = 0.5
    with pytest.raises(ConfigError):
        Lorenz96(dim=4, x0=np.zeros(4))._setup_noise(asym, 0.1, 0.0, 0.1)


def test_observe_with_injected_noise():
    m = DoubleWell(obs_std=0.5)
    np.testing.assert_allclose(m.observe(np.array([[1.0]]), noise=np.array([[2.0]])), [[2.0]])


def test_double_well_propagate_rejects_nonpositive_beta():
    with pytest.raises(ConfigError):
        double_well_propagate(np.array([1.0]), 0.0, noise=np.zeros(1))


def test_lorenz_explicit_initial_state():
    m = Lorenz96(dim=5, x0=np.arange(5.0))
    np.testing.assert_array_equal(m.prior_mean, np.arange(5.0))
