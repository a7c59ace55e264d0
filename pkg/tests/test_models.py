import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from cthmm import models
from cthmm.diffusion import DiffusionModel, DiscreteObservations
from cthmm.exceptions import ModelBlowupError


def central_difference(fun, x, h=1e-6):
    """Jacobian of a single-point map by central differences, one column at a time."""
    x = np.asarray(x, dtype=float)
    cols = []
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        cols.append((np.asarray(fun(x + e)) - np.asarray(fun(x - e))) / (2 * h))
    return np.stack(cols, axis=-1)


def probe_states(name, rng, d):
    if name == "bearings":
        x = rng.uniform(-2, 2, 4)
        # keep the target away from the observer so the bearing is smooth
        x[[0, 2]] = rng.choice([-1, 1], 2) * rng.uniform(0.3, 2.0, 2)
        return x
    return rng.uniform(-2, 2, d)


ZOO = {
    "bearings": lambda: models.bearings(),
    "cubic_matrix": lambda: models.cubic_matrix(3, F=np.arange(9.0).reshape(3, 3) - 4, x0=np.zeros(3)),
    "cubic_tridiagonal": lambda: models.cubic_tridiagonal(6, lam=3.0),
    "lorenz96": lambda: models.lorenz96(7, forcing=5.0),
    "linear": lambda: models.linear([[-1.0, 2.0], [0.5, -0.3]], [[1.0, 0.5]]),
}


# ---------------------------------------------------------------------------
# constructors
# ---------------------------------------------------------------------------


class TestConstructors:
    def test_bearings_drift_at_start(self):
        m = models.bearings()
        x = np.array([0.0, 1.0, 1.0, 0.0])
        f = m.f(x)
        assert np.array_equal(f, [1.0, -0.5, 0.0, -1.0])
        A, b = m.drift_linear(x)
        assert np.array_equal(A @ m.theta + b, f)

    def test_bearings_decomposition_structure(self):
        A, b = models.bearings().drift_linear(np.array([3.0, 4.0, 5.0, 6.0]))
        assert np.array_equal(A, [[0, 0], [1, 0], [0, 0], [0, 1]])
        assert np.array_equal(b, [4.0, 0.0, 6.0, 0.0])

    def test_bearings_observation_is_single_argument_arctan(self):
        m = models.bearings()
        x = np.array([[-1.0, 0.0, 1.0, 0.0], [1.0, 0.0, 1.0, 0.0]])
        np.testing.assert_allclose(m.h(x)[:, 0], [-np.pi / 4, np.pi / 4])

    def test_bearings_observation_limit_on_axis(self):
        m = models.bearings()
        assert m.h(np.array([0.0, 0.0, 2.0, 0.0]))[0] == pytest.approx(np.pi / 2)

    def test_bearings_jacobian_rejects_observer_position(self):
        with pytest.raises(ValueError):
            models.bearings().jac_h(np.array([0.0, 1.0, 0.0, 1.0]))

    def test_bearings_observation_gradient(self):
        J = models.bearings().jac_h(np.array([3.0, 0.0, 4.0, 0.0]))
        np.testing.assert_allclose(J, [[[-4 / 25, 0, 3 / 25, 0][i] for i in range(4)]])

    def test_tridiagonal_minimal_pattern(self):
        assert np.array_equal(models.tridiagonal_pattern(2), [[-1, 1], [1, -1]])

    def test_tridiagonal_pattern_rows(self):
        L = models.tridiagonal_pattern(5)
        assert np.array_equal(L[2], [0, 1, -2, 1, 0])
        assert np.array_equal(L[0], [-1, 1, 0, 0, 0])
        assert np.all(L.sum(axis=1) == 0)

    def test_tridiagonal_needs_two_states(self):
        with pytest.raises(ValueError):
            models.cubic_tridiagonal(1)

    def test_tridiagonal_start_and_decomposition(self):
        m = models.cubic_tridiagonal(5, lam=5.0)
        x = m.init(np.random.default_rng(0), 1)[0]
        assert np.array_equal(x, np.linspace(-1, 1, 5))
        A, b = m.drift_linear(x)
        assert A.shape == (5, 1) and np.all(b == 0)
        np.testing.assert_allclose(A[:, 0], models.tridiagonal_pattern(5) @ x)

    def test_lorenz_equilibrium(self):
        m = models.lorenz96(10, forcing=8.0)
        x0 = m.init(np.random.default_rng(0), 1)[0]
        assert np.all(x0 == 8.0)
        assert np.all(m.f(x0) == 0.0)

    def test_lorenz_needs_four_states(self):
        with pytest.raises(ValueError):
            models.lorenz96(3)

    def test_lorenz_index_convention(self):
        m = models.lorenz96(5, forcing=1.5)
        x = np.array([1.0, -2.0, 0.5, 3.0, -1.0])
        d = x.size
        expect = [(x[(i + 1) % d] - x[(i - 2) % d]) * x[(i - 1) % d] - x[i] + 1.5 for i in range(d)]
        np.testing.assert_allclose(m.f(x), expect, rtol=1e-15)

    def test_lorenz_decomposition(self):
        m = models.lorenz96(6, forcing=2.0)
        A, b = m.drift_linear(np.ones(6))
        assert np.array_equal(A, np.ones((6, 1)))

    def test_cubic_matrix_defaults(self):
        m = models.cubic_matrix()
        assert np.array_equal(m.theta, [0.0, -1.0, 1.0, 0.0])
        assert np.array_equal(m.init(np.random.default_rng(0), 1)[0], [1.0, 0.0])
        np.testing.assert_allclose(m.f(np.array([2.0, 3.0])), [3.0, -2.0])
        np.testing.assert_allclose(m.h(np.array([2.0, -3.0])), [8.0, -27.0])

    def test_cubic_matrix_rejects_wrong_shape(self):
        with pytest.raises(ValueError):
            models.cubic_matrix(3)

    def test_cubic_sensor_jacobian(self):
        J = models.cubic_matrix().jac_h(np.array([2.0, -1.0]))
        assert np.array_equal(J, np.diag([12.0, 3.0]))

    def test_linear_point_mass_and_gaussian_init(self):
        pm = models.linear(-np.eye(2), np.eye(2), mu0=[1.0, 2.0])
        assert np.all(pm.init(np.random.default_rng(0), 3) == [1.0, 2.0])
        g = models.linear(-np.eye(2), np.eye(2), mu0=[1.0, 2.0], P0=np.eye(2))
        draws = g.init(np.random.default_rng(0), 4000)
        np.testing.assert_allclose(draws.mean(axis=0), [1.0, 2.0], atol=0.1)
        np.testing.assert_allclose(np.cov(draws.T), np.eye(2), atol=0.1)


# ---------------------------------------------------------------------------
# algebraic properties over the whole zoo
# ---------------------------------------------------------------------------


class TestZooProperties:
    @pytest.mark.parametrize("name", sorted(ZOO))
    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1))
    def test_decomposition_identity(self, name, seed):
        m = ZOO[name]()
        rng = np.random.default_rng(seed)
        x = probe_states(name, rng, m.n)
        theta = rng.uniform(-3, 3, m.p)
        A, b = m.drift_linear(x)
        np.testing.assert_allclose(A @ theta + b, m.f(x, theta), rtol=1e-12, atol=1e-12)

    @pytest.mark.parametrize("name", sorted(ZOO))
    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1))
    def test_jacobians_match_finite_differences(self, name, seed):
        m = ZOO[name]()
        rng = np.random.default_rng(seed)
        x = probe_states(name, rng, m.n)
        for jac, fun in ((m.jac_f(x), m.f), (m.jac_h(x), m.h)):
            fd = central_difference(fun, x)
            assert np.linalg.norm(jac - fd) <= 1e-4 * max(np.linalg.norm(jac), 1e-8)

    @pytest.mark.parametrize("name", sorted(ZOO))
    def test_vectorised_over_leading_axes(self, name):
        m = ZOO[name]()
        rng = np.random.default_rng(3)
        X = np.stack([probe_states(name, rng, m.n) for _ in range(6)]).reshape(2, 3, m.n)
        assert m.f(X).shape == (2, 3, m.n)
        assert m.h(X).shape == (2, 3, m.m)
        assert m.jac_f(X).shape == (2, 3, m.n, m.n)
        assert m.jac_h(X).shape == (2, 3, m.m, m.n)
        np.testing.assert_allclose(m.f(X)[1, 2], m.f(X[1, 2]))

    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1), shift=st.integers(1, 9))
    def test_lorenz_rotation_equivariance(self, seed, shift):
        m = models.lorenz96(10)
        x = np.random.default_rng(seed).normal(size=10)
        np.testing.assert_allclose(m.f(np.roll(x, shift)), np.roll(m.f(x), shift), rtol=1e-14)


# ---------------------------------------------------------------------------
# simulator
# ---------------------------------------------------------------------------


def _scalar(drift, sigma, eta, x0=0.0):
    return DiffusionModel(
        n=1, m=1, theta=[0.0], drift=drift, obs_drift=lambda x: np.asarray(x),
        sigma=sigma, eta=eta, init=models.point_mass([x0]),
    )


class TestSimulator:
    def test_shapes_and_reproducibility(self):
        m = models.cubic_matrix()
        a = models.euler_maruyama_simulate(m, 1.0, 0.02, seed=5)
        b = models.euler_maruyama_simulate(m, 1.0, 0.02, seed=5)
        assert a.states.shape == (51, 2) and a.increments.shape == (50, 2)
        assert np.array_equal(a.states, b.states) and np.array_equal(a.increments, b.increments)
        assert a.times[-1] == pytest.approx(1.0)
        obs = a.observations
        assert obs.dt == 0.02 and np.array_equal(obs.increments, a.increments)

    def test_noise_free_path_is_deterministic_euler(self):
        m = models.lorenz96(5, forcing=3.0, sigma=0.0, eta=0.0, x0=np.arange(5.0))
        p = models.euler_maruyama_simulate(m, 0.5, 0.01, seed=1)
        x = np.arange(5.0)
        for k in range(50):
            assert np.array_equal(p.increments[k], m.h(x) * 0.01)
            x = x + m.f(x) * 0.01
            assert np.array_equal(p.states[k + 1], x)

    def test_zero_drift_linear_model_stays_put(self):
        m = models.linear(np.zeros((2, 2)), np.eye(2), sigma=0.0, eta=0.0, mu0=[1.5, -2.0])
        p = models.euler_maruyama_simulate(m, 1.0, 0.1, seed=0)
        assert np.all(p.states == [1.5, -2.0])

    def test_brownian_increments_are_gaussian(self):
        dt = 0.01
        p = models.euler_maruyama_simulate(_scalar(lambda x, th: 0 * x, 1.0, 1.0), 100.0, dt, seed=7)
        dx = np.diff(p.states[:, 0])
        assert dx.size == 10_000
        assert stats.kstest(dx / np.sqrt(dt), "norm").pvalue > 0.01

    def test_linear_mean_matches_exponential(self):
        F, x0, T, dt, paths = -1.0, 2.0, 0.5, 0.01, 10_000
        m = _scalar(lambda x, th: F * x, 0.5, 0.1, x0=x0)
        end = np.array([models.euler_maruyama_simulate(m, T, dt, seed=(9, i)).states[-1, 0] for i in range(paths)])
        se = end.std(ddof=1) / np.sqrt(paths)
        assert abs(end.mean() - np.exp(F * T) * x0) <= 3 * se

    def test_substeps_keep_observation_grid(self):
        m = models.lorenz96(10)
        p = models.euler_maruyama_simulate(m, 1.0, 0.05, seed=3, substeps=10)
        assert p.states.shape == (21, 10) and np.all(np.isfinite(p.states))

    def test_substeps_one_is_plain_scheme(self):
        m = models.cubic_matrix()
        a = models.euler_maruyama_simulate(m, 0.4, 0.02, seed=3)
        b = models.euler_maruyama_simulate(m, 0.4, 0.02, seed=3, substeps=1)
        assert np.array_equal(a.states, b.states)

    def test_blowup_reported(self):
        m = models.lorenz96(10, x0=np.linspace(-5, 5, 10))
        with np.errstate(all="ignore"), pytest.raises(ModelBlowupError):
            models.euler_maruyama_simulate(m, 50.0, 0.5, seed=0)

    @pytest.mark.parametrize("kw", [dict(dt=0.0), dict(substeps=0)])
    def test_invalid_arguments(self, kw):
        args = dict(T=1.0, dt=0.1, seed=0)
        args.update(kw)
        with pytest.raises(ValueError):
            models.euler_maruyama_simulate(models.cubic_matrix(), **args)


class TestMeasurements:
    def test_gaussian_measurement_density(self):
        m = models.with_gaussian_measurements(models.cubic_matrix(), scale=0.5)
        x = np.array([[1.0, 2.0], [0.0, -1.0]])
        y = np.array([0.5, 7.0])
        r = y - x**3
        np.testing.assert_allclose(m.obs_logpdf(y, x), -0.5 * (r * r).sum(axis=1) / 0.25)
        fd = np.stack([central_difference(lambda z: m.obs_logpdf(y, z), xi) for xi in x])
        np.testing.assert_allclose(m.grad_obs_logpdf(y, x), fd, rtol=1e-6)

    def test_default_scale_is_observation_noise(self):
        m = models.with_gaussian_measurements(models.cubic_matrix(eta=0.3))
        x, y = np.array([1.0, 1.0]), np.array([2.0, 1.0])
        assert m.obs_logpdf(y, x) == pytest.approx(-0.5 / 0.09)

    def test_rejects_zero_scale(self):
        with pytest.raises(ValueError):
            models.with_gaussian_measurements(models.cubic_matrix(eta=0.0))

    def test_sample_measurements_grid(self):
        m = models.cubic_matrix()
        path = models.euler_maruyama_simulate(m, 1.0, 0.02, seed=0)
        obs = models.sample_measurements(m, path, every=5, scale=1e-12, seed=1)
        assert isinstance(obs, DiscreteObservations)
        np.testing.assert_allclose(obs.times, np.arange(0, 51, 5) * 0.02)
        np.testing.assert_allclose(obs.values, path.states[::5] ** 3, atol=1e-10)
        with pytest.raises(ValueError):
            models.sample_measurements(m, path, every=0)
