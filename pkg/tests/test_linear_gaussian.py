import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cthmm.diffusion import ObservationIncrements
from cthmm.exceptions import ModelBlowupError, SingularMatrixError
from cthmm.linear_gaussian import (
    LinearModel,
    discrete_kalman_filter,
    discrete_rts_smoother,
    kalman_backward,
    kalman_em_update,
    kalman_em_update_discrete,
    kalman_forward,
    kalman_smoother,
    rts_smoother_check,
)
from oracles import euler_linear_posterior


def random_model(n, rng, m=1):
    F = 0.5 * rng.standard_normal((n, n)) - np.eye(n)
    H = rng.standard_normal((m, n))
    A = rng.standard_normal((n, n))
    return LinearModel(F, H, 0.5, 0.5, rng.standard_normal(n), A @ A.T + np.eye(n))


def fine_increments(model, T, K, rng):
    """Euler path of the model on a fine grid; returns the observation increments."""
    dt = T / K
    x = model.mu0 + np.linalg.cholesky(model.P0) @ rng.standard_normal(model.n)
    dY = np.empty((K, model.m))
    for k in range(K):
        dY[k] = model.H @ x * dt + model.eta * np.sqrt(dt) * rng.standard_normal(model.m)
        x = x + model.F @ x * dt + model.sigma * np.sqrt(dt) * rng.standard_normal(model.n)
    return dY


def coarsen(dY, T, agg):
    """Aggregate fine increments ``agg`` at a time onto a coarser grid."""
    K = dY.shape[0] // agg
    return ObservationIncrements(T / K, dY.reshape(K, agg, -1).sum(axis=1))


def ratios(gaps):
    return [a / b for a, b in zip(gaps[:-1], gaps[1:])]


def method_gaps(paths, gap):
    """Path-averaged discrepancy between two routes on each refinement level."""
    return np.mean([[gap(obs) for obs in grids] for grids in paths], axis=0)


def self_gaps(paths, quantity):
    """Root-mean-square over paths of ``|q(h) - q(h/2)|`` on successive levels."""
    out = []
    for grids in paths:
        q = [np.asarray(quantity(obs)) for obs in grids]
        out.append([np.abs(a - b).max() ** 2 for a, b in zip(q[:-1], q[1:])])
    return np.sqrt(np.mean(out, axis=0))


@pytest.fixture(scope="module")
def nested_grids():
    rng = np.random.default_rng(11)
    model = random_model(2, rng)
    T = 2.0
    paths = []
    for _ in range(16):
        dY = fine_increments(model, T, 1600, rng)
        paths.append([coarsen(dY, T, agg) for agg in (16, 8, 4, 2)])
    return model, T, paths


# ---------------------------------------------------------------------------
# model validation
# ---------------------------------------------------------------------------


class TestModel:
    def test_shapes_are_normalised(self):
        m = LinearModel(-1.0, 1.0, 0.5, 0.5, 0.0, 1.0)
        assert m.F.shape == (1, 1) and m.H.shape == (1, 1) and m.mu0.shape == (1,)

    @pytest.mark.parametrize("P0", [[[1.0, 0.1], [0.0, 1.0]], [[1.0, 0.0], [0.0, -0.1]]])
    def test_rejects_bad_initial_covariance(self, P0):
        with pytest.raises(ValueError):
            LinearModel(np.eye(2), np.eye(2), 1.0, 1.0, np.zeros(2), P0)

    @pytest.mark.parametrize("sigma,eta", [(0.0, 1.0), (1.0, -1.0)])
    def test_rejects_nonpositive_noise(self, sigma, eta):
        with pytest.raises(ValueError):
            LinearModel(np.eye(2), np.eye(2), sigma, eta, np.zeros(2), np.eye(2))

    def test_rejects_inconsistent_dimensions(self):
        with pytest.raises(ValueError):
            LinearModel(np.eye(2), np.ones((1, 3)), 1.0, 1.0, np.zeros(2), np.eye(2))


# ---------------------------------------------------------------------------
# forward and backward passes
# ---------------------------------------------------------------------------


class TestForward:
    def test_pure_diffusion_prediction(self):
        n, sigma = 3, 0.7
        P0 = np.diag([1.0, 2.0, 0.5])
        m = LinearModel(np.zeros((n, n)), np.zeros((1, n)), sigma, 1.0, [1.0, -2.0, 0.5], P0)
        obs = ObservationIncrements(0.1, np.random.default_rng(0).standard_normal((20, 1)))
        tr = kalman_forward(m, obs)
        assert np.all(tr.mu_pi == m.mu0)
        expect = P0[None] + sigma**2 * tr.times[:, None, None] * np.eye(n)
        np.testing.assert_allclose(tr.P_pi, expect, rtol=1e-13)

    def test_riccati_fixed_point(self):
        sigma, eta = 0.3, 0.8
        m = LinearModel([[0.0]], [[1.0]], sigma, eta, [0.0], [[sigma * eta]])
        obs = ObservationIncrements(0.05, np.random.default_rng(1).standard_normal((40, 1)))
        tr = kalman_forward(m, obs)
        np.testing.assert_allclose(tr.P_pi[:, 0, 0], sigma * eta, rtol=1e-14)

    def test_times_and_shapes(self, nested_grids):
        model, T, paths = nested_grids
        grids = paths[0]
        tr = kalman_forward(model, grids[0])
        assert tr.mu_pi.shape == (grids[0].K + 1, 2) and tr.P_pi.shape == (grids[0].K + 1, 2, 2)
        assert tr.times[-1] == pytest.approx(T)

    def test_blowup_is_reported(self):
        m = LinearModel([[400.0]], [[1.0]], 1.0, 1.0, [1.0], [[1.0]])
        obs = ObservationIncrements(0.5, np.zeros((400, 1)))
        with np.errstate(all="ignore"), pytest.raises(ModelBlowupError):
            kalman_forward(m, obs)

    def test_continuous_and_discrete_filters_converge(self, nested_grids):
        model, T, paths = nested_grids

        def gap(obs):
            cont = kalman_forward(model, obs)
            mu, P, _, _ = discrete_kalman_filter(model, obs)
            return max(np.abs(cont.mu_pi - mu).max(), np.abs(cont.P_pi - P).max())

        for r in ratios(method_gaps(paths, gap)):
            assert 1.5 <= r <= 2.5

    def test_self_convergence_order(self, nested_grids):
        model, T, paths = nested_grids
        for r in ratios(self_gaps(paths, lambda obs: kalman_forward(model, obs).mu_pi[-1])):
            assert 1.5 <= r <= 2.5


class TestBackward:
    def test_zero_sensor_gives_zero_information(self):
        m = LinearModel(-np.eye(2), np.zeros((1, 2)), 0.5, 0.5, np.zeros(2), np.eye(2))
        obs = ObservationIncrements(0.1, np.random.default_rng(0).standard_normal((30, 1)))
        tr = kalman_backward(m, obs)
        assert np.all(tr.Jbeta == 0) and np.all(tr.jmu == 0)

    def test_terminal_information_is_zero(self, nested_grids):
        model, T, paths = nested_grids
        tr = kalman_backward(model, paths[0][0])
        assert np.all(tr.Jbeta[-1] == 0) and np.all(tr.jmu[-1] == 0)

    def test_information_is_symmetric_psd(self, nested_grids):
        model, T, paths = nested_grids
        J = kalman_backward(model, paths[0][0]).Jbeta
        assert np.abs(J - np.swapaxes(J, 1, 2)).max() == 0
        assert np.linalg.eigvalsh(J).min() > -1e-12

    def test_self_convergence_order(self, nested_grids):
        model, T, paths = nested_grids
        for r in ratios(self_gaps(paths, lambda obs: kalman_backward(model, obs).jmu[0])):
            assert 1.5 <= r <= 2.5


# ---------------------------------------------------------------------------
# smoother
# ---------------------------------------------------------------------------


class TestSmoother:
    def test_smoother_equals_filter_at_horizon(self, nested_grids):
        model, T, paths = nested_grids
        tr = kalman_smoother(model, paths[0][1])
        assert np.array_equal(tr.mu_rho[-1], tr.mu_pi[-1])
        assert np.array_equal(tr.P_rho[-1], tr.P_pi[-1])

    def test_zero_information_gives_filter(self):
        m = LinearModel(-np.eye(2), np.zeros((1, 2)), 0.5, 0.5, np.ones(2), np.eye(2))
        obs = ObservationIncrements(0.1, np.random.default_rng(0).standard_normal((30, 1)))
        tr = kalman_smoother(m, obs)
        np.testing.assert_allclose(tr.mu_rho, tr.mu_pi, rtol=1e-13, atol=1e-15)
        np.testing.assert_allclose(tr.P_rho, tr.P_pi, rtol=1e-13)

    def test_singular_filter_covariance_rejected(self):
        m = LinearModel(-np.eye(2), np.eye(2), 0.5, 0.5, np.zeros(2), np.zeros((2, 2)))
        obs = ObservationIncrements(0.1, np.zeros((5, 2)))
        with pytest.raises(SingularMatrixError):
            kalman_smoother(m, obs)

    @settings(max_examples=12, deadline=None)
    @given(seed=st.integers(0, 10**6), n=st.integers(1, 4))
    def test_product_form_covariance_matches_rts(self, seed, n):
        rng = np.random.default_rng(seed)
        model = random_model(n, rng, m=int(rng.integers(1, 3)))
        obs = ObservationIncrements(0.002, fine_increments(model, 1.0, 500, rng))
        tr = kalman_smoother(model, obs)
        _, P = rts_smoother_check(model, tr)
        assert np.abs(tr.P_rho - P).max() <= 1e-6 * np.abs(P).max()
        assert np.linalg.eigvalsh(tr.P_rho).min() > 0
        assert np.abs(tr.P_rho - np.swapaxes(tr.P_rho, 1, 2)).max() == 0

    def test_product_form_mean_converges_to_rts(self, nested_grids):
        # both routes advance the mean with a first-order step in the increments
        model, T, paths = nested_grids

        def gap(obs):
            tr = kalman_smoother(model, obs)
            return np.abs(tr.mu_rho - rts_smoother_check(model, tr)[0]).max()

        for r in ratios(method_gaps(paths, gap)):
            assert 1.5 <= r <= 2.5

    def test_discrete_rts_matches_dense_conditioning(self):
        rng = np.random.default_rng(4)
        model = random_model(2, rng)
        obs = ObservationIncrements(0.05, fine_increments(model, 1.5, 30, rng))
        ms, Ps = discrete_rts_smoother(model, obs)
        mo, Po = euler_linear_posterior(model.F, model.H, model.sigma, model.eta,
                                        model.mu0, model.P0, obs.increments, obs.dt)
        np.testing.assert_allclose(ms, mo, rtol=1e-9, atol=1e-11)
        np.testing.assert_allclose(Ps, Po, rtol=1e-9, atol=1e-11)

    def test_continuous_and_discrete_smoothers_converge(self, nested_grids):
        model, T, paths = nested_grids

        def gap(obs):
            return np.abs(kalman_smoother(model, obs).mu_rho - discrete_rts_smoother(model, obs)[0]).max()

        for r in ratios(method_gaps(paths, gap)):
            assert 1.5 <= r <= 2.5


# ---------------------------------------------------------------------------
# EM
# ---------------------------------------------------------------------------


class TestEm:
    def test_zero_sensor_is_a_fixed_point(self):
        F = np.array([[-1.0, 0.3], [0.2, -0.5]])
        m = LinearModel(F, np.zeros((1, 2)), 0.5, 0.5, np.ones(2), np.eye(2))
        obs = ObservationIncrements(0.05, np.random.default_rng(2).standard_normal((40, 1)))
        assert np.array_equal(kalman_em_update(m, kalman_smoother(m, obs)), F)

    def test_requires_smoother(self, nested_grids):
        model, T, paths = nested_grids
        with pytest.raises(ValueError):
            kalman_em_update(model, kalman_forward(model, paths[0][0]))

    def test_continuous_and_discrete_updates_converge(self, nested_grids):
        model, T, paths = nested_grids

        def gap(obs):
            tr = kalman_smoother(model, obs)
            return np.abs(kalman_em_update(model, tr) - kalman_em_update_discrete(model, tr)).max()

        for r in ratios(method_gaps(paths, gap)):
            assert 1.5 <= r <= 2.5

    def test_self_convergence_order(self, nested_grids):
        model, T, paths = nested_grids
        for r in ratios(self_gaps(paths, lambda obs: kalman_em_update(model, kalman_smoother(model, obs)))):
            assert 1.5 <= r <= 2.5
