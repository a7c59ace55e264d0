"""
Closed-form filtering, smoothing and EM for linear Gaussian dynamics.

For ``dX = F X dt + sigma dW`` and ``dY = H X dt + eta dB`` the forward
density is Gaussian with moments ``(mu_pi, P_pi)`` and the backward function
is an unnormalised Gaussian, kept in information form ``(J, j) = (P_beta^{-1},
P_beta^{-1} mu_beta)`` because it starts from ``J(T) = 0``.  The smoother is
their product.  A discrete-time Kalman filter / RTS smoother for the Euler
discretisation of the same model is included as a reference.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .exceptions import ModelBlowupError, SingularMatrixError


@dataclass(frozen=True)
class LinearModel:
    F: np.ndarray
    H: np.ndarray
    sigma: float
    eta: float
    mu0: np.ndarray
    P0: np.ndarray

    def __post_init__(self):
        F = np.atleast_2d(np.asarray(self.F, dtype=float))
        H = np.atleast_2d(np.asarray(self.H, dtype=float))
        n = F.shape[0]
        mu0 = np.asarray(self.mu0, dtype=float).reshape(n)
        P0 = np.atleast_2d(np.asarray(self.P0, dtype=float))
        if F.shape != (n, n) or H.shape[1] != n or P0.shape != (n, n):
            raise ValueError("inconsistent dimensions")
        if np.abs(P0 - P0.T).max() > 1e-12:
            raise ValueError("P0 must be symmetric")
        if np.linalg.eigvalsh(P0).min() < -1e-10:
            raise ValueError("P0 must be positive semidefinite")
        if not (self.sigma > 0 and self.eta > 0):
            raise ValueError("sigma and eta must be positive")
        for k, v in (("F", F), ("H", H), ("mu0", mu0), ("P0", P0)):
            object.__setattr__(self, k, v)

    @property
    def n(self):
        return self.F.shape[0]

    @property
    def m(self):
        return self.H.shape[0]

    def with_F(self, F):
        return LinearModel(F, self.H, self.sigma, self.eta, self.mu0, self.P0)


@dataclass
class GaussianTrajectory:
    times: np.ndarray
    mu_pi: Optional[np.ndarray] = None
    P_pi: Optional[np.ndarray] = None
    Jbeta: Optional[np.ndarray] = None
    jmu: Optional[np.ndarray] = None
    mu_rho: Optional[np.ndarray] = None
    P_rho: Optional[np.ndarray] = None


def _sym(P):
    return 0.5 * (P + np.swapaxes(P, -1, -2))


def _increments(obs):
    dt = float(obs.dt)
    dY = np.asarray(obs.increments, dtype=float)
    if dY.ndim == 1:
        dY = dY[:, None]
    return dt, dY


def _rk4(fun, y, h):
    k1 = fun(y)
    k2 = fun(y + 0.5 * h * k1)
    k3 = fun(y + 0.5 * h * k2)
    k4 = fun(y + h * k3)
    return y + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)


def kalman_forward(model, obs):
    """Continuous-time Kalman-Bucy filter on the observation grid.

    The mean is advanced with an Euler step in the increments, the covariance
    with RK4 on the Riccati equation.
    """
    dt, dY = _increments(obs)
    K = dY.shape[0]
    F, H, s2, e2 = model.F, model.H, model.sigma**2, model.eta**2
    n = model.n
    mu = np.empty((K + 1, n))
    P = np.empty((K + 1, n, n))
    mu[0], P[0] = model.mu0, model.P0
    HtH = H.T @ H / e2
    Q = s2 * np.eye(n)
    riccati = lambda X: F @ X + X @ F.T - X @ HtH @ X + Q
    for k in range(K):
        gain = P[k] @ H.T / e2
        mu[k + 1] = mu[k] + F @ mu[k] * dt + gain @ (dY[k] - H @ mu[k] * dt)
        P[k + 1] = _sym(_rk4(riccati, P[k], dt))
        if not (np.all(np.isfinite(mu[k + 1])) and np.all(np.isfinite(P[k + 1]))):
            raise ModelBlowupError(f"non-finite filter state at t={(k + 1) * dt:.6g}", time=(k + 1) * dt)
    return GaussianTrajectory(times=np.arange(K + 1) * dt, mu_pi=mu, P_pi=P)


def kalman_backward(model, obs, trajectory=None):
    """Backward information filter from ``J(T) = 0, j(T) = 0``.

    In forward time,
    ``dJ/dt = -F^T J - J F + sigma^2 J J - H^T H / eta^2`` and
    ``dj = (-F^T + sigma^2 J) j dt - H^T dY / eta^2``.
    ``J`` is integrated with RK4, ``j`` with an Euler step in the increments.
    """
    dt, dY = _increments(obs)
    K = dY.shape[0]
    F, H, s2, e2 = model.F, model.H, model.sigma**2, model.eta**2
    n = model.n
    J = np.zeros((K + 1, n, n))
    j = np.zeros((K + 1, n))
    HtH = H.T @ H / e2
    # reversed time s = T - t: dJ/ds = F^T J + J F - sigma^2 J^2 + H^T H / eta^2
    rev = lambda X: F.T @ X + X @ F - s2 * X @ X + HtH
    for k in range(K, 0, -1):
        j[k - 1] = j[k] + (F.T - s2 * J[k]) @ j[k] * dt + H.T @ dY[k - 1] / e2
        J[k - 1] = _sym(_rk4(rev, J[k], dt))
        if not (np.all(np.isfinite(J[k - 1])) and np.all(np.isfinite(j[k - 1]))):
            raise ModelBlowupError(f"non-finite backward state at t={(k - 1) * dt:.6g}", time=(k - 1) * dt)
    out = trajectory if trajectory is not None else GaussianTrajectory(times=np.arange(K + 1) * dt)
    out.Jbeta, out.jmu = J, j
    return out


def kalman_smoother_combine(trajectory):
    """Product of forward density and backward function, per grid time."""
    tr = trajectory
    if tr.P_pi is None or tr.Jbeta is None:
        raise ValueError("run kalman_forward and kalman_backward first")
    n = tr.P_pi.shape[-1]
    Pinv = np.empty_like(tr.P_pi)
    for k, P in enumerate(tr.P_pi):
        rank = np.linalg.matrix_rank(P)
        if rank < n:
            raise SingularMatrixError(f"filter covariance singular at t={tr.times[k]:.6g}", matrix=P, rank=rank)
        Pinv[k] = np.linalg.inv(P)
    info = Pinv + tr.Jbeta
    P_rho = _sym(np.linalg.inv(info))
    vec = np.einsum("kab,kb->ka", Pinv, tr.mu_pi) + tr.jmu
    mu_rho = np.einsum("kab,kb->ka", P_rho, vec)
    # at T the backward information vanishes; copy the filter bit-for-bit
    P_rho[-1], mu_rho[-1] = tr.P_pi[-1], tr.mu_pi[-1]
    tr.P_rho, tr.mu_rho = P_rho, mu_rho
    return tr


def kalman_smoother(model, obs):
    """Forward filter, backward information filter and their combination."""
    tr = kalman_forward(model, obs)
    kalman_backward(model, obs, tr)
    return kalman_smoother_combine(tr)


def rts_smoother_check(model, trajectory):
    """Integrate the backward smoother ODEs driven by the filter moments.

    ``dm/dt = (F + sigma^2 P_f^{-1}) m - sigma^2 P_f^{-1} mu_f`` and
    ``dP/dt = (F + sigma^2 P_f^{-1}) P + P (F + sigma^2 P_f^{-1})^T - sigma^2 I``
    from ``(mu_f(T), P_f(T))`` backwards, with RK4.  Mid-step filter moments
    are obtained by cubic Hermite interpolation (derivatives from the filter
    equations, with the mean's derivative taken as its drift part).
    """
    tr = trajectory
    times, mu_f, P_f = tr.times, tr.mu_pi, tr.P_pi
    K = times.size - 1
    n = model.n
    F, H, s2, e2 = model.F, model.H, model.sigma**2, model.eta**2
    HtH = H.T @ H / e2
    I = np.eye(n)
    dP = np.array([F @ P + P @ F.T - P @ HtH @ P + s2 * I for P in P_f])

    def P_at(k, theta, h):
        # Hermite interpolation between k and k+1 at fraction theta
        t2, t3 = theta * theta, theta**3
        h00, h10 = 2 * t3 - 3 * t2 + 1, t3 - 2 * t2 + theta
        h01, h11 = -2 * t3 + 3 * t2, t3 - t2
        return h00 * P_f[k] + h10 * h * dP[k] + h01 * P_f[k + 1] + h11 * h * dP[k + 1]

    def mu_at(k, theta):
        return (1 - theta) * mu_f[k] + theta * mu_f[k + 1]

    def rhs(m, P, Pf, muf):
        Pi = np.linalg.inv(Pf)
        A = F + s2 * Pi
        return A @ m - s2 * Pi @ muf, A @ P + P @ A.T - s2 * I

    m_out = np.empty((K + 1, n))
    P_out = np.empty((K + 1, n, n))
    m_out[K], P_out[K] = mu_f[K], P_f[K]
    for k in range(K, 0, -1):
        h = times[k] - times[k - 1]
        m, P = m_out[k], P_out[k]
        P_mid = P_at(k - 1, 0.5, h)
        mu_mid = mu_at(k - 1, 0.5)
        # integrate backwards: step of -h
        a1, b1 = rhs(m, P, P_f[k], mu_f[k])
        a2, b2 = rhs(m - 0.5 * h * a1, P - 0.5 * h * b1, P_mid, mu_mid)
        a3, b3 = rhs(m - 0.5 * h * a2, P - 0.5 * h * b2, P_mid, mu_mid)
        a4, b4 = rhs(m - h * a3, P - h * b3, P_f[k - 1], mu_f[k - 1])
        m_out[k - 1] = m - h / 6.0 * (a1 + 2 * a2 + 2 * a3 + a4)
        P_out[k - 1] = _sym(P - h / 6.0 * (b1 + 2 * b2 + 2 * b3 + b4))
    return m_out, P_out


def _trapezoid(values, dt):
    return dt * (values.sum(axis=0) - 0.5 * (values[0] + values[-1]))


def kalman_em_update(model, trajectory):
    """Closed-form M-step for ``F``.

    ``F' = F - sigma^2 [int (J mu_rho - j) mu_rho^T + J P_rho dt] [int mu_rho mu_rho^T + P_rho dt]^{-1}``
    with trapezoid quadrature.
    """
    tr = trajectory
    if tr.mu_rho is None:
        raise ValueError("trajectory has no smoother moments")
    dt = tr.times[1] - tr.times[0]
    mu, P, J, j = tr.mu_rho, tr.P_rho, tr.Jbeta, tr.jmu
    second = np.einsum("ka,kb->kab", mu, mu) + P
    cross = np.einsum("kab,kb->ka", J, mu) - j
    cross = np.einsum("ka,kb->kab", cross, mu) + J @ P
    M = _trapezoid(second, dt)
    C = _trapezoid(cross, dt)
    rank = np.linalg.matrix_rank(M)
    if rank < model.n:
        raise SingularMatrixError("second-moment integral is singular", matrix=M, rank=rank)
    return model.F - model.sigma**2 * np.linalg.solve(M.T, C.T).T


def kalman_em_update_discrete(model, trajectory):
    """Shumway-type discrete EM on the same grid, used as a cross-check.

    ``F' = [sum (mu_{k+1} - mu_k) mu_k^T + S_k dt] [sum (mu_k mu_k^T + P_k) dt]^{-1}``
    with the lag-one covariance rate ``S = (F - sigma^2 J) P_rho``.
    """
    tr = trajectory
    dt = tr.times[1] - tr.times[0]
    mu, P, J = tr.mu_rho, tr.P_rho, tr.Jbeta
    s2 = model.sigma**2
    S = np.einsum("ab,kbc->kac", model.F, P[:-1]) - s2 * J[:-1] @ P[:-1]
    num = np.einsum("ka,kb->ab", mu[1:] - mu[:-1], mu[:-1]) + S.sum(axis=0) * dt
    den = (np.einsum("ka,kb->ab", mu[:-1], mu[:-1]) + P[:-1].sum(axis=0)) * dt
    return np.linalg.solve(den.T, num.T).T


# ---------------------------------------------------------------------------
# discrete-time reference for the Euler model
# ---------------------------------------------------------------------------


def discrete_kalman_filter(model, obs):
    """Kalman filter for ``X' = (I + F dt) X + noise``, ``dY = H X dt + noise``.

    Returns the moments of ``X_k`` given ``dY_0..dY_{k-1}`` (the increment at
    ``k`` itself excluded), i.e. the same conditioning as the continuous
    filter and as the particle cloud before resampling.
    """
    dt, dY = _increments(obs)
    K = dY.shape[0]
    n = model.n
    A = np.eye(n) + model.F * dt
    H = model.H
    R = model.eta**2 * dt * np.eye(model.m)
    Qd = model.sigma**2 * dt * np.eye(n)
    mu = np.empty((K + 1, n))
    P = np.empty((K + 1, n, n))
    mu_u = np.empty((K, n))
    P_u = np.empty((K, n, n))
    mu[0], P[0] = model.mu0, model.P0
    for k in range(K):
        Hd = H * dt
        S = Hd @ P[k] @ Hd.T + R
        G = np.linalg.solve(S, Hd @ P[k]).T
        mu_u[k] = mu[k] + G @ (dY[k] - Hd @ mu[k])
        P_u[k] = _sym(P[k] - G @ Hd @ P[k])
        mu[k + 1] = A @ mu_u[k]
        P[k + 1] = _sym(A @ P_u[k] @ A.T + Qd)
    return mu, P, mu_u, P_u


def discrete_rts_smoother(model, obs):
    """RTS smoother for the Euler model; returns smoothed means and covariances."""
    dt, _ = _increments(obs)
    mu, P, mu_u, P_u = discrete_kalman_filter(model, obs)
    K = mu.shape[0] - 1
    A = np.eye(model.n) + model.F * dt
    ms = mu.copy()
    Ps = P.copy()
    for k in range(K - 1, -1, -1):
        C = np.linalg.solve(P[k + 1], A @ P_u[k]).T
        ms[k] = mu_u[k] + C @ (ms[k + 1] - mu[k + 1])
        Ps[k] = _sym(P_u[k] + C @ (Ps[k + 1] - P[k + 1]) @ C.T)
    return ms, Ps


def to_linear_model(diffusion_model, mu0=None, P0=None):
    """Build a :class:`LinearModel` from a linear :class:`~cthmm.diffusion.DiffusionModel`."""
    dm = diffusion_model
    n = dm.n
    F = dm.theta.reshape(n, n, order="F")
    H = dm.jac_h(np.zeros(n))
    mu0 = getattr(dm.init, "x0", np.zeros(n)) if mu0 is None else mu0
    P0 = np.zeros((n, n)) if P0 is None else P0
    return LinearModel(F, H, dm.sigma, dm.eta, mu0, P0)
