"""
Model zoo for the hidden-diffusion experiments and an Euler-Maruyama simulator.

Every constructor returns a :class:`~cthmm.diffusion.DiffusionModel` with the
drift, observation map, both Jacobians and the linear-in-parameter
decomposition ``f(x; theta) = A(x) theta + b(x)``.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from ._rng import make_rng
from .diffusion import DiffusionModel, DiscreteObservations, ObservationIncrements
from .exceptions import ModelBlowupError


def point_mass(x0):
    """Initial sampler that puts every particle at ``x0``."""
    x0 = np.array(x0, dtype=float)

    def init(rng, N):
        return np.tile(x0, (N, 1))

    init.x0 = x0
    return init


def gaussian_init(mu0, P0):
    mu0 = np.array(mu0, dtype=float)
    L = np.linalg.cholesky(np.atleast_2d(P0))

    def init(rng, N):
        return mu0 + rng.standard_normal((N, mu0.size)) @ L.T

    init.x0 = mu0
    return init


def _cubic(x):
    return x**3


def _cubic_jac(x):
    x = np.asarray(x)
    return np.einsum("...i,ij->...ij", 3.0 * x**2, np.eye(x.shape[-1]))


# ---------------------------------------------------------------------------
# bearings-only tracking
# ---------------------------------------------------------------------------

_BEARINGS_A = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 0.0], [0.0, 1.0]])


def _bearings_drift(x, theta):
    x = np.asarray(x)
    out = np.zeros_like(x, dtype=float)
    out[..., 0] = x[..., 1]
    out[..., 1] = theta[0]
    out[..., 2] = x[..., 3]
    out[..., 3] = theta[1]
    return out


def _bearings_drift_jac(x, theta):
    x = np.asarray(x)
    J = np.zeros(x.shape + (4,))
    J[..., 0, 1] = 1.0
    J[..., 2, 3] = 1.0
    return J


def _bearings_linear(x):
    x = np.asarray(x)
    A = np.broadcast_to(_BEARINGS_A, x.shape[:-1] + (4, 2))
    b = np.zeros_like(x, dtype=float)
    b[..., 0] = x[..., 1]
    b[..., 2] = x[..., 3]
    return A, b


def _bearings_obs(x):
    x = np.asarray(x)
    with np.errstate(divide="ignore", invalid="ignore"):
        phi = np.arctan(x[..., 2] / x[..., 0])
    # arctan(y / 0) is +-pi/2 in the limit; 0/0 stays nan
    return phi[..., None]


def _bearings_obs_jac(x):
    x = np.asarray(x)
    r2 = x[..., 0] ** 2 + x[..., 2] ** 2
    if np.any(r2 == 0):
        raise ValueError("bearing Jacobian undefined at the observer position x = y = 0")
    J = np.zeros(x.shape[:-1] + (1, 4))
    J[..., 0, 0] = -x[..., 2] / r2
    J[..., 0, 2] = x[..., 0] / r2
    return J


def bearings(theta=(-0.5, -1.0), sigma=0.1, eta=0.02, x0=(0.0, 1.0, 1.0, 0.0)):
    """Planar target with constant acceleration seen through its bearing.

    State ``(x, xdot, y, ydot)``, parameter ``theta = (a_x, a_y)``, observation
    drift ``arctan(y / x)`` (single-argument arctangent).
    """
    return DiffusionModel(
        n=4,
        m=1,
        theta=theta,
        drift=_bearings_drift,
        obs_drift=_bearings_obs,
        sigma=sigma,
        eta=eta,
        init=point_mass(x0),
        drift_jacobian=_bearings_drift_jac,
        obs_jacobian=_bearings_obs_jac,
        drift_linear=_bearings_linear,
        name="bearings",
    )


# ---------------------------------------------------------------------------
# cubic sensor with unknown matrix
# ---------------------------------------------------------------------------


def _matrix_drift(x, theta):
    n = np.asarray(x).shape[-1]
    F = np.asarray(theta).reshape(n, n, order="F")
    return x @ F.T


def _matrix_drift_jac(x, theta):
    x = np.asarray(x)
    n = x.shape[-1]
    F = np.asarray(theta).reshape(n, n, order="F")
    return np.broadcast_to(F, x.shape + (n,))


def _matrix_linear(x):
    # vec(F x) = (x^T kron I) vec(F)
    x = np.asarray(x)
    n = x.shape[-1]
    # column j * n + i of A holds the coefficient of F[i, j] (column-major vec)
    A = np.einsum("...j,ik->...ijk", x, np.eye(n)).reshape(x.shape[:-1] + (n, n * n))
    return A, np.zeros_like(x, dtype=float)


def cubic_matrix(d=2, F=None, sigma=0.2, eta=0.2, x0=None):
    """Linear drift ``F x`` with unknown matrix, cubic sensor ``h(x) = x^3``.

    ``theta = vec(F)`` in column-major order.
    """
    F = np.array([[0.0, 1.0], [-1.0, 0.0]]) if F is None else np.asarray(F, dtype=float)
    if F.shape != (d, d):
        raise ValueError(f"F must be {d} x {d}")
    if x0 is None:
        x0 = np.zeros(d)
        x0[0] = 1.0
    return DiffusionModel(
        n=d,
        m=d,
        theta=F.ravel(order="F"),
        drift=_matrix_drift,
        obs_drift=_cubic,
        sigma=sigma,
        eta=eta,
        init=point_mass(x0),
        drift_jacobian=_matrix_drift_jac,
        obs_jacobian=_cubic_jac,
        drift_linear=_matrix_linear,
        name="cubic_matrix",
    )


# ---------------------------------------------------------------------------
# cubic sensor with scaled tridiagonal drift
# ---------------------------------------------------------------------------


def tridiagonal_pattern(d):
    """The ``[1, -2, 1]`` second-difference matrix with ``-1`` corners."""
    if d < 2:
        raise ValueError("d must be at least 2")
    L = np.diag(np.full(d - 1, 1.0), 1) + np.diag(np.full(d - 1, 1.0), -1)
    L -= np.diag(L.sum(axis=1))
    return L


def cubic_tridiagonal(d=5, lam=5.0, sigma=0.5, eta=0.01, x0=None):
    """Drift ``lam * L x`` with ``L`` from :func:`tridiagonal_pattern`, cubic sensor."""
    L = tridiagonal_pattern(d)
    x0 = np.linspace(-1.0, 1.0, d) if x0 is None else x0

    def drift(x, theta):
        return theta[0] * (np.asarray(x) @ L.T)

    def drift_jac(x, theta):
        x = np.asarray(x)
        return np.broadcast_to(theta[0] * L, x.shape + (d,))

    def linear(x):
        x = np.asarray(x)
        return (x @ L.T)[..., None], np.zeros_like(x, dtype=float)

    return DiffusionModel(
        n=d,
        m=d,
        theta=[lam],
        drift=drift,
        obs_drift=_cubic,
        sigma=sigma,
        eta=eta,
        init=point_mass(x0),
        drift_jacobian=drift_jac,
        obs_jacobian=_cubic_jac,
        drift_linear=linear,
        name="cubic_tridiagonal",
    )


# ---------------------------------------------------------------------------
# Lorenz 96
# ---------------------------------------------------------------------------


def _l96_advection(x):
    # (x_{i+1} - x_{i-2}) x_{i-1} - x_i, cyclic
    return (np.roll(x, -1, axis=-1) - np.roll(x, 2, axis=-1)) * np.roll(x, 1, axis=-1) - x


def _l96_drift(x, theta):
    return _l96_advection(np.asarray(x)) + theta[0]


def _l96_jac(x, theta):
    x = np.asarray(x)
    d = x.shape[-1]
    J = np.zeros(x.shape + (d,))
    i = np.arange(d)
    xm1 = np.roll(x, 1, axis=-1)
    xp1 = np.roll(x, -1, axis=-1)
    xm2 = np.roll(x, 2, axis=-1)
    J[..., i, (i + 1) % d] += xm1
    J[..., i, (i - 2) % d] -= xm1
    J[..., i, (i - 1) % d] += xp1 - xm2
    J[..., i, i] -= 1.0
    return J


def _l96_linear(x):
    x = np.asarray(x)
    return np.ones(x.shape + (1,)), _l96_advection(x)


def lorenz96(d=10, forcing=8.0, sigma=1.0, eta=5.0, x0=None):
    """Lorenz 96 drift with unknown forcing, cubic sensor.  Requires ``d >= 4``."""
    if d < 4:
        raise ValueError("lorenz96 needs d >= 4")
    x0 = np.full(d, float(forcing)) if x0 is None else x0
    return DiffusionModel(
        n=d,
        m=d,
        theta=[forcing],
        drift=_l96_drift,
        obs_drift=_cubic,
        sigma=sigma,
        eta=eta,
        init=point_mass(x0),
        drift_jacobian=_l96_jac,
        obs_jacobian=_cubic_jac,
        drift_linear=_l96_linear,
        name="lorenz96",
    )


# ---------------------------------------------------------------------------
# linear Gaussian
# ---------------------------------------------------------------------------


def linear(F, H, sigma=1.0, eta=1.0, mu0=None, P0=None):
    """Linear drift ``F x`` (``theta = vec(F)``) and linear sensor ``H x``.

    ``P0 = None`` (or all zeros) gives a point-mass start at ``mu0``.
    """
    F = np.atleast_2d(np.asarray(F, dtype=float))
    H = np.atleast_2d(np.asarray(H, dtype=float))
    n = F.shape[0]
    mu0 = np.zeros(n) if mu0 is None else np.asarray(mu0, dtype=float)
    if P0 is None or not np.any(P0):
        init = point_mass(mu0)
    else:
        init = gaussian_init(mu0, P0)
    return DiffusionModel(
        n=n,
        m=H.shape[0],
        theta=F.ravel(order="F"),
        drift=_matrix_drift,
        obs_drift=lambda x: np.asarray(x) @ H.T,
        sigma=sigma,
        eta=eta,
        init=init,
        drift_jacobian=_matrix_drift_jac,
        obs_jacobian=lambda x: np.broadcast_to(H, np.asarray(x).shape[:-1] + H.shape),
        drift_linear=_matrix_linear,
        name="linear",
    )


# ---------------------------------------------------------------------------
# simulation
# ---------------------------------------------------------------------------


@dataclass
class SimulatedPath:
    dt: float
    states: np.ndarray  # (K+1, n)
    increments: np.ndarray  # (K, m)
    seed: object = None

    @property
    def times(self):
        return np.arange(self.states.shape[0]) * self.dt

    @property
    def observations(self):
        return ObservationIncrements(self.dt, self.increments)


def euler_maruyama_simulate(model, T, dt, seed=None, x0=None, substeps=1):
    """Joint Euler-Maruyama path of the hidden state and observation increments.

    ``X_{k+1} = X_k + f(X_k) dt + sigma sqrt(dt) z_k`` and
    ``dY_k = h(X_k) dt + eta sqrt(dt) z'_k``.  With ``substeps > 1`` the same
    scheme runs on the finer step ``dt / substeps`` and states and increments
    are reported on the ``dt`` grid (increments summed), which keeps stiff
    drifts stable without changing the observation grid.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    if substeps < 1:
        raise ValueError("substeps must be at least 1")
    rng = make_rng(seed)
    K = int(round(T / dt))
    x = np.asarray(model.init(rng, 1)[0] if x0 is None else x0, dtype=float)
    states = np.empty((K + 1, model.n))
    incs = np.zeros((K, model.m))
    states[0] = x
    h = dt / substeps
    sq = np.sqrt(h)
    for k in range(K):
        for _ in range(substeps):
            f = model.f(x)
            if not np.all(np.isfinite(f)):
                raise ModelBlowupError(f"non-finite drift at t={k * dt:.6g}", time=k * dt)
            z = rng.standard_normal(model.n)
            zo = rng.standard_normal(model.m)
            incs[k] += model.h(x) * h + model.eta * sq * zo
            x = x + f * h + model.sigma * sq * z
        states[k + 1] = x
    if not np.all(np.isfinite(states)):
        raise ModelBlowupError("non-finite state in simulated path", time=None)
    return SimulatedPath(dt=dt, states=states, increments=incs, seed=seed)


def with_gaussian_measurements(model, scale=None):
    """Attach the measurement density ``y ~ N(h(x), scale^2 I)`` (default ``scale = eta``).

    Needed by the discrete-observation filter.
    """
    s = float(model.eta if scale is None else scale)
    if not s > 0:
        raise ValueError("measurement scale must be positive")
    h, jac = model.h, model.jac_h

    def logpdf(y, x):
        r = np.asarray(y) - h(x)
        return -0.5 * np.sum(r * r, axis=-1) / s**2

    def grad(y, x):
        r = np.asarray(y) - h(x)
        return np.einsum("...mn,...m->...n", jac(x), r) / s**2

    return dataclasses.replace(model, obs_logpdf=logpdf, obs_logpdf_grad=grad)


def sample_measurements(model, path, every=1, scale=None, seed=None):
    """Noisy point measurements ``h(X_t) + scale * z`` at every ``every``-th grid point."""
    if every < 1:
        raise ValueError("every must be at least 1")
    s = float(model.eta if scale is None else scale)
    rng = make_rng(seed)
    idx = np.arange(0, path.states.shape[0], every)
    vals = model.h(path.states[idx]) + s * rng.standard_normal((idx.size, model.m))
    K = path.states.shape[0] - 1
    return DiscreteObservations(dt=path.dt, T=K * path.dt, times=idx * path.dt, values=vals)
