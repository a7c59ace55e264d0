"""
Monte Carlo estimation for continuous-time HMMs with a hidden diffusion.

The hidden state follows ``dX = f(X; theta) dt + sigma dW`` and is observed
either through increments ``dY = h(X) dt + eta dB`` or through isolated
measurements with density ``r(y | x)``.  Everything is discretised on a
uniform grid with Euler-Maruyama steps:

* :func:`particle_filter` runs a bootstrap filter and keeps the particles
  *before* resampling at every grid time;
* :func:`particle_smoother` reweights those particles with the O(N^2)
  backward recursion, and at the same time evaluates the gradient of the
  backward density estimate at every particle;
* :func:`em_update_linear`, :func:`em_update_matrix` and
  :func:`em_update_gradient` are the M-steps; :func:`fit_parameters` loops.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.optimize import minimize
from scipy.special import logsumexp

from ._rng import labeled, make_rng
from .exceptions import ImpossibleEvidenceError, ModelBlowupError, SingularMatrixError

# element budget for the (B, N, N) kernel blocks in the smoother
_SMOOTHER_BLOCK = 8_000_000


# ---------------------------------------------------------------------------
# model and data types
# ---------------------------------------------------------------------------


def fd_jacobian(fun, x, eps=1e-5):
    """Central finite-difference Jacobian of a vectorised map.

    ``fun`` maps ``(..., n)`` to ``(..., k)``; the result has shape
    ``(..., k, n)``.  The step for coordinate ``i`` is ``eps * (1 + |x_i|)``.
    """
    x = np.asarray(x, dtype=float)
    n = x.shape[-1]
    cols = []
    for i in range(n):
        h = eps * (1.0 + np.abs(x[..., i]))
        xp = x.copy()
        xm = x.copy()
        xp[..., i] += h
        xm[..., i] -= h
        cols.append((fun(xp) - fun(xm)) / (2.0 * h[..., None]))
    return np.stack(cols, axis=-1)


@dataclass(frozen=True)
class DiffusionModel:
    """Drift, observation map, noise levels and initial law of a hidden diffusion.

    All callables are vectorised over leading axes: ``drift(x, theta)`` maps
    ``(..., n)`` to ``(..., n)``, ``obs_drift(x)`` maps ``(..., n)`` to
    ``(..., m)``.  ``init(rng, N)`` returns ``(N, n)`` initial particles.

    Optional pieces
    ---------------
    drift_jacobian(x, theta) -> (..., n, n)
    obs_jacobian(x) -> (..., m, n)
    drift_linear(x) -> (A (..., n, p), b (..., n)) with ``f = A theta + b``
    obs_logpdf(y, x) -> (...,) measurement log-density for discrete observations
    obs_logpdf_grad(y, x) -> (..., n)

    Missing Jacobians fall back to central finite differences.
    """

    n: int
    m: int
    theta: np.ndarray
    drift: Callable
    obs_drift: Callable
    sigma: float
    eta: float
    init: Callable
    drift_jacobian: Optional[Callable] = None
    obs_jacobian: Optional[Callable] = None
    drift_linear: Optional[Callable] = None
    obs_logpdf: Optional[Callable] = None
    obs_logpdf_grad: Optional[Callable] = None
    name: str = "diffusion"

    def __post_init__(self):
        object.__setattr__(self, "theta", np.array(self.theta, dtype=float, ndmin=1))
        if not self.sigma >= 0:
            raise ValueError("sigma must be non-negative")
        if not self.eta >= 0:
            raise ValueError("eta must be non-negative")

    @property
    def p(self):
        return self.theta.size

    def with_theta(self, theta):
        return dataclasses.replace(self, theta=np.array(theta, dtype=float, ndmin=1))

    def f(self, x, theta=None):
        return self.drift(x, self.theta if theta is None else theta)

    def h(self, x):
        return self.obs_drift(x)

    def jac_f(self, x, theta=None):
        th = self.theta if theta is None else theta
        if self.drift_jacobian is not None:
            return self.drift_jacobian(x, th)
        return fd_jacobian(lambda z: self.drift(z, th), x)

    def jac_h(self, x):
        if self.obs_jacobian is not None:
            return self.obs_jacobian(x)
        return fd_jacobian(self.obs_drift, x)

    def grad_obs_logpdf(self, y, x):
        if self.obs_logpdf is None:
            raise ValueError("model has no measurement density for discrete observations")
        if self.obs_logpdf_grad is not None:
            return self.obs_logpdf_grad(y, x)
        return fd_jacobian(lambda z: self.obs_logpdf(y, z)[..., None], x)[..., 0, :]


@dataclass(frozen=True)
class ObservationIncrements:
    """Increments ``dY_k = Y_{(k+1) dt} - Y_{k dt}`` for ``k = 0..K-1``."""

    dt: float
    increments: np.ndarray

    def __post_init__(self):
        inc = np.array(self.increments, dtype=float)
        if inc.ndim == 1:
            inc = inc[:, None]
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        object.__setattr__(self, "increments", inc)

    @property
    def K(self):
        return self.increments.shape[0]

    @property
    def T(self):
        return self.K * self.dt

    @property
    def times(self):
        return np.arange(self.K + 1) * self.dt


@dataclass(frozen=True)
class DiscreteObservations:
    """Isolated measurements ``(times[s], values[s])`` on the grid ``0, dt, ..., T``.

    Times are snapped to the nearest grid point.
    """

    dt: float
    T: float
    times: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        times = np.array(self.times, dtype=float, ndmin=1)
        values = np.array(self.values, dtype=float)
        if values.ndim == 1:
            values = values[:, None] if times.size else values.reshape(0, 1)
        if values.shape[0] != times.size:
            raise ValueError("one value row per observation time is required")
        if times.size and (np.any(np.diff(times) <= 0) or times[0] < 0 or times[-1] > self.T + 1e-12):
            raise ValueError("observation times must be increasing inside [0, T]")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "values", values)

    @property
    def K(self):
        return int(round(self.T / self.dt))

    @property
    def index(self):
        return np.rint(self.times / self.dt).astype(int)


@dataclass
class ParticleEnsemble:
    """Filter particles and smoother output on the grid ``t_k = k dt``.

    ``xi[k]`` are the particles at ``t_k`` before resampling, ``ancestry[k]``
    the indices drawn at step ``k``.  ``log_obs[k, i]`` is the log observation
    factor attached to ``xi[k, i]`` (zero where there is none).  After
    smoothing, ``w[k]`` are the smoother weights, ``grad[k]`` the gradients of
    the backward density estimate at the particles (``k < K``) and
    ``log_norm[k, j]`` the log column normalisers of step ``k``.
    """

    dt: float
    theta: np.ndarray
    xi: np.ndarray
    ancestry: np.ndarray
    log_obs: np.ndarray
    w: Optional[np.ndarray] = None
    grad: Optional[np.ndarray] = None
    log_norm: Optional[np.ndarray] = None
    discrete: bool = False

    @property
    def N(self):
        return self.xi.shape[1]

    @property
    def K(self):
        return self.xi.shape[0] - 1

    @property
    def times(self):
        return np.arange(self.K + 1) * self.dt


# ---------------------------------------------------------------------------
# likelihood pieces
# ---------------------------------------------------------------------------


def _obs_loglik_increment(model, x, dy, dt):
    r = dy - model.h(x) * dt
    return -np.sum(r * r, axis=-1) / (2.0 * model.eta**2 * dt)


def _check_finite(arr, what, t):
    if not np.all(np.isfinite(arr)):
        raise ModelBlowupError(f"non-finite {what} at t={t:.6g}", time=t)


def _resample(rng, logw, systematic):
    p = np.exp(logw - logw.max())
    p /= p.sum()
    N = p.size
    if systematic:
        u = (rng.random() + np.arange(N)) / N
        return np.minimum(np.searchsorted(np.cumsum(p), u, side="right"), N - 1)
    return rng.choice(N, size=N, p=p)


def _propagate(model, x, theta, dt, rng):
    with np.errstate(over="ignore", invalid="ignore"):
        f = model.f(x, theta)
        return x + f * dt + model.sigma * np.sqrt(dt) * rng.standard_normal(x.shape)


def _cull(x, lo, alive, t):
    """Zero the weight of particles whose state or density overflowed.

    Dead particles are parked at the origin so later arithmetic stays finite;
    they never get resampled.  Raises when no particle survives.
    """
    alive = alive & np.all(np.isfinite(x), axis=-1) & np.isfinite(lo)
    if not np.any(alive):
        raise ModelBlowupError(f"every particle diverged or has zero weight at t={t:.6g}", time=t)
    x = np.where(alive[:, None], x, 0.0)
    lo = np.where(alive, lo, -np.inf)
    return x, lo, alive


# ---------------------------------------------------------------------------
# filter
# ---------------------------------------------------------------------------


def particle_filter(model, obs, N, seed=None, systematic=False):
    """Bootstrap particle filter for increment observations.

    Returns a :class:`ParticleEnsemble` without smoother weights.
    """
    if N < 1:
        raise ValueError("N must be at least 1")
    rng = make_rng(seed)
    dt, K = obs.dt, obs.K
    x = np.asarray(model.init(rng, N), dtype=float).reshape(N, model.n)
    xi = np.empty((K + 1, N, model.n))
    ancestry = np.empty((K, N), dtype=np.int64)
    log_obs = np.zeros((K + 1, N))
    theta = model.theta
    alive = np.ones(N, dtype=bool)
    for k in range(K + 1):
        t = k * dt
        with np.errstate(over="ignore", invalid="ignore"):
            lo = _obs_loglik_increment(model, x, obs.increments[k], dt) if k < K else np.zeros(N)
        x, lo, alive = _cull(x, lo, np.ones(N, dtype=bool), t)
        xi[k] = x
        log_obs[k] = lo
        if k < K:
            a = _resample(rng, lo, systematic)
            ancestry[k] = a
            x = _propagate(model, x[a], theta, dt, rng)
    return ParticleEnsemble(dt=dt, theta=theta.copy(), xi=xi, ancestry=ancestry, log_obs=log_obs)


def particle_filter_discrete_obs(model, obs, N, seed=None, systematic=False):
    """Particle filter for isolated measurements with density ``r(y | x)``.

    Particles move by Euler-Maruyama and are reweighted/resampled only at the
    grid points carrying a measurement.
    """
    if N < 1:
        raise ValueError("N must be at least 1")
    if model.obs_logpdf is None:
        raise ValueError("model has no measurement density attached")
    rng = make_rng(seed)
    dt, K = obs.dt, obs.K
    x = np.asarray(model.init(rng, N), dtype=float).reshape(N, model.n)
    xi = np.empty((K + 1, N, model.n))
    ancestry = np.tile(np.arange(N), (K, 1))
    log_obs = np.zeros((K + 1, N))
    at = dict(zip(obs.index.tolist(), obs.values))
    theta = model.theta
    alive = np.ones(N, dtype=bool)
    for k in range(K + 1):
        t = k * dt
        if k in at:
            with np.errstate(over="ignore", invalid="ignore"):
                lo = np.asarray(model.obs_logpdf(at[k], x), dtype=float)
            if not np.any(np.isfinite(lo[alive] if alive.any() else lo)):
                raise ImpossibleEvidenceError(
                    f"measurement at t={t:.6g} has zero density for every particle", time=t
                )
        else:
            lo = np.zeros(N)
        x, lo, alive = _cull(x, lo, alive, t)
        xi[k] = x
        log_obs[k] = lo
        if k in at and k < K:
            a = _resample(rng, lo, systematic)
            ancestry[k] = a
            x = x[a]
            alive = np.ones(N, dtype=bool)
        if k < K:
            x = _propagate(model, x, theta, dt, rng)
    return ParticleEnsemble(
        dt=dt, theta=theta.copy(), xi=xi, ancestry=ancestry, log_obs=log_obs, discrete=True
    )


# ---------------------------------------------------------------------------
# smoother and backward density estimate
# ---------------------------------------------------------------------------


def _log_kernel(model, theta, x, x_next, log_obs_x, dt):
    """``log p(x_next_j | x_i) + log_obs_i`` up to constants, shape ``(..., M, N)``.

    Also returns the Euler means ``x + f(x) dt`` of shape ``(..., M, n)``.
    """
    mean = x + model.f(x, theta) * dt
    # |x'_j - m_i|^2 expanded so the cross term is a matrix product
    lt = mean @ np.swapaxes(x_next, -1, -2)
    lt *= -2.0
    lt += np.sum(mean * mean, axis=-1)[..., :, None]
    lt += np.sum(x_next * x_next, axis=-1)[..., None, :]
    np.maximum(lt, 0.0, out=lt)
    lt *= -1.0 / (2.0 * model.sigma**2 * dt)
    lt += log_obs_x[..., :, None]
    return lt, mean


def _obs_grad(model, ens, obs, k, x):
    """Gradient of the observation log factor at step ``k`` evaluated at ``x``."""
    if ens.discrete:
        idx = np.flatnonzero(obs.index == k)
        if idx.size == 0:
            return np.zeros_like(x)
        return model.grad_obs_logpdf(obs.values[idx[0]], x)
    dt = ens.dt
    dy = obs.increments[k]
    r = dy - model.h(x) * dt
    return np.einsum("...mn,...m->...n", model.jac_h(x), r) / model.eta**2


def _obs_log(model, ens, obs, k, x):
    if ens.discrete:
        idx = np.flatnonzero(obs.index == k)
        if idx.size == 0:
            return np.zeros(x.shape[:-1])
        return np.asarray(model.obs_logpdf(obs.values[idx[0]], x), dtype=float)
    return _obs_loglik_increment(model, x, obs.increments[k], ens.dt)


def _beta_terms(model, ens, obs, k, x, log_obs_x):
    """Per-kernel-entry contributions ``c[..., i, j]`` of the estimate at step ``k``."""
    lk, mean = _log_kernel(model, ens.theta, x, ens.xi[k + 1], log_obs_x, ens.dt)
    c = np.exp(lk - ens.log_norm[k][..., None, :]) * ens.w[k + 1]
    return c, mean


def _beta_grad_from_terms(model, ens, k, c, mean, jf, gobs):
    value = c.sum(axis=-1)
    dt = ens.dt
    first = c @ ens.xi[k + 1] - value[..., None] * mean
    # (I + dt J_f)^T v = v + dt J_f^T v
    trans = first + dt * np.einsum("...ji,...j->...i", jf, first)
    grad = trans / (model.sigma**2 * dt) + value[..., None] * gobs
    return value, grad


def particle_smoother(ensemble, model, obs):
    """Backward reweighting of the filter particles.

    Fills ``w``, ``log_norm`` and ``grad`` on a copy of ``ensemble``.  The
    smoother weights are computed by the same routine that evaluates the
    backward density estimate, so ``w[k, i] == beta_hat(k, xi[k, i])``.
    """
    ens = dataclasses.replace(ensemble)
    K, N, n = ens.K, ens.N, ens.xi.shape[-1]
    dt, theta = ens.dt, ens.theta
    w = np.empty((K + 1, N))
    grad = np.zeros((K + 1, N, n))
    log_norm = np.empty((K, N))

    if np.any(ens.log_obs[K] != 0):
        w[K] = np.exp(ens.log_obs[K] - logsumexp(ens.log_obs[K]))
    else:
        w[K] = 1.0 / N
    ens.w, ens.log_norm, ens.grad = w, log_norm, grad

    B = max(1, _SMOOTHER_BLOCK // (N * N))
    k_hi = K
    while k_hi > 0:
        k_lo = max(0, k_hi - B)
        x = ens.xi[k_lo:k_hi]
        lk, mean = _log_kernel(model, theta, x, ens.xi[k_lo + 1 : k_hi + 1], ens.log_obs[k_lo:k_hi], dt)
        # column log-sum-exp, keeping the shifted exponentials for reuse
        mx = lk.max(axis=-2, keepdims=True)
        mx[~np.isfinite(mx)] = 0.0
        lk -= mx
        np.exp(lk, out=lk)
        colsum = lk.sum(axis=-2)
        with np.errstate(divide="ignore"):
            log_norm[k_lo:k_hi] = np.log(colsum) + mx[:, 0, :]
        _check_finite(log_norm[k_lo:k_hi], "smoother normaliser", k_lo * dt)
        jf = model.jac_f(x, theta)
        gobs = np.stack([_obs_grad(model, ens, obs, k, ens.xi[k]) for k in range(k_lo, k_hi)])
        for k in range(k_hi - 1, k_lo - 1, -1):
            b = k - k_lo
            c = lk[b] * (w[k + 1] / colsum[b])
            w[k], grad[k] = _beta_grad_from_terms(model, ens, k, c, mean[b], jf[b], gobs[b])
        k_hi = k_lo
    return ens


def beta_hat_gradient(ensemble, model, obs, k, x):
    """Backward density estimate and its gradient at grid index ``k``.

    ``x`` may be a single point ``(n,)`` or a batch ``(M, n)``.  At ``k = K``
    the estimate is the terminal smoother weight: ``1 / N`` (gradient zero)
    for increment observations, or the measurement density divided by its
    particle sum when a measurement sits at ``T``.
    """
    ens = ensemble
    if ens.w is None:
        raise ValueError("run particle_smoother first")
    x = np.asarray(x, dtype=float)
    K = ens.K
    if k < 0 or k > K:
        raise ValueError(f"grid index {k} outside [0, {K}]")
    if k == K:
        ref = logsumexp(ens.log_obs[K])
        if ens.discrete and np.any(obs.index == K):
            val = np.exp(_obs_log(model, ens, obs, K, x) - ref)
            return val, val[..., None] * _obs_grad(model, ens, obs, K, x)
        return np.full(x.shape[:-1], np.exp(-ref)), np.zeros_like(x)
    single = x.ndim == 1
    xb = x[None] if single else x
    lo = _obs_log(model, ens, obs, k, xb)
    c, mean = _beta_terms(model, ens, obs, k, xb, lo)
    jf = model.jac_f(xb, ens.theta)
    value, grad = _beta_grad_from_terms(model, ens, k, c, mean, jf, _obs_grad(model, ens, obs, k, xb))
    return (value[0], grad[0]) if single else (value, grad)


def state_estimates(ensemble):
    """Filter mean ``(1/N) sum xi`` and smoother mean ``sum w xi`` per grid time."""
    ens = ensemble
    filt = ens.xi.mean(axis=1)
    if np.any(ens.log_obs[-1] != 0):
        p = np.exp(ens.log_obs[-1] - logsumexp(ens.log_obs[-1]))
        filt[-1] = p @ ens.xi[-1]
    smooth = None if ens.w is None else np.einsum("ki,kin->kn", ens.w, ens.xi)
    return filt, smooth


# ---------------------------------------------------------------------------
# M-step
# ---------------------------------------------------------------------------


def _em_points(ens):
    K = ens.K
    return ens.xi[:K], ens.w[:K], ens.grad[:K]


def em_objective_mc(theta, theta_k, ensemble, model, obs=None):
    """Monte Carlo surrogate of the M-step objective (minimised in ``theta``).

    Sums ``w |f(xi; theta)|^2 - 2 f(xi; theta)^T (w f(xi; theta_k) + sigma^2 grad)``
    over grid times ``0..K-1`` and particles.  The ``w * (sigma^2 / w)``
    product of the textbook form is taken as ``sigma^2`` so zero weights are
    harmless.
    """
    xi, w, g = _em_points(ensemble)
    f = model.f(xi, np.asarray(theta, dtype=float))
    fk = model.f(xi, np.asarray(theta_k, dtype=float))
    target = w[..., None] * fk + model.sigma**2 * g
    return float(np.sum(w * np.sum(f * f, axis=-1)) - 2.0 * np.sum(f * target))


def _solve_spd(G, rhs, what):
    rank = np.linalg.matrix_rank(G)
    if rank < G.shape[0]:
        raise SingularMatrixError(f"{what} is singular (rank {rank} < {G.shape[0]})", matrix=G, rank=rank)
    return np.linalg.solve(G, rhs)


def em_update_linear(ensemble, model, obs=None):
    """Closed-form M-step when ``f(x; theta) = A(x) theta + b(x)``.

    ``theta' = theta_k + sigma^2 [sum w A^T A]^{-1} [sum A^T grad]``; the
    gradient sum is not weighted.
    """
    if model.drift_linear is None:
        raise ValueError("model has no linear decomposition of the drift")
    xi, w, g = _em_points(ensemble)
    A, _ = model.drift_linear(xi)
    G = np.einsum("kI,kInp,kInq->pq", w, A, A)
    rhs = np.einsum("kInp,kIn->p", A, g)
    return ensemble.theta + model.sigma**2 * _solve_spd(G, rhs, "Gram matrix sum w A^T A")


def em_update_matrix(ensemble, model, obs=None):
    """Closed-form M-step for ``f(x) = F x`` with ``theta = vec(F)`` (column-major).

    Returns ``F' = F_k + sigma^2 [sum grad xi^T] [sum w xi xi^T]^{-1}``.
    """
    xi, w, g = _em_points(ensemble)
    n = xi.shape[-1]
    Fk = ensemble.theta.reshape(n, n, order="F")
    Mxx = np.einsum("kI,kIa,kIb->ab", w, xi, xi)
    Mgx = np.einsum("kIa,kIb->ab", g, xi)
    X = _solve_spd(Mxx, Mgx.T, "second-moment matrix sum w xi xi^T").T
    return Fk + model.sigma**2 * X


def em_update_gradient(ensemble, model, obs=None, max_steps=200, tol=1e-10):
    """M-step by numerical minimisation of :func:`em_objective_mc`.

    For drifts without a linear decomposition.  Quasi-Newton (BFGS) from
    ``theta_k`` with finite-difference gradients.
    """
    theta_k = ensemble.theta.copy()
    obj = lambda th: em_objective_mc(th, theta_k, ensemble, model, obs)
    scale = 1.0 + abs(obj(theta_k))
    res = minimize(lambda th: obj(th) / scale, theta_k, method="BFGS",
                   options={"maxiter": max_steps, "gtol": tol})
    return res.x


@dataclass
class DiffusionFitReport:
    theta_history: list = field(default_factory=list)
    final: Optional[np.ndarray] = None
    ensembles: list = field(default_factory=list)


def run_smoother(model, obs, N, seed=None, systematic=False):
    """Particle filter followed by the smoother, for either observation type."""
    if isinstance(obs, DiscreteObservations):
        ens = particle_filter_discrete_obs(model, obs, N, seed, systematic)
    else:
        ens = particle_filter(model, obs, N, seed, systematic)
    return particle_smoother(ens, model, obs)


def fit_parameters(model0, obs, N=128, iters=100, seed=None, update="linear",
                   systematic=False, callback=None, keep_ensembles=False):
    """Monte Carlo EM for the drift parameters.

    Every iteration draws a fresh filter/smoother ensemble under the current
    ``theta`` from its own labelled substream of ``seed``, then applies the
    selected M-step (``"linear"``, ``"matrix"`` or ``"gradient"``).
    """
    updates = {"linear": em_update_linear, "matrix": em_update_matrix, "gradient": em_update_gradient}
    if update not in updates:
        raise ValueError(f"unknown update {update!r}; choose from {sorted(updates)}")
    step = updates[update]
    model = model0
    report = DiffusionFitReport(theta_history=[model0.theta.copy()])
    for k in range(iters):
        ens = run_smoother(model, obs, N, labeled(seed, k), systematic)
        theta = np.ravel(step(ens, model, obs), order="F")
        model = model.with_theta(theta)
        report.theta_history.append(theta.copy())
        if keep_ensembles:
            report.ensembles.append(ens)
        if callback is not None:
            callback(k, model, ens)
    report.final = model.theta.copy()
    return report
