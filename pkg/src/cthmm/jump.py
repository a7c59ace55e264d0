"""
Continuous-time HMMs with a finite-state hidden jump process.

Two observation regimes are supported:

* ``"continuous"``: the observation symbol is redrawn from ``r`` every time
  the hidden chain jumps, so the record is a piecewise-constant path and only
  its visible changes are seen.
* ``"discrete"``: independent observations at isolated times.

State estimation solves piecewise linear ODEs forward (``alpha``) and
backward (``beta``) between observation events, with multiplicative jumps at
the events.  The EM update re-estimates the generator ``Q`` only; the
observation matrix and initial law stay fixed.

Numerical conventions
---------------------
Within each holding interval the ODE coefficient matrix is constant and is
integrated with classical RK4 on a uniform sub-grid.  Because the forward and
backward steps use the same RK4 propagator, ``alpha . beta`` is conserved by
the discrete scheme itself.  Stored vectors are rescaled at every event (and
whenever their norm leaves ``[1e-150, 1e150]``); the true value of a stored
vector is ``stored * exp(log_scale)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ._rng import make_rng
from .exceptions import ImpossibleEvidenceError

_NORM_LO = 1e-150
_NORM_HI = 1e150
_MAX_CHUNK = 256


# ---------------------------------------------------------------------------
# data types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class JumpHmmModel:
    """Generator ``Q`` (n x n), observation matrix ``r`` (n x m), initial law ``pi0``."""

    Q: np.ndarray
    r: np.ndarray
    pi0: np.ndarray

    def __post_init__(self):
        Q = np.array(self.Q, dtype=float, ndmin=2)
        r = np.array(self.r, dtype=float, ndmin=2)
        pi0 = np.array(self.pi0, dtype=float, ndmin=1)
        n = Q.shape[0]
        if Q.shape != (n, n):
            raise ValueError(f"Q must be square, got shape {Q.shape}")
        if r.shape[0] != n:
            raise ValueError(f"r must have {n} rows, got shape {r.shape}")
        if pi0.shape != (n,):
            raise ValueError(f"pi0 must have length {n}, got shape {pi0.shape}")
        off = Q - np.diag(np.diag(Q))
        if np.any(off < 0):
            raise ValueError("Q has negative off-diagonal entries")
        if np.any(np.abs(Q.sum(axis=1)) > 1e-12 * max(1.0, np.abs(Q).max())):
            raise ValueError("rows of Q must sum to zero")
        if np.any(r < 0) or np.any(np.abs(r.sum(axis=1) - 1.0) > 1e-12):
            raise ValueError("rows of r must be probability vectors")
        if np.any(pi0 < 0) or abs(pi0.sum() - 1.0) > 1e-12:
            raise ValueError("pi0 must be a probability vector")
        for name, arr in (("Q", Q), ("r", r), ("pi0", pi0)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def n(self):
        return self.Q.shape[0]

    @property
    def m(self):
        return self.r.shape[1]

    @property
    def D(self):
        return np.diag(np.diag(self.Q))

    def with_generator(self, Q):
        return JumpHmmModel(Q=Q, r=self.r, pi0=self.pi0)


@dataclass(frozen=True)
class JumpObservationPath:
    """Observation events ``(times[s], symbols[s])`` on the horizon ``[0, T]``.

    In ``"continuous"`` mode the first event must sit at ``t = 0`` and
    consecutive symbols must differ.  In ``"discrete"`` mode the list may be
    empty and repeated symbols are allowed.
    """

    times: np.ndarray
    symbols: np.ndarray
    T: float
    mode: str = "continuous"

    def __post_init__(self):
        times = np.array(self.times, dtype=float, ndmin=1)
        symbols = np.array(self.symbols, dtype=int, ndmin=1)
        if times.shape != symbols.shape:
            raise ValueError("times and symbols must have the same length")
        if self.mode not in ("continuous", "discrete"):
            raise ValueError(f"unknown observation mode {self.mode!r}")
        T = float(self.T)
        if not T > 0:
            raise ValueError("horizon T must be positive")
        if times.size:
            if np.any(np.diff(times) <= 0):
                raise ValueError("event times must be strictly increasing")
            if times[0] < 0 or times[-1] > T:
                raise ValueError("event times must lie in [0, T]")
        if self.mode == "continuous":
            if times.size == 0:
                raise ValueError("a continuous observation path needs at least the initial event")
            if times[0] != 0.0:
                raise ValueError("a continuous observation path must start at t = 0")
            if np.any(symbols[1:] == symbols[:-1]):
                raise ValueError("consecutive symbols must differ in continuous mode")
        times.setflags(write=False)
        symbols.setflags(write=False)
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "symbols", symbols)
        object.__setattr__(self, "T", T)

    def __len__(self):
        return self.times.size

    def symbol_at(self, t):
        """Observed symbol at time ``t`` (continuous mode, right-continuous)."""
        idx = np.searchsorted(self.times, t, side="right") - 1
        return self.symbols[np.clip(idx, 0, None)]


@dataclass
class ScaledPosteriorGrid:
    """Forward/backward solutions on the event-aligned time grid.

    ``times`` lists every sub-grid point of every holding interval, so each
    interior event time appears twice: first the left limit, then the
    post-jump value.  ``segment[k]`` is the interval index of point ``k``.
    True quantities are ``alpha * exp(log_scale)`` and
    ``beta * exp(beta_log_scale)``.
    """

    times: np.ndarray
    segment: np.ndarray
    bounds: np.ndarray  # (S+1, 2) first/last grid index of each interval
    alpha: np.ndarray | None = None
    log_scale: np.ndarray | None = None
    log_kappa: np.ndarray | None = None  # log of the event rescaling factors
    loglik: float | None = None
    beta: np.ndarray | None = None
    beta_log_scale: np.ndarray | None = None
    rho: np.ndarray | None = None

    def log_inner(self):
        """Scale-corrected ``log(alpha_t . beta_t)`` at every grid point."""
        dot = np.einsum("ki,ki->k", self.alpha, self.beta)
        with np.errstate(divide="ignore"):
            return np.log(dot) + self.log_scale + self.beta_log_scale

    def rows_for_output(self):
        return self.times, self.rho


@dataclass
class EmFitReport:
    iterates: list = field(default_factory=list)
    loglik_history: list = field(default_factory=list)
    converged: bool = False
    iterations_used: int = 0
    frozen_rows: list = field(default_factory=list)

    @property
    def Q_hat(self):
        return self.iterates[-1]


# ---------------------------------------------------------------------------
# simulation
# ---------------------------------------------------------------------------


def simulate_jump_hmm(model, T, seed=None):
    """Simulate the hidden jump chain and its jump-synchronised observations.

    Returns
    -------
    hidden : tuple of arrays ``(times, states)``
        Hidden jump times (starting with 0) and the state entered at each.
    obs : JumpObservationPath
        Visible changes of the observation symbol.
    """
    if not T > 0:
        raise ValueError("T must be positive")
    rng = make_rng(seed)
    Q, r = model.Q, model.r
    x = rng.choice(model.n, p=model.pi0)
    y = rng.choice(model.m, p=r[x])
    h_times, h_states = [0.0], [x]
    o_times, o_symbols = [0.0], [y]
    t = 0.0
    while True:
        rate = -Q[x, x]
        if rate <= 0:
            break
        t += rng.exponential(1.0 / rate)
        if t > T:
            break
        p = Q[x].copy()
        p[x] = 0.0
        x = rng.choice(model.n, p=p / p.sum())
        h_times.append(t)
        h_states.append(x)
        y_new = rng.choice(model.m, p=r[x])
        if y_new != y:
            o_times.append(t)
            o_symbols.append(y_new)
            y = y_new
    hidden = (np.array(h_times), np.array(h_states, dtype=int))
    return hidden, JumpObservationPath(o_times, o_symbols, T, mode="continuous")


def sample_discrete_observations(model, hidden, obs_times, T, seed=None):
    """Draw independent observations ``y ~ r[X_t]`` at the given times."""
    rng = make_rng(seed)
    h_times, h_states = hidden
    obs_times = np.asarray(obs_times, dtype=float)
    idx = np.searchsorted(h_times, obs_times, side="right") - 1
    states = h_states[idx]
    symbols = np.array([rng.choice(model.m, p=model.r[x]) for x in states], dtype=int)
    return JumpObservationPath(obs_times, symbols, T, mode="discrete")


# ---------------------------------------------------------------------------
# piecewise linear system shared by both observation regimes
# ---------------------------------------------------------------------------


@dataclass
class _Plan:
    """ODE coefficients, sub-grid and RK4 propagators for one (model, obs) pair.

    Interval ``s`` runs from ``edges[s]`` to ``edges[s + 1]`` with coefficient
    matrix ``rate_stack[rate_idx[s]]``; the event opening interval ``s >= 1``
    applies ``jump_stack[jump_idx[s]]``.
    """

    start: np.ndarray
    rate_stack: np.ndarray
    rate_idx: np.ndarray
    jump_stack: np.ndarray
    jump_idx: np.ndarray
    edges: np.ndarray
    times: np.ndarray
    segment: np.ndarray
    bounds: np.ndarray
    steps: np.ndarray
    chunk: np.ndarray
    props: np.ndarray  # (S+1, n, n) one-step RK4 propagators


def _rk4_propagators(Ms, h):
    """Batched one-step RK4 matrices for ``x' = x M`` (Horner form)."""
    n = Ms.shape[-1]
    eye = np.eye(n)
    hM = h[:, None, None] * Ms
    P = eye + hM / 4.0
    P = eye + hM @ P / 3.0
    P = eye + hM @ P / 2.0
    return eye + hM @ P


def _batched_powers(P, K):
    """``out[b, k] = P[b]^k`` for ``k = 0..K``, by doubling."""
    B, n, _ = P.shape
    out = np.empty((B, K + 1, n, n))
    out[:, 0] = np.eye(n)
    f = 1
    while f <= K:
        Pf = out[:, f - 1] @ P
        m = min(f, K + 1 - f)
        out[:, f : f + m] = out[:, :m] @ Pf[:, None]
        f += m
    return out


def _plan(model, obs, dt_max):
    if not dt_max > 0:
        raise ValueError("dt_max must be positive")
    Q, r, n = model.Q, model.r, model.n
    if obs.mode == "continuous":
        y = obs.symbols
        off = Q - model.D
        rate_stack = np.array([model.D + off * r[None, :, k] for k in range(model.m)])
        jump_stack = np.array([off * r[None, :, k] for k in range(model.m)])
        rate_idx = y.copy()
        jump_idx = y.copy()
        start = np.diag(r[:, y[0]])
        edges = np.concatenate([obs.times, [obs.T]])
    else:
        times, y = obs.times, obs.symbols
        start = np.eye(n)
        if times.size and times[0] == 0.0:
            start = np.diag(r[:, y[0]])
            times, y = times[1:], y[1:]
        rate_stack = Q[None].copy()
        jump_stack = np.array([np.diag(r[:, k]) for k in range(model.m)])
        rate_idx = np.zeros(times.size + 1, dtype=int)
        jump_idx = np.concatenate([[0], y]).astype(int)
        edges = np.concatenate([[0.0], times, [obs.T]])

    lengths = np.diff(edges)
    row_norm = np.abs(rate_stack).sum(axis=2).max(axis=1)
    col_norm = np.abs(rate_stack).sum(axis=1).max(axis=1)
    steps = np.maximum(1, np.ceil(lengths / dt_max - 1e-9)).astype(int)
    # keep h * ||M|| <= 0.5 so RK4 stays well inside its stability region
    stiff = np.ceil(lengths * row_norm[rate_idx] / 0.5 - 1e-9).astype(int)
    steps = np.maximum(steps, stiff)
    h = lengths / steps
    g = h * np.maximum(row_norm, col_norm)[rate_idx]
    with np.errstate(divide="ignore"):
        cap = np.where(g > 0, np.floor(50.0 / np.where(g > 0, g, 1.0)), _MAX_CHUNK)
    chunk = np.maximum(1, np.minimum(np.minimum(steps, _MAX_CHUNK), cap)).astype(int)

    S1 = steps.size
    counts = steps + 1
    first = np.concatenate([[0], np.cumsum(counts)[:-1]])
    segment = np.repeat(np.arange(S1), counts)
    local = np.arange(counts.sum()) - first[segment]
    grid_times = edges[segment] + local * h[segment]
    last = first + steps
    grid_times[last] = edges[1:]
    bounds = np.stack([first, last], axis=1)

    props = _rk4_propagators(rate_stack[rate_idx], h)
    return _Plan(start, rate_stack, rate_idx, jump_stack, jump_idx, edges, grid_times,
                 segment, bounds, steps, chunk, props)


_BLOCK_BYTES = 32 * 2**20


def _power_blocks(plan, reverse=False):
    """Yield ``(s, powers)`` per interval, batching intervals of equal chunk size.

    Consecutive intervals are processed in blocks whose power tables fit in a
    fixed memory budget.
    """
    n = plan.props.shape[-1]
    S1 = plan.steps.size
    per_point = n * n * 8
    s = 0
    blocks = []
    while s < S1:
        e, used = s, 0
        while e < S1 and (e == s or used + (plan.chunk[e] + 1) * per_point <= _BLOCK_BYTES):
            used += (plan.chunk[e] + 1) * per_point
            e += 1
        blocks.append((s, e))
        s = e
    for s0, e0 in reversed(blocks) if reverse else blocks:
        idx = np.arange(s0, e0)
        table = {}
        for C in np.unique(plan.chunk[idx]):
            members = idx[plan.chunk[idx] == C]
            pw = _batched_powers(plan.props[members], int(C))
            for j, s in enumerate(members):
                table[s] = pw[j]
        for s in idx[::-1] if reverse else idx:
            yield int(s), table[s]


def _forward(plan, pi0):
    times, bounds, steps, chunk = plan.times, plan.bounds, plan.steps, plan.chunk
    n = pi0.size
    alpha = np.empty((times.size, n))
    log_scale = np.empty(times.size)
    log_kappa = np.zeros(steps.size)

    a = pi0 @ plan.start
    tot = a.sum()
    if not tot > 0:
        raise ImpossibleEvidenceError("initial observation has zero probability", time=0.0)
    log_kappa[0] = -math.log(tot)
    a = a / tot
    la = -log_kappa[0]

    for s, pows in _power_blocks(plan):
        i0 = bounds[s, 0]
        if s > 0:
            a = alpha[i0 - 1] @ plan.jump_stack[plan.jump_idx[s]]
            tot = a.sum()
            if not (tot > 0 and np.isfinite(tot)):
                t_ev = plan.edges[s]
                raise ImpossibleEvidenceError(
                    f"observation at t={t_ev:.6g} has zero probability under the model",
                    time=t_ev,
                )
            log_kappa[s] = -math.log(tot)
            a = a / tot
            la = log_scale[i0 - 1] - log_kappa[s]
        K, C = steps[s], chunk[s]
        alpha[i0], log_scale[i0] = a, la
        k = 0
        while k < K:
            c = min(C, K - k)
            base = alpha[i0 + k]
            lsc = log_scale[i0 + k]
            nrm = base.sum()
            if not nrm > 0:
                raise ImpossibleEvidenceError(
                    f"forward variable vanished at t={times[i0 + k]:.6g}", time=times[i0 + k]
                )
            if nrm < _NORM_LO or nrm > _NORM_HI:
                base = base / nrm
                lsc = lsc + math.log(nrm)
                alpha[i0 + k], log_scale[i0 + k] = base, lsc
            alpha[i0 + k + 1 : i0 + k + c + 1] = base @ pows[1 : c + 1]
            log_scale[i0 + k + 1 : i0 + k + c + 1] = lsc
            k += c
    return alpha, log_scale, log_kappa


def _backward(plan, log_kappa):
    times, bounds, steps, chunk = plan.times, plan.bounds, plan.steps, plan.chunk
    n = plan.start.shape[0]
    beta = np.empty((times.size, n))
    log_scale = np.empty(times.size)
    S = steps.size - 1
    b = np.ones(n)
    lsc = 0.0
    for s, pows in _power_blocks(plan, reverse=True):
        i0, i1 = bounds[s]
        if s < S:
            # same kappa as the forward pass, multiplied in so alpha . beta is conserved
            b = plan.jump_stack[plan.jump_idx[s + 1]] @ beta[i1 + 1]
            b = b * math.exp(log_kappa[s + 1])
            lsc = log_scale[i1 + 1] - log_kappa[s + 1]
            if not b.sum() > 0:
                t_ev = plan.edges[s + 1]
                raise ImpossibleEvidenceError(
                    f"backward variable vanished at event t={t_ev:.6g}", time=t_ev
                )
        K, C = steps[s], chunk[s]
        beta[i1], log_scale[i1] = b, lsc
        k = K
        while k > 0:
            c = min(C, k)
            base = beta[i0 + k]
            lb = log_scale[i0 + k]
            nrm = base.sum()
            if not nrm > 0:
                raise ImpossibleEvidenceError(
                    f"backward variable vanished at t={times[i0 + k]:.6g}", time=times[i0 + k]
                )
            if nrm < _NORM_LO or nrm > _NORM_HI:
                base = base / nrm
                lb = lb + math.log(nrm)
                beta[i0 + k], log_scale[i0 + k] = base, lb
            # beta[i0 + k - j] = P^j beta[i0 + k] for j = 1..c
            block = pows[1 : c + 1] @ base
            beta[i0 + k - c : i0 + k] = block[::-1]
            log_scale[i0 + k - c : i0 + k] = lb
            k -= c
    return beta, log_scale


# ---------------------------------------------------------------------------
# public passes
# ---------------------------------------------------------------------------


def _require_mode(obs, mode):
    if obs.mode != mode:
        raise ValueError(f"expected a {mode!r} observation path, got {obs.mode!r}")


def _forward_grid(model, obs, dt_max, plan=None):
    if plan is None:
        plan = _plan(model, obs, dt_max)
    alpha, log_scale, log_kappa = _forward(plan, model.pi0)
    last = alpha[-1].sum()
    loglik = math.log(last) + log_scale[-1] if last > 0 else -math.inf
    return ScaledPosteriorGrid(
        times=plan.times,
        segment=plan.segment,
        bounds=plan.bounds,
        alpha=alpha,
        log_scale=log_scale,
        log_kappa=log_kappa,
        loglik=loglik,
    )


def _backward_grid(model, obs, grid, dt_max, plan=None):
    if plan is None:
        plan = _plan(model, obs, dt_max)
    if grid is None:
        grid = _forward_grid(model, obs, dt_max, plan)
    if plan.times.shape != grid.times.shape or not np.array_equal(plan.times, grid.times):
        raise ValueError("forward grid does not match model/observations/dt_max")
    beta, beta_log_scale = _backward(plan, grid.log_kappa)
    return ScaledPosteriorGrid(
        times=grid.times,
        segment=grid.segment,
        bounds=grid.bounds,
        alpha=grid.alpha,
        log_scale=grid.log_scale,
        log_kappa=grid.log_kappa,
        loglik=grid.loglik,
        beta=beta,
        beta_log_scale=beta_log_scale,
    )


def forward_pass(model, obs, dt_max=1e-2):
    """Solve the forward piecewise ODE for jump-synchronised observations.

    Returns a :class:`ScaledPosteriorGrid` with ``alpha``, ``log_scale``,
    ``log_kappa`` and the pseudo-log-likelihood ``loglik`` populated.
    """
    _require_mode(obs, "continuous")
    return _forward_grid(model, obs, dt_max)


def backward_pass(model, obs, grid=None, dt_max=1e-2):
    """Solve the backward piecewise ODE, reusing the forward event scalings.

    ``grid`` is the result of :func:`forward_pass`; it is computed if absent.
    """
    _require_mode(obs, "continuous")
    return _backward_grid(model, obs, grid, dt_max)


def forward_pass_discrete_obs(model, obs, dt_max=1e-2):
    _require_mode(obs, "discrete")
    return _forward_grid(model, obs, dt_max)


def backward_pass_discrete_obs(model, obs, grid=None, dt_max=1e-2):
    _require_mode(obs, "discrete")
    return _backward_grid(model, obs, grid, dt_max)


def posterior(forward, backward):
    """Combine forward and backward passes into the smoothing posterior ``rho``."""
    if backward.beta is None or forward.alpha is None:
        raise ValueError("both passes must be computed")
    if forward.times.shape != backward.times.shape or not np.array_equal(
        forward.times, backward.times
    ):
        raise ValueError("forward and backward grids differ")
    prod = forward.alpha * backward.beta
    tot = prod.sum(axis=1, keepdims=True)
    if np.any(tot <= 0):
        k = int(np.argmax(tot[:, 0] <= 0))
        raise ImpossibleEvidenceError(
            f"posterior undefined at t={forward.times[k]:.6g}", time=forward.times[k]
        )
    return ScaledPosteriorGrid(
        times=forward.times,
        segment=forward.segment,
        bounds=forward.bounds,
        alpha=forward.alpha,
        log_scale=forward.log_scale,
        log_kappa=forward.log_kappa,
        loglik=forward.loglik,
        beta=backward.beta,
        beta_log_scale=backward.beta_log_scale,
        rho=prod / tot,
    )


def smooth(model, obs, dt_max=1e-2):
    """Forward, backward and posterior in one call (either observation mode)."""
    return _smooth(model, obs, _plan(model, obs, dt_max))


def _smooth(model, obs, plan):
    fwd = _forward_grid(model, obs, None, plan)
    bwd = _backward_grid(model, obs, fwd, None, plan)
    return posterior(fwd, bwd)


# ---------------------------------------------------------------------------
# EM
# ---------------------------------------------------------------------------


def _trapezoid_weights(times, bounds):
    h = np.diff(times)
    h[bounds[:-1, 1]] = 0.0  # no quadrature across an event
    w = np.zeros(times.size)
    w[:-1] += 0.5 * h
    w[1:] += 0.5 * h
    return w


def _em_update(model, plan, grid):
    n = model.n
    L = grid.loglik
    # rescale alpha so that alpha_k . beta_k == 1 up to the conservation error
    A = grid.alpha * np.exp(grid.log_scale + grid.beta_log_scale - L)[:, None]
    B = grid.beta
    wts = _trapezoid_weights(grid.times, grid.bounds)

    den = np.einsum("k,ki,ki->i", wts, A, B)

    num = np.zeros((n, n))
    point_key = plan.rate_idx[grid.segment]
    for key in np.unique(plan.rate_idx):
        mask = point_key == key
        inner = (A[mask] * wts[mask, None]).T @ B[mask]
        W = plan.rate_stack[key] - np.diag(np.diag(plan.rate_stack[key]))
        num += W * inner

    if plan.steps.size > 1:
        left = grid.bounds[:-1, 1]
        right = grid.bounds[1:, 0]
        coef = np.exp(grid.log_scale[left] + grid.beta_log_scale[right] - L)
        outer = grid.alpha[left][:, :, None] * grid.beta[right][:, None, :] * coef[:, None, None]
        jumps = np.einsum("sij,sij->ij", outer, plan.jump_stack[plan.jump_idx[1:]])
        num += jumps - np.diag(np.diag(jumps))

    Q_new = np.array(model.Q, dtype=float)
    frozen = []
    for i in range(n):
        if not den[i] > 1e-300:
            frozen.append(i)
            continue
        row = num[i] / den[i]
        row[i] = 0.0
        row = np.maximum(row, 0.0)
        row[i] = -row.sum()
        Q_new[i] = row
    return Q_new, frozen


def em_update_generator(model, obs, grid=None, dt_max=1e-2, return_frozen=False):
    """One M-step: re-estimate the generator from the current E-step grids.

    ``grid`` must come from :func:`posterior` (or :func:`smooth`) under the
    same model, observations and ``dt_max``; it is computed if absent.  Rows
    whose posterior occupation integral underflows are left unchanged; pass
    ``return_frozen=True`` to get their indices.
    """
    plan = _plan(model, obs, dt_max)
    if grid is None or grid.beta is None:
        grid = _smooth(model, obs, plan)
    elif not np.array_equal(plan.times, grid.times):
        raise ValueError("grid does not match model/observations/dt_max")
    Q_new, frozen = _em_update(model, plan, grid)
    if return_frozen:
        return Q_new, frozen
    return Q_new


def em_update_generator_discrete_obs(model, obs, grid=None, dt_max=1e-2, return_frozen=False):
    _require_mode(obs, "discrete")
    return em_update_generator(model, obs, grid, dt_max, return_frozen)


def fit_generator(model0, obs, max_iters=200, tol=1e-6, dt_max=1e-2, callback=None):
    """Run EM on the generator until ``||Q^{k+1} - Q^k||_F < tol``.

    ``loglik_history[k]`` is the pseudo-log-likelihood of ``iterates[k]``.
    """
    model = model0
    report = EmFitReport(iterates=[np.array(model0.Q)])
    frozen_all = set()
    for k in range(max_iters):
        plan = _plan(model, obs, dt_max)
        grid = _smooth(model, obs, plan)
        report.loglik_history.append(grid.loglik)
        Q_new, frozen = _em_update(model, plan, grid)
        frozen_all.update(frozen)
        step = np.linalg.norm(Q_new - model.Q)
        report.iterates.append(Q_new)
        report.iterations_used = k + 1
        model = model.with_generator(Q_new)
        if callback is not None:
            callback(k, model, grid)
        if step < tol:
            report.converged = True
            break
    report.frozen_rows = sorted(frozen_all)
    return report


# ---------------------------------------------------------------------------
# fine-grid discrete-time oracle
# ---------------------------------------------------------------------------


@dataclass
class DiscreteOracleResult:
    times: np.ndarray
    rho: np.ndarray
    Q_update: np.ndarray
    loglik: float


def discrete_baum_welch_oracle(model, obs, dt):
    """Scaled Baum-Welch on a uniform grid of step ``dt``.

    The hidden chain and observation are advanced jointly with first-order
    transition probabilities ``1 + Q_ii dt`` / ``Q_ij dt``; event times are
    snapped to the grid.  Returns the smoothing posterior at every grid point
    and the one-step EM ratio ``sum xi / sum rho dt``.  Intended for testing:
    its error against the continuous solution is O(dt).
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    Q, r, n = model.Q, model.r, model.n
    K = int(round(obs.T / dt))
    times = np.arange(K + 1) * dt
    ev = np.rint(obs.times / dt).astype(int)
    off = Q - np.diag(np.diag(Q))

    # step matrices P_k (k = 1..K), stored by type index
    if obs.mode == "continuous":
        if np.any(np.diff(ev) <= 0):
            raise ValueError("dt too coarse: two events share a grid point")
        sym = np.empty(K + 1, dtype=int)
        for s in range(len(ev)):
            sym[ev[s] :] = obs.symbols[s]
        changed = np.zeros(K + 1, dtype=bool)
        changed[ev[1:]] = True
        same = [np.diag(1.0 + np.diag(Q) * dt) + off * r[None, :, y] * dt for y in range(model.m)]
        jump = [off * r[None, :, y] for y in range(model.m)]
        stack = np.array(same + jump)
        kind = sym + model.m * changed
        a0 = model.pi0 * r[:, sym[0]]
    else:
        base = np.eye(n) + Q * dt
        stack = [base] + [base * r[None, :, y] for y in range(model.m)]
        stack = np.array(stack)
        kind = np.zeros(K + 1, dtype=int)
        a0 = model.pi0.copy()
        for t_idx, y in zip(ev, obs.symbols):
            if t_idx == 0:
                a0 = a0 * r[:, y]
            else:
                kind[t_idx] = 1 + y

    alpha = np.empty((K + 1, n))
    c0 = a0.sum()
    if not c0 > 0:
        raise ImpossibleEvidenceError("initial observation impossible", time=0.0)
    alpha[0] = a0 / c0
    loglik = math.log(c0)
    for k in range(1, K + 1):
        a = alpha[k - 1] @ stack[kind[k]]
        c = a.sum()
        if not c > 0:
            raise ImpossibleEvidenceError("observation impossible", time=times[k])
        alpha[k] = a / c
        loglik += math.log(c)

    beta = np.empty((K + 1, n))
    beta[K] = 1.0
    for k in range(K, 0, -1):
        b = stack[kind[k]] @ beta[k]
        beta[k - 1] = b / b.sum()

    rho = alpha * beta
    rho /= rho.sum(axis=1, keepdims=True)

    xi = np.einsum("ki,kij,kj->kij", alpha[:-1], stack[kind[1:]], beta[1:])
    xi /= xi.sum(axis=(1, 2), keepdims=True)
    num = xi.sum(axis=0)
    den = rho[:-1].sum(axis=0) * dt
    Q_new = np.array(Q, dtype=float)
    for i in range(n):
        if den[i] > 1e-300:
            row = num[i] / den[i]
            row[i] = 0.0
            row[i] = -row.sum()
            Q_new[i] = row
    return DiscreteOracleResult(times=times, rho=rho, Q_update=Q_new, loglik=loglik)
