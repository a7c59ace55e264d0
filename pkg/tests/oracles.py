"""Independent reference computations used by the tests.

Each oracle follows a different route from the library code it checks:
matrix exponentials instead of RK4 for the jump process, a dense Gaussian
conditioning for the Euler linear model instead of the Kalman recursions,
and brute-force sums instead of vectorised kernels for the particle smoother.
"""

import numpy as np
from scipy.linalg import expm


def jump_rate_matrix(Q, r, y):
    """Holding-interval generator of the joint chain while symbol ``y`` is shown."""
    Q = np.asarray(Q, dtype=float)
    off = Q - np.diag(np.diag(Q))
    return np.diag(np.diag(Q)) + off * np.asarray(r)[None, :, y]


def jump_expm_posterior(model, obs, t_query):
    """Exact smoothing posterior and log-likelihood via matrix exponentials.

    ``t_query`` must avoid event times.  Works in both observation modes.
    """
    Q, r, pi0 = np.asarray(model.Q), np.asarray(model.r), np.asarray(model.pi0)
    n = Q.shape[0]
    times, syms, T = np.asarray(obs.times), np.asarray(obs.symbols), obs.T
    if obs.mode == "continuous":
        edges = list(times) + [T]
        mats = [jump_rate_matrix(Q, r, y) for y in syms]
        jumps = [None] + [(Q - np.diag(np.diag(Q))) * r[None, :, y] for y in syms[1:]]
        a = pi0 * r[:, syms[0]]
    else:
        ev = [(t, y) for t, y in zip(times, syms)]
        a = pi0.copy()
        if ev and ev[0][0] == 0.0:
            a = a * r[:, ev[0][1]]
            ev = ev[1:]
        edges = [0.0] + [t for t, _ in ev] + [T]
        mats = [Q] * (len(edges) - 1)
        jumps = [None] + [np.diag(r[:, y]) for _, y in ev]

    # forward: alpha at the left end of every interval
    starts = []
    for s in range(len(edges) - 1):
        if s > 0:
            a = a @ jumps[s]
        starts.append(a)
        a = a @ expm(mats[s] * (edges[s + 1] - edges[s]))
    loglik = float(np.log(a.sum()))

    # backward: beta at the right end of every interval
    b = np.ones(n)
    ends = [None] * (len(edges) - 1)
    for s in range(len(edges) - 2, -1, -1):
        ends[s] = b
        b = expm(mats[s] * (edges[s + 1] - edges[s])) @ b
        if s > 0:
            b = jumps[s] @ b

    out = []
    for t in np.atleast_1d(t_query):
        s = int(np.searchsorted(edges, t, side="right") - 1)
        s = min(s, len(edges) - 2)
        at = starts[s] @ expm(mats[s] * (t - edges[s]))
        bt = expm(mats[s] * (edges[s + 1] - t)) @ ends[s]
        p = at * bt
        out.append(p / p.sum())
    return np.array(out), loglik


def euler_linear_posterior(F, H, sigma, eta, mu0, P0, dY, dt):
    """Exact posterior of the Euler-discretised linear model by dense conditioning.

    States ``x_0..x_K`` with ``x_{k+1} = (I + F dt) x_k + sigma sqrt(dt) w_k``
    and ``dY_k = H x_k dt + eta sqrt(dt) v_k``; the joint Gaussian of all
    states and increments is built explicitly and conditioned in one solve.
    """
    F, H = np.atleast_2d(F), np.atleast_2d(H)
    n, m = F.shape[0], H.shape[0]
    K = dY.shape[0]
    A = np.eye(n) + F * dt
    # x = G z, z = (x0, w_0 .. w_{K-1}) with z ~ N(mean_z, cov_z)
    G = np.zeros(((K + 1) * n, (K + 1) * n))
    for k in range(K + 1):
        Ak = np.eye(n)
        for j in range(k, -1, -1):
            G[k * n:(k + 1) * n, j * n:(j + 1) * n] = Ak
            Ak = Ak @ A
    mean_z = np.concatenate([mu0, np.zeros(K * n)])
    cov_z = np.zeros_like(G)
    cov_z[:n, :n] = P0
    cov_z[n:, n:] = np.eye(K * n) * sigma**2 * dt
    mx = G @ mean_z
    Px = G @ cov_z @ G.T
    Hb = np.zeros((K * m, (K + 1) * n))
    for k in range(K):
        Hb[k * m:(k + 1) * m, k * n:(k + 1) * n] = H * dt
    S = Hb @ Px @ Hb.T + np.eye(K * m) * eta**2 * dt
    gain = np.linalg.solve(S, Hb @ Px).T
    mpost = mx + gain @ (dY.ravel() - Hb @ mx)
    Ppost = Px - gain @ Hb @ Px
    return mpost.reshape(K + 1, n), np.array(
        [Ppost[k * n:(k + 1) * n, k * n:(k + 1) * n] for k in range(K + 1)]
    )


def brute_force_smoother_weights(model, ens, obs):
    """Smoother weights by explicit double loops over particle pairs."""
    K, N = ens.K, ens.N
    s2dt = model.sigma**2 * ens.dt
    w = np.empty((K + 1, N))
    lo = ens.log_obs
    w[K] = np.exp(lo[K] - lo[K].max())
    w[K] /= w[K].sum()
    for k in range(K - 1, -1, -1):
        x = ens.xi[k]
        mean = x + model.f(x) * ens.dt
        logk = np.empty((N, N))
        for i in range(N):
            for j in range(N):
                d = ens.xi[k + 1, j] - mean[i]
                logk[i, j] = -d @ d / (2 * s2dt) + lo[k, i]
        for i in range(N):
            tot = 0.0
            for j in range(N):
                col = logk[:, j]
                c = col.max()
                tot += np.exp(logk[i, j] - c) / np.exp(col - c).sum() * w[k + 1, j]
            w[k, i] = tot
    return w
