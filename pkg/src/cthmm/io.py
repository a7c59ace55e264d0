"""
CSV and JSON readers and writers for models, observations and results.

Floats are written with 17 significant digits so that files round-trip
exactly and reruns with the same seed produce identical bytes.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .diffusion import DiscreteObservations, ObservationIncrements
from .jump import JumpHmmModel, JumpObservationPath

FLOAT_FMT = "%.17g"


def _fmt(v):
    if isinstance(v, (int, np.integer)) and not isinstance(v, bool):
        return str(int(v))
    return FLOAT_FMT % float(v)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        obj = float(obj)
    if isinstance(obj, float) and not np.isfinite(obj):
        return None
    if isinstance(obj, Path):
        return str(obj)
    return obj


def write_json(path, obj):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(_jsonable(obj), indent=2, sort_keys=False) + "\n")
    return path


def read_json(path):
    return json.loads(Path(path).read_text())


def write_csv(path, header, rows):
    """Write ``rows`` (iterable of sequences) under ``header``; ints stay ints."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])
    return path


def read_csv(path):
    """Return ``(header, data)`` with ``data`` a float array of shape ``(rows, cols)``."""
    with Path(path).open(newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        rows = [[float(v) for v in row] for row in r if row]
    data = np.array(rows, dtype=float).reshape(len(rows), len(header))
    return header, data


# ---------------------------------------------------------------------------
# jump process
# ---------------------------------------------------------------------------


def jump_model_to_dict(model):
    return {"n": model.n, "m": model.m, "Q": model.Q, "r": model.r, "pi0": model.pi0}


def save_jump_model(path, model):
    return write_json(path, jump_model_to_dict(model))


def load_jump_model(path):
    d = read_json(path)
    model = JumpHmmModel(Q=d["Q"], r=d["r"], pi0=d["pi0"])
    if "n" in d and d["n"] != model.n or "m" in d and d["m"] != model.m:
        raise ValueError("declared n/m disagree with the matrices")
    return model


def save_jump_observations(path, obs):
    return write_csv(path, ["t", "y"], zip(obs.times, obs.symbols.astype(int)))


def load_jump_observations(path, T, mode="continuous"):
    header, data = read_csv(path)
    if header[:2] != ["t", "y"]:
        raise ValueError("observation file must have header t,y")
    return JumpObservationPath(times=data[:, 0], symbols=data[:, 1].astype(int), T=T, mode=mode)


def save_hidden_jump_path(path, times, states):
    return write_csv(path, ["t", "x"], zip(times, np.asarray(states, dtype=int)))


def save_posterior(path, grid):
    times, rho = grid.rows_for_output()
    header = ["t"] + [f"rho_{i + 1}" for i in range(rho.shape[1])]
    return write_csv(path, header, (np.r_[t, r] for t, r in zip(times, rho)))


def save_jump_fit(path, report):
    return write_json(path, {
        "Q_hat": report.Q_hat,
        "iterations": report.iterations_used,
        "loglik_history": report.loglik_history,
        "converged": report.converged,
    })


# ---------------------------------------------------------------------------
# diffusion
# ---------------------------------------------------------------------------


def save_increments(path, obs):
    m = obs.increments.shape[1]
    header = ["t"] + [f"dy_{i + 1}" for i in range(m)]
    return write_csv(path, header, (np.r_[t, d] for t, d in zip(obs.times[:-1], obs.increments)))


def save_discrete_observations(path, obs):
    m = obs.values.shape[1]
    header = ["t"] + [f"y_{i + 1}" for i in range(m)]
    return write_csv(path, header, (np.r_[t, v] for t, v in zip(obs.times, obs.values)))


def load_diffusion_observations(path, dt=None, T=None, mode="continuous"):
    """Read increments (``t,dy_..``) or, with ``mode="discrete"``, measurements (``t,y_..``).

    For increments ``dt`` defaults to the spacing of the ``t`` column.  For
    measurements ``dt`` (the filter grid) and ``T`` are required.
    """
    header, data = read_csv(path)
    if mode == "discrete":
        if not header[1:] or not header[1].startswith("y_"):
            raise ValueError("discrete observation file must have header t,y_1,...")
        if dt is None or T is None:
            raise ValueError("discrete observations need dt and T")
        return DiscreteObservations(dt=dt, T=T, times=data[:, 0], values=data[:, 1:])
    if not header[1:] or not header[1].startswith("dy_"):
        raise ValueError("increment file must have header t,dy_1,...")
    if dt is None:
        if data.shape[0] < 2:
            raise ValueError("cannot infer dt from fewer than two rows")
        dt = float(data[1, 0] - data[0, 0])
    return ObservationIncrements(dt=dt, increments=data[:, 1:])


def save_hidden_path(path, times, states):
    states = np.asarray(states)
    header = ["t"] + [f"x_{i + 1}" for i in range(states.shape[1])]
    return write_csv(path, header, (np.r_[t, x] for t, x in zip(times, states)))


def save_ensemble(path, ens):
    """Long-format dump ``t,i,xi_1..xi_n,w`` (``w`` is NaN before smoothing)."""
    K, N, n = ens.xi.shape[0] - 1, ens.N, ens.xi.shape[-1]
    w = ens.w if ens.w is not None else np.full((K + 1, N), np.nan)
    header = ["t", "i"] + [f"xi_{j + 1}" for j in range(n)] + ["w"]
    times = ens.times

    def rows():
        for k in range(K + 1):
            for i in range(N):
                yield [times[k], i, *ens.xi[k, i], w[k, i]]

    return write_csv(path, header, rows())


def save_diffusion_fit(path, report, extra=None):
    out = {"theta_history": [np.ravel(t) for t in report.theta_history], "final": np.ravel(report.final)}
    if extra:
        out.update(extra)
    return write_json(path, out)


# ---------------------------------------------------------------------------
# linear Gaussian
# ---------------------------------------------------------------------------


def save_kalman(path, times, mu, P):
    """Trajectory dump ``t,mu_1..mu_n,P_11..P_nn`` (row-major covariance)."""
    mu = np.asarray(mu)
    P = np.asarray(P)
    n = mu.shape[1]
    header = ["t"] + [f"mu_{i + 1}" for i in range(n)] + [f"P_{i + 1}{j + 1}" for i in range(n) for j in range(n)]
    return write_csv(path, header, (np.r_[t, m, p.ravel()] for t, m, p in zip(times, mu, P)))
