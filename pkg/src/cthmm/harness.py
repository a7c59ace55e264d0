"""
End-to-end experiment runner: simulate, fit, report.

Each experiment writes three artifacts into its output directory:

``errors.csv``
    Parameter error after every EM iteration, one row per (run, iteration).
``trajectory.csv``
    Estimated versus true hidden trajectory for every run.
``summary.json``
    Resolved config, per-run estimates and aggregate statistics.

Seeding: one master ``seed``; every run draws its model, data, fit and
trajectory randomness from ``labeled(seed, stage, run)`` substreams, so runs
are reproducible and independent of each other.

Diffusion estimates are the average of the EM iterates over the final
quarter of the iterations (``tail_fraction``); the last iterate is reported
alongside.
"""

from __future__ import annotations

import copy
import itertools
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import diffusion, jump, models
from ._rng import labeled, make_rng
from .exceptions import ModelBlowupError
from .io import write_csv, write_json

# substream stages
_MODEL, _DATA, _FIT, _TRAJ = 0, 1, 2, 3

DEFAULTS = {
    "jump-complete-n5": {
        "n": 5, "sigmas": [0.05, 0.2], "Ts": [200.0, 1000.0], "repeats": 1,
        "iters": 200, "tol": 1e-6, "dt": 1e-2, "trajectory_window": 20.0,
    },
    "jump-sparse-n20": {
        "n": 20, "neighbours": 5, "sigmas": [0.05, 0.2], "Ts": [200.0, 1000.0], "repeats": 1,
        "iters": 200, "tol": 1e-6, "dt": 1e-2, "trajectory_window": 20.0,
    },
    "bearings": {
        "theta": [-0.5, -1.0], "theta0": [0.0, 0.0], "sigma": 0.1, "eta": 0.02,
        "x0": [0.0, 1.0, 1.0, 0.0], "T": 3.0, "dt": 0.01, "particles": 128,
        "iters": 200, "repeats": 5, "average_iters": [175, 180, 185, 190, 195, 200],
        "smoother_repeats": 5, "tail_fraction": 0.25,
    },
    "cubic-matrix": {
        "d": 2, "F": [[0.0, 1.0], [-1.0, 0.0]], "x0": [1.0, 0.0], "noises": [0.2, 0.5, 1.0],
        "T": 10.0, "dt": 0.02, "particles": 128, "iters": 50, "repeats": 1, "tail_fraction": 0.25,
    },
    "cubic-scalar": {
        "dims": [5, 15, 25], "lams": [5.0, 25.0, 50.0], "sigmas": [0.5], "eta": 0.01,
        "T": 1.0, "dt": 0.005, "particles": 128, "iters": [60, 100, 150], "repeats": 1,
        "tail_fraction": 0.25,
    },
    "lorenz96": {
        "d": 10, "forcing": 8.0, "theta0": 0.0, "sigma": 1.0, "eta": 5.0, "T": 1.0, "dt": 0.05,
        "particles": 128, "iters": 30, "repeats": 1, "truth_substeps": 10, "tail_fraction": 0.25,
    },
}

EXPERIMENTS = tuple(DEFAULTS)


@dataclass
class ExperimentConfig:
    """Resolved settings of one experiment."""

    name: str
    out: Path
    seed: int = 0
    params: dict = field(default_factory=dict)

    def to_dict(self):
        return {"name": self.name, "out": str(self.out), "seed": self.seed, "params": self.params}


def _check_positive(params):
    for key, val in params.items():
        if key in ("theta", "theta0", "F", "x0", "forcing"):
            continue
        vals = np.ravel(np.asarray(val, dtype=float)) if not isinstance(val, bool) else []
        if np.any(vals <= 0) and key not in ("average_iters",):
            raise ValueError(f"config value {key}={val!r} must be positive")


def resolve_config(name, out="results", seed=None, config=None, **overrides):
    """Merge defaults, a config mapping (e.g. a JSON file) and explicit overrides.

    Overrides set to ``None`` are ignored; unknown keys are rejected.
    """
    if name not in DEFAULTS:
        raise ValueError(f"unknown experiment {name!r}; choose from {', '.join(EXPERIMENTS)}")
    params = copy.deepcopy(DEFAULTS[name])
    config = dict(config or {})
    seed = config.pop("seed", 0) if seed is None else seed
    out = config.pop("out", out)
    config.pop("name", None)
    merged = {**config, **{k: v for k, v in overrides.items() if v is not None}}
    for key, val in merged.items():
        if key not in params:
            raise ValueError(f"unknown setting {key!r} for experiment {name!r}")
        params[key] = val
    _check_positive(params)
    return ExperimentConfig(name=name, out=Path(out), seed=int(seed), params=params)


def _prepare_out(out):
    out = Path(out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_probe"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise OSError(f"output directory {out} is not writable: {exc}") from exc
    return out


# ---------------------------------------------------------------------------
# jump-process model builders
# ---------------------------------------------------------------------------


def cyclic_emission(n, sigma):
    """``r_i(i) = 1 - 2 sigma`` and ``r_i(i +- 1) = sigma`` with wrap-around (0-based)."""
    if not 0 <= sigma <= 0.5:
        raise ValueError("sigma must lie in [0, 1/2]")
    r = np.zeros((n, n))
    for i in range(n):
        r[i, i] += 1.0 - 2.0 * sigma
        r[i, (i - 1) % n] += sigma
        r[i, (i + 1) % n] += sigma
    return r


def random_complete_generator(n, seed=None):
    """``-Q_ii ~ U[1, 5]``; off-diagonal rates proportional to ``U[0, 1]`` draws."""
    rng = make_rng(seed)
    exit_rate = rng.uniform(1.0, 5.0, size=n)
    Q = rng.uniform(0.0, 1.0, size=(n, n))
    np.fill_diagonal(Q, 0.0)
    Q = Q / Q.sum(axis=1, keepdims=True) * exit_rate[:, None]
    np.fill_diagonal(Q, -exit_rate)
    return Q


def random_sparse_generator(n, neighbours=5, seed=None):
    """Each state jumps to ``neighbours`` random other states at ``U[0, 1]`` rates."""
    rng = make_rng(seed)
    Q = np.zeros((n, n))
    for i in range(n):
        others = np.delete(np.arange(n), i)
        nb = rng.choice(others, size=neighbours, replace=False)
        Q[i, nb] = rng.uniform(0.0, 1.0, size=neighbours)
    np.fill_diagonal(Q, -Q.sum(axis=1))
    return Q


def uniform_generator(n, exit_rate):
    """Flat initial guess: ``Q_ii = -exit_rate``, equal off-diagonal rates."""
    Q = np.full((n, n), exit_rate / (n - 1))
    np.fill_diagonal(Q, -exit_rate)
    return Q


def first_state_law(n):
    pi0 = np.zeros(n)
    pi0[0] = 1.0
    return pi0


# ---------------------------------------------------------------------------
# jump experiments
# ---------------------------------------------------------------------------


def run_jump_case(Q_true, sigma, T, seed, iters=200, tol=1e-6, dt=1e-2, Q0=None, run=0):
    """Simulate one jump-process data set and fit the generator.

    Returns a dict with the true and estimated generator, the Frobenius
    error after every iteration, and the posterior under the estimate.
    """
    n = Q_true.shape[0]
    r = cyclic_emission(n, sigma)
    truth = jump.JumpHmmModel(Q=Q_true, r=r, pi0=first_state_law(n))
    hidden, obs = jump.simulate_jump_hmm(truth, T, seed=labeled(seed, _DATA, run))
    Q0 = uniform_generator(n, 3.0) if Q0 is None else Q0
    report = jump.fit_generator(truth.with_generator(Q0), obs, max_iters=iters, tol=tol, dt_max=dt)
    errors = [float(np.linalg.norm(Q - Q_true)) for Q in report.iterates]
    return {"truth": truth, "hidden": hidden, "obs": obs, "report": report, "errors": errors}


def _run_jump(cfg, sparse):
    p = cfg.params
    n = p["n"]
    error_rows, traj_rows, runs = [], [], []
    cases = list(itertools.product(p["sigmas"], p["Ts"], range(p["repeats"])))
    for run, (sigma, T, rep) in enumerate(cases):
        t0 = time.perf_counter()
        mseed = labeled(cfg.seed, _MODEL, rep)
        if sparse:
            Q_true = random_sparse_generator(n, p["neighbours"], seed=mseed)
            Q0 = uniform_generator(n, (n - 1) / 8.0)
        else:
            Q_true = random_complete_generator(n, seed=mseed)
            Q0 = uniform_generator(n, 3.0)
        res = run_jump_case(Q_true, sigma, T, cfg.seed, p["iters"], p["tol"], p["dt"], Q0, run)
        rep_ = res["report"]
        for k, e in enumerate(res["errors"]):
            error_rows.append([run, sigma, T, rep, k, e])
        grid = jump.smooth(res["truth"].with_generator(rep_.Q_hat), res["obs"], dt_max=p["dt"])
        h_times, h_states = res["hidden"]
        keep = grid.times <= p["trajectory_window"]
        x = h_states[np.searchsorted(h_times, grid.times[keep], side="right") - 1]
        for t, xi, rho in zip(grid.times[keep], x, grid.rho[keep]):
            traj_rows.append([run, t, xi, *rho])
        runs.append({
            "run": run, "sigma": sigma, "T": T, "repeat": rep,
            "events": len(res["obs"]), "iterations": rep_.iterations_used, "converged": rep_.converged,
            "initial_error": res["errors"][0], "final_error": res["errors"][-1],
            "error_ratio": res["errors"][-1] / res["errors"][0],
            "loglik_history": rep_.loglik_history, "frozen_rows": rep_.frozen_rows,
            "Q_true": Q_true, "Q_hat": rep_.Q_hat, "seconds": time.perf_counter() - t0,
        })
    header = ["run", "t", "x"] + [f"rho_{i + 1}" for i in range(n)]
    return ["run", "sigma", "T", "repeat", "iteration", "error"], error_rows, header, traj_rows, runs, {}


# ---------------------------------------------------------------------------
# diffusion experiments
# ---------------------------------------------------------------------------


def tail_average(history, fraction=0.25):
    """Mean of the last ``ceil(fraction * iters)`` iterates (initial guess excluded)."""
    hist = np.asarray(history, dtype=float)
    iters = hist.shape[0] - 1
    if iters <= 0:
        return hist[-1]
    m = max(1, int(np.ceil(fraction * iters)))
    return hist[-m:].mean(axis=0)


def fit_diffusion_case(model_true, theta0, T, dt, N, iters, seed, run=0, truth_substeps=1,
                       tail_fraction=0.25, keep_ensembles=False):
    """Simulate one path under ``model_true`` and run Monte Carlo EM from ``theta0``.

    A blow-up (every particle diverged) ends the fit early; the iterates up
    to that point are kept and ``status`` records the failure.
    """
    path = models.euler_maruyama_simulate(model_true, T, dt, seed=labeled(seed, _DATA, run),
                                          substeps=truth_substeps)
    history = [np.ravel(np.asarray(theta0, dtype=float))]
    status = "ok"
    try:
        rep = diffusion.fit_parameters(
            model_true.with_theta(theta0), path.observations, N=N, iters=iters,
            seed=labeled(seed, _FIT, run), callback=lambda k, m, e: history.append(m.theta.copy()),
        )
    except ModelBlowupError as exc:
        status = f"blowup: {exc}"
    estimate = tail_average(history, tail_fraction) if status == "ok" else np.full(history[0].shape, np.nan)
    return {"path": path, "history": np.array(history), "estimate": estimate, "status": status}


def _trajectory(model, path, theta_list, N, seed, repeats, run):
    """Filter/smoother means averaged over ``theta_list`` x ``repeats`` runs."""
    fil, smo = [], []
    for a, theta in enumerate(theta_list):
        for b in range(repeats):
            ens = diffusion.run_smoother(model.with_theta(theta), path.observations, N,
                                         seed=labeled(seed, _TRAJ, run, a, b))
            f, s = diffusion.state_estimates(ens)
            fil.append(f)
            smo.append(s)
    return np.mean(fil, axis=0), np.mean(smo, axis=0)


def _run_diffusion(cfg, cases):
    """``cases``: list of (label dict, true model, theta0, iters, truth_substeps)."""
    p = cfg.params
    error_rows, traj_rows, runs = [], [], []
    theta_dim = None
    n_state = None
    for run, (label, model, theta0, iters, substeps) in enumerate(cases):
        t0 = time.perf_counter()
        theta_true = np.ravel(model.theta, order="F")
        res = fit_diffusion_case(model, theta0, p["T"], p["dt"], p["particles"], iters, cfg.seed,
                                 run, substeps, p["tail_fraction"])
        hist = res["history"]
        theta_dim = hist.shape[1]
        for k, th in enumerate(hist):
            error_rows.append([run, k, float(np.linalg.norm(th - theta_true)), *th])
        record = {
            "run": run, **label, "status": res["status"], "iterations": hist.shape[0] - 1,
            "theta_true": theta_true, "estimate": res["estimate"], "last_iterate": hist[-1],
            "estimate_error": float(np.linalg.norm(res["estimate"] - theta_true)),
            "max_abs_error": float(np.max(np.abs(res["estimate"] - theta_true))),
        }
        if res["status"] == "ok":
            if cfg.name == "bearings":
                sel = [k for k in p["average_iters"] if k < hist.shape[0]] or [hist.shape[0] - 1]
                thetas, reps = [hist[k] for k in sel], p["smoother_repeats"]
            else:
                thetas, reps = [res["estimate"]], 1
            try:
                fil, smo = _trajectory(model, res["path"], thetas, p["particles"], cfg.seed, reps, run)
            except ModelBlowupError as exc:
                record["trajectory_status"] = f"blowup: {exc}"
                fil = smo = np.full_like(res["path"].states, np.nan)
        else:
            fil = smo = np.full_like(res["path"].states, np.nan)
        x = res["path"].states
        n_state = x.shape[1]
        rel = np.linalg.norm(smo - x, axis=1) / np.maximum(np.linalg.norm(x, axis=1), 1e-300)
        record["smoother_relative_error_mean"] = float(np.mean(rel))
        for t, xt, ft, st in zip(res["path"].times, x, fil, smo):
            traj_rows.append([run, t, *xt, *ft, *st])
        record["seconds"] = time.perf_counter() - t0
        runs.append(record)
    err_header = ["run", "iteration", "error"] + [f"theta_{i + 1}" for i in range(theta_dim)]
    traj_header = (["run", "t"] + [f"x_{i + 1}" for i in range(n_state)]
                   + [f"filter_{i + 1}" for i in range(n_state)] + [f"smooth_{i + 1}" for i in range(n_state)])
    est = np.array([r["estimate"] for r in runs])
    agg = {"estimate_mean": np.mean(est, axis=0), "estimate_std": np.std(est, axis=0)} if len(runs) else {}
    return err_header, error_rows, traj_header, traj_rows, runs, agg


def _bearings_cases(cfg):
    p = cfg.params
    m = models.bearings(theta=p["theta"], sigma=p["sigma"], eta=p["eta"], x0=p["x0"])
    return [({"repeat": r}, m, p["theta0"], p["iters"], 1) for r in range(p["repeats"])]


def _cubic_matrix_cases(cfg):
    p = cfg.params
    F = np.asarray(p["F"], dtype=float)
    d = p["d"]
    if F.shape != (d, d):
        raise ValueError("F must be d x d")
    cases = []
    for noise, r in itertools.product(p["noises"], range(p["repeats"])):
        m = models.cubic_matrix(d=d, F=F, sigma=noise, eta=noise, x0=p["x0"])
        cases.append(({"noise": noise, "repeat": r}, m, np.zeros(d * d), p["iters"], 1))
    return cases


def _cubic_scalar_cases(cfg):
    p = cfg.params
    dims, lams = list(p["dims"]), list(p["lams"])
    iters = p["iters"] if isinstance(p["iters"], (list, tuple)) else [p["iters"]] * len(dims)
    if not len(dims) == len(lams) == len(iters):
        raise ValueError("dims, lams and iters must have equal length")
    cases = []
    for (d, lam, it), sigma, r in itertools.product(zip(dims, lams, iters), p["sigmas"], range(p["repeats"])):
        m = models.cubic_tridiagonal(d=int(d), lam=lam, sigma=sigma, eta=p["eta"])
        cases.append(({"d": int(d), "lam": lam, "sigma": sigma, "repeat": r}, m, [0.0], int(it), 1))
    return cases


def _lorenz_cases(cfg):
    p = cfg.params
    m = models.lorenz96(d=p["d"], forcing=p["forcing"], sigma=p["sigma"], eta=p["eta"])
    return [({"repeat": r}, m, [p["theta0"]], p["iters"], p["truth_substeps"]) for r in range(p["repeats"])]


_DIFFUSION_CASES = {
    "bearings": _bearings_cases,
    "cubic-matrix": _cubic_matrix_cases,
    "cubic-scalar": _cubic_scalar_cases,
    "lorenz96": _lorenz_cases,
}


def run_experiment(cfg, dry_run=False):
    """Run one experiment and write its artifacts.  Returns the summary dict.

    With ``dry_run`` only the resolved config is returned; nothing is written.
    """
    if cfg.name not in DEFAULTS:
        raise ValueError(f"unknown experiment {cfg.name!r}; choose from {', '.join(EXPERIMENTS)}")
    if dry_run:
        return {"config": cfg.to_dict(), "dry_run": True}
    out = _prepare_out(cfg.out)
    t0 = time.perf_counter()
    if cfg.name.startswith("jump-"):
        parts = _run_jump(cfg, sparse=cfg.name == "jump-sparse-n20")
    else:
        parts = _run_diffusion(cfg, _DIFFUSION_CASES[cfg.name](cfg))
    err_header, err_rows, traj_header, traj_rows, runs, agg = parts
    write_csv(out / "errors.csv", err_header, err_rows)
    write_csv(out / "trajectory.csv", traj_header, traj_rows)
    summary = {"config": cfg.to_dict(), "runs": runs, **agg, "seconds": time.perf_counter() - t0}
    write_json(out / "summary.json", summary)
    return summary
