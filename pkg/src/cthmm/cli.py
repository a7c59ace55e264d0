"""
Command-line interface.

Subcommands
-----------
simulate-jump    simulate a hidden jump chain and its observations
fit-jump         EM for the generator of a jump-process model
posterior-jump   smoothed state probabilities on the event-aligned grid
simulate-sde     simulate a hidden diffusion and its observations
fit-sde          Monte Carlo EM for the drift parameters of a diffusion
kalman           continuous-time Kalman smoother for a linear model
experiment       run one of the reproduction experiments

Symbols and states are 0-based everywhere.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")

# BLAS reads its thread count when numpy loads, so pin it before the import
if "--deterministic" in sys.argv:
    for _var in _THREAD_VARS:
        os.environ[_var] = "1"

import numpy as np

from . import diffusion, harness, jump, linear_gaussian, models
from . import io as cio
from ._rng import labeled
from .exceptions import ImpossibleEvidenceError, ModelBlowupError, SingularMatrixError

SDE_MODELS = {
    "bearings": models.bearings,
    "cubic-matrix": models.cubic_matrix,
    "cubic-scalar": models.cubic_tridiagonal,
    "lorenz96": models.lorenz96,
    "linear": models.linear,
}


def _load_config(path):
    if path is None:
        return {}
    cfg = cio.read_json(path)
    if not isinstance(cfg, dict):
        raise ValueError("config file must hold a JSON object")
    return cfg


def _pick(args, cfg, key, default=None):
    """CLI flag wins over the config file, which wins over ``default``."""
    val = getattr(args, key, None)
    if val is not None:
        return val
    return cfg.get(key, default)


def _sde_model(name, cfg):
    if name not in SDE_MODELS:
        raise ValueError(f"unknown model {name!r}; choose from {', '.join(SDE_MODELS)}")
    kwargs = dict(cfg.get("model_args", {}))
    return SDE_MODELS[name](**kwargs)


def _out_dir(args):
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# jump process commands
# ---------------------------------------------------------------------------


def cmd_simulate_jump(args):
    cfg = _load_config(args.config)
    model = cio.load_jump_model(_pick(args, cfg, "model"))
    T = float(_pick(args, cfg, "T", 10.0))
    seed = _pick(args, cfg, "seed", 0)
    out = _out_dir(args)
    hidden, obs = jump.simulate_jump_hmm(model, T, seed=labeled(seed, 0))
    if _pick(args, cfg, "obs_mode", "continuous") == "discrete":
        step = float(_pick(args, cfg, "dt", 1.0))
        times = np.arange(0.0, T + 1e-12, step)
        obs = jump.sample_discrete_observations(model, hidden, times, T, seed=labeled(seed, 1))
    cio.save_hidden_jump_path(out / "hidden.csv", *hidden)
    cio.save_jump_observations(out / "obs.csv", obs)
    print(f"wrote {out / 'hidden.csv'} and {out / 'obs.csv'} ({len(obs)} observations)")


def cmd_fit_jump(args):
    cfg = _load_config(args.config)
    model0 = cio.load_jump_model(_pick(args, cfg, "model"))
    mode = _pick(args, cfg, "obs_mode", "continuous")
    obs = cio.load_jump_observations(_pick(args, cfg, "obs"), float(_pick(args, cfg, "T")), mode)
    report = jump.fit_generator(
        model0, obs,
        max_iters=int(_pick(args, cfg, "iters", 200)),
        tol=float(_pick(args, cfg, "tol", 1e-6)),
        dt_max=float(_pick(args, cfg, "dt", 1e-2)),
    )
    out = _out_dir(args)
    cio.save_jump_fit(out / "fit.json", report)
    print(f"iterations {report.iterations_used}, converged {report.converged}; wrote {out / 'fit.json'}")


def cmd_posterior_jump(args):
    cfg = _load_config(args.config)
    model = cio.load_jump_model(_pick(args, cfg, "model"))
    mode = _pick(args, cfg, "obs_mode", "continuous")
    obs = cio.load_jump_observations(_pick(args, cfg, "obs"), float(_pick(args, cfg, "T")), mode)
    grid = jump.smooth(model, obs, dt_max=float(_pick(args, cfg, "dt", 1e-2)))
    out = _out_dir(args)
    cio.save_posterior(out / "posterior.csv", grid)
    print(f"log-likelihood {grid.loglik:.17g}; wrote {out / 'posterior.csv'}")


# ---------------------------------------------------------------------------
# diffusion commands
# ---------------------------------------------------------------------------


def cmd_simulate_sde(args):
    cfg = _load_config(args.config)
    model = _sde_model(_pick(args, cfg, "model"), cfg)
    T = float(_pick(args, cfg, "T", 1.0))
    dt = float(_pick(args, cfg, "dt", 0.01))
    seed = _pick(args, cfg, "seed", 0)
    path = models.euler_maruyama_simulate(model, T, dt, seed=labeled(seed, 0),
                                          substeps=int(_pick(args, cfg, "substeps", 1)))
    out = _out_dir(args)
    cio.save_hidden_path(out / "hidden.csv", path.times, path.states)
    if _pick(args, cfg, "obs_mode", "continuous") == "discrete":
        obs = models.sample_measurements(model, path, every=int(cfg.get("every", 1)),
                                         scale=cfg.get("scale"), seed=labeled(seed, 1))
        cio.save_discrete_observations(out / "obs.csv", obs)
    else:
        cio.save_increments(out / "obs.csv", path.observations)
    print(f"wrote {out / 'hidden.csv'} and {out / 'obs.csv'}")


def cmd_fit_sde(args):
    cfg = _load_config(args.config)
    model = _sde_model(_pick(args, cfg, "model"), cfg)
    mode = _pick(args, cfg, "obs_mode", "continuous")
    dt = _pick(args, cfg, "dt")
    if mode == "discrete":
        model = models.with_gaussian_measurements(model, cfg.get("scale"))
        obs = cio.load_diffusion_observations(_pick(args, cfg, "obs"), dt=float(dt),
                                              T=float(_pick(args, cfg, "T")), mode="discrete")
    else:
        obs = cio.load_diffusion_observations(_pick(args, cfg, "obs"), dt=None if dt is None else float(dt))
    theta0 = cfg.get("theta0")
    if theta0 is not None:
        model = model.with_theta(np.ravel(np.asarray(theta0, dtype=float), order="F"))
    seed = _pick(args, cfg, "seed", 0)
    N = int(_pick(args, cfg, "particles", 128))
    report = diffusion.fit_parameters(model, obs, N=N, iters=int(_pick(args, cfg, "iters", 100)),
                                      seed=labeled(seed, 0), update=cfg.get("update", "linear"))
    out = _out_dir(args)
    cio.save_diffusion_fit(out / "fit.json", report)
    if cfg.get("dump_ensemble"):
        ens = diffusion.run_smoother(model.with_theta(report.final), obs, N, seed=labeled(seed, 1))
        cio.save_ensemble(out / "ensemble.csv", ens)
    print(f"final theta {np.array2string(report.final, precision=6)}; wrote {out / 'fit.json'}")


def cmd_kalman(args):
    cfg = _load_config(args.config)
    F = np.asarray(cfg.get("F", [[0.0]]), dtype=float)
    n = F.shape[0]
    lin = linear_gaussian.LinearModel(
        F=F, H=np.asarray(cfg.get("H", np.eye(n)), dtype=float),
        sigma=float(cfg.get("sigma", 1.0)), eta=float(cfg.get("eta", 1.0)),
        mu0=np.asarray(cfg.get("mu0", np.zeros(n)), dtype=float),
        P0=np.asarray(cfg.get("P0", np.eye(n)), dtype=float),
    )
    dt = _pick(args, cfg, "dt")
    obs = cio.load_diffusion_observations(_pick(args, cfg, "obs"), dt=None if dt is None else float(dt))
    tr = linear_gaussian.kalman_smoother(lin, obs)
    out = _out_dir(args)
    cio.save_kalman(out / "kalman_filter.csv", tr.times, tr.mu_pi, tr.P_pi)
    cio.save_kalman(out / "kalman_smoother.csv", tr.times, tr.mu_rho, tr.P_rho)
    print(f"wrote {out / 'kalman_filter.csv'} and {out / 'kalman_smoother.csv'}")


# ---------------------------------------------------------------------------
# experiments
# ---------------------------------------------------------------------------


def cmd_experiment(args):
    cfg_file = _load_config(args.config)
    overrides = {"iters": args.iters, "repeats": args.repeats, "particles": args.particles,
                 "dt": args.dt, "tol": args.tol}
    defaults = harness.DEFAULTS.get(args.name, {})
    overrides = {k: v for k, v in overrides.items() if k in defaults}
    out = args.out or os.path.join("results", args.name)
    cfg = harness.resolve_config(args.name, out=out, seed=args.seed, config=cfg_file, **overrides)
    summary = harness.run_experiment(cfg, dry_run=args.dry_run)
    if args.dry_run:
        print(json.dumps(cio._jsonable(summary["config"]), indent=2))
        return
    for run in summary["runs"]:
        if "final_error" in run:
            print(f"run {run['run']}: error {run['initial_error']:.4g} -> {run['final_error']:.4g}"
                  f" after {run['iterations']} iterations")
        else:
            print(f"run {run['run']}: estimate {np.array2string(np.asarray(run['estimate']), precision=4)}"
                  f" ({run['status']})")
    if "estimate_mean" in summary:
        print(f"mean {np.array2string(np.asarray(summary['estimate_mean']), precision=4)}"
              f" std {np.array2string(np.asarray(summary['estimate_std']), precision=4)}")
    print(f"wrote {cfg.out}/errors.csv, trajectory.csv, summary.json")


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def _common(p):
    p.add_argument("--seed", type=int, default=None, help="master seed")
    p.add_argument("--out", default=None, help="output directory")
    p.add_argument("--config", default=None, help="JSON config; flags override its values")
    p.add_argument("--obs-mode", dest="obs_mode", choices=["continuous", "discrete"], default=None)
    p.add_argument("--particles", type=int, default=None, help="number of particles N")
    p.add_argument("--dt", type=float, default=None, help="grid step (sub-grid bound for jump models)")
    p.add_argument("--iters", type=int, default=None, help="EM iterations")
    p.add_argument("--tol", type=float, default=None, help="EM stopping tolerance (jump models)")
    p.add_argument("--dry-run", action="store_true", help="print the resolved config and exit")
    p.add_argument("--deterministic", action="store_true",
                   help="pin BLAS to one thread for byte-identical reruns")


def build_parser():
    parser = argparse.ArgumentParser(prog="cthmm", description="Continuous-time hidden Markov model EM toolkit.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate-jump", help="simulate a jump-process HMM")
    _common(p)
    p.add_argument("--model", help="model JSON")
    p.add_argument("--T", type=float, default=None)
    p.set_defaults(func=cmd_simulate_jump)

    for name, func, text in (("fit-jump", cmd_fit_jump, "EM for the generator"),
                             ("posterior-jump", cmd_posterior_jump, "smoothed state probabilities")):
        p = sub.add_parser(name, help=text)
        _common(p)
        p.add_argument("--model", help="model JSON (initial guess for fit-jump)")
        p.add_argument("--obs", help="observation CSV t,y")
        p.add_argument("--T", type=float, default=None, help="observation horizon")
        p.set_defaults(func=func)

    p = sub.add_parser("simulate-sde", help="simulate a hidden diffusion")
    _common(p)
    p.add_argument("--model", help=f"one of {', '.join(SDE_MODELS)}")
    p.add_argument("--T", type=float, default=None)
    p.add_argument("--substeps", type=int, default=None)
    p.set_defaults(func=cmd_simulate_sde)

    p = sub.add_parser("fit-sde", help="Monte Carlo EM for drift parameters")
    _common(p)
    p.add_argument("--model", help=f"one of {', '.join(SDE_MODELS)}")
    p.add_argument("--obs", help="observation CSV")
    p.add_argument("--T", type=float, default=None, help="horizon (discrete observations)")
    p.set_defaults(func=cmd_fit_sde)

    p = sub.add_parser("kalman", help="continuous-time Kalman smoother")
    _common(p)
    p.add_argument("--obs", help="increment CSV t,dy_1..")
    p.set_defaults(func=cmd_kalman)

    p = sub.add_parser("experiment", help="run a reproduction experiment")
    _common(p)
    p.add_argument("name", choices=harness.EXPERIMENTS)
    p.add_argument("--repeats", type=int, default=None)
    p.set_defaults(func=cmd_experiment)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.deterministic:
        for var in _THREAD_VARS:
            os.environ[var] = "1"
    if args.dry_run and args.command != "experiment":
        print(json.dumps({k: v for k, v in vars(args).items() if k != "func"}, indent=2))
        return 0
    try:
        args.func(args)
    except (ValueError, OSError, KeyError, ImpossibleEvidenceError, ModelBlowupError,
            SingularMatrixError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
