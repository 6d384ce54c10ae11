"""Command-line surface: data generation, training, sampling, planning, benchmarks.

Every command is deterministic under ``--seed``. Options may come from a JSON
config file (``--config``); explicit flags win over config values. Exit codes:
0 success, 1 runtime failure, 2 configuration/validation failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .constraints import load_constraints
from .data import load_dataset, save_dataset
from .envs import (DoubleIntegratorIdm, generate_expert_data, load_arena,
                   make_corridor_arena, make_moving_obstacle_arena)
from .estimators import InverseDynamicsRegressor, TrajectoryDiffusionModel
from .planner import BenchmarkResult, EpisodeConfig, EpisodeMetrics, run_episode, save_trace
from .samplers import SamplerConfig, canonical_method, run_reverse_chain
from .schedules import build_schedule
from .scores import GaussianScore, GmmScore

METHOD_CHOICES = ("unconstrained", "projected", "pd", "alm")

ARENAS = {
    "corridor": make_corridor_arena,
    "corridor-free": lambda: make_corridor_arena(include_obstacle=False),
    "moving": make_moving_obstacle_arena,
}


class ConfigError(ValueError):
    """Invalid configuration; maps to exit code 2."""


def _resolve_arena(name_or_path):
    if name_or_path in ARENAS:
        return ARENAS[name_or_path]()
    path = Path(name_or_path)
    if not path.exists():
        raise ConfigError(f"arena {name_or_path!r} is neither a known name "
                          f"({', '.join(sorted(ARENAS))}) nor an existing file")
    return load_arena(path)


def _require_file(path, key):
    if path is None:
        raise ConfigError(f"missing required option: {key}")
    if not Path(path).exists():
        raise ConfigError(f"{key} file does not exist: {path}")
    return Path(path)


def _merge_config(args, parser):
    """Apply config-file values for options the user did not pass explicitly."""
    if getattr(args, "config", None) is None:
        return args
    path = _require_file(args.config, "--config")
    try:
        record = json.loads(path.read_text())
    except json.JSONDecodeError as err:
        raise ConfigError(f"--config {path} is not valid JSON: {err}") from err
    defaults = {a.dest: a.default for a in parser._actions}
    for key, value in record.items():
        dest = key.replace("-", "_")
        if not hasattr(args, dest):
            raise ConfigError(f"unknown config key: {key}")
        if getattr(args, dest) == defaults.get(dest):
            setattr(args, dest, value)
    return args


def _out_dir(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _parse_hidden(text):
    try:
        return tuple(int(p) for p in str(text).split(",") if p != "")
    except ValueError as err:
        raise ConfigError(f"--hidden must be comma-separated integers, got {text!r}") from err


def _make_idm(spec):
    if spec in (None, "analytic"):
        return DoubleIntegratorIdm()
    return InverseDynamicsRegressor.load(_require_file(spec, "--idm"))


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_gen_data(args):
    arena = _resolve_arena(args.arena)
    dataset = generate_expert_data(arena, args.n, args.horizon,
                                   np.random.default_rng(args.seed))
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    save_dataset(dataset, args.out)
    print(f"wrote {dataset.n_trajectories} trajectories "
          f"(horizon {dataset.horizon}) to {args.out}")
    return 0


def cmd_train_score(args):
    dataset = load_dataset(_require_file(args.dataset, "--dataset"))
    out = _out_dir(args)
    model = TrajectoryDiffusionModel(
        n_diffusion_steps=args.steps, beta_min=args.beta_min, beta_max=args.beta_max,
        hidden_dims=_parse_hidden(args.hidden), epochs=args.epochs,
        batch_size=args.batch_size, learning_rate=args.lr,
        validation_fraction=args.val_fraction, parametrization=args.parametrization,
        random_state=args.seed)
    # the planner denoises position trajectories; velocities come from the
    # inverse dynamics side
    trajs = dataset.trajectories if args.full_state else dataset.trajectories[:, :, :2]
    model.fit(trajs)
    model.save(out / "score_model.json")
    with open(out / "training_loss.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_loss", "val_loss"])
        for row in model.loss_history_:
            writer.writerow(row)
    print(f"wrote checkpoint and loss curve to {out}")
    return 0


def cmd_train_idm(args):
    dataset = load_dataset(_require_file(args.dataset, "--dataset"))
    out = _out_dir(args)
    trajs = dataset.trajectories
    pairs = np.concatenate([trajs[:, :-1, :], trajs[:, 1:, :]], axis=2)
    features = pairs.reshape(-1, 2 * dataset.state_dim)
    # double-integrator labels from the velocity channel
    actions = (trajs[:, 1:, 2:] - trajs[:, :-1, 2:]).reshape(-1, 2) / args.dt
    reg = InverseDynamicsRegressor(
        hidden_dims=_parse_hidden(args.hidden), epochs=args.epochs,
        batch_size=args.batch_size, learning_rate=args.lr, random_state=args.seed)
    reg.fit(features, actions)
    reg.save(out / "idm.json")
    with open(out / "idm_loss.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_loss"])
        for epoch, loss in enumerate(reg.loss_history_):
            writer.writerow([epoch, loss])
    print(f"wrote inverse-dynamics checkpoint to {out}")
    return 0


def _analytic_model(spec_path):
    record = json.loads(_require_file(spec_path, "--target").read_text())
    kind = record.get("kind")
    if kind == "gaussian":
        return GaussianScore(record["mean"], record["var"])
    if kind == "gmm":
        return GmmScore(record["weights"], record["means"], record["variances"])
    raise ConfigError(f"unknown analytic target kind: {kind!r}")


def cmd_sample(args):
    out = _out_dir(args)
    method = canonical_method(args.method)
    sampler = SamplerConfig(method=method, eta_lambda=args.eta_lambda,
                            rho0=args.rho0, penalty_growth=args.penalty_growth)
    rng = np.random.default_rng(args.seed)
    if (args.target is None) == (args.checkpoint is None):
        raise ConfigError("provide exactly one of --target (analytic) or --checkpoint")
    if args.target is not None:
        model = _analytic_model(args.target)
        schedule = build_schedule(args.steps, args.beta_min, args.beta_max)
        constraints = None
        if args.constraints is not None:
            constraints = load_constraints(_require_file(args.constraints, "--constraints"))
        batch, _, diagnostics = run_reverse_chain(
            sampler, model, schedule, constraints=constraints,
            n_particles=args.n, rng=rng)
        samples = batch.particles
    else:
        model = TrajectoryDiffusionModel.load(_require_file(args.checkpoint, "--checkpoint"))
        constraints = None
        if args.constraints is not None:
            constraints = load_constraints(
                _require_file(args.constraints, "--constraints"),
                n_states=model.horizon_ + 1)
        flat, _, diagnostics = model.sample(
            n_samples=args.n, constraints=constraints, random_state=rng,
            sampler_config=sampler, return_diagnostics=True)
        samples = flat.reshape(args.n, -1)
    np.savetxt(out / "samples.txt", samples, fmt="%.17g")
    diagnostics.to_csv(out / "diagnostics.csv")
    print(f"wrote {args.n} samples and diagnostics to {out}")
    return 0


def _episode_config(args, method):
    return EpisodeConfig(
        sampler=SamplerConfig(method=canonical_method(method),
                              reset_duals=args.reset_duals,
                              eta_lambda=args.eta_lambda, rho0=args.rho0,
                              penalty_growth=args.penalty_growth,
                              rho_cap=args.rho_cap),
        dcbf_alpha=args.alpha,
        episode_length=args.episode_length,
        replan_every=args.replan_every,
        obstacle_margin=args.margin,
        track_distance=args.track_distance,
    )


def cmd_plan(args):
    out = _out_dir(args)
    model = TrajectoryDiffusionModel.load(_require_file(args.checkpoint, "--checkpoint"))
    arena = _resolve_arena(args.arena)
    idm = _make_idm(args.idm)
    config = _episode_config(args, args.method)
    metrics, trace = run_episode(arena, model, idm, config,
                                 np.random.default_rng(args.seed))
    save_trace(trace, out / "trace.jsonl")
    (out / "metrics.json").write_text(json.dumps(metrics.as_dict(), indent=2))
    for key, value in metrics.as_dict().items():
        print(f"{key}: {value:.6g}")
    return 0


def _benchmark_cell(task):
    (env_name, arena_name, method, seed, checkpoint, idm_spec, cfg_kwargs) = task
    model = TrajectoryDiffusionModel.load(checkpoint)
    arena = _resolve_arena(arena_name)
    idm = _make_idm(idm_spec)
    config = EpisodeConfig(
        sampler=SamplerConfig(method=canonical_method(method),
                              reset_duals=cfg_kwargs["reset_duals"],
                              eta_lambda=cfg_kwargs["eta_lambda"],
                              rho0=cfg_kwargs["rho0"],
                              penalty_growth=cfg_kwargs["penalty_growth"],
                              rho_cap=cfg_kwargs["rho_cap"]),
        dcbf_alpha=cfg_kwargs["alpha"], episode_length=cfg_kwargs["episode_length"],
        replan_every=cfg_kwargs["replan_every"], obstacle_margin=cfg_kwargs["margin"],
        track_distance=cfg_kwargs["track_distance"])
    metrics, trace = run_episode(arena, model, idm, config, np.random.default_rng(seed))
    return {"env": env_name, "method": method, "seed": seed,
            **metrics.as_dict()}, trace


def cmd_benchmark(args):
    out = _out_dir(args)
    suite = json.loads(_require_file(args.suite, "--suite").read_text())
    environments = suite.get("environments", ["corridor"])
    methods = suite.get("methods", list(METHOD_CHOICES))
    seeds = args.seeds if args.seeds is not None else suite.get("seeds", 10)
    if isinstance(seeds, int):
        seeds = list(range(seeds))
    checkpoint = str(_require_file(args.checkpoint, "--checkpoint"))
    cfg_kwargs = {
        "alpha": suite.get("alpha", args.alpha),
        "episode_length": suite.get("episode_length", args.episode_length),
        "replan_every": suite.get("replan_every", args.replan_every),
        "margin": suite.get("margin", args.margin),
        "track_distance": suite.get("track_distance", args.track_distance),
        "reset_duals": suite.get("reset_duals", args.reset_duals),
        "eta_lambda": suite.get("eta_lambda", args.eta_lambda),
        "rho0": suite.get("rho0", args.rho0),
        "penalty_growth": suite.get("penalty_growth", args.penalty_growth),
        "rho_cap": suite.get("rho_cap", args.rho_cap),
    }
    tasks = [(env, env, method, seed, checkpoint, args.idm, cfg_kwargs)
             for env in environments for method in methods for seed in seeds]
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            outputs = list(pool.map(_benchmark_cell, tasks))
    else:
        outputs = [_benchmark_cell(t) for t in tasks]
    rows = []
    for (row, trace), task in zip(outputs, tasks):
        rows.append(row)
        save_trace(trace, out / f"trace_{row['env']}_{row['method']}_{row['seed']}.jsonl")
    rows.sort(key=lambda r: (r["env"], r["method"], r["seed"]))
    result = BenchmarkResult(rows=rows)
    result.to_csv(out / "benchmark.csv")
    table = result.format_table()
    (out / "benchmark.txt").write_text(table + "\n")
    print(table)
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def _add_common(sub):
    sub.add_argument("--config", default=None, help="JSON config file; flags override it")
    sub.add_argument("--seed", type=int, default=0, help="64-bit RNG seed")


def build_parser():
    parser = argparse.ArgumentParser(prog="condiff", description=__doc__)
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("gen-data", help="generate expert trajectories")
    _add_common(p)
    p.add_argument("--arena", default="corridor-free")
    p.add_argument("--n", type=int, default=200)
    p.add_argument("--horizon", type=int, default=64)
    p.add_argument("--out", required=True, help="dataset file to write")
    p.set_defaults(func=cmd_gen_data)

    p = subs.add_parser("train-score", help="train the trajectory score model")
    _add_common(p)
    p.add_argument("--dataset", default=None)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--epochs", type=int, default=250)
    p.add_argument("--batch-size", type=int, default=128)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--hidden", default="256,256")
    p.add_argument("--steps", type=int, default=100)
    p.add_argument("--beta-min", type=float, default=1e-4)
    p.add_argument("--beta-max", type=float, default=0.2)
    p.add_argument("--val-fraction", type=float, default=0.1)
    p.add_argument("--parametrization", choices=("noise", "denoiser"),
                   default="denoiser")
    p.add_argument("--full-state", action="store_true",
                   help="diffuse full states instead of positions only")
    p.set_defaults(func=cmd_train_score)

    p = subs.add_parser("train-idm", help="train the learned inverse dynamics model")
    _add_common(p)
    p.add_argument("--dataset", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--batch-size", type=int, default=256)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--hidden", default="32,32")
    p.add_argument("--dt", type=float, default=0.1)
    p.set_defaults(func=cmd_train_idm)

    p = subs.add_parser("sample", help="draw samples with a reverse chain")
    _add_common(p)
    p.add_argument("--method", choices=METHOD_CHOICES, default="unconstrained")
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--target", default=None, help="analytic target JSON file")
    p.add_argument("--checkpoint", default=None, help="trained score checkpoint")
    p.add_argument("--constraints", default=None, help="constraint description file")
    p.add_argument("--steps", type=int, default=100)
    p.add_argument("--beta-min", type=float, default=1e-4)
    p.add_argument("--beta-max", type=float, default=0.02)
    p.add_argument("--eta-lambda", type=float, default=None)
    p.add_argument("--rho0", type=float, default=1.0)
    p.add_argument("--penalty-growth", type=float, default=1.05)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sample)

    def add_episode_flags(p):
        p.add_argument("--method", choices=METHOD_CHOICES, default="projected")
        p.add_argument("--checkpoint", default=None)
        p.add_argument("--idm", default="analytic", help="'analytic' or an idm checkpoint")
        p.add_argument("--episode-length", type=int, default=40)
        p.add_argument("--replan-every", type=int, default=8)
        p.add_argument("--alpha", type=float, default=0.3)
        p.add_argument("--margin", type=float, default=0.06)
        p.add_argument("--eta-lambda", type=float, default=6.0)
        p.add_argument("--rho0", type=float, default=3.0)
        p.add_argument("--penalty-growth", type=float, default=1.03)
        p.add_argument("--rho-cap", type=float, default=50.0)
        p.add_argument("--track-distance", action="store_true")
        p.add_argument("--reset-duals", type=lambda s: s.lower() in ("1", "true", "yes"),
                       default=True)
        p.add_argument("--out", required=True)

    p = subs.add_parser("plan", help="run one planning episode")
    _add_common(p)
    p.add_argument("--arena", default="corridor")
    add_episode_flags(p)
    p.set_defaults(func=cmd_plan)

    p = subs.add_parser("benchmark", help="run an episode suite and tabulate metrics")
    _add_common(p)
    p.add_argument("--suite", default=None, help="suite description JSON file")
    p.add_argument("--seeds", type=int, default=None, help="override suite seed count")
    p.add_argument("--jobs", type=int, default=1)
    add_episode_flags(p)
    p.set_defaults(func=cmd_benchmark)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    sub = next(a for a in parser._subparsers._group_actions[0].choices.values()
               if a.get_default("func") is args.func)
    try:
        args = _merge_config(args, sub)
        return args.func(args)
    except ConfigError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except Exception as err:  # noqa: BLE001 - runtime failures map to exit 1
        print(f"error: {type(err).__name__}: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
