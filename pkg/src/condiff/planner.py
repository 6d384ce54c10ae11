"""Receding-horizon planning: constrained trajectory sampling, inverse
dynamics for action extraction, environment execution, and the metric suite.

Each environment step (optionally every k-th) samples a fresh trajectory
whose start state is pinned to the current state, with per-state obstacle
constraints and pairwise barrier-decay constraints rebuilt from the current
obstacle observation; the first transition's action comes from the inverse
dynamics model and is fed to the environment.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from ._validation import as_float_array, check_rng
from .constraints import (AxisBound, BallExterior, BallInterior, Barrier,
                          ConstraintSet, DcbfGroup, Halfspace, InfeasibleProjection,
                          PerStateGroup, Subspace)
from .envs import (DT, POSITION_DIMS, ConsistencyWarning, env_step, inverse_dynamics,
                   pair_consistency_defect, sample_start)
from .samplers import SamplerConfig

__all__ = [
    "EpisodeConfig",
    "PlanResult",
    "EpisodeMetrics",
    "plan",
    "run_episode",
    "benchmark",
    "BenchmarkResult",
    "save_trace",
]


@dataclass
class EpisodeConfig:
    """Knobs for one planning episode."""

    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    dcbf_alpha: float = 0.3
    episode_length: int = 40
    replan_every: int = 1
    pin_goal: bool = True
    obstacle_margin: float = 0.0
    barrier_cap: float = 1.0
    # the projected method enforces constraints only once abar_t >= this;
    # multiplier methods stay active through the whole chain so the dual
    # pressure can steer mode selection while states are still noisy
    projection_activation: float = 0.5
    track_distance: bool = False
    dt: float = DT

    def __post_init__(self):
        if self.episode_length < 0:
            raise ValueError("episode_length must be >= 0")
        if self.replan_every < 1:
            raise ValueError("replan_every must be >= 1")


@dataclass
class PlanResult:
    trajectory: np.ndarray  # (horizon+1, state_dim), original coordinates
    action: np.ndarray
    diagnostics: object
    dcbf_residual: float
    infeasible_start: bool = False
    projection_fallback: bool = False


@dataclass
class EpisodeMetrics:
    """Aggregates over one episode; all non-negative except reward."""

    planning_violations: float   # mean per plan of sum_states [g]_+
    impl_violations: float       # summed [g]_+ over executed states
    violation_rate: float        # % of executed steps with any raw g > 0
    distance_from_unconstrained: float
    reward: float
    per_step_time: float         # median seconds per diffusion step

    def as_dict(self):
        return {
            "planning_violations": self.planning_violations,
            "impl_violations": self.impl_violations,
            "violation_rate": self.violation_rate,
            "distance_from_unconstrained": self.distance_from_unconstrained,
            "reward": self.reward,
            "per_step_time": self.per_step_time,
        }

    FIELDS = ("planning_violations", "impl_violations", "violation_rate",
              "distance_from_unconstrained", "reward", "per_step_time")


def _inflate(constraint, margin):
    """Grow an obstacle constraint's unsafe region by a safety margin."""
    if margin == 0.0:
        return constraint
    if isinstance(constraint, Subspace):
        return Subspace(_inflate(constraint.inner, margin), constraint.dims)
    if isinstance(constraint, BallExterior):
        return BallExterior(constraint.center, constraint.radius + margin)
    if isinstance(constraint, BallInterior):
        if constraint.radius <= margin:
            raise ValueError("margin swallows the feasible ball")
        return BallInterior(constraint.center, constraint.radius - margin)
    if isinstance(constraint, Halfspace):
        return Halfspace(constraint.a, constraint.b - margin * np.linalg.norm(constraint.a))
    if isinstance(constraint, AxisBound):
        delta = -margin if constraint.side == "upper" else margin
        return AxisBound(constraint.axis, constraint.bound + delta, constraint.side)
    raise ValueError(f"cannot inflate constraints of type {type(constraint).__name__}")


def build_plan_constraints(obstacles, n_states, alpha, margin=0.0, smoothing="raw",
                           barrier_cap=1.0, activation=0.0):
    """Per-state obstacle constraints plus barrier-decay pairs, on positions.

    ``obstacles`` are 2D point constraints (g <= 0 safe); each contributes
    one broadcast group over all states and one pairwise barrier group. The
    pairwise barriers are saturated at ``barrier_cap`` so far-away states do
    not propagate large decay floors down the chain. All groups activate
    once the chain's noise level satisfies abar_t >= ``activation``:
    constraints between noise-dominated states are meaningless, and the
    backward reading of the pairwise decay squeezes earlier states against
    any state that lands on the boundary.
    """
    groups = []
    lifted = [Subspace(_inflate(c, margin), POSITION_DIMS) for c in obstacles]
    for c in lifted:
        groups.append(PerStateGroup(c, n_states=n_states, smoothing=smoothing,
                                    activation_abar=activation))
    for c in lifted:
        barrier = Barrier.from_constraint(c)
        if barrier_cap is not None:
            barrier = barrier.saturate(barrier_cap)
        groups.append(DcbfGroup(barrier, alpha, n_states, smoothing=smoothing,
                                activation_abar=activation))
    return ConstraintSet(groups)


def plan(current_state, obstacles, goal, model, config, rng, dual=None, idm=None):
    """Sample one constraint-satisfying trajectory from the current state.

    The model denoises position trajectories (state_dim 2); velocities are
    derived by differencing, which makes the executed step land exactly on
    the planned next position under the double-integrator inverse dynamics.
    The current momentum enters as a pinned position pair: slot 0 holds the
    virtual previous position p0 - v0 dt, slot 1 the current position (and,
    with ``pin_goal``, the final slot holds the goal). The returned
    trajectory drops the virtual slot, so it starts at the current state and
    the action is the inverse dynamics of its first transition. Projection
    infeasibility falls back to the best iterate with a flag.
    """
    current = as_float_array(current_state, ndim=1, name="current_state")
    rng = check_rng(rng)
    if model.state_dim_ != 2:
        raise ValueError("plan expects a model fitted on position trajectories")
    n_slots = model.horizon_ + 1
    # hinge keeps feasible states untouched; the sigmoid surrogate's gradient
    # reverses sign on strongly feasible states and destabilizes long chains
    soft = config.sampler.method in ("primal_dual", "alm")
    smoothing = "hinge" if soft else "raw"
    activation = 0.0 if soft else config.projection_activation
    cset = build_plan_constraints(obstacles, n_slots, config.dcbf_alpha,
                                  margin=config.obstacle_margin, smoothing=smoothing,
                                  barrier_cap=config.barrier_cap,
                                  activation=activation)

    true_set = build_plan_constraints(obstacles, n_slots, config.dcbf_alpha,
                                      barrier_cap=config.barrier_cap)
    infeasible_start = bool(np.any(np.array(
        [c.value(current[None, list(POSITION_DIMS)])[0] for c in obstacles]) > 0.0))

    previous = current[:2] - current[2:] * config.dt
    pin_idx = [0, 1, 2, 3]
    pin_vals = list(previous) + list(current[:2])
    # the goal is pinned clean: a noised goal can land near an obstacle and
    # the pairwise decay chain, read backward, then squeezes every earlier
    # state into a thin shell around the boundary
    pin_noised = [True, True, True, True]
    if config.pin_goal:
        base = model.horizon_ * 2
        pin_idx += [base, base + 1]
        pin_vals += list(goal)
        pin_noised += [False, False]
    pin = (np.array(pin_idx), np.array(pin_vals))

    # interleaved pair/state corrections settle ~1e-8 above the boundary on
    # chained barrier sets; margins dwarf that, so relax the chain tolerance
    sampler = replace(config.sampler,
                      projection_tol=max(config.sampler.projection_tol, 1e-6))
    fallback = False
    try:
        samples, dual, diagnostics = model.sample(
            n_samples=1, constraints=cset, random_state=rng,
            sampler_config=sampler, pin=pin, pin_noised=pin_noised,
            dual=dual, return_diagnostics=True)
        slots = samples[0].reshape(n_slots, 2)
    except InfeasibleProjection as err:
        fallback = True
        flat = model.to_original(err.best[0])
        flat[pin[0]] = pin[1]
        slots = flat.reshape(n_slots, 2)
        diagnostics = None

    residual = -np.inf
    for group in true_set.groups:
        if isinstance(group, DcbfGroup):
            residual = max(residual, float(group.raw_values(slots.reshape(1, -1)).max()))

    positions = slots[1:]
    velocities = np.empty_like(positions)
    velocities[0] = current[2:]
    velocities[1:] = np.diff(positions, axis=0) / config.dt
    traj = np.hstack([positions, velocities])

    if idm is not None:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", ConsistencyWarning)
            action = inverse_dynamics(idm, traj[0], traj[1])
    else:
        action = (traj[1, 2:] - traj[0, 2:]) / config.dt
    result = PlanResult(trajectory=traj, action=action, diagnostics=diagnostics,
                        dcbf_residual=residual, infeasible_start=infeasible_start,
                        projection_fallback=fallback)
    return result, dual


def _plan_hinge_total(trajectory, obstacles):
    """Summed positive-part violations of a planned trajectory vs a snapshot."""
    pos = trajectory[:, list(POSITION_DIMS)]
    total = 0.0
    for c in obstacles:
        total += float(np.maximum(c.value(pos), 0.0).sum())
    return total


def run_episode(arena, model, idm, config, rng, start=None):
    """Plan/act/step loop over one episode; returns (EpisodeMetrics, trace).

    Metrics are measured against the true (unInflated) obstacle snapshots at
    the times states are realized. ``track_distance`` additionally runs a
    shared-seed unconstrained plan per replan and records the mean per-state
    position distance between the two plans.
    """
    rng = check_rng(rng)
    state = start if start is not None else sample_start(arena, rng,
                                                         margin=config.obstacle_margin)
    dual = None
    trace = []
    plan_hinges = []
    distances = []
    step_times = []
    impl_hinge = 0.0
    violated_steps = 0
    reward = 0.0
    result = None
    plan_offset = 0

    for tau in range(config.episode_length):
        if tau % config.replan_every == 0 or result is None:
            seed = int(rng.integers(2 ** 62))
            obstacles = arena.obstacles_at(tau)
            result, dual = plan(state.as_vector(), obstacles, arena.goal, model,
                                config, np.random.default_rng(seed), dual=dual, idm=idm)
            plan_offset = 0
            plan_hinges.append(_plan_hinge_total(result.trajectory, obstacles))
            if result.diagnostics is not None:
                step_times.append(result.diagnostics.median_step_time())
            if config.track_distance:
                unconstrained = EpisodeConfig(
                    sampler=SamplerConfig(method="unconstrained"),
                    dcbf_alpha=config.dcbf_alpha, episode_length=config.episode_length,
                    replan_every=config.replan_every, pin_goal=config.pin_goal,
                    dt=config.dt)
                ref, _ = plan(state.as_vector(), [], arena.goal, model, unconstrained,
                              np.random.default_rng(seed))
                diff = result.trajectory[:, list(POSITION_DIMS)] - \
                    ref.trajectory[:, list(POSITION_DIMS)]
                distances.append(float(np.linalg.norm(diff, axis=1).mean()))

        k = min(plan_offset, result.trajectory.shape[0] - 2)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", ConsistencyWarning)
            u = inverse_dynamics(idm, result.trajectory[k], result.trajectory[k + 1])
        defect = pair_consistency_defect(result.trajectory[k], result.trajectory[k + 1],
                                         dt=config.dt)
        state = env_step(state, u, arena, dt=config.dt)
        plan_offset += 1

        snapshot = arena.obstacles_at(tau + 1)
        pos = state.position[None, :]
        raws = np.array([c.value(pos)[0] for c in snapshot]) if snapshot else np.zeros(0)
        step_hinge = float(np.maximum(raws, 0.0).sum())
        impl_hinge += step_hinge
        if np.any(raws > 0.0):
            violated_steps += 1
        reward -= float(np.linalg.norm(state.position - arena.goal))
        trace.append({
            "tau": tau,
            "state": state.as_vector().tolist(),
            "action": u.tolist(),
            "consistency_defect": defect,
            "step_hinge": step_hinge,
            "plan_dcbf_residual": result.dcbf_residual,
            "plan_hinge": plan_hinges[-1],
            "projection_fallback": result.projection_fallback,
            "infeasible_start": result.infeasible_start,
            "replanned": plan_offset == 1,
        })

    n = config.episode_length
    metrics = EpisodeMetrics(
        planning_violations=float(np.mean(plan_hinges)) if plan_hinges else 0.0,
        impl_violations=impl_hinge,
        violation_rate=100.0 * violated_steps / n if n else 0.0,
        distance_from_unconstrained=float(np.mean(distances)) if distances else float("nan"),
        reward=reward,
        per_step_time=float(np.median(step_times)) if step_times else 0.0,
    )
    return metrics, trace


def save_trace(trace, path):
    """One JSON record per executed environment step."""
    with open(path, "w") as fh:
        for row in trace:
            fh.write(json.dumps(row) + "\n")


# ---------------------------------------------------------------------------
# Benchmarks
# ---------------------------------------------------------------------------

@dataclass
class BenchmarkResult:
    """Per-seed metric rows plus mean/standard-error aggregation."""

    rows: list  # dicts: env, method, seed, metric values

    def cells(self):
        """(env, method) -> {metric: (mean, se or None)}."""
        out = {}
        keys = sorted({(r["env"], r["method"]) for r in self.rows})
        for env, method in keys:
            values = [r for r in self.rows
                      if r["env"] == env and r["method"] == method]
            stats = {}
            for metric in EpisodeMetrics.FIELDS:
                data = np.array([v[metric] for v in values], dtype=float)
                mean = float(np.mean(data))
                se = float(np.std(data, ddof=1) / np.sqrt(len(data))) if len(data) > 1 else None
                stats[metric] = (mean, se)
            out[(env, method)] = stats
        return out

    def to_csv(self, path):
        import csv
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["env", "method", "seed", *EpisodeMetrics.FIELDS])
            for row in sorted(self.rows, key=lambda r: (r["env"], r["method"], r["seed"])):
                writer.writerow([row["env"], row["method"], row["seed"],
                                 *[row[m] for m in EpisodeMetrics.FIELDS]])

    def format_table(self):
        cells = self.cells()
        headers = ["env", "method", *EpisodeMetrics.FIELDS]
        lines = []
        for (env, method), stats in cells.items():
            row = [env, method]
            for metric in EpisodeMetrics.FIELDS:
                mean, se = stats[metric]
                row.append(f"{mean:.4f} ± {se:.4f}" if se is not None else f"{mean:.4f} ± -")
            lines.append(row)
        widths = [max(len(h), *(len(r[i]) for r in lines)) if lines else len(h)
                  for i, h in enumerate(headers)]
        def fmt(row):
            return "  ".join(s.ljust(w) for s, w in zip(row, widths))
        return "\n".join([fmt(headers)] + [fmt(r) for r in lines])


def benchmark(model, idm, arenas, methods, seeds, config=None, out_dir=None,
              episode_runner=None):
    """Run every (arena, method, seed) cell and aggregate mean ± standard error.

    ``arenas`` maps names to Arena objects (or callables returning one);
    ``seeds`` is an iterable of integers. Returns a BenchmarkResult; per-seed
    traces are written to ``out_dir`` when given.
    """
    config = config or EpisodeConfig()
    runner = episode_runner or run_episode
    rows = []
    for env_name in sorted(arenas):
        arena_spec = arenas[env_name]
        for method in methods:
            for seed in seeds:
                arena = arena_spec() if callable(arena_spec) else arena_spec
                cell_cfg = EpisodeConfig(
                    sampler=SamplerConfig(
                        method=method, expectation=config.sampler.expectation,
                        eta_lambda=config.sampler.eta_lambda, rho0=config.sampler.rho0,
                        penalty_growth=config.sampler.penalty_growth,
                        rho_cap=config.sampler.rho_cap,
                        reset_duals=config.sampler.reset_duals),
                    dcbf_alpha=config.dcbf_alpha,
                    episode_length=config.episode_length,
                    replan_every=config.replan_every, pin_goal=config.pin_goal,
                    obstacle_margin=config.obstacle_margin,
                    track_distance=config.track_distance, dt=config.dt)
                metrics, trace = runner(arena, model, idm, cell_cfg,
                                        np.random.default_rng(seed))
                row = {"env": env_name, "method": method, "seed": seed,
                       **metrics.as_dict()}
                rows.append(row)
                if out_dir is not None:
                    out = Path(out_dir)
                    out.mkdir(parents=True, exist_ok=True)
                    save_trace(trace, out / f"trace_{env_name}_{method}_{seed}.jsonl")
    return BenchmarkResult(rows=rows)
