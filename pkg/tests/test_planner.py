import json

import numpy as np
import pytest

from condiff.constraints import BallExterior, Halfspace
from condiff.envs import DoubleIntegratorIdm, PointMassState, make_corridor_arena
from condiff.estimators import TrajectoryDiffusionModel
from condiff.planner import (BenchmarkResult, EpisodeConfig, EpisodeMetrics,
                             benchmark, build_plan_constraints, plan,
                             run_episode, save_trace)
from condiff.samplers import SamplerConfig


@pytest.fixture(scope="module")
def tiny_model():
    """A small position-trajectory model; quality only needs to be plausible."""
    from condiff.envs import generate_expert_data
    arena = make_corridor_arena(include_obstacle=False)
    ds = generate_expert_data(arena, 400, 64, np.random.default_rng(0))
    model = TrajectoryDiffusionModel(beta_max=0.2, hidden_dims=(96, 96), epochs=80,
                                     batch_size=128, learning_rate=2e-3,
                                     parametrization="denoiser", random_state=7)
    model.fit(ds.trajectories[:, :, :2])
    return model


def episode_config(method, **kw):
    sampler_kwargs = {}
    for key in ("eta_lambda", "rho0", "penalty_growth", "rho_cap", "reset_duals"):
        if key in kw:
            sampler_kwargs[key] = kw.pop(key)
    return EpisodeConfig(sampler=SamplerConfig(method=method, **sampler_kwargs), **kw)


def test_plan_pins_start_state(tiny_model):
    arena = make_corridor_arena()
    state = np.array([-1.2, 0.1, 0.3, -0.2])
    result, _ = plan(state, arena.obstacles, arena.goal, tiny_model,
                     episode_config("unconstrained"), np.random.default_rng(0))
    assert np.allclose(result.trajectory[0], state, atol=1e-9)
    assert result.trajectory.shape == (tiny_model.horizon_, 4)


def test_plan_projected_zero_planning_violations(tiny_model):
    arena = make_corridor_arena()
    rng = np.random.default_rng(1)
    from condiff.envs import sample_start
    state = sample_start(arena, rng, margin=0.05)
    result, _ = plan(state.as_vector(), arena.obstacles, arena.goal, tiny_model,
                     episode_config("projected", obstacle_margin=0.05),
                     np.random.default_rng(2))
    for c in arena.obstacles:
        assert np.all(c.value(result.trajectory[:, :2]) <= 1e-9)
    assert not result.infeasible_start


def test_plan_flags_infeasible_start(tiny_model):
    arena = make_corridor_arena()
    inside = np.array([0.0, 0.5, 0.0, 0.0])  # at the obstacle center
    result, _ = plan(inside, arena.obstacles, arena.goal, tiny_model,
                     episode_config("unconstrained"), np.random.default_rng(0))
    assert result.infeasible_start


def test_plan_unconstrained_tracks_straight_line_family(tiny_model):
    # with no obstacles the plan stays near the expert family; distance to
    # the start->goal chord bounded by the lane geometry
    arena = make_corridor_arena(include_obstacle=False)
    state = np.array([-1.3, 0.0, 0.0, 0.0])
    result, _ = plan(state, [], arena.goal, tiny_model,
                     episode_config("unconstrained"), np.random.default_rng(3))
    traj = result.trajectory[:, :2]
    s, g = traj[0], arena.goal
    dn = (g - s) / np.linalg.norm(g - s)
    rel = traj - s
    perp = np.abs(rel[:, 0] * dn[1] - rel[:, 1] * dn[0])
    assert perp.mean() <= 0.75  # inside the lane envelope


def test_projection_fallback_produces_flagged_plan(tiny_model):
    # contradictory halfspaces are unsatisfiable; the plan must fall back
    arena = make_corridor_arena(include_obstacle=False)
    impossible = [Halfspace(np.array([1.0, 0.0]), -10.0),
                  Halfspace(np.array([-1.0, 0.0]), -10.0)]
    state = np.array([-1.2, 0.0, 0.0, 0.0])
    result, _ = plan(state, impossible, arena.goal, tiny_model,
                     episode_config("projected"), np.random.default_rng(0))
    assert result.projection_fallback
    assert np.allclose(result.trajectory[0], state, atol=1e-9)


def test_run_episode_zero_length(tiny_model):
    arena = make_corridor_arena()
    metrics, trace = run_episode(arena, tiny_model, DoubleIntegratorIdm(),
                                 episode_config("unconstrained", episode_length=0),
                                 np.random.default_rng(0))
    assert trace == []
    assert metrics.impl_violations == 0.0
    assert metrics.violation_rate == 0.0


def test_run_episode_metrics_match_trace_recount(tiny_model):
    arena = make_corridor_arena()
    config = episode_config("unconstrained", episode_length=12, replan_every=4)
    metrics, trace = run_episode(arena, tiny_model, DoubleIntegratorIdm(), config,
                                 np.random.default_rng(5))
    assert len(trace) == 12
    # independent recount from executed states
    violated = 0
    total = 0.0
    for row in trace:
        pos = np.asarray(row["state"])[None, :2]
        raw = np.array([c.value(pos)[0] for c in arena.obstacles_at(row["tau"] + 1)])
        total += float(np.maximum(raw, 0.0).sum())
        if np.any(raw > 0.0):
            violated += 1
    assert abs(metrics.impl_violations - total) <= 1e-12
    assert abs(metrics.violation_rate - 100.0 * violated / 12) <= 1e-12


def test_run_episode_executes_planned_positions_exactly(tiny_model):
    # derived velocities + analytic inverse dynamics land each env step
    # exactly on the planned next position
    arena = make_corridor_arena()
    config = episode_config("projected", episode_length=6, replan_every=6,
                            obstacle_margin=0.05)
    rng = np.random.default_rng(11)
    from condiff.envs import sample_start, env_step, inverse_dynamics
    start = sample_start(arena, rng, margin=0.05)
    result, _ = plan(start.as_vector(), arena.obstacles, arena.goal, tiny_model,
                     config, np.random.default_rng(3))
    state = start
    for k in range(5):
        u = (result.trajectory[k + 1, 2:] - state.velocity) / 0.1
        state = env_step(state, u, arena)
        assert np.allclose(state.position, result.trajectory[k + 1, :2], atol=1e-9)


def test_track_distance_metric(tiny_model):
    arena = make_corridor_arena()
    config = episode_config("projected", episode_length=4, replan_every=4,
                            obstacle_margin=0.05, track_distance=True)
    metrics, _ = run_episode(arena, tiny_model, DoubleIntegratorIdm(), config,
                             np.random.default_rng(2))
    assert np.isfinite(metrics.distance_from_unconstrained)
    assert metrics.distance_from_unconstrained >= 0.0


def test_build_plan_constraints_counts():
    obstacles = [BallExterior(np.zeros(2), 0.5), Halfspace(np.array([0.0, 1.0]), 1.0)]
    cset = build_plan_constraints(obstacles, n_states=10, alpha=0.4)
    # one broadcast group (10 scalars) and one pair group (9) per obstacle
    assert cset.n_constraints == 2 * 10 + 2 * 9


def test_benchmark_aggregation_and_csv(tmp_path, tiny_model):
    arena = make_corridor_arena()
    result = benchmark(tiny_model, DoubleIntegratorIdm(),
                       {"corridor": arena}, ["unconstrained"], seeds=[0, 1, 2],
                       config=episode_config("unconstrained", episode_length=4,
                                             replan_every=4),
                       out_dir=tmp_path)
    assert len(result.rows) == 3
    cells = result.cells()
    stats = cells[("corridor", "unconstrained")]
    data = np.array([r["violation_rate"] for r in result.rows])
    mean, se = stats["violation_rate"]
    assert abs(mean - data.mean()) <= 1e-12
    assert abs(se - data.std(ddof=1) / np.sqrt(3)) <= 1e-12
    csv_path = tmp_path / "bench.csv"
    result.to_csv(csv_path)
    lines = csv_path.read_text().splitlines()
    assert len(lines) == 4
    assert (tmp_path / "trace_corridor_unconstrained_0.jsonl").exists()
    table = result.format_table()
    assert "corridor" in table and "±" in table


def test_benchmark_single_seed_has_no_se(tiny_model):
    arena = make_corridor_arena()
    result = benchmark(tiny_model, DoubleIntegratorIdm(), {"corridor": arena},
                       ["unconstrained"], seeds=[7],
                       config=episode_config("unconstrained", episode_length=2))
    stats = result.cells()[("corridor", "unconstrained")]
    assert stats["violation_rate"][1] is None
    assert "± -" in result.format_table()


def test_save_trace_round_trip(tmp_path):
    trace = [{"tau": 0, "state": [0.0, 0.0, 0.0, 0.0], "action": [0.1, 0.0],
              "step_hinge": 0.0}]
    path = tmp_path / "trace.jsonl"
    save_trace(trace, path)
    loaded = [json.loads(line) for line in path.read_text().splitlines()]
    assert loaded == trace


def test_episode_config_validation():
    with pytest.raises(ValueError):
        EpisodeConfig(episode_length=-1)
    with pytest.raises(ValueError):
        EpisodeConfig(replan_every=0)
