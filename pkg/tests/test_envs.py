import numpy as np
import pytest

from condiff.data import load_dataset, save_dataset
from condiff.envs import (ConsistencyWarning, DoubleIntegratorIdm, PointMassState,
                          env_step, generate_expert_data, inverse_dynamics,
                          load_arena, make_corridor_arena,
                          make_moving_obstacle_arena, observe_obstacle,
                          pair_consistency_defect, sample_start, save_arena)
from condiff.estimators import InverseDynamicsRegressor


def test_env_step_rest_is_fixed_point():
    arena = make_corridor_arena(include_obstacle=False)
    s = PointMassState(np.zeros(2), np.zeros(2))
    out = env_step(s, np.zeros(2), arena)
    assert np.allclose(out.position, 0.0)
    assert np.allclose(out.velocity, 0.0)
    assert not out.contact


def test_env_step_direct_integration():
    arena = make_corridor_arena(include_obstacle=False)
    s = PointMassState(np.zeros(2), np.zeros(2))
    out = env_step(s, np.array([1.0, 0.0]), arena, dt=0.1)
    assert np.allclose(out.velocity, [0.1, 0.0])
    assert np.allclose(out.position, [0.01, 0.0])


def test_env_step_matches_reintegration_oracle():
    arena = make_corridor_arena(include_obstacle=False)
    rng = np.random.default_rng(4)
    state = PointMassState(np.zeros(2), np.zeros(2))
    p, v = np.zeros(2), np.zeros(2)
    for _ in range(100):
        u = rng.uniform(-1, 1, size=2)
        state = env_step(state, u, arena, dt=0.1)
        v = v + u * 0.1
        p = np.clip(p + v * 0.1, arena.bounds_lo, arena.bounds_hi)
        assert np.allclose(state.position, p, atol=1e-12)
        assert np.allclose(state.velocity, v, atol=1e-12)


def test_env_step_clamps_and_flags_contact():
    arena = make_corridor_arena(include_obstacle=False)
    s = PointMassState(arena.bounds_hi - 0.01, np.array([5.0, 0.0]))
    out = env_step(s, np.zeros(2), arena)
    assert out.contact
    assert out.position[0] == arena.bounds_hi[0]


def test_env_step_rejects_non_finite():
    arena = make_corridor_arena(include_obstacle=False)
    s = PointMassState(np.zeros(2), np.zeros(2))
    with pytest.raises(FloatingPointError):
        env_step(s, np.array([np.nan, 0.0]), arena)


def test_idm_round_trips_env_step_exactly():
    arena = make_corridor_arena(include_obstacle=False)
    idm = DoubleIntegratorIdm(dt=0.1)
    rng = np.random.default_rng(0)
    for _ in range(50):
        s = PointMassState(rng.uniform(-1, 1, 2), rng.uniform(-1, 1, 2))
        u = rng.uniform(-2, 2, 2)
        nxt = env_step(s, u, arena, dt=0.1)
        got = inverse_dynamics(idm, s.as_vector(), nxt.as_vector())
        assert np.allclose(got, u, atol=1e-12)


def test_idm_zero_action_for_constant_velocity():
    idm = DoubleIntegratorIdm(dt=0.1)
    x = np.array([0.0, 0.0, 0.5, -0.5])
    x_next = np.array([0.05, -0.05, 0.5, -0.5])
    assert np.allclose(idm.action(x, x_next), [0.0, 0.0])


def test_idm_warns_on_inconsistent_pair():
    idm = DoubleIntegratorIdm(dt=0.1)
    x = np.array([0.0, 0.0, 0.0, 0.0])
    x_next = np.array([1.0, 0.0, 0.1, 0.0])  # position jumped way past v' dt
    with pytest.warns(ConsistencyWarning):
        u = idm.action(x, x_next)
    assert np.allclose(u, [1.0, 0.0])
    assert pair_consistency_defect(x, x_next, dt=0.1) > 0.9


def test_learned_idm_matches_analytic_labels():
    arena = make_corridor_arena(include_obstacle=False)
    rng = np.random.default_rng(5)
    n = 10_000
    pos = rng.uniform(-1.5, 1.5, size=(n, 2))
    vel = rng.uniform(-2, 2, size=(n, 2))
    act = rng.uniform(-2, 2, size=(n, 2))
    nxt = np.empty((n, 4))
    for i in range(n):
        out = env_step(PointMassState(pos[i], vel[i]), act[i], arena, dt=0.1)
        nxt[i] = out.as_vector()
    features = np.hstack([pos, vel, nxt])
    split = 9000
    reg = InverseDynamicsRegressor(hidden_dims=(32, 32), epochs=120,
                                   learning_rate=3e-3, random_state=0)
    reg.fit(features[:split], act[:split])
    pred = reg.predict(features[split:])
    mse = float(np.mean((pred - act[split:]) ** 2))
    assert mse <= 1e-3


def test_expert_data_shapes_feasibility_and_goal():
    arena = make_corridor_arena(include_obstacle=False)
    ds = generate_expert_data(arena, 100, 64, np.random.default_rng(1))
    assert ds.trajectories.shape == (100, 65, 4)
    pos = ds.trajectories[:, :, :2].reshape(-1, 2)
    assert bool(np.all(arena.position_feasible(pos)))
    final = np.linalg.norm(ds.trajectories[:, -1, :2] - arena.goal, axis=1)
    assert final.mean() <= 0.1


def test_expert_data_near_constant_from_goal_start():
    arena = make_corridor_arena(include_obstacle=False)
    arena.start_lo = arena.goal - 1e-6
    arena.start_hi = arena.goal + 1e-6
    ds = generate_expert_data(arena, 3, 30, np.random.default_rng(2),
                              start_speed=0.0, via_spread=0.0, lane_offset=0.0)
    steps = np.linalg.norm(np.diff(ds.trajectories[:, :, :2], axis=1), axis=2)
    assert steps.max() <= 0.05


def test_expert_data_deterministic_bytes(tmp_path):
    arena = make_corridor_arena(include_obstacle=False)
    a = generate_expert_data(arena, 5, 64, np.random.default_rng(7))
    b = generate_expert_data(arena, 5, 64, np.random.default_rng(7))
    pa, pb = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    save_dataset(a, pa)
    save_dataset(b, pb)
    assert pa.read_bytes() == pb.read_bytes()


def test_expert_data_validation():
    arena = make_corridor_arena(include_obstacle=False)
    with pytest.raises(ValueError):
        generate_expert_data(arena, 0, 10, np.random.default_rng(0))
    with pytest.raises(ValueError):
        generate_expert_data(arena, 1, 0, np.random.default_rng(0))


def test_dataset_file_round_trip(tmp_path):
    arena = make_corridor_arena(include_obstacle=False)
    ds = generate_expert_data(arena, 4, 64, np.random.default_rng(3))
    path = tmp_path / "data.jsonl"
    save_dataset(ds, path)
    loaded = load_dataset(path)
    assert np.array_equal(loaded.trajectories, ds.trajectories)
    assert np.array_equal(loaded.mean, ds.mean)
    assert np.array_equal(loaded.scale, ds.scale)


def test_dataset_normalization_stats():
    arena = make_corridor_arena(include_obstacle=False)
    ds = generate_expert_data(arena, 50, 64, np.random.default_rng(6))
    flat = ds.normalized_flat().reshape(-1, ds.horizon + 1, 4).reshape(-1, 4)
    assert np.all(np.abs(flat.mean(axis=0)) <= 0.05)
    assert np.all(np.abs(flat.std(axis=0) - 1.0) <= 0.05)


def test_observe_obstacle_static_and_moving():
    static = make_corridor_arena()
    snap0 = observe_obstacle(static, 0)
    snap9 = observe_obstacle(static, 9)
    assert snap0 is snap9

    moving = make_moving_obstacle_arena(episode_length=10, velocity=(0.1, 0.0))
    base = moving.obstacles[moving.moving_index]
    s3 = observe_obstacle(moving, 3)
    assert np.allclose(s3.center - base.center, [0.3, 0.0])
    # snapshot sequence equals the motion table entry by entry
    for tau in range(10):
        snap = observe_obstacle(moving, tau)
        assert np.allclose(snap.center, base.center + moving.motion_offsets[tau])
    # beyond the table the obstacle holds its last position
    last = observe_obstacle(moving, 50)
    assert np.allclose(last.center, base.center + moving.motion_offsets[-1])


def test_arena_file_round_trip(tmp_path):
    arena = make_moving_obstacle_arena(episode_length=6)
    path = tmp_path / "arena.json"
    save_arena(arena, path)
    loaded = load_arena(path)
    assert np.array_equal(loaded.goal, arena.goal)
    assert np.array_equal(loaded.motion_offsets, arena.motion_offsets)
    assert len(loaded.obstacles) == len(arena.obstacles)
    pos = np.array([[0.3, -0.9]])
    for a, b in zip(loaded.obstacles, arena.obstacles):
        assert np.allclose(a.value(pos), b.value(pos))


def test_goal_must_be_feasible():
    from condiff.constraints import BallExterior
    from condiff.envs import Arena
    with pytest.raises(ValueError):
        Arena(bounds_lo=np.array([-1.0, -1.0]), bounds_hi=np.array([1.0, 1.0]),
              obstacles=[BallExterior(np.array([0.5, 0.0]), 0.3)],
              goal=np.array([0.5, 0.0]))


def test_sample_start_respects_margin():
    arena = make_corridor_arena()
    rng = np.random.default_rng(0)
    for _ in range(20):
        s = sample_start(arena, rng, margin=0.1)
        assert bool(arena.position_feasible(s.position, margin=0.1)[0])
