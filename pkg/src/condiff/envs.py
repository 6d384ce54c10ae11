"""Desk-scale 2D point-mass environments, expert data, and inverse dynamics.

States are [px, py, vx, vy]; the dynamics are a semi-implicit double
integrator v' = v + u dt, p' = p + v' dt, clamped to arena bounds. Arenas
carry obstacle constraints in g <= 0 form (feasible means safe) and an
optional motion table for one moving obstacle.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ._validation import as_float_array, check_finite, check_rng
from .constraints import BallExterior, Halfspace, Subspace, _point_constraint_from_spec
from .data import ExpertDataset

__all__ = [
    "PointMassState",
    "Arena",
    "ConsistencyWarning",
    "DoubleIntegratorIdm",
    "env_step",
    "inverse_dynamics",
    "generate_expert_data",
    "observe_obstacle",
    "sample_start",
    "make_corridor_arena",
    "make_moving_obstacle_arena",
    "save_arena",
    "load_arena",
]

DT = 0.1
STATE_DIM = 4
POSITION_DIMS = (0, 1)


class ConsistencyWarning(UserWarning):
    """A state pair's position increment disagrees with its velocity channel."""


@dataclass
class PointMassState:
    position: np.ndarray
    velocity: np.ndarray
    contact: bool = False

    def __post_init__(self):
        self.position = as_float_array(self.position, ndim=1, name="position")
        self.velocity = as_float_array(self.velocity, ndim=1, name="velocity")
        if self.position.shape != (2,) or self.velocity.shape != (2,):
            raise ValueError("position and velocity must be 2-vectors")

    def as_vector(self):
        return np.concatenate([self.position, self.velocity])

    @classmethod
    def from_vector(cls, vec):
        vec = as_float_array(vec, ndim=1, name="state")
        if vec.shape != (STATE_DIM,):
            raise ValueError(f"state vector must have length {STATE_DIM}")
        return cls(position=vec[:2], velocity=vec[2:])


@dataclass
class Arena:
    """Axis-aligned arena with obstacles, a goal, and optional obstacle motion.

    ``motion_offsets`` displace the obstacle at ``moving_index`` per env step;
    entry tau is the displacement of that obstacle's center at time tau.
    """

    bounds_lo: np.ndarray
    bounds_hi: np.ndarray
    obstacles: list = field(default_factory=list)
    goal: np.ndarray = None
    motion_offsets: np.ndarray | None = None
    moving_index: int = 0
    start_lo: np.ndarray | None = None
    start_hi: np.ndarray | None = None

    def __post_init__(self):
        self.bounds_lo = as_float_array(self.bounds_lo, ndim=1)
        self.bounds_hi = as_float_array(self.bounds_hi, ndim=1)
        self.goal = as_float_array(self.goal, ndim=1, name="goal")
        if self.motion_offsets is not None:
            self.motion_offsets = as_float_array(self.motion_offsets, ndim=2)
        if self.start_lo is None:
            self.start_lo, self.start_hi = self.bounds_lo, self.bounds_hi
        else:
            self.start_lo = as_float_array(self.start_lo, ndim=1)
            self.start_hi = as_float_array(self.start_hi, ndim=1)
        for c in self.obstacles_at(0):
            if c.value(self.goal[None, :])[0] > 0.0:
                raise ValueError("goal must be strictly feasible")

    def obstacles_at(self, tau):
        """Snapshot of all obstacle constraints at env time tau."""
        if self.motion_offsets is None:
            return list(self.obstacles)
        out = list(self.obstacles)
        out[self.moving_index] = observe_obstacle(self, tau)
        return out

    def position_feasible(self, pos, tau=0, margin=0.0):
        pos = np.atleast_2d(as_float_array(pos))
        ok = np.ones(pos.shape[0], dtype=bool)
        for c in self.obstacles_at(tau):
            ok &= c.value(pos) <= -margin
        ok &= np.all(pos >= self.bounds_lo, axis=1) & np.all(pos <= self.bounds_hi, axis=1)
        return ok


def observe_obstacle(arena, tau):
    """The moving obstacle's constraint with its center at time tau.

    Only the current snapshot is exposed; no future positions. A static
    arena returns the same constraint for every tau.
    """
    base = arena.obstacles[arena.moving_index]
    if arena.motion_offsets is None:
        return base
    tau = int(tau)
    if tau < 0:
        raise ValueError("tau must be non-negative")
    idx = min(tau, arena.motion_offsets.shape[0] - 1)
    if not isinstance(base, BallExterior):
        raise ValueError("moving obstacles must be ball-exterior constraints")
    return BallExterior(base.center + arena.motion_offsets[idx], base.radius)


def env_step(state, u, arena, dt=DT):
    """Advance the double integrator one step, clamping position to bounds."""
    u = as_float_array(u, ndim=1, name="u")
    check_finite(u, "u")
    check_finite(state.position, "position")
    v = state.velocity + u * dt
    p = state.position + v * dt
    clamped = np.clip(p, arena.bounds_lo, arena.bounds_hi)
    contact = bool(np.any(clamped != p))
    return PointMassState(position=clamped, velocity=v, contact=contact)


class DoubleIntegratorIdm:
    """Exact inverse dynamics for the double integrator: u = (v' - v) / dt."""

    def __init__(self, dt=DT, consistency_tol=1e-6):
        self.dt = float(dt)
        self.consistency_tol = float(consistency_tol)

    def action(self, x, x_next):
        x = as_float_array(x, ndim=1)
        x_next = as_float_array(x_next, ndim=1)
        u = (x_next[2:] - x[2:]) / self.dt
        defect = np.linalg.norm(x_next[:2] - (x[:2] + x_next[2:] * self.dt))
        if defect > self.consistency_tol:
            warnings.warn(
                f"state pair position increment off by {defect:.3e}; "
                "action taken from the velocity channel", ConsistencyWarning,
                stacklevel=2)
        return u


def inverse_dynamics(model, x, x_next):
    """Action needed to move from state x to x_next under the given model."""
    return model.action(x, x_next)


def pair_consistency_defect(x, x_next, dt=DT):
    """Distance between the observed and velocity-implied position increments."""
    x = as_float_array(x, ndim=1)
    x_next = as_float_array(x_next, ndim=1)
    return float(np.linalg.norm(x_next[:2] - (x[:2] + x_next[2:] * dt)))


def sample_start(arena, rng, margin=0.0, max_speed=0.0):
    """Rejection-sample a feasible start; optionally with a random velocity."""
    rng = check_rng(rng)
    for _ in range(1000):
        pos = rng.uniform(arena.start_lo, arena.start_hi)
        if arena.position_feasible(pos, margin=margin)[0]:
            vel = np.zeros(2)
            if max_speed > 0.0:
                angle = rng.uniform(0.0, 2.0 * np.pi)
                speed = max_speed * np.sqrt(rng.uniform())
                vel = speed * np.array([np.cos(angle), np.sin(angle)])
            return PointMassState(position=pos, velocity=vel)
    raise RuntimeError("could not sample a feasible start in 1000 draws")


def generate_expert_data(arena, n_trajectories, horizon, rng, dt=DT, kp=2.0, kd=1.0,
                         goal_tol=0.1, max_retries=40, start_speed=1.2,
                         via_spread=0.12, lane_offset=0.45, north_fraction=0.72,
                         via_switch=0.35):
    """Roll out a waypoint-following PD controller to the goal.

    Starts are random feasible positions carrying a random initial velocity
    up to ``start_speed``. Each rollout first steers toward a via point
    midway to the goal whose lateral offset picks the north lane
    (+``lane_offset``) with probability ``north_fraction`` and the south
    lane otherwise, jittered by ±``via_spread``; with ``lane_offset=0`` the
    vias are unimodal around the centerline, and with both zero the experts
    head straight for the goal. Every emitted trajectory has exactly
    horizon+1 states, ends within ``goal_tol`` of the goal, and satisfies
    all obstacle constraints; rollouts that miss the goal or clip an
    obstacle are discarded and resampled, up to ``max_retries`` each.
    """
    if n_trajectories < 1:
        raise ValueError("n_trajectories must be >= 1")
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    rng = check_rng(rng)
    goal = arena.goal
    trajs = np.empty((n_trajectories, horizon + 1, STATE_DIM))
    for i in range(n_trajectories):
        for attempt in range(max_retries + 1):
            state = sample_start(arena, rng, max_speed=start_speed)
            lane = 0.0
            if lane_offset > 0.0:
                lane = lane_offset if rng.uniform() < north_fraction else -lane_offset
            via_y = lane + rng.uniform(-via_spread, via_spread)
            via = np.array([0.5 * (state.position[0] + goal[0]), via_y])
            target = via if (lane_offset > 0.0 or via_spread > 0.0) else goal
            states = [state.as_vector()]
            for _ in range(horizon):
                if target is via and np.linalg.norm(state.position - via) <= via_switch:
                    target = goal
                u = kp * (target - state.position) - kd * state.velocity
                state = env_step(state, u, arena, dt=dt)
                states.append(state.as_vector())
            traj = np.array(states)
            reached = np.linalg.norm(traj[-1, :2] - goal) <= goal_tol
            safe = bool(np.all(arena.position_feasible(traj[:, :2])))
            if reached and safe:
                trajs[i] = traj
                break
        else:
            raise RuntimeError(
                f"expert controller failed {max_retries + 1} times for trajectory {i}")
    return ExpertDataset.from_trajectories(trajs)


# ---------------------------------------------------------------------------
# Arena factories and files
# ---------------------------------------------------------------------------

def position_obstacles(constraints):
    """Lift 2D obstacle constraints onto the position block of a 4D state."""
    return [Subspace(c, POSITION_DIMS) for c in constraints]


def make_corridor_arena(obstacle_radius=0.5, obstacle_center=(0.0, 0.5),
                        include_obstacle=True):
    """Two-lane corridor with an optional disk obstacle covering the busy lane.

    Expert data (generated with ``include_obstacle=False``) splits between a
    dominant north lane and a sparser south lane; the added disk blocks the
    north lane completely while the south lane stays clear, so unconstrained
    plans mostly drive through the disk and constrained ones must select the
    other mode.
    """
    walls = [
        Halfspace(np.array([0.0, 1.0]), 1.0),    # y <= 1
        Halfspace(np.array([0.0, -1.0]), 1.0),   # y >= -1
        Halfspace(np.array([1.0, 0.0]), 2.4),    # x <= 2.4 (leaves room for overshoot)
    ]
    obstacles = list(walls)
    if include_obstacle:
        obstacles.append(BallExterior(np.asarray(obstacle_center, float), obstacle_radius))
    return Arena(
        bounds_lo=np.array([-2.5, -2.5]),
        bounds_hi=np.array([2.5, 2.5]),
        obstacles=obstacles,
        goal=np.array([1.4, 0.0]),
        start_lo=np.array([-1.6, -0.2]),
        start_hi=np.array([-1.0, 0.2]),
    )


def make_moving_obstacle_arena(episode_length=40, velocity=(-0.05, 0.0),
                               radius=0.5, start=(1.1, 0.45)):
    """Corridor with a disk obstacle drifting through the agent's lane.

    The default obstacle travels west along the busy north lane, head-on
    into the agent's route; agents only observe its current position.
    """
    arena = make_corridor_arena(include_obstacle=False)
    start = np.asarray(start, dtype=float)
    velocity = np.asarray(velocity, dtype=float)
    offsets = np.array([velocity * tau for tau in range(episode_length)])
    obstacles = [BallExterior(start, radius)] + list(arena.obstacles)
    return Arena(
        bounds_lo=arena.bounds_lo,
        bounds_hi=arena.bounds_hi,
        obstacles=obstacles,
        goal=arena.goal,
        motion_offsets=offsets,
        moving_index=0,
        start_lo=arena.start_lo,
        start_hi=arena.start_hi,
    )


def save_arena(arena, path):
    record = {
        "bounds_lo": arena.bounds_lo.tolist(),
        "bounds_hi": arena.bounds_hi.tolist(),
        "goal": arena.goal.tolist(),
        "obstacles": [c.to_spec() for c in arena.obstacles],
        "start_lo": arena.start_lo.tolist(),
        "start_hi": arena.start_hi.tolist(),
        "moving_index": arena.moving_index,
    }
    if arena.motion_offsets is not None:
        record["motion_offsets"] = arena.motion_offsets.tolist()
    Path(path).write_text(json.dumps(record, indent=2))


def load_arena(path):
    record = json.loads(Path(path).read_text())
    return Arena(
        bounds_lo=np.asarray(record["bounds_lo"], float),
        bounds_hi=np.asarray(record["bounds_hi"], float),
        obstacles=[_point_constraint_from_spec(s) for s in record["obstacles"]],
        goal=np.asarray(record["goal"], float),
        motion_offsets=(np.asarray(record["motion_offsets"], float)
                        if "motion_offsets" in record else None),
        moving_index=record.get("moving_index", 0),
        start_lo=np.asarray(record["start_lo"], float),
        start_hi=np.asarray(record["start_hi"], float),
    )
