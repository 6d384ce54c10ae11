"""Constrained reverse-diffusion sampling and barrier-safe trajectory planning.

Layers, bottom to top: a numpy MLP micro-framework (``nn``), noise schedules
and score models (``schedules``, ``scores``), differentiable constraints with
projections and discrete-barrier trajectory constraints (``constraints``),
the constrained reverse samplers (``samplers``), 2D point-mass environments
(``envs``), the online planning loop and benchmark harness (``planner``),
sklearn-style estimator facades (``estimators``), and a CLI (``cli``).
"""

from .constraints import (AxisBound, BallExterior, BallInterior, Barrier,
                          ConstraintSet, CustomConstraint, Halfspace,
                          InfeasibleProjection, Subspace,
                          dcbf_satisfied, dcbf_trajectory_constraints)
from .data import ExpertDataset, load_dataset, save_dataset
from .envs import (Arena, DoubleIntegratorIdm, PointMassState, env_step,
                   generate_expert_data, inverse_dynamics,
                   make_corridor_arena, make_moving_obstacle_arena,
                   observe_obstacle)
from .estimators import InverseDynamicsRegressor, TrajectoryDiffusionModel
from .nn import Adam, Mlp
from .planner import EpisodeConfig, EpisodeMetrics, PlanResult, benchmark, plan, run_episode
from .samplers import (ChainDiagnostics, DualState, ParticleBatch, SamplerConfig,
                       alm_step, ddpm_reverse_step, primal_dual_step,
                       projected_step, run_reverse_chain, sgld_step)
from .schedules import NoiseSchedule, build_schedule, forward_diffuse
from .scores import (GaussianScore, GmmScore, LearnedScore, TrainConfig,
                     score_from_noise, train_score)

__version__ = "0.1.0"

__all__ = [
    "Adam", "Arena", "AxisBound", "BallExterior", "BallInterior", "Barrier",
    "ChainDiagnostics", "ConstraintSet", "CustomConstraint", "DoubleIntegratorIdm",
    "DualState", "EpisodeConfig", "EpisodeMetrics", "ExpertDataset",
    "GaussianScore", "GmmScore", "Halfspace", "InfeasibleProjection",
    "InverseDynamicsRegressor", "LearnedScore", "Mlp", "NoiseSchedule",
    "ParticleBatch", "PlanResult", "PointMassState", "SamplerConfig", "Subspace",
    "TrainConfig", "TrajectoryDiffusionModel", "alm_step", "benchmark",
    "build_schedule", "dcbf_satisfied", "dcbf_trajectory_constraints",
    "ddpm_reverse_step", "env_step", "forward_diffuse", "generate_expert_data",
    "inverse_dynamics", "load_dataset", "make_corridor_arena",
    "make_moving_obstacle_arena", "observe_obstacle", "plan", "primal_dual_step",
    "projected_step", "run_episode", "run_reverse_chain", "save_dataset",
    "score_from_noise", "sgld_step", "train_score",
]
