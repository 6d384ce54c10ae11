"""Reverse-diffusion sampling engines.

The unconstrained step follows the score-form update
``x' = x + (beta_t/2) grad log p(x) + sqrt(beta_t) z``; the constrained
variants wrap it with projection, multiplier-weighted constraint gradients
plus dual ascent, or an augmented-Lagrangian slack/dual/penalty cycle.
All randomness flows through an injected numpy Generator.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field, replace

import numpy as np

from ._validation import as_float_array, check_finite, check_rng
from .constraints import ConstraintSet

__all__ = [
    "ParticleBatch",
    "DualState",
    "SamplerConfig",
    "ChainDiagnostics",
    "sgld_step",
    "ddpm_reverse_step",
    "projected_step",
    "primal_dual_step",
    "alm_step",
    "run_reverse_chain",
]

METHODS = ("unconstrained", "projected", "primal_dual", "alm")
_METHOD_ALIASES = {"pd": "primal_dual", "augmented_lagrangian": "alm"}

DIAGNOSTIC_COLUMNS = (
    "t",
    "mean_raw_violation",
    "mean_hinge_violation",
    "lambda_norm",
    "s_norm",
    "rho",
    "step_wall_clock_seconds",
)


def canonical_method(name):
    method = _METHOD_ALIASES.get(name, name)
    if method not in METHODS:
        raise ValueError(f"unknown method {name!r}; valid methods: {', '.join(METHODS)}")
    return method


@dataclass
class ParticleBatch:
    """A population of points or flattened trajectories at diffusion index t."""

    particles: np.ndarray
    t: int

    def __post_init__(self):
        self.particles = as_float_array(self.particles, ndim=2, name="particles")
        if self.particles.shape[0] < 1:
            raise ValueError("batch must hold at least one particle")

    @property
    def n(self):
        return self.particles.shape[0]

    @property
    def dim(self):
        return self.particles.shape[1]


@dataclass
class DualState:
    """Multipliers, slacks and penalty evolving across reverse steps.

    ``lam``/``slack`` have shape (m,) under batch-mean expectations or (n, m)
    when every particle carries its own multiplier. ``eta_lambda=None`` ties
    the dual step size to the primal one as 0.1 * beta_t.
    """

    lam: np.ndarray
    slack: np.ndarray
    rho: float = 1.0
    eta_lambda: float | None = None
    rho_capped: bool = False

    @classmethod
    def zeros(cls, n_constraints, n_particles=None, rho=1.0, eta_lambda=None):
        shape = (n_constraints,) if n_particles is None else (n_particles, n_constraints)
        return cls(lam=np.zeros(shape), slack=np.zeros(shape), rho=rho, eta_lambda=eta_lambda)

    def copy(self):
        return DualState(lam=self.lam.copy(), slack=self.slack.copy(), rho=self.rho,
                         eta_lambda=self.eta_lambda, rho_capped=self.rho_capped)


@dataclass
class SamplerConfig:
    """Method selection and dual-update hyperparameters for a reverse chain."""

    method: str = "unconstrained"
    expectation: str = "batch_mean"  # or "per_particle"
    eta_lambda: float | None = None  # None -> 0.1 * beta_t
    rho0: float = 1.0
    penalty_growth: float = 1.05
    rho_cap: float = 1e6
    prior_scale: float = 1.0
    suppress_final_noise: bool = True
    reset_duals: bool = True
    projection_tol: float = 1e-9
    projection_sweeps: int = 50

    def __post_init__(self):
        self.method = canonical_method(self.method)
        if self.expectation not in ("batch_mean", "per_particle"):
            raise ValueError(f"unknown expectation mode {self.expectation!r}")
        if self.method == "alm" and self.penalty_growth <= 1.0:
            raise ValueError("penalty_growth must exceed 1 for the augmented-Lagrangian method")
        if self.eta_lambda is not None and self.eta_lambda <= 0.0:
            raise ValueError("eta_lambda must be positive")


@dataclass
class ChainDiagnostics:
    """Per-step chain records; one row per recorded state, t = T..0."""

    rows: list = field(default_factory=list)

    def append(self, t, mean_raw, mean_hinge, lambda_norm, s_norm, rho, wall):
        self.rows.append({
            "t": t,
            "mean_raw_violation": mean_raw,
            "mean_hinge_violation": mean_hinge,
            "lambda_norm": lambda_norm,
            "s_norm": s_norm,
            "rho": rho,
            "step_wall_clock_seconds": wall,
        })

    def __len__(self):
        return len(self.rows)

    def column(self, name):
        return np.array([row[name] for row in self.rows])

    def median_step_time(self):
        # first row records initialization, not a step
        times = self.column("step_wall_clock_seconds")[1:]
        return float(np.median(times)) if times.size else 0.0

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=DIAGNOSTIC_COLUMNS)
            writer.writeheader()
            for row in self.rows:
                writer.writerow(row)


# ---------------------------------------------------------------------------
# Single steps
# ---------------------------------------------------------------------------

def sgld_step(x, score_fn, step_size, rng):
    """Langevin update x' = x + (eps/2) score(x) + sqrt(eps) z."""
    if step_size <= 0.0:
        raise ValueError("step_size must be positive")
    x = as_float_array(x)
    rng = check_rng(rng)
    drift = np.asarray(score_fn(x), dtype=float)
    check_finite(drift, "score")
    z = rng.standard_normal(x.shape)
    return x + 0.5 * step_size * drift + np.sqrt(step_size) * z


def _reverse_drift(x, model, t, schedule):
    beta = schedule.betas[schedule.check_t(t)]
    score = np.asarray(model.score(x, t), dtype=float)
    check_finite(score, "score")
    return beta, score


def ddpm_reverse_step(x, model, t, schedule, rng, noise_scale=1.0):
    """Score-form reverse update at diffusion index t.

    ``noise_scale=0`` suppresses the Gaussian kick (used at the final step).
    """
    x = as_float_array(x)
    rng = check_rng(rng)
    beta, score = _reverse_drift(x, model, t, schedule)
    out = x + 0.5 * beta * score
    if noise_scale != 0.0:
        out = out + noise_scale * np.sqrt(beta) * rng.standard_normal(x.shape)
    return out


def projected_step(x, model, t, schedule, constraints, rng, noise_scale=1.0,
                   free_mask=None):
    """Reverse update followed by projection onto the raw-feasible set."""
    out = ddpm_reverse_step(x, model, t, schedule, rng, noise_scale=noise_scale)
    if constraints is None or not constraints.groups:
        return out
    squeeze = out.ndim == 1
    pts = out[None, :] if squeeze else out
    proj = constraints.project_batch(pts, free_mask=free_mask)
    return proj[0] if squeeze else proj


def _expected_g(values, expectation):
    # batch_mean collapses particles; per_particle keeps one row per particle
    if expectation == "batch_mean":
        return values.mean(axis=0)
    return values


def _eta(dual, beta):
    return dual.eta_lambda if dual.eta_lambda is not None else 0.1 * beta


def primal_dual_step(batch, model, schedule, constraints, dual, rng, config=None,
                     noise_scale=1.0):
    """One primal-dual reverse step.

    Primal: x' = x + (beta/2)(score - lambda^T grad g~) + sqrt(beta) z.
    Dual:   lambda' = max(0, lambda + eta * E[g~]) with E the configured
    expectation estimator evaluated at the pre-update batch.
    """
    config = config or SamplerConfig(method="primal_dual")
    rng = check_rng(rng)
    x = batch.particles
    t = batch.t
    beta, score = _reverse_drift(x, model, t, schedule)
    abar = schedule.alpha_bars[t]
    values = constraints.values(x, abar=abar)
    g_hat = _expected_g(values, config.expectation)
    penalty = constraints.weighted_grad(x, np.broadcast_to(dual.lam, values.shape),
                                        abar=abar)
    out = x + 0.5 * beta * (score - penalty)
    if noise_scale != 0.0:
        out = out + noise_scale * np.sqrt(beta) * rng.standard_normal(x.shape)
    check_finite(out, "particles")
    new_lam = np.maximum(dual.lam + _eta(dual, beta) * g_hat, 0.0)
    new_dual = replace(dual.copy(), lam=new_lam)
    return ParticleBatch(out, t - 1), new_dual


def alm_step(batch, model, schedule, constraints, dual, rng, config=None,
             noise_scale=1.0):
    """One augmented-Lagrangian reverse step.

    Per diffusion step: recompute slack s = max(0, -E[g~] - lambda/rho);
    primal update with multiplier (lambda + rho (E[g~] + s)); dual update
    lambda' = lambda + rho (E[g~] + s); penalty rho' = c * rho (capped).
    """
    config = config or SamplerConfig(method="alm")
    rng = check_rng(rng)
    x = batch.particles
    t = batch.t
    beta, score = _reverse_drift(x, model, t, schedule)
    abar = schedule.alpha_bars[t]
    active = constraints.any_active(abar)
    values = constraints.values(x, abar=abar)
    g_hat = _expected_g(values, config.expectation)
    slack = np.maximum(-g_hat - dual.lam / dual.rho, 0.0)
    coeff = dual.lam + dual.rho * (g_hat + slack)
    penalty = constraints.weighted_grad(x, np.broadcast_to(coeff, values.shape),
                                        abar=abar)
    out = x + 0.5 * beta * (score - penalty)
    if noise_scale != 0.0:
        out = out + noise_scale * np.sqrt(beta) * rng.standard_normal(x.shape)
    check_finite(out, "particles")
    new_lam = dual.lam + dual.rho * (g_hat + slack)
    # the penalty only tightens while constraints are being enforced
    new_rho = dual.rho * config.penalty_growth if active else dual.rho
    capped = dual.rho_capped
    if new_rho > config.rho_cap:
        new_rho = config.rho_cap
        capped = True
    new_dual = DualState(lam=new_lam, slack=slack, rho=new_rho,
                         eta_lambda=dual.eta_lambda, rho_capped=capped)
    return ParticleBatch(out, t - 1), new_dual


# ---------------------------------------------------------------------------
# Full chains
# ---------------------------------------------------------------------------

def _fresh_dual(config, n_constraints, n_particles):
    per = config.expectation == "per_particle"
    return DualState.zeros(n_constraints, n_particles=n_particles if per else None,
                           rho=config.rho0, eta_lambda=config.eta_lambda)


def run_reverse_chain(config, model, schedule, constraints=None, n_particles=1,
                      rng=None, dual=None, pin=None, dim=None, pin_noised=None):
    """Run the configured reverse chain from the Gaussian prior down to t=0.

    ``pin`` is an optional ``(indices, values)`` pair of coordinates held
    fixed through the chain (conditioning by inpainting): after every step
    the pinned coordinates are overwritten with the forward-noised values at
    the current noise level, and with the clean values at the final step.
    ``pin_noised`` optionally marks per-index whether to noise the pin
    (default all True); clean-pinned coordinates are held at their exact
    values throughout. The projected method treats pinned coordinates as
    frozen during projection. Returns ``(ParticleBatch at t=0, DualState,
    ChainDiagnostics)``; the diagnostics hold one record for the initial
    state plus one per step.
    """
    rng = check_rng(rng)
    constraints = constraints if constraints is not None else ConstraintSet()
    d = dim if dim is not None else model.dim
    method = config.method
    t_max = schedule.n_steps

    x = config.prior_scale * rng.standard_normal((n_particles, d))
    pin_idx = pin_vals = free_mask = noise_mask = None
    if pin is not None:
        pin_idx = np.asarray(pin[0], dtype=int)
        pin_vals = np.asarray(pin[1], dtype=float)
        free_mask = np.ones(d, dtype=bool)
        free_mask[pin_idx] = False
        noise_mask = np.ones(pin_idx.size, dtype=bool) if pin_noised is None \
            else np.asarray(pin_noised, dtype=bool)

    def apply_pin(arr, level):
        # level None pins the clean values; otherwise the forward-noised ones
        if pin_idx is None:
            return
        if level is None:
            arr[:, pin_idx] = pin_vals
            return
        abar = schedule.alpha_bars[level]
        eps = rng.standard_normal((arr.shape[0], pin_idx.size))
        noised = np.sqrt(abar) * pin_vals + np.sqrt(1.0 - abar) * eps
        arr[:, pin_idx] = np.where(noise_mask, noised, pin_vals)

    apply_pin(x, t_max - 1)

    m = constraints.n_constraints
    if dual is None or config.reset_duals:
        dual = _fresh_dual(config, m, n_particles)
    else:
        dual = dual.copy()

    diagnostics = ChainDiagnostics()

    def record(t, wall):
        if m:
            raw = constraints.raw_values(x)
            mean_raw = float(raw.mean())
            mean_hinge = float(np.maximum(raw, 0.0).sum(axis=1).mean())
        else:
            mean_raw = 0.0
            mean_hinge = 0.0
        diagnostics.append(t, mean_raw, mean_hinge,
                           float(np.linalg.norm(dual.lam)),
                           float(np.linalg.norm(dual.slack)),
                           dual.rho, wall)

    record(t_max, 0.0)
    batch = ParticleBatch(x, t_max)
    for t in range(t_max - 1, -1, -1):
        start = time.perf_counter()
        noise_scale = 0.0 if (t == 0 and config.suppress_final_noise) else 1.0
        batch = ParticleBatch(batch.particles, t)
        if method in ("primal_dual", "alm") and m > 0:
            step = primal_dual_step if method == "primal_dual" else alm_step
            batch, dual = step(batch, model, schedule, constraints, dual, rng,
                               config=config, noise_scale=noise_scale)
            stepped = batch.particles
            apply_pin(stepped, t if t > 0 else None)
        else:
            stepped = ddpm_reverse_step(batch.particles, model, t, schedule, rng,
                                        noise_scale=noise_scale)
            apply_pin(stepped, t if t > 0 else None)
            if method == "projected" and constraints.groups:
                stepped = constraints.project_batch(stepped, free_mask=free_mask,
                                                    tol=config.projection_tol,
                                                    max_sweeps=config.projection_sweeps,
                                                    abar=schedule.alpha_bars[t])
            batch = ParticleBatch(stepped, t - 1)
        x = batch.particles
        record(t, time.perf_counter() - start)
    return batch, dual, diagnostics
