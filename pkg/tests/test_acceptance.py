"""Acceptance suite: one test per criterion, each printing a PASS line.

The trajectory-planning criteria share a session-scoped fixture that
generates expert data, fits the trajectory model, and runs the full
10-episode-per-method suite once.
"""

import time

import numpy as np
import pytest

from condiff.constraints import (BallExterior, BallInterior, ConstraintSet,
                                 Halfspace, Subspace)
from condiff.envs import (DoubleIntegratorIdm, env_step, generate_expert_data,
                          inverse_dynamics, make_corridor_arena,
                          make_moving_obstacle_arena, PointMassState)
from condiff.estimators import TrajectoryDiffusionModel
from condiff.planner import EpisodeConfig, run_episode
from condiff.samplers import SamplerConfig, run_reverse_chain
from condiff.schedules import build_schedule
from condiff.scores import GaussianScore

SEEDS = list(range(10))


def report(name, ok, detail):
    print(f"\n{name}: {'PASS' if ok else 'FAIL'} ({detail})")
    assert ok, f"{name} failed: {detail}"


# ---------------------------------------------------------------------------
# shared planning fixtures
# ---------------------------------------------------------------------------

METHOD_CONFIGS = {
    "unconstrained": {},
    "projected": {},
    "primal_dual": {"eta_lambda": 6.0},
    "alm": {"rho0": 3.0, "penalty_growth": 1.03, "rho_cap": 50.0},
}


@pytest.fixture(scope="session")
def trajectory_model():
    arena = make_corridor_arena(include_obstacle=False)
    data = generate_expert_data(arena, 3000, 64, np.random.default_rng(0))
    model = TrajectoryDiffusionModel(beta_max=0.2, hidden_dims=(256, 256),
                                     epochs=300, batch_size=128, learning_rate=1e-3,
                                     parametrization="denoiser", random_state=7)
    model.fit(data.trajectories[:, :, :2])
    return model


def episode_suite(model, arena, methods=METHOD_CONFIGS, episode_length=40,
                  margin=0.06, alpha=0.3):
    idm = DoubleIntegratorIdm()
    results = {}
    for method, knobs in methods.items():
        metrics, traces = [], []
        for seed in SEEDS:
            config = EpisodeConfig(
                sampler=SamplerConfig(method=method, reset_duals=True, **knobs),
                dcbf_alpha=alpha, episode_length=episode_length, replan_every=8,
                obstacle_margin=margin)
            m, tr = run_episode(arena, model, idm, config, np.random.default_rng(seed))
            metrics.append(m)
            traces.append(tr)
        results[method] = (metrics, traces)
    return results


@pytest.fixture(scope="session")
def corridor_suite(trajectory_model):
    return episode_suite(trajectory_model, make_corridor_arena())


# ---------------------------------------------------------------------------
# AC-1: disk-exterior 2D Gaussian, all three samplers
# ---------------------------------------------------------------------------

def test_ac1_disk_exterior_gaussian():
    model = GaussianScore(np.zeros(2), np.ones(2))
    schedule = build_schedule(100)
    raw = ConstraintSet.for_points([BallExterior(np.zeros(2), 1.0)])
    hinge = ConstraintSet.for_points([BallExterior(np.zeros(2), 1.0)],
                                     smoothing="hinge")

    t0 = time.perf_counter()
    proj, _, _ = run_reverse_chain(SamplerConfig(method="projected"), model,
                                   schedule, raw, n_particles=2000, rng=101)
    t_proj = time.perf_counter() - t0
    feasible = float(np.mean(np.linalg.norm(proj.particles, axis=1) >= 1.0 - 1e-9))

    t0 = time.perf_counter()
    pd, _, _ = run_reverse_chain(SamplerConfig(method="primal_dual", eta_lambda=1.0),
                                 model, schedule, hinge, n_particles=2000, rng=101)
    t_pd = time.perf_counter() - t0
    pd_hinge = float(np.maximum(1.0 - np.sum(pd.particles ** 2, axis=1), 0.0).mean())

    t0 = time.perf_counter()
    alm, _, _ = run_reverse_chain(SamplerConfig(method="alm"), model, schedule,
                                  hinge, n_particles=2000, rng=101)
    t_alm = time.perf_counter() - t0
    alm_hinge = float(np.maximum(1.0 - np.sum(alm.particles ** 2, axis=1), 0.0).mean())

    ok = (feasible == 1.0 and pd_hinge <= 0.05 and alm_hinge <= 0.02
          and max(t_proj, t_pd, t_alm) <= 60.0)
    report("AC-1", ok,
           f"projected feasible {feasible:.3f}, pd hinge {pd_hinge:.4f} <= 0.05, "
           f"alm hinge {alm_hinge:.4f} <= 0.02, "
           f"times {t_proj:.1f}/{t_pd:.1f}/{t_alm:.1f}s <= 60")


# ---------------------------------------------------------------------------
# AC-2 / AC-3: truncated Gaussian with the rejection-sampling oracle
# ---------------------------------------------------------------------------

@pytest.fixture(scope="session")
def truncated_runs():
    rng = np.random.default_rng(2024)
    draws = rng.standard_normal(2_000_000)
    oracle = draws[draws <= 0.5]
    model = GaussianScore(np.zeros(1), np.ones(1))
    schedule = build_schedule(800, 1e-4, 0.02)
    raw = ConstraintSet.for_points([Halfspace(np.array([1.0]), 0.5)])
    hinge = ConstraintSet.for_points([Halfspace(np.array([1.0]), 0.5)],
                                     smoothing="hinge")
    t0 = time.perf_counter()
    proj, _, _ = run_reverse_chain(SamplerConfig(method="projected"), model,
                                   schedule, raw, n_particles=10_000, rng=21)
    pd, _, _ = run_reverse_chain(SamplerConfig(method="primal_dual", eta_lambda=1.0),
                                 model, schedule, hinge, n_particles=10_000, rng=22)
    alm, alm_dual, alm_diag = run_reverse_chain(
        SamplerConfig(method="alm", penalty_growth=1.01), model, schedule, hinge,
        n_particles=10_000, rng=23)
    elapsed = time.perf_counter() - t0
    return {
        "oracle_mean": float(oracle.mean()), "oracle_var": float(oracle.var()),
        "proj": proj.particles[:, 0], "pd": pd.particles[:, 0],
        "alm": alm.particles[:, 0], "alm_dual": alm_dual, "alm_diag": alm_diag,
        "elapsed": elapsed,
    }


def test_ac2_truncated_gaussian_oracle(truncated_runs):
    r = truncated_runs
    proj_mean_err = abs(r["proj"].mean() - r["oracle_mean"])
    proj_var_err = abs(r["proj"].var() - r["oracle_var"])
    pd_mean_err = abs(r["pd"].mean() - r["oracle_mean"])
    alm_mean_err = abs(r["alm"].mean() - r["oracle_mean"])
    ok = (proj_mean_err <= 0.05 and proj_var_err <= 0.1
          and pd_mean_err <= 0.1 and alm_mean_err <= 0.1
          and r["elapsed"] <= 30.0)
    report("AC-2", ok,
           f"projected mean err {proj_mean_err:.3f} <= 0.05, var err "
           f"{proj_var_err:.3f} <= 0.1, pd mean err {pd_mean_err:.3f} <= 0.1, "
           f"alm mean err {alm_mean_err:.3f} <= 0.1, runtime {r['elapsed']:.1f}s <= 30")


def test_ac3_alm_residual_convergence(truncated_runs):
    diag = truncated_runs["alm_diag"]
    dual = truncated_runs["alm_dual"]
    hinge = diag.column("mean_hinge_violation")
    slack = diag.column("s_norm")
    tail = slice(-max(1, len(hinge) // 10), None)
    residuals = np.abs(hinge[tail] + slack[tail])
    lam_max = float(diag.column("lambda_norm").max())
    ok = (float(residuals.max()) <= 1e-2 and np.isfinite(lam_max)
          and lam_max < 1e4 and not dual.rho_capped)
    report("AC-3", ok,
           f"max |E[g]+s| over last 10% = {residuals.max():.2e} <= 1e-2, "
           f"lambda bounded ({lam_max:.1f}), overflow flag {dual.rho_capped}")


# ---------------------------------------------------------------------------
# AC-4 / AC-5 / AC-6: corridor planning suite
# ---------------------------------------------------------------------------

def test_ac4_planning_violation_ordering(corridor_suite):
    means = {m: float(np.mean([x.planning_violations for x in ms]))
             for m, (ms, _) in corridor_suite.items()}
    unc, proj = means["unconstrained"], means["projected"]
    pd, alm = means["primal_dual"], means["alm"]
    ok = (proj == 0.0 and proj <= alm <= pd < unc
          and unc >= 5.0 * pd and unc >= 5.0 * alm)
    report("AC-4", ok,
           f"planning violations projected {proj:.4f} <= alm {alm:.4f} <= "
           f"pd {pd:.4f} < unconstrained {unc:.4f}; margins "
           f"{unc / max(pd, 1e-12):.1f}x / {unc / max(alm, 1e-12):.1f}x >= 5x")


def test_ac5_forward_invariance_and_rates(corridor_suite):
    arena = make_corridor_arena()
    worst_h = np.inf
    for trace in corridor_suite["projected"][1]:
        for row in trace:
            pos = np.asarray(row["state"])[None, :2]
            for c in arena.obstacles:
                worst_h = min(worst_h, float(-c.value(pos)[0]))
    rates = {m: float(np.mean([x.violation_rate for x in ms]))
             for m, (ms, _) in corridor_suite.items()}
    ok = (worst_h >= -1e-9
          and rates["primal_dual"] <= 5.0 and rates["alm"] <= 5.0
          and rates["primal_dual"] < rates["unconstrained"]
          and rates["alm"] < rates["unconstrained"])
    report("AC-5", ok,
           f"projected executed min h = {worst_h:.2e} >= 0; rates: "
           f"pd {rates['primal_dual']:.2f}% / alm {rates['alm']:.2f}% <= 5% "
           f"< unconstrained {rates['unconstrained']:.2f}%")


def test_ac6_per_step_cost_ordering(corridor_suite):
    proj_time = float(np.median([m.per_step_time
                                 for m in corridor_suite["projected"][0]]))
    pd_time = float(np.median([m.per_step_time
                               for m in corridor_suite["primal_dual"][0]]))
    ok = proj_time >= 2.0 * pd_time > 0.0
    report("AC-6", ok,
           f"median projected step {proj_time * 1e3:.2f} ms >= 2x median "
           f"pd step {pd_time * 1e3:.2f} ms")


# ---------------------------------------------------------------------------
# AC-7: numerics suite
# ---------------------------------------------------------------------------

def test_ac7_numerics_suite():
    rng = np.random.default_rng(77)
    failures = []

    # analytic constraint gradients vs central differences
    cset = ConstraintSet.for_points(
        [Halfspace(np.array([0.6, -0.8]), 0.3),
         BallInterior(np.array([0.2, -0.1]), 1.5),
         BallExterior(np.array([1.0, 1.0]), 0.7)], smoothing="sigmoid")

    def fd(f, x, h=1e-6):
        out = np.zeros((f(x).size, x.size))
        for i in range(x.size):
            up, dn = x.copy(), x.copy()
            up[i] += h
            dn[i] -= h
            out[:, i] = (f(up) - f(dn)) / (2 * h)
        return out

    for _ in range(50):
        x = rng.uniform(-2, 2, size=2)
        got = cset.grads_dense(x)
        want = fd(cset.values, x)
        if not np.allclose(got, want, rtol=1e-5, atol=1e-7):
            failures.append("constraint gradient")
            break

    # score gradients vs finite differences of the log density
    from condiff.scores import GmmScore
    gmm = GmmScore([0.4, 0.6], [[-1.0, 0.0], [1.5, 0.5]], [[0.8, 1.2], [0.5, 2.0]])
    for _ in range(50):
        x = rng.uniform(-3, 3, size=2)
        want = fd(lambda v: np.atleast_1d(gmm.log_density(v)), x)[0]
        if not np.allclose(gmm.score(x), want, rtol=1e-5, atol=1e-7):
            failures.append("score gradient")
            break

    # network gradients vs finite differences
    from condiff.nn import Mlp
    net = Mlp([3, 8, 2], rng=rng)
    x = rng.standard_normal(3)
    v = rng.standard_normal(2)
    _, din = net.backward(x, v)
    want = fd(lambda z: np.atleast_1d(v @ net.forward(z)), x)[0]
    if not np.allclose(din, want, rtol=1e-5, atol=1e-7):
        failures.append("mlp gradient")

    # projection idempotence and optimality on 1000 randomized cases
    variants = [
        ConstraintSet.for_points([Halfspace(np.array([0.3, -1.0]), 0.2)]),
        ConstraintSet.for_points([BallInterior(np.array([0.4, 0.1]), 1.2)]),
        ConstraintSet.for_points([BallExterior(np.array([-0.3, 0.2]), 0.9)]),
    ]
    z = rng.uniform(-3, 3, size=(1000, 2))
    for cs in variants:
        once = cs.project_batch(z)
        twice = cs.project_batch(once)
        if not np.allclose(once, twice, atol=1e-9):
            failures.append("projection idempotence")
            break
        if float(cs.max_raw(once).max()) > 1e-9:
            failures.append("projection feasibility")
            break
    convex = ConstraintSet.for_points([BallInterior(np.array([0.1, 0.0]), 1.0)])
    zq = rng.uniform(-3, 3, size=2)
    p = convex.project(zq)
    feas = []
    while len(feas) < 1000:
        cand = rng.uniform(-1.2, 1.4, size=(4000, 2))
        feas.extend(cand[convex.raw_values(cand)[:, 0] <= 0].tolist())
    dists = np.linalg.norm(np.array(feas[:1000]) - zq, axis=1)
    if np.linalg.norm(p - zq) > dists.min() + 1e-9:
        failures.append("projection optimality")

    # analytic inverse dynamics round-trips the env step exactly
    arena = make_corridor_arena(include_obstacle=False)
    idm = DoubleIntegratorIdm()
    for _ in range(100):
        s = PointMassState(rng.uniform(-1, 1, 2), rng.uniform(-1.5, 1.5, 2))
        u = rng.uniform(-3, 3, 2)
        nxt = env_step(s, u, arena)
        if not np.allclose(inverse_dynamics(idm, s.as_vector(), nxt.as_vector()),
                           u, atol=1e-12):
            failures.append("idm round trip")
            break

    report("AC-7", not failures, "all numeric checks pass" if not failures
           else f"failed: {failures}")


# ---------------------------------------------------------------------------
# AC-8: time-varying constraints
# ---------------------------------------------------------------------------

def test_ac8_time_varying_constraints(trajectory_model):
    arena = make_moving_obstacle_arena(episode_length=40)
    methods = {k: METHOD_CONFIGS[k]
               for k in ("unconstrained", "primal_dual", "alm")}
    # the obstacle advances 0.4 per replan interval on stale observations;
    # the standoff margin absorbs that motion
    suite = episode_suite(trajectory_model, arena, methods=methods,
                          margin=0.25, alpha=0.25)
    rates = {m: float(np.mean([x.violation_rate for x in ms]))
             for m, (ms, _) in suite.items()}
    ok = (rates["primal_dual"] <= 5.0 and rates["alm"] <= 5.0
          and rates["unconstrained"] >= 20.0)
    report("AC-8", ok,
           f"violation rates: pd {rates['primal_dual']:.2f}% / "
           f"alm {rates['alm']:.2f}% <= 5% vs unconstrained "
           f"{rates['unconstrained']:.2f}% >= 20%")
