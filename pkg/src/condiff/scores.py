"""Score functions: analytic Gaussian/GMM targets and a learned noise predictor.

Every model exposes ``score(x, t)`` returning the drift used by the reverse
chain. Analytic targets ignore ``t``; the learned model converts its noise
prediction to a score through ``score_from_noise``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ._validation import as_float_array, check_rng
from .nn import Adam, Mlp, _param_grads_flat
from .schedules import NoiseSchedule

__all__ = [
    "GaussianScore",
    "GmmScore",
    "LearnedScore",
    "score_from_noise",
    "TrainConfig",
    "train_noise_predictor",
    "train_score",
]


def _check_point(x, dim):
    x = as_float_array(x)
    if x.ndim == 1:
        if x.shape[0] != dim:
            raise ValueError(f"point has dimension {x.shape[0]}, expected {dim}")
        return x[None, :], True
    if x.ndim == 2 and x.shape[1] == dim:
        return x, False
    raise ValueError(f"expected points of dimension {dim}, got shape {x.shape}")


class GaussianScore:
    """Score of a diagonal Gaussian: grad log p(x) = -(x - mean) / var."""

    def __init__(self, mean, var):
        self.mean = as_float_array(mean, ndim=1, name="mean")
        self.var = as_float_array(var, ndim=1, name="var")
        if self.var.shape != self.mean.shape:
            raise ValueError("mean and var must have equal length")
        if np.any(self.var <= 0.0):
            raise ValueError("variances must be strictly positive")

    @property
    def dim(self):
        return self.mean.shape[0]

    def score(self, x, t=None):
        pts, squeeze = _check_point(x, self.dim)
        out = -(pts - self.mean) / self.var
        return out[0] if squeeze else out

    def log_density(self, x):
        pts, squeeze = _check_point(x, self.dim)
        quad = np.sum((pts - self.mean) ** 2 / self.var, axis=1)
        norm = 0.5 * np.sum(np.log(2.0 * np.pi * self.var))
        out = -0.5 * quad - norm
        return out[0] if squeeze else out


class GmmScore:
    """Score of a mixture of diagonal Gaussians via posterior responsibilities."""

    def __init__(self, weights, means, variances):
        self.weights = as_float_array(weights, ndim=1, name="weights")
        self.means = as_float_array(means, ndim=2, name="means")
        self.variances = as_float_array(variances, ndim=2, name="variances")
        if abs(self.weights.sum() - 1.0) > 1e-12:
            raise ValueError("mixture weights must sum to 1 within 1e-12")
        if np.any(self.weights < 0.0):
            raise ValueError("mixture weights must be non-negative")
        if self.means.shape != self.variances.shape:
            raise ValueError("means and variances must share shape (k, dim)")
        if self.means.shape[0] != self.weights.shape[0]:
            raise ValueError("one mean/variance row per mixture weight")
        if np.any(self.variances <= 0.0):
            raise ValueError("variances must be strictly positive")

    @property
    def dim(self):
        return self.means.shape[1]

    def _component_logpdfs(self, pts):
        # (n, k): log density of each component at each point
        diff = pts[:, None, :] - self.means[None, :, :]
        quad = np.sum(diff * diff / self.variances[None, :, :], axis=2)
        norm = 0.5 * np.sum(np.log(2.0 * np.pi * self.variances), axis=1)
        return -0.5 * quad - norm[None, :]

    def log_density(self, x):
        pts, squeeze = _check_point(x, self.dim)
        logp = self._component_logpdfs(pts) + np.log(self.weights)[None, :]
        m = logp.max(axis=1, keepdims=True)
        out = (m + np.log(np.sum(np.exp(logp - m), axis=1, keepdims=True)))[:, 0]
        return out[0] if squeeze else out

    def score(self, x, t=None):
        pts, squeeze = _check_point(x, self.dim)
        logp = self._component_logpdfs(pts) + np.log(self.weights)[None, :]
        m = logp.max(axis=1, keepdims=True)
        resp = np.exp(logp - m)
        resp /= resp.sum(axis=1, keepdims=True)
        comp_scores = -(pts[:, None, :] - self.means[None, :, :]) / self.variances[None, :, :]
        out = np.sum(resp[:, :, None] * comp_scores, axis=1)
        return out[0] if squeeze else out


def score_from_noise(eps, t, schedule):
    """Convert a noise prediction to the marginal score: -eps / sqrt(1 - abar_t)."""
    eps = as_float_array(eps)
    t = schedule.check_t(t)
    return -eps / np.sqrt(1.0 - schedule.alpha_bars[t])


class LearnedScore:
    """Learned network wrapped as a score model.

    The network maps [x, t / n_steps] to either the noise itself
    (``parametrization="noise"``) or the clean state (``"denoiser"``), from
    which the noise estimate eps_hat = (x - sqrt(abar) f) / sqrt(1 - abar)
    is derived. The score at index t follows from the noise-to-score
    conversion either way.
    """

    def __init__(self, net: Mlp, schedule: NoiseSchedule, parametrization="noise"):
        if net.in_dim != net.out_dim + 1:
            raise ValueError("net must map [x, t_frac] (d+1) to a d-vector")
        if parametrization not in ("noise", "denoiser"):
            raise ValueError(f"unknown parametrization {parametrization!r}")
        self.net = net
        self.schedule = schedule
        self.parametrization = parametrization

    @property
    def dim(self):
        return self.net.out_dim

    def _net_out(self, pts, t):
        t_frac = np.full((pts.shape[0], 1), t / self.schedule.n_steps)
        return self.net.forward(np.hstack([pts, t_frac]))

    def predict_noise(self, x, t):
        pts, squeeze = _check_point(x, self.dim)
        t = self.schedule.check_t(t)
        out = self._net_out(pts, t)
        if self.parametrization == "denoiser":
            abar = self.schedule.alpha_bars[t]
            out = (pts - np.sqrt(abar) * out) / np.sqrt(1.0 - abar)
        return out[0] if squeeze else out

    def score(self, x, t):
        return score_from_noise(self.predict_noise(x, t), t, self.schedule)


@dataclass
class TrainConfig:
    """Hyperparameters for denoising training.

    ``parametrization="noise"`` regresses the network output onto the drawn
    noise directly; ``"denoiser"`` regresses it onto the clean state (the
    per-level-reweighted form of the same objective), from which the noise
    estimate is derived at evaluation time.
    """

    epochs: int = 150
    batch_size: int = 64
    learning_rate: float = 1e-3
    hidden_dims: tuple = (128, 128)
    activation: str = "tanh"
    validation_fraction: float = 0.1
    parametrization: str = "noise"
    history: list = field(default_factory=list, repr=False)


def train_noise_predictor(x0, schedule, config, rng):
    """Fit the denoising network on the noise-prediction objective.

    Each minibatch draws a diffusion index and Gaussian noise per sample,
    forms the noised state, and regresses the network output onto the noise
    (or the clean state, per the parametrization). ``config.history``
    receives one ``(epoch, train_loss, val_loss)`` row per epoch. Returns
    the network.
    """
    x0 = as_float_array(x0, ndim=2, name="x0")
    if x0.shape[0] == 0:
        raise ValueError("training set is empty")
    if config.parametrization not in ("noise", "denoiser"):
        raise ValueError(f"unknown parametrization {config.parametrization!r}")
    rng = check_rng(rng)
    n, d = x0.shape
    net = Mlp([d + 1, *config.hidden_dims, d], activation=config.activation, rng=rng)
    config.history.clear()
    if config.epochs == 0:
        return net

    n_val = int(round(config.validation_fraction * n))
    order = rng.permutation(n)
    val_idx, train_idx = order[:n_val], order[n_val:]
    if train_idx.size == 0:
        train_idx = order
    x_train, x_val = x0[train_idx], x0[val_idx]
    opt = Adam(learning_rate=config.learning_rate)
    n_steps = schedule.n_steps
    sqrt_ab = np.sqrt(schedule.alpha_bars)
    sqrt_1mab = np.sqrt(1.0 - schedule.alpha_bars)
    denoiser = config.parametrization == "denoiser"

    def batch_loss(xb, train):
        t = rng.integers(0, n_steps, size=xb.shape[0])
        eps = rng.standard_normal(xb.shape)
        xt = sqrt_ab[t, None] * xb + sqrt_1mab[t, None] * eps
        inp = np.hstack([xt, (t / n_steps)[:, None]])
        pred = net.forward(inp)
        err = pred - (xb if denoiser else eps)
        loss = float(np.mean(err * err))
        if train:
            grad_out = (2.0 / err.size) * err
            param_grads, _ = net.backward(inp, grad_out)
            opt.step(net.parameters(), _param_grads_flat(param_grads))
        return loss

    m = x_train.shape[0]
    for epoch in range(config.epochs):
        perm = rng.permutation(m)
        total, seen = 0.0, 0
        for start in range(0, m, config.batch_size):
            idx = perm[start:start + config.batch_size]
            total += batch_loss(x_train[idx], train=True) * idx.size
            seen += idx.size
        train_loss = total / seen
        val_loss = batch_loss(x_val, train=False) if x_val.shape[0] else float("nan")
        config.history.append((epoch, train_loss, val_loss))
    return net


def train_score(dataset, schedule, config=None, rng=None):
    """Train a LearnedScore on an expert dataset (normalized, flattened)."""
    if dataset.n_trajectories == 0:
        raise ValueError("dataset must be non-empty")
    config = config or TrainConfig()
    net = train_noise_predictor(dataset.normalized_flat(), schedule, config, check_rng(rng))
    return LearnedScore(net, schedule, parametrization=config.parametrization)
