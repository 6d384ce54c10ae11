"""Scikit-learn style estimators wrapping the diffusion machinery.

``TrajectoryDiffusionModel`` is a generative estimator (fit on vectors or
fixed-horizon trajectories, then sample, optionally under constraints);
``InverseDynamicsRegressor`` is a plain regressor from state pairs to
actions. Both follow the get_params/set_params contract so they compose
with sklearn pipelines and model-selection utilities.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.exceptions import NotFittedError

from ._validation import as_float_array, check_rng
from .data import ExpertDataset
from .nn import Mlp, fit_regression
from .samplers import SamplerConfig, run_reverse_chain
from .schedules import NoiseSchedule, build_schedule
from .scores import LearnedScore, TrainConfig, train_noise_predictor

__all__ = ["TrajectoryDiffusionModel", "InverseDynamicsRegressor"]

CHECKPOINT_VERSION = 1


def _net_record(net):
    return {
        "layer_dims": net.layer_dims,
        "activation": net.activation,
        "weights": [w.tolist() for w in net.weights],
        "biases": [b.tolist() for b in net.biases],
    }


def _net_from_record(record):
    net = Mlp(record["layer_dims"], activation=record["activation"], rng=0)
    net.weights = [np.array(w, dtype=float) for w in record["weights"]]
    net.biases = [np.array(b, dtype=float) for b in record["biases"]]
    return net


class TrajectoryDiffusionModel(BaseEstimator):
    """Denoising diffusion model over flat vectors or whole trajectories.

    ``fit`` normalizes the data per dimension, trains a noise-prediction
    network on the standard denoising objective, and stores the schedule.
    ``sample`` runs a reverse chain (optionally constrained) and returns
    samples in the original coordinates.

    Parameters mirror the training configuration; set ``random_state`` for
    reproducible fits. Fitted attributes carry trailing underscores.
    """

    def __init__(self, n_diffusion_steps=100, beta_min=1e-4, beta_max=0.02,
                 hidden_dims=(128, 128), activation="tanh", epochs=150,
                 batch_size=64, learning_rate=1e-3, validation_fraction=0.1,
                 parametrization="noise", random_state=None):
        self.n_diffusion_steps = n_diffusion_steps
        self.beta_min = beta_min
        self.beta_max = beta_max
        self.hidden_dims = hidden_dims
        self.activation = activation
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.validation_fraction = validation_fraction
        self.parametrization = parametrization
        self.random_state = random_state

    def fit(self, X, y=None):
        """Fit on (n, d) vectors or (n, horizon+1, state_dim) trajectories."""
        X = as_float_array(X, name="X")
        if X.ndim == 2:
            X = X[:, None, :]  # a plain vector is a single-state trajectory
            self._flat_input = True
        elif X.ndim == 3:
            self._flat_input = False
        else:
            raise ValueError(f"X must be 2- or 3-dimensional, got shape {X.shape}")
        if X.shape[0] == 0:
            raise ValueError("X must hold at least one sample")
        dataset = ExpertDataset.from_trajectories(X)
        rng = check_rng(self.random_state)
        self.schedule_ = build_schedule(self.n_diffusion_steps, self.beta_min, self.beta_max)
        config = TrainConfig(
            epochs=self.epochs, batch_size=self.batch_size,
            learning_rate=self.learning_rate, hidden_dims=tuple(self.hidden_dims),
            activation=self.activation, validation_fraction=self.validation_fraction,
            parametrization=self.parametrization)
        net = train_noise_predictor(dataset.normalized_flat(), self.schedule_, config, rng)
        self.score_model_ = LearnedScore(net, self.schedule_,
                                         parametrization=self.parametrization)
        self.state_mean_ = dataset.mean
        self.state_scale_ = dataset.scale
        self.mean_ = dataset.flat_mean()
        self.scale_ = dataset.flat_scale()
        self.horizon_ = dataset.horizon
        self.state_dim_ = dataset.state_dim
        self.n_features_in_ = dataset.flat_dim
        self.loss_history_ = list(config.history)
        return self

    def _check_fitted(self):
        if not hasattr(self, "score_model_"):
            raise NotFittedError("this model is not fitted yet; call fit first")

    def to_normalized(self, x):
        return (as_float_array(x) - self.mean_) / self.scale_

    def to_original(self, x):
        return as_float_array(x) * self.scale_ + self.mean_

    def attach(self, constraints, grad_metric="chain"):
        """Bind an original-coordinate constraint set to the normalized space.

        ``grad_metric="physical"`` makes multiplier pushes proportional to
        the original-coordinate constraint gradients instead of the literal
        normalized-space derivative (which damps them by scale^2 on
        low-variance dimensions).
        """
        return constraints.with_affine(self.mean_, self.scale_, grad_metric=grad_metric)

    def sample(self, n_samples=1, method="unconstrained", constraints=None,
               random_state=None, sampler_config=None, pin=None, pin_noised=None,
               dual=None, return_diagnostics=False):
        """Draw samples by running the reverse chain in normalized space.

        ``constraints`` is a ConstraintSet in original coordinates. ``pin``
        is an (indices, original-coordinate values) pair held fixed through
        the chain; ``pin_noised`` optionally marks which pinned coordinates
        follow the forward-noised schedule. Returns samples shaped like the
        training data; with ``return_diagnostics`` a (samples, dual,
        diagnostics) triple.
        """
        self._check_fitted()
        rng = check_rng(random_state)
        config = sampler_config or SamplerConfig(method=method)
        cset = self.attach(constraints) if constraints is not None else None
        chain_pin = None
        if pin is not None:
            idx = np.asarray(pin[0], dtype=int)
            vals = (np.asarray(pin[1], dtype=float) - self.mean_[idx]) / self.scale_[idx]
            chain_pin = (idx, vals)
        batch, dual, diagnostics = run_reverse_chain(
            config, self.score_model_, self.schedule_, constraints=cset,
            n_particles=n_samples, rng=rng, dual=dual, pin=chain_pin,
            pin_noised=pin_noised)
        flat = self.to_original(batch.particles)
        if self._flat_input:
            out = flat
        else:
            out = flat.reshape(n_samples, self.horizon_ + 1, self.state_dim_)
        if return_diagnostics:
            return out, dual, diagnostics
        return out

    def save(self, path):
        """Write a checkpoint holding the net, schedule, and normalization stats."""
        self._check_fitted()
        record = {
            "format_version": CHECKPOINT_VERSION,
            "kind": "trajectory_diffusion",
            "params": {k: (list(v) if isinstance(v, tuple) else v)
                       for k, v in self.get_params().items()},
            "net": _net_record(self.score_model_.net),
            "schedule": self.schedule_.to_dict(),
            "mean": self.state_mean_.tolist(),
            "scale": self.state_scale_.tolist(),
            "horizon": self.horizon_,
            "state_dim": self.state_dim_,
            "flat_input": self._flat_input,
        }
        Path(path).write_text(json.dumps(record))

    @classmethod
    def load(cls, path):
        record = json.loads(Path(path).read_text())
        if record.get("format_version") != CHECKPOINT_VERSION or \
                record.get("kind") != "trajectory_diffusion":
            raise ValueError(f"not a trajectory-diffusion checkpoint: {path}")
        params = dict(record["params"])
        params["hidden_dims"] = tuple(params["hidden_dims"])
        model = cls(**params)
        model.schedule_ = NoiseSchedule.from_dict(record["schedule"])
        net = _net_from_record(record["net"])
        model.score_model_ = LearnedScore(net, model.schedule_,
                                          parametrization=params.get("parametrization",
                                                                     "noise"))
        mean = np.asarray(record["mean"], float)
        scale = np.asarray(record["scale"], float)
        model.horizon_ = int(record["horizon"])
        model.state_dim_ = int(record["state_dim"])
        model._flat_input = bool(record["flat_input"])
        n_states = model.horizon_ + 1
        model.state_mean_ = mean
        model.state_scale_ = scale
        model.mean_ = np.tile(mean, n_states)
        model.scale_ = np.tile(scale, n_states)
        model.n_features_in_ = n_states * model.state_dim_
        model.loss_history_ = []
        return model


class InverseDynamicsRegressor(BaseEstimator, RegressorMixin):
    """MLP regressor from concatenated state pairs [x, x_next] to actions."""

    def __init__(self, hidden_dims=(32, 32), activation="relu", epochs=200,
                 batch_size=256, learning_rate=1e-3, random_state=None):
        self.hidden_dims = hidden_dims
        self.activation = activation
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.random_state = random_state

    def fit(self, X, y):
        X = as_float_array(X, ndim=2, name="X")
        y = as_float_array(y, name="y")
        if y.ndim == 1:
            y = y[:, None]
        if X.shape[0] != y.shape[0]:
            raise ValueError("X and y must have the same number of rows")
        rng = check_rng(self.random_state)
        self.net_ = Mlp([X.shape[1], *self.hidden_dims, y.shape[1]],
                        activation=self.activation, rng=rng)
        self.loss_history_ = fit_regression(
            self.net_, X, y, epochs=self.epochs, batch_size=self.batch_size,
            learning_rate=self.learning_rate, rng=rng)
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X):
        if not hasattr(self, "net_"):
            raise NotFittedError("this regressor is not fitted yet; call fit first")
        X = as_float_array(X, ndim=2, name="X")
        return self.net_.forward(X)

    def action(self, x, x_next):
        """Single-pair convenience matching the analytic inverse dynamics API."""
        features = np.concatenate([np.asarray(x, float), np.asarray(x_next, float)])
        return self.predict(features[None, :])[0]

    def save(self, path):
        if not hasattr(self, "net_"):
            raise NotFittedError("fit before saving")
        record = {
            "format_version": CHECKPOINT_VERSION,
            "kind": "inverse_dynamics",
            "params": {k: (list(v) if isinstance(v, tuple) else v)
                       for k, v in self.get_params().items()},
            "net": _net_record(self.net_),
        }
        Path(path).write_text(json.dumps(record))

    @classmethod
    def load(cls, path):
        record = json.loads(Path(path).read_text())
        if record.get("format_version") != CHECKPOINT_VERSION or \
                record.get("kind") != "inverse_dynamics":
            raise ValueError(f"not an inverse-dynamics checkpoint: {path}")
        params = dict(record["params"])
        params["hidden_dims"] = tuple(params["hidden_dims"])
        reg = cls(**params)
        reg.net_ = _net_from_record(record["net"])
        reg.n_features_in_ = reg.net_.in_dim
        reg.loss_history_ = np.zeros(0)
        return reg
