"""Expert trajectory datasets: normalization stats and structured-text I/O."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ._validation import as_float_array

__all__ = ["ExpertDataset", "save_dataset", "load_dataset"]


@dataclass
class ExpertDataset:
    """Fixed-horizon state trajectories plus per-dimension affine stats.

    ``trajectories`` has shape (n, horizon+1, state_dim). ``mean``/``scale``
    are per state-dimension; normalized data is (x - mean) / scale.
    """

    trajectories: np.ndarray
    mean: np.ndarray
    scale: np.ndarray

    def __post_init__(self):
        self.trajectories = as_float_array(self.trajectories, ndim=3, name="trajectories")
        self.mean = as_float_array(self.mean, ndim=1, name="mean")
        self.scale = as_float_array(self.scale, ndim=1, name="scale")
        sdim = self.trajectories.shape[2]
        if self.mean.shape != (sdim,) or self.scale.shape != (sdim,):
            raise ValueError("stats must match the state dimension")
        if np.any(self.scale <= 0.0):
            raise ValueError("scale entries must be strictly positive")

    @classmethod
    def from_trajectories(cls, trajectories):
        """Compute per-dimension mean/std stats over all states."""
        trajectories = as_float_array(trajectories, ndim=3, name="trajectories")
        if trajectories.shape[0] == 0:
            raise ValueError("dataset must contain at least one trajectory")
        flat = trajectories.reshape(-1, trajectories.shape[2])
        mean = flat.mean(axis=0)
        scale = flat.std(axis=0)
        scale = np.where(scale < 1e-8, 1.0, scale)
        return cls(trajectories=trajectories, mean=mean, scale=scale)

    @property
    def n_trajectories(self):
        return self.trajectories.shape[0]

    @property
    def horizon(self):
        """Number of transitions (states per trajectory minus one)."""
        return self.trajectories.shape[1] - 1

    @property
    def state_dim(self):
        return self.trajectories.shape[2]

    @property
    def flat_dim(self):
        return (self.horizon + 1) * self.state_dim

    def flat_mean(self):
        return np.tile(self.mean, self.horizon + 1)

    def flat_scale(self):
        return np.tile(self.scale, self.horizon + 1)

    def normalized_flat(self):
        """Trajectories normalized per dimension and flattened to (n, flat_dim)."""
        normed = (self.trajectories - self.mean) / self.scale
        return normed.reshape(self.n_trajectories, -1)


def save_dataset(dataset, path):
    """Structured text: a stats header line, then one JSON record per trajectory."""
    lines = [json.dumps({
        "kind": "stats",
        "state_dim": dataset.state_dim,
        "horizon": dataset.horizon,
        "mean": dataset.mean.tolist(),
        "scale": dataset.scale.tolist(),
    })]
    for traj in dataset.trajectories:
        lines.append(json.dumps({"kind": "trajectory", "states": traj.tolist()}))
    Path(path).write_text("\n".join(lines) + "\n")


def load_dataset(path):
    lines = Path(path).read_text().splitlines()
    if not lines:
        raise ValueError(f"dataset file {path} is empty")
    header = json.loads(lines[0])
    if header.get("kind") != "stats":
        raise ValueError("dataset file must start with a stats header record")
    trajs = []
    for line in lines[1:]:
        if not line.strip():
            continue
        record = json.loads(line)
        if record.get("kind") != "trajectory":
            raise ValueError(f"unexpected record kind: {record.get('kind')!r}")
        trajs.append(record["states"])
    if not trajs:
        raise ValueError(f"dataset file {path} holds no trajectories")
    return ExpertDataset(
        trajectories=np.asarray(trajs, dtype=float),
        mean=np.asarray(header["mean"], dtype=float),
        scale=np.asarray(header["scale"], dtype=float),
    )
