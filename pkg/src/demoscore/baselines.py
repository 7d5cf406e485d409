"""Comparison methods that also reuse the initial policy's rollouts."""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np

from .curator import SUCCESS_CUTOFF
from .datamodel import DemoDataset, Trajectory, load_jsonl, read_jsonl, save_jsonl
from .policy import MdnPolicy, episode_nll

log = logging.getLogger(__name__)

RCP_INPUT_WIDTH = 4


def successful_rollouts(rollout_sets) -> list[Trajectory]:
    return [t for rs in rollout_sets for t in rs if t.outcome >= SUCCESS_CUTOFF]


def auto_il_dataset(demos: DemoDataset, rollout_sets) -> DemoDataset:
    """All demos plus every successful rollout, unfiltered."""
    added = [replace(t, outcome=1.0) for t in successful_rollouts(rollout_sets)]
    return DemoDataset(list(demos) + added, dict(demos.mixture), demos.env_config)


@dataclass
class RcpData:
    """Episodes with the constant per-episode return appended as a 4th input."""

    trajectories: list[Trajectory]
    returns: list[float]
    condition: float = 1.0  # return value fed at rollout time

    @property
    def input_width(self) -> int:
        return self.trajectories[0].states.shape[1] + 1 if self.trajectories else RCP_INPUT_WIDTH

    def conditioned_states(self) -> list[np.ndarray]:
        return [np.column_stack([t.states, np.full(len(t), r)]) for t, r in zip(self.trajectories, self.returns)]


def rcp_dataset_and_policy(demos: DemoDataset, rollout_sets) -> RcpData:
    """Demos (return 1) and every rollout (its own 0/1 outcome) for a return-conditioned policy."""
    trajs = list(demos)
    returns = [1.0] * len(trajs)
    for rs in rollout_sets:
        for t in rs:
            trajs.append(t)
            returns.append(1.0 if t.outcome >= SUCCESS_CUTOFF else 0.0)
    return RcpData(trajs, returns)


@dataclass
class WeightedDataset:
    dataset: DemoDataset
    weights: np.ndarray

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float)
        if len(self.weights) != len(self.dataset):
            raise ValueError("one weight per episode required")
        if not np.all(np.isfinite(self.weights)) or np.any(self.weights < 0):
            raise ValueError("weights must be finite and non-negative")
        if not np.any(self.weights > 0):
            raise ValueError("at least one weight must be positive")


def normalize_inverse_loss(mean_losses) -> np.ndarray:
    """Inverse-loss weights, shifted by their minimum and scaled by their std.

    Mean NLLs of a continuous-action policy can be negative; when any is
    non-positive all losses are shifted so the smallest equals 1 before
    inverting, which keeps the weight order the reverse of the loss order.
    If all weights are equal the std is zero and every weight becomes 1.
    """
    losses = np.asarray(mean_losses, dtype=float)
    if losses.min() <= 0.0:
        losses = losses - losses.min() + 1.0
    raw = 1.0 / losses
    shifted = raw - raw.min()
    sd = raw.std()
    if sd <= 1e-12 * max(1.0, abs(raw).max()):
        log.warning("all episode losses equal; using unit weights")
        return np.ones_like(raw)
    return shifted / sd


def loss_weighting(demos: DemoDataset, checkpoint: MdnPolicy) -> WeightedDataset:
    """Weight each demo by the normalized inverse of its mean per-step policy loss."""
    losses = [episode_nll(checkpoint, t) for t in demos]
    return WeightedDataset(demos, normalize_inverse_loss(losses))


def save_weighted(wd: WeightedDataset, path) -> int:
    return save_jsonl(wd.dataset, path, extra=[{"weight": float(w)} for w in wd.weights])


def load_weighted(path) -> WeightedDataset:
    ds = load_jsonl(path)
    _, rows = read_jsonl(path)
    return WeightedDataset(ds, [float(obj["weight"]) for _, obj in rows])
