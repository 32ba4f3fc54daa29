"""Weighted behavioral cloning on a Gaussian policy.

Each minibatch element is a whole trajectory carrying one frozen weight; the
loss of a batch ``B`` is ``(1/|B|) * sum_j w_j * sum_t nll(s_t, a_t)``.
Traditional BC is the same trainer with every weight equal to one.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Optional, Sequence

import numpy as np

from .nnkit import AdamState, GaussianPolicyParams, adam_step, gaussian_nll_batch, init_policy, mlp_forward
from .trajdata import Dataset, Trajectory


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 300
    batch_size: int = 16
    lr: float = 3e-4
    seed: int = 0
    hidden: tuple = (64, 64)
    init_log_std: float = 0.0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or not self.lr > 0:
            raise ValueError("epochs, batch_size and lr must be positive")


@dataclass
class TrainingCurve:
    epochs: list
    mean_loss: list

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write("epoch,mean_loss\n")
            for e, l in zip(self.epochs, self.mean_loss):
                fh.write(f"{e},{l!r}\n")


def _lookup(weights: Optional[Mapping], ids: Sequence[int]) -> np.ndarray:
    if weights is None:
        return np.ones(len(ids))
    out = np.empty(len(ids))
    for k, tid in enumerate(ids):
        try:
            out[k] = weights[tid]
        except KeyError:
            raise KeyError(f"no weight for trajectory id {tid}") from None
    return out


class _StepIndex:
    """Flat (s_t, a_t) arrays plus per-trajectory row ranges for fast batch gathering."""

    def __init__(self, trajectories: Sequence[Trajectory]):
        self.states = np.concatenate([tr.states[:-1] for tr in trajectories])
        self.actions = np.concatenate([tr.actions for tr in trajectories])
        lengths = np.array([tr.T for tr in trajectories], dtype=np.int64)
        self.lengths = lengths
        self.starts = np.concatenate([[0], np.cumsum(lengths)[:-1]]).astype(np.int64)

    def rows(self, traj_idx: np.ndarray) -> np.ndarray:
        return np.concatenate(
            [np.arange(self.starts[i], self.starts[i] + self.lengths[i]) for i in traj_idx]
        )


def _batch_loss(policy, index: _StepIndex, traj_idx, traj_w):
    rows = index.rows(traj_idx)
    row_w = np.repeat(traj_w, index.lengths[traj_idx]) / len(traj_idx)
    return gaussian_nll_batch(policy, index.states[rows], index.actions[rows], row_w)


def wbc_loss(policy: GaussianPolicyParams, trajectories: Sequence[Trajectory],
             weights: Optional[Mapping] = None):
    """Weighted BC loss over a batch of whole trajectories and its gradients.

    ``weights`` maps trajectory id to weight; ``None`` means uniform weights.
    """
    trajectories = list(trajectories)
    if not trajectories:
        raise ValueError("empty batch")
    w = _lookup(weights, [tr.id for tr in trajectories])
    index = _StepIndex(trajectories)
    return _batch_loss(policy, index, np.arange(len(trajectories)), w)


def batch_schedule(n: int, batch_size: int, epochs: int, seed: int):
    """Yield ``(epoch, batch_indices)`` from a per-epoch seeded permutation."""
    rng = np.random.default_rng(seed)
    for epoch in range(epochs):
        perm = rng.permutation(n)
        for lo in range(0, n, batch_size):
            yield epoch, perm[lo:lo + batch_size]


def train_policy(main: Dataset, weights: Optional[Mapping], config: TrainConfig):
    """Minibatch Adam on the weighted BC loss; returns ``(policy, curve)``.

    ``weights=None`` gives Traditional BC. The weights are read once up front
    and never change during training.
    """
    if len(main) == 0:
        raise ValueError("cannot train on an empty dataset")
    traj_w = _lookup(weights, main.ids)
    traj_w.flags.writeable = False
    index = _StepIndex(main.trajectories)
    policy = init_policy(
        main.d_s, main.d_a, config.seed, config.hidden, main.a_min, main.a_max, config.init_log_std
    )
    opt = AdamState.zeros_like(policy, config.lr)
    curve = TrainingCurve([], [])
    epoch_losses = []
    current = 0
    sched_seed = np.random.SeedSequence([int(config.seed), 1]).generate_state(1)[0]
    for epoch, idx in batch_schedule(len(main), config.batch_size, config.epochs, int(sched_seed)):
        if epoch != current:
            curve.epochs.append(current)
            curve.mean_loss.append(float(np.mean(epoch_losses)))
            epoch_losses, current = [], epoch
        loss, grads = _batch_loss(policy, index, idx, traj_w[idx])
        if not np.isfinite(loss):
            raise FloatingPointError(f"non-finite loss at epoch {epoch}, batch starting {idx[0]}")
        policy, opt = adam_step(policy, grads, opt)
        epoch_losses.append(loss)
    curve.epochs.append(current)
    curve.mean_loss.append(float(np.mean(epoch_losses)))
    return policy, curve


def greedy_action(policy: GaussianPolicyParams, state) -> np.ndarray:
    """Mean action clipped to the policy's bounds; accepts one state or a batch."""
    mu = mlp_forward(policy.trunk, state)
    if not np.all(np.isfinite(mu)):
        raise ValueError("policy produced a non-finite action")
    return np.clip(mu, policy.a_min, policy.a_max)


def as_controller(policy: GaussianPolicyParams):
    return lambda states: greedy_action(policy, states)
