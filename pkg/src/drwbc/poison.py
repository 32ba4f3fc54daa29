"""Contamination generators: reward inversion, state noise, successor shuffling
and clipped action noise, applied to a seeded, nested subset of trajectories."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .trajdata import POISON_KINDS, Dataset, Trajectory

_KIND_CODE = {k: i for i, k in enumerate(POISON_KINDS)}


@dataclass(frozen=True)
class ContaminationSpec:
    kind: str
    alpha: float
    seed: int = 0
    sigma_s_scale: float = 0.05
    sigma_a_scale: float = 0.8
    transition_shuffle_fraction: float = 0.5

    def __post_init__(self):
        if self.kind not in POISON_KINDS:
            raise ValueError(f"unknown poisoning kind {self.kind!r}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if self.sigma_s_scale < 0 or self.sigma_a_scale < 0:
            raise ValueError("noise scales must be >= 0")
        if not 0.0 < self.transition_shuffle_fraction <= 1.0:
            raise ValueError("transition_shuffle_fraction must lie in (0, 1]")


def select_poison_set(n: int, alpha: float, seed: int) -> np.ndarray:
    """Sorted indices of the ``round(alpha * n)`` trajectories to poison.

    Indices are ranked by one seeded permutation and a prefix is taken, so
    for a fixed seed the set at a smaller alpha is contained in the set at
    any larger alpha.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    k = int(round(alpha * n))
    order = np.random.default_rng(seed).permutation(n)
    return np.sort(order[:k])


def trajectory_rng(seed: int, traj_id: int, salt: int = 0) -> np.random.Generator:
    # ids may be negative in hand-built data; SeedSequence wants non-negative words
    return np.random.default_rng([int(seed), int(salt), abs(int(traj_id)), int(traj_id < 0)])


def poison_reward(traj: Trajectory) -> Trajectory:
    r = traj.rewards
    return traj.replace(rewards=np.where(r > 0, -r, r), tag="reward")


def poison_state(traj: Trajectory, sigma_s_scale: float, feature_std, rng: np.random.Generator) -> Trajectory:
    """Add ``N(0, (sigma_s_scale * feature_std)^2)`` noise to every state, terminal included."""
    scale = sigma_s_scale * np.asarray(feature_std, dtype=np.float64)
    eta = rng.standard_normal(traj.states.shape) * scale
    return traj.replace(states=traj.states + eta, tag="state")


def poison_transition(traj: Trajectory, shuffle_fraction: float, rng: np.random.Generator) -> Trajectory:
    """Permute the successor states of the last ``ceil(shuffle_fraction * T)`` steps.

    Successors live in the single state sequence, so rows ``T-m+1 .. T`` of
    ``states`` are permuted among themselves; the input state of the step
    following a shuffled successor is therefore the shuffled value too. The
    permutation is redrawn until it moves at least one row, so a poisoned
    trajectory is never silently left intact when ``m >= 2``.
    """
    T = traj.T
    if T < 2:
        raise ValueError("nothing to shuffle: trajectory has fewer than 2 steps")
    m = min(T, math.ceil(shuffle_fraction * T))
    perm = rng.permutation(m)
    while m > 1 and np.all(perm == np.arange(m)):
        perm = rng.permutation(m)
    states = traj.states.copy()
    lo = T + 1 - m
    states[lo:] = traj.states[lo:][perm]
    return traj.replace(states=states, tag="transition")


def poison_action(traj: Trajectory, sigma_a_scale: float, action_range, rng: np.random.Generator,
                  a_min: float, a_max: float) -> Trajectory:
    """``a' = clip(a + sigma_a_scale * action_range * eps, a_min, a_max)``, eps standard normal."""
    eps = rng.standard_normal(traj.actions.shape)
    noisy = traj.actions + sigma_a_scale * np.asarray(action_range, dtype=np.float64) * eps
    return traj.replace(actions=np.clip(noisy, a_min, a_max), tag="action")


def feature_std(data: Dataset) -> np.ndarray:
    """Per-dimension standard deviation of every stored state in the dataset."""
    return np.concatenate([tr.states for tr in data]).std(axis=0)


def apply_contamination(data: Dataset, spec: ContaminationSpec) -> Dataset:
    """Poison exactly the ``select_poison_set`` trajectories with ``spec.kind``.

    Noise statistics come from the whole pre-poisoning dataset. Each poisoned
    trajectory draws from its own stream keyed by ``(seed, trajectory id)``.
    Untouched trajectories are passed through as-is.
    """
    if len(data) == 0:
        return data.with_trajectories((), alpha_applied=spec.alpha)
    chosen = set(select_poison_set(len(data), spec.alpha, spec.seed).tolist())
    f_std = feature_std(data) if spec.kind == "state" else None
    a_range = np.full(data.d_a, data.action_range)
    out = []
    for i, tr in enumerate(data):
        if i not in chosen:
            out.append(tr)
            continue
        rng = trajectory_rng(spec.seed, tr.id, _KIND_CODE[spec.kind])
        if spec.kind == "reward":
            out.append(poison_reward(tr))
        elif spec.kind == "state":
            out.append(poison_state(tr, spec.sigma_s_scale, f_std, rng))
        elif spec.kind == "transition":
            out.append(poison_transition(tr, spec.transition_shuffle_fraction, rng))
        else:
            out.append(poison_action(tr, spec.sigma_a_scale, a_range, rng, data.a_min, data.a_max))
    return data.with_trajectories(out, alpha_applied=float(spec.alpha))
