"""Tiny deterministic point-mass environments with a PD expert.

State layout is ``(position..., velocity...)`` with one position/velocity pair
per action dimension; the action is an acceleration. Dynamics use a
semi-implicit Euler step (velocity first, then position). Reward is
``-|pos - goal| - 0.01 |a|^2`` evaluated at the pre-step state with the
clipped action, and returns are undiscounted sums over the horizon.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable, Optional

import numpy as np

from .trajdata import Dataset, Trajectory

ENV_IDS = ("point_mass_2d", "double_integrator_1d")

KP = 4.0
KD = 2.5
ACTION_COST = 0.01

# stream tags mixed into per-rollout seeds so generation and evaluation never share starts
_GEN_STREAM = 0
_EVAL_STREAM = 1
_RANDOM_STREAM = 2


@dataclass(frozen=True)
class EnvSpec:
    env_id: str
    T: int
    d_a: int
    a_min: float = -2.0
    a_max: float = 2.0
    noise_std: float = 0.2
    dt: float = 0.05
    goal: tuple = ()
    start_pos: tuple = (-1.0, 1.0)
    start_vel: tuple = (-0.5, 0.5)

    def __post_init__(self):
        if self.env_id not in ENV_IDS:
            raise ValueError(f"unknown env_id {self.env_id!r}")
        if self.T < 1:
            raise ValueError("horizon T must be >= 1")
        if not self.a_min < self.a_max:
            raise ValueError("a_min must be below a_max")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")
        if not self.goal:
            object.__setattr__(self, "goal", (0.0,) * self.d_a)
        object.__setattr__(self, "goal", tuple(float(g) for g in self.goal))
        if len(self.goal) != self.d_a:
            raise ValueError("goal must have one entry per action dimension")

    @property
    def d_s(self) -> int:
        return 2 * self.d_a

    @property
    def goal_array(self) -> np.ndarray:
        return np.asarray(self.goal, dtype=np.float64)


def make_env(env_id: str, **overrides) -> EnvSpec:
    """Preset environments; any EnvSpec field can be overridden."""
    if env_id == "point_mass_2d":
        base = EnvSpec("point_mass_2d", T=50, d_a=2, dt=0.05)
    elif env_id == "double_integrator_1d":
        base = EnvSpec("double_integrator_1d", T=30, d_a=1, dt=0.1)
    else:
        raise ValueError(f"unknown env_id {env_id!r}")
    if "noise_std" not in overrides:
        overrides["noise_std"] = 0.05 * (
            overrides.get("a_max", base.a_max) - overrides.get("a_min", base.a_min)
        )
    return replace(base, **overrides)


def _check_finite(name, x):
    if not np.all(np.isfinite(x)):
        raise ValueError(f"non-finite {name}")


def _step_batch(spec: EnvSpec, states: np.ndarray, actions: np.ndarray):
    k = spec.d_a
    a = np.clip(actions, spec.a_min, spec.a_max)
    pos, vel = states[:, :k], states[:, k:]
    dist = np.sqrt(np.sum((pos - spec.goal_array) ** 2, axis=1))
    reward = -dist - ACTION_COST * np.sum(a * a, axis=1)
    vel_next = vel + spec.dt * a
    pos_next = pos + spec.dt * vel_next
    return np.concatenate([pos_next, vel_next], axis=1), reward, a


def step(spec: EnvSpec, state, action, rng: Optional[np.random.Generator] = None):
    """Advance one state by one step; returns ``(next_state, reward)``.

    The action is clipped to the bounds. With ``rng`` given, Gaussian action
    noise of std ``spec.noise_std`` is added before clipping.
    """
    s = np.asarray(state, dtype=np.float64).reshape(1, spec.d_s)
    a = np.asarray(action, dtype=np.float64).reshape(1, spec.d_a)
    _check_finite("state", s)
    _check_finite("action", a)
    if rng is not None:
        a = a + spec.noise_std * rng.standard_normal(a.shape)
    nxt, r, _ = _step_batch(spec, s, a)
    return nxt[0], float(r[0])


def scripted_expert(spec: EnvSpec, state) -> np.ndarray:
    """PD law ``clip(KP (goal - pos) - KD vel)``; accepts one state or a batch."""
    s = np.asarray(state, dtype=np.float64)
    _check_finite("state", s)
    k = spec.d_a
    pos, vel = s[..., :k], s[..., k:]
    return np.clip(KP * (spec.goal_array - pos) - KD * vel, spec.a_min, spec.a_max)


def initial_states(spec: EnvSpec, seed: int, n: int, stream: int = _GEN_STREAM) -> np.ndarray:
    """Seeded uniform starts in a fixed box, one independent stream per index."""
    out = np.empty((n, spec.d_s))
    k = spec.d_a
    for i in range(n):
        rng = np.random.default_rng([int(seed), stream, i])
        out[i, :k] = rng.uniform(*spec.start_pos, size=k)
        out[i, k:] = rng.uniform(*spec.start_vel, size=k)
    return out


def rollout(spec: EnvSpec, policy: Callable, starts: np.ndarray, action_noise=None):
    """Run a batch of episodes in lockstep.

    ``policy`` maps a ``(n, d_s)`` state batch to ``(n, d_a)`` actions.
    ``action_noise`` of shape ``(n, T, d_a)`` is added to the policy output
    before clipping. Returns ``(states, actions, rewards)`` with the clipped
    actions that were actually applied.
    """
    n = len(starts)
    T = spec.T
    states = np.empty((n, T + 1, spec.d_s))
    actions = np.empty((n, T, spec.d_a))
    rewards = np.empty((n, T))
    states[:, 0] = starts
    for t in range(T):
        a = np.asarray(policy(states[:, t]), dtype=np.float64).reshape(n, spec.d_a)
        bad = ~np.all(np.isfinite(a), axis=1)
        if bad.any():
            raise ValueError(f"policy emitted non-finite action in rollout {int(np.argmax(bad))} at step {t}")
        if action_noise is not None:
            a = a + action_noise[:, t]
        states[:, t + 1], rewards[:, t], actions[:, t] = _step_batch(spec, states[:, t], a)
    return states, actions, rewards


@dataclass
class RolloutResult:
    return_sum: float
    trajectory: Trajectory
    success: bool


def rollout_results(spec: EnvSpec, states, actions, rewards, tol: float = 0.1) -> list:
    out = []
    for i in range(len(states)):
        tr = Trajectory(states[i], actions[i], rewards[i], id=i)
        final = np.linalg.norm(states[i, -1, : spec.d_a] - spec.goal_array)
        out.append(RolloutResult(float(np.sum(rewards[i])), tr, bool(final <= tol)))
    return out


def expert_policy(spec: EnvSpec) -> Callable:
    return lambda s: scripted_expert(spec, s)


def zero_policy(spec: EnvSpec) -> Callable:
    return lambda s: np.zeros((len(s), spec.d_a))


def generate_expert_dataset(spec: EnvSpec, n_traj: int, seed: int) -> Dataset:
    """Noisy PD demonstrations, all tagged clean; a pure function of ``(spec, n_traj, seed)``."""
    if n_traj < 1:
        raise ValueError("n_traj must be >= 1")
    starts = initial_states(spec, seed, n_traj, _GEN_STREAM)
    noise = np.empty((n_traj, spec.T, spec.d_a))
    for i in range(n_traj):
        rng = np.random.default_rng([int(seed), _GEN_STREAM, i, 1])
        noise[i] = spec.noise_std * rng.standard_normal((spec.T, spec.d_a))
    states, actions, rewards = rollout(spec, expert_policy(spec), starts, noise)
    trajs = [Trajectory(states[i], actions[i], rewards[i], id=i) for i in range(n_traj)]
    return Dataset(
        tuple(trajs), spec.env_id, int(seed), spec.d_s, spec.d_a, spec.a_min, spec.a_max
    )


def generate_random_dataset(spec: EnvSpec, n_traj: int, seed: int) -> Dataset:
    """Uniform-random-action episodes from the same start box (a sanity baseline)."""
    starts = initial_states(spec, seed, n_traj, _GEN_STREAM)
    acts = np.empty((n_traj, spec.T, spec.d_a))
    for i in range(n_traj):
        rng = np.random.default_rng([int(seed), _RANDOM_STREAM, i])
        acts[i] = rng.uniform(spec.a_min, spec.a_max, size=(spec.T, spec.d_a))
    states, actions, rewards = rollout(spec, zero_policy(spec), starts, acts)
    trajs = [Trajectory(states[i], actions[i], rewards[i], id=i) for i in range(n_traj)]
    return Dataset(
        tuple(trajs), spec.env_id, int(seed), spec.d_s, spec.d_a, spec.a_min, spec.a_max
    )


def evaluation_starts(spec: EnvSpec, n_rollouts: int, seed: int) -> np.ndarray:
    return initial_states(spec, seed, n_rollouts, _EVAL_STREAM)


def episode_returns(spec: EnvSpec, policy: Callable, n_rollouts: int, seed: int) -> np.ndarray:
    if n_rollouts < 1:
        raise ValueError("n_rollouts must be >= 1")
    starts = evaluation_starts(spec, n_rollouts, seed)
    _, _, rewards = rollout(spec, policy, starts)
    return rewards.sum(axis=1)


def evaluate_policy(spec: EnvSpec, policy: Callable, n_rollouts: int = 50, seed: int = 0):
    """Mean undiscounted return over seeded clean rollouts and its standard error.

    The standard error is 0 for a single rollout.
    """
    returns = episode_returns(spec, policy, n_rollouts, seed)
    mean = float(np.mean(returns))
    if n_rollouts == 1:
        return mean, 0.0
    return mean, float(np.std(returns, ddof=1) / np.sqrt(n_rollouts))


def floor_return(spec: EnvSpec, n_rollouts: int, seed: int) -> float:
    """Mean return of the do-nothing policy on the evaluation starts.

    From a start at rest this is ``-T * dist(start, goal)``; with nonzero
    start velocity it follows the drift.
    """
    return evaluate_policy(spec, zero_policy(spec), n_rollouts, seed)[0]
