"""Exact discrete mixture world for auditing the clean-risk bounds.

Trajectories are short sequences of (state, action) indices from a tiny
tabular MDP, so every distribution over them is an explicit probability
vector and every expectation is a finite sum. The finite-sample bound
audited here is

    sup_pi |L_wbc(pi) - L_clean(pi)|
        <= 2 C Rad_N + B sqrt(2 C^2 log(2/delta) / N) + B (1 + C)^2 delta_d + B E_clip

and its excess-risk counterpart for the empirical weighted minimizer.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.special import expit
from scipy.stats import binom

from .nnkit import AdamState, adam_step, init_params, mlp_forward
from .ratio import balanced_bce, clip_weight, ratio_from_score

PROB_TOL = 1e-12
LOSS_BOUND = 10.0


class AbsoluteContinuityError(ValueError):
    pass


@dataclass
class OracleMixture:
    trajectory_space: list
    p_clean: np.ndarray
    p_bad: np.ndarray
    alpha: float

    def __post_init__(self):
        self.p_clean = np.asarray(self.p_clean, dtype=np.float64)
        self.p_bad = np.asarray(self.p_bad, dtype=np.float64)
        K = len(self.trajectory_space)
        if self.p_clean.shape != (K,) or self.p_bad.shape != (K,):
            raise ValueError("probability vectors must have one entry per trajectory")
        for name, p in (("p_clean", self.p_clean), ("p_bad", self.p_bad)):
            if p.min() < 0 or abs(p.sum() - 1.0) > PROB_TOL:
                raise ValueError(f"{name} is not a probability vector")
        if not 0.0 <= self.alpha < 1.0:
            raise ValueError("alpha must lie in [0, 1)")

    @property
    def K(self) -> int:
        return len(self.trajectory_space)

    @property
    def p(self) -> np.ndarray:
        return (1.0 - self.alpha) * self.p_clean + self.alpha * self.p_bad

    def sample(self, n: int, rng: np.random.Generator, clean: bool = False) -> np.ndarray:
        probs = self.p_clean if clean else self.p
        return rng.choice(self.K, size=n, p=probs / probs.sum())


def enumerate_trajectories(n_states: int, n_actions: int, horizon: int) -> list:
    """Every sequence of ``horizon`` (state, action) pairs."""
    pairs = list(itertools.product(range(n_states), range(n_actions)))
    return [tuple(seq) for seq in itertools.product(pairs, repeat=horizon)]


def random_mixture(rng: np.random.Generator, alpha: float, n_states: int = 2, n_actions: int = 2,
                   horizon: int = 2, clean_support: float = 0.6, overlap: bool = True) -> OracleMixture:
    """Random clean/bad distributions over an enumerated trajectory space.

    The clean distribution lives on a random subset of the items; the bad one
    either covers everything (``overlap``) or only the complement.
    """
    space = enumerate_trajectories(n_states, n_actions, horizon)
    K = len(space)
    support = rng.random(K) < clean_support
    if not support.any():
        support[rng.integers(K)] = True
    p_clean = np.where(support, rng.dirichlet(np.ones(K)), 0.0)
    p_clean /= p_clean.sum()
    bad_mask = np.ones(K, bool) if overlap or support.all() else ~support
    p_bad = np.where(bad_mask, rng.dirichlet(np.ones(K)), 0.0)
    p_bad /= p_bad.sum()
    return OracleMixture(space, p_clean, p_bad, alpha)


def exact_wstar(m: OracleMixture) -> np.ndarray:
    """``p_clean / p`` per item, 0 where both vanish."""
    p = m.p
    bad = (p <= 0) & (m.p_clean > 0)
    if bad.any():
        raise AbsoluteContinuityError(
            f"p_clean puts mass on items {np.flatnonzero(bad).tolist()} where p is zero"
        )
    return np.divide(m.p_clean, p, out=np.zeros(m.K), where=p > 0)


def exact_dstar(m: OracleMixture) -> np.ndarray:
    """Bayes-optimal balanced score ``p_clean / (p_clean + p)``."""
    total = m.p_clean + m.p
    return np.divide(m.p_clean, total, out=np.zeros(m.K), where=total > 0)


def exact_eclip(m: OracleMixture, eps: float, cap: float) -> float:
    """``E_p[(w* - cap)_+ + (eps - w*)_+]`` over items with ``p > 0``."""
    w = exact_wstar(m)
    p = m.p
    on = p > 0
    excess = np.maximum(w - cap, 0.0) + np.maximum(eps - w, 0.0)
    return float(np.sum(p[on] * excess[on]))


def delta_d(m: OracleMixture, scores) -> float:
    """``E_p |scores - d*|``."""
    scores = np.asarray(scores, dtype=np.float64)
    return float(np.sum(m.p * np.abs(scores - exact_dstar(m))))


def clipped_weights(scores, eps: float, cap: float) -> np.ndarray:
    return np.asarray(clip_weight(ratio_from_score(scores), eps, cap))


@dataclass
class FinitePolicyClass:
    """Tabular policies and their per-item trajectory losses, clipped to ``[0, B]``."""

    losses: np.ndarray
    B: float = LOSS_BOUND
    tables: list = field(default_factory=list)

    def __post_init__(self):
        self.losses = np.atleast_2d(np.asarray(self.losses, dtype=np.float64))
        if self.losses.min() < 0 or self.losses.max() > self.B:
            raise ValueError("losses must lie in [0, B]")

    def __len__(self) -> int:
        return len(self.losses)


def trajectory_nll(table: np.ndarray, traj) -> float:
    return float(-sum(np.log(table[s, a]) for s, a in traj))


def tabular_policy_class(space: Sequence, n_policies: int, rng: np.random.Generator,
                         B: float = LOSS_BOUND, temperature: float = 1.5) -> FinitePolicyClass:
    """Softmax-of-random-logits policies with losses ``min(sum_t -log pi(a_t|s_t), B)``."""
    n_states = 1 + max(s for traj in space for s, _ in traj)
    n_actions = 1 + max(a for traj in space for _, a in traj)
    tables, losses = [], []
    for _ in range(n_policies):
        logits = temperature * rng.standard_normal((n_states, n_actions))
        table = np.exp(logits - logits.max(axis=1, keepdims=True))
        table /= table.sum(axis=1, keepdims=True)
        tables.append(table)
        losses.append([min(trajectory_nll(table, traj), B) for traj in space])
    return FinitePolicyClass(np.array(losses), B, tables)


def clean_risk(m: OracleMixture, fc: FinitePolicyClass, policy: Optional[int] = None):
    """Exact ``E_{p_clean}[loss]`` for one policy, or for all when ``policy`` is None."""
    risks = fc.losses @ m.p_clean
    return risks if policy is None else float(risks[policy])


def weighted_empirical_risk(sample, weights, fc: FinitePolicyClass, policy: Optional[int] = None):
    """``(1/N) sum_i w_i loss(tau_i)`` for the sampled item indices."""
    sample = np.asarray(sample)
    weights = np.asarray(weights, dtype=np.float64)
    risks = fc.losses[:, sample] @ weights / len(sample)
    return risks if policy is None else float(risks[policy])


def _sup_over_class(fc: FinitePolicyClass, sample, signs: np.ndarray) -> np.ndarray:
    return (signs @ fc.losses[:, sample].T / len(sample)).max(axis=1)


def rademacher_mc(fc: FinitePolicyClass, sample, n_sign_draws: int, rng: np.random.Generator):
    """Monte-Carlo ``E_sigma[sup_pi (1/N) sum_i sigma_i loss(tau_i)]``; returns ``(estimate, std_error)``."""
    sample = np.asarray(sample)
    signs = rng.choice([-1.0, 1.0], size=(n_sign_draws, len(sample)))
    sups = _sup_over_class(fc, sample, signs)
    se = float(sups.std(ddof=1) / math.sqrt(n_sign_draws)) if n_sign_draws > 1 else 0.0
    return float(sups.mean()), se


def rademacher_exact(fc: FinitePolicyClass, sample) -> float:
    """Same expectation by enumerating all ``2^N`` sign vectors (small N only)."""
    n = len(sample)
    if n > 16:
        raise ValueError("exhaustive enumeration is limited to N <= 16")
    signs = np.array(list(itertools.product([-1.0, 1.0], repeat=n)))
    return float(_sup_over_class(fc, np.asarray(sample), signs).mean())


def t1_rhs(rad: float, B: float, cap: float, N: int, delta: float, dd: float, eclip: float) -> float:
    return (
        2.0 * cap * rad
        + B * math.sqrt(2.0 * cap**2 * math.log(2.0 / delta) / N)
        + B * (1.0 + cap) ** 2 * dd
        + B * eclip
    )


def t2_rhs(rad: float, B: float, cap: float, N: int, delta: float, dd: float, eclip: float,
           eta: float = 0.0) -> float:
    return (
        4.0 * cap * rad
        + 2.0 * B * math.sqrt(2.0 * cap**2 * math.log(4.0 / delta) / N)
        + 2.0 * B * (1.0 + cap) ** 2 * dd
        + 2.0 * B * eclip
        + eta
    )


def binomial_upper(trials: int, rate: float, level: float = 0.99) -> float:
    """Upper ``level`` quantile of the violation frequency under ``Binomial(trials, rate)``."""
    return float(binom.ppf(level, trials, rate) / trials)


@dataclass
class BoundReport:
    gaps: np.ndarray
    bounds: np.ndarray
    excess: np.ndarray
    excess_bounds: np.ndarray
    rademacher: np.ndarray
    delta: float
    delta_d: float
    e_clip: float

    @property
    def violations(self) -> np.ndarray:
        return self.gaps > self.bounds

    @property
    def violation_rate(self) -> float:
        return float(self.violations.mean())

    @property
    def excess_violation_rate(self) -> float:
        return float((self.excess > self.excess_bounds).mean())

    @property
    def allowed_rate(self) -> float:
        return binomial_upper(len(self.gaps), self.delta)

    def rows(self):
        for i in range(len(self.gaps)):
            yield {
                "trial": i,
                "gap": float(self.gaps[i]),
                "bound": float(self.bounds[i]),
                "violated": int(self.violations[i]),
                "excess_risk": float(self.excess[i]),
                "excess_bound": float(self.excess_bounds[i]),
                "rademacher": float(self.rademacher[i]),
            }


def t1_bound_check(m: OracleMixture, fc: FinitePolicyClass, eps: float, cap: float, N: int,
                   delta: float, trials: int, seed: int = 0, scores=None,
                   n_sign_draws: int = 200) -> BoundReport:
    """Audit the uniform bound and the excess-risk bound over repeated samples.

    ``scores`` are per-item discriminator outputs; the exact Bayes scores are
    used when omitted. The empirical minimizer is found exhaustively, so the
    optimization slack is zero.
    """
    if scores is None:
        scores = exact_dstar(m)
    scores = np.asarray(scores, dtype=np.float64)
    w_items = clipped_weights(scores, eps, cap)
    dd = delta_d(m, scores)
    ec = exact_eclip(m, eps, cap)
    true_risk = clean_risk(m, fc)
    best = true_risk.min()
    rng = np.random.default_rng(seed)
    gaps, bounds, excess, ex_bounds, rads = [], [], [], [], []
    for _ in range(trials):
        sample = m.sample(N, rng)
        emp = weighted_empirical_risk(sample, w_items[sample], fc)
        rad, _ = rademacher_mc(fc, sample, n_sign_draws, rng)
        gaps.append(float(np.max(np.abs(emp - true_risk))))
        bounds.append(t1_rhs(rad, fc.B, cap, N, delta, dd, ec))
        excess.append(float(true_risk[int(np.argmin(emp))] - best))
        ex_bounds.append(t2_rhs(rad, fc.B, cap, N, delta, dd, ec))
        rads.append(rad)
    return BoundReport(np.array(gaps), np.array(bounds), np.array(excess), np.array(ex_bounds),
                       np.array(rads), delta, dd, ec)


def train_item_discriminator(m: OracleMixture, n: int, seed: int = 0, steps: int = 3000,
                             lr: float = 0.05) -> np.ndarray:
    """Fit a one-hot logistic discriminator on ``n`` clean vs ``n`` mixture samples.

    Returns the fitted score for every item in the trajectory space.
    """
    rng = np.random.default_rng(seed)
    eye = np.eye(m.K)
    x_ref = eye[m.sample(n, rng, clean=True)]
    x_main = eye[m.sample(n, rng)]
    net = init_params([m.K, 1], seed)
    net.weights[0][:] = 0.0
    opt = AdamState.zeros_like(net, lr)
    for _ in range(steps):
        _, grads = balanced_bce(net, x_ref, x_main)
        net, opt = adam_step(net, grads, opt)
    z = mlp_forward(net, eye)[:, 0]
    return expit(z)
