"""Small float64 MLP toolkit: forward/backward, diagonal-Gaussian policy head,
Adam, seeded He-uniform init, finite-difference checks and checkpoints.

Parameter containers expose ``arrays()`` / ``from_arrays()`` so the optimizer
and the gradient checker can treat every model as a flat list of arrays in a
fixed order.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Sequence

import numpy as np

from ._binio import Reader, Writer

LOG_STD_MIN = -5.0
LOG_STD_MAX = 2.0
LOG_2PI = float(np.log(2.0 * np.pi))

CHECKPOINT_MAGIC = b"DRWBCNN\x00"
CHECKPOINT_VERSION = 1


@dataclass
class MlpParams:
    weights: List[np.ndarray]
    biases: List[np.ndarray]
    activation: str = "relu"

    def __post_init__(self):
        if self.activation not in ("relu", "tanh"):
            raise ValueError(f"unknown activation {self.activation!r}")
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValueError("need matching, non-empty weight and bias lists")
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            if W.ndim != 2 or b.shape != (W.shape[1],):
                raise ValueError(f"layer {i}: weight {W.shape} and bias {b.shape} do not match")
            if i and W.shape[0] != self.weights[i - 1].shape[1]:
                raise ValueError(f"layer {i} input dim does not chain with layer {i - 1}")

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[1]

    @property
    def sizes(self) -> list:
        return [self.in_dim] + [W.shape[1] for W in self.weights]

    def arrays(self) -> list:
        out = []
        for W, b in zip(self.weights, self.biases):
            out += [W, b]
        return out

    def from_arrays(self, arrays: Sequence[np.ndarray]) -> "MlpParams":
        return MlpParams(list(arrays[0::2]), list(arrays[1::2]), self.activation)


@dataclass
class GaussianPolicyParams:
    """Diagonal Gaussian policy: state-conditioned mean, state-independent log-std."""

    trunk: MlpParams
    log_std: np.ndarray
    a_min: float = -np.inf
    a_max: float = np.inf

    def __post_init__(self):
        self.log_std = np.asarray(self.log_std, dtype=np.float64)
        if self.log_std.shape != (self.trunk.out_dim,):
            raise ValueError("log_std must have one entry per action dimension")

    def project(self) -> "GaussianPolicyParams":
        """Clamp log-std into ``[LOG_STD_MIN, LOG_STD_MAX]``."""
        return GaussianPolicyParams(
            self.trunk, np.clip(self.log_std, LOG_STD_MIN, LOG_STD_MAX), self.a_min, self.a_max
        )

    @property
    def d_a(self) -> int:
        return self.trunk.out_dim

    def arrays(self) -> list:
        return self.trunk.arrays() + [self.log_std]

    def from_arrays(self, arrays: Sequence[np.ndarray]) -> "GaussianPolicyParams":
        return GaussianPolicyParams(
            self.trunk.from_arrays(arrays[:-1]), arrays[-1], self.a_min, self.a_max
        )


def _act(name, z):
    return np.maximum(z, 0.0) if name == "relu" else np.tanh(z)


def _act_grad(name, z, h):
    return (z > 0.0).astype(np.float64) if name == "relu" else 1.0 - h * h


def mlp_forward(p: MlpParams, x) -> np.ndarray:
    """Evaluate on one input vector or a ``(n, in_dim)`` batch."""
    out, _ = mlp_forward_cache(p, x)
    return out


def mlp_forward_cache(p: MlpParams, x):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    h = x[None, :] if single else x
    if h.shape[1] != p.in_dim:
        raise ValueError(f"input dim {h.shape[1]} does not match first layer {p.in_dim}")
    zs, hs = [], [h]
    last = len(p.weights) - 1
    for i, (W, b) in enumerate(zip(p.weights, p.biases)):
        z = h @ W + b
        zs.append(z)
        h = z if i == last else _act(p.activation, z)
        hs.append(h)
    return (h[0] if single else h), (zs, hs, single)


def mlp_backward(p: MlpParams, cache, dout) -> tuple:
    """Gradients of ``sum(dout * out)`` w.r.t. parameters and input."""
    zs, hs, single = cache
    delta = np.asarray(dout, dtype=np.float64)
    if single:
        delta = delta[None, :]
    grads_W = [None] * len(p.weights)
    grads_b = [None] * len(p.weights)
    for i in range(len(p.weights) - 1, -1, -1):
        if i != len(p.weights) - 1:
            delta = delta * _act_grad(p.activation, zs[i], hs[i + 1])
        grads_W[i] = hs[i].T @ delta
        grads_b[i] = delta.sum(axis=0)
        delta = delta @ p.weights[i].T
    dx = delta[0] if single else delta
    return MlpParams(grads_W, grads_b, p.activation), dx


def policy_mean(policy: GaussianPolicyParams, states) -> np.ndarray:
    return mlp_forward(policy.trunk, states)


def gaussian_nll_batch(policy: GaussianPolicyParams, states, actions, row_weights=None):
    """Weighted sum over rows of ``-log N(a | mu(s), diag(exp(2 log_std)))``.

    Returns ``(loss, grads)`` where ``grads`` is a ``GaussianPolicyParams`` of
    the same structure. ``row_weights`` defaults to all ones.
    """
    S = np.asarray(states, dtype=np.float64)
    A = np.asarray(actions, dtype=np.float64)
    if not (np.all(np.isfinite(S)) and np.all(np.isfinite(A))):
        raise ValueError("non-finite states or actions")
    if A.shape != (len(S), policy.d_a):
        raise ValueError(f"actions shape {A.shape} does not match ({len(S)}, {policy.d_a})")
    w = np.ones(len(S)) if row_weights is None else np.asarray(row_weights, dtype=np.float64)
    mu, cache = mlp_forward_cache(policy.trunk, S)
    inv_std = np.exp(-policy.log_std)
    z = (A - mu) * inv_std
    per_row = np.sum(policy.log_std + 0.5 * z * z, axis=1) + 0.5 * policy.d_a * LOG_2PI
    loss = float(w @ per_row)
    wz = w[:, None] * z
    dmu = -wz * inv_std
    dlog_std = w.sum() - np.sum(wz * z, axis=0)
    trunk_grads, _ = mlp_backward(policy.trunk, cache, dmu)
    return loss, GaussianPolicyParams(trunk_grads, dlog_std, policy.a_min, policy.a_max)


def gaussian_nll(policy: GaussianPolicyParams, s, a):
    """Single-pair negative log-likelihood and its exact gradients."""
    s = np.asarray(s, dtype=np.float64).reshape(1, -1)
    a = np.asarray(a, dtype=np.float64).reshape(1, -1)
    return gaussian_nll_batch(policy, s, a)


@dataclass
class AdamState:
    m: list
    v: list
    step: int = 0
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params, lr: float = 3e-4) -> "AdamState":
        arrays = params.arrays()
        return cls([np.zeros_like(a) for a in arrays], [np.zeros_like(a) for a in arrays], 0, lr)


def adam_step(params, grads, st: AdamState):
    """One bias-corrected Adam update; returns ``(new_params, new_state)``."""
    ps = params.arrays()
    gs = grads.arrays()
    if len(ps) != len(gs) or len(ps) != len(st.m):
        raise ValueError("parameter, gradient and moment lists differ in length")
    t = st.step + 1
    c1 = 1.0 - st.beta1**t
    c2 = 1.0 - st.beta2**t
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(ps, gs, st.m, st.v):
        if p.shape != g.shape or p.shape != m.shape:
            raise ValueError(f"shape mismatch: param {p.shape}, grad {g.shape}, moment {m.shape}")
        m = st.beta1 * m + (1.0 - st.beta1) * g
        v = st.beta2 * v + (1.0 - st.beta2) * (g * g)
        new_p.append(p - st.lr * (m / c1) / (np.sqrt(v / c2) + st.eps))
        new_m.append(m)
        new_v.append(v)
    state = AdamState(new_m, new_v, t, st.lr, st.beta1, st.beta2, st.eps)
    updated = params.from_arrays(new_p)
    if hasattr(updated, "project"):
        updated = updated.project()
    return updated, state


def init_params(sizes: Sequence[int], seed: int, activation: str = "relu") -> MlpParams:
    """He-uniform weights ``U(-sqrt(6/fan_in), sqrt(6/fan_in))``, zero biases."""
    if len(sizes) < 2 or any(int(s) < 1 for s in sizes):
        raise ValueError(f"invalid layer sizes {sizes}")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        lim = np.sqrt(6.0 / fan_in)
        weights.append(rng.uniform(-lim, lim, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return MlpParams(weights, biases, activation)


def init_policy(d_s: int, d_a: int, seed: int, hidden=(64, 64), a_min=-np.inf, a_max=np.inf,
                log_std: float = 0.0) -> GaussianPolicyParams:
    trunk = init_params([d_s, *hidden, d_a], seed)
    return GaussianPolicyParams(trunk, np.full(d_a, log_std), a_min, a_max).project()


def numeric_grad(loss_fn, params, h: float = 1e-5) -> list:
    """Central finite differences of ``loss_fn(params)`` over every entry."""
    arrays = [a.copy() for a in params.arrays()]
    out = []
    for k, a in enumerate(arrays):
        g = np.zeros_like(a)
        flat = a.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            up = loss_fn(params.from_arrays(arrays))
            flat[j] = orig - h
            down = loss_fn(params.from_arrays(arrays))
            flat[j] = orig
            g.reshape(-1)[j] = (up - down) / (2.0 * h)
        out.append(g)
    return out


def max_relative_error(analytic: Sequence[np.ndarray], numeric: Sequence[np.ndarray],
                       floor: float = 1e-6) -> float:
    """Largest ``|a - n| / max(|a|, |n|, floor)`` over all entries."""
    worst = 0.0
    for a, n in zip(analytic, numeric):
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst


def _write_mlp(w: Writer, p: MlpParams) -> None:
    w.text(p.activation)
    w.u32(len(p.weights))
    for W, b in zip(p.weights, p.biases):
        w.u32(W.shape[0])
        w.u32(W.shape[1])
        w.array(W)
        w.array(b)


def _read_mlp(r: Reader) -> MlpParams:
    act = r.text()
    n = r.u32()
    weights, biases = [], []
    for _ in range(n):
        fan_in, fan_out = r.u32(), r.u32()
        weights.append(r.array((fan_in, fan_out)))
        biases.append(r.array((fan_out,)))
    return MlpParams(weights, biases, act)


def save_checkpoint(params, path) -> None:
    """Write an ``MlpParams`` or ``GaussianPolicyParams`` in the binary envelope."""
    w = Writer(CHECKPOINT_MAGIC, CHECKPOINT_VERSION)
    if isinstance(params, GaussianPolicyParams):
        w.u8(1)
        _write_mlp(w, params.trunk)
        w.array(params.log_std)
        w.f64(params.a_min)
        w.f64(params.a_max)
    else:
        w.u8(0)
        _write_mlp(w, params)
    w.dump(path)


def load_checkpoint(path):
    r = Reader.open(path, CHECKPOINT_MAGIC, CHECKPOINT_VERSION)
    kind = r.u8()
    trunk = _read_mlp(r)
    if kind == 0:
        r.expect_end()
        return trunk
    if kind != 1:
        raise ValueError(f"unknown checkpoint kind {kind}")
    log_std = r.array((trunk.out_dim,))
    a_min, a_max = r.f64(), r.f64()
    r.expect_end()
    return GaussianPolicyParams(trunk, log_std, a_min, a_max)
