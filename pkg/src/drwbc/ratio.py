"""Trajectory-level density-ratio weights from a reference-vs-main discriminator.

Stage 1 trains a logistic MLP on balanced batches (reference = label 1,
main = label 0). Stage 2 turns each main trajectory's score ``d`` into
``r = d / (1 - d)`` and clips it to ``[eps, cap]``. The resulting
``WeightTable`` is read-only; weights are never renormalized.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from types import MappingProxyType
from typing import Iterator, Mapping, Optional, Sequence

import numpy as np
from scipy.special import expit
from scipy.stats import rankdata

from ._binio import Reader, Writer
from .nnkit import AdamState, MlpParams, adam_step, init_params, mlp_backward, mlp_forward, mlp_forward_cache
from .trajdata import Dataset, Trajectory

SCORE_CLAMP = 1e-7
NORM_FLOOR = 1e-8
FEATURE_MODES = ("mean_pool", "flatten", "mean_std")

WEIGHTS_MAGIC = b"DRWBCWT\x00"
WEIGHTS_VERSION = 1


def step_features(traj: Trajectory) -> np.ndarray:
    """Rows ``(s_t, a_t, r_t, s_{t+1})`` for every step."""
    return np.concatenate(
        [traj.states[:-1], traj.actions, traj.rewards[:, None], traj.states[1:]], axis=1
    )


@dataclass(frozen=True)
class TrajFeaturizer:
    """Fixed-length encoding of a trajectory for the discriminator.

    ``mean_pool`` averages the normalized per-step rows over time,
    ``mean_std`` appends their standard deviation over time, and
    ``flatten`` concatenates the rows of a fixed horizon ``T``.
    """

    mode: str = "mean_pool"
    mean: Optional[np.ndarray] = None
    std: Optional[np.ndarray] = None
    T: Optional[int] = None

    def __post_init__(self):
        if self.mode not in FEATURE_MODES:
            raise ValueError(f"unknown featurizer mode {self.mode!r}")

    @property
    def fitted(self) -> bool:
        return self.mean is not None

    def fit(self, trajectories: Sequence[Trajectory]) -> "TrajFeaturizer":
        rows = np.concatenate([step_features(tr) for tr in trajectories])
        std = np.maximum(rows.std(axis=0), NORM_FLOOR)
        T = trajectories[0].T
        if self.mode == "flatten" and any(tr.T != T for tr in trajectories):
            raise ValueError("flatten mode needs a fixed horizon")
        return replace(self, mean=rows.mean(axis=0), std=std, T=T)

    @property
    def dim(self) -> int:
        per = len(self.mean)
        return {"mean_pool": per, "mean_std": 2 * per, "flatten": per * (self.T or 0)}[self.mode]

    def __call__(self, traj: Trajectory) -> np.ndarray:
        return featurize(self, traj)


def featurize(f: TrajFeaturizer, traj: Trajectory) -> np.ndarray:
    if not f.fitted:
        raise ValueError("featurizer has not been fitted")
    z = (step_features(traj) - f.mean) / f.std
    if f.mode == "mean_pool":
        return z.mean(axis=0)
    if f.mode == "mean_std":
        return np.concatenate([z.mean(axis=0), z.std(axis=0)])
    if traj.T != f.T:
        raise ValueError(f"flatten featurizer expects T={f.T}, got {traj.T}")
    return z.ravel()


def featurize_many(f: TrajFeaturizer, trajectories: Sequence[Trajectory]) -> np.ndarray:
    return np.stack([featurize(f, tr) for tr in trajectories])


@dataclass(frozen=True)
class DiscriminatorConfig:
    epochs: int = 200
    batch_size: int = 256
    lr: float = 3e-4
    hidden: tuple = (64, 64)
    seed: int = 0
    mode: str = "mean_pool"


@dataclass
class Discriminator:
    net: MlpParams
    featurizer: TrajFeaturizer

    def logits(self, trajectories: Sequence[Trajectory]) -> np.ndarray:
        return mlp_forward(self.net, featurize_many(self.featurizer, trajectories))[:, 0]

    def scores(self, trajectories: Sequence[Trajectory]) -> np.ndarray:
        return expit(self.logits(trajectories))


def _softplus(z):
    return np.logaddexp(0.0, z)


def balanced_bce(net: MlpParams, x_ref: np.ndarray, x_main: np.ndarray):
    """``-mean log d(ref) - mean log(1 - d(main))`` and its parameter gradients."""
    x = np.concatenate([x_ref, x_main])
    z, cache = mlp_forward_cache(net, x)
    z = z[:, 0]
    n_r = len(x_ref)
    zr, zm = z[:n_r], z[n_r:]
    loss = float(np.mean(_softplus(-zr)) + np.mean(_softplus(zm)))
    dz = np.concatenate([(expit(zr) - 1.0) / n_r, expit(zm) / len(zm)])
    grads, _ = mlp_backward(net, cache, dz[:, None])
    return loss, grads


def _index_stream(n: int, rng: np.random.Generator) -> Iterator[int]:
    while True:
        yield from rng.permutation(n)


def train_discriminator(ref: Dataset, main: Dataset, config: DiscriminatorConfig = DiscriminatorConfig(),
                        featurizer: Optional[TrajFeaturizer] = None) -> Discriminator:
    """Fit the reference-vs-main classifier with equal-size per-class batches.

    One epoch is one pass over the larger class; the smaller class is cycled
    through fresh permutations. The per-class batch size is capped by the size
    of the smaller class.
    """
    if len(ref) == 0 or len(main) == 0:
        raise ValueError("both the reference and the main set need at least one trajectory")
    if set(ref.ids) & set(main.ids):
        raise ValueError("reference and main sets share trajectory ids")
    if featurizer is None:
        featurizer = TrajFeaturizer(config.mode).fit(list(ref) + list(main))
    x_ref = featurize_many(featurizer, ref.trajectories)
    x_main = featurize_many(featurizer, main.trajectories)
    net = init_params([featurizer.dim, *config.hidden, 1], config.seed)
    opt = AdamState.zeros_like(net, config.lr)
    rng = np.random.default_rng([int(config.seed), 2])
    b = min(config.batch_size, len(ref), len(main))
    n_batches = math.ceil(max(len(ref), len(main)) / b)
    ref_stream = _index_stream(len(ref), rng)
    main_stream = _index_stream(len(main), rng)
    for epoch in range(config.epochs):
        for _ in range(n_batches):
            ir = np.fromiter(ref_stream, dtype=np.int64, count=b)
            im = np.fromiter(main_stream, dtype=np.int64, count=b)
            loss, grads = balanced_bce(net, x_ref[ir], x_main[im])
            if not np.isfinite(loss):
                raise FloatingPointError(f"discriminator loss became non-finite at epoch {epoch}")
            net, opt = adam_step(net, grads, opt)
    return Discriminator(net, featurizer)


def ratio_from_score(d):
    """``d / (1 - d)`` after clamping ``d`` into ``[1e-7, 1 - 1e-7]``."""
    d = np.clip(np.asarray(d, dtype=np.float64), SCORE_CLAMP, 1.0 - SCORE_CLAMP)
    r = d / (1.0 - d)
    return float(r) if r.ndim == 0 else r


def clip_weight(r, eps: float = 1e-3, cap: float = 2.0):
    out = np.maximum(eps, np.minimum(np.asarray(r, dtype=np.float64), cap))
    return float(out) if out.ndim == 0 else out


class WeightTable(Mapping):
    """Frozen ``trajectory id -> weight`` map with the scores and ratios behind it."""

    def __init__(self, ids, scores, ratios, weights, eps: float, cap: float):
        ids = [int(i) for i in ids]
        if len(set(ids)) != len(ids):
            raise ValueError("trajectory id collision in weight table")
        arrays = [np.array(a, dtype=np.float64) for a in (scores, ratios, weights)]
        if any(len(a) != len(ids) for a in arrays):
            raise ValueError("ids, scores, ratios and weights differ in length")
        if len(ids) and (arrays[2].min() < eps or arrays[2].max() > cap):
            raise ValueError("weights outside [eps, cap]")
        for a in arrays:
            a.flags.writeable = False
        self._ids = tuple(ids)
        self.scores, self.ratios, self.weights = arrays
        self.eps = float(eps)
        self.cap = float(cap)
        self._map = MappingProxyType(dict(zip(ids, arrays[2].tolist())))

    frozen = True

    @property
    def ids(self) -> tuple:
        return self._ids

    def __getitem__(self, tid):
        return self._map[tid]

    def __iter__(self):
        return iter(self._ids)

    def __len__(self):
        return len(self._ids)

    def __eq__(self, other):
        if not isinstance(other, WeightTable):
            return NotImplemented
        return (
            self._ids == other._ids
            and (self.eps, self.cap) == (other.eps, other.cap)
            and all(a.tobytes() == b.tobytes() for a, b in zip(
                (self.scores, self.ratios, self.weights), (other.scores, other.ratios, other.weights)))
        )

    __hash__ = None

    def to_bytes(self) -> bytes:
        w = Writer(WEIGHTS_MAGIC, WEIGHTS_VERSION)
        w.f64(self.eps)
        w.f64(self.cap)
        w.u64(len(self))
        for tid in self._ids:
            w.i64(tid)
        w.array(self.scores)
        w.array(self.ratios)
        w.array(self.weights)
        return w.getvalue()

    @classmethod
    def from_bytes(cls, raw: bytes) -> "WeightTable":
        r = Reader(raw, WEIGHTS_MAGIC, WEIGHTS_VERSION)
        eps, cap = r.f64(), r.f64()
        n = r.u64()
        ids = [r.i64() for _ in range(n)]
        scores, ratios, weights = r.array((n,)), r.array((n,)), r.array((n,))
        r.expect_end()
        return cls(ids, scores, ratios, weights, eps, cap)

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "WeightTable":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            out = csv.writer(fh)
            out.writerow(["id", "score", "ratio", "weight"])
            for row in zip(self._ids, self.scores, self.ratios, self.weights):
                out.writerow([row[0]] + [repr(float(v)) for v in row[1:]])


def weights_from_scores(ids, scores, eps: float = 1e-3, cap: float = 2.0) -> WeightTable:
    scores = np.asarray(scores, dtype=np.float64)
    ratios = np.atleast_1d(ratio_from_score(scores))
    return WeightTable(ids, scores, ratios, np.atleast_1d(clip_weight(ratios, eps, cap)), eps, cap)


def compute_weights(disc: Discriminator, main: Dataset, eps: float = 1e-3, cap: float = 2.0) -> WeightTable:
    """Score every main trajectory once and freeze the clipped ratios."""
    return weights_from_scores(main.ids, disc.scores(main.trajectories), eps, cap)


def auroc(scores, labels) -> Optional[float]:
    """Probability that a positive outranks a negative (ties count half); None for one class."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    n_pos, n_neg = int(labels.sum()), int((~labels).sum())
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = rankdata(scores)
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def weight_separation_report(table: Mapping, main: Dataset) -> dict:
    """Mean weight per provenance and the AUROC of weights for "clean vs poisoned"."""
    w = np.array([table[tid] for tid in main.ids])
    clean = np.array([not tr.poisoned for tr in main])
    return {
        "mean_weight_clean": float(w[clean].mean()) if clean.any() else None,
        "mean_weight_poisoned": float(w[~clean].mean()) if (~clean).any() else None,
        "weight_auroc": auroc(w, clean),
    }
