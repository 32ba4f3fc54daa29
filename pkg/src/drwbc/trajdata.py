"""Trajectories, datasets, reference splitting and the binary dataset format."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

from ._binio import Reader, Writer

POISON_KINDS = ("reward", "state", "transition", "action")
CLEAN = "clean"
TAGS = (CLEAN,) + POISON_KINDS

DATASET_MAGIC = b"DRWBCDS\x00"
DATASET_VERSION = 1


def _frozen(a, ndim: int) -> np.ndarray:
    arr = np.array(a, dtype=np.float64, copy=True)
    if arr.ndim != ndim:
        raise ValueError(f"expected a {ndim}-d array, got shape {arr.shape}")
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class Trajectory:
    """One episode: ``states`` has one more row than ``actions`` and ``rewards``.

    ``tag`` is ``"clean"`` or the poisoning kind that produced the trajectory.
    Arrays are copied and made read-only on construction.
    """

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    id: int = 0
    tag: str = CLEAN

    def __post_init__(self):
        s = _frozen(self.states, 2)
        a = _frozen(self.actions, 2)
        r = _frozen(self.rewards, 1)
        if len(s) != len(a) + 1 or len(a) != len(r):
            raise ValueError(
                f"length mismatch: {len(s)} states, {len(a)} actions, {len(r)} rewards"
            )
        if len(a) < 1:
            raise ValueError("trajectory needs at least one step")
        for name, arr in (("states", s), ("actions", a), ("rewards", r)):
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"non-finite entries in {name}")
        if self.tag not in TAGS:
            raise ValueError(f"unknown tag {self.tag!r}")
        object.__setattr__(self, "states", s)
        object.__setattr__(self, "actions", a)
        object.__setattr__(self, "rewards", r)
        object.__setattr__(self, "id", int(self.id))

    @property
    def T(self) -> int:
        return len(self.actions)

    @property
    def poisoned(self) -> bool:
        return self.tag != CLEAN

    def replace(self, **changes) -> "Trajectory":
        return replace(self, **changes)

    def __eq__(self, other):
        if not isinstance(other, Trajectory):
            return NotImplemented
        return (
            self.id == other.id
            and self.tag == other.tag
            and _bits_equal(self.states, other.states)
            and _bits_equal(self.actions, other.actions)
            and _bits_equal(self.rewards, other.rewards)
        )

    __hash__ = None


def _bits_equal(a: np.ndarray, b: np.ndarray) -> bool:
    return a.shape == b.shape and a.tobytes() == b.tobytes()


@dataclass(frozen=True, eq=False)
class Dataset:
    trajectories: tuple
    env_id: str
    seed: int
    d_s: int
    d_a: int
    a_min: float
    a_max: float
    alpha_applied: Optional[float] = None

    def __post_init__(self):
        trajs = tuple(self.trajectories)
        object.__setattr__(self, "trajectories", trajs)
        if not 0 <= int(self.seed) < 2**64:
            raise ValueError("seed must fit in 64 unsigned bits")
        if not self.a_min < self.a_max:
            raise ValueError("a_min must be below a_max")
        if self.alpha_applied is not None and not 0.0 <= self.alpha_applied <= 1.0:
            raise ValueError("alpha_applied must lie in [0, 1]")
        ids = set()
        for tr in trajs:
            if tr.states.shape[1] != self.d_s or tr.actions.shape[1] != self.d_a:
                raise ValueError(
                    f"trajectory {tr.id} has dims ({tr.states.shape[1]}, {tr.actions.shape[1]}), "
                    f"dataset expects ({self.d_s}, {self.d_a})"
                )
            if tr.actions.min() < self.a_min or tr.actions.max() > self.a_max:
                raise ValueError(f"trajectory {tr.id} has actions outside [a_min, a_max]")
            if tr.id in ids:
                raise ValueError(f"duplicate trajectory id {tr.id}")
            ids.add(tr.id)

    def __len__(self) -> int:
        return len(self.trajectories)

    def __iter__(self):
        return iter(self.trajectories)

    def __getitem__(self, i):
        return self.trajectories[i]

    @property
    def ids(self) -> list:
        return [tr.id for tr in self.trajectories]

    @property
    def action_range(self) -> float:
        return self.a_max - self.a_min

    def with_trajectories(self, trajectories, **changes) -> "Dataset":
        return replace(self, trajectories=tuple(trajectories), **changes)

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        head = (self.env_id, int(self.seed), self.d_s, self.d_a)
        if head != (other.env_id, int(other.seed), other.d_s, other.d_a):
            return False
        if np.float64(self.a_min).tobytes() != np.float64(other.a_min).tobytes():
            return False
        if np.float64(self.a_max).tobytes() != np.float64(other.a_max).tobytes():
            return False
        if (self.alpha_applied is None) != (other.alpha_applied is None):
            return False
        if self.alpha_applied is not None and (
            np.float64(self.alpha_applied).tobytes() != np.float64(other.alpha_applied).tobytes()
        ):
            return False
        return len(self) == len(other) and all(
            a == b for a, b in zip(self.trajectories, other.trajectories)
        )

    __hash__ = None


@dataclass(frozen=True)
class SplitSpec:
    ref_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.ref_fraction < 1.0:
            raise ValueError("ref_fraction must lie strictly between 0 and 1")


def split_reference(data: Dataset, spec: SplitSpec) -> tuple:
    """Partition ``data`` into a held-out reference set and the main set.

    The reference set gets ``round(ref_fraction * N)`` trajectories picked by a
    seeded permutation; both halves keep the original order and ids.
    """
    n = len(data)
    if n < 2:
        raise ValueError("dataset too small to split")
    m = int(round(spec.ref_fraction * n))
    if m == 0 or m == n:
        raise ValueError(
            f"ref_fraction={spec.ref_fraction} gives an empty split for N={n}"
        )
    rng = np.random.default_rng(spec.seed)
    chosen = np.zeros(n, dtype=bool)
    chosen[rng.permutation(n)[:m]] = True
    ref = [tr for tr, c in zip(data, chosen) if c]
    main = [tr for tr, c in zip(data, chosen) if not c]
    return data.with_trajectories(ref), data.with_trajectories(main)


def concat(a: Dataset, b: Dataset) -> Dataset:
    """Append ``b`` after ``a``; ids are renumbered 0..N-1 in the new order.

    ``alpha_applied`` is set to the fraction of poisoned trajectories in the
    result.
    """
    if len(a) == 0:
        return b
    if len(b) == 0:
        return a
    if (a.d_s, a.d_a) != (b.d_s, b.d_a):
        raise ValueError(f"dimension mismatch: ({a.d_s}, {a.d_a}) vs ({b.d_s}, {b.d_a})")
    if (a.a_min, a.a_max) != (b.a_min, b.a_max):
        raise ValueError("action bounds differ between datasets")
    trajs = [tr.replace(id=i) for i, tr in enumerate(list(a) + list(b))]
    n_bad = sum(tr.poisoned for tr in trajs)
    return a.with_trajectories(trajs, alpha_applied=n_bad / len(trajs))


def _tag_code(tag: str) -> int:
    return TAGS.index(tag)


def dataset_to_bytes(data: Dataset) -> bytes:
    w = Writer(DATASET_MAGIC, DATASET_VERSION)
    w.text(data.env_id)
    w.u64(int(data.seed))
    w.u32(data.d_s)
    w.u32(data.d_a)
    w.f64(data.a_min)
    w.f64(data.a_max)
    w.u8(0 if data.alpha_applied is None else 1)
    w.f64(0.0 if data.alpha_applied is None else data.alpha_applied)
    w.u64(len(data))
    for tr in data:
        w.i64(tr.id)
        w.u8(_tag_code(tr.tag))
        w.u32(tr.T)
        w.array(tr.states)
        w.array(tr.actions)
        w.array(tr.rewards)
    return w.getvalue()


def dataset_from_bytes(raw: bytes) -> Dataset:
    r = Reader(raw, DATASET_MAGIC, DATASET_VERSION)
    env_id = r.text()
    seed = r.u64()
    d_s, d_a = r.u32(), r.u32()
    a_min, a_max = r.f64(), r.f64()
    has_alpha = r.u8()
    alpha = r.f64()
    n = r.u64()
    trajs = []
    for _ in range(n):
        tid = r.i64()
        code = r.u8()
        if code >= len(TAGS):
            raise ValueError(f"unknown tag code {code}")
        T = r.u32()
        states = r.array((T + 1, d_s))
        actions = r.array((T, d_a))
        rewards = r.array((T,))
        trajs.append(Trajectory(states, actions, rewards, id=tid, tag=TAGS[code]))
    r.expect_end()
    return Dataset(
        tuple(trajs), env_id, seed, d_s, d_a, a_min, a_max,
        alpha_applied=alpha if has_alpha else None,
    )


def save_dataset(data: Dataset, path) -> None:
    with open(path, "wb") as fh:
        fh.write(dataset_to_bytes(data))


def load_dataset(path) -> Dataset:
    with open(path, "rb") as fh:
        return dataset_from_bytes(fh.read())


def stack_steps(trajectories: Sequence[Trajectory]) -> tuple:
    """Stack all (s_t, a_t) pairs; returns states, actions and the owning row index."""
    states = np.concatenate([tr.states[:-1] for tr in trajectories])
    actions = np.concatenate([tr.actions for tr in trajectories])
    owner = np.concatenate(
        [np.full(tr.T, i, dtype=np.int64) for i, tr in enumerate(trajectories)]
    )
    return states, actions, owner
