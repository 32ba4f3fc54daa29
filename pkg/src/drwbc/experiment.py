"""Experiment grid, metrics and report files.

All returns in the bundled environments are costs (every reward is <= 0), so
ratios between two returns are taken between magnitudes and oriented so that
1 means "as good as the reference" and smaller means worse. See
``performance_ratio``.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import os
from collections import defaultdict
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields
from typing import Dict, Iterable, List, Optional

import numpy as np

from .envsim import evaluate_policy, generate_expert_dataset, make_env
from .poison import ContaminationSpec, apply_contamination
from .ratio import DiscriminatorConfig, compute_weights, train_discriminator, weight_separation_report
from .trajdata import POISON_KINDS, SplitSpec, split_reference
from .wbc import TrainConfig, as_controller, train_policy

METHODS = ("weighted_bc", "traditional_bc")
CSV_SCHEMA = "drwbc.metrics/1"
PLOT_SCHEMA = "drwbc.plotdata/1"

log = logging.getLogger(__name__)

_STAGES = {"data": 0, "split": 1, "poison": 2, "disc": 3, "policy": 4, "eval": 5}


def derive_seed(master: int, stage: str, index: int) -> int:
    """Stage seed for one grid replicate, independent across stages and replicates."""
    ss = np.random.SeedSequence([int(master), _STAGES[stage], int(index)])
    return int(ss.generate_state(1, np.uint64)[0])


@dataclass
class ExperimentConfig:
    env_id: str = "point_mass_2d"
    env_overrides: dict = field(default_factory=dict)
    n_expert_traj: int = 200
    ref_fraction: float = 0.2
    kinds: list = field(default_factory=lambda: list(POISON_KINDS))
    alphas: list = field(default_factory=lambda: [0.2, 0.4, 0.6, 0.8, 1.0])
    include_clean_baseline: bool = True
    methods: list = field(default_factory=lambda: list(METHODS))
    n_eval_rollouts: int = 50
    n_seeds: int = 5
    master_seed: int = 0
    eval_seed: Optional[int] = None
    eps: float = 1e-3
    cap: float = 2.0
    policy_epochs: int = 300
    policy_batch_size: int = 16
    policy_lr: float = 3e-4
    policy_hidden: list = field(default_factory=lambda: [64, 64])
    disc_epochs: int = 200
    disc_batch_size: int = 256
    disc_lr: float = 3e-4
    disc_hidden: list = field(default_factory=lambda: [64, 64])
    feature_mode: str = "mean_std"
    sigma_s_scale: float = 0.05
    sigma_a_scale: float = 0.8
    transition_shuffle_fraction: float = 0.5
    workers: int = 1

    def __post_init__(self):
        if any(not 0.0 <= a <= 1.0 for a in self.alphas):
            raise ValueError("alpha grid values must lie in [0, 1]")
        if self.n_seeds < 1:
            raise ValueError("n_seeds must be >= 1")
        bad = set(self.kinds) - set(POISON_KINDS)
        if bad:
            raise ValueError(f"unknown poisoning kinds {sorted(bad)}")
        bad = set(self.methods) - set(METHODS)
        if bad:
            raise ValueError(f"unknown methods {sorted(bad)}")

    @property
    def alpha_grid(self) -> list:
        grid = sorted(set(float(a) for a in self.alphas))
        if self.include_clean_baseline and 0.0 not in grid:
            grid = [0.0] + grid
        return grid

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**raw)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class MetricsRecord:
    env: str
    kind: str
    alpha: float
    method: str
    seed: int
    mean_return: Optional[float]
    std_err: Optional[float]
    mean_weight_clean: Optional[float]
    mean_weight_poisoned: Optional[float]
    weight_auroc: Optional[float]
    error: str = ""

    @property
    def key(self):
        return (self.env, self.kind, self.alpha, self.method, self.seed)


CSV_COLUMNS = [f.name for f in fields(MetricsRecord)]


def performance_ratio(value: float, reference: float) -> Optional[float]:
    """``value / reference`` for rewards, ``reference / value`` for costs.

    Both arguments must share a strict sign; otherwise the ratio is undefined
    and ``None`` is returned.
    """
    if reference > 0 and value > 0:
        return value / reference
    if reference < 0 and value < 0:
        return reference / value
    return None


def _cell_worker(args):
    config, replicate = args
    return run_replicate(config, replicate)


def run_replicate(config: ExperimentConfig, replicate: int) -> List[MetricsRecord]:
    """Every (kind, alpha, method) cell for one seed replicate.

    The expert data and the reference split are shared by all cells of the
    replicate; the poison seed is shared across alphas so poisoned sets nest.
    """
    env = make_env(config.env_id, **config.env_overrides)
    eval_master = config.master_seed if config.eval_seed is None else config.eval_seed
    seeds = {s: derive_seed(config.master_seed, s, replicate) for s in ("data", "split", "poison", "disc", "policy")}
    eval_seed = derive_seed(eval_master, "eval", replicate)
    records = []
    try:
        data = generate_expert_dataset(env, config.n_expert_traj, seeds["data"])
        ref, main = split_reference(data, SplitSpec(config.ref_fraction, seeds["split"]))
    except Exception as exc:  # recorded per cell, grid continues
        for kind in config.kinds:
            for alpha in config.alpha_grid:
                for method in config.methods:
                    records.append(_failed(config, kind, alpha, method, replicate, exc))
        return records
    ref_ids = set(ref.ids)
    for kind in config.kinds:
        for alpha in config.alpha_grid:
            for method in config.methods:
                try:
                    rec = _run_cell(config, env, ref, main, ref_ids, kind, alpha, method,
                                    replicate, seeds, eval_seed)
                except Exception as exc:
                    rec = _failed(config, kind, alpha, method, replicate, exc)
                log.info("seed %d %s alpha=%g %s: return=%s %s", replicate, kind, alpha, method,
                         rec.mean_return, rec.error)
                records.append(rec)
    return records


def _failed(config, kind, alpha, method, replicate, exc) -> MetricsRecord:
    return MetricsRecord(config.env_id, kind, float(alpha), method, replicate,
                         None, None, None, None, None, f"{type(exc).__name__}: {exc}")


def _run_cell(config, env, ref, main, ref_ids, kind, alpha, method, replicate, seeds, eval_seed):
    spec = ContaminationSpec(
        kind, alpha, seeds["poison"], config.sigma_s_scale, config.sigma_a_scale,
        config.transition_shuffle_fraction,
    )
    poisoned = apply_contamination(main, spec)
    if ref_ids & set(poisoned.ids):
        raise RuntimeError("reference trajectory leaked into the training set")
    if method == "weighted_bc":
        disc_cfg = DiscriminatorConfig(config.disc_epochs, config.disc_batch_size, config.disc_lr,
                                       tuple(config.disc_hidden), seeds["disc"], config.feature_mode)
        disc = train_discriminator(ref, poisoned, disc_cfg)
        weights = compute_weights(disc, poisoned, config.eps, config.cap)
        report = weight_separation_report(weights, poisoned)
    else:
        weights = None
        report = {"mean_weight_clean": None, "mean_weight_poisoned": None, "weight_auroc": None}
    train_cfg = TrainConfig(config.policy_epochs, config.policy_batch_size, config.policy_lr,
                            seeds["policy"], tuple(config.policy_hidden))
    policy, _ = train_policy(poisoned, weights, train_cfg)
    mean, se = evaluate_policy(env, as_controller(policy), config.n_eval_rollouts, eval_seed)
    return MetricsRecord(config.env_id, kind, float(alpha), method, replicate, mean, se,
                         report["mean_weight_clean"], report["mean_weight_poisoned"],
                         report["weight_auroc"])


def run_grid(config: ExperimentConfig) -> List[MetricsRecord]:
    """All cells of the grid, sorted by (env, kind, alpha, method, seed)."""
    jobs = [(config, r) for r in range(config.n_seeds)]
    if config.workers > 1:
        with ProcessPoolExecutor(config.workers) as pool:
            chunks = list(pool.map(_cell_worker, jobs))
    else:
        chunks = [_cell_worker(j) for j in jobs]
    records = [r for chunk in chunks for r in chunk]
    return sorted(records, key=lambda r: r.key)


def _ok(records: Iterable[MetricsRecord]):
    return [r for r in records if not r.error and r.mean_return is not None]


def retention_curve(records: Iterable[MetricsRecord]) -> Dict[tuple, Dict[float, Optional[float]]]:
    """``(env, kind, method) -> {alpha: R(alpha)}`` with ``R`` averaged over seeds.

    ``R`` is the per-seed ``performance_ratio`` against the same seed's
    ``alpha = 0`` cell. Seeds with an undefined ratio make that alpha ``None``.
    """
    recs = _ok(records)
    base = {(r.env, r.kind, r.method, r.seed): r.mean_return for r in recs if r.alpha == 0.0}
    groups = defaultdict(lambda: defaultdict(list))
    for r in recs:
        groups[(r.env, r.kind, r.method)][r.alpha].append(r)
    out = {}
    for key, by_alpha in groups.items():
        curve = {}
        for alpha, rs in sorted(by_alpha.items()):
            ratios = []
            for r in rs:
                b = base.get((r.env, r.kind, r.method, r.seed))
                if b is None:
                    raise ValueError(f"missing alpha=0 baseline for {key} seed {r.seed}")
                ratios.append(performance_ratio(r.mean_return, b))
            curve[alpha] = None if any(x is None for x in ratios) else float(np.mean(ratios))
        out[key] = curve
    return out


def per_seed_retention(records: Iterable[MetricsRecord], env: str, kind: str, method: str,
                       alpha: float) -> Dict[int, Optional[float]]:
    recs = [r for r in _ok(records) if (r.env, r.kind, r.method) == (env, kind, method)]
    base = {r.seed: r.mean_return for r in recs if r.alpha == 0.0}
    return {r.seed: performance_ratio(r.mean_return, base[r.seed]) for r in recs if r.alpha == alpha}


def relative_improvement(records: Iterable[MetricsRecord],
                         baseline: str = "traditional_bc") -> Dict[tuple, Optional[float]]:
    """``(env, kind, alpha) -> 100 (weighted - baseline) / |baseline|`` on seed-averaged returns."""
    means = defaultdict(list)
    for r in _ok(records):
        means[(r.env, r.kind, r.alpha, r.method)].append(r.mean_return)
    out = {}
    for (env, kind, alpha, method), vals in sorted(means.items()):
        if method != "weighted_bc":
            continue
        other = means.get((env, kind, alpha, baseline))
        if not other:
            raise ValueError(f"no {baseline} cell for {(env, kind, alpha)}")
        w, b = float(np.mean(vals)), float(np.mean(other))
        out[(env, kind, alpha)] = None if b == 0 else 100.0 * (w - b) / abs(b)
    return out


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_records_csv(records: List[MetricsRecord], path) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"# schema: {CSV_SCHEMA}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in records:
            w.writerow([_fmt(getattr(r, c)) for c in CSV_COLUMNS])


def read_records_csv(path) -> List[MetricsRecord]:
    with open(path, newline="") as fh:
        first = fh.readline().strip()
        if first != f"# schema: {CSV_SCHEMA}":
            raise ValueError(f"unsupported metrics CSV header {first!r}")
        rows = list(csv.DictReader(fh))
    out = []
    opt = lambda s: float(s) if s != "" else None
    for row in rows:
        out.append(MetricsRecord(
            row["env"], row["kind"], float(row["alpha"]), row["method"], int(row["seed"]),
            opt(row["mean_return"]), opt(row["std_err"]), opt(row["mean_weight_clean"]),
            opt(row["mean_weight_poisoned"]), opt(row["weight_auroc"]), row["error"],
        ))
    return out


def plot_series(records: List[MetricsRecord]) -> list:
    """One ``{env, kind, method, x, y, err}`` series per curve; ``err`` is the std error over seeds."""
    groups = defaultdict(lambda: defaultdict(list))
    for r in _ok(records):
        groups[(r.env, r.kind, r.method)][r.alpha].append(r.mean_return)
    series = []
    for (env, kind, method), by_alpha in sorted(groups.items()):
        xs = sorted(by_alpha)
        ys, errs = [], []
        for a in xs:
            vals = np.array(by_alpha[a])
            ys.append(float(vals.mean()))
            errs.append(float(vals.std(ddof=1) / math.sqrt(len(vals))) if len(vals) > 1 else 0.0)
        series.append({"env": env, "kind": kind, "method": method, "x": xs, "y": ys, "err": errs})
    return series


def plot_data_path(path) -> str:
    root, _ = os.path.splitext(str(path))
    return root + ".plot.json"


def emit_report(records: List[MetricsRecord], path) -> None:
    """Write the metrics CSV at ``path`` and the curve data next to it (``*.plot.json``)."""
    if not records:
        raise ValueError("no records to report")
    try:
        write_records_csv(records, path)
        with open(plot_data_path(path), "w") as fh:
            json.dump({"schema": PLOT_SCHEMA, "series": plot_series(records)}, fh, indent=1, sort_keys=True)
            fh.write("\n")
    except OSError as exc:
        raise OSError(f"cannot write report to {path}: {exc}") from exc


@dataclass
class TheoryAuditConfig:
    """Discrete-world settings for the bound audit; ``cap=None`` picks ``max(2, 1/(1-alpha))``.

    With the default full clean support every item has ``w* > 0``, so the
    clipping term vanishes whenever ``eps`` is below the smallest ratio.
    """

    seed: int = 0
    alpha: float = 0.3
    n_states: int = 2
    n_actions: int = 2
    horizon: int = 2
    n_policies: int = 20
    eps: float = 1e-3
    cap: Optional[float] = None
    N: int = 1024
    delta: float = 0.1
    trials: int = 200
    n_sign_draws: int = 200
    score_noise: float = 0.0
    clean_support: float = 1.0

    @classmethod
    def load(cls, path) -> "TheoryAuditConfig":
        with open(path) as fh:
            raw = json.load(fh)
        unknown = set(raw) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**raw)

    @property
    def effective_cap(self) -> float:
        return self.cap if self.cap is not None else max(2.0, 1.0 / (1.0 - self.alpha))


def run_theory_audit(cfg: TheoryAuditConfig):
    from . import oracle

    rng = np.random.default_rng([cfg.seed, 7])
    m = oracle.random_mixture(rng, cfg.alpha, cfg.n_states, cfg.n_actions, cfg.horizon, cfg.clean_support)
    fc = oracle.tabular_policy_class(m.trajectory_space, cfg.n_policies, rng)
    scores = oracle.exact_dstar(m)
    if cfg.score_noise:
        scores = np.clip(scores + cfg.score_noise * rng.standard_normal(m.K), 1e-6, 1 - 1e-6)
    return oracle.t1_bound_check(m, fc, cfg.eps, cfg.effective_cap, cfg.N, cfg.delta, cfg.trials,
                                 seed=cfg.seed, scores=scores, n_sign_draws=cfg.n_sign_draws)


def write_audit_csv(report, path) -> None:
    rows = list(report.rows())
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: _fmt(v) for k, v in row.items()})
