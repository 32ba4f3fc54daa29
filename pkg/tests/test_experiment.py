import json

import numpy as np
import pytest

from drwbc import experiment as ex
from drwbc.experiment import ExperimentConfig, MetricsRecord


def tiny(**kw):
    base = dict(env_id="double_integrator_1d", n_expert_traj=20, kinds=["action"], alphas=[0.5],
                n_eval_rollouts=3, n_seeds=2, policy_epochs=2, disc_epochs=2, policy_hidden=[8],
                disc_hidden=[8])
    base.update(kw)
    return ExperimentConfig(**base)


def rec(kind="action", alpha=0.0, method="weighted_bc", seed=0, ret=-10.0, env="e"):
    return MetricsRecord(env, kind, alpha, method, seed, ret, 0.1, None, None, None)


def test_derive_seed_independent_streams():
    seeds = {ex.derive_seed(0, s, r) for s in ("data", "split", "poison", "disc", "policy", "eval") for r in range(5)}
    assert len(seeds) == 30
    assert ex.derive_seed(1, "data", 0) != ex.derive_seed(0, "data", 0)


def test_config_validation_and_roundtrip(tmp_path):
    with pytest.raises(ValueError, match="unknown config keys"):
        ExperimentConfig.from_dict({"n_seed": 3})
    with pytest.raises(ValueError):
        ExperimentConfig(alphas=[1.2])
    with pytest.raises(ValueError):
        ExperimentConfig(n_seeds=0)
    with pytest.raises(ValueError):
        ExperimentConfig(methods=["bcq"])
    cfg = tiny()
    (tmp_path / "c.json").write_text(json.dumps(cfg.to_dict()))
    assert ExperimentConfig.load(tmp_path / "c.json") == cfg
    assert cfg.alpha_grid == [0.0, 0.5]
    assert tiny(include_clean_baseline=False).alpha_grid == [0.5]


def test_performance_ratio_orientation():
    assert ex.performance_ratio(5.0, 10.0) == 0.5
    assert ex.performance_ratio(-20.0, -10.0) == 0.5
    assert ex.performance_ratio(-10.0, -10.0) == 1.0
    assert ex.performance_ratio(-1.0, 1.0) is None
    assert ex.performance_ratio(1.0, 0.0) is None


def test_retention_basics():
    recs = [rec(alpha=0.0, seed=s, ret=-10.0) for s in range(2)] + [rec(alpha=0.6, seed=0, ret=-20.0),
                                                                    rec(alpha=0.6, seed=1, ret=-10.0)]
    curve = ex.retention_curve(recs)[("e", "action", "weighted_bc")]
    assert curve[0.0] == 1.0
    assert curve[0.6] == pytest.approx(0.75)
    assert ex.per_seed_retention(recs, "e", "action", "weighted_bc", 0.6) == {0: 0.5, 1: 1.0}
    with pytest.raises(ValueError, match="baseline"):
        ex.retention_curve([rec(alpha=0.6)])
    flagged = ex.retention_curve([rec(alpha=0.0, ret=0.0), rec(alpha=0.6, ret=-1.0)])
    assert flagged[("e", "action", "weighted_bc")][0.6] is None


def test_relative_improvement():
    recs = [rec(method="weighted_bc", ret=150.0), rec(method="traditional_bc", ret=100.0),
            rec(kind="state", method="weighted_bc", ret=-5.0), rec(kind="state", method="traditional_bc", ret=-5.0),
            rec(kind="reward", method="weighted_bc", ret=1.0), rec(kind="reward", method="traditional_bc", ret=0.0)]
    out = ex.relative_improvement(recs)
    assert out[("e", "action", 0.0)] == pytest.approx(50.0)
    assert out[("e", "state", 0.0)] == 0.0
    assert out[("e", "reward", 0.0)] is None
    with pytest.raises(ValueError):
        ex.relative_improvement([rec(method="weighted_bc")])


def test_emit_report_roundtrip(tmp_path):
    recs = [rec(kind=k, method=m, seed=s, alpha=a, ret=-1.0 - s) for k in ("action", "state")
            for m in ex.METHODS for s in range(2) for a in (0.0, 0.5)]
    recs.append(MetricsRecord("e", "action", 0.2, "weighted_bc", 9, None, None, None, None, None, "ValueError: x"))
    path = tmp_path / "m.csv"
    ex.emit_report(recs, path)
    text = path.read_text().splitlines()
    assert text[0] == f"# schema: {ex.CSV_SCHEMA}"
    assert text[1].split(",") == ex.CSV_COLUMNS
    assert ex.read_records_csv(path) == recs
    plot = json.loads((tmp_path / "m.plot.json").read_text())
    assert plot["schema"] == ex.PLOT_SCHEMA
    assert len(plot["series"]) == 2 * 2


def test_emit_report_empty_creates_nothing(tmp_path):
    with pytest.raises(ValueError):
        ex.emit_report([], tmp_path / "m.csv")
    assert not list(tmp_path.iterdir())


def test_emit_report_io_error_names_path(tmp_path):
    bad = tmp_path / "missing" / "m.csv"
    with pytest.raises(OSError, match="missing"):
        ex.emit_report([rec()], bad)


@pytest.fixture(scope="module")
def tiny_records():
    return ex.run_grid(tiny())


def test_grid_shape_and_order(tiny_records):
    assert len(tiny_records) == 1 * 2 * 2 * 2
    assert [r.key for r in tiny_records] == sorted(r.key for r in tiny_records)
    assert all(not r.error for r in tiny_records)
    for r in tiny_records:
        has_w = r.method == "weighted_bc"
        assert (r.mean_weight_clean is not None) == has_w


def test_grid_rerun_identical_bytes(tiny_records, tmp_path):
    ex.write_records_csv(tiny_records, tmp_path / "a.csv")
    ex.write_records_csv(ex.run_grid(tiny()), tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


def test_parallel_grid_matches_sequential(tiny_records):
    assert ex.run_grid(tiny(workers=2)) == tiny_records


def test_eval_seed_only_moves_eval_numbers(tiny_records):
    other = ex.run_grid(tiny(eval_seed=123))
    for a, b in zip(tiny_records, other):
        assert a.key == b.key
        assert (a.mean_weight_clean, a.mean_weight_poisoned, a.weight_auroc) == (
            b.mean_weight_clean, b.mean_weight_poisoned, b.weight_auroc)
    assert any(a.mean_return != b.mean_return for a, b in zip(tiny_records, other))


def test_stage_failure_recorded_per_cell():
    recs = ex.run_grid(tiny(n_expert_traj=1, n_seeds=1))
    assert len(recs) == 4 and all("too small to split" in r.error for r in recs)
    assert all(r.mean_return is None for r in recs)


def test_reference_never_reaches_training(monkeypatch):
    seen = []
    real = ex.train_policy

    def spy(main, weights, cfg):
        seen.append(set(main.ids))
        return real(main, weights, cfg)

    split_ids = []
    real_split = ex.split_reference

    def split_spy(data, spec):
        ref, main = real_split(data, spec)
        split_ids.append(set(ref.ids))
        return ref, main

    monkeypatch.setattr(ex, "train_policy", spy)
    monkeypatch.setattr(ex, "split_reference", split_spy)
    ex.run_replicate(tiny(n_seeds=1), 0)
    assert seen and all(not (ids & split_ids[0]) for ids in seen)


def test_theory_audit_small(tmp_path):
    cfg = ex.TheoryAuditConfig(trials=10, N=128, n_sign_draws=20)
    rep = ex.run_theory_audit(cfg)
    assert len(rep.gaps) == 10 and rep.e_clip == 0.0 and rep.delta_d == 0.0
    ex.write_audit_csv(rep, tmp_path / "a.csv")
    lines = (tmp_path / "a.csv").read_text().splitlines()
    assert lines[0].startswith("trial,gap,bound,violated") and len(lines) == 11
    assert ex.TheoryAuditConfig(alpha=0.7).effective_cap == pytest.approx(1 / 0.3)


@pytest.mark.slow
def test_clean_cell_methods_agree():
    cfg = ExperimentConfig(env_id="double_integrator_1d", kinds=["action"], alphas=[], n_seeds=1, n_expert_traj=100)
    recs = {r.method: r for r in ex.run_grid(cfg)}
    w, t = recs["weighted_bc"], recs["traditional_bc"]
    assert abs(w.mean_return - t.mean_return) <= w.std_err + t.std_err
