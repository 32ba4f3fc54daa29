"""Command line entry point: ``drwbc <subcommand> ...``.

On failure a single JSON line ``{"error": <category>, "message": ...}`` goes
to stderr and the exit code identifies the category.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from . import experiment as ex
from ._binio import FormatError
from .envsim import ENV_IDS, evaluate_policy, generate_expert_dataset, make_env
from .nnkit import load_checkpoint, save_checkpoint
from .poison import ContaminationSpec, apply_contamination
from .ratio import DiscriminatorConfig, FEATURE_MODES, WeightTable, compute_weights, train_discriminator
from .trajdata import POISON_KINDS, SplitSpec, load_dataset, save_dataset, split_reference
from .wbc import TrainConfig, as_controller, train_policy

EXIT_CODES = {"internal": 1, "usage": 2, "io": 3, "format": 4, "invalid": 5, "numerical": 6}


class CliError(Exception):
    def __init__(self, category: str, message: str):
        super().__init__(message)
        self.category = category


def _csv_sibling(path: str) -> str:
    return path.rsplit(".", 1)[0] + ".csv" if "." in path else path + ".csv"


def cmd_generate(args):
    env = make_env(args.env)
    save_dataset(generate_expert_dataset(env, args.n_traj, args.seed), args.out)


def cmd_split(args):
    ref, main = split_reference(load_dataset(args.inp), SplitSpec(args.ref_fraction, args.seed))
    save_dataset(ref, args.ref_out)
    save_dataset(main, args.main_out)


def cmd_poison(args):
    spec = ContaminationSpec(args.kind, args.alpha, args.seed, args.sigma_s_scale,
                             args.sigma_a_scale, args.shuffle_fraction)
    save_dataset(apply_contamination(load_dataset(args.inp), spec), args.out)


def cmd_weigh(args):
    ref, main = load_dataset(args.ref), load_dataset(args.main)
    cfg = DiscriminatorConfig(epochs=args.epochs, seed=args.seed, mode=args.feature_mode)
    table = compute_weights(train_discriminator(ref, main, cfg), main, args.eps, args.cap)
    table.save(args.out)
    table.to_csv(args.csv or _csv_sibling(args.out))


def cmd_train(args):
    main = load_dataset(args.main)
    weights = None if args.uniform else WeightTable.load(args.weights)
    cfg = TrainConfig(epochs=args.epochs, batch_size=args.batch_size, lr=args.lr, seed=args.seed)
    policy, curve = train_policy(main, weights, cfg)
    save_checkpoint(policy, args.out)
    curve.to_csv(args.curve or _csv_sibling(args.out))


def cmd_evaluate(args):
    policy = load_checkpoint(args.policy)
    env = make_env(args.env)
    mean, se = evaluate_policy(env, as_controller(policy), args.rollouts, args.seed)
    result = {"env": args.env, "rollouts": args.rollouts, "seed": args.seed,
              "mean_return": mean, "std_err": se}
    text = json.dumps(result, sort_keys=True)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text + "\n")
    print(text)


def cmd_grid(args):
    cfg = ex.ExperimentConfig.load(args.config) if args.config else ex.ExperimentConfig()
    if args.seed is not None:
        cfg.master_seed = args.seed
    if args.print_effective_config:
        print(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
        return
    if not args.out:
        raise CliError("usage", "grid needs --out")
    ex.emit_report(ex.run_grid(cfg), args.out)


def cmd_theory_audit(args):
    cfg = ex.TheoryAuditConfig.load(args.config) if args.config else ex.TheoryAuditConfig()
    if args.trials is not None:
        cfg.trials = args.trials
    if args.seed is not None:
        cfg.seed = args.seed
    report = ex.run_theory_audit(cfg)
    ex.write_audit_csv(report, args.out)
    print(json.dumps({
        "trials": len(report.gaps),
        "violation_rate": report.violation_rate,
        "allowed_rate": report.allowed_rate,
        "excess_violation_rate": report.excess_violation_rate,
        "delta_d": report.delta_d,
        "e_clip": report.e_clip,
    }, sort_keys=True))


def cmd_report(args):
    records = ex.read_records_csv(args.inp)
    summary = {
        "retention": {"/".join(k): {str(a): v for a, v in c.items()}
                      for k, c in ex.retention_curve(records).items()},
        "relative_improvement_pct": {f"{e}/{k}/{a}": v
                                     for (e, k, a), v in ex.relative_improvement(records).items()},
    }
    if args.out:
        ex.emit_report(records, args.out)
    print(json.dumps(summary, indent=1, sort_keys=True))


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="drwbc", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log per-cell progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="scripted-expert dataset")
    g.add_argument("--env", choices=ENV_IDS, default="point_mass_2d")
    g.add_argument("--n-traj", type=int, default=200)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_generate)

    s = sub.add_parser("split", help="hold out a clean reference set")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--ref-fraction", type=float, default=0.2)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--ref-out", required=True)
    s.add_argument("--main-out", required=True)
    s.set_defaults(func=cmd_split)

    q = sub.add_parser("poison", help="contaminate a fraction of trajectories")
    q.add_argument("--kind", choices=POISON_KINDS, required=True)
    q.add_argument("--alpha", type=float, required=True)
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--sigma-s-scale", type=float, default=0.05)
    q.add_argument("--sigma-a-scale", type=float, default=0.8)
    q.add_argument("--shuffle-fraction", type=float, default=0.5)
    q.add_argument("--in", dest="inp", required=True)
    q.add_argument("--out", required=True)
    q.set_defaults(func=cmd_poison)

    w = sub.add_parser("weigh", help="train the discriminator and freeze clipped weights")
    w.add_argument("--ref", required=True)
    w.add_argument("--main", required=True)
    w.add_argument("--eps", type=float, default=1e-3)
    w.add_argument("--cap", type=float, default=2.0)
    w.add_argument("--seed", type=int, default=0)
    w.add_argument("--epochs", type=int, default=200)
    w.add_argument("--feature-mode", choices=FEATURE_MODES, default="mean_std")
    w.add_argument("--out", required=True)
    w.add_argument("--csv", help="CSV copy of the table (default: next to --out)")
    w.set_defaults(func=cmd_weigh)

    t = sub.add_parser("train", help="weighted or uniform behavioral cloning")
    t.add_argument("--main", required=True)
    src = t.add_mutually_exclusive_group(required=True)
    src.add_argument("--weights")
    src.add_argument("--uniform", action="store_true")
    t.add_argument("--epochs", type=int, default=300)
    t.add_argument("--batch-size", type=int, default=16)
    t.add_argument("--lr", type=float, default=3e-4)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out", required=True)
    t.add_argument("--curve", help="training-curve CSV (default: next to --out)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="greedy rollouts on the clean environment")
    e.add_argument("--policy", required=True)
    e.add_argument("--env", choices=ENV_IDS, default="point_mass_2d")
    e.add_argument("--rollouts", type=int, default=50)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out")
    e.set_defaults(func=cmd_evaluate)

    r = sub.add_parser("grid", help="full experiment grid from a JSON config")
    r.add_argument("--config")
    r.add_argument("--seed", type=int, help="override master_seed")
    r.add_argument("--out")
    r.add_argument("--print-effective-config", action="store_true")
    r.set_defaults(func=cmd_grid)

    a = sub.add_parser("theory-audit", help="Monte-Carlo audit of the clean-risk bound")
    a.add_argument("--config")
    a.add_argument("--trials", type=int)
    a.add_argument("--seed", type=int)
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_theory_audit)

    m = sub.add_parser("report", help="retention and relative improvement from a metrics CSV")
    m.add_argument("--in", dest="inp", required=True)
    m.add_argument("--out", help="re-emit CSV and plot data here")
    m.set_defaults(func=cmd_report)
    return p


def _categorize(exc: Exception) -> str:
    if isinstance(exc, CliError):
        return exc.category
    if isinstance(exc, FormatError):
        return "format"
    if isinstance(exc, OSError):
        return "io"
    if isinstance(exc, (FloatingPointError, ArithmeticError)):
        return "numerical"
    if isinstance(exc, (ValueError, KeyError, TypeError)):
        return "invalid"
    return "internal"


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(message)s", stream=sys.stderr)
    try:
        args.func(args)
    except Exception as exc:
        cat = _categorize(exc)
        print(json.dumps({"error": cat, "message": str(exc)}), file=sys.stderr)
        return EXIT_CODES[cat]
    return 0


if __name__ == "__main__":
    sys.exit(main())
