"""Command-line entry point: generate data, augment, check gradients,
search policies, retrain, evaluate, and export CSV/JSON artifacts.

Every run writes a ``run.json`` provenance record (resolved configuration,
seed, package version) next to its outputs. Exit codes: 0 success, 1 usage
error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from . import augment as ag
from . import data as dt
from . import model as md
from . import policy as pol
from . import search as sr
from .augment import AugOpSpec, SignalBatch
from .rng import RandomStream


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _limit_threads():
    cap = os.environ.get("AUGSEARCH_THREADS")
    if cap:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                    "MKL_NUM_THREADS"):
            os.environ.setdefault(var, cap)


def build_parser() -> _Parser:
    parser = _Parser(prog="augsearch",
                     description="differentiable augmentation policy search")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--out-dir", default="augsearch-out")
    parser.add_argument("--format", choices=["csv", "json"], default="csv")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate the synthetic dataset")
    p.add_argument("--n", type=int, default=400)
    p.add_argument("--out", required=True)

    p = sub.add_parser("augment", help="apply one operation to a dataset")
    p.add_argument("--op", required=True, choices=ag.OP_KINDS)
    p.add_argument("--p", type=float, default=0.5)
    p.add_argument("--mu", type=float, default=0.5)
    p.add_argument("--in", dest="in_dir", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    p.add_argument("--all-ops", action="store_true")
    p.add_argument("--op", choices=ag.OP_KINDS, default=None)
    p.add_argument("--tolerance", type=float, default=1e-4)

    p = sub.add_parser("search", help="gradient-based policy search")
    p.add_argument("--mode", required=True,
                   choices=["adda", "cadda", "dada", "faster-aa"])
    p.add_argument("--data", required=True)
    p.add_argument("--budget", type=int, default=4,
                   help="search epochs")
    p.add_argument("--retrain-every", type=int, default=2)
    p.add_argument("--policy-lr", type=float, default=5e4)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--L", type=int, default=5)
    p.add_argument("--K", type=int, default=2)
    p.add_argument("--pool", default=None,
                   help="comma-separated op kinds (default: differentiable pool)")
    p.add_argument("--retrain-epochs", type=int, default=60)
    p.add_argument("--retrain-patience", type=int, default=12)
    p.add_argument("--test-fraction", type=float, default=0.3)

    p = sub.add_parser("random-search", help="uniform random policy search")
    p.add_argument("--data", required=True)
    p.add_argument("--trials", type=int, default=20)
    p.add_argument("--class-wise", action="store_true")
    p.add_argument("--np", dest="n_p", type=int, default=4)
    p.add_argument("--nmu", dest="n_mu", type=int, default=4)
    p.add_argument("--L", type=int, default=5)
    p.add_argument("--K", type=int, default=1)
    p.add_argument("--pool", default=None)
    p.add_argument("--retrain-epochs", type=int, default=60)
    p.add_argument("--retrain-patience", type=int, default=12)
    p.add_argument("--test-fraction", type=float, default=0.3)

    p = sub.add_parser("density-match", help="rank candidate policies by "
                       "a pre-trained model's augmented validation loss")
    p.add_argument("--data", required=True)
    p.add_argument("--candidates", required=True,
                   help="JSON file: list of serialized policy documents")
    p.add_argument("--test-fraction", type=float, default=0.3)

    p = sub.add_parser("retrain", help="train from scratch with a policy")
    p.add_argument("--data", required=True)
    p.add_argument("--policy", default=None)
    p.add_argument("--epochs", type=int, default=60)
    p.add_argument("--patience", type=int, default=12)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--test-fraction", type=float, default=0.3)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)

    p = sub.add_parser("space-size", help="exact policy-space cardinality")
    p.add_argument("--np", dest="n_p", type=int, required=True)
    p.add_argument("--nmu", dest="n_mu", type=int, required=True)
    p.add_argument("--nops", dest="n_ops", type=int, required=True)
    p.add_argument("--L", type=int, required=True)
    p.add_argument("--K", type=int, required=True)
    p.add_argument("--classes", type=int, default=1)
    return parser


def _write_run_record(out_dir: Path, args: argparse.Namespace):
    out_dir.mkdir(parents=True, exist_ok=True)
    record = {"version": __version__, "argv": sys.argv[1:],
              "resolved": {k: v for k, v in sorted(vars(args).items())},
              "seed": args.seed}
    (out_dir / "run.json").write_text(json.dumps(record, indent=2,
                                                 sort_keys=True))


def _load_splits(path, seed, test_fraction):
    batch = dt.read_dataset(path)
    nontest = 1.0 - test_fraction
    plan = dt.SplitPlan(train=0.8 * nontest, valid=0.2 * nontest,
                        test=test_fraction, seed=seed)
    idx = dt.split(batch.labels, plan)
    return {k: dt.take(batch, v) for k, v in idx.items()}


def _montage_for(batch: SignalBatch):
    default = ag.default_montage()
    if batch.n_channels == default.n_channels:
        return default
    return None


# ---------------------------------------------------------------------------
# subcommand implementations
# ---------------------------------------------------------------------------

def cmd_synth(args, out_dir: Path) -> int:
    spec = dt.default_synthetic_spec()
    batch = dt.standardize(dt.generate_synthetic(spec, args.n,
                                                 RandomStream(args.seed)))
    dt.write_dataset(batch, args.out)
    print(f"wrote {args.n} records to {args.out}")
    return 0


def cmd_augment(args, out_dir: Path) -> int:
    batch = dt.read_dataset(args.in_dir)
    mu = None if args.op in ag.MAGNITUDE_FREE else args.mu
    spec = AugOpSpec(args.op, p=args.p, mu=mu)
    out = ag.apply_operation(batch, spec, RandomStream(args.seed),
                             _montage_for(batch))
    dt.write_dataset(out, args.out)
    print(f"applied {args.op} (p={args.p}) -> {args.out}")
    return 0


def cmd_gradcheck(args, out_dir: Path) -> int:
    from . import autodiff as adm

    kinds = ag.differentiable_pool() if args.all_ops or args.op is None \
        else [args.op]
    montage = ag.default_montage()
    x0 = RandomStream(args.seed).child("signal").normal(size=(2, 6, 256))
    rows = []
    worst = 0.0
    for kind in kinds:
        noise = ag.draw_noise(kind, RandomStream(args.seed).child(kind),
                              2, 6, 256)
        probe = adm.constant(
            RandomStream(args.seed).child("probe").normal(size=(2, 6, 256)))

        errs = {}
        if kind not in ag.MAGNITUDE_FREE:
            def fmu(mu):
                y = ag.transform_relaxed(kind, adm.constant(x0), mu, noise,
                                         128.0, montage)
                return adm.vmean(adm.mul(y, probe))
            errs["mu"] = adm.grad_check(fmu, np.array(0.5), h=1e-6)

        def fp(p):
            y = ag.apply_operation_relaxed(
                adm.constant(x0), kind, p, adm.constant(0.5),
                RandomStream(args.seed), 128.0, montage, noise=noise)
            return adm.vmean(adm.mul(y, probe))
        errs["p"] = adm.grad_check(fp, np.array(0.4), h=1e-6)

        for param, err in errs.items():
            worst = max(worst, err)
            rows.append((kind, param, err))
            print(f"{kind:18s} d/d{param:2s} max rel err {err:.3e}")
    report = {"tolerance": args.tolerance,
              "results": [{"op": k, "param": p, "max_rel_err": e}
                          for k, p, e in rows]}
    (out_dir / "gradcheck.json").write_text(json.dumps(report, indent=2,
                                                       sort_keys=True))
    ok = worst < args.tolerance
    print(f"worst {worst:.3e} {'<' if ok else '>='} tolerance {args.tolerance}")
    return 0 if ok else 2


def _report_search_outputs(out_dir: Path, trace: sr.SearchTrace, best,
                           splits) -> int:
    (out_dir / "trace.csv").write_text(trace.to_csv())
    if best is not None:
        (out_dir / "best_policy.json").write_text(pol.serialize(best))
    retrains = [r for r in trace.rows if r.retrain_valid_balacc is not None]
    if retrains:
        last = retrains[-1]
        print(f"final validation balanced accuracy: "
              f"{max(r.retrain_valid_balacc for r in retrains):.4f}")
        print(f"running test balanced accuracy: {last.running_test_balacc:.4f}")
    for event in trace.events:
        print(f"note: {event}")
    return 0


def cmd_search(args, out_dir: Path) -> int:
    splits = _load_splits(args.data, args.seed, args.test_fraction)
    mode = {"faster-aa": "faster_aa_bilevel"}.get(args.mode, args.mode)
    pool = args.pool.split(",") if args.pool else None
    cfg = sr.SearchConfig(
        policy_lr=args.policy_lr, epochs=args.budget,
        retrain_every=args.retrain_every, batch_size=args.batch_size,
        retrain=md.TrainConfig(max_epochs=args.retrain_epochs,
                               patience=args.retrain_patience,
                               batch_size=args.batch_size))
    trace, best, _ = sr.run_gradient_search(
        mode, splits, cfg, RandomStream(args.seed), pool=pool,
        L=args.L, K=args.K, montage=_montage_for(splits["train"]),
        out_dir=out_dir)
    return _report_search_outputs(out_dir, trace, best, splits)


def _grid(n: int) -> list[float]:
    if n == 1:
        return [0.5]
    return [i / (n - 1) for i in range(n)]


def cmd_random_search(args, out_dir: Path) -> int:
    splits = _load_splits(args.data, args.seed, args.test_fraction)
    pool = args.pool.split(",") if args.pool else list(ag.OP_KINDS)
    space = sr.RandomSearchSpace(pool=pool, p_grid=_grid(args.n_p),
                                 mu_grid=_grid(args.n_mu), L=args.L, K=args.K)
    classes = sorted(set(int(v) for v in splits["train"].labels))
    print(f"search space size: "
          f"{space.size(len(classes) if args.class_wise else 1)}")
    cfgtrain = md.TrainConfig(max_epochs=args.retrain_epochs,
                              patience=args.retrain_patience)
    trace, best, info = sr.random_search(
        space, splits, args.trials, RandomStream(args.seed),
        class_wise=args.class_wise, train_cfg=cfgtrain,
        montage=_montage_for(splits["train"]))
    (out_dir / "trace.csv").write_text(trace.to_csv())
    (out_dir / "best_policy.json").write_text(pol.serialize(best))
    print(f"final validation balanced accuracy: {info['valid']:.4f}")
    print(f"running test balanced accuracy: {info['test']:.4f}")
    return 0


def cmd_density_match(args, out_dir: Path) -> int:
    splits = _load_splits(args.data, args.seed, args.test_fraction)
    docs = json.loads(Path(args.candidates).read_text())
    candidates = [pol.parse(json.dumps(doc)) for doc in docs]
    scored = sr.density_matching_search(candidates, splits,
                                        RandomStream(args.seed),
                                        montage=_montage_for(splits["train"]))
    ranking = [{"rank": i, "loss": loss, "policy": json.loads(pol.serialize(p))}
               for i, (loss, p) in enumerate(scored)]
    (out_dir / "ranking.json").write_text(json.dumps(ranking, indent=2,
                                                     sort_keys=True))
    for row in ranking:
        print(f"rank {row['rank']}: loss {row['loss']:.6f}")
    return 0


def cmd_retrain(args, out_dir: Path) -> int:
    splits = _load_splits(args.data, args.seed, args.test_fraction)
    policy = None
    if args.policy:
        policy = pol.parse(Path(args.policy).read_text())
    classes = sorted(set(int(v) for v in splits["train"].labels))
    net_cfg = md.ChambonNetConfig(splits["train"].n_channels,
                                  splits["train"].n_times, len(classes))
    net = md.build_net(net_cfg, RandomStream(args.seed).child("init"))
    cfg = md.TrainConfig(max_epochs=args.epochs, patience=args.patience,
                         batch_size=args.batch_size)
    history = md.fit(net, splits["train"], splits["valid"], policy=policy,
                     cfg=cfg, rng=RandomStream(args.seed).child("fit"),
                     montage=_montage_for(splits["train"]))
    report = md.evaluate(net, splits["test"])
    md.save_checkpoint(net, out_dir / "model.ckpt")
    metrics = {"balanced_accuracy": report.balanced_accuracy,
               "macro_f1": report.macro_f1,
               "per_class_f1": {str(k): v for k, v in report.per_class_f1.items()},
               "best_epoch": history["best_epoch"]}
    (out_dir / "metrics.json").write_text(json.dumps(metrics, indent=2,
                                                     sort_keys=True))
    print(f"test balanced accuracy: {report.balanced_accuracy:.4f}")
    return 0


def cmd_eval(args, out_dir: Path) -> int:
    net = md.load_checkpoint(args.checkpoint)
    batch = dt.read_dataset(args.data)
    report = md.evaluate(net, batch)
    metrics = {"balanced_accuracy": report.balanced_accuracy,
               "macro_f1": report.macro_f1,
               "per_class_f1": {str(k): v for k, v in report.per_class_f1.items()},
               "confusion": report.confusion.tolist(),
               "absent_classes": report.absent_classes}
    (out_dir / "metrics.json").write_text(json.dumps(metrics, indent=2,
                                                     sort_keys=True))
    print(f"balanced accuracy: {report.balanced_accuracy:.4f}")
    print(f"macro F1: {report.macro_f1:.4f}")
    return 0


def cmd_space_size(args, out_dir: Path) -> int:
    size = pol.policy_space_size(args.n_p, args.n_mu, args.n_ops,
                                 args.L, args.K, args.classes)
    print(size)
    (out_dir / "space_size.json").write_text(json.dumps(
        {"size": str(size)}, indent=2))
    return 0


_COMMANDS = {
    "synth": cmd_synth,
    "augment": cmd_augment,
    "gradcheck": cmd_gradcheck,
    "search": cmd_search,
    "random-search": cmd_random_search,
    "density-match": cmd_density_match,
    "retrain": cmd_retrain,
    "eval": cmd_eval,
    "space-size": cmd_space_size,
}


def dispatch(argv: list[str]) -> int:
    _limit_threads()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    out_dir = Path(args.out_dir)
    try:
        _write_run_record(out_dir, args)
        return _COMMANDS[args.command](args, out_dir)
    except (ValueError, OSError, RuntimeError, KeyError,
            json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main():
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
