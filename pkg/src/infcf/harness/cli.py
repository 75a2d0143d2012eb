"""Command-line entry point: ``infcf {prepare,train,evaluate,sample,distill,experiment}``.

Exit codes: 0 on success, 2 for bad configuration or input, 3 for numerical failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .. import baselines, data, distill, infae, metrics, samplers
from ..kernel import KernelConfig
from .config import ConfigError, load_config
from . import experiments

EXIT_CONFIG = 2
EXIT_NUMERIC = 3

log = logging.getLogger("infcf")


def _floats(text):
    return tuple(float(x) for x in text.split(","))


def _ints(text):
    return tuple(int(x) for x in text.split(","))


def _fit_matrix(args, split):
    if not args.fit_on:
        return split.train.matrix
    summary = data.read_summary(args.fit_on)
    if summary.item_ids != split.train.item_ids:
        raise data.DataError(f"{args.fit_on} does not share the split's item universe")
    return summary.matrix


def cmd_prepare(args) -> int:
    ds = data.load_interactions(args.data, args.format, args.rating_threshold)
    split = data.split_per_user(ds, (1 - 2 * args.holdout, args.holdout, args.holdout), args.min_interactions, args.seed)
    data.save_split(split, args.out)
    print(f"{split.n_users} users, {split.n_items} items; "
          f"train/val/test = {split.train.n_interactions}/{split.val.n_interactions}/{split.test.n_interactions}")
    return 0


def cmd_train(args) -> int:
    split = data.load_split(args.split)
    X = _fit_matrix(args, split)
    if args.model == "infae":
        kc = KernelConfig(args.depth)
        X = infae.subsample_users(X, args.max_train_users, args.seed)
        if args.lam is not None:
            dp = infae.fit(X, args.lam, kc)
        else:
            dp, scores = infae.select_lambda(split, args.grid or infae.LAMBDA_GRID, kc, train=X)
            log.info("validation %s by lambda: %s", infae.SELECTION_METRIC, scores)
        infae.save_model(dp, args.out)
        print(f"infae: lambda={dp.lam:g}, depth={kc.depth}")
    elif args.model == "ease":
        grid = (args.lam,) if args.lam is not None else (args.grid or baselines.EASE_GRID)
        best, best_val = None, -np.inf
        for lam in grid:
            m = baselines.ease_fit(X, lam)
            v = infae.evaluate_scorer(m.score, split, target="val")[infae.SELECTION_METRIC]
            if v > best_val:
                best, best_val = m, v
        baselines.save_baseline(best, args.out)
        print(f"ease: lambda={best.lam:g}")
    elif args.model == "bias":
        m = baselines.bias_fit(X, 1.0 if args.lam is None else args.lam, args.seed)
        baselines.save_baseline(m, args.out)
        print(f"bias: l2={m.meta['l2']:g}, sweeps={m.meta['sweeps']}")
    else:
        baselines.save_baseline(baselines.poprec_fit(X), args.out)
        print("poprec")
    return 0


def _load_any_model(path):
    try:
        dp = infae.load_model(path)
        return lambda H, rows: infae.predict_log_proba(dp, H)
    except (ValueError, KeyError):
        return baselines.load_baseline(path).score


def cmd_evaluate(args) -> int:
    split = data.load_split(args.split)
    score = _load_any_model(args.model)
    rep = infae.evaluate_scorer(
        score, split, args.ks, mask_train=not args.no_mask, target=args.target,
        standard_ndcg=args.standard_ndcg, rows_arg=True,
    )
    if args.strata:
        H = split.train.matrix
        rows = np.arange(H.shape[0])
        S = np.vstack([score(H[lo:lo + 1024], rows[lo:lo + 1024]) for lo in range(0, H.shape[0], 1024)])
        prop = metrics.PropensityModel.from_dataset(split.train)
        rep.strata = metrics.stratify(split.train, S, getattr(split, args.target).matrix, args.strata,
                                      args.ks, args.strata_by, H, prop, args.standard_ndcg)
    print(rep.format_table())
    if args.json:
        Path(args.json).write_text(rep.to_json() + "\n", encoding="utf-8")
    if args.csv:
        Path(args.csv).write_text(rep.to_csv(), encoding="utf-8")
    return 0


def cmd_sample(args) -> int:
    split = data.load_split(args.split)
    budget = samplers.SampleBudget.parse(args.budget)
    kw = {"proxy_epochs": args.proxy_epochs} if args.strategy == "svp-cf" else {}
    sub = samplers.sample(args.strategy, split.train, budget, seed=args.seed, **kw)
    meta = {"strategy": args.strategy, "budget": budget.label(), "seed": args.seed,
            "source": split.train.fingerprint(), "user_ids": list(sub.user_ids)}
    data.write_summary(data.SampledSummary(sub.matrix, sub.item_ids, meta), args.out)
    print(f"{args.strategy}: {sub.n_users} users, {sub.n_interactions} interactions")
    return 0


def cmd_distill(args) -> int:
    split = data.load_split(args.split)
    base = {}
    if args.config:
        base = dict(load_config(args.config).distill)
    for name in ("mu", "gamma", "tau", "lam", "lambda2", "batch_size", "step_size",
                 "max_outer", "val_every", "patience", "seed", "optimizer", "depth"):
        v = getattr(args, name)
        if v is not None:
            base[name] = v
    cfg = distill.DistillConfig(**base)
    summary = distill.synthesize(split, cfg, checkpoint=args.checkpoint, resume=args.resume)
    data.write_summary(summary, args.out)
    print(f"distill-cf: {summary.mu} rows, {summary.matrix.nnz} entries, "
          f"best val {cfg.val_metric}={summary.meta['best_val']}")
    return 0 if not summary.meta["aborted"] else EXIT_NUMERIC


def cmd_experiment(args) -> int:
    cfg = load_config(args.config, kind=args.kind, output=args.out, workers=args.workers)
    experiments.run(cfg)
    print(f"{cfg.kind}: outputs in {cfg.output}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="infcf", description="Infinite-width autoencoders and Distill-CF for recommendation.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("prepare", help="load raw interactions and write a per-user train/val/test split")
    s.add_argument("--data", required=True)
    s.add_argument("--format", default="ml-delim", choices=data.FORMATS)
    s.add_argument("--rating-threshold", type=float)
    s.add_argument("--min-interactions", type=int, default=3)
    s.add_argument("--holdout", type=float, default=0.1, help="share of each user's history for val and for test")
    s.add_argument("--seed", type=int, default=42)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_prepare)

    s = sub.add_parser("train", help="fit a model on a prepared split")
    s.add_argument("--split", required=True)
    s.add_argument("--model", default="infae", choices=("infae", "ease", "bias", "poprec"))
    s.add_argument("--lambda", dest="lam", type=float, help="fixed regularizer (skips the validation grid)")
    s.add_argument("--grid", type=_floats, help="comma-separated regularizer grid")
    s.add_argument("--depth", type=int, default=1)
    s.add_argument("--fit-on", help="summary file to fit on instead of the train split")
    s.add_argument("--max-train-users", type=int, help="fit the infae model on a random subset of this many users")
    s.add_argument("--seed", type=int, default=42)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("evaluate", help="score a saved model on the val or test split")
    s.add_argument("--split", required=True)
    s.add_argument("--model", required=True)
    s.add_argument("--target", default="test", choices=("val", "test"))
    s.add_argument("--ks", type=_ints, default=metrics.DEFAULT_KS)
    s.add_argument("--standard-ndcg", action="store_true", help="truncate the ideal DCG at k")
    s.add_argument("--no-mask", action="store_true", help="keep train items in the ranking")
    s.add_argument("--strata", type=int, help="also report this many popularity buckets")
    s.add_argument("--strata-by", default="users", choices=("users", "items"))
    s.add_argument("--json")
    s.add_argument("--csv")
    s.set_defaults(fn=cmd_evaluate)

    s = sub.add_parser("sample", help="down-sample the train split")
    s.add_argument("--split", required=True)
    s.add_argument("--strategy", required=True, choices=samplers.STRATEGIES)
    s.add_argument("--budget", required=True, help="'P%%' of interactions or a user count")
    s.add_argument("--proxy-epochs", type=int, default=5)
    s.add_argument("--seed", type=int, default=42)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_sample)

    s = sub.add_parser("distill", help="synthesize a Distill-CF summary")
    s.add_argument("--split", required=True)
    s.add_argument("--config", help="experiment config whose 'distill' mapping supplies defaults")
    for name, typ in (("mu", int), ("gamma", int), ("tau", float), ("lambda2", float), ("batch_size", int),
                      ("step_size", float), ("max_outer", int), ("val_every", int), ("patience", int),
                      ("seed", int), ("depth", int)):
        s.add_argument("--" + name.replace("_", "-"), dest=name, type=typ)
    s.add_argument("--lambda", dest="lam", type=float)
    s.add_argument("--optimizer", choices=("sgd", "adam"))
    s.add_argument("--checkpoint")
    s.add_argument("--resume", action="store_true")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_distill)

    s = sub.add_parser("experiment", help="run a configured experiment")
    s.add_argument("--config", required=True)
    s.add_argument("--kind", choices=experiments.RUNNERS)
    s.add_argument("--out")
    s.add_argument("--workers", type=int)
    s.set_defaults(fn=cmd_experiment)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return args.fn(args)
    except (ConfigError, data.DataError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (np.linalg.LinAlgError, distill.DivergenceError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
