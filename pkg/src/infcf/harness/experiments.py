"""Experiment drivers: full-data comparison, sampling and noise sweeps, transfer, depth and strata.

Work is cut into independent cells (one per noise level, sampler, budget and
repeat). Each cell draws its randomness from streams keyed by its own
coordinates, so results do not depend on which worker runs it or when. Cell
results are cached as JSON under ``<output>/cells``; a rerun with the same
config reuses them, and all tables are assembled in config order.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
import scipy.sparse as sp

from .. import baselines, data, distill, infae, metrics, samplers
from ..kernel import KernelConfig
from ..rng import derive_seed
from .config import DISTILL_SAMPLER, FULL_SAMPLER, ExperimentConfig

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Data and models


def load_dataset(cfg: ExperimentConfig) -> data.InteractionDataset:
    if cfg.dataset == "synthetic":
        return data.synthetic_interactions(**cfg.synthetic)
    return data.load_interactions(cfg.dataset, cfg.format, cfg.rating_threshold, cfg.columns)


def prepare(cfg: ExperimentConfig) -> data.SplitDataset:
    return data.split_per_user(load_dataset(cfg), cfg.ratios, cfg.min_interactions, cfg.seed)


def selection_metric(cfg: ExperimentConfig) -> str:
    return f"ndcg@{max(cfg.ks)}"


@dataclass
class FittedModel:
    name: str
    score: Callable
    params: dict


def _pick(split, cfg, candidates):
    """Best (params, score_fn) by validation ranking quality."""
    metric = selection_metric(cfg)
    best, best_val = None, -math.inf
    for params, fn in candidates:
        rep = infae.evaluate_scorer(fn, split, cfg.ks, target="val", rows_arg=True)
        if rep[metric] > best_val:
            best, best_val = (params, fn), rep[metric]
    return best


def fit_model(name: str, split: data.SplitDataset, cfg: ExperimentConfig, train=None, depth=None, seed=None) -> FittedModel:
    """Fit ``name`` on ``train`` (default: the split's train part), tuned on validation.

    Validation and test users are always scored from ``split.train`` histories.
    """
    train = split.train.matrix if train is None else getattr(train, "matrix", train)
    seed = cfg.seed if seed is None else seed
    if name == "infae":
        kc = KernelConfig(depth or cfg.depth)
        train = infae.subsample_users(train, cfg.max_train_users, seed)
        dp, _ = infae.select_lambda(split, cfg.infae_lambdas, kc, train=train, metric=selection_metric(cfg), ks=cfg.ks)
        return FittedModel(name, lambda H, rows: infae.predict_log_proba(dp, H), {"lambda": dp.lam, "depth": kc.depth})
    if name == "ease":
        cands = []
        for lam in cfg.ease_lambdas:
            m = baselines.ease_fit(train, lam)
            cands.append(({"lambda": lam}, m.score))
        params, fn = _pick(split, cfg, cands)
        return FittedModel(name, fn, params)
    if name == "bias":
        cands = []
        for l2 in cfg.bias_l2:
            m = baselines.bias_fit(train, l2, seed)
            cands.append(({"l2": l2}, m.score))
        params, fn = _pick(split, cfg, cands)
        return FittedModel(name, fn, params)
    if name == "poprec":
        m = baselines.poprec_fit(train)
        return FittedModel(name, m.score, {})
    raise ValueError(f"unknown model {name!r}")


def test_report(model: FittedModel, split: data.SplitDataset, cfg: ExperimentConfig, keep_per_user=False):
    return infae.evaluate_scorer(
        model.score, split, cfg.ks, target="test", standard_ndcg=cfg.standard_ndcg,
        keep_per_user=keep_per_user, rows_arg=True, meta={"model": model.name, **model.params},
    )


# ---------------------------------------------------------------------------
# Cells


def _key_hash(cfg: ExperimentConfig, key: tuple, salt: str) -> str:
    blob = json.dumps([cfg.fingerprint(), salt, list(key)], sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:20]


def run_cells(cfg: ExperimentConfig, cells: dict, fn: Callable, salt: str = "") -> dict:
    """``{key: fn(key)}``, reusing cached cell results and running the rest on ``cfg.workers`` threads.

    ``salt`` (the split fingerprint) keeps a changed input file from reusing stale cells.
    """
    cache = Path(cfg.output) / "cells"
    cache.mkdir(parents=True, exist_ok=True)

    def one(key):
        path = cache / f"{_key_hash(cfg, key, salt)}.json"
        if path.exists():
            stored = json.loads(path.read_text(encoding="utf-8"))
            if stored["key"] == list(key):
                return stored["result"]
        t0 = time.time()
        result = fn(key)
        log.info("cell %s done in %.1fs", key, time.time() - t0)
        tmp = path.with_suffix(".tmp")
        tmp.write_text(json.dumps({"key": list(key), "result": result}, sort_keys=True), encoding="utf-8")
        tmp.replace(path)
        return result

    keys = list(cells)
    if cfg.workers == 1:
        results = [one(k) for k in keys]
    else:
        with ThreadPoolExecutor(cfg.workers) as pool:
            results = list(pool.map(one, keys))
    return dict(zip(keys, results))


def _noise_label(x: float) -> str:
    return f"{float(x):g}"


def noisy_train(split: data.SplitDataset, cfg: ExperimentConfig, noise: float, repeat: int) -> data.InteractionDataset:
    if noise == 0:
        return split.train
    return data.inject_noise(split.train, noise, derive_seed(cfg.seed, "noise", _noise_label(noise), repeat))


def draw_sample(
    sampler: str, budget_text: str, train: data.InteractionDataset, split: data.SplitDataset,
    cfg: ExperimentConfig, repeat: int, cache_dir: Path | None = None, tag: str = "",
):
    """The training matrix a cell fits on. A percent budget gives Distill-CF
    ``ceil(p * users / 100)`` rows; a user count gives interaction-RNS that many
    users' worth of interactions at the train average."""
    budget = samplers.SampleBudget.parse(budget_text)
    seed = derive_seed(cfg.seed, "sample", sampler, budget_text, repeat)
    if sampler == FULL_SAMPLER:
        return train.matrix
    if sampler == DISTILL_SAMPLER:
        mu = budget.target(train) if budget.unit == "users" else math.ceil(budget.p_percent * train.n_users / 100)
        mu = min(mu, train.n_users)
        dcfg = cfg.distill_config(mu=mu, seed=seed)
        path = None
        if cache_dir is not None:
            blob = json.dumps([train.fingerprint(), dcfg.to_dict(), tag], sort_keys=True).encode()
            path = cache_dir / f"summary-{hashlib.sha256(blob).hexdigest()[:20]}.txt"
            if path.exists():
                return data.read_summary(path).matrix
        summary = distill.synthesize(split.with_train(train), dcfg)
        if path is not None:
            data.write_summary(summary, path)
        return summary.matrix
    if sampler == "interaction-rns" and budget.unit == "users":
        per_user = train.n_interactions / train.n_users
        budget = samplers.SampleBudget(count=max(1, round(budget.count * per_user)))
    kw = {"proxy_epochs": cfg.svp_epochs} if sampler == "svp-cf" else {}
    return samplers.sample(sampler, train, budget, seed=seed, **kw).matrix


def _sweep_cell(split, cfg, models, cache_dir):
    def fn(key):
        noise, sampler, budget, repeat = key
        train = noisy_train(split, cfg, float(noise), repeat)
        X = draw_sample(sampler, budget, train, split, cfg, repeat, cache_dir, tag=noise)
        out = {}
        for name in models:
            model = fit_model(name, split, cfg, train=X, seed=derive_seed(cfg.seed, "fit", name, repeat))
            out[name] = test_report(model, split, cfg).values
        out["_rows"] = int(X.shape[0])
        out["_entries"] = int(sp.csr_matrix(X).nnz)
        return out
    return fn


def _median(values):
    vals = [v for v in values if not math.isnan(v)]
    return float(np.median(vals)) if vals else float("nan")


def _metric_order(cfg):
    return metrics.metric_names(cfg.ks)


# ---------------------------------------------------------------------------
# Writers


def write_csv(path: Path, header, rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])


def write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# Experiments


def run_table1(cfg: ExperimentConfig, split: data.SplitDataset | None = None) -> dict:
    """Every configured model on the full train split; one report each."""
    split = split or prepare(cfg)
    out = Path(cfg.output)
    results = run_cells(cfg, {(m,): None for m in cfg.models},
                        lambda key: _table1_cell(key[0], split, cfg), split.fingerprint())
    reports = {m: results[(m,)] for m in cfg.models}
    rows = [(m, name, reports[m]["values"][name]) for m in cfg.models for name in _metric_order(cfg)]
    write_csv(out / "table1.csv", ["model", "metric", "value"], rows)
    write_json(out / "table1.json", reports)
    return reports


def _table1_cell(name, split, cfg):
    model = fit_model(name, split, cfg)
    return test_report(model, split, cfg).to_dict()


def _sweep(cfg: ExperimentConfig, split, noise_levels, models, budgets, samplers_):
    cache_dir = Path(cfg.output) / "summaries"
    cache_dir.mkdir(parents=True, exist_ok=True)
    keys = {}
    for noise in noise_levels:
        for s in samplers_:
            for b in budgets:
                for r in range(cfg.repeats):
                    keys[(_noise_label(noise), s, b, r)] = None
    return run_cells(cfg, keys, _sweep_cell(split, cfg, models, cache_dir), split.fingerprint())


def run_sample_sweep(cfg: ExperimentConfig, split: data.SplitDataset | None = None, models=None, prefix="sample_sweep") -> dict:
    """Median-over-repeats test metrics per (sampler, budget), one CSV per model."""
    split = split or prepare(cfg)
    models = tuple(models or [m for m in cfg.models if m in ("infae", "ease")])
    res = _sweep(cfg, split, (0.0,), models, cfg.budgets, cfg.samplers)
    tables = {}
    for m in models:
        rows = []
        for s in cfg.samplers:
            for b in cfg.budgets:
                for name in _metric_order(cfg):
                    vals = [res[("0", s, b, r)][m][name] for r in range(cfg.repeats)]
                    rows.append((s, b, name, _median(vals)))
        write_csv(Path(cfg.output) / f"{prefix}_{m}.csv", ["sampler", "budget", "metric", "value"], rows)
        tables[m] = rows
    return tables


def run_transfer(cfg: ExperimentConfig, split: data.SplitDataset | None = None) -> dict:
    """EASE trained on each sampler's data, Distill-CF summaries included."""
    return run_sample_sweep(cfg, split, models=("ease",), prefix="transfer")


def run_noise_sweep(cfg: ExperimentConfig, split: data.SplitDataset | None = None, models=None) -> dict:
    """Noisy train -> sample -> fit -> clean test, per (noise, sampler, budget).

    ``drop_pct`` is relative to the same model on the full, noise-free train
    split. Models are always scored from clean train histories.
    """
    split = split or prepare(cfg)
    models = tuple(models or [m for m in cfg.models if m in ("infae", "ease")])
    res = _sweep(cfg, split, cfg.noise_levels, models, cfg.budgets, cfg.samplers)
    ref = _sweep(cfg, split, (0.0,), models, ("100%",), (FULL_SAMPLER,))
    tables = {}
    for m in models:
        rows = []
        for noise in cfg.noise_levels:
            nl = _noise_label(noise)
            for s in cfg.samplers:
                for b in cfg.budgets:
                    for name in _metric_order(cfg):
                        base = _median([ref[("0", FULL_SAMPLER, "100%", r)][m][name] for r in range(cfg.repeats)])
                        value = _median([res[(nl, s, b, r)][m][name] for r in range(cfg.repeats)])
                        drop = 100.0 * (base - value) / base if base else float("nan")
                        rows.append((nl, s, b, name, value, drop))
        write_csv(Path(cfg.output) / f"noise_sweep_{m}.csv",
                  ["noise", "sampler", "budget", "metric", "value", "drop_pct"], rows)
        tables[m] = rows
    return tables


def run_depth_study(cfg: ExperimentConfig, split: data.SplitDataset | None = None) -> list:
    split = split or prepare(cfg)
    res = run_cells(cfg, {("depth", d): None for d in cfg.depths},
                    lambda key: test_report(fit_model("infae", split, cfg, depth=key[1]), split, cfg).values,
                    split.fingerprint())
    rows = [(d, name, res[("depth", d)][name]) for d in cfg.depths for name in _metric_order(cfg)]
    write_csv(Path(cfg.output) / "depth.csv", ["depth", "metric", "value"], rows)
    return rows


def run_strata(cfg: ExperimentConfig, split: data.SplitDataset | None = None) -> list:
    """Infinite-width AE test metrics per user-coldness and item-coldness bucket."""
    split = split or prepare(cfg)

    def cell(key):
        model = fit_model("infae", split, cfg)
        H = split.train.matrix
        rows = np.arange(H.shape[0])
        scores = np.vstack([model.score(H[lo:lo + 1024], rows[lo:lo + 1024]) for lo in range(0, H.shape[0], 1024)])
        prop = metrics.PropensityModel.from_dataset(split.train)
        out = []
        for by in ("users", "items"):
            reps = metrics.stratify(split.train, scores, split.test.matrix, cfg.n_buckets, cfg.ks, by, H, prop, cfg.standard_ndcg)
            out.extend({"by": by, "bucket": r.meta["bucket"], "size": r.meta["size"], "values": r.values} for r in reps)
        return out

    res = run_cells(cfg, {("strata",): None}, cell, split.fingerprint())[("strata",)]
    rows = [(e["by"], e["bucket"], e["size"], name, e["values"][name]) for e in res for name in _metric_order(cfg)]
    write_csv(Path(cfg.output) / "strata.csv", ["by", "bucket", "size", "metric", "value"], rows)
    return rows


RUNNERS = {
    "table1": run_table1,
    "sample-sweep": run_sample_sweep,
    "noise-sweep": run_noise_sweep,
    "transfer": run_transfer,
    "depth": run_depth_study,
    "strata": run_strata,
}


def run(cfg: ExperimentConfig):
    log.info("running %s (config %s)", cfg.kind, cfg.fingerprint())
    result = RUNNERS[cfg.kind](cfg)
    write_json(Path(cfg.output) / "config.json", {**cfg.result_dict(), "fingerprint": cfg.fingerprint()})
    return result
