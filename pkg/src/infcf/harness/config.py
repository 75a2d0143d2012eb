"""Experiment configuration: a YAML or JSON mapping validated into a frozen dataclass."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from ..distill import DistillConfig
from ..infae import LAMBDA_GRID
from ..baselines import EASE_GRID
from ..samplers import STRATEGIES, SampleBudget

KINDS = ("table1", "sample-sweep", "noise-sweep", "transfer", "depth", "strata")
MODELS = ("infae", "ease", "bias", "poprec")
DISTILL_SAMPLER = "distill-cf"
FULL_SAMPLER = "full"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    """One experiment. ``dataset`` is a file path or ``"synthetic"``.

    Sweep budgets are strings: ``"P%"`` (share of interactions) or a user
    count such as ``"500"``. Distill-CF counts as a sampler whose summary has
    as many rows as the user count.
    """

    kind: str = "table1"
    dataset: str = "synthetic"
    format: str = "ml-delim"
    rating_threshold: float | None = None
    columns: tuple = ("user", "item", "rating", "timestamp")
    synthetic: dict = field(default_factory=dict)
    seed: int = 42
    ratios: tuple = (0.8, 0.1, 0.1)
    min_interactions: int = 3
    ks: tuple = (10, 100)
    standard_ndcg: bool = False
    models: tuple = MODELS
    infae_lambdas: tuple = LAMBDA_GRID
    ease_lambdas: tuple = EASE_GRID
    bias_l2: tuple = (0.1, 1.0, 10.0)
    depth: int = 1
    max_train_users: int | None = None
    depths: tuple = (1, 2, 3, 4)
    samplers: tuple = ("user-rns", DISTILL_SAMPLER)
    budgets: tuple = ("100", "500")
    noise_levels: tuple = (0.0, 1.0, 5.0)
    repeats: int = 1
    svp_epochs: int = 5
    distill: dict = field(default_factory=dict)
    n_buckets: int = 5
    output: str = "results"
    workers: int = 1

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, list):
                object.__setattr__(self, f.name, tuple(v))
        object.__setattr__(self, "budgets", tuple(str(b) for b in self.budgets))
        if self.kind not in KINDS:
            raise ConfigError(f"kind must be one of {', '.join(KINDS)}; got {self.kind!r}")
        bad = [m for m in self.models if m not in MODELS]
        if bad:
            raise ConfigError(f"unknown models {bad}; choose from {', '.join(MODELS)}")
        known = set(STRATEGIES) | {DISTILL_SAMPLER, FULL_SAMPLER}
        bad = [s for s in self.samplers if s not in known]
        if bad:
            raise ConfigError(f"unknown samplers {bad}; choose from {', '.join(sorted(known))}")
        for name in ("infae_lambdas", "ease_lambdas", "bias_l2", "ks", "depths", "models"):
            if not getattr(self, name):
                raise ConfigError(f"{name} must not be empty")
        for b in self.budgets:
            try:
                SampleBudget.parse(b)
            except ValueError as exc:
                raise ConfigError(str(exc)) from None
        if self.dataset != "synthetic" and not Path(self.dataset).exists():
            raise ConfigError(f"dataset file {self.dataset} does not exist")
        if self.repeats < 1 or self.workers < 1 or self.n_buckets < 1:
            raise ConfigError("repeats, workers and n_buckets must be positive")
        try:
            self.distill_config()
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"distill: {exc}") from None

    def distill_config(self, **override) -> DistillConfig:
        d = dict(self.distill)
        d.setdefault("depth", self.depth)
        d.update(override)
        return DistillConfig(**d)

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))

    def result_dict(self) -> dict:
        """Every setting that can change results: all but the output dir and worker count."""
        d = self.to_dict()
        d.pop("output")
        d.pop("workers")
        return d

    def fingerprint(self) -> str:
        return hashlib.sha256(json.dumps(self.result_dict(), sort_keys=True).encode()).hexdigest()[:16]

    def replace(self, **changes) -> "ExperimentConfig":
        d = self.to_dict()
        d.update(changes)
        return from_dict(d)


def from_dict(d: dict) -> ExperimentConfig:
    if not isinstance(d, dict):
        raise ConfigError("config must be a key-value mapping")
    names = {f.name for f in fields(ExperimentConfig)}
    unknown = sorted(set(d) - names)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    try:
        return ExperimentConfig(**d)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def load_config(path, **overrides) -> ExperimentConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    try:
        d = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    d.update({k: v for k, v in overrides.items() if v is not None})
    return from_dict(d)
