"""Experiment configuration: a nested YAML file with a fixed schema.

Every section is optional and falls back to the defaults below. Unknown
sections or keys are rejected. The canonical form returned by
:meth:`ExperimentConfig.to_dict` is what output files echo.

Schema::

    spec:       MetaDistributionSpec fields (seed is set per run)
    hp:         alpha, eta, beta, inner_steps, outer_steps, ridge
    reward:     r_max
    methods:    list drawn from sft, mtrm, hpl, ours
    sft:        steps, lr
    meta:       stride, outer_batch, select (final | train)
    stopping:   max_steps, grad_norm_tol, patience
    adapt:      batch_size
    mtrm:       steps, lr
    hpl:        steps
    eval:       splits (train and/or heldout)
    checkgrad:  n_instances, max_p, max_q, max_steps, epsilon, rel_tol, cos_tol
    seeds:      list of distinct non-negative integers
    workers:    number of processes for multi-seed runs
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import yaml

from .core import HyperParams, UsageError
from .hypergrad import CheckConfig
from .meta import StoppingRule
from .synth import SPLITS, MetaDistributionSpec

METHODS = ("sft", "mtrm", "hpl", "ours")
SELECT_RULES = ("final", "train")

# Tuned for the default synthetic suite; see README for the reasoning.
DEFAULT_SPEC = MetaDistributionSpec(prior_mean_norm=2.0, prior_scale=0.2, ref_temperature=4.0,
                                    feature_scale=0.3)
DEFAULT_HP = HyperParams(alpha=0.05, eta=1.0, beta=8.0, inner_steps=50, outer_steps=400)


@dataclass(frozen=True)
class SFTConfig:
    steps: int = 300
    lr: float = 0.5


@dataclass(frozen=True)
class MetaConfig:
    stride: int = 20
    outer_batch: int = 128
    select: str = "final"


@dataclass(frozen=True)
class MTRMConfig:
    steps: int = 500
    lr: float = 0.5


@dataclass(frozen=True)
class HPLConfig:
    steps: int = 3000


@dataclass(frozen=True)
class ExperimentConfig:
    spec: MetaDistributionSpec = DEFAULT_SPEC
    hp: HyperParams = DEFAULT_HP
    r_max: float = 16.0
    methods: tuple = METHODS
    sft: SFTConfig = SFTConfig()
    meta: MetaConfig = MetaConfig()
    stopping: StoppingRule = StoppingRule(max_steps=3000, patience=250)
    adapt_batch: int = 16
    mtrm: MTRMConfig = MTRMConfig()
    hpl: HPLConfig = HPLConfig()
    eval_splits: tuple = ("heldout",)
    checkgrad: CheckConfig = CheckConfig()
    checkgrad_instances: int = 100
    seeds: tuple = (0,)
    workers: int = 1

    def __post_init__(self):
        if not self.methods:
            raise UsageError("at least one method is required")
        bad = [m for m in self.methods if m not in METHODS]
        if bad:
            raise UsageError(f"unknown methods {bad}; choose from {list(METHODS)}")
        if len(set(self.methods)) != len(self.methods):
            raise UsageError("methods must be distinct")
        if not self.seeds or len(set(self.seeds)) != len(self.seeds):
            raise UsageError("seeds must be a nonempty list of distinct integers")
        if any(not isinstance(s, int) or isinstance(s, bool) or s < 0 for s in self.seeds):
            raise UsageError("seeds must be non-negative integers")
        if not self.r_max > 0:
            raise UsageError("reward.r_max must be > 0")
        if self.meta.select not in SELECT_RULES:
            raise UsageError(f"meta.select must be one of {list(SELECT_RULES)}")
        if self.meta.stride < 1 or self.meta.outer_batch < 1:
            raise UsageError("meta.stride and meta.outer_batch must be >= 1")
        if self.adapt_batch < 1 or self.workers < 1 or self.checkgrad_instances < 1:
            raise UsageError("adapt.batch_size, workers and checkgrad.n_instances must be >= 1")
        if self.sft.steps < 0 or self.mtrm.steps < 0 or self.hpl.steps < 0:
            raise UsageError("step counts must be >= 0")
        if not self.eval_splits or any(s not in SPLITS for s in self.eval_splits):
            raise UsageError(f"eval.splits must be a nonempty subset of {list(SPLITS)}")

    def for_seed(self, seed: int) -> tuple[MetaDistributionSpec, HyperParams]:
        """Spec and hyperparameters of one run; the run seed replaces both seeds."""
        return replace(self.spec, seed=seed), replace(self.hp, seed=seed)

    def to_dict(self) -> dict:
        hp = asdict(self.hp)
        hp.pop("seed")
        spec = asdict(self.spec)
        spec.pop("seed")
        cg = asdict(self.checkgrad)
        cg["n_instances"] = self.checkgrad_instances
        return {
            "spec": spec,
            "hp": hp,
            "reward": {"r_max": self.r_max},
            "methods": list(self.methods),
            "sft": asdict(self.sft),
            "meta": asdict(self.meta),
            "stopping": asdict(self.stopping),
            "adapt": {"batch_size": self.adapt_batch},
            "mtrm": asdict(self.mtrm),
            "hpl": asdict(self.hpl),
            "eval": {"splits": list(self.eval_splits)},
            "checkgrad": cg,
            "seeds": list(self.seeds),
            "workers": self.workers,
        }


def _section(cls, values, name: str, base=None, drop=()):
    if values is None:
        return base if base is not None else cls()
    if not isinstance(values, dict):
        raise UsageError(f"config section {name!r} must be a mapping")
    allowed = {f.name for f in fields(cls)} - set(drop)
    unknown = sorted(set(values) - allowed)
    if unknown:
        raise UsageError(f"unknown keys in {name!r}: {unknown}")
    kinds = {f.name: f.type for f in fields(cls)}
    for key, value in values.items():
        want = kinds[key]
        want = want if isinstance(want, str) else want.__name__
        if want == "int" and (not isinstance(value, int) or isinstance(value, bool)):
            raise UsageError(f"{name}.{key} must be an integer, got {value!r}")
        if want == "float" and (not isinstance(value, (int, float)) or isinstance(value, bool)):
            raise UsageError(f"{name}.{key} must be a number, got {value!r}")
        if want == "str" and not isinstance(value, str):
            raise UsageError(f"{name}.{key} must be a string, got {value!r}")
    values = {k: float(v) if kinds[k] in ("float", float) else v for k, v in values.items()}
    try:
        return replace(base, **values) if base is not None else cls(**values)
    except TypeError as exc:
        raise UsageError(f"bad section {name!r}: {exc}") from None


def _single(values, name: str, key: str):
    if values is None:
        return None
    if not isinstance(values, dict) or set(values) - {key}:
        raise UsageError(f"config section {name!r} accepts only the key {key!r}")
    return values.get(key)


def config_from_dict(raw: dict | None) -> ExperimentConfig:
    raw = {} if raw is None else raw
    if not isinstance(raw, dict):
        raise UsageError("config must be a mapping at the top level")
    known = {"spec", "hp", "reward", "methods", "sft", "meta", "stopping", "adapt", "mtrm",
             "hpl", "eval", "checkgrad", "seeds", "workers"}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise UsageError(f"unknown config sections: {unknown}")
    kw = {}
    kw["spec"] = _section(MetaDistributionSpec, raw.get("spec"), "spec", DEFAULT_SPEC, ("seed",))
    kw["hp"] = _section(HyperParams, raw.get("hp"), "hp", DEFAULT_HP, ("seed",))
    r_max = _single(raw.get("reward"), "reward", "r_max")
    if r_max is not None:
        if not isinstance(r_max, (int, float)) or isinstance(r_max, bool):
            raise UsageError("reward.r_max must be a number")
        kw["r_max"] = float(r_max)
    if "methods" in raw:
        if not isinstance(raw["methods"], list):
            raise UsageError("methods must be a list")
        kw["methods"] = tuple(raw["methods"])
    kw["sft"] = _section(SFTConfig, raw.get("sft"), "sft")
    kw["meta"] = _section(MetaConfig, raw.get("meta"), "meta")
    kw["stopping"] = _section(StoppingRule, raw.get("stopping"), "stopping",
                              ExperimentConfig.stopping)
    batch = _single(raw.get("adapt"), "adapt", "batch_size")
    if batch is not None:
        kw["adapt_batch"] = batch
    kw["mtrm"] = _section(MTRMConfig, raw.get("mtrm"), "mtrm")
    kw["hpl"] = _section(HPLConfig, raw.get("hpl"), "hpl")
    splits = _single(raw.get("eval"), "eval", "splits")
    if splits is not None:
        if not isinstance(splits, list):
            raise UsageError("eval.splits must be a list")
        kw["eval_splits"] = tuple(splits)
    cg = dict(raw.get("checkgrad") or {})
    if "checkgrad" in raw and not isinstance(raw["checkgrad"], dict):
        raise UsageError("config section 'checkgrad' must be a mapping")
    if "n_instances" in cg:
        kw["checkgrad_instances"] = cg.pop("n_instances")
    kw["checkgrad"] = _section(CheckConfig, cg, "checkgrad")
    if "seeds" in raw:
        if not isinstance(raw["seeds"], list):
            raise UsageError("seeds must be a list")
        kw["seeds"] = tuple(raw["seeds"])
    if "workers" in raw:
        kw["workers"] = raw["workers"]
    return ExperimentConfig(**kw)


def load_config(path) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    path = Path(path)
    if not path.exists():
        raise UsageError(f"config file not found: {path}")
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise UsageError(f"malformed config {path}: {exc}") from None
    return config_from_dict(raw)


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=True)
