"""Config-driven experiment runs shared by the CLI commands."""

from __future__ import annotations

import dataclasses
import json
import os
import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

from .data import Dataset, DatasetSpec, generate, split
from .ga_init import GaInitConfig, gradient_initialize
from .lora import SCHEMES, InitScheme, adapt_network
from .nn import Network, NetworkSpec, forward
from .train import MetricsLog, TrainConfig, TrainingDiverged, train

ALL_RUNS = SCHEMES + ("full",)


class ConfigError(ValueError):
    """Bad experiment configuration; ``path`` names the offending field."""

    def __init__(self, path: str, message: str):
        self.path = path
        super().__init__(f"{path}: {message}")


@dataclass(frozen=True)
class StabilitySettings:
    grid: tuple = tuple((d, d, r) for d in (64, 256, 1024) for r in (2, 8, 32))
    samples: int = 10_000
    alpha: float = 1.0
    gamma: float = 1.0
    seed: int = 0
    factor_draws: int = 20
    constant_zeta: float = 1.0


@dataclass(frozen=True)
class ExperimentConfig:
    name: str = "reference"
    dataset: DatasetSpec = field(default_factory=lambda: DatasetSpec(
        "teacher_student", n_samples=1024, seed=1, dims=(64, 64, 64), teacher_seed=0,
        shift_rank=4, shift_scale=0.5))
    network: NetworkSpec = field(default_factory=lambda: NetworkSpec((64, 64, 64), "tanh", "mse", 0))
    schemes: tuple = ("vanilla", "lora_ga")
    train: TrainConfig = field(default_factory=lambda: TrainConfig(
        optimizer="adamw", lr=1e-3, warmup_ratio=0.03, steps=300, batch_size=32))
    ga_init: GaInitConfig = field(default_factory=lambda: GaInitConfig(
        rank=4, alpha=16.0, gamma=16.0, sampled_batch_size=32))
    seeds: tuple = (0, 1, 2, 3, 4)
    eval_fraction: float = 0.25
    threshold_ratio: Optional[float] = 0.5
    loss_threshold: Optional[float] = None
    stability: StabilitySettings = field(default_factory=StabilitySettings)
    output_dir: str = "runs"
    jobs: Optional[int] = None

    def __post_init__(self):
        if not self.schemes:
            raise ConfigError("schemes", "must not be empty")
        for s in self.schemes:
            if s not in ALL_RUNS:
                raise ConfigError("schemes", f"unknown scheme {s!r}; expected a subset of {ALL_RUNS}")
        if not self.seeds:
            raise ConfigError("seeds", "must not be empty")
        if not 0 < self.eval_fraction < 1:
            raise ConfigError("eval_fraction", "must lie in (0, 1)")
        if (self.threshold_ratio is None) == (self.loss_threshold is None):
            raise ConfigError("threshold_ratio", "set exactly one of threshold_ratio / loss_threshold")
        if self.dataset.kind == "teacher_student":
            if self.dataset.dims[0] != self.network.layer_dims[0] or \
                    self.dataset.dims[-1] != self.network.layer_dims[-1]:
                raise ConfigError("network.layer_dims", "input/output sizes must match dataset.dims")


_NESTED = {"dataset": DatasetSpec, "network": NetworkSpec, "train": TrainConfig,
           "ga_init": GaInitConfig, "stability": StabilitySettings}
_TUPLES = {"layer_dims", "dims", "schemes", "seeds", "exclude_layers", "grid", "partition"}


def _tuplify(v):
    return tuple(_tuplify(x) for x in v) if isinstance(v, list) else v


def _build(cls, raw: Any, path: str):
    if not isinstance(raw, dict):
        raise ConfigError(path, f"expected an object, got {type(raw).__name__}")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - names)
    if unknown:
        raise ConfigError(f"{path}.{unknown[0]}" if path else unknown[0], "unknown field")
    kwargs = {}
    for k, v in raw.items():
        sub = f"{path}.{k}" if path else k
        if cls is ExperimentConfig and k in _NESTED:
            kwargs[k] = _build(_NESTED[k], v, sub)
        else:
            kwargs[k] = _tuplify(v) if k in _TUPLES else v
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(path or "<root>", str(exc)) from None


def config_from_dict(raw: dict) -> ExperimentConfig:
    if "dataset" in raw and "kind" not in raw.get("dataset", {}):
        raise ConfigError("dataset.kind", "required")
    return _build(ExperimentConfig, raw, "")


def load_config(path) -> ExperimentConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(str(path), "file not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(str(path), f"invalid JSON at line {exc.lineno}: {exc.msg}") from None
    return config_from_dict(raw)


def config_to_dict(cfg) -> dict:
    return json.loads(json.dumps(dataclasses.asdict(cfg)))


# --- runs ----------------------------------------------------------------------

def prepare_data(cfg: ExperimentConfig) -> tuple[Dataset, Dataset]:
    ds = generate(cfg.dataset)
    return split(ds, (1.0 - cfg.eval_fraction, cfg.eval_fraction), cfg.dataset.seed)


def base_network(cfg: ExperimentConfig) -> Network:
    return Network.from_spec(cfg.network)


def threshold(cfg: ExperimentConfig, base: Network, train_set: Dataset) -> float:
    if cfg.loss_threshold is not None:
        return float(cfg.loss_threshold)
    return cfg.threshold_ratio * forward(base, train_set.inputs, train_set.targets).loss


def build_network(cfg: ExperimentConfig, base: Network, scheme: str, seed: int,
                  train_set: Dataset) -> Network:
    g = cfg.ga_init
    if scheme == "full":
        return base.copy()
    if scheme in ("lora_ga", "grad_approx_ga"):
        ga = dataclasses.replace(g, scheme=scheme, seed=seed)
        net, _ = gradient_initialize(base, ga, train_set.inputs, train_set.targets)
        return net
    gamma = g.gamma if scheme == "gaussian_so" else None
    layers = [i for i in range(len(base.layers)) if i not in set(g.exclude_layers)]
    return adapt_network(base, InitScheme(scheme, g.alpha, g.rank, gamma, seed), layers=layers)


@dataclass
class RunResult:
    scheme: str
    seed: int
    log: MetricsLog
    status: str


def run_one(cfg: ExperimentConfig, scheme: str, seed: int) -> RunResult:
    train_set, eval_set = prepare_data(cfg)
    base = base_network(cfg)
    net = build_network(cfg, base, scheme, seed, train_set)
    tcfg = dataclasses.replace(cfg.train, seed=seed,
                               trainable="full" if scheme == "full" else "adapters_only")
    try:
        log = train(net, train_set.inputs, train_set.targets, tcfg,
                    eval_data=(eval_set.inputs, eval_set.targets))
        return RunResult(scheme, seed, log, "ok")
    except TrainingDiverged as exc:
        return RunResult(scheme, seed, exc.log, "DIVERGED")


def _run_packed(args):
    return run_one(*args)


def run_all(cfg: ExperimentConfig, schemes, seeds, jobs: Optional[int] = None) -> list[RunResult]:
    tasks = [(cfg, s, seed) for s in schemes for seed in seeds]
    jobs = jobs or cfg.jobs or os.cpu_count() or 1
    if jobs <= 1 or len(tasks) <= 1:
        return [run_one(*t) for t in tasks]
    with ProcessPoolExecutor(max_workers=min(jobs, len(tasks))) as pool:
        return list(pool.map(_run_packed, tasks))


def _median(values):
    vals = [v for v in values if v is not None]
    if len(vals) < len(values) or not vals:
        # unreached thresholds count as +inf; a median that lands on one is undefined
        finite = sorted(vals)
        k = len(values)
        if len(finite) * 2 <= k:
            return None
        return float(statistics.median(finite + [float("inf")] * (k - len(finite))))
    return float(statistics.median(vals))


SUMMARY_SCHEMA = {
    "type": "object",
    "required": ["experiment", "threshold", "smoothing_window", "seeds", "schemes",
                 "speedup_vanilla_over_lora_ga"],
    "additionalProperties": False,
    "properties": {
        "experiment": {"type": "string"},
        "threshold": {"type": "number"},
        "smoothing_window": {"type": "integer"},
        "seeds": {"type": "array", "items": {"type": "integer"}},
        "speedup_vanilla_over_lora_ga": {"type": ["number", "null"]},
        "schemes": {
            "type": "object",
            "additionalProperties": {
                "type": "object",
                "required": ["median_steps_to_threshold", "median_final_loss",
                             "median_eval_loss", "per_seed"],
                "additionalProperties": False,
                "properties": {
                    "median_steps_to_threshold": {"type": ["number", "null"]},
                    "median_final_loss": {"type": ["number", "null"]},
                    "median_eval_loss": {"type": ["number", "null"]},
                    "per_seed": {
                        "type": "object",
                        "additionalProperties": {
                            "type": "object",
                            "required": ["status", "steps_to_threshold", "final_loss", "eval_loss"],
                            "additionalProperties": False,
                            "properties": {
                                "status": {"enum": ["ok", "DIVERGED"]},
                                "steps_to_threshold": {"type": ["integer", "null"]},
                                "final_loss": {"type": ["number", "null"]},
                                "eval_loss": {"type": ["number", "null"]},
                            },
                        },
                    },
                },
            },
        },
    },
}


def summarize(cfg: ExperimentConfig, results: list[RunResult], tau: float, seeds) -> dict:
    schemes = {}
    for scheme in dict.fromkeys(r.scheme for r in results):
        rows = [r for r in results if r.scheme == scheme]
        per_seed = {}
        for r in rows:
            per_seed[str(r.seed)] = {
                "status": r.status,
                "steps_to_threshold": None if r.status != "ok" else r.log.steps_to_threshold(tau),
                "final_loss": r.log.final_loss,
                "eval_loss": r.log.eval_loss,
            }
        ok = [p for p in per_seed.values() if p["status"] == "ok"]
        schemes[scheme] = {
            "median_steps_to_threshold": _median([p["steps_to_threshold"] for p in per_seed.values()]),
            "median_final_loss": _median([p["final_loss"] for p in ok]) if ok else None,
            "median_eval_loss": _median([p["eval_loss"] for p in ok]) if ok else None,
            "per_seed": per_seed,
        }
    speedup = None
    if "vanilla" in schemes and "lora_ga" in schemes:
        v = schemes["vanilla"]["median_steps_to_threshold"]
        g = schemes["lora_ga"]["median_steps_to_threshold"]
        if v is not None and g not in (None, 0):
            speedup = v / g
    return {
        "experiment": cfg.name,
        "threshold": tau,
        "smoothing_window": cfg.train.smoothing_window,
        "seeds": [int(s) for s in seeds],
        "schemes": schemes,
        "speedup_vanilla_over_lora_ga": speedup,
    }
