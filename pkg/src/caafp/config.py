"""Experiment configuration.

Config files are YAML mappings. Keys may be grouped under arbitrary section
names for readability; sections are flattened, so ``pruning: {churn: 0.05}``
and a top-level ``churn: 0.05`` mean the same thing. Every key is also a CLI
flag (``churn`` -> ``--churn``); flags override the file.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, fields
from pathlib import Path

import yaml

from .data import SCENARIOS, ScenarioSpec
from .errors import ConfigError
from .nn import ArchitectureSpec
from .pruning import PruneSchedule, ScoreWeights

METHODS = ("caafp", "dense-clustered", "oneshot-prune", "global-ft", "fedavg")
DATASETS = ("synth", "wisdm", "ucihar")
PRUNING_METHODS = ("caafp", "global-ft", "oneshot-prune")


@dataclass(frozen=True)
class ExperimentConfig:
    method: str = "caafp"
    dataset: str = "synth"
    data_path: str = ""
    scenario: str = "standard"
    scenario_k: int = 1
    noisy_fraction: float = 0.4
    corruption_rate: float = -1.0  # negative: scenario default (0.3 noisy, 1.0 drift)

    p1: int = 0
    p2: int = 0
    p3: int = 50
    p4: int = 3
    local_epochs: int = 3
    batch_size: int = 32
    lr: float = 1e-3
    lam: float = 0.1
    clusters: int = 3

    alpha: float = 0.25
    beta: float = 0.25
    gamma: float = 0.5
    s_start: float = 0.7
    s_target: float = 0.7
    prune_freq: int = 5
    churn: float = 0.05

    clients_per_round: int = 10
    cluster_clients_per_round: int = 0  # 0: every cluster member trains each round
    seed: int = 0
    test_fraction: float = 0.2
    eval_every: int = 1
    include_probe_traffic: bool = False
    include_mask_bits: bool = False

    synth_clusters: int = 3
    synth_clients: int = 4
    synth_samples: int = 150
    synth_window: int = 32
    synth_channels: int = 3
    synth_classes: int = 6
    synth_noise: float = 0.1

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.dataset not in DATASETS:
            raise ConfigError(f"unknown dataset {self.dataset!r}; expected one of {DATASETS}")
        if self.scenario not in SCENARIOS:
            raise ConfigError(f"unknown scenario {self.scenario!r}")
        if min(self.p1, self.p2, self.p3, self.p4) < 0:
            raise ConfigError("phase lengths must be non-negative")
        if self.local_epochs < 0 or self.batch_size < 1 or self.clusters < 1:
            raise ConfigError("local_epochs >= 0, batch_size >= 1 and clusters >= 1 required")
        if self.lam < 0:
            raise ConfigError("lam must be non-negative")
        if self.clients_per_round < 1 or self.cluster_clients_per_round < 0 or self.eval_every < 1:
            raise ConfigError("clients_per_round >= 1, cluster_clients_per_round >= 0, eval_every >= 1 required")
        if self.method in ("caafp", "global-ft"):
            if self.p3 < 1:
                raise ConfigError("pruning methods need p3 >= 1")
            self.schedule  # validates
        if self.method == "oneshot-prune" and not 0.0 <= self.s_target < 1.0:
            raise ConfigError("s_target must lie in [0, 1)")
        self.weights  # validates

    @property
    def weights(self) -> ScoreWeights:
        return ScoreWeights(self.alpha, self.beta, self.gamma)

    @property
    def schedule(self) -> PruneSchedule:
        return PruneSchedule(self.s_start, self.s_target, self.prune_freq, self.churn, self.p3)

    @property
    def num_clusters(self) -> int:
        return 1 if self.method == "global-ft" else self.clusters

    @property
    def num_classes(self) -> int:
        return self.synth_classes if self.dataset == "synth" else 6

    def architecture(self) -> ArchitectureSpec:
        if self.dataset == "wisdm":
            return ArchitectureSpec.wisdm()
        if self.dataset == "ucihar":
            return ArchitectureSpec.ucihar()
        return ArchitectureSpec(input_len=self.synth_window, channels=self.synth_channels,
                                num_classes=self.synth_classes)

    def scenario_spec(self) -> ScenarioSpec:
        return ScenarioSpec(kind=self.scenario, noisy_fraction=self.noisy_fraction,
                            corruption_rate=None if self.corruption_rate < 0 else self.corruption_rate,
                            k=self.scenario_k, seed=self.seed, num_classes=self.num_classes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    def config_hash(self) -> str:
        """Digest of everything except the seed; rows of one setting share it."""
        d = self.to_dict()
        d.pop("seed")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:12]

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        flat = _flatten(d)
        known = {f.name: f for f in fields(cls)}
        unknown = sorted(set(flat) - set(known))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**{k: coerce(known[k], v) for k, v in flat.items()})


def _flatten(d: dict) -> dict:
    out = {}
    for key, value in (d or {}).items():
        key = str(key).replace("-", "_")
        if isinstance(value, dict):
            for k, v in _flatten(value).items():
                if k in out:
                    raise ConfigError(f"config key {k!r} given twice")
                out[k] = v
        else:
            if key in out:
                raise ConfigError(f"config key {key!r} given twice")
            out[key] = value
    return out


def field_kind(f: dataclasses.Field) -> type:
    t = f.type if isinstance(f.type, str) else f.type.__name__
    return {"int": int, "float": float, "bool": bool, "str": str}[t]


def coerce(f: dataclasses.Field, value):
    kind = field_kind(f)
    if value is None:
        return "" if kind is str else f.default
    try:
        if kind is bool:
            if isinstance(value, str):
                low = value.strip().lower()
                if low not in ("true", "false", "1", "0", "yes", "no"):
                    raise ValueError(value)
                return low in ("true", "1", "yes")
            return bool(value)
        if kind is int:
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(value)
            return int(value)
        return kind(value)
    except (TypeError, ValueError):
        raise ConfigError(f"config key {f.name!r} expects {kind.__name__}, got {value!r}") from None


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    if raw is not None and not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return ExperimentConfig.from_dict(raw or {})
