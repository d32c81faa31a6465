"""Run configuration: every hyperparameter in one validated JSON-mappable record."""

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional

from .errors import ConfigError

ORACLES = ("ground_truth", "noisy_web")
COUNT_RESETS = ("never", "epoch", "step")


@dataclass
class RunConfig:
    # objective and threshold
    lam: float = 1.0
    w_plus: float = 1.0
    w_minus: float = 3.0
    # memory and batches
    memory_capacity: int = 2000
    memory_ratio: float = 0.4
    batch_size: int = 64
    # schedule
    epochs_initial: int = 120
    epochs_incremental: int = 40
    learning_rate: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-5
    # network
    hidden_sizes: List[int] = field(default_factory=lambda: [64, 32])
    embedding_dim: int = 32
    # state-carrying policies
    count_reset: str = "never"
    reset_threshold_per_step: bool = False
    recompute_means_from_memory: bool = False
    # oracle
    oracle: str = "ground_truth"
    label_noise_rate: float = 0.0
    feature_shift: float = 0.0
    n_query: Optional[int] = None
    trigger_count: int = 1
    # data and split
    num_classes: int = 6
    samples_per_class: int = 200
    input_dim: int = 2
    cluster_sigma: float = 0.2
    min_center_separation: float = 0.8
    num_known_initial: int = 3
    num_known_total: int = 6
    test_fraction: float = 0.3
    # baselines
    nno_tau: Optional[float] = None
    nno_learn_metric: bool = False
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self):
        def need(cond, msg):
            if not cond:
                raise ConfigError(msg)

        need(self.lam >= 0, "lam must be non-negative")
        need(self.w_plus > 0 and self.w_minus > 0, "w_plus and w_minus must be positive")
        need(self.memory_capacity >= 1, "memory_capacity must be >= 1")
        need(0 <= self.memory_ratio <= 1, "memory_ratio must lie in [0, 1]")
        need(self.batch_size >= 1, "batch_size must be >= 1")
        need(self.epochs_initial >= 0 and self.epochs_incremental >= 0, "epochs must be >= 0")
        need(self.learning_rate > 0, "learning_rate must be positive")
        need(0 <= self.momentum < 1, "momentum must lie in [0, 1)")
        need(self.weight_decay >= 0, "weight_decay must be non-negative")
        need(all(int(h) >= 1 for h in self.hidden_sizes), "hidden sizes must be >= 1")
        need(self.embedding_dim >= 1, "embedding_dim must be >= 1")
        need(self.count_reset in COUNT_RESETS, f"count_reset must be one of {COUNT_RESETS}")
        need(self.oracle in ORACLES, f"oracle must be one of {ORACLES}")
        need(0 <= self.label_noise_rate <= 1, "label_noise_rate must lie in [0, 1]")
        need(self.feature_shift >= 0, "feature_shift must be non-negative")
        need(self.n_query is None or self.n_query >= 0, "n_query must be >= 0")
        need(self.trigger_count >= 1, "trigger_count must be >= 1")
        need(self.cluster_sigma > 0 and self.min_center_separation > 0,
             "cluster_sigma and min_center_separation must be positive")
        need(1 <= self.num_known_initial <= self.num_known_total,
             "need 1 <= num_known_initial <= num_known_total")
        need(0 < self.test_fraction < 1, "test_fraction must lie in (0, 1)")
        need(self.nno_tau is None or self.nno_tau > 0, "nno_tau must be positive")

    @classmethod
    def from_dict(cls, doc):
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(doc) - names)
        if unknown:
            raise ConfigError(f"unknown config fields: {', '.join(unknown)}")
        try:
            return cls(**doc)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def load(cls, path):
        try:
            doc = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
        return cls.from_dict(doc)

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def to_dict(self):
        return dataclasses.asdict(self)
