"""Experiment configuration and the report record."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from bpve.env.environment import EnvironmentSpec, load_config_tree
from bpve.errors import DomainError

EXPERIMENT_KINDS = ("survival", "yaglom", "reduced", "split_times", "cpp_moments",
                    "many_to_few_check", "validate_env", "multiple_mergers", "simulate", "cpp_sample")


@dataclass
class ExperimentConfig:
    """What to run, on which environment, with how many replicates.

    ``environment`` is an environment config mapping (see EnvironmentSpec) or a
    path to one; ``params`` carries kind-specific settings such as ``s``, ``k``
    or ``alpha_level``.
    """

    kind: str
    environment: Any = field(default_factory=dict)
    N: list = field(default_factory=lambda: [1000])
    t: float = 1.0
    kappa: Any = None
    reps: int = 1000
    conditioned: bool = True
    seed: int = 0
    parallelism: int = 1
    out_dir: str | None = None
    chunk_size: int = 2000
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in EXPERIMENT_KINDS:
            raise DomainError(f"unknown experiment kind {self.kind!r}; expected one of {EXPERIMENT_KINDS}")
        if int(self.reps) < 1:
            raise DomainError("replicate count must be >= 1")
        if not float(self.t) > 0:
            raise DomainError("t must be positive")
        if isinstance(self.N, (int, float)):
            self.N = [int(self.N)]
        self.N = [int(x) for x in self.N]
        self.reps = int(self.reps)
        self.seed = int(self.seed)
        self.parallelism = max(1, int(self.parallelism))

    @classmethod
    def from_dict(cls, cfg: Mapping) -> "ExperimentConfig":
        cfg = dict(cfg)
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(cfg) - known
        if unknown:
            raise DomainError(f"unknown experiment keys: {sorted(unknown)}")
        return cls(**cfg)

    @staticmethod
    def load_mapping(path: str | Path) -> dict:
        """Raw config mapping with a file-valued environment resolved relative to ``path``."""
        path = Path(path)
        cfg = load_config_tree(path)
        env = cfg.get("environment")
        if isinstance(env, str):
            env_path = Path(env)
            if not env_path.is_absolute():
                env_path = path.parent / env_path
            cfg["environment"] = load_config_tree(env_path)
        return cfg

    @classmethod
    def from_file(cls, path: str | Path) -> "ExperimentConfig":
        return cls.from_dict(cls.load_mapping(path))

    def environment_spec(self) -> EnvironmentSpec:
        env = self.environment
        if isinstance(env, EnvironmentSpec):
            spec = env
        elif isinstance(env, (str, Path)):
            spec = EnvironmentSpec.from_file(env)
        else:
            spec = EnvironmentSpec.from_config(env or {})
        if self.kappa is not None:
            cfg = spec.to_config()
            cfg["kappa_rule"] = self.kappa
            spec = EnvironmentSpec.from_config(cfg)
        return spec

    def to_dict(self) -> dict:
        d = asdict(self)
        if isinstance(self.environment, EnvironmentSpec):
            d["environment"] = self.environment.to_config()
        return d

    def config_hash(self) -> str:
        """Hash of everything that determines the output (parallelism and out_dir excluded)."""
        d = self.to_dict()
        d.pop("parallelism", None)
        d.pop("out_dir", None)
        text = json.dumps(d, sort_keys=True, default=str)
        return hashlib.sha256(text.encode()).hexdigest()[:16]


@dataclass
class Comparison:
    """An observed quantity checked against a theoretical target."""

    name: str
    source: str
    value: float | None = None
    target: float | None = None
    statistic: float | None = None
    p_value: float | None = None
    tolerance: float | None = None
    passed: bool | None = None
    details: dict = field(default_factory=dict)


@dataclass
class StatReport:
    """Estimates, comparisons against named theoretical targets, provenance and runtime."""

    kind: str
    seed: int
    config_hash: str
    config: dict
    estimates: list = field(default_factory=list)
    comparisons: list = field(default_factory=list)
    runtime: dict = field(default_factory=dict)
    notes: list = field(default_factory=list)
    files: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed is not False for c in self.comparisons)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["passed"] = self.passed
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True, default=_json_default)


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    return str(obj)
