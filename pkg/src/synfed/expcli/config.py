"""Experiment configuration: TOML sections mirroring the module configs.

Every field has a default, so an empty file is a valid config. Sections:

``[experiment]``  seeds, init_mode, checkpoint, n_clients, alpha, hidden_dim,
                  benchmark_seed, output_dir
``[benchmark]``   :class:`~synfed.datakit.BlobBenchmarkConfig` fields
``[oracle]``      domain_gap, variance_inflation, volume
``[pretrain]``    :class:`~synfed.trainer.TrainConfig` fields (``seed`` is derived per run)
``[fl]``          :class:`~synfed.fedengine.FLConfig` fields (``seed`` is derived per run)
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from ..datakit import BlobBenchmarkConfig
from ..errors import ConfigError, SynFedError
from ..fedengine import FLConfig
from ..trainer import TrainConfig

INIT_MODES = ("random", "gptfl_pretrain", "checkpoint")
OUTPUT_DIR_ENV = "SYNFED_OUTPUT_DIR"


@dataclass(frozen=True)
class OracleSettings:
    domain_gap: float = 0.0
    variance_inflation: float = 0.0
    volume: float = 3.0


@dataclass(frozen=True)
class ExperimentSettings:
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    init_mode: str = "gptfl_pretrain"
    checkpoint: str = ""
    n_clients: int = 50
    alpha: float = 0.1
    hidden_dim: int = 64
    benchmark_seed: int = 0
    output_dir: str = "runs/default"


@dataclass(frozen=True)
class ExperimentConfig:
    experiment: ExperimentSettings = field(default_factory=ExperimentSettings)
    benchmark: BlobBenchmarkConfig = field(default_factory=BlobBenchmarkConfig)
    oracle: OracleSettings = field(default_factory=OracleSettings)
    pretrain: TrainConfig = field(default_factory=TrainConfig)
    fl: FLConfig = field(default_factory=FLConfig)

    def validate(self) -> None:
        """Checks that can fail before any compute happens."""
        exp = self.experiment
        if not exp.seeds:
            raise ConfigError("experiment.seeds must be non-empty")
        if exp.init_mode not in INIT_MODES:
            raise ConfigError(f"experiment.init_mode must be one of {INIT_MODES}, got {exp.init_mode!r}")
        if exp.init_mode == "checkpoint" and not Path(exp.checkpoint).is_file():
            raise ConfigError(f"experiment.checkpoint: file not found: {exp.checkpoint!r}")
        if exp.n_clients < 1:
            raise ConfigError("experiment.n_clients must be >= 1")
        if not exp.alpha > 0:
            raise ConfigError("experiment.alpha must be positive")
        if self.fl.cohort_size > exp.n_clients:
            raise ConfigError(f"fl.cohort_size={self.fl.cohort_size} exceeds experiment.n_clients={exp.n_clients}")
        n_train = self.benchmark.n_classes * (self.benchmark.samples_per_class - _n_test(self.benchmark))
        if exp.n_clients > n_train:
            raise ConfigError(f"experiment.n_clients={exp.n_clients} exceeds {n_train} training samples")
        if not self.oracle.volume > 0:
            raise ConfigError("oracle.volume must be positive")
        if self.oracle.domain_gap < 0 or self.oracle.variance_inflation < 0:
            raise ConfigError("oracle.domain_gap and oracle.variance_inflation must be >= 0")

    def to_dict(self) -> dict:
        return {name: _section_dict(getattr(self, name)) for name in SECTIONS}

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


SECTIONS = {
    "experiment": ExperimentSettings,
    "benchmark": BlobBenchmarkConfig,
    "oracle": OracleSettings,
    "pretrain": TrainConfig,
    "fl": FLConfig,
}


def _n_test(cfg: BlobBenchmarkConfig) -> int:
    n = cfg.samples_per_class
    return min(max(int(round(n * cfg.test_fraction)), 1), n - 1) if n > 1 else 0


def _section_dict(obj) -> dict:
    out = {}
    for f in fields(obj):
        v = getattr(obj, f.name)
        if isinstance(v, tuple):
            v = [list(x) if isinstance(x, tuple) else x for x in v]
        out[f.name] = v
    return out


def _coerce(section: str, f: dataclasses.Field, value: Any):
    key = f"{section}.{f.name}"
    default = f.default if f.default is not dataclasses.MISSING else f.default_factory()
    if f.name == "class_means":
        if value is None or value == []:
            return None
        if not isinstance(value, list) or not all(isinstance(r, list) for r in value):
            raise ConfigError(f"{key}: expected a list of lists of numbers")
        return tuple(tuple(float(x) for x in r) for r in value)
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected bool, got {type(value).__name__} {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected int, got {type(value).__name__} {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected float, got {type(value).__name__} {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{key}: expected string, got {type(value).__name__} {value!r}")
        return value
    if isinstance(default, tuple):
        if not isinstance(value, list) or not all(isinstance(x, int) and not isinstance(x, bool) for x in value):
            raise ConfigError(f"{key}: expected a list of integers")
        return tuple(value)
    return value


def from_dict(data: dict, source: str = "<config>") -> ExperimentConfig:
    unknown = sorted(set(data) - set(SECTIONS))
    if unknown:
        raise ConfigError(f"{source}: unknown section(s) {unknown}")
    parts = {}
    for name, cls in SECTIONS.items():
        raw = data.get(name, {})
        if not isinstance(raw, dict):
            raise ConfigError(f"{source}: [{name}] must be a table")
        known = {f.name: f for f in fields(cls)}
        bad = sorted(set(raw) - set(known))
        if bad:
            raise ConfigError(f"{source}: unknown key(s) in [{name}]: {bad}")
        kwargs = {k: _coerce(name, known[k], v) for k, v in raw.items()}
        try:
            parts[name] = cls(**kwargs)
        except SynFedError as exc:
            raise ConfigError(f"{source}: [{name}] {exc}") from exc
    return ExperimentConfig(**parts)


def parse_override(text: str) -> tuple[str, str, Any]:
    """``section.key=value`` with the value read as a TOML literal (bare words become strings)."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form section.key=value")
    path, raw = text.split("=", 1)
    if path.count(".") != 1:
        raise ConfigError(f"override key {path!r} must be section.key")
    section, key = path.strip().split(".")
    try:
        value = tomllib.loads(f"v = {raw.strip()}")["v"]
    except tomllib.TOMLDecodeError:
        value = raw.strip()
    return section, key, value


def apply_overrides(data: dict, overrides: list[str]) -> dict:
    data = {k: dict(v) if isinstance(v, dict) else v for k, v in data.items()}
    for text in overrides:
        section, key, value = parse_override(text)
        data.setdefault(section, {})[key] = value
    return data


def load_config(path, overrides: list[str] | None = None) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = tomllib.loads(path.read_text())
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    data = apply_overrides(data, overrides or [])
    cfg = from_dict(data, str(path))
    env_out = os.environ.get(OUTPUT_DIR_ENV)
    if env_out:
        cfg = replace(cfg, experiment=replace(cfg.experiment, output_dir=env_out))
    return cfg


def dump_toml(cfg: ExperimentConfig) -> str:
    """Serialize back to TOML (flat scalar/array values only)."""
    lines = []
    for name, section in cfg.to_dict().items():
        lines.append(f"[{name}]")
        for k, v in section.items():
            if v is None:
                continue
            lines.append(f"{k} = {_toml_value(v)}")
        lines.append("")
    return "\n".join(lines)


def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, float)):
        return repr(v)
    if isinstance(v, str):
        return json.dumps(v)
    if isinstance(v, list):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    raise TypeError(v)
