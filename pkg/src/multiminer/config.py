"""Schema-versioned run configuration.

A run is a deterministic function of one JSON document.  Unknown keys are
rejected at every level and the persisted copy carries every default, so a
run directory describes itself.
"""
from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .distmap import GanConfig
from .errors import ConfigError
from .mining import MiningConfig
from .nets import NetworkConfig, PretrainConfig
from .scenes import DatasetSpec

SCHEMA_VERSION = 1


@dataclass
class EvalConfig:
    theta_fg: float = 0.5
    # fixed-scale baselines run by the full pipeline; empty disables them
    ablation_scales: list = field(default_factory=lambda: [32, 48, 64])
    probe_images: int = 5
    render_images: int = 6

    def __post_init__(self):
        if not 0 < self.theta_fg < 1:
            raise ConfigError("theta_fg must lie in (0, 1)")
        if self.probe_images < 1 or self.render_images < 0:
            raise ConfigError("probe_images must be >= 1 and render_images >= 0")


@dataclass
class GanSection:
    p0: dict = field(default_factory=lambda: {"kind": "gaussian-mixture-1d",
                                              "params": {"means": [0.0], "stds": [1.0],
                                                         "weights": [1.0]}})
    p1: dict = field(default_factory=lambda: {"kind": "gaussian-mixture-1d",
                                              "params": {"means": [4.0], "stds": [1.0],
                                                         "weights": [1.0]}})
    train: GanConfig = field(default_factory=GanConfig)


@dataclass
class RunConfig:
    schema_version: int = SCHEMA_VERSION
    seed: int = 1234
    output_dir: str = "runs/default"
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    networks: NetworkConfig = field(default_factory=NetworkConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    mining: MiningConfig = field(default_factory=MiningConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    gan: GanSection = field(default_factory=GanSection)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["dataset"]["size_range"] = list(self.dataset.size_range)
        return d

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=1))
        return path


def _build(cls, data, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'} must be a JSON object")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where or 'config'}: {', '.join(unknown)}")
    kwargs = {}
    for name, value in data.items():
        sub = hints.get(name)
        if dataclasses.is_dataclass(sub):
            kwargs[name] = _build(sub, value, f"{where}.{name}" if where else name)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {where or 'config'}: {exc}") from exc


# (section path, seed key, offset from the global seed)
_SEED_SLOTS = ((("dataset",), "seed", 0), (("networks",), "init_seed", 1),
               (("pretrain",), "seed", 2), (("mining",), "seed", 3), (("gan", "train"), "seed", 4))


def config_from_dict(data: dict) -> RunConfig:
    """Validate a config document.

    When the document sets the global ``seed``, every component seed it leaves
    out is derived from it; otherwise component defaults apply.
    """
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    version = data.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ConfigError(f"config schema_version {version} is not supported "
                          f"(expected {SCHEMA_VERSION})")
    data = json.loads(json.dumps(data))
    if "seed" in data:
        if not isinstance(data["seed"], int):
            raise ConfigError("seed must be an integer")
        for path, key, offset in _SEED_SLOTS:
            node = data
            for part in path:
                node = node.setdefault(part, {})
                if not isinstance(node, dict):
                    raise ConfigError(f"{'.'.join(path)} must be a JSON object")
            node.setdefault(key, data["seed"] + offset)
    return _build(RunConfig, data, "")


def load_config(path=None) -> RunConfig:
    """Read a config file; ``None`` gives the shipped defaults."""
    if path is None:
        return RunConfig()
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    return config_from_dict(data)
