"""Run configuration: nested dataclasses, YAML in and out, two profiles.

Unknown keys are rejected. Every field has a default, and the effective
configuration of a run is written next to its outputs so the run can be
repeated from that file alone.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .autoencoder import Stage1Config
from .cst import CSTConfig, SamplingConfig
from .envlab import TrajectoryDatasetSpec


class ConfigError(ValueError):
    pass


@dataclass
class DemoConfig:
    episodes_per_task: int = 50
    seed: int = 0


@dataclass
class EvalConfig:
    episodes: int = 50
    seeds: tuple[int, ...] = (0, 1, 2)
    replan_every: int = 4  # T_a: actions executed from each planned chunk


@dataclass
class RunConfig:
    profile: str = "desk"
    seed: int = 0
    output_dir: str = "runs/default"
    data: str = "demos"  # stage-1 training chunks: "demos" or "synthetic"
    synthetic: TrajectoryDatasetSpec = field(default_factory=TrajectoryDatasetSpec)
    demos: DemoConfig = field(default_factory=DemoConfig)
    stage1: Stage1Config = field(default_factory=Stage1Config)
    cst: CSTConfig = field(default_factory=CSTConfig)
    sampling: SamplingConfig = field(default_factory=SamplingConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def __post_init__(self):
        if self.data not in ("demos", "synthetic"):
            raise ValueError(f"data must be 'demos' or 'synthetic', got {self.data!r}")


PROFILES: dict[str, dict] = {
    "desk": {},
    # training scale reported for the original benchmarks
    "paper": {
        "stage1": {"batch_size": 1024, "lr": 5.5e-5, "epochs": 100, "warmup_epochs": 10,
                   "codebook_size": 16, "depth": 2, "horizon": 8, "decoder": "attention"},
        "cst": {"width": 384, "layers": 6, "heads": 6, "batch_size": 512, "lr": 8e-4, "epochs": 500,
                "warmup_epochs": 10},
        "sampling": {"temperature": 1.0},
    },
}


def _build(cls, data: dict, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'} must be a mapping")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(fields)
    if unknown:
        raise ConfigError(f"unknown key(s) in {path or 'config'}: {', '.join(sorted(unknown))}")
    kwargs = {}
    for name, value in data.items():
        f = fields[name]
        default = f.default_factory() if f.default_factory is not dataclasses.MISSING else f.default
        if dataclasses.is_dataclass(default):
            kwargs[name] = _build(type(default), value, f"{path}.{name}".lstrip("."))
        elif isinstance(default, tuple):
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path or 'config'}: {exc}") from exc


def _merge(base: dict, override: dict) -> dict:
    out = dict(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def to_dict(cfg: RunConfig) -> dict:
    def convert(obj):
        if isinstance(obj, dict):
            return {k: convert(v) for k, v in obj.items()}
        if isinstance(obj, (list, tuple)):
            return [convert(v) for v in obj]
        return obj

    return convert(dataclasses.asdict(cfg))


def from_dict(data: dict) -> RunConfig:
    data = dict(data or {})
    profile = data.get("profile", "desk")
    if profile not in PROFILES:
        raise ConfigError(f"unknown profile {profile!r}; choose from {sorted(PROFILES)}")
    return _build(RunConfig, _merge(PROFILES[profile], data), "")


def load_config(path: str | Path | None = None, overrides: dict | None = None) -> RunConfig:
    data = {}
    if path is not None:
        data = yaml.safe_load(Path(path).read_text()) or {}
    if overrides:
        data = _merge(data, overrides)
    return from_dict(data)


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(to_dict(cfg), sort_keys=False)


def echo_config(cfg: RunConfig, out_dir: str | Path) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "effective_config.yaml"
    path.write_text(dump_config(cfg))
    return path
