"""Experiment configuration schema and run manifests.

A config file is YAML (JSON is accepted too)::

    task: recon            # required: recon | compose
    seed: 0                # root seed, fanned out per stage
    model: {...}           # ModelConfig fields
    train: {...}           # TrainConfig fields
    synthesis: {...}       # SynthesisConfig fields
    sampler: {...}         # SamplerConfig fields

Unknown keys are rejected; omitted keys take their defaults.
"""

from __future__ import annotations

import datetime as _dt
import hashlib
import json
import os
import subprocess
import typing
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path

import yaml

from . import __version__
from .model import ModelConfig
from .sampling import SamplerConfig
from .synthesis import TASKS, SynthesisConfig
from .training import TrainConfig

OUT_ROOT_ENV = "REFGEN_OUT_ROOT"
RUN_MANIFEST = "run_manifest.json"


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    task: str
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    synthesis: SynthesisConfig = field(default_factory=SynthesisConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)

    def to_dict(self) -> dict:
        return asdict(self)

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


def _type_name(tp) -> str:
    return getattr(tp, "__name__", None) or str(tp).replace("typing.", "")


def _coerce(key: str, value, tp):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin in (typing.Union, getattr(__import__("types"), "UnionType", None)):
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(key, value, inner[0])
    if origin is list:
        if not isinstance(value, list):
            raise ConfigError(f"{key}: expected list, got {type(value).__name__} {value!r}")
        return [_coerce(f"{key}[{i}]", v, args[0]) for i, v in enumerate(value)]
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected bool, got {type(value).__name__} {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected int, got {type(value).__name__} {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected float, got {type(value).__name__} {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{key}: expected str, got {type(value).__name__} {value!r}")
        return value
    if is_dataclass(tp):
        return _build(tp, value, key)
    raise ConfigError(f"{key}: unsupported type {_type_name(tp)}")


def _build(cls, data, prefix: str = ""):
    if not isinstance(data, dict):
        raise ConfigError(f"{prefix or 'config'}: expected mapping, got {type(data).__name__} {data!r}")
    hints = typing.get_type_hints(cls)
    names = [f.name for f in fields(cls)]
    for k in data:
        if k not in names:
            raise ConfigError(f"unknown config key {(prefix + '.' if prefix else '') + k!r}")
    kwargs = {k: _coerce(f"{prefix + '.' if prefix else ''}{k}", v, hints[k]) for k, v in data.items()}
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{prefix or 'config'}: {exc}") from None
    except ValueError as exc:
        raise ConfigError(f"{prefix or 'config'}: {exc}") from None


def config_from_dict(data: dict) -> ExperimentConfig:
    if not isinstance(data, dict) or "task" not in data:
        raise ConfigError("config key 'task' is required")
    cfg = _build(ExperimentConfig, data)
    if cfg.task not in TASKS:
        raise ConfigError(f"task: expected one of {TASKS}, got {cfg.task!r}")
    return cfg


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    return config_from_dict(yaml.safe_load(path.read_text()) or {})


def save_config(cfg: ExperimentConfig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=True))
    return path


def resolve_out(path) -> Path:
    """Relative output paths are placed under $REFGEN_OUT_ROOT when it is set."""
    p = Path(path)
    root = os.environ.get(OUT_ROOT_ENV)
    if root and not p.is_absolute():
        p = Path(root) / p
    return p


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def revision() -> str:
    try:
        out = subprocess.run(["git", "rev-parse", "--short", "HEAD"], capture_output=True, text=True,
                             cwd=Path(__file__).parent, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+g{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


@dataclass
class RunManifest:
    stage: str
    command: list[str]
    root_seed: int | None
    config_hash: str | None
    inputs: dict[str, str]
    artifacts: dict[str, str] = field(default_factory=dict)
    revision: str = field(default_factory=revision)
    started_at: str = ""
    finished_at: str = ""

    TIME_FIELDS = ("started_at", "finished_at")

    @classmethod
    def start(cls, stage, command, root_seed=None, config_hash=None, inputs=()):
        hashes = {}
        for p in inputs:
            p = Path(p)
            if p.is_file():
                hashes[str(p)] = file_sha256(p)
            elif p.is_dir() and (p / RUN_MANIFEST).exists():
                hashes[str(p)] = file_sha256(p / RUN_MANIFEST)
        return cls(stage, list(command), root_seed, config_hash, hashes,
                   started_at=_dt.datetime.now(_dt.timezone.utc).isoformat())

    def finish(self, out_dir, files=None) -> Path:
        """Hash artifacts (all files under ``out_dir`` by default) and write the manifest."""
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        if files is None:
            files = [p for p in sorted(out_dir.rglob("*")) if p.is_file() and p.name != RUN_MANIFEST]
        self.artifacts = {str(Path(p).relative_to(out_dir)): file_sha256(p) for p in files}
        self.finished_at = _dt.datetime.now(_dt.timezone.utc).isoformat()
        path = out_dir / RUN_MANIFEST
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")
        return path
