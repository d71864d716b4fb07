"""Run configuration: one YAML document covering paths, model, diffusion, stages, data and evaluation."""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import yaml

from .datapipe.corpus import DEFAULT_MIX
from .datapipe.filtering import FilterThresholds
from .diffusion import DiffusionConfig
from .errors import ConfigError
from .model.config import ModelConfig
from .training.stages import StageConfig, default_stages

HOME_ENV = "SKA1_HOME"
DEFAULT_HOME = "~/.ska1"


def default_home() -> Path:
    return Path(os.environ.get(HOME_ENV, DEFAULT_HOME)).expanduser()


def _from_dict(cls, d: dict | None, section: str):
    d = dict(d or {})
    unknown = set(d) - {f.name for f in fields(cls)}
    if unknown:
        raise ConfigError(f"unknown keys in [{section}]: {sorted(unknown)}")
    return cls(**d)


@dataclass
class PathsConfig:
    """Relative paths resolve against ``home`` (or $SKA1_HOME, else ~/.ska1)."""

    home: str | None = None
    data_root: str = "data"
    checkpoint_dir: str = "checkpoints"
    report_dir: str = "reports"

    def resolve(self, name: str) -> Path:
        base = Path(self.home).expanduser() if self.home else default_home()
        p = Path(getattr(self, name)).expanduser()
        return p if p.is_absolute() else base / p


@dataclass
class DataConfig:
    count: int = 8
    n_frames: int = 16
    width: int = 40
    height: int = 40
    profiles: tuple[str, ...] = DEFAULT_MIX
    flow_to_intensity: float = 25.5
    prompt: str = "a person is talking"


@dataclass
class PretrainConfig:
    vae_steps: int = 200
    vae_lr: float = 2e-3
    backbone_steps: int = 1000
    backbone_lr: float = 1e-3
    batch_size: int = 4


@dataclass
class EvalConfig:
    pairs: int = 4
    seeds: tuple[int, ...] = (0,)
    generator: str = "model"


@dataclass
class RunConfig:
    paths: PathsConfig = field(default_factory=PathsConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    stages: list[StageConfig] = field(default_factory=default_stages)
    filter: FilterThresholds = field(default_factory=FilterThresholds)
    data: DataConfig = field(default_factory=DataConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    seed: int = 0

    @classmethod
    def tiny(cls, **overrides) -> "RunConfig":
        """Laptop preset: tiny model, 32x32 crops of 40x40 clips, learning rates scaled up 100x."""
        model = ModelConfig.tiny()
        stages = [StageConfig.default(1, learning_rate=1e-3), StageConfig.default(2, learning_rate=1e-3),
                  StageConfig.default(3, learning_rate=1e-4)]
        return replace(cls(model=model, stages=stages), **overrides).validate()

    def validate(self) -> "RunConfig":
        self.model.validate()
        self.diffusion.validate()
        self.filter.validate()
        for s in self.stages:
            s.validate()
        ids = [s.stage_id for s in self.stages]
        if ids != sorted(set(ids)):
            raise ConfigError(f"stages must be listed once each in order, got {ids}")
        if self.data.n_frames % self.model.pixel_frames:
            raise ConfigError(f"data.n_frames {self.data.n_frames} must be a multiple of the model window "
                              f"{self.model.pixel_frames}")
        return self

    def to_dict(self) -> dict:
        d = {
            "seed": self.seed,
            "paths": asdict(self.paths),
            "model": self.model.to_dict(),
            "diffusion": self.diffusion.to_dict(),
            "stages": [s.to_dict() for s in self.stages],
            "filter": self.filter.to_dict(),
            "data": asdict(self.data),
            "pretrain": asdict(self.pretrain),
            "eval": asdict(self.eval),
        }
        d["data"]["profiles"] = list(self.data.profiles)
        d["eval"]["seeds"] = list(self.eval.seeds)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d or {})
        known = {"seed", "paths", "model", "diffusion", "stages", "filter", "data", "pretrain", "eval"}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown top-level config keys {sorted(unknown)}")
        data = _from_dict(DataConfig, d.get("data"), "data")
        data = replace(data, profiles=tuple(data.profiles))
        ev = _from_dict(EvalConfig, d.get("eval"), "eval")
        ev = replace(ev, seeds=tuple(int(s) for s in ev.seeds))
        stages = [StageConfig.from_dict(s) for s in d["stages"]] if "stages" in d else default_stages()
        return cls(
            paths=_from_dict(PathsConfig, d.get("paths"), "paths"),
            model=ModelConfig.from_dict(d.get("model") or {}),
            diffusion=DiffusionConfig.from_dict(d.get("diffusion") or {}),
            stages=stages,
            filter=FilterThresholds.from_dict(d.get("filter") or {}),
            data=data,
            pretrain=_from_dict(PretrainConfig, d.get("pretrain"), "pretrain"),
            eval=ev,
            seed=int(d.get("seed", 0)),
        ).validate()

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    @classmethod
    def from_yaml(cls, text: str) -> "RunConfig":
        try:
            d = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            raise ConfigError(f"config is not valid YAML: {exc}") from exc
        if d is not None and not isinstance(d, dict):
            raise ConfigError("config must be a mapping")
        return cls.from_dict(d or {})

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_yaml())
        return path

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_yaml(text)

    def fingerprint(self, *sections: str) -> str:
        """Hash of the named sections (all when none given) for phase-completion markers."""
        d = self.to_dict()
        d.pop("paths")
        if sections:
            d = {k: d[k] for k in sections}
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]
