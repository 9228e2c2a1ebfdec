"""Run configuration: one versioned YAML document; unknown keys are errors."""
from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path

import yaml

from dinspoof.errors import ConfigError
from dinspoof.frontend import FrontendConfig, SpecAugParams
from dinspoof.io import DEFAULT_GROUP_MAP
from dinspoof.network import DinConfig
from dinspoof.training import TrainConfig

CONFIG_VERSION = 1
PATH_KEYS = ("train_manifest", "dev_manifest", "eval_manifest", "feature_dir", "checkpoint_dir",
             "log_file", "stats", "scores")


@dataclass
class RunConfig:
    frontend: FrontendConfig = field(default_factory=FrontendConfig)
    model: DinConfig = field(default_factory=DinConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    generator_group_map: dict[str, str] = field(default_factory=lambda: dict(DEFAULT_GROUP_MAP))
    paths: dict[str, str] = field(default_factory=dict)

    def path(self, key: str) -> Path | None:
        value = self.paths.get(key)
        return Path(value) if value else None


def _frontend_from_dict(d: dict) -> FrontendConfig:
    d = dict(d)
    _reject_unknown(d, {f.name for f in fields(FrontendConfig)}, "frontend")
    if "specaug" in d:
        _reject_unknown(d["specaug"], {f.name for f in fields(SpecAugParams)}, "frontend.specaug")
        d["specaug"] = SpecAugParams(**d["specaug"])
    return FrontendConfig(**d)


def _reject_unknown(d: dict, known: set, where: str):
    if not isinstance(d, dict):
        raise ConfigError(f"{where} must be a mapping")
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")


def config_from_dict(d: dict, base_dir: Path | None = None) -> RunConfig:
    d = dict(d or {})
    version = d.pop("version", None)
    if version != CONFIG_VERSION:
        raise ConfigError(f"config version must be {CONFIG_VERSION}, got {version!r}")
    _reject_unknown(d, {"frontend", "model", "train", "generator_group_map", "paths"}, "config")
    try:
        cfg = RunConfig(
            frontend=_frontend_from_dict(d.get("frontend", {})),
            model=DinConfig.from_dict(d.get("model", {})),
            train=TrainConfig.from_dict(d.get("train", {})),
            generator_group_map=dict(d.get("generator_group_map", DEFAULT_GROUP_MAP)),
            paths=dict(d.get("paths", {})),
        )
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    bad_groups = {k: v for k, v in cfg.generator_group_map.items() if v not in ("TTS", "VC")}
    if bad_groups:
        raise ConfigError(f"generator groups must be TTS or VC: {bad_groups}")
    _reject_unknown(cfg.paths, set(PATH_KEYS), "paths")
    if base_dir is not None:
        cfg.paths = {k: str(Path(base_dir, v)) if v and not Path(v).is_absolute() else v
                     for k, v in cfg.paths.items()}
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config not found: {path}")
    try:
        data = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML ({exc})") from exc
    return config_from_dict(data, base_dir=path.parent)


def config_to_dict(cfg: RunConfig) -> dict:
    from dataclasses import asdict

    train = asdict(cfg.train)
    return {
        "version": CONFIG_VERSION,
        "frontend": asdict(cfg.frontend),
        "model": cfg.model.to_dict(),
        "train": train,
        "generator_group_map": dict(cfg.generator_group_map),
        "paths": dict(cfg.paths),
    }


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(config_to_dict(cfg), sort_keys=False)
