"""Run configuration documents (JSON) shared by the CLI and experiment runners."""

import json
from dataclasses import asdict, dataclass, field, fields

from .dataset import GeneratorConfig
from .losses import CrfConfig, LossWeights, PseudoLabelConfig
from .model import ModelConfig
from .train import TrainConfig


class ConfigError(ValueError):
    pass


# Long-schedule defaults assume far more optimizer steps than a 64x64 CPU run
# can afford. The desk preset raises the learning rate so 200 epochs on a
# handful of samples converge.
DESK_TRAIN = {"lr": 1e-3, "epochs": 200, "batch_size": 4}


def desk_train_config(**overrides):
    return TrainConfig(**{**DESK_TRAIN, **overrides})


@dataclass
class DataSection:
    height: int = 64
    width: int = 64
    num_classes: int = 3
    noise: float = 0.05
    budget: float = 0.05
    n_train: int = 8
    n_val: int = 8
    seed: int = 0

    def generator(self):
        return GeneratorConfig(height=self.height, width=self.width,
                               num_classes=self.num_classes, noise=self.noise)


@dataclass
class ExperimentSection:
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    sizes: list = field(default_factory=lambda: [4, 8, 16, 32])
    variants: list = field(default_factory=lambda: ["cnn", "trans", "dual", "full"])
    policy: str = "mean"


@dataclass
class RunConfig:
    data: DataSection = field(default_factory=DataSection)
    model: ModelConfig = None
    train: TrainConfig = None
    experiment: ExperimentSection = field(default_factory=ExperimentSection)
    train_manifest: str = None
    val_manifest: str = None

    def __post_init__(self):
        if self.model is None:
            self.model = ModelConfig(num_classes=self.data.num_classes,
                                     image_size=self.data.height)
        if self.train is None:
            self.train = desk_train_config()

    def to_dict(self):
        return {
            "data": asdict(self.data),
            "model": self.model.to_dict(),
            "train": self.train.to_dict(),
            "experiment": asdict(self.experiment),
            "train_manifest": self.train_manifest,
            "val_manifest": self.val_manifest,
        }


def _build(cls, raw, section):
    if raw is None:
        return None
    if not isinstance(raw, dict):
        raise ConfigError(f"section {section!r} must be an object")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"unknown keys in {section!r}: {unknown}")
    try:
        return cls(**raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {section!r} section: {exc}") from None


def parse_config(doc):
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    allowed = {"data", "model", "train", "experiment", "train_manifest", "val_manifest"}
    unknown = sorted(set(doc) - allowed)
    if unknown:
        raise ConfigError(f"unknown top-level keys: {unknown}")
    data = _build(DataSection, doc.get("data", {}), "data")
    model_raw = doc.get("model")
    if model_raw is not None:
        model_raw = {"num_classes": data.num_classes, "image_size": data.height, **model_raw}
    model = _build(ModelConfig, model_raw, "model")
    train_raw = doc.get("train")
    if train_raw is not None:
        train_raw = {**DESK_TRAIN, **train_raw}
    train = _build(TrainConfig, train_raw, "train")
    experiment = _build(ExperimentSection, doc.get("experiment", {}), "experiment")
    cfg = RunConfig(data=data, model=model, train=train, experiment=experiment,
                    train_manifest=doc.get("train_manifest"),
                    val_manifest=doc.get("val_manifest"))
    if cfg.model.num_classes != cfg.data.num_classes:
        raise ConfigError(f"model.num_classes={cfg.model.num_classes} disagrees with "
                          f"data.num_classes={cfg.data.num_classes}")
    return cfg


def load_config(path):
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
    return parse_config(doc)


def save_config(cfg, path):
    with open(path, "w") as fh:
        json.dump(cfg.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")


__all__ = ["ConfigError", "RunConfig", "DataSection", "ExperimentSection", "load_config",
           "parse_config", "save_config", "desk_train_config", "LossWeights", "CrfConfig",
           "PseudoLabelConfig"]
