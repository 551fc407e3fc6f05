"""Experiment configuration: strict YAML schema over nested dataclasses.

Every config key must correspond to a dataclass field; unknown keys are a
hard error that lists the offending dotted paths, so a typo can never fall
back to a silent default. Grid axes and command-line overrides address keys
by the same dotted paths.
"""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import typing
from pathlib import Path

import yaml

from minitad.backbone import BackboneConfig
from minitad.data.mapping import TemporalMappingConfig
from minitad.data.synthetic import SyntheticSpec
from minitad.evaluation import EvalConfig
from minitad.heads import HeadConfig
from minitad.losses import CLS_LOSSES, REG_LOSSES
from minitad.neck import NeckConfig
from minitad.postproc import PostprocessConfig
from minitad.stage2 import RoIConfig, Stage2Config


class ConfigError(ValueError):
    pass


@dataclasses.dataclass(slots=True)
class DatasetConfig:
    """Either a synthetic spec (generated in memory at run start) or a pair
    of annotation-file and feature-store paths."""

    annotations: str | None = None
    features: str | None = None
    synthetic: SyntheticSpec | None = None
    mapping: TemporalMappingConfig = dataclasses.field(
        default_factory=TemporalMappingConfig)
    train_subset: str = "training"
    val_subset: str = "validation"
    binary_labels: bool = False

    def __post_init__(self) -> None:
        if self.synthetic is None and (self.annotations is None
                                       or self.features is None):
            raise ConfigError("dataset needs either a synthetic spec or both "
                              "an annotations path and a features path")
        if self.synthetic is not None and self.annotations is not None:
            raise ConfigError("dataset cannot be both synthetic and "
                              "annotation-backed")


@dataclasses.dataclass(slots=True)
class LossConfig:
    cls_loss: str = "focal"
    reg_loss: str = "diou"
    cls_weight: float = 1.0
    reg_weight: float = 1.0
    aux_weight: float = 0.5
    focal_gamma: float = 2.0
    focal_alpha: float = 0.25

    def __post_init__(self) -> None:
        if self.cls_loss not in CLS_LOSSES:
            raise ConfigError(f"cls_loss must be one of "
                              f"{sorted(CLS_LOSSES)}, got {self.cls_loss!r}")
        if self.reg_loss not in REG_LOSSES:
            raise ConfigError(f"reg_loss must be one of "
                              f"{sorted(REG_LOSSES)}, got {self.reg_loss!r}")
        if min(self.cls_weight, self.reg_weight, self.aux_weight) < 0:
            raise ConfigError("loss weights must be non-negative")


@dataclasses.dataclass(slots=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 16
    learning_rate: float = 1e-3
    warmup_epochs: int = 5
    weight_decay: float = 1e-4
    gradient_clip: float = 1.0
    channel_dropout: float = 0.0
    double_epochs: bool = False
    seeds: tuple[int, ...] = (0,)
    eval_interval: int = 1
    score_threshold: float = 0.01
    pre_nms_topk: int = 2000

    def __post_init__(self) -> None:
        if isinstance(self.seeds, (list, int)):
            self.seeds = (tuple(self.seeds) if isinstance(self.seeds, list)
                          else (self.seeds,))
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be positive")
        if self.warmup_epochs < 0 or self.warmup_epochs >= self.epochs:
            raise ConfigError("warmup_epochs must be in [0, epochs)")
        if not 0.0 <= self.channel_dropout <= 1.0:
            raise ConfigError("channel_dropout must lie in [0, 1]")
        if self.eval_interval < 1:
            raise ConfigError("eval_interval must be positive")
        if not self.seeds:
            raise ConfigError("need at least one seed")

    @property
    def effective_epochs(self) -> int:
        return self.epochs * 2 if self.double_epochs else self.epochs

    @property
    def effective_warmup(self) -> int:
        return self.warmup_epochs * 2 if self.double_epochs \
            else self.warmup_epochs


@dataclasses.dataclass(slots=True)
class ExperimentConfig:
    dataset: DatasetConfig
    backbone: BackboneConfig = dataclasses.field(
        default_factory=BackboneConfig)
    neck: NeckConfig = dataclasses.field(default_factory=NeckConfig)
    heads: HeadConfig = dataclasses.field(default_factory=HeadConfig)
    losses: LossConfig = dataclasses.field(default_factory=LossConfig)
    stage2: Stage2Config | None = None
    postprocess: PostprocessConfig = dataclasses.field(
        default_factory=PostprocessConfig)
    eval: EvalConfig = dataclasses.field(default_factory=EvalConfig)
    train: TrainConfig = dataclasses.field(default_factory=TrainConfig)


_SECTION_TYPES = {
    DatasetConfig: {"synthetic": SyntheticSpec,
                    "mapping": TemporalMappingConfig},
    Stage2Config: {"roi": RoIConfig},
    ExperimentConfig: {"dataset": DatasetConfig, "backbone": BackboneConfig,
                       "neck": NeckConfig, "heads": HeadConfig,
                       "losses": LossConfig, "stage2": Stage2Config,
                       "postprocess": PostprocessConfig, "eval": EvalConfig,
                       "train": TrainConfig},
}


def _field_names(cls) -> set[str]:
    return {f.name for f in dataclasses.fields(cls)}


def _build_section(cls, data, prefix: str, errors: list[str]):
    if data is None:
        return None
    if not isinstance(data, dict):
        errors.append(f"{prefix or '<root>'}: expected a mapping, "
                      f"got {type(data).__name__}")
        return None
    known = _field_names(cls)
    nested = _SECTION_TYPES.get(cls, {})
    kwargs = {}
    for key, value in data.items():
        path = f"{prefix}.{key}" if prefix else key
        if key not in known:
            errors.append(path)
            continue
        if key in nested:
            kwargs[key] = _build_section(nested[key], value, path, errors)
        else:
            kwargs[key] = value
    if errors:
        return None
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{prefix or '<root>'}: {exc}") from exc


def build_config(data: dict) -> ExperimentConfig:
    """Dict (parsed YAML) to a validated ExperimentConfig; unknown keys are
    collected across the whole tree and reported together."""
    errors: list[str] = []
    cfg = _build_section(ExperimentConfig, data, "", errors)
    if errors:
        raise ConfigError("unknown config keys: " + ", ".join(sorted(errors)))
    return cfg


def load_config(path: str | Path) -> ExperimentConfig:
    with open(path) as fh:
        data = yaml.safe_load(fh)
    if data is None:
        data = {}
    return build_config(data)


def config_to_dict(config) -> dict:
    """Plain-serializable dict mirroring the YAML schema (tuples as lists)."""
    def convert(value):
        if dataclasses.is_dataclass(value) and not isinstance(value, type):
            return {f.name: convert(getattr(value, f.name))
                    for f in dataclasses.fields(value)}
        if isinstance(value, (list, tuple)):
            return [convert(v) for v in value]
        if isinstance(value, float) and value == float("inf"):
            return ".inf"
        return value
    return convert(config)


def apply_overrides(data: dict, overrides: dict[str, typing.Any]) -> dict:
    """New dict with dotted-path overrides applied; intermediate sections are
    created as needed (validation happens during build_config)."""
    out = copy.deepcopy(data)
    for path, value in overrides.items():
        parts = path.split(".")
        node = out
        for part in parts[:-1]:
            nxt = node.get(part)
            if not isinstance(nxt, dict):
                nxt = {}
                node[part] = nxt
            node = nxt
        node[parts[-1]] = value
    return out


def parse_override_value(text: str):
    """Interpret an override token the way the YAML loader would."""
    return yaml.safe_load(text)


def config_hash(config: ExperimentConfig) -> str:
    """Twelve hex chars identifying the config contents.

    Computed on the fully built config, so defaults are filled in and the
    hash is stable under key reordering in the source file. The seed list is
    excluded; seeds are externalized into per-run file names.
    """
    data = config_to_dict(config)
    data["train"].pop("seeds", None)
    blob = json.dumps(data, sort_keys=True, separators=(",", ":"))
    return hashlib.sha1(blob.encode()).hexdigest()[:12]
