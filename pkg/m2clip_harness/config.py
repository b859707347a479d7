"""Experiment configuration: ``key = value`` files, dotted sections, CLI overrides."""

import logging
import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Tuple, Union

from dotenv import load_dotenv
from typing_extensions import Literal, get_args, get_origin

from m2clip.adapters import AdapterConfig, AdapterPlacement
from m2clip.decoder import HeadConfig
from m2clip.encoders import EncoderConfig
from m2clip.exceptions import ConfigurationError
from m2clip.model import CMLMConfig

logger = logging.getLogger(__name__)

OptimizerName = Literal["adam", "sgd"]


@dataclass
class TrainConfig:
    """Optimisation schedule.

    Attributes:
        epochs: passes over the train split
        batch_size: clips per step (at least 2 with the contrastive head)
        learning_rate: step size
        optimizer: ``adam`` or ``sgd``
        beta1: Adam first-moment decay
        beta2: Adam second-moment decay
        eps: Adam denominator guard
        momentum: SGD momentum
        eval_every: evaluate every N epochs (and always after the last)
        max_steps: stop after this many optimizer steps when positive
        keep_best: end with the trainable values of the best-scoring evaluation
    """

    epochs: int = 30
    batch_size: int = 16
    learning_rate: float = 1e-3
    optimizer: OptimizerName = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    momentum: float = 0.0
    eval_every: int = 1
    max_steps: int = 0
    keep_best: bool = True

    def validate(self) -> None:
        if self.epochs < 0:
            raise ConfigurationError(f"train.epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigurationError(f"train.batch_size must be positive, got {self.batch_size}")
        if self.learning_rate < 0:
            raise ConfigurationError("train.learning_rate must be non-negative")
        if self.eval_every < 1:
            raise ConfigurationError("train.eval_every must be positive")
        if self.max_steps < 0:
            raise ConfigurationError("train.max_steps must be >= 0")


@dataclass
class DataConfig:
    """Synthetic dataset sizes; clip shape comes from the model section"""

    train_classes: int = 8
    holdout_classes: int = 4
    per_class: int = 32
    val_per_class: int = 8
    holdout_per_class: int = 32
    noise: float = 0.1

    def validate(self) -> None:
        for key in ("per_class", "val_per_class", "holdout_per_class"):
            if getattr(self, key) < 1:
                raise ConfigurationError(f"data.{key} must be at least 1, got {getattr(self, key)}")
        if self.train_classes < 1:
            raise ConfigurationError("data.train_classes must be at least 1")
        if self.holdout_classes < 0:
            raise ConfigurationError("data.holdout_classes must be >= 0")
        if self.noise < 0:
            raise ConfigurationError("data.noise must be >= 0")


SECTIONS: Dict[str, type] = {
    "model": EncoderConfig,
    "placement": AdapterPlacement,
    "adapter": AdapterConfig,
    "heads": HeadConfig,
    "cmlm": CMLMConfig,
    "train": TrainConfig,
    "data": DataConfig,
}

# Derived from other keys, never set by hand
HIDDEN_KEYS = {"model.seed", "model.vocab_size"}


@dataclass
class ExperimentConfig:
    seed: int = 0
    model: EncoderConfig = field(default_factory=EncoderConfig)
    placement: AdapterPlacement = field(default_factory=AdapterPlacement)
    adapter: AdapterConfig = field(default_factory=AdapterConfig)
    heads: HeadConfig = field(default_factory=HeadConfig)
    cmlm: CMLMConfig = field(default_factory=CMLMConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def validate(self) -> "ExperimentConfig":
        self.model.validate()
        self.placement.validate(self.model.video_layers, self.model.text_layers)
        self.adapter.validate()
        self.heads.validate()
        self.cmlm.validate()
        self.train.validate()
        self.data.validate()
        if self.heads.contrastive and self.train.batch_size < 2:
            raise ConfigurationError("train.batch_size must be >= 2 with the contrastive head")
        return self

    def encoder_config(self) -> EncoderConfig:
        return replace(self.model, seed=self.seed)

    def copy(self) -> "ExperimentConfig":
        return ExperimentConfig(
            seed=self.seed,
            **{name: replace(getattr(self, name)) for name in SECTIONS},
        )

    def set(self, key: str, raw: str) -> None:
        section, name, kind = _lookup(resolve_key(key))
        target = self if section is None else getattr(self, section)
        setattr(target, name, coerce(raw, kind, key))

    def get(self, key: str):
        section, name, _ = _lookup(resolve_key(key))
        target = self if section is None else getattr(self, section)
        return getattr(target, name)

    def to_text(self) -> str:
        """Deterministic snapshot listing every key"""
        lines = [f"{key} = {format_value(self.get(key))}" for key, _, _ in list_config_keys()]
        return "\n".join(lines) + "\n"


def _field_types(cls) -> Dict[str, object]:
    return {f.name: f.type for f in fields(cls)}


def _all_keys() -> List[Tuple[str, Optional[str], str, object]]:
    keys: List[Tuple[str, Optional[str], str, object]] = [("seed", None, "seed", int)]
    for section, cls in SECTIONS.items():
        for name, kind in _field_types(cls).items():
            key = f"{section}.{name}"
            if key not in HIDDEN_KEYS:
                keys.append((key, section, name, kind))
    return keys


def _lookup(key: str) -> Tuple[Optional[str], str, object]:
    for full, section, name, kind in _all_keys():
        if full == key:
            return section, name, kind
    raise ConfigurationError(f"Unknown config key: {key}")


def resolve_key(key: str) -> str:
    """Accept a full dotted key, or a bare field name that is unique across sections"""
    key = key.strip()
    names = [full for full, _, _, _ in _all_keys()]
    if key in names:
        return key
    matches = [full for full in names if full.split(".")[-1] == key]
    if len(matches) == 1:
        return matches[0]
    if matches:
        raise ConfigurationError(f"Ambiguous config key {key!r}: one of {matches}")
    raise ConfigurationError(f"Unknown config key: {key}")


def type_name(kind) -> str:
    if get_origin(kind) is Literal:
        return "|".join(str(v) for v in get_args(kind))
    return getattr(kind, "__name__", str(kind))


def coerce(raw: str, kind, key: str = ""):
    """Parse ``raw`` into the declared field type"""
    text = raw.strip()
    try:
        if get_origin(kind) is Literal:
            choices = get_args(kind)
            if text not in choices:
                raise ValueError(f"expected one of {choices}")
            return text
        if kind is bool:
            lowered = text.lower()
            if lowered in ("true", "yes", "1", "on"):
                return True
            if lowered in ("false", "no", "0", "off"):
                return False
            raise ValueError("expected true or false")
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
        return text
    except ValueError as e:
        raise ConfigurationError(f"Bad value for {key}: {raw!r} ({e})")


def format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def list_config_keys() -> List[Tuple[str, str, str]]:
    """``(key, default, type)`` for every settable key, in file order"""
    defaults = ExperimentConfig()
    rows = []
    for key, section, name, kind in _all_keys():
        target = defaults if section is None else getattr(defaults, section)
        rows.append((key, format_value(getattr(target, name)), type_name(kind)))
    return rows


def describe_keys() -> str:
    rows = list_config_keys()
    width = max(len(key) for key, _, _ in rows)
    lines = ["config keys (key = default  [type]):"]
    lines += [f"  {key:<{width}} = {default}  [{kind}]" for key, default, kind in rows]
    return "\n".join(lines)


def parse_config_text(text: str, source: str = "<config>") -> List[Tuple[str, str]]:
    """``key = value`` pairs in file order; ``#`` starts a comment"""
    pairs = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        content = line.split("#", 1)[0].strip()
        if not content:
            continue
        if "=" not in content:
            raise ConfigurationError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
        key, value = content.split("=", 1)
        if not key.strip():
            raise ConfigurationError(f"{source}:{lineno}: empty key")
        pairs.append((key.strip(), value.strip()))
    return pairs


def parse_overrides(items: Iterable[str]) -> List[Tuple[str, str]]:
    pairs = []
    for item in items:
        if "=" not in item:
            raise ConfigurationError(f"Override must be key=value, got {item!r}")
        key, value = item.split("=", 1)
        pairs.append((key.strip(), value.strip()))
    return pairs


def apply_pairs(cfg: ExperimentConfig, pairs: Iterable[Tuple[str, str]], source: str) -> ExperimentConfig:
    """Apply pairs in order; a repeated key keeps its last value and warns"""
    seen: Dict[str, str] = {}
    for key, value in pairs:
        full = resolve_key(key)
        if full in seen and seen[full] != value:
            logger.warning(
                "%s: %s set more than once (%s, then %s); last value wins",
                source,
                full,
                seen[full],
                value,
            )
        seen[full] = value
        cfg.set(full, value)
    return cfg


def load_config(
    path: Optional[Union[str, Path]] = None, overrides: Iterable[str] = ()
) -> ExperimentConfig:
    """Defaults, then the file at ``path``, then ``key=value`` overrides, then validation.

    Raises:
        ConfigurationError: On unknown keys, bad values or an inconsistent result
    """
    cfg = ExperimentConfig()
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigurationError(f"Config file not found: {path}")
        apply_pairs(cfg, parse_config_text(path.read_text(encoding="utf-8"), str(path)), str(path))
        logger.debug("Loaded config from %s", path)
    apply_pairs(cfg, parse_overrides(overrides), "--set")
    return cfg.validate()


def config_from_text(text: str) -> ExperimentConfig:
    cfg = ExperimentConfig()
    apply_pairs(cfg, parse_config_text(text, "<snapshot>"), "<snapshot>")
    return cfg.validate()


def env_defaults() -> Dict[str, Optional[str]]:
    """Environment defaults, after loading a ``.env`` file if present"""
    load_dotenv()
    return {
        "config": os.environ.get("M2CLIP_CONFIG"),
        "output_dir": os.environ.get("M2CLIP_OUTPUT_DIR", "runs"),
        "log_level": os.environ.get("M2CLIP_LOG_LEVEL", "INFO"),
        "log_file": os.environ.get("M2CLIP_LOG_FILE"),
    }
