"""Run configuration: flat ``section.key=value`` text over the built-in defaults.

Example::

    data.root = /data/kvasir-dataset-v2
    data.ratios = 0.8, 0.1, 0.1
    train.epochs = 15
    lime.num_samples = 1000

Lines starting with ``#`` are comments.  Unknown keys are errors.
"""

import dataclasses
import json
from dataclasses import dataclass, field, fields
from pathlib import Path

from .explain import LimeConfig
from .model import ConfigurationError, HeadConfig
from .training import TrainingPolicy


@dataclass(frozen=True)
class DataConfig:
    root: str = ""
    manifest: str = ""  # empty -> <output>/manifest.csv
    ratios: tuple = (0.8, 0.1, 0.1)
    normalization_scale: float = 1.0
    normalization_offset: float = 0.0


@dataclass(frozen=True)
class ModelConfig:
    backbone: str = "efficientnet_b3"
    weights: str = "imagenet"  # "imagenet", "none" or a path to trunk weights
    trainable_backbone: bool = True


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    output: str = "runs/default"
    interactive: bool = False
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    head: HeadConfig = field(default_factory=HeadConfig)
    train: TrainingPolicy = field(default_factory=TrainingPolicy)
    lime: LimeConfig = field(default_factory=LimeConfig)

    @property
    def output_dir(self):
        return Path(self.output)

    @property
    def manifest_path(self):
        return Path(self.data.manifest) if self.data.manifest else self.output_dir / "manifest.csv"

    @property
    def backbone_weights(self):
        return None if self.model.weights.lower() in ("", "none") else self.model.weights

    def to_text(self):
        lines = [f"{k} = {_render(v)}" for k, v in sorted(flatten(self).items())]
        return "\n".join(lines) + "\n"


SECTIONS = ("data", "model", "head", "train", "lime")


def flatten(cfg):
    out = {}
    for f in fields(cfg):
        value = getattr(cfg, f.name)
        if dataclasses.is_dataclass(value):
            out.update({f"{f.name}.{k}": v for k, v in dataclasses.asdict(value).items()})
        else:
            out[f.name] = value
    return out


def _render(value):
    if isinstance(value, tuple):
        return ", ".join(repr(v) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    if value is None:
        return "none"
    return str(value)


def _coerce(text, default, key):
    text = text.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float) or default is None:
            return None if text.lower() == "none" else float(text)
        if isinstance(default, tuple):
            return tuple(float(x) for x in text.replace(",", " ").split())
    except ValueError as exc:
        raise ConfigurationError(f"bad value for {key}: {text!r}") from exc
    return text


def parse_pairs(text):
    pairs = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigurationError(f"line {lineno}: expected key = value, got {raw!r}")
        key, value = line.split("=", 1)
        pairs.append((key.strip(), value.strip()))
    return pairs


def apply_overrides(cfg, pairs):
    """Return ``cfg`` with ``(dotted_key, text)`` pairs applied in order."""
    top = {}
    sections = {name: {} for name in SECTIONS}
    for key, text in pairs:
        if "." in key:
            section, name = key.split(".", 1)
            if section not in SECTIONS:
                raise ConfigurationError(f"unknown section in {key!r}")
            current = getattr(cfg, section)
            if name not in {f.name for f in fields(current)}:
                raise ConfigurationError(f"unknown key {key!r}")
            sections[section][name] = _coerce(text, getattr(current, name), key)
        else:
            if key not in ("seed", "output", "interactive"):
                raise ConfigurationError(f"unknown key {key!r}")
            top[key] = _coerce(text, getattr(cfg, key), key)
    updates = dict(top)
    for section, values in sections.items():
        if values:
            updates[section] = dataclasses.replace(getattr(cfg, section), **values)
    return dataclasses.replace(cfg, **updates)


def load_config(path=None, overrides=()):
    """Defaults, then the config file, then ``overrides`` (later wins)."""
    cfg = RunConfig()
    if path:
        cfg = apply_overrides(cfg, parse_pairs(Path(path).read_text(encoding="utf-8")))
    return apply_overrides(cfg, list(overrides))


def config_dict(cfg):
    return json.loads(json.dumps(flatten(cfg), default=list))
