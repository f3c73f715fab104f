"""Run configuration files.

A run config is a TOML (or JSON) document with [model], [train], [data]
and [ablation] sections mirroring ModelConfig / TrainConfig / dataset
options. Unknown sections and unknown keys are rejected with field-level
messages, and a canonical sha256 digest of the parsed config is threaded
into checkpoints and metric reports.
"""

import hashlib
import json
import os
from dataclasses import dataclass

try:
    import tomllib
except ModuleNotFoundError:
    import tomli as tomllib

from .data import LAYOUTS
from .errors import ConfigurationError
from .network import MODEL_PRESETS, ModelConfig
from .training import TrainConfig, ablation_preset

_SECTIONS = ("model", "train", "data", "ablation")
_DATA_KEYS = {"layout", "root"}
_ABLATION_KEYS = {"preset"}


@dataclass
class RunConfig:
    model: ModelConfig
    train: TrainConfig
    layout: str = "generic_paired"
    data_root: str = None
    preset: int = None

    def validate(self) -> None:
        self.model.validate()
        self.train.validate()
        if self.layout not in LAYOUTS:
            raise ConfigurationError(
                f"[data].layout must be one of {LAYOUTS}, got {self.layout!r}"
            )
        if self.preset is not None:
            ablation_preset(self.preset)

    def to_dict(self) -> dict:
        return {
            "model": self.model.to_dict(),
            "train": self.train.to_dict(),
            "data": {"layout": self.layout, "root": self.data_root},
            "ablation": {"preset": self.preset},
        }

    def digest(self) -> str:
        return canonical_digest(self.to_dict())


def canonical_digest(doc: dict) -> str:
    """sha256 over the canonical JSON form (sorted keys, no whitespace)."""
    blob = json.dumps(doc, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def parse_run_config(doc: dict, source: str = "<config>") -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigurationError(f"{source}: top level must be a table/object")
    unknown = set(doc) - set(_SECTIONS)
    if unknown:
        raise ConfigurationError(f"{source}: unknown sections {sorted(unknown)}")

    model_doc = dict(doc.get("model", {}))
    preset_name = model_doc.pop("preset", None)
    if preset_name is not None:
        if preset_name not in MODEL_PRESETS:
            raise ConfigurationError(
                f"{source}: [model].preset must be one of "
                f"{sorted(MODEL_PRESETS)}, got {preset_name!r}"
            )
        base = MODEL_PRESETS[preset_name].to_dict()
        base.update(model_doc)
        model_doc = base
    try:
        model = ModelConfig.from_dict(model_doc)
        train = TrainConfig.from_dict(dict(doc.get("train", {})))
    except ConfigurationError as e:
        raise ConfigurationError(f"{source}: {e}") from e
    except TypeError as e:
        raise ConfigurationError(f"{source}: {e}") from e

    data_doc = dict(doc.get("data", {}))
    unknown = set(data_doc) - _DATA_KEYS
    if unknown:
        raise ConfigurationError(f"{source}: unknown [data] keys {sorted(unknown)}")
    ablation_doc = dict(doc.get("ablation", {}))
    unknown = set(ablation_doc) - _ABLATION_KEYS
    if unknown:
        raise ConfigurationError(
            f"{source}: unknown [ablation] keys {sorted(unknown)}"
        )

    cfg = RunConfig(
        model=model,
        train=train,
        layout=data_doc.get("layout", "generic_paired"),
        data_root=data_doc.get("root"),
        preset=ablation_doc.get("preset"),
    )
    try:
        cfg.validate()
    except ConfigurationError as e:
        raise ConfigurationError(f"{source}: {e}") from e
    return cfg


def load_run_config(path) -> RunConfig:
    if not os.path.isfile(path):
        raise ConfigurationError(f"config file not found: {path}")
    try:
        if str(path).endswith(".json"):
            with open(path) as f:
                doc = json.load(f)
        else:
            with open(path, "rb") as f:
                doc = tomllib.load(f)
    except (tomllib.TOMLDecodeError, json.JSONDecodeError, UnicodeDecodeError) as e:
        raise ConfigurationError(f"{path}: cannot parse config: {e}") from e
    return parse_run_config(doc, source=str(path))
