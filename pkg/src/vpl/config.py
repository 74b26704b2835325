"""Experiment config: one JSON document validated against the published
schema (schema.json, shipped with the package); unknown keys are rejected."""

from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources

import jsonschema

from .adaptation import AdaptationPlan, make_plan
from .backbone import BackboneConfig
from .datahub import SplitSpec, SyntheticDomainSpec
from .trainlab import TrainConfig


class ConfigError(ValueError):
    """Config file fails schema or semantic validation."""


def load_schema():
    with resources.files("vpl").joinpath("schema.json").open("r") as f:
        return json.load(f)


@dataclass(frozen=True)
class DataSpec:
    synthetic: SyntheticDomainSpec | None = None
    num_samples: int = 512
    manifest: str | None = None
    num_classes: int | None = None

    def task_num_classes(self):
        if self.synthetic is not None:
            return self.synthetic.num_classes
        return self.num_classes


@dataclass(frozen=True)
class ExperimentConfig:
    backbone: BackboneConfig
    plan: AdaptationPlan
    data: DataSpec
    train: TrainConfig
    split: SplitSpec | None = None
    out_dir: str | None = None


def parse_config(doc):
    try:
        jsonschema.validate(doc, load_schema())
    except jsonschema.ValidationError as e:
        path = "/".join(str(p) for p in e.absolute_path) or "<root>"
        raise ConfigError(f"config invalid at {path}: {e.message}") from None
    try:
        backbone = BackboneConfig(**doc["backbone"])
        plan = make_plan(doc["plan"]["method"], doc["plan"].get("hyper"))
        d = doc["data"]
        if "synthetic" in d:
            data = DataSpec(
                synthetic=SyntheticDomainSpec(**d["synthetic"]),
                num_samples=d.get("num_samples", 512),
            )
        else:
            data = DataSpec(manifest=d["manifest"], num_classes=d.get("num_classes"))
        train = TrainConfig(**doc.get("train", {}))
        split = SplitSpec(**doc["split"]) if "split" in doc else None
    except ValueError as e:
        raise ConfigError(str(e)) from None
    return ExperimentConfig(
        backbone=backbone,
        plan=plan,
        data=data,
        train=train,
        split=split,
        out_dir=doc.get("out_dir"),
    )


def load_config(path):
    try:
        with open(path) as f:
            doc = json.load(f)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from None
    return parse_config(doc)


def parse_dataspec(doc):
    """Validate a standalone data section (the schema's `data` fragment)."""
    try:
        jsonschema.validate(doc, load_schema()["properties"]["data"])
    except jsonschema.ValidationError as e:
        raise ConfigError(f"data spec invalid: {e.message}") from None
    try:
        if "synthetic" in doc:
            return DataSpec(
                synthetic=SyntheticDomainSpec(**doc["synthetic"]),
                num_samples=doc.get("num_samples", 512),
            )
        return DataSpec(manifest=doc["manifest"], num_classes=doc.get("num_classes"))
    except ValueError as e:
        raise ConfigError(str(e)) from None


def load_dataspec(path):
    try:
        with open(path) as f:
            doc = json.load(f)
    except FileNotFoundError:
        raise ConfigError(f"data spec file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from None
    return parse_dataspec(doc)
