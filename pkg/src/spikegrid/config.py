"""Run configuration: one JSON document, validated against :data:`CONFIG_SCHEMA`.

Example::

    {
      "data": {"cube": "scene.hsic", "labels": "scene.hsil", "pca_components": 30},
      "network": {"patch_size": 17, "time_steps": 10, "kernels": "mixed", "width_factor": 2},
      "train": {"epochs": 30, "learning_rate": 0.085, "seed": 0},
      "split": {"mode": "count", "value": 200, "seed": 0},
      "output_dir": "runs/scene"
    }

``data`` may instead hold ``{"synthetic": {...}}`` with the keyword
arguments of :func:`spikegrid.data.generate_synthetic`. Relative paths are
resolved against the directory containing the config file. Omitted keys
take the defaults below.
"""

import copy
import json
from dataclasses import dataclass
from pathlib import Path

import jsonschema

from .data import SplitSpec, generate_synthetic, read_cube, read_labels
from .errors import ConfigError, DataError, TrainingError
from .network import KERNEL_MODES, NetworkSpec
from .neuron import LifConfig, SurrogateKind
from .training import TrainConfig

_NUM = {"type": "number"}
_POS_INT = {"type": "integer", "minimum": 1}

CONFIG_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "spikegrid run configuration",
    "type": "object",
    "additionalProperties": False,
    "required": ["data"],
    "properties": {
        "data": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "cube": {"type": "string"},
                "labels": {"type": "string"},
                "synthetic": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {
                        "num_classes": {"type": "integer", "minimum": 2},
                        "height": _POS_INT,
                        "width": _POS_INT,
                        "bands": _POS_INT,
                        "class_separation": {"type": "number", "exclusiveMinimum": 0},
                        "noise_sigma": {"type": "number", "minimum": 0},
                        "seed": {"type": "integer", "minimum": 0},
                    },
                },
                "pca_components": _POS_INT,
            },
            "oneOf": [{"required": ["cube", "labels"], "not": {"required": ["synthetic"]}},
                      {"required": ["synthetic"],
                       "not": {"anyOf": [{"required": ["cube"]}, {"required": ["labels"]}]}}],
        },
        "network": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "patch_size": _POS_INT,
                "time_steps": _POS_INT,
                "kernels": {"enum": sorted(KERNEL_MODES)},
                "width_factor": _POS_INT,
                "channels": {"type": "array", "items": _POS_INT, "minItems": 3, "maxItems": 3},
                "stem_kernel": _POS_INT,
                "swmr2_blocks": _POS_INT,
                "pool_kernel": _POS_INT,
                "init_gain": {"type": "number", "exclusiveMinimum": 0},
                "shortcut_gain": {"type": ["number", "null"]},
                "lif": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {"v_threshold": _NUM, "v_rest": _NUM,
                                   "decay": {"type": "number", "exclusiveMinimum": 0,
                                             "maximum": 1}},
                },
            },
        },
        "train": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "learning_rate": {"type": "number", "minimum": 0},
                "lr_decay_every": _POS_INT,
                "lr_decay_factor": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                "epochs": _POS_INT,
                "batch_size": _POS_INT,
                "momentum": {"type": "number", "minimum": 0, "maximum": 1},
                "seed": {"type": "integer", "minimum": 0},
                "loss": {"enum": ["cross_entropy", "mse"]},
                "validation_fraction": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
                "surrogate": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {
                        "kind": {"enum": [k.value for k in SurrogateKind]},
                        "window": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                    },
                },
            },
        },
        "split": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "mode": {"enum": ["count", "fraction"]},
                "value": {"type": "number", "exclusiveMinimum": 0},
                "seed": {"type": "integer", "minimum": 0},
            },
        },
        "output_dir": {"type": "string"},
    },
}

DEFAULTS = {
    "data": {"pca_components": 30},
    "network": {"patch_size": 17, "time_steps": 10, "kernels": "mixed", "width_factor": 2,
                "channels": [64, 128, 256], "stem_kernel": 3, "swmr2_blocks": 2,
                "pool_kernel": 2, "init_gain": 2.0, "shortcut_gain": None, "lif": {}},
    "train": {},
    "split": {"mode": "count", "value": 200, "seed": 0},
    "output_dir": "spikegrid-out",
}


def _merge(base, override):
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = value
    return out


@dataclass(frozen=True)
class RunConfig:
    """A validated, defaults-filled config plus the directory it came from."""

    doc: dict
    base_dir: Path

    @classmethod
    def from_dict(cls, doc, base_dir="."):
        validator = jsonschema.Draft202012Validator(CONFIG_SCHEMA)
        errors = sorted(validator.iter_errors(doc), key=lambda e: list(e.path))
        if errors:
            e = errors[0]
            where = "/".join(str(p) for p in e.path) or "<root>"
            raise ConfigError(f"config {where}: {e.message}")
        cfg = cls(_merge(DEFAULTS, doc), Path(base_dir))
        cfg.network_spec(num_classes=2)  # surfaces layout errors before any work starts
        cfg.train_config()
        cfg.split_spec()
        return cfg

    @classmethod
    def load(cls, path):
        path = Path(path)
        try:
            doc = json.loads(path.read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        return cls.from_dict(doc, path.parent)

    def _path(self, p) -> Path:
        p = Path(p)
        return p if p.is_absolute() else self.base_dir / p

    @property
    def output_dir(self) -> Path:
        return self._path(self.doc["output_dir"])

    @property
    def pca_components(self) -> int:
        return self.doc["data"]["pca_components"]

    def with_overrides(self, section, **values):
        doc = copy.deepcopy(self.doc)
        doc[section].update(values)
        return RunConfig(doc, self.base_dir)

    def network_spec(self, num_classes, in_channels=None) -> NetworkSpec:
        n = self.doc["network"]
        try:
            return NetworkSpec.build(
                num_classes, width_factor=n["width_factor"], kernels=n["kernels"],
                in_channels=in_channels or self.pca_components, patch_size=n["patch_size"],
                time_steps=n["time_steps"], channels=tuple(n["channels"]),
                stem_kernel=n["stem_kernel"], swmr2_blocks=n["swmr2_blocks"],
                pool_kernel=n["pool_kernel"], lif=LifConfig(**n["lif"]),
                shortcut_gain=n["shortcut_gain"], init_gain=n["init_gain"])
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"network: {exc}") from None

    def train_config(self, seed_offset=0) -> TrainConfig:
        t = dict(self.doc["train"])
        t["seed"] = t.get("seed", 0) + seed_offset
        try:
            return TrainConfig(**t)
        except (TypeError, ValueError, TrainingError) as exc:
            raise ConfigError(f"train: {exc}") from None

    def split_spec(self, seed_offset=0) -> SplitSpec:
        s = self.doc["split"]
        try:
            return SplitSpec(s["mode"], s["value"], s["seed"] + seed_offset)
        except ValueError as exc:
            raise ConfigError(f"split: {exc}") from None

    def load_data(self):
        """Return ``(HsiCube, LabelMap)``; raises DataError for unreadable inputs."""
        d = self.doc["data"]
        if "synthetic" in d:
            cube, labels = generate_synthetic(**d["synthetic"])
        else:
            paths = [self._path(d["cube"]), self._path(d["labels"])]
            for p in paths:
                if not p.is_file():
                    raise DataError(f"input file not found: {p}")
            cube, labels = read_cube(paths[0]), read_labels(paths[1])
        if self.pca_components > cube.bands:
            raise DataError(f"pca_components {self.pca_components} exceeds the cube's "
                            f"{cube.bands} bands")
        return cube, labels
