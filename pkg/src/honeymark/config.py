"""Experiment configuration: one JSON document, defaults filled, paths relative to the file."""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

from .diffnet import PRESETS, ArchDescriptor, TrainConfig
from .errors import ConfigError, RejectedInput
from .honeygen import HoneyGenConfig
from .metrics import DISTANCES

METHODS = ("honeyimage", "mi_loss", "badnets")

DESK_DEFAULTS = {
    "name": "desk",
    "seed": 20240601,
    "dataset": {
        "synthetic": {
            "num_classes": 10,
            "samples_per_class": 300,
            "image_side": 16,
            "class_separation": 5.0,
            "noise_sigma": 0.3,
            "jitter": 1.0,
        }
    },
    "split": {"public_fraction": 2 / 3, "verification_fraction": 0.01},
    "proxy": {"arch": {"kind": "mlp", "hidden_sizes": [128, 64]}, "train": "desk"},
    "hardness": None,
    "honey": {"iterations": 10, "epsilon_255": 4.0, "step_size_255": 0.4, "num_honey": None},
    "suspicious": {"arch": {"kind": "mlp", "hidden_sizes": [128, 64]}, "train": "desk"},
    "num_model_pairs": 3,
    "methods": list(METHODS),
    "verification": {"target_fpr": 0.05, "num_calibration_models": 2},
    "metrics": {"distance_kind": "mean_abs", "lambda": 10.0},
    "baselines": {
        "poison_rate": 0.1,
        "target_label": 0,
        "patch_size": 3,
        "patch_value": 1.0,
        "margin": 0.2,
        "mi_reference_models": 1,
    },
    "output_dir": "runs/desk",
}


def _merge(defaults, override):
    if not isinstance(defaults, dict) or not isinstance(override, dict):
        return copy.deepcopy(override)
    out = copy.deepcopy(defaults)
    for k, v in override.items():
        out[k] = _merge(defaults.get(k), v) if k in defaults and defaults[k] is not None else copy.deepcopy(v)
    return out


def parse_train(spec, field) -> TrainConfig:
    """A preset name, or a dict of TrainConfig fields with an optional ``preset`` base."""
    if isinstance(spec, str):
        spec = {"preset": spec}
    if not isinstance(spec, dict):
        raise ConfigError(field, "must be a preset name or an object")
    spec = dict(spec)
    base = PRESETS.get(spec.pop("preset", "desk"))
    if base is None:
        raise ConfigError(field, f"unknown preset; choose from {sorted(PRESETS)}")
    fields = base.to_json()
    unknown = set(spec) - set(fields)
    if unknown:
        raise ConfigError(field, f"unknown keys {sorted(unknown)}")
    fields.update(spec)
    try:
        return TrainConfig(**fields)
    except (RejectedInput, TypeError) as exc:
        raise ConfigError(field, str(exc)) from None


def build_arch(spec: dict, input_shape, num_classes, field) -> ArchDescriptor:
    try:
        kind = spec["kind"]
        default_hidden = (128, 64) if kind == "mlp" else (16, 32)
        return ArchDescriptor(kind, tuple(input_shape), num_classes, tuple(spec.get("hidden_sizes", default_hidden)))
    except (KeyError, RejectedInput, TypeError) as exc:
        raise ConfigError(field, str(exc)) from None


@dataclass
class ExperimentConfig:
    doc: dict
    base_dir: Path

    @classmethod
    def from_dict(cls, doc: dict, base_dir=".", seed: int | None = None, output_dir=None) -> "ExperimentConfig":
        if not isinstance(doc, dict):
            raise ConfigError("<root>", "config must be a JSON object")
        unknown = set(doc) - set(DESK_DEFAULTS)
        if unknown:
            raise ConfigError(sorted(unknown)[0], "unknown config key")
        merged = _merge(DESK_DEFAULTS, doc)
        # the dataset source is replaced wholesale, never merged with the default
        if "dataset" in doc:
            merged["dataset"] = copy.deepcopy(doc["dataset"])
        # so is an arch, so that switching kind does not inherit the mlp widths
        for section in ("proxy", "suspicious", "hardness"):
            if isinstance(doc.get(section), dict) and "arch" in doc[section]:
                merged[section]["arch"] = copy.deepcopy(doc[section]["arch"])
        if seed is not None:
            merged["seed"] = int(seed)
        if output_dir is not None:
            merged["output_dir"] = str(output_dir)
        cfg = cls(merged, Path(base_dir).resolve())
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path, seed: int | None = None, output_dir=None) -> "ExperimentConfig":
        path = Path(path)
        if not path.is_file():
            raise ConfigError("config", f"file not found: {path}")
        try:
            doc = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError("config", f"invalid JSON: {exc}") from None
        return cls.from_dict(doc, path.parent, seed, output_dir)

    # -- validation -------------------------------------------------------

    def validate(self):
        d = self.doc
        if not isinstance(d["seed"], int) or not 0 <= d["seed"] < 2**64:
            raise ConfigError("seed", "must be an unsigned 64-bit integer")
        src = d["dataset"]
        if not isinstance(src, dict) or len(src) != 1 or next(iter(src)) not in ("synthetic", "idx", "png_dir"):
            raise ConfigError("dataset", "must have exactly one of: synthetic, idx, png_dir")
        if "idx" in src:
            for key in ("images", "labels"):
                if key not in src["idx"]:
                    raise ConfigError(f"dataset.idx.{key}", "missing")
                if not self.resolve(src["idx"][key]).is_file():
                    raise ConfigError(f"dataset.idx.{key}", f"file not found: {self.resolve(src['idx'][key])}")
        if "png_dir" in src and not self.resolve(src["png_dir"]).is_dir():
            raise ConfigError("dataset.png_dir", f"directory not found: {self.resolve(src['png_dir'])}")
        pf, vf = d["split"]["public_fraction"], d["split"]["verification_fraction"]
        if not 0 < pf < 1:
            raise ConfigError("split.public_fraction", "must be in (0, 1)")
        if not 0 < vf <= 1 - pf:
            raise ConfigError("split.verification_fraction", "must be in (0, 1 - public_fraction]")
        for section in ("proxy", "suspicious"):
            parse_train(d[section]["train"], f"{section}.train")
            if d[section]["arch"].get("kind") not in ("mlp", "small_cnn"):
                raise ConfigError(f"{section}.arch.kind", "must be mlp or small_cnn")
        if d["hardness"] is not None:
            parse_train(d["hardness"].get("train", d["proxy"]["train"]), "hardness.train")
        try:
            self.honey_config(0)
        except RejectedInput as exc:
            raise ConfigError("honey", str(exc)) from None
        n = d["honey"].get("num_honey")
        if n is not None and (not isinstance(n, int) or n < 1):
            raise ConfigError("honey.num_honey", "must be a positive integer or null")
        if not isinstance(d["num_model_pairs"], int) or d["num_model_pairs"] < 1:
            raise ConfigError("num_model_pairs", "must be a positive integer")
        methods = d["methods"]
        if not methods or any(m not in METHODS for m in methods):
            raise ConfigError("methods", f"choose a non-empty subset of {METHODS}")
        v = d["verification"]
        if not 0 < v["target_fpr"] < 1:
            raise ConfigError("verification.target_fpr", "must be in (0, 1)")
        if not isinstance(v["num_calibration_models"], int) or v["num_calibration_models"] < 1:
            raise ConfigError("verification.num_calibration_models", "must be >= 1")
        if d["metrics"]["distance_kind"] not in DISTANCES:
            raise ConfigError("metrics.distance_kind", f"choose from {DISTANCES}")
        if not d["metrics"]["lambda"] > 0:
            raise ConfigError("metrics.lambda", "must be > 0")
        b = d["baselines"]
        if not 0 < b["poison_rate"] <= 1:
            raise ConfigError("baselines.poison_rate", "must be in (0, 1]")
        if b["mi_reference_models"] < 1:
            raise ConfigError("baselines.mi_reference_models", "must be >= 1")

    # -- accessors ------------------------------------------------------------

    def resolve(self, path) -> Path:
        p = Path(path)
        return p if p.is_absolute() else (self.base_dir / p)

    @property
    def seed(self) -> int:
        return self.doc["seed"]

    @property
    def output_dir(self) -> Path:
        return self.resolve(self.doc["output_dir"])

    @property
    def methods(self) -> list[str]:
        return list(self.doc["methods"])

    @property
    def num_model_pairs(self) -> int:
        return self.doc["num_model_pairs"]

    def train_config(self, section: str) -> TrainConfig:
        if section == "hardness":
            h = self.doc["hardness"] or {}
            return parse_train(h.get("train", self.doc["proxy"]["train"]), "hardness.train")
        return parse_train(self.doc[section]["train"], f"{section}.train")

    def arch(self, section: str, input_shape, num_classes) -> ArchDescriptor:
        if section == "hardness":
            spec = (self.doc["hardness"] or {}).get("arch", self.doc["proxy"]["arch"])
        else:
            spec = self.doc[section]["arch"]
        return build_arch(spec, input_shape, num_classes, f"{section}.arch")

    def honey_config(self, seed: int) -> HoneyGenConfig:
        h = self.doc["honey"]
        eps = h["epsilon"] if "epsilon" in h else h["epsilon_255"] / 255.0
        alpha = h["step_size"] if "step_size" in h else h["step_size_255"] / 255.0
        return HoneyGenConfig(int(h["iterations"]), float(eps), float(alpha), self.train_config("proxy"), seed)

    def section_hash(self, *keys) -> str:
        doc = {k: self.doc[k] for k in keys}
        return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()

    @property
    def config_hash(self) -> str:
        doc = {k: v for k, v in self.doc.items() if k not in ("output_dir", "name")}
        return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()

    def to_json(self) -> dict:
        return copy.deepcopy(self.doc)
