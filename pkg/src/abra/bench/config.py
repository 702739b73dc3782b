"""Declarative experiment configuration with defaults, validation and a stable hash."""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any

from ..errors import ArtifactIOError, ConfigError
from ..nn import ACTIVATIONS, TrainSchedule
from ..spectral import BandSpec
from .data import SyntheticDomain

METHODS = (
    "finetune_upper",
    "zero_shot",
    "source_only",
    "task_analogy",
    "param_delta",
    "abra",
    "abra_merged",
)
OPTIONAL_METHODS = ("domain_supervised",)
DOMAIN_ROLES = ("base", "source", "target")
FEWSHOT_SHOTS = (1, 5, 10, 20, 30)

# Calibration choices for the toy scale; see README for what each one controls.
DEFAULTS: dict[str, Any] = {
    "seeds": [0, 1, 2],
    "model": {"width": 32, "depth": 3, "activation": "tanh"},
    "world": {"n_classes": 5, "box_dim": 16, "spread": 0.6, "center_scale": 1.0, "concept_shift": 1.0},
    "domains": {
        "base": {"name": "base", "seed": 1, "angle": 0.0, "scale_spread": 0.0, "smoothing": 0.0, "noise": 0.05},
        "source": {"name": "source", "seed": 11, "angle": 0.6, "scale_spread": 0.3, "smoothing": 0.0, "noise": 0.05},
        "target": {"name": "target", "seed": 23, "angle": 1.2, "scale_spread": 0.5, "smoothing": 0.0, "noise": 0.05},
    },
    "split": {
        "source_classes": [0, 1, 2, 3, 4],
        "target_available": [0, 1, 2],
        "target_unavailable": [3, 4],
        "samples_per_class": 512,
        "eval_samples_per_class": 256,
        "top_k": 3,
    },
    "schedules": {
        "pretrain": {"epochs": 20, "lr": 0.05, "batch_size": 16},
        "domain": {"epochs": 20, "lr": 0.05, "batch_size": 8},
        "class": {"epochs": 12, "lr": 0.01, "batch_size": 4},
        "upper": {"epochs": 12, "lr": 0.02, "batch_size": 8},
        "fewshot": {"epochs": 12, "lr": 0.01, "batch_size": 4},
    },
    "layers": {
        "domain": ["layer0.weight", "layer1.weight", "layer2.weight"],
        "class": ["layer1.weight", "layer2.weight"],
        "domain_lr_scale": {"layer1.weight": 0.1, "layer1.bias": 0.1, "layer2.weight": 0.1, "layer2.bias": 0.1},
    },
    "band": {"half_width": 2},
    "methods": list(METHODS),
    "fewshot": {"shots": list(FEWSHOT_SHOTS)},
    "eval": {"hit_tolerance": 0.5},
    "output_dir": "runs/default",
}

SCHEDULE_KEYS = ("epochs", "lr", "lr_drop_epochs", "lr_drop_factor", "batch_size")


def _merge(defaults: dict, given: dict, path: str) -> dict:
    """Recursive fill of ``given`` from ``defaults``; unknown keys are rejected."""
    out = copy.deepcopy(defaults)
    for key, value in given.items():
        where = f"{path}.{key}" if path else key
        if key not in defaults:
            raise ConfigError(f"unknown config key '{where}'")
        if isinstance(defaults[key], dict) and key not in ("domain_lr_scale",):
            if not isinstance(value, dict):
                raise ConfigError(f"config key '{where}' must be an object")
            out[key] = _merge(defaults[key], value, where)
        else:
            out[key] = copy.deepcopy(value)
    return out


def _int_list(value, where: str, allow_empty: bool = False) -> list[int]:
    if not isinstance(value, list) or (not value and not allow_empty):
        raise ConfigError(f"config key '{where}' must be a non-empty list of integers")
    for v in value:
        if isinstance(v, bool) or not isinstance(v, int):
            raise ConfigError(f"config key '{where}' must contain integers, got {v!r}")
    return list(value)


def _number(value, where: str, minimum: float | None = None, integer: bool = False):
    ok = isinstance(value, int) if integer else isinstance(value, (int, float))
    if isinstance(value, bool) or not ok:
        raise ConfigError(f"config key '{where}' must be a{'n integer' if integer else ' number'}, got {value!r}")
    if minimum is not None and value < minimum:
        raise ConfigError(f"config key '{where}' must be >= {minimum}, got {value!r}")
    return value


def _schedule(spec: dict, where: str) -> TrainSchedule:
    for key in spec:
        if key not in SCHEDULE_KEYS:
            raise ConfigError(f"unknown config key '{where}.{key}'")
    kwargs = dict(spec)
    _number(kwargs.get("epochs", 12), f"{where}.epochs", 0, integer=True)
    _number(kwargs.get("lr", 1e-2), f"{where}.lr", 0)
    _number(kwargs.get("batch_size", 4), f"{where}.batch_size", 1, integer=True)
    if kwargs.get("lr_drop_epochs") is not None:
        kwargs["lr_drop_epochs"] = tuple(_int_list(kwargs["lr_drop_epochs"], f"{where}.lr_drop_epochs", True))
    try:
        return TrainSchedule(**kwargs)
    except ConfigError as exc:
        raise ConfigError(f"config key '{where}': {exc}") from None


@dataclass(frozen=True)
class BenchmarkSplit:
    source_classes: tuple[int, ...]
    target_available: tuple[int, ...]
    target_unavailable: tuple[int, ...]
    samples_per_class: int
    eval_samples_per_class: int
    top_k: int = 3


@dataclass(frozen=True, eq=False)
class ExperimentConfig:
    """Validated view of a config document; ``raw`` keeps the normalised JSON."""

    raw: dict

    def __post_init__(self):
        self._validate()

    # -------------------------------------------------------------- construction

    @classmethod
    def from_dict(cls, doc: dict | None = None) -> "ExperimentConfig":
        if doc is None:
            doc = {}
        if not isinstance(doc, dict):
            raise ConfigError("config document must be a JSON object")
        return cls(_merge(DEFAULTS, doc, ""))

    @classmethod
    def default(cls) -> "ExperimentConfig":
        return cls.from_dict({})

    def with_overrides(self, **updates) -> "ExperimentConfig":
        """Shallow-merge overrides into the normalised document, e.g. ``methods=[...]``."""
        doc = self.to_dict()
        for key, value in updates.items():
            if key not in DEFAULTS:
                raise ConfigError(f"unknown config key '{key}'")
            if isinstance(value, dict) and isinstance(doc.get(key), dict):
                doc[key] = _merge(doc[key], value, key)
            else:
                doc[key] = value
        return ExperimentConfig.from_dict(doc)

    def to_dict(self) -> dict:
        return copy.deepcopy(self.raw)

    def science_dict(self) -> dict:
        """Everything that influences results; ``output_dir`` is excluded."""
        doc = self.to_dict()
        doc.pop("output_dir", None)
        return doc

    def config_hash(self) -> str:
        text = json.dumps(self.science_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode("utf-8")).hexdigest()

    # -------------------------------------------------------------- typed views

    @property
    def seeds(self) -> list[int]:
        return list(self.raw["seeds"])

    @property
    def width(self) -> int:
        return self.raw["model"]["width"]

    @property
    def depth(self) -> int:
        return self.raw["model"]["depth"]

    @property
    def activation(self) -> str:
        return self.raw["model"]["activation"]

    @property
    def world(self) -> dict:
        return dict(self.raw["world"])

    def domain(self, role: str) -> SyntheticDomain:
        if role not in DOMAIN_ROLES:
            raise ConfigError(f"unknown domain role '{role}' (expected one of {', '.join(DOMAIN_ROLES)})")
        return SyntheticDomain(**self.raw["domains"][role])

    @property
    def split(self) -> BenchmarkSplit:
        s = self.raw["split"]
        return BenchmarkSplit(
            source_classes=tuple(s["source_classes"]),
            target_available=tuple(s["target_available"]),
            target_unavailable=tuple(s["target_unavailable"]),
            samples_per_class=s["samples_per_class"],
            eval_samples_per_class=s["eval_samples_per_class"],
            top_k=s["top_k"],
        )

    def schedule(self, stage: str) -> TrainSchedule:
        if stage not in self.raw["schedules"]:
            raise ConfigError(f"unknown schedule '{stage}'")
        return _schedule(self.raw["schedules"][stage], f"schedules.{stage}")

    @property
    def domain_layers(self) -> list[str]:
        return list(self.raw["layers"]["domain"])

    @property
    def class_layers(self) -> list[str]:
        return list(self.raw["layers"]["class"])

    @property
    def domain_trainable(self) -> list[str]:
        """Designated domain layers plus their biases."""
        return [t for w in self.domain_layers for t in (w, w.replace(".weight", ".bias"))]

    @property
    def domain_lr_scale(self) -> dict[str, float]:
        return dict(self.raw["layers"]["domain_lr_scale"])

    @property
    def band(self) -> BandSpec:
        return BandSpec(self.raw["band"]["half_width"])

    @property
    def methods(self) -> list[str]:
        return list(self.raw["methods"])

    @property
    def shots(self) -> list[int]:
        return list(self.raw["fewshot"]["shots"])

    @property
    def hit_tolerance(self) -> float:
        return float(self.raw["eval"]["hit_tolerance"])

    @property
    def output_dir(self) -> Path:
        return Path(self.raw["output_dir"])

    # -------------------------------------------------------------- validation

    def _validate(self) -> None:
        r = self.raw
        seeds = _int_list(r["seeds"], "seeds")
        if len(set(seeds)) != len(seeds):
            raise ConfigError("config key 'seeds' contains duplicates")
        _number(r["model"]["width"], "model.width", 1, integer=True)
        _number(r["model"]["depth"], "model.depth", 1, integer=True)
        if r["model"]["activation"] not in ACTIVATIONS:
            raise ConfigError(f"config key 'model.activation' must be one of {ACTIVATIONS}")

        w = r["world"]
        _number(w["n_classes"], "world.n_classes", 1, integer=True)
        _number(w["box_dim"], "world.box_dim", 1, integer=True)
        _number(w["spread"], "world.spread", 0)
        if w["spread"] == 0:
            raise ConfigError("config key 'world.spread' must be > 0")
        _number(w["center_scale"], "world.center_scale", 0)
        _number(w["concept_shift"], "world.concept_shift")

        for role in DOMAIN_ROLES:
            d = r["domains"][role]
            for key in d:
                if key not in ("name", "seed", "angle", "scale_spread", "smoothing", "noise"):
                    raise ConfigError(f"unknown config key 'domains.{role}.{key}'")
            try:
                SyntheticDomain(**d)
            except (ConfigError, TypeError) as exc:
                raise ConfigError(f"config key 'domains.{role}': {exc}") from None

        s = r["split"]
        n_classes = w["n_classes"]
        source = set(_int_list(s["source_classes"], "split.source_classes"))
        avail = set(_int_list(s["target_available"], "split.target_available"))
        unav = set(_int_list(s["target_unavailable"], "split.target_unavailable"))
        for key, group in (("source_classes", source), ("target_available", avail), ("target_unavailable", unav)):
            bad = sorted(c for c in group if not 0 <= c < n_classes)
            if bad:
                raise ConfigError(f"config key 'split.{key}' names classes {bad} outside 0..{n_classes - 1}")
        if avail & unav:
            raise ConfigError(
                f"config keys 'split.target_available' and 'split.target_unavailable' overlap on {sorted(avail & unav)}"
            )
        if not unav <= source:
            raise ConfigError(
                f"config key 'split.target_unavailable' has classes {sorted(unav - source)} absent from the source"
            )
        _number(s["samples_per_class"], "split.samples_per_class", 1, integer=True)
        _number(s["eval_samples_per_class"], "split.eval_samples_per_class", 1, integer=True)
        _number(s["top_k"], "split.top_k", 1, integer=True)
        if s["top_k"] > len(avail) or s["top_k"] > len(source):
            raise ConfigError(
                f"config key 'split.top_k'={s['top_k']} exceeds the number of classes available for objectification"
            )

        for stage in DEFAULTS["schedules"]:
            self.schedule(stage)

        valid = {f"layer{i}.weight" for i in range(r["model"]["depth"])}
        for key in ("domain", "class"):
            layers = r["layers"][key]
            if not isinstance(layers, list) or not layers or not all(isinstance(x, str) for x in layers):
                raise ConfigError(f"config key 'layers.{key}' must be a non-empty list of layer names")
            bad = [x for x in layers if x not in valid]
            if bad:
                raise ConfigError(f"config key 'layers.{key}' names unknown layers {bad}")
        scale = r["layers"]["domain_lr_scale"]
        if not isinstance(scale, dict):
            raise ConfigError("config key 'layers.domain_lr_scale' must be an object")
        tensors = valid | {v.replace(".weight", ".bias") for v in valid}
        for name, value in scale.items():
            if name not in tensors:
                raise ConfigError(f"config key 'layers.domain_lr_scale.{name}' is not a hidden-layer tensor")
            _number(value, f"layers.domain_lr_scale.{name}", 0)

        half_width = r["band"]["half_width"]
        _number(half_width, "band.half_width", 0, integer=True)
        if half_width >= r["model"]["width"]:
            raise ConfigError(f"config key 'band.half_width'={half_width} must be < model.width")

        methods = r["methods"]
        if not isinstance(methods, list) or not methods:
            raise ConfigError("config key 'methods' must be a non-empty list")
        unknown = [m for m in methods if m not in METHODS + OPTIONAL_METHODS]
        if unknown:
            raise ConfigError(f"config key 'methods' has unknown methods {unknown}")
        if len(set(methods)) != len(methods):
            raise ConfigError("config key 'methods' contains duplicates")

        shots = _int_list(r["fewshot"]["shots"], "fewshot.shots")
        for k in shots:
            if k < 1:
                raise ConfigError(f"config key 'fewshot.shots' entries must be >= 1, got {k}")
            if k > s["samples_per_class"]:
                raise ConfigError(
                    f"config key 'fewshot.shots' asks for {k} shots but only {s['samples_per_class']} "
                    "target samples per class exist"
                )
        _number(r["eval"]["hit_tolerance"], "eval.hit_tolerance", 0)
        if not isinstance(r["output_dir"], str) or not r["output_dir"]:
            raise ConfigError("config key 'output_dir' must be a non-empty string")


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise ArtifactIOError(f"config file '{path}' does not exist") from None
    except OSError as exc:
        raise ArtifactIOError(f"cannot read config file '{path}': {exc.strerror}") from None
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file '{path}' is not valid JSON: {exc.msg} (line {exc.lineno})") from None
    try:
        return ExperimentConfig.from_dict(doc)
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}") from None
