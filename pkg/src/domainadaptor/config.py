"""Experiment configuration: one JSON document with dataset, train, adapt, sweep and paths sections.

Unknown keys are rejected at every level. Defaults for the domain list come
from the packaged ``configs/default.json`` so the calibrated appearance
transforms live in data, not code.
"""
from __future__ import annotations

import hashlib
import json
import zlib
from importlib import resources
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .adapt import METHODS, AdaptConfig
from .bench import SWEEP_KINDS, DomainSpec, TrainConfig
from .errors import ConfigError


def packaged_default() -> Dict[str, Any]:
    text = resources.files("domainadaptor").joinpath("configs/default.json").read_text(encoding="utf-8")
    return json.loads(text)


def derive_seed(root: int, component: str) -> int:
    """Deterministic 32-bit child seed for a named component."""
    ss = np.random.SeedSequence(entropy=int(root), spawn_key=(zlib.crc32(component.encode("utf-8")),))
    return int(ss.generate_state(1)[0])


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class DomainSection(_Section):
    name: str
    hue: float = 0.0
    brightness: float = 0.0
    contrast: float = Field(1.0, gt=0)
    noise: float = Field(0.0, ge=0)
    sketch: bool = False
    stroke: int = Field(1, ge=1)
    seed: int = 0

    def spec(self) -> DomainSpec:
        return DomainSpec(**self.model_dump())


def _default_domains() -> List[DomainSection]:
    return [DomainSection(**d) for d in packaged_default()["dataset"]["domains"]]


class DatasetSection(_Section):
    per_domain_n: int = Field(2000, ge=10)
    num_classes: int = Field(5, ge=2, le=5)
    image_size: int = Field(32, ge=8)
    domains: List[DomainSection] = Field(default_factory=_default_domains, min_length=3)

    @model_validator(mode="after")
    def _check(self):
        names = [d.name for d in self.domains]
        if len(set(names)) != len(names):
            raise ValueError("domain names must be unique")
        if self.per_domain_n < 2 * self.num_classes:
            raise ValueError("per_domain_n must be at least twice num_classes")
        return self


class TrainSection(_Section):
    epochs: int = Field(6, ge=1)
    lr: float = Field(0.05, gt=0)
    momentum: float = Field(0.9, ge=0, lt=1)
    batch_size: int = Field(16, ge=2)
    weight_decay: float = Field(5e-4, ge=0)
    val_fraction: float = Field(0.1, ge=0, lt=1)
    domain_purity: float = Field(0.75, ge=0, le=1)


class AdaptSection(_Section):
    methods: List[str] = Field(default_factory=lambda: list(METHODS))
    # calibrated for the benchmark network; the library default in AdaptConfig stays 1e-3
    lr: float = Field(0.01, ge=0)
    steps: int = Field(1, ge=0)
    mode: str = "episodic"
    confidence_threshold: float = Field(0.0, ge=0, le=1)
    alpha: Optional[float] = Field(0.9, ge=0, le=1)
    s: float = Field(1.0, gt=0)
    m: int = Field(8, ge=1)
    crop_scale: Tuple[float, float] = (0.8, 1.0)
    flip_prob: float = Field(0.5, ge=0, le=1)
    batch_size: int = Field(64, ge=1)
    seeds: List[int] = Field(default_factory=lambda: [0])
    subset_size: Optional[int] = Field(None, ge=1)
    held_out: Optional[List[str]] = None

    @field_validator("mode")
    @classmethod
    def _mode(cls, v):
        if v not in ("episodic", "online"):
            raise ValueError("mode must be 'episodic' or 'online'")
        return v

    def base(self) -> AdaptConfig:
        """Shared settings; ``alpha`` only reaches methods that use a fixed weight."""
        return AdaptConfig(method="domainadaptor-T", lr=self.lr, steps=self.steps, mode=self.mode,
                           confidence_threshold=self.confidence_threshold, s=self.s, m=self.m,
                           crop_scale=tuple(self.crop_scale), flip_prob=self.flip_prob)


class SweepSection(_Section):
    kind: str = "alpha"
    grid: List[float] = Field(default_factory=lambda: [0.5, 0.6, 0.7, 0.8, 0.9, 0.95, 0.99], min_length=1)
    methods: Optional[List[str]] = None
    seeds: List[int] = Field(default_factory=lambda: [0, 1, 2, 3, 4], min_length=1)
    batch_size: int = Field(64, ge=1)
    steps: Optional[int] = Field(None, ge=0)

    @field_validator("kind")
    @classmethod
    def _kind(cls, v):
        if v not in SWEEP_KINDS:
            raise ValueError(f"kind must be one of {SWEEP_KINDS}")
        return v


class PathsSection(_Section):
    data_dir: Optional[str] = None
    checkpoint_dir: Optional[str] = None


class ExperimentConfig(_Section):
    seed: int = 0
    dataset: DatasetSection = Field(default_factory=DatasetSection)
    train: TrainSection = Field(default_factory=TrainSection)
    adapt: AdaptSection = Field(default_factory=AdaptSection)
    sweep: SweepSection = Field(default_factory=SweepSection)
    paths: PathsSection = Field(default_factory=PathsSection)

    @property
    def dataset_seed(self) -> int:
        return derive_seed(self.seed, "dataset")

    @property
    def train_seed(self) -> int:
        return derive_seed(self.seed, "train")

    def train_config(self) -> TrainConfig:
        return TrainConfig(seed=self.train_seed, **self.train.model_dump())

    def domain_specs(self) -> List[DomainSpec]:
        return [d.spec() for d in self.dataset.domains]

    def held_out(self) -> List[str]:
        names = [d.name for d in self.dataset.domains]
        chosen = self.adapt.held_out or names
        unknown = sorted(set(chosen) - set(names))
        if unknown:
            raise ConfigError(f"adapt.held_out names unknown domains: {unknown}")
        return list(chosen)

    def resolved(self) -> Dict[str, Any]:
        return self.model_dump(mode="json")

    def digest(self) -> str:
        blob = json.dumps(self.resolved(), sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()


def _format_error(err: ValidationError) -> str:
    parts = []
    for e in err.errors():
        where = ".".join(str(p) for p in e["loc"]) or "<root>"
        parts.append(f"{where}: {e['msg']}")
    return "; ".join(parts)


def _coerce(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(doc: Dict[str, Any], assignment: str) -> None:
    """Apply one ``section.key=value`` override in place; the value is parsed as JSON when possible."""
    path, sep, value = assignment.partition("=")
    if not sep or not path:
        raise ConfigError(f"override {assignment!r} is not of the form key=value")
    keys = path.split(".")
    node = doc
    for k in keys[:-1]:
        node = node.setdefault(k, {})
        if not isinstance(node, dict):
            raise ConfigError(f"override {assignment!r}: {k} is not a section")
    node[keys[-1]] = _coerce(value)


def load_config(path=None, overrides=(), seed: Optional[int] = None) -> ExperimentConfig:
    doc: Dict[str, Any] = {}
    if path is not None:
        text = Path(path).read_text(encoding="utf-8")
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}:{e.lineno}:{e.colno}: {e.msg}") from None
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: top level must be a JSON object")
    for item in overrides:
        apply_override(doc, item)
    if seed is not None:
        doc["seed"] = seed
    try:
        return ExperimentConfig.model_validate(doc)
    except ValidationError as e:
        raise ConfigError(_format_error(e)) from None
