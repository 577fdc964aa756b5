"""Experiment configuration, hashing and artifact stamps."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, is_dataclass
from pathlib import Path

from . import __version__
from .models import ModelConfig


def canonical_json(obj) -> str:
    if is_dataclass(obj):
        obj = asdict(obj)
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), default=list)


def config_hash(obj) -> str:
    return hashlib.sha256(canonical_json(obj).encode()).hexdigest()[:12]


def stamp(cfg_hash: str, seed) -> dict:
    """Provenance block embedded in every artifact."""
    return {"version": __version__, "config_hash": cfg_hash, "seed": seed}


def dump_json(obj, path):
    """Deterministic JSON: sorted keys, fixed indentation, trailing newline."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.tmp")
    tmp.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    tmp.replace(path)


@dataclass
class SplitConfig:
    seed: int = 0
    ratios: tuple[float, float, float] = (0.64, 0.16, 0.20)
    path: str | None = None


@dataclass
class ExperimentConfig:
    name: str = "exp"
    cohort: str | dict | None = None  # cohort.json path or a CohortSpec dict
    atlas: str | None = None
    preprocessed: str | None = None  # preprocessed.json path
    splits: SplitConfig = field(default_factory=SplitConfig)
    model: ModelConfig = field(default_factory=lambda: ModelConfig.desk("2d"))
    phases: list = field(default_factory=list)  # PhaseConfig dicts, in order
    out: str = "exp"

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown experiment config keys {sorted(unknown)}")
        if isinstance(d.get("splits"), dict):
            s = dict(d["splits"])
            if "ratios" in s:
                s["ratios"] = tuple(s["ratios"])
            d["splits"] = SplitConfig(**s)
        if isinstance(d.get("model"), dict):
            d["model"] = ModelConfig.from_dict(d["model"])
        return cls(**d)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        cfg = cls.from_dict(json.loads(path.read_text()))
        cfg.resolve_paths(path.parent)
        return cfg

    def resolve_paths(self, base: Path):
        def fix(p):
            return str((base / p).resolve()) if p and not Path(p).is_absolute() else p

        if isinstance(self.cohort, str):
            self.cohort = fix(self.cohort)
        self.atlas = fix(self.atlas)
        self.preprocessed = fix(self.preprocessed)
        self.splits.path = fix(self.splits.path)
        self.out = fix(self.out)

    def validate(self):
        for label, p in (("preprocessed", self.preprocessed), ("splits", self.splits.path)):
            if p is None:
                raise ValueError(f"experiment config needs a {label} path")
            if not Path(p).exists():
                raise FileNotFoundError(f"{label} path {p} does not exist")
        if not self.phases:
            raise ValueError("experiment config lists no phases")

    def to_dict(self) -> dict:
        return asdict(self)

    def hash(self) -> str:
        # the output location does not change results
        d = self.to_dict()
        d.pop("out")
        return config_hash(d)
