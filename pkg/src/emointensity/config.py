"""Pipeline configuration: dataclass defaults, JSON loading and dotted overrides."""

from __future__ import annotations

import dataclasses
import json
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np


@dataclass
class PathsConfig:
    # relative paths resolve against the output directory
    corpus: str = "corpus.csv"
    latents: str | None = "latents.csv"
    embeddings: str = "embeddings.csv"


@dataclass
class GenConfig:
    classes: list[str] = field(default_factory=lambda: ["Angry", "Happy", "Sad", "Surprise"])
    per_class: int = 50
    neutral_count: int | None = None
    feature_dim: int = 16
    margin: float = 1.0
    spread: float = 1.0
    class_step: float = 0.5
    noise: float = 0.0
    n_speakers: int = 10
    speaker_dim: int = 64
    embedding_noise: float = 0.1


@dataclass
class RankingConfig:
    c: float = 1.0
    joint: bool = False
    max_iterations: int = 5000
    gradient_tolerance: float = 1e-8
    step_rule: str = "backtracking"
    pair_mode: str = "auto"
    max_pairs_per_set: int = 50_000


@dataclass
class PoolConfig:
    top_k: int = 8


@dataclass
class ControllerConfig:
    window: int = 96
    emb_dim: int = 256
    hidden: int = 128
    beta_a: float = 1.0
    beta_b: float = 1.0
    epochs: int = 30
    lr: float = 3e-3
    jitter: float = 0.05


@dataclass
class MIConfig:
    hidden: int = 64
    steps: int = 300
    batch_size: int = 512
    lr: float = 1e-2
    alpha1: float = 0.1
    alpha2: float = 0.1


@dataclass
class FuseConfig:
    reference: str | None = None


@dataclass
class PipelineConfig:
    out: str = "runs/default"
    seed: int = 0
    alphas: list[float] = field(default_factory=lambda: [0.2, 0.4, 0.6, 0.8])
    paths: PathsConfig = field(default_factory=PathsConfig)
    gen: GenConfig = field(default_factory=GenConfig)
    ranking: RankingConfig = field(default_factory=RankingConfig)
    pool: PoolConfig = field(default_factory=PoolConfig)
    controller: ControllerConfig = field(default_factory=ControllerConfig)
    mi: MIConfig = field(default_factory=MIConfig)
    fuse: FuseConfig = field(default_factory=FuseConfig)

    def to_json(self) -> dict:
        return dataclasses.asdict(self)

    def resolve(self, rel: str) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else Path(self.out) / p


def _build(cls, data: dict, where: str):
    known = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        if key not in known:
            raise KeyError(f"unknown config key {where}{key}")
        default = getattr(cls(), key)
        if dataclasses.is_dataclass(default):
            kwargs[key] = _build(type(default), value, f"{where}{key}.")
        else:
            kwargs[key] = value
    return cls(**kwargs)


def config_from_dict(data: dict) -> PipelineConfig:
    return _build(PipelineConfig, data, "")


def load_config(path: str | Path | None) -> PipelineConfig:
    if path is None:
        return PipelineConfig()
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"config file not found: {p}")
    return config_from_dict(json.loads(p.read_text()))


def apply_override(cfg: PipelineConfig, assignment: str) -> None:
    """Apply ``section.key=value``; the value is parsed as JSON, else kept as a string."""
    if "=" not in assignment:
        raise ValueError(f"override must look like key=value, got {assignment!r}")
    path, raw = assignment.split("=", 1)
    try:
        value: Any = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    target = cfg
    parts = path.strip().split(".")
    for part in parts[:-1]:
        if not hasattr(target, part):
            raise KeyError(f"unknown config section {part!r}")
        target = getattr(target, part)
    if not hasattr(target, parts[-1]):
        raise KeyError(f"unknown config key {path!r}")
    setattr(target, parts[-1], value)


def stage_seed(seed: int, stage: str) -> int:
    """Named sub-seed so each stage's randomness is independent of the others."""
    ss = np.random.SeedSequence([int(seed), zlib.crc32(stage.encode())])
    return int(ss.generate_state(1)[0])
