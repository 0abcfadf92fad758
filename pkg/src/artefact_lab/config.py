"""Run configuration: one YAML document, one section per stage family."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .errors import ConfigError
from .partition import McmcConfig

PIPELINES = ("coins", "ceramics-cluster", "ceramics-reconstruct", "synth")


@dataclass
class SynthSection:
    kind: str = "coins"                 # coins | sherds | vessel
    n_dies: int = 5
    coins_per_die: int = 12
    blank_coins: int = 0
    rotation: float = 0.05
    translation: float = 4.0
    wear: float = 0.2
    noise: float = 0.03
    lighting: float = 0.1
    n_sets: int = 5
    pieces: list = field(default_factory=lambda: [7, 2, 2, 3, 2])
    n_pieces: int = 7
    vessel_size: int = 450
    canvas: int = 520


@dataclass
class PreprocessSection:
    target_size: int = 300
    tv_weight: float = 8.0
    tv_iterations: int = 100
    clahe_tiles: int = 8
    clahe_clip: float = 0.01


@dataclass
class DetectSection:
    method: str = "harris"              # harris | mser
    max_keypoints: int = 500
    circle_r_min: float = 90.0
    circle_r_max: float = 150.0
    mser_delta: int = 2
    mser_max_variation: float = 0.25
    mser_max_area: float = 0.01
    keep_fraction: float = 0.10


@dataclass
class MatchSection:
    checks: int = 256
    use_circles: bool = True


@dataclass
class ClusterSection:
    iterations: int = 20000
    burn_in: int = 5000
    thin: int = 10
    alpha_w: float = 2.0
    alpha_b: float = 2.0
    a_w: float = 1.0
    b_w: float = 1.0
    a_b: float = 1.0
    b_b: float = 1.0
    r: float = 3.0
    p: float = 0.5
    lambda_k: float = 4.0
    baseline_k: int = 5

    def mcmc(self, seed: int) -> McmcConfig:
        kw = {f.name: getattr(self, f.name) for f in dataclasses.fields(McmcConfig)
              if f.name != "seed"}
        return McmcConfig(seed=seed, **kw)


@dataclass
class EmbedSection:
    perplexity: float = 15.0
    iterations: int = 1000
    k: int = 5


@dataclass
class ContourSection:
    sigma: float = 2.0
    t_low: float = 0.02
    t_high: float = 0.05
    spacing: float = 2.0
    smooth: float = 1.0
    window_fraction: float = 0.15
    stride: int = 2


SECTIONS = {
    "synth": SynthSection,
    "preprocess": PreprocessSection,
    "detect": DetectSection,
    "match": MatchSection,
    "cluster": ClusterSection,
    "embed": EmbedSection,
    "contours": ContourSection,
}


@dataclass
class RunConfig:
    pipeline: str = "coins"
    seed: int = 0
    input_dir: str = "."
    output_dir: str = "out"
    synth: SynthSection = field(default_factory=SynthSection)
    preprocess: PreprocessSection = field(default_factory=PreprocessSection)
    detect: DetectSection = field(default_factory=DetectSection)
    match: MatchSection = field(default_factory=MatchSection)
    cluster: ClusterSection = field(default_factory=ClusterSection)
    embed: EmbedSection = field(default_factory=EmbedSection)
    contours: ContourSection = field(default_factory=ContourSection)

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)


def _coerce(section: str, f: dataclasses.Field, value):
    want = type(f.default) if f.default is not dataclasses.MISSING else list
    where = f"{section}.{f.name}" if section else f.name
    if want is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false, got {value!r}")
        return value
    if want is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if want is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if want is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    if want is list:
        if not isinstance(value, list):
            raise ConfigError(f"{where}: expected a list, got {value!r}")
        return value
    return value


def _build(cls, section: str, raw: dict):
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"section {section!r} must be a mapping")
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - set(names))
    if unknown:
        raise ConfigError(f"unknown key(s) in {section or 'top level'}: {', '.join(unknown)}")
    return cls(**{k: _coerce(section, names[k], v) for k, v in raw.items()})


def config_from_dict(raw: dict) -> RunConfig:
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError("configuration must be a mapping")
    top = {k: v for k, v in raw.items() if k not in SECTIONS}
    cfg = _build(RunConfig, "", {k: v for k, v in top.items()})
    for name, cls in SECTIONS.items():
        setattr(cfg, name, _build(cls, name, raw.get(name)))
    if cfg.pipeline not in PIPELINES:
        raise ConfigError(f"pipeline must be one of {', '.join(PIPELINES)}")
    if cfg.synth.kind not in ("coins", "sherds", "vessel"):
        raise ConfigError("synth.kind must be coins, sherds or vessel")
    if cfg.detect.method not in ("harris", "mser"):
        raise ConfigError("detect.method must be harris or mser")
    if cfg.seed < 0:
        raise ConfigError("seed must be non-negative")
    return cfg


def load_config(path) -> RunConfig:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    try:
        raw = yaml.safe_load(p.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"could not parse {p}: {exc}") from exc
    return config_from_dict(raw)


def describe_defaults() -> str:
    """Every configurable key with its default, for --help."""
    lines = []
    base = RunConfig()
    for f in dataclasses.fields(RunConfig):
        if f.name in SECTIONS:
            continue
        lines.append(f"  {f.name} = {getattr(base, f.name)!r}")
    for name, cls in SECTIONS.items():
        lines.append(f"  [{name}]")
        inst = cls()
        for f in dataclasses.fields(cls):
            lines.append(f"    {f.name} = {getattr(inst, f.name)!r}")
    return "\n".join(lines)
