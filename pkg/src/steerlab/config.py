"""Experiment configuration (TOML).

Every section and key is listed in the dataclasses below; unknown keys are
errors. Top-level keys: ``seed`` (required), ``output_dir``. Sections:
``[model]``, ``[concepts]``, ``[data]``, ``[sweep]``, ``[metrics]``,
``[fig3]``, ``[optimality]``. See ``configs/default.toml`` for a documented
example.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from steerlab.errors import ConfigError
from steerlab.model import ModelConfig, persistent_gains, single_injection_gains
from steerlab.synthetic import CATEGORIES, SUBSTRATE_KINDS

METRICS = ("success_rate", "similarity", "baseline_similarity", "logit_boost", "delta_logit", "mention_rate")


@dataclass(frozen=True)
class ModelSection:
    n_layers: int = 8
    d_model: int = 64
    n_heads: int = 4
    vocab_size: int = 256
    prefix_len: int = 4
    layer_gain: float = 0.0
    nonlinearity_strength: float = 0.0
    # "single" (inject once at injection_layer), "persistent" (1/L each layer) or explicit gains
    reinjection: str | list = "single"
    injection_layer: int = 1
    prompt: list | None = None  # default: BOS + three highest token ids


@dataclass(frozen=True)
class ConceptSection:
    count: int = 4
    orthogonal: bool = True
    norm: float = 4.0
    categories: list | None = None  # default cycles through the four categories
    peaks: list | None = None  # 1-based peak layer per concept; default L // 2
    localized: bool = True  # false: every concept rides the global visual channel


@dataclass(frozen=True)
class DataSection:
    pairs: int = 100
    sigma: float = 0.0
    substrate: str = "scene"
    eval_samples: int = 500
    negative: str = "absence"


@dataclass(frozen=True)
class SweepSection:
    layers: list | None = None  # default: all layers
    alphas: list = field(default_factory=lambda: [1.0])
    sign: int = 1
    max_len: int = 4
    alpha_grid: list = field(default_factory=lambda: [0.1, 0.5, 1.0, 2.0, 5.0])
    steer_every_step: bool = True


@dataclass(frozen=True)
class MetricsSection:
    select: list = field(default_factory=lambda: ["success_rate", "similarity", "logit_boost", "mention_rate"])


@dataclass(frozen=True)
class Fig3Section:
    peaks: list = field(default_factory=lambda: [3, 6])
    single_peak: int = 4
    samples: int = 500
    sigma: float = 0.1


@dataclass(frozen=True)
class OptimalitySection:
    problems: int = 100
    d: int = 16
    sigmas: list = field(default_factory=lambda: [0.1, 0.5, 1.0])
    ensemble: int = 200
    random_directions: int = 50
    samples_per_class: int = 100
    steps: int = 400


_SECTIONS = {
    "model": ModelSection,
    "concepts": ConceptSection,
    "data": DataSection,
    "sweep": SweepSection,
    "metrics": MetricsSection,
    "fig3": Fig3Section,
    "optimality": OptimalitySection,
}


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int
    output_dir: str = "runs/default"
    model: ModelSection = ModelSection()
    concepts: ConceptSection = ConceptSection()
    data: DataSection = DataSection()
    sweep: SweepSection = SweepSection()
    metrics: MetricsSection = MetricsSection()
    fig3: Fig3Section = Fig3Section()
    optimality: OptimalitySection = OptimalitySection()

    def __post_init__(self):
        _validate(self)

    def model_config(self, reinjection=None) -> ModelConfig:
        m = self.model
        spec = m.reinjection if reinjection is None else reinjection
        if spec == "single":
            gains = single_injection_gains(m.n_layers, m.injection_layer)
        elif spec == "persistent":
            gains = persistent_gains(m.n_layers)
        else:
            gains = tuple(float(g) for g in spec)
        return ModelConfig(
            n_layers=m.n_layers,
            d_model=m.d_model,
            n_heads=m.n_heads,
            vocab_size=m.vocab_size,
            prefix_len=m.prefix_len,
            layer_gain=m.layer_gain,
            reinjection_gains=gains,
            nonlinearity_strength=m.nonlinearity_strength,
            seed=self.seed,
        )

    @property
    def layers(self) -> list[int]:
        return list(self.sweep.layers) if self.sweep.layers else list(range(1, self.model.n_layers + 1))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def replace(self, **changes) -> "ExperimentConfig":
        """Override top-level fields or ``section__key`` entries."""
        top, nested = {}, {}
        for key, value in changes.items():
            if "__" in key:
                section, name = key.split("__", 1)
                nested.setdefault(section, {})[name] = value
            else:
                top[key] = value
        for section, values in nested.items():
            if section not in _SECTIONS:
                raise ConfigError(f"unknown section {section!r}")
            top[section] = _build_section(section, {**dataclasses.asdict(getattr(self, section)), **values})
        return dataclasses.replace(self, **top)


def _check(cond: bool, msg: str) -> None:
    if not cond:
        raise ConfigError(msg)


def _validate(cfg: ExperimentConfig) -> None:
    _check(isinstance(cfg.seed, int) and not isinstance(cfg.seed, bool), "seed must be an integer")
    m, c, d, s = cfg.model, cfg.concepts, cfg.data, cfg.sweep
    for name in ("n_layers", "d_model", "n_heads", "vocab_size", "prefix_len"):
        _check(getattr(m, name) > 0, f"model.{name} must be positive")
    _check(1 <= m.injection_layer <= m.n_layers, "model.injection_layer out of range")
    if isinstance(m.reinjection, str):
        _check(m.reinjection in ("single", "persistent"), "model.reinjection must be single, persistent or a list")
    else:
        _check(len(m.reinjection) == m.n_layers, "model.reinjection list must have n_layers entries")
    if m.prompt is not None:
        _check(len(m.prompt) > 0, "model.prompt must be non-empty")
        _check(all(0 <= t < m.vocab_size for t in m.prompt), "model.prompt token out of range")
    _check(c.count > 0, "concepts.count must be positive")
    _check(c.norm >= 0, "concepts.norm must be >= 0")
    if c.categories is not None:
        _check(len(c.categories) == c.count, "concepts.categories needs one entry per concept")
        _check(all(x in CATEGORIES for x in c.categories), f"concepts.categories must be from {CATEGORIES}")
    if c.peaks is not None:
        _check(len(c.peaks) == c.count, "concepts.peaks needs one entry per concept")
        _check(all(1 <= k <= m.n_layers for k in c.peaks), "concepts.peaks out of range")
    _check(d.pairs > 0 and d.eval_samples > 0, "data.pairs and data.eval_samples must be positive")
    _check(d.sigma >= 0, "data.sigma must be >= 0")
    _check(d.substrate in SUBSTRATE_KINDS, f"data.substrate must be one of {SUBSTRATE_KINDS}")
    _check(d.negative in ("absence", "opposite"), "data.negative must be absence or opposite")
    if s.layers is not None:
        _check(len(s.layers) > 0, "sweep.layers must be non-empty")
        _check(all(1 <= k <= m.n_layers for k in s.layers), "sweep.layers out of range")
    _check(len(s.alphas) > 0 and all(a >= 0 for a in s.alphas), "sweep.alphas must be non-empty and >= 0")
    _check(len(s.alpha_grid) > 0 and all(a >= 0 for a in s.alpha_grid), "sweep.alpha_grid must be >= 0")
    _check(s.sign in (1, -1), "sweep.sign must be 1 or -1")
    _check(s.max_len >= 1, "sweep.max_len must be >= 1")
    _check(all(x in METRICS for x in cfg.metrics.select), f"metrics.select must be from {METRICS}")
    f3 = cfg.fig3
    _check(len(f3.peaks) >= 1 and all(1 <= k <= m.n_layers for k in f3.peaks), "fig3.peaks out of range")
    _check(1 <= f3.single_peak <= m.n_layers, "fig3.single_peak out of range")
    _check(f3.samples > 0 and f3.sigma >= 0, "fig3.samples must be positive, fig3.sigma >= 0")
    o = cfg.optimality
    _check(o.problems > 0 and o.d >= 2 and o.ensemble > 0, "optimality counts must be positive")
    _check(len(o.sigmas) > 0 and all(x >= 0 for x in o.sigmas), "optimality.sigmas must be >= 0")


def _build_section(name: str, values: dict[str, Any]):
    cls = _SECTIONS[name]
    known = {f.name for f in fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"unknown key(s) in [{name}]: {', '.join(sorted(unknown))}")
    try:
        return cls(**values)
    except TypeError as exc:
        raise ConfigError(f"[{name}]: {exc}") from exc


def config_from_dict(raw: dict[str, Any]) -> ExperimentConfig:
    raw = dict(raw)
    unknown = set(raw) - {"seed", "output_dir", *_SECTIONS}
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(sorted(unknown))}")
    if "seed" not in raw:
        raise ConfigError("config must set an explicit seed")
    kwargs: dict[str, Any] = {"seed": raw.pop("seed")}
    if "output_dir" in raw:
        kwargs["output_dir"] = str(raw.pop("output_dir"))
    for name, values in raw.items():
        if not isinstance(values, dict):
            raise ConfigError(f"[{name}] must be a table")
        kwargs[name] = _build_section(name, values)
    try:
        return ExperimentConfig(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = tomllib.loads(path.read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return config_from_dict(raw)
