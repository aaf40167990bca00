"""Pipeline configuration as one flat record with a ``key = value`` text form."""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, fields
from pathlib import Path

from .anchors import AnchorPolicy
from .features import DetectorParams
from .flow import ErrorWeights, SolverParams

MODES = ("baseline", "anchor-frames", "apo")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PipelineConfig:
    mode: str = "apo"
    use_patches: bool = True
    use_anchor_frames: bool = True
    feature_fraction: float = 1.0
    # photometric error weights
    alpha_center: float = 1.0
    alpha_cardinal: float = 0.25
    alpha_diagonal: float = 0.125
    # features and matching
    tau: float = 30.0
    ratio: float = 0.8
    contrast_threshold: float = 0.04
    max_features: int = 0
    # anchors
    anchor_threshold: float | None = None
    anchor_cap: float = 0.02
    anchor_percentile: float = 20.0
    min_spacing: int = 10
    min_matches: int = 8
    # patches
    eta: float = 0.08
    search_start: float = 5.0
    search_max: float = 40.0
    # flow solver
    flow_levels: int = 4
    flow_scale: float = 0.5
    flow_iterations: int = 100
    flow_smoothness: float = 15.0
    flow_warps: int = 1
    flow_normalization: float = 0.01
    # execution
    workers: int = 1
    cache_dir: str = ""
    seed: int = 0
    chain_memo: int = 64

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {', '.join(MODES)}")
        if self.tau <= 0:
            raise ConfigError("tau must be positive")
        if self.eta <= 0:
            raise ConfigError("eta must be positive")
        if not 0.0 <= self.feature_fraction <= 1.0:
            raise ConfigError("feature_fraction must lie in [0, 1]")
        if not 0.0 < self.ratio <= 1.0:
            raise ConfigError("ratio must lie in (0, 1]")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if self.search_max < self.search_start or self.search_start <= 0:
            raise ConfigError("search radii must satisfy 0 < search_start <= search_max")
        try:
            self.weights()
            self.anchor_policy()
            self.solver_params().validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def weights(self) -> ErrorWeights:
        return ErrorWeights(self.alpha_center, self.alpha_cardinal, self.alpha_diagonal)

    def anchor_policy(self) -> AnchorPolicy:
        return AnchorPolicy(self.anchor_threshold, self.anchor_cap, self.anchor_percentile, self.min_spacing)

    def solver_params(self) -> SolverParams:
        return SolverParams(levels=self.flow_levels, scale=self.flow_scale, iterations=self.flow_iterations,
                            smoothness=self.flow_smoothness, warps=self.flow_warps,
                            normalization=self.flow_normalization)

    def detector_params(self) -> DetectorParams:
        return DetectorParams(contrast_threshold=self.contrast_threshold, max_features=self.max_features)

    @property
    def patches_enabled(self) -> bool:
        return self.mode == "apo" and self.use_patches and self.feature_fraction > 0

    @property
    def anchors_enabled(self) -> bool:
        return self.mode != "baseline" and self.use_anchor_frames

    def replace(self, **changes) -> "PipelineConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def flow_key(self) -> dict:
        """Settings that determine the pairwise flow fields."""
        return {k: v for k, v in self.to_dict().items() if k.startswith("flow_")}


def _field_types(cls) -> dict[str, type]:
    out = {}
    for f in fields(cls):
        out[f.name] = float if f.default is None else type(f.default)
    return out


def parse_value(key: str, text: str, cls=PipelineConfig):
    """Convert ``text`` to the type of field ``key`` of dataclass ``cls``."""
    types = _field_types(cls)
    if key not in types:
        raise ConfigError(f"unknown config key {key!r}")
    text = text.strip()
    kind = types[key]
    optional = next(f for f in fields(cls) if f.name == key).default is None
    if optional and text.lower() in ("", "none", "auto"):
        return None
    try:
        if kind is bool:
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        return kind(text)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {text!r}") from None


def parse_config_text(text: str, cls=PipelineConfig) -> dict:
    """Typed values from ``key = value`` lines; ``#`` starts a comment."""
    values = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key = value")
        key, value = (t.strip() for t in line.split("=", 1))
        key = key.replace("-", "_")
        values[key] = parse_value(key, value, cls)
    return values


def load_config(path: str | Path | None = None, overrides: dict | None = None) -> PipelineConfig:
    values = {}
    if path is not None:
        values.update(parse_config_text(Path(path).read_text()))
    values.update(overrides or {})
    if not values.get("cache_dir"):
        values["cache_dir"] = os.environ.get("APOTRACK_CACHE_DIR", "")
    try:
        return PipelineConfig(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def format_config(cfg) -> str:
    lines = []
    for k, v in dataclasses.asdict(cfg).items():
        lines.append(f"{k} = {'none' if v is None else v}")
    return "\n".join(lines) + "\n"
