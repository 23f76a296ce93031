"""Flat ``key = value`` pipeline configuration.

One setting per line, ``#`` starts a comment. Key names carry their units
(``_m`` metres, ``_t`` tesla, ``_m2`` square metres). ``auto`` or ``none``
selects the documented default for optional settings.

Example::

    lengthscale_m = 0.3
    inducing_spacing_m = 0.2
    noise_std_t = 6e-5
    inference_spacing_m = 0.05
"""

from __future__ import annotations

from dataclasses import dataclass, fields, replace
from pathlib import Path

from .features import GAUSS, FeatureConfig
from .registration import MsacConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PipelineConfig:
    # kernel
    lengthscale_m: float = 0.3
    sigma_f2: float | None = None  # None: derived from field_std_t
    field_std_t: float | None = None  # None: RMS of measured components
    noise_std_t: float = 6e-5
    # inducing grid; spacing None means one lengthscale
    inducing_spacing_m: float | None = None
    inducing_margin_m: float = 0.0
    inducing_prune_m: float | None = None  # None: keep the full grid
    update_block: int = 1
    # inference grid
    inference_spacing_m: float = 0.05
    inference_layout: str = "grid"  # "grid" or "tube"
    tube_radius_m: float | None = None  # None: one inference spacing
    # features
    support_multiplier: float = 4.0
    variance_quantile: float = 0.75
    min_doh_ratio: float = 1.0
    component_range_t: float = 100 * GAUSS
    component_bin_t: float = 10 * GAUSS
    angle_weighting: str = "magnitude"
    component_weighting: str = "count"
    # registration
    match_distance_threshold: float = 0.5
    msac_iterations: int = 1000
    inlier_radius_m: float = 0.1
    truncation_cost_m2: float | None = None
    vector_weight_m2: float | None = None
    fitness_threshold: float = 0.2
    ratio_test: float | None = None
    variance_cap_ratio: float = 0.5
    min_valid_fraction: float = 0.5
    unit_system: str = "SI"
    seed: int = 0

    def __post_init__(self):
        positive = ("lengthscale_m", "noise_std_t", "inference_spacing_m", "support_multiplier", "inlier_radius_m")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        for name in ("sigma_f2", "field_std_t", "inducing_spacing_m", "inducing_prune_m", "tube_radius_m"):
            v = getattr(self, name)
            if v is not None and not v > 0:
                raise ConfigError(f"{name} must be positive")
        if self.inducing_margin_m < 0:
            raise ConfigError("inducing_margin_m must be non-negative")
        if self.update_block < 1 or self.msac_iterations < 1:
            raise ConfigError("update_block and msac_iterations must be >= 1")
        if self.inference_layout not in ("grid", "tube"):
            raise ConfigError("inference_layout must be 'grid' or 'tube'")
        if self.unit_system != "SI":
            raise ConfigError("only unit_system = SI is supported")
        try:
            self.feature_config()
            self.msac_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    @property
    def inducing_spacing(self) -> float:
        return self.inducing_spacing_m or self.lengthscale_m

    @property
    def tube_radius(self) -> float:
        return self.tube_radius_m or self.inference_spacing_m

    def feature_config(self) -> FeatureConfig:
        return FeatureConfig(
            support_multiplier=self.support_multiplier,
            variance_quantile=self.variance_quantile,
            min_doh_ratio=self.min_doh_ratio,
            component_range=self.component_range_t,
            component_bin=self.component_bin_t,
            angle_weighting=self.angle_weighting,
            component_weighting=self.component_weighting,
        )

    def msac_config(self, seed: int | None = None) -> MsacConfig:
        return MsacConfig(
            match_distance_threshold=self.match_distance_threshold,
            iterations=self.msac_iterations,
            inlier_distance_radius=self.inlier_radius_m,
            truncation_cost=self.truncation_cost_m2,
            vector_weight=self.vector_weight_m2,
            fitness_threshold=self.fitness_threshold,
            ratio_test=self.ratio_test,
            variance_cap_ratio=self.variance_cap_ratio,
            min_valid_fraction=self.min_valid_fraction,
            seed=self.seed if seed is None else seed,
        )

    def with_updates(self, **kw) -> PipelineConfig:
        return replace(self, **kw)

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def to_text(self) -> str:
        lines = []
        for k, v in self.to_dict().items():
            lines.append(f"{k} = {'auto' if v is None else v}")
        return "\n".join(lines) + "\n"


_TYPES = {f.name: f.type for f in fields(PipelineConfig)}


def _coerce(key: str, raw: str):
    t = _TYPES[key]
    s = raw.strip()
    optional = "None" in t
    if s.lower() in ("auto", "none", ""):
        if optional:
            return None
        raise ConfigError(f"{key} has no automatic value")
    try:
        if t.startswith("int"):
            return int(s)
        if t.startswith("float"):
            return float(s)
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {s!r}") from exc
    return s


def parse_config(text: str, base: PipelineConfig | None = None) -> PipelineConfig:
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, raw = (p.strip() for p in line.split("=", 1))
        if key not in _TYPES:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        values[key] = _coerce(key, raw)
    try:
        return replace(base or PipelineConfig(), **values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path) -> PipelineConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text)
