"""Stage functions shared by the CLI and the Monte-Carlo evaluation."""

from __future__ import annotations

import hashlib
import time
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from . import __version__
from .config import PipelineConfig
from .features import Extraction, FeatureSet, InferenceGrid, bounds_of, extract_features
from .field_sim import MeasurementSet, SamplingPlan, Scene, sample_scene, scene_field
from .geometry import RigidTransform
from .gp import GPBelief, KernelParams, absorb, init_belief
from .registration import (
    EstimationError,
    FitnessResult,
    MsacConfig,
    estimate_transform_msac,
    evaluate_against_truth,
    fitness_check,
    match_descriptors,
)

# settings used for the built-in desk scene (1 m cube, fields of a few mT)
DESK_CONFIG = PipelineConfig(
    lengthscale_m=0.3,
    inducing_spacing_m=0.2,
    noise_std_t=6e-5,
    inducing_prune_m=0.2,
    update_block=50,
    inference_spacing_m=0.05,
    inference_layout="tube",
    inlier_radius_m=0.1,
    match_distance_threshold=0.5,
)


def kernel_params(cfg: PipelineConfig, ms: MeasurementSet | None = None) -> KernelParams:
    if cfg.sigma_f2 is not None:
        return KernelParams.isotropic(cfg.sigma_f2, cfg.lengthscale_m, cfg.noise_std_t)
    std = cfg.field_std_t
    if std is None:
        if ms is None or len(ms) == 0:
            raise ValueError("field_std_t = auto needs measurements")
        std = float(np.sqrt(np.mean(ms.values**2)))
    return KernelParams.from_field_scale(std, cfg.lengthscale_m, cfg.noise_std_t)


def build_belief(ms: MeasurementSet, cfg: PipelineConfig) -> GPBelief:
    """Inducing grid over the measurement bounds, then every measurement in order."""
    if len(ms) == 0:
        raise ValueError("no measurements to map")
    params = kernel_params(cfg, ms)
    lo, hi = bounds_of(ms.locations, cfg.inducing_margin_m)
    belief = init_belief((lo, hi), cfg.inducing_spacing, params, ms.locations, cfg.inducing_prune_m)
    return absorb(belief, ms, block=cfg.update_block)


def inference_grid(cfg: PipelineConfig, belief: GPBelief | None = None, path_points=None) -> InferenceGrid:
    """Grid over the measured region: a tube around ``path_points`` or their bounding box.

    Without path points the inducing-grid bounds stand in for the data bounds.
    """
    h = cfg.inference_spacing_m
    if path_points is not None and cfg.inference_layout == "tube":
        return InferenceGrid.along_path(path_points, h, cfg.tube_radius)
    if path_points is not None:
        lo, hi = bounds_of(path_points)
    elif belief is not None:
        lo, hi = belief.inducing.bounds
    else:
        raise ValueError("need a belief or path points for the inference grid")
    return InferenceGrid.over_bounds(lo, hi, h)


def features_for(belief: GPBelief, cfg: PipelineConfig, path_points=None) -> Extraction:
    return extract_features(belief, inference_grid(cfg, belief, path_points), cfg.feature_config())


@dataclass
class RegistrationReport:
    status: str  # pass / fail / inconclusive / no-match / estimation-failed
    transform: RigidTransform | None = None
    inliers: list = field(default_factory=list)
    correspondences: int = 0
    msac_cost: float | None = None
    fitness: FitnessResult | None = None
    config: dict = field(default_factory=dict)
    seed: int = 0
    message: str = ""

    @property
    def ok(self) -> bool:
        return self.status == "pass"

    def to_dict(self) -> dict:
        return {
            "status": self.status,
            "transform": None if self.transform is None else self.transform.to_dict(),
            "inliers": list(self.inliers),
            "correspondences": self.correspondences,
            "msac_cost": self.msac_cost,
            "fitness_score": None if self.fitness is None or np.isnan(self.fitness.score) else self.fitness.score,
            "fitness_used": None if self.fitness is None else self.fitness.used,
            "config": self.config,
            "seed": self.seed,
            "message": self.message,
        }


def register(base: FeatureSet, target: FeatureSet, cfg: MsacConfig, base_belief: GPBelief | None = None,
             target_samples: MeasurementSet | None = None) -> RegistrationReport:
    """Match target features into the base map, run MSAC, then the fitness check.

    The fitness check uses ``target_samples`` (the target map's measurements)
    when given, else the target keypoints and their field vectors.
    """
    echo = cfg.to_dict()
    corrs = match_descriptors(base, target, cfg)
    if len(corrs) < 3:
        return RegistrationReport("no-match", correspondences=len(corrs), config=echo, seed=cfg.seed,
                                  message=f"{len(corrs)} correspondences below threshold")
    try:
        res = estimate_transform_msac(corrs, base, target, cfg)
    except EstimationError as exc:
        return RegistrationReport("estimation-failed", correspondences=len(corrs), config=echo, seed=cfg.seed, message=str(exc))
    ref = base_belief if base_belief is not None else base
    if target_samples is not None:
        loc, vec = target_samples.locations, target_samples.values
    else:
        loc, vec = target.locations, target.base_vectors
    fit = fitness_check(res.transform, loc, vec, ref, cfg)
    return RegistrationReport(fit.status, res.transform, res.inliers, len(corrs), res.cost, fit, echo, cfg.seed)


def relative_noise_std(scene: Scene, plan: SamplingPlan, fraction: float) -> float:
    """``fraction`` of the RMS field magnitude over the plan's points."""
    B = scene_field(scene, plan.points())
    return fraction * float(np.sqrt(np.mean(np.sum(B**2, axis=1))))


@dataclass
class TrialResult:
    report: RegistrationReport
    translation_error: float
    rotation_error: float
    base_keypoints: int
    target_keypoints: int


def run_pair_trial(scene: Scene, bounds, count: int, frame: RigidTransform, cfg: PipelineConfig, seed: int,
                   noise_fraction: float = 0.01) -> TrialResult:
    """Map the scene twice (base frame and ``frame``) with fresh noise and register.

    The truth for the recovered target-to-base transform is ``frame.inverse()``.
    """
    base_plan = SamplingPlan("uniform-random", bounds, count=count, seed=2 * seed + 1)
    targ_plan = SamplingPlan("uniform-random", bounds, count=count, seed=2 * seed + 2)
    noise = relative_noise_std(scene, base_plan, noise_fraction)
    cfg = cfg.with_updates(noise_std_t=noise)
    base_ms = sample_scene(scene, base_plan, noise)
    targ_ms = sample_scene(scene, targ_plan, noise, frame)
    base_b = build_belief(base_ms, cfg)
    targ_b = build_belief(targ_ms, cfg)
    base_fs = features_for(base_b, cfg, base_ms.locations).features
    targ_fs = features_for(targ_b, cfg, targ_ms.locations).features
    rep = register(base_fs, targ_fs, cfg.msac_config(seed), base_b, targ_ms)
    if rep.transform is None:
        terr, rerr = float("inf"), 180.0
    else:
        terr, rerr = evaluate_against_truth(rep.transform, frame.inverse())
    return TrialResult(rep, terr, rerr, len(base_fs), len(targ_fs))


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class RunManifest:
    command: str
    inputs: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    seed: int | None = None
    timing_s: dict = field(default_factory=dict)
    tool_version: str = __version__

    def add_input(self, path) -> None:
        self.inputs[str(path)] = sha256_file(path)

    @contextmanager
    def stage(self, name: str):
        t0 = time.perf_counter()
        try:
            yield
        finally:
            self.timing_s[name] = round(time.perf_counter() - t0, 6)

    def to_dict(self) -> dict:
        return {
            "tool_version": self.tool_version,
            "command": self.command,
            "inputs": self.inputs,
            "config": self.config,
            "seed": self.seed,
            "timing_s": self.timing_s,
        }
