"""Descriptor matching and vector-augmented MSAC registration.

The recovered transform maps target-map coordinates into the base map:
``p_base ≈ R @ p_target + t``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.spatial import cKDTree
from scipy.spatial.distance import cdist

from .features import FeatureSet
from .geometry import RigidTransform, project_to_rotation, rotation_angle_deg
from .gp.rgp import GPBelief, infer_arrays


class EstimationError(RuntimeError):
    """Too few or only degenerate correspondences."""


@dataclass(frozen=True)
class Correspondence:
    base_index: int
    target_index: int
    distance: float


@dataclass(frozen=True)
class MsacConfig:
    """MSAC and fitness settings.

    ``truncation_cost`` defaults to ``inlier_distance_radius**2`` and
    ``vector_weight`` to half of that, keeping the position and vector terms
    commensurate.
    """

    match_distance_threshold: float = 0.5
    iterations: int = 1000
    inlier_distance_radius: float = 0.1
    truncation_cost: float | None = None
    vector_weight: float | None = None
    fitness_threshold: float = 0.2
    ratio_test: float | None = None
    variance_cap_ratio: float = 0.5
    min_valid_fraction: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        for name in ("match_distance_threshold", "inlier_distance_radius", "fitness_threshold"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.inlier_distance_radius == 0:
            raise ValueError("inlier_distance_radius must be positive")

    @property
    def truncation(self) -> float:
        return self.truncation_cost if self.truncation_cost is not None else self.inlier_distance_radius**2

    @property
    def lam(self) -> float:
        return self.vector_weight if self.vector_weight is not None else 0.5 * self.inlier_distance_radius**2

    def to_dict(self) -> dict:
        return asdict(self)


def _descriptors(fs) -> np.ndarray:
    return fs.descriptors if isinstance(fs, FeatureSet) else np.asarray(fs, dtype=float)


def match_descriptors(base, target, cfg: MsacConfig = MsacConfig()) -> list[Correspondence]:
    """One-way nearest neighbour from each target descriptor into the base set."""
    Db, Dt = _descriptors(base), _descriptors(target)
    if len(Db) == 0 or len(Dt) == 0:
        return []
    out = []
    for s in range(0, len(Dt), 512):
        d = cdist(Dt[s : s + 512], Db)
        j = np.argmin(d, axis=1)  # first index on ties
        best = d[np.arange(len(j)), j]
        if cfg.ratio_test is not None and d.shape[1] > 1:
            d2 = d.copy()
            d2[np.arange(len(j)), j] = np.inf
            second = d2.min(axis=1)
            keep_ratio = best <= cfg.ratio_test * second
        else:
            keep_ratio = np.ones(len(j), bool)
        for k in np.flatnonzero((best <= cfg.match_distance_threshold) & keep_ratio):
            out.append(Correspondence(int(j[k]), s + int(k), float(best[k])))
    return out


def kabsch(src: np.ndarray, dst: np.ndarray, weights=None) -> RigidTransform:
    """Least-squares rigid transform with ``dst ≈ R @ src + t``."""
    src = np.asarray(src, dtype=float)
    dst = np.asarray(dst, dtype=float)
    w = np.ones(len(src)) if weights is None else np.asarray(weights, dtype=float)
    w = w / w.sum()
    cs, cd = w @ src, w @ dst
    Hm = (src - cs).T @ ((dst - cd) * w[:, None])
    U, _, Vt = np.linalg.svd(Hm)
    d = np.sign(np.linalg.det(Vt.T @ U.T))
    R = Vt.T @ np.diag([1.0, 1.0, d]) @ U.T
    R = project_to_rotation(R)
    return RigidTransform(R, cd - R @ cs)


def _degenerate(P: np.ndarray, rel: float = 1e-6) -> bool:
    s = np.linalg.svd(P - P.mean(axis=0), compute_uv=False)
    return s[0] <= 0 or s[1] <= rel * s[0]


def _unit_rows(V):
    n = np.linalg.norm(V, axis=1, keepdims=True)
    return V / np.where(n > 0, n, 1.0)


@dataclass
class MsacResult:
    transform: RigidTransform
    inliers: list[int]
    cost: float
    iterations_valid: int


def correspondence_costs(T: RigidTransform, pb, pt, vb, vt, cfg: MsacConfig) -> tuple[np.ndarray, np.ndarray]:
    """Truncated point cost plus weighted cross-product term, per correspondence."""
    d2 = np.sum((T.apply(pt) - pb) ** 2, axis=1)
    cross = np.linalg.norm(np.cross(T.rotate(vt), vb), axis=1)
    return np.minimum(d2, cfg.truncation) + cfg.lam * cross, d2


def _points_and_vectors(kps):
    if isinstance(kps, FeatureSet):
        return kps.locations, kps.base_vectors
    loc, vec = kps
    return np.asarray(loc, dtype=float).reshape(-1, 3), np.asarray(vec, dtype=float).reshape(-1, 3)


def estimate_transform_msac(correspondences, base, target, cfg: MsacConfig = MsacConfig()) -> MsacResult:
    """Robust target-to-base transform from correspondences.

    ``base`` and ``target`` are feature sets or ``(locations, vectors)``
    pairs; vectors are the field at each keypoint.
    """
    C = list(correspondences)
    if len(C) < 3:
        raise EstimationError(f"need at least 3 correspondences, got {len(C)}")
    bi = np.array([c.base_index for c in C])
    ti = np.array([c.target_index for c in C])
    base_loc, base_vec = _points_and_vectors(base)
    targ_loc, targ_vec = _points_and_vectors(target)
    pb, pt = base_loc[bi], targ_loc[ti]
    vb, vt = _unit_rows(base_vec[bi]), _unit_rows(targ_vec[ti])

    rng = np.random.default_rng(cfg.seed)
    n = len(C)
    best_cost, best_T, valid = np.inf, None, 0
    for _ in range(cfg.iterations):
        s = rng.choice(n, 3, replace=False)
        if _degenerate(pt[s]) or _degenerate(pb[s]):
            continue
        valid += 1
        T = kabsch(pt[s], pb[s])
        cost = float(correspondence_costs(T, pb, pt, vb, vt, cfg)[0].sum())
        if cost < best_cost:
            best_cost, best_T = cost, T
    if best_T is None:
        raise EstimationError("every sampled triple was degenerate (collinear)")

    T, cost = best_T, best_cost
    for _ in range(5):
        _, d2 = correspondence_costs(T, pb, pt, vb, vt, cfg)
        inl = np.flatnonzero(d2 < cfg.inlier_distance_radius**2)
        if len(inl) < 3 or _degenerate(pt[inl]):
            break
        T_new = kabsch(pt[inl], pb[inl])
        cost_new = float(correspondence_costs(T_new, pb, pt, vb, vt, cfg)[0].sum())
        if cost_new > cost:
            break
        T, cost = T_new, cost_new
    _, d2 = correspondence_costs(T, pb, pt, vb, vt, cfg)
    inliers = [int(k) for k in np.flatnonzero(d2 < cfg.inlier_distance_radius**2)]
    return MsacResult(T, inliers, cost, valid)


@dataclass
class FitnessResult:
    status: str  # "pass", "fail" or "inconclusive"
    score: float
    used: int
    total: int

    @property
    def passed(self) -> bool:
        return self.status == "pass"


def fitness_check(T: RigidTransform, target_locations, target_vectors, base, cfg: MsacConfig = MsacConfig()) -> FitnessResult:
    """Mean |unit(R v_t) x unit(v_b)| over target samples moved into the base map.

    ``base`` is a belief (preferred) or a base ``FeatureSet``. With a belief,
    samples whose base posterior variance exceeds ``variance_cap_ratio`` of
    the prior variance are unusable; with a feature set, samples with no base
    keypoint within the inlier radius are. Too few usable samples gives an
    inconclusive result.
    """
    P = T.apply(np.asarray(target_locations, dtype=float).reshape(-1, 3))
    V = _unit_rows(T.rotate(np.asarray(target_vectors, dtype=float).reshape(-1, 3)))
    if isinstance(base, GPBelief):
        fa = infer_arrays(base, P, cov=True, prior=True)
        ratio = np.trace(fa.cov, axis1=1, axis2=2) / np.maximum(np.trace(fa.prior_cov, axis1=1, axis2=2), 1e-300)
        usable = ratio <= cfg.variance_cap_ratio
        Vb = fa.mean
    else:
        if len(base) == 0:
            return FitnessResult("inconclusive", float("nan"), 0, len(P))
        d, j = cKDTree(base.locations).query(P)
        usable = d <= cfg.inlier_distance_radius
        Vb = base.base_vectors[j]
    Vb = _unit_rows(Vb)
    used = int(usable.sum())
    if len(P) == 0 or used < cfg.min_valid_fraction * len(P) or used == 0:
        return FitnessResult("inconclusive", float("nan"), used, len(P))
    score = float(np.mean(np.linalg.norm(np.cross(V[usable], Vb[usable]), axis=1)))
    return FitnessResult("pass" if score <= cfg.fitness_threshold else "fail", score, used, len(P))


def evaluate_against_truth(estimate: RigidTransform, truth: RigidTransform) -> tuple[float, float]:
    """(translation error in metres, rotation error in degrees).

    Translation error is ``|t_est - t_true|``; rotation error is the geodesic
    angle of ``R_est^T R_true``.
    """
    terr = float(np.linalg.norm(estimate.translation - truth.translation))
    rerr = rotation_angle_deg(estimate.rotation.T @ truth.rotation)
    return terr, rerr


@dataclass
class TrialSummary:
    translation_rmse: float
    translation_std: float
    rotation_rmse: float
    rotation_std: float
    trials: int

    def table_row(self) -> str:
        return (
            f"{self.translation_rmse:.4f} m ± {self.translation_std:.4f} "
            f"{self.rotation_rmse:.4f}° ± {self.rotation_std:.4f}"
        )


def summarize_trials(errors) -> TrialSummary:
    """RMSE and standard deviation of per-trial (translation, rotation) errors."""
    E = np.asarray(errors, dtype=float).reshape(-1, 2)
    rmse = np.sqrt(np.mean(E**2, axis=0))
    std = np.std(E, axis=0)
    return TrialSummary(float(rmse[0]), float(std[0]), float(rmse[1]), float(std[1]), len(E))
