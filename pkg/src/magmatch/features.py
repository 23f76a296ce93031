"""Keypoints, local reference frames and HOV descriptors on an inferred field.

Pipeline: evaluate the posterior (mean, covariance, derivatives) on an
inference grid, score each point by the determinant of the Hessian of the
field norm, keep high-curvature low-variance points, then describe each one
by histograms of the support-region vectors expressed in its local frame.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .gp.kernels import PAIR_INDEX, SECOND_PAIRS
from .gp.rgp import FieldArrays, FieldQuery, GPBelief, grid_axis, infer_arrays

FEATURES_SCHEMA_VERSION = 1
DESCRIPTOR_LENGTH = 90
EPS_NORM = 1e-12
EPS_X = 1e-9
GAUSS = 1e-4  # tesla


class DegenerateFieldError(ValueError):
    """Field norm too small for a Hessian of the norm."""


class DegenerateLRFError(ValueError):
    """Support vectors have no usable component perpendicular to the base vector."""


@dataclass(frozen=True)
class FeatureConfig:
    support_multiplier: float = 4.0
    variance_quantile: float = 0.75
    azimuth_bins: int = 20
    elevation_bins: int = 10
    component_range: float = 100 * GAUSS
    component_bin: float = 10 * GAUSS
    angle_weighting: str = "magnitude"  # or "count"
    component_weighting: str = "count"  # or "magnitude"
    lrf_sigma_ratio: float = 0.5
    # curvature floor on |DoH| l^6 / |B|^3; keeps GP ripple in flat fields out
    min_doh_ratio: float = 1.0
    eps_norm: float = EPS_NORM
    eps_x: float = EPS_X

    def __post_init__(self):
        if self.support_multiplier <= 0 or self.component_range <= 0 or self.component_bin <= 0:
            raise ValueError("support multiplier and histogram ranges must be positive")
        if self.min_doh_ratio < 0:
            raise ValueError("min_doh_ratio must be non-negative")
        if not 0.0 < self.variance_quantile <= 1.0:
            raise ValueError("variance_quantile must be in (0, 1]")
        if self.angle_weighting not in ("magnitude", "count") or self.component_weighting not in ("magnitude", "count"):
            raise ValueError("weighting must be 'magnitude' or 'count'")

    @property
    def component_bins(self) -> int:
        return int(round(2 * self.component_range / self.component_bin))

    @property
    def descriptor_length(self) -> int:
        return self.azimuth_bins + self.elevation_bins + 3 * self.component_bins


# -- inference grid -----------------------------------------------------------


@dataclass
class InferenceGrid:
    """Regular lattice points ``origin + spacing * index``."""

    origin: np.ndarray
    spacing: float
    index: np.ndarray  # (N, 3) int
    layout: str = "grid"
    radius: float | None = None

    def __post_init__(self):
        if not self.spacing > 0:
            raise ValueError("grid spacing must be positive")
        self.origin = np.asarray(self.origin, dtype=float).reshape(3)
        self.index = np.unique(np.asarray(self.index, dtype=np.int64).reshape(-1, 3), axis=0)

    @property
    def points(self) -> np.ndarray:
        return self.origin + self.spacing * self.index

    def __len__(self) -> int:
        return len(self.index)

    @classmethod
    def over_bounds(cls, lo, hi, spacing: float) -> InferenceGrid:
        lo, hi = np.asarray(lo, dtype=float), np.asarray(hi, dtype=float)
        n = [int(np.floor((hi[i] - lo[i]) / spacing + 1e-9)) + 1 for i in range(3)]
        # centre the lattice inside the box
        origin = 0.5 * (lo + hi) - 0.5 * spacing * (np.asarray(n) - 1)
        g = np.meshgrid(*[np.arange(k) for k in n], indexing="ij")
        return cls(origin, spacing, np.stack([a.ravel() for a in g], axis=1), "grid")

    @classmethod
    def along_path(cls, path_points, spacing: float, radius: float) -> InferenceGrid:
        """Lattice points within ``radius`` of any path point."""
        P = np.asarray(path_points, dtype=float).reshape(-1, 3)
        base = cls.over_bounds(P.min(axis=0) - radius, P.max(axis=0) + radius, spacing)
        d, _ = cKDTree(P).query(base.points, distance_upper_bound=radius * (1 + 1e-12))
        return cls(base.origin, spacing, base.index[np.isfinite(d)], "tube", radius)


def bounds_of(points, margin: float = 0.0):
    P = np.asarray(points, dtype=float).reshape(-1, 3)
    return P.min(axis=0) - margin, P.max(axis=0) + margin


# -- Hessian of the norm ----------------------------------------------------


def hessian_of_norm_many(mean, jacobian, second_derivs, eps_norm: float = EPS_NORM):
    """Vectorised Hessian of |B|; returns (H (N,3,3), valid mask)."""
    B = np.asarray(mean)
    J = np.asarray(jacobian)  # J[n, a, i]
    S = np.asarray(second_derivs)  # S[n, k, a]
    n = np.linalg.norm(B, axis=1)
    valid = n > eps_norm
    nn = np.where(valid, n, 1.0)
    g = np.einsum("na,nai->ni", B, J)  # B . dB/dx_i
    JJ = np.einsum("nai,naj->nij", J, J)
    BS = np.einsum("na,nka->nk", B, S)
    full = np.empty_like(JJ)
    for k, (i, j) in enumerate(SECOND_PAIRS):
        full[:, i, j] = BS[:, k]
        full[:, j, i] = BS[:, k]
    H = (JJ + full) / nn[:, None, None] - g[:, :, None] * g[:, None, :] / nn[:, None, None] ** 3
    H = 0.5 * (H + H.transpose(0, 2, 1))
    H[~valid] = np.nan
    return H, valid


def hessian_of_norm(sample: FieldQuery, eps_norm: float = EPS_NORM) -> np.ndarray:
    """Hessian of the field norm at one posterior sample."""
    H, ok = hessian_of_norm_many(sample.mean[None], sample.jacobian[None], sample.second_derivs[None], eps_norm)
    if not ok[0]:
        raise DegenerateFieldError(f"field norm {np.linalg.norm(sample.mean):.3e} below {eps_norm:g}")
    return H[0]


def doh(H) -> float:
    """Determinant of a Hessian."""
    return float(np.linalg.det(np.asarray(H, dtype=float)))


# -- samples and keypoints ----------------------------------------------------


@dataclass
class FieldSamples:
    """Posterior quantities over an inference grid (column form)."""

    locations: np.ndarray
    mean: np.ndarray
    cov: np.ndarray
    jacobian: np.ndarray
    second_derivs: np.ndarray
    norm: np.ndarray
    hessian: np.ndarray
    doh: np.ndarray
    variance: np.ndarray
    valid: np.ndarray
    grid_index: np.ndarray | None = None

    def __len__(self):
        return len(self.locations)


def evaluate_samples(belief: GPBelief, points, eps_norm: float = EPS_NORM, grid_index=None) -> FieldSamples:
    fa = infer_arrays(belief, points, cov=True, derivatives=True)
    return samples_from_arrays(fa, eps_norm, grid_index)


def samples_from_arrays(fa: FieldArrays, eps_norm: float = EPS_NORM, grid_index=None) -> FieldSamples:
    H, valid = hessian_of_norm_many(fa.mean, fa.jacobian, fa.second_derivs, eps_norm)
    d = np.full(len(fa), np.nan)
    d[valid] = np.linalg.det(H[valid])
    return FieldSamples(
        fa.locations,
        fa.mean,
        fa.cov,
        fa.jacobian,
        fa.second_derivs,
        np.linalg.norm(fa.mean, axis=1),
        H,
        d,
        np.trace(fa.cov, axis1=1, axis2=2),
        valid,
        grid_index,
    )


@dataclass
class Keypoint:
    location: np.ndarray
    doh: float
    variance_score: float
    base_vector: np.ndarray
    lrf: np.ndarray | None = None
    sample_index: int = -1


def select_keypoint_indices(doh_values, variance, variance_quantile: float = 0.75, valid=None, floor=0.0) -> np.ndarray:
    """Indices with |DoH| strictly above the mean |DoH|, then the low-variance part.

    Invalid samples (NaN DoH) take no part in either statistic. ``floor``
    (scalar or per sample) is a minimum |DoH| applied on top of the mean test.
    """
    a = np.abs(np.asarray(doh_values, dtype=float))
    var = np.asarray(variance, dtype=float)
    ok = np.isfinite(a) if valid is None else (np.asarray(valid, bool) & np.isfinite(a))
    if not np.any(ok):
        return np.zeros(0, dtype=np.int64)
    keep = np.flatnonzero(ok & (a > a[ok].mean()) & (a > floor))
    if len(keep) == 0:
        return keep
    cap = np.quantile(var[keep], variance_quantile)
    return keep[var[keep] <= cap]


def doh_floor(samples: FieldSamples, lengthscale: float, ratio: float) -> np.ndarray:
    """Per-sample |DoH| floor ``ratio * (|B| / l^2)^3``."""
    return ratio * (samples.norm / lengthscale**2) ** 3


def select_keypoints(samples: FieldSamples, variance_quantile: float = 0.75, floor=0.0) -> list[Keypoint]:
    """Keypoint candidates (LRF not yet attached)."""
    idx = select_keypoint_indices(samples.doh, samples.variance, variance_quantile, samples.valid, floor)
    return [
        Keypoint(samples.locations[i].copy(), float(samples.doh[i]), float(samples.variance[i]), samples.mean[i].copy(), None, int(i))
        for i in idx
    ]


# -- support region, LRF, descriptor -------------------------------------------


@dataclass
class SupportRegion:
    centre: np.ndarray
    radius: float
    subpoints: np.ndarray
    vectors: np.ndarray
    weights: np.ndarray


def support_offsets(spacing: float, multiplier: float = 4.0) -> np.ndarray:
    """Integer lattice offsets inside the support sphere, centre excluded."""
    k = int(np.floor(multiplier + 1e-9))
    r = np.arange(-k, k + 1)
    g = np.stack([a.ravel() for a in np.meshgrid(r, r, r, indexing="ij")], axis=1)
    d2 = np.sum(g**2, axis=1)
    return g[(d2 > 0) & (d2 <= multiplier**2 + 1e-9)]


def gaussian_weights(distances, radius: float, sigma_ratio: float = 0.5) -> np.ndarray:
    sigma = sigma_ratio * radius
    return np.exp(-0.5 * (np.asarray(distances) / sigma) ** 2)


def _field_source(source) -> Callable[[np.ndarray], np.ndarray]:
    if isinstance(source, GPBelief):
        return lambda X: infer_arrays(source, X, cov=False).mean
    return lambda X: np.atleast_2d(source(np.atleast_2d(X)))


def make_support(centre, spacing: float, source, cfg: FeatureConfig = FeatureConfig(), subpoints=None) -> SupportRegion:
    """Support region around ``centre``.

    ``source`` is a belief or any callable mapping (N, 3) locations to field
    vectors. ``subpoints`` overrides the default lattice ball.
    """
    centre = np.asarray(centre, dtype=float).reshape(3)
    radius = cfg.support_multiplier * spacing
    if subpoints is None:
        subpoints = centre + spacing * support_offsets(spacing, cfg.support_multiplier)
    subpoints = np.asarray(subpoints, dtype=float).reshape(-1, 3)
    vectors = _field_source(source)(subpoints)
    w = gaussian_weights(np.linalg.norm(subpoints - centre, axis=1), radius, cfg.lrf_sigma_ratio)
    return SupportRegion(centre, radius, subpoints, vectors, w)


def lrf_from_vectors(base_vector, vectors, weights, eps_norm: float = EPS_NORM, eps_x: float = EPS_X) -> np.ndarray:
    """Rows are the LRF x, y, z axes in map coordinates."""
    b = np.asarray(base_vector, dtype=float)
    nb = np.linalg.norm(b)
    if nb <= eps_norm:
        raise DegenerateLRFError("base vector norm too small")
    z = b / nb
    V = np.asarray(vectors, dtype=float)
    proj = V - np.outer(V @ z, z)
    s = np.asarray(weights, dtype=float) @ proj
    ns = np.linalg.norm(s)
    if ns < eps_x:
        raise DegenerateLRFError(f"projected support sum {ns:.3e} below {eps_x:g}")
    x = s / ns
    x = x - (x @ z) * z
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    return np.stack([x, y, z])


def build_lrf(kp_location, source, support: SupportRegion, cfg: FeatureConfig = FeatureConfig()) -> np.ndarray:
    """LRF at a keypoint: z along the local field, x along the weighted projected support sum."""
    b = _field_source(source)(np.asarray(kp_location, dtype=float).reshape(1, 3))[0]
    return lrf_from_vectors(b, support.vectors, support.weights, cfg.eps_norm, cfg.eps_x)


@dataclass
class HovDescriptor:
    azimuth_hist: np.ndarray
    elevation_hist: np.ndarray
    comp_hist_x: np.ndarray
    comp_hist_y: np.ndarray
    comp_hist_z: np.ndarray

    @property
    def as_vector(self) -> np.ndarray:
        return np.concatenate(
            [self.azimuth_hist, self.elevation_hist, self.comp_hist_x, self.comp_hist_y, self.comp_hist_z]
        )


def _unit(h):
    n = np.linalg.norm(h)
    return h / n if n > 0 else h


def hov_from_vectors(lrf, vectors, cfg: FeatureConfig = FeatureConfig()) -> HovDescriptor:
    """Histograms of support vectors expressed in the LRF; each block L2-normalised."""
    V = np.asarray(vectors, dtype=float).reshape(-1, 3)
    if len(V) == 0:
        raise ValueError("empty support region")
    L = V @ np.asarray(lrf).T  # components in the LRF
    mag = np.linalg.norm(L, axis=1)
    horiz = np.hypot(L[:, 0], L[:, 1])
    angle_w = mag if cfg.angle_weighting == "magnitude" else np.ones(len(L))

    na, ne = cfg.azimuth_bins, cfg.elevation_bins
    az = np.degrees(np.arctan2(L[:, 1], L[:, 0]))
    az_bin = np.floor((az + 180.0) / (360.0 / na)).astype(int) % na  # +180 wraps to -180
    has_az = horiz >= cfg.eps_x
    az_hist = np.bincount(az_bin[has_az], weights=angle_w[has_az], minlength=na).astype(float)

    el = np.degrees(np.arctan2(L[:, 2], horiz))
    el_bin = np.clip(np.floor((el + 90.0) / (180.0 / ne)).astype(int), 0, ne - 1)
    has_el = mag > 0
    el_hist = np.bincount(el_bin[has_el], weights=angle_w[has_el], minlength=ne).astype(float)

    nc = cfg.component_bins
    comps = []
    for a in range(3):
        v = L[:, a]
        b = np.floor((v + cfg.component_range) / cfg.component_bin).astype(int)
        inside = (v >= -cfg.component_range) & (v < cfg.component_range) & (b >= 0) & (b < nc)
        w = np.abs(v) if cfg.component_weighting == "magnitude" else np.ones(len(v))
        comps.append(np.bincount(b[inside], weights=w[inside], minlength=nc).astype(float))

    return HovDescriptor(_unit(az_hist), _unit(el_hist), *(_unit(c) for c in comps))


def hov_descriptor(kp: Keypoint, support: SupportRegion, cfg: FeatureConfig = FeatureConfig()) -> HovDescriptor:
    if kp.lrf is None:
        raise ValueError("keypoint has no LRF")
    return hov_from_vectors(kp.lrf, support.vectors, cfg)


# -- feature extraction -----------------------------------------------------


@dataclass
class FeatureSet:
    keypoints: list[Keypoint]
    descriptors: np.ndarray  # (K, D)
    spacing: float
    params_hash: str = ""
    unit_system: str = "SI"
    discarded: int = 0

    def __len__(self):
        return len(self.keypoints)

    @property
    def locations(self) -> np.ndarray:
        return np.array([k.location for k in self.keypoints]).reshape(-1, 3)

    @property
    def base_vectors(self) -> np.ndarray:
        return np.array([k.base_vector for k in self.keypoints]).reshape(-1, 3)

    def to_dict(self) -> dict:
        return {
            "header": {
                "schema_version": FEATURES_SCHEMA_VERSION,
                "grid_spacing": self.spacing,
                "kernel_params_hash": self.params_hash,
                "unit_system": self.unit_system,
                "count": len(self.keypoints),
                "discarded_degenerate": self.discarded,
            },
            "keypoints": [
                {
                    "location": k.location.tolist(),
                    "doh": k.doh,
                    "variance": k.variance_score,
                    "base_vector": k.base_vector.tolist(),
                    "lrf": k.lrf.ravel().tolist(),
                    "descriptor": d.tolist(),
                }
                for k, d in zip(self.keypoints, self.descriptors)
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> FeatureSet:
        h = d["header"]
        if h.get("schema_version") != FEATURES_SCHEMA_VERSION:
            raise ValueError(f"unsupported feature schema_version {h.get('schema_version')!r}")
        kps, desc = [], []
        for e in d["keypoints"]:
            kps.append(
                Keypoint(
                    np.asarray(e["location"], dtype=float),
                    float(e["doh"]),
                    float(e["variance"]),
                    np.asarray(e["base_vector"], dtype=float),
                    np.asarray(e["lrf"], dtype=float).reshape(3, 3),
                )
            )
            desc.append(e["descriptor"])
        D = np.asarray(desc, dtype=float).reshape(len(kps), -1) if kps else np.zeros((0, DESCRIPTOR_LENGTH))
        return cls(kps, D, float(h["grid_spacing"]), h.get("kernel_params_hash", ""), h.get("unit_system", "SI"), int(h.get("discarded_degenerate", 0)))


def save_features(fs: FeatureSet, path) -> None:
    Path(path).write_text(json.dumps(fs.to_dict()) + "\n")


def load_features(path) -> FeatureSet:
    return FeatureSet.from_dict(json.loads(Path(path).read_text()))


def params_hash(belief: GPBelief) -> str:
    blob = json.dumps(belief.params.to_dict(), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class Extraction:
    features: FeatureSet
    samples: FieldSamples
    grid: InferenceGrid


def extract_features(belief: GPBelief, grid: InferenceGrid, cfg: FeatureConfig = FeatureConfig()) -> Extraction:
    """Score ``grid``, pick keypoints, and describe them.

    Support subpoints are lattice points of ``grid``'s own lattice, so the
    field over all supports is inferred once for the union of their indices.
    Keypoints whose LRF is degenerate are dropped and counted.
    """
    samples = evaluate_samples(belief, grid.points, cfg.eps_norm, grid.index)
    floor = doh_floor(samples, belief.params.lengthscale, cfg.min_doh_ratio)
    cands = select_keypoints(samples, cfg.variance_quantile, floor)
    h = grid.spacing
    offs = support_offsets(h, cfg.support_multiplier)
    radius = cfg.support_multiplier * h
    w = gaussian_weights(h * np.linalg.norm(offs, axis=1), radius, cfg.lrf_sigma_ratio)

    if cands:
        kidx = grid.index[[k.sample_index for k in cands]]
        sup_idx = (kidx[:, None, :] + offs[None, :, :]).reshape(-1, 3)
        uniq, inv = np.unique(sup_idx, axis=0, return_inverse=True)
        vec = infer_arrays(belief, grid.origin + h * uniq, cov=False).mean
        sup_vec = vec[inv.reshape(-1)].reshape(len(cands), len(offs), 3)

    kps, desc, dropped = [], [], 0
    for n, kp in enumerate(cands):
        try:
            kp.lrf = lrf_from_vectors(kp.base_vector, sup_vec[n], w, cfg.eps_norm, cfg.eps_x)
        except DegenerateLRFError:
            dropped += 1
            continue
        kps.append(kp)
        desc.append(hov_from_vectors(kp.lrf, sup_vec[n], cfg).as_vector)
    D = np.asarray(desc).reshape(len(kps), cfg.descriptor_length)
    return Extraction(FeatureSet(kps, D, h, params_hash(belief), "SI", dropped), samples, grid)
