"""Recursive sparse GP over the magnetic field, held at gridded inducing points.

The belief is the Gaussian (mean, cov) of the field values at the inducing
points. Every covariance with an arbitrary location is routed through the
inducing set (subset of regressors): with ``H(x) = K(x, U) K_U^{-1}``,

    prediction     b(x) = H(x) mean
    innovation     S    = H(x) cov H(x)^T + noise_cov
    cross-cov      C    = H(x) cov

and a measurement is absorbed with a Kalman step. Beliefs are immutable:
``rgp_update`` returns a new belief, so inference always sees a complete
snapshot.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import linalg

from .kernels import KernelParams, contract, gram

BELIEF_SCHEMA_VERSION = 1
JITTER_START = 1e-10
JITTER_MAX = 1e-6
# pairs evaluated per inference chunk; bounds peak memory
_CHUNK_PAIRS = 60_000


class ConfigurationError(ValueError):
    """Inducing Gram matrix could not be factorized."""


class NumericalError(ArithmeticError):
    """Innovation covariance is not positive definite."""


def grid_axis(lo: float, hi: float, spacing: float) -> np.ndarray:
    """Centred points with ``spacing`` whose span covers [lo, hi]."""
    n = max(int(math.ceil((hi - lo) / spacing - 1e-9)) + 1, 1)
    centre = 0.5 * (lo + hi)
    return centre + spacing * (np.arange(n) - 0.5 * (n - 1))


def jittered_cholesky(K: np.ndarray) -> tuple[np.ndarray, float]:
    """Lower Cholesky factor of ``K + j * mean(diag) * I``.

    ``j`` starts at 1e-10 and grows tenfold up to 1e-6.
    """
    scale = float(np.mean(np.diag(K)))
    j = JITTER_START
    while j <= JITTER_MAX * (1 + 1e-9):
        try:
            L = linalg.cholesky(K + j * scale * np.eye(len(K)), lower=True)
            return L, j
        except linalg.LinAlgError:
            j *= 10.0
    raise ConfigurationError(f"Gram matrix not positive definite with jitter up to {JITTER_MAX:g}")


@dataclass
class InducingSet:
    points: np.ndarray
    spacing: float
    shape: tuple
    gram: np.ndarray
    chol: np.ndarray
    jitter: float
    regular: bool = True

    @property
    def size(self) -> int:
        return len(self.points)

    @property
    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        return self.points.min(axis=0), self.points.max(axis=0)

    def solve(self, B: np.ndarray) -> np.ndarray:
        """K_U^{-1} B using the cached factor."""
        return linalg.cho_solve((self.chol, True), B, check_finite=False)


def make_inducing_set(points: np.ndarray, params: KernelParams, spacing: float, shape: tuple, jitter: float | None = None) -> InducingSet:
    K = gram(points, points, params)
    if jitter is None:
        L, jitter = jittered_cholesky(K)
    else:
        L = linalg.cholesky(K + jitter * np.mean(np.diag(K)) * np.eye(len(K)), lower=True)
    K = K + jitter * np.mean(np.diag(K)) * np.eye(len(K))
    return InducingSet(np.asarray(points, dtype=float), float(spacing), tuple(shape), K, L, jitter)


def inducing_grid(grid_bounds, spacing: float) -> tuple[np.ndarray, tuple]:
    lo, hi = (np.asarray(b, dtype=float).reshape(3) for b in grid_bounds)
    axes = [grid_axis(lo[i], hi[i], spacing) for i in range(3)]
    g = np.meshgrid(*axes, indexing="ij")
    return np.stack([a.ravel() for a in g], axis=1), tuple(len(a) for a in axes)


@dataclass(frozen=True)
class PredictResult:
    predicted: np.ndarray
    innovation_cov: np.ndarray
    cross_cov: np.ndarray


@dataclass
class FieldQuery:
    """Posterior field at one location.

    ``jacobian[a, i] = dB_a/dx_i``; ``second_derivs[k]`` is d2B/dx_i dx_j for
    the k-th pair of ``kernels.SECOND_PAIRS``.
    """

    location: np.ndarray
    mean: np.ndarray
    cov: np.ndarray
    jacobian: np.ndarray | None = None
    second_derivs: np.ndarray | None = None

    def second(self, i: int, j: int) -> np.ndarray:
        from .kernels import PAIR_INDEX

        return self.second_derivs[PAIR_INDEX[(i, j)]]


@dataclass
class FieldArrays:
    """Column form of many ``FieldQuery`` results."""

    locations: np.ndarray
    mean: np.ndarray
    cov: np.ndarray | None = None
    jacobian: np.ndarray | None = None
    second_derivs: np.ndarray | None = None
    prior_cov: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.locations)

    def query(self, n: int) -> FieldQuery:
        pick = lambda a: None if a is None else a[n]
        return FieldQuery(self.locations[n], self.mean[n], pick(self.cov), pick(self.jacobian), pick(self.second_derivs))


@dataclass(frozen=True)
class GPBelief:
    inducing: InducingSet
    mean: np.ndarray
    cov: np.ndarray
    params: KernelParams
    count: int = 0

    @cached_property
    def weights(self) -> np.ndarray:
        """K_U^{-1} mean, reshaped (U, 3)."""
        return self.inducing.solve(self.mean).reshape(-1, 3)


def init_belief(grid_bounds, spacing: float, params: KernelParams, near=None, near_radius: float | None = None) -> GPBelief:
    """Zero-mean belief on a regular inducing grid covering ``grid_bounds``.

    With ``near`` (an (M, 3) array) and ``near_radius``, grid points farther
    than ``near_radius`` from every row of ``near`` are dropped; the set is
    then flagged irregular.
    """
    if not spacing > 0:
        raise ValueError("inducing spacing must be positive")
    pts, shape = inducing_grid(grid_bounds, spacing)
    regular = True
    if near is not None and near_radius is not None:
        from scipy.spatial import cKDTree

        d, _ = cKDTree(np.asarray(near, dtype=float).reshape(-1, 3)).query(pts, distance_upper_bound=near_radius)
        keep = np.isfinite(d)
        regular = bool(keep.all())
        pts = pts[keep]
        if len(pts) == 0:
            raise ConfigurationError("no inducing points within near_radius of the data")
    ind = make_inducing_set(pts, params, spacing, shape)
    ind.regular = regular
    return GPBelief(ind, np.zeros(3 * ind.size), ind.gram.copy(), params, 0)


def projection(belief: GPBelief, X) -> np.ndarray:
    """H = K(X, U) K_U^{-1}, shape (3N, 3U)."""
    KuX = gram(belief.inducing.points, np.atleast_2d(X), belief.params)
    return belief.inducing.solve(KuX).T


def rgp_predict(belief: GPBelief, x) -> PredictResult:
    H = projection(belief, np.asarray(x, dtype=float).reshape(1, 3))
    cross = H @ belief.cov
    S = cross @ H.T + belief.params.noise_cov
    return PredictResult(H @ belief.mean, 0.5 * (S + S.T), cross)


def rgp_update(belief: GPBelief, m) -> GPBelief:
    """Absorb one measurement (anything with ``location`` and ``value``)."""
    return rgp_update_block(belief, np.reshape(m.location, (1, 3)), np.reshape(m.value, (1, 3)))


def rgp_update_block(belief: GPBelief, locations, values) -> GPBelief:
    """Absorb k measurements in one Kalman step.

    Noise is independent across measurements, so this equals k successive
    ``rgp_update`` calls up to rounding.
    """
    X = np.asarray(locations, dtype=float).reshape(-1, 3)
    b = np.asarray(values, dtype=float).reshape(-1)
    H = projection(belief, X)
    cross = H @ belief.cov
    S = cross @ H.T + np.kron(np.eye(len(X)), belief.params.noise_cov)
    S = 0.5 * (S + S.T)
    try:
        cS = linalg.cho_factor(S, lower=True)
    except linalg.LinAlgError as exc:
        w = np.linalg.eigvalsh(S)
        raise NumericalError(
            f"innovation covariance not positive definite near {X[0].tolist()} "
            f"(min eigenvalue {w.min():.3e}, max {w.max():.3e}, absorbed={belief.count})"
        ) from exc
    G = linalg.cho_solve(cS, cross).T  # cov H^T S^{-1}
    mean = belief.mean + G @ (b - H @ belief.mean)
    cov = belief.cov - G @ cross
    cov += cov.T
    cov *= 0.5
    return GPBelief(belief.inducing, mean, cov, belief.params, belief.count + len(X))


def absorb(belief: GPBelief, measurements, block: int = 1) -> GPBelief:
    """Absorb measurements in order, ``block`` at a time."""
    if block <= 1:
        for m in measurements:
            belief = rgp_update(belief, m)
        return belief
    locs = np.asarray(measurements.locations)
    vals = np.asarray(measurements.values)
    for s in range(0, len(locs), block):
        belief = rgp_update_block(belief, locs[s : s + block], vals[s : s + block])
    return belief


def infer_arrays(belief: GPBelief, X, cov: bool = True, derivatives: bool = False, prior: bool = False) -> FieldArrays:
    """Posterior mean (and optionally covariance and derivatives) at every row of ``X``."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    N = len(X)
    U = belief.inducing.size
    w = belief.weights
    out = FieldArrays(X, np.empty((N, 3)))
    if cov:
        out.cov = np.empty((N, 3, 3))
    if prior:
        out.prior_cov = np.empty((N, 3, 3))
    if derivatives:
        out.jacobian = np.empty((N, 3, 3))
        out.second_derivs = np.empty((N, 6, 3))
    step = max(1, _CHUNK_PAIRS // max(U, 1))
    Upts = belief.inducing.points
    for s in range(0, N, step):
        Xc = X[s : s + step]
        sl = slice(s, s + step)
        n = len(Xc)
        if cov or prior:
            W = gram(Xc, Upts, belief.params)
            out.mean[sl] = (W @ w.reshape(-1)).reshape(-1, 3)
            # H Sigma H^T with H from the factor; better conditioned than
            # K_U^{-1} Sigma K_U^{-1} on closely spaced inducing grids
            H = belief.inducing.solve(W.T).T
            if cov:
                out.cov[sl] = _block_quadratic(H @ belief.cov, H, n)
            if prior:
                out.prior_cov[sl] = _block_quadratic(W, H, n)
        else:
            out.mean[sl] = contract(Xc, Upts, belief.params, w, 0)
        if derivatives:
            out.jacobian[sl] = contract(Xc, Upts, belief.params, w, 1)
            out.second_derivs[sl] = contract(Xc, Upts, belief.params, w, 2)
    if cov:
        out.cov = 0.5 * (out.cov + out.cov.transpose(0, 2, 1))
    if prior:
        out.prior_cov = 0.5 * (out.prior_cov + out.prior_cov.transpose(0, 2, 1))
    return out


def _block_quadratic(A, B, n):
    """Per-point 3x3 blocks of A @ B.T for (3n, K) row blocks."""
    return np.einsum("nak,nbk->nab", A.reshape(n, 3, -1), B.reshape(n, 3, -1))


def rgp_infer(belief: GPBelief, x) -> FieldQuery:
    """Posterior mean and covariance at one location."""
    return infer_arrays(belief, np.asarray(x, dtype=float).reshape(1, 3)).query(0)


def infer_derivatives(belief: GPBelief, x) -> FieldQuery:
    """Mean, covariance, Jacobian and second derivatives at one location."""
    return infer_arrays(belief, np.asarray(x, dtype=float).reshape(1, 3), derivatives=True).query(0)


def batch_infer(belief: GPBelief, points: Sequence, derivatives: bool = False) -> list[FieldQuery]:
    """Elementwise ``rgp_infer`` (or ``infer_derivatives``) over ``points``."""
    X = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(X) == 0:
        raise ValueError("batch_infer needs at least one point")
    arr = infer_arrays(belief, X, derivatives=derivatives)
    return [arr.query(n) for n in range(len(X))]


def belief_to_dict(belief: GPBelief) -> dict:
    ind = belief.inducing
    return {
        "schema_version": BELIEF_SCHEMA_VERSION,
        "params": belief.params.to_dict(),
        "inducing": {
            "points": ind.points.ravel().tolist(),
            "spacing": ind.spacing,
            "shape": list(ind.shape),
            "jitter": ind.jitter,
            "regular": ind.regular,
        },
        "count": belief.count,
        "mean": belief.mean.tolist(),
        "cov": belief.cov.ravel().tolist(),
    }


def belief_from_dict(d: dict) -> GPBelief:
    if d.get("schema_version") != BELIEF_SCHEMA_VERSION:
        raise ValueError(f"unsupported belief schema_version {d.get('schema_version')!r}")
    params = KernelParams.from_dict(d["params"])
    ind = d["inducing"]
    pts = np.asarray(ind["points"], dtype=float).reshape(-1, 3)
    inducing = make_inducing_set(pts, params, ind["spacing"], tuple(ind["shape"]), jitter=ind["jitter"])
    inducing.regular = bool(ind.get("regular", True))
    n = 3 * len(pts)
    return GPBelief(
        inducing,
        np.asarray(d["mean"], dtype=float),
        np.asarray(d["cov"], dtype=float).reshape(n, n),
        params,
        int(d["count"]),
    )


def save_belief(belief: GPBelief, path) -> None:
    # json writes repr() floats, which round-trip doubles exactly
    Path(path).write_text(json.dumps(belief_to_dict(belief)) + "\n")


def load_belief(path) -> GPBelief:
    return belief_from_dict(json.loads(Path(path).read_text()))
