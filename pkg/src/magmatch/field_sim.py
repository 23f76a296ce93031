"""Analytic magnetic scenes built from point dipoles.

Used to generate measurement sets and as ground truth for the GP, feature and
registration checks. Units are SI throughout: metres and tesla.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from scipy.constants import mu_0

from .geometry import RigidTransform

MU0_OVER_4PI = mu_0 / (4.0 * np.pi)
DEFAULT_CLEARANCE = 0.05
SCENE_SCHEMA_VERSION = 1
CSV_HEADER = ("t", "x", "y", "z", "bx", "by", "bz")


class SingularityError(ValueError):
    """Field requested at (or too close to) a dipole position."""


class SchemaError(ValueError):
    """Malformed scene or measurement file."""


@dataclass(frozen=True)
class Dipole:
    position: np.ndarray
    moment: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.position, dtype=float).reshape(3)
        m = np.asarray(self.moment, dtype=float).reshape(3)
        if not np.all(np.isfinite(p)) or not np.all(np.isfinite(m)):
            raise ValueError("dipole position and moment must be finite")
        if np.linalg.norm(m) <= 0:
            raise ValueError("dipole moment magnitude must be positive")
        object.__setattr__(self, "position", p)
        object.__setattr__(self, "moment", m)


@dataclass(frozen=True)
class Scene:
    dipoles: tuple[Dipole, ...] = ()
    background: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        b = np.asarray(self.background, dtype=float).reshape(3)
        object.__setattr__(self, "dipoles", tuple(self.dipoles))
        object.__setattr__(self, "background", b)
        if not self.dipoles and not np.any(b):
            raise ValueError("scene needs at least one dipole or a nonzero background")

    def transformed(self, T: RigidTransform) -> Scene:
        """The same physical scene expressed in another frame."""
        return Scene(
            tuple(Dipole(T.apply(d.position), T.rotate(d.moment)) for d in self.dipoles),
            T.rotate(self.background),
        )

    def to_dict(self) -> dict:
        return {
            "schema_version": SCENE_SCHEMA_VERSION,
            "dipoles": [
                {"position": d.position.tolist(), "moment": d.moment.tolist()} for d in self.dipoles
            ],
            "background": self.background.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> Scene:
        if d.get("schema_version") != SCENE_SCHEMA_VERSION:
            raise SchemaError(f"unsupported scene schema_version {d.get('schema_version')!r}")
        try:
            dipoles = tuple(Dipole(q["position"], q["moment"]) for q in d.get("dipoles", []))
            return cls(dipoles, d.get("background", [0.0, 0.0, 0.0]))
        except (KeyError, TypeError, ValueError) as exc:
            raise SchemaError(f"invalid scene: {exc}") from exc


def load_scene(path) -> Scene:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: {exc}") from exc
    return Scene.from_dict(data)


def save_scene(scene: Scene, path) -> None:
    Path(path).write_text(json.dumps(scene.to_dict(), indent=2) + "\n")


def _dipole_field_many(position, moment, x):
    r = np.atleast_2d(x) - position
    d = np.linalg.norm(r, axis=1)
    if np.any(d == 0.0):
        raise SingularityError("field evaluated at a dipole position")
    rhat = r / d[:, None]
    return MU0_OVER_4PI * (3.0 * rhat * (rhat @ moment)[:, None] - moment) / d[:, None] ** 3


def dipole_field(d: Dipole, x) -> np.ndarray:
    """Point-dipole flux density at ``x`` (a 3-vector or an (N, 3) array)."""
    x = np.asarray(x, dtype=float)
    out = _dipole_field_many(d.position, d.moment, x)
    return out[0] if x.ndim == 1 else out


def scene_field(s: Scene, x) -> np.ndarray:
    """Background plus the superposed dipole fields at ``x``."""
    x = np.asarray(x, dtype=float)
    pts = np.atleast_2d(x)
    out = np.broadcast_to(s.background, pts.shape).copy()
    for d in s.dipoles:
        out += _dipole_field_many(d.position, d.moment, pts)
    return out[0] if x.ndim == 1 else out


def scene_field_jacobian(s: Scene, x, step: float = 1e-6) -> np.ndarray:
    """Central-difference Jacobian ``J[..., a, i] = dB_a/dx_i`` of the scene field."""
    pts = np.atleast_2d(np.asarray(x, dtype=float))
    J = np.empty(pts.shape[:1] + (3, 3))
    for i in range(3):
        e = np.zeros(3)
        e[i] = step
        J[:, :, i] = (scene_field(s, pts + e) - scene_field(s, pts - e)) / (2 * step)
    return J[0] if np.ndim(x) == 1 else J


@dataclass(frozen=True)
class SamplingPlan:
    """Where to sample a scene.

    ``resolution`` is the grid spacing for ``regular-grid``; ``count`` the
    number of points for ``uniform-random``; ``line_spacing`` and
    ``point_spacing`` drive ``boustrophedon-path`` (lawnmower lines in each
    horizontal layer, layers ``line_spacing`` apart).
    """

    kind: str
    bounds: tuple
    resolution: float | None = None
    count: int | None = None
    line_spacing: float | None = None
    point_spacing: float | None = None
    direction: str = "horizontal"
    seed: int = 0

    KINDS = ("regular-grid", "boustrophedon-path", "uniform-random")

    def __post_init__(self):
        lo, hi = (np.asarray(b, dtype=float).reshape(3) for b in self.bounds)
        if not np.all(hi > lo):
            raise ValueError("plan bounds are degenerate")
        object.__setattr__(self, "bounds", (lo, hi))
        if self.kind not in self.KINDS:
            raise ValueError(f"unknown plan kind {self.kind!r}")
        if self.kind == "regular-grid" and not (self.resolution and self.resolution > 0):
            raise ValueError("regular-grid plan needs resolution > 0")
        if self.kind == "uniform-random" and not (self.count and self.count > 0):
            raise ValueError("uniform-random plan needs count > 0")
        if self.kind == "boustrophedon-path":
            if not (self.line_spacing and self.line_spacing > 0 and self.point_spacing and self.point_spacing > 0):
                raise ValueError("boustrophedon plan needs line_spacing and point_spacing > 0")
            if self.direction not in ("horizontal", "vertical"):
                raise ValueError("direction must be 'horizontal' or 'vertical'")

    def points(self) -> np.ndarray:
        lo, hi = self.bounds
        if self.kind == "regular-grid":
            axes = [_axis(lo[i], hi[i], self.resolution) for i in range(3)]
            g = np.meshgrid(*axes, indexing="ij")
            return np.stack([a.ravel() for a in g], axis=1)
        if self.kind == "uniform-random":
            rng = np.random.default_rng(self.seed)
            return lo + (hi - lo) * rng.random((self.count, 3))
        return self._boustrophedon()

    def _boustrophedon(self) -> np.ndarray:
        lo, hi = self.bounds
        # sweep axis a, step across lines along axis b, layers along z
        a, b = (0, 1) if self.direction == "horizontal" else (1, 0)
        along = _axis(lo[a], hi[a], self.point_spacing)
        lines = _axis(lo[b], hi[b], self.line_spacing)
        layers = _axis(lo[2], hi[2], self.line_spacing)
        pts = []
        k = 0
        for z in layers:
            for y in lines:
                seq = along if k % 2 == 0 else along[::-1]
                p = np.empty((len(seq), 3))
                p[:, a] = seq
                p[:, b] = y
                p[:, 2] = z
                pts.append(p)
                k += 1
        return np.concatenate(pts)


def _axis(lo: float, hi: float, step: float) -> np.ndarray:
    n = int(np.floor((hi - lo) / step + 1e-9)) + 1
    return lo + step * np.arange(n)


@dataclass(frozen=True)
class Measurement:
    location: np.ndarray
    value: np.ndarray
    t: int = 0


@dataclass
class MeasurementSet:
    """Column storage for a time-ordered list of measurements."""

    t: np.ndarray
    locations: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=np.int64).reshape(-1)
        self.locations = np.asarray(self.locations, dtype=float).reshape(-1, 3)
        self.values = np.asarray(self.values, dtype=float).reshape(-1, 3)
        if not (len(self.t) == len(self.locations) == len(self.values)):
            raise ValueError("measurement columns differ in length")

    def __len__(self) -> int:
        return len(self.t)

    def __getitem__(self, i) -> Measurement:
        return Measurement(self.locations[i], self.values[i], int(self.t[i]))

    def __iter__(self) -> Iterator[Measurement]:
        for i in range(len(self)):
            yield self[i]

    @classmethod
    def from_list(cls, ms: Sequence[Measurement]) -> MeasurementSet:
        return cls([m.t for m in ms], [m.location for m in ms], [m.value for m in ms])

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        buf.write(",".join(CSV_HEADER) + "\n")
        for t, p, v in zip(self.t, self.locations, self.values):
            buf.write(f"{t}," + ",".join(f"{c:.17g}" for c in (*p, *v)) + "\n")
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text


def read_measurements_csv(path) -> MeasurementSet:
    """Parse a measurement CSV; non-finite or malformed rows raise with line numbers."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != CSV_HEADER:
            raise SchemaError(f"{path}: header must be {','.join(CSV_HEADER)}")
        ts, rows, bad = [], [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                if len(row) != 7:
                    raise ValueError
                t = int(row[0])
                vals = [float(c) for c in row[1:]]
            except ValueError:
                bad.append(lineno)
                continue
            if not np.all(np.isfinite(vals)):
                bad.append(lineno)
                continue
            ts.append(t)
            rows.append(vals)
    if bad:
        raise SchemaError(f"{path}: invalid or non-finite rows at lines {bad[:20]}")
    if not rows:
        raise SchemaError(f"{path}: no measurements")
    arr = np.asarray(rows)
    return MeasurementSet(ts, arr[:, :3], arr[:, 3:])


def _check_clearance(s: Scene, lo, hi, clearance: float) -> None:
    for d in s.dipoles:
        nearest = np.clip(d.position, lo, hi)
        if np.linalg.norm(nearest - d.position) < clearance:
            raise SingularityError(
                f"plan bounds come within {clearance} m of the dipole at {d.position.tolist()}"
            )


def noise_cholesky(noise) -> np.ndarray:
    """Lower Cholesky factor of a scalar std or a full 3x3 noise covariance."""
    n = np.asarray(noise, dtype=float)
    if n.ndim == 0:
        if n < 0:
            raise ValueError("noise_std must be non-negative")
        return float(n) * np.eye(3)
    return np.linalg.cholesky(n.reshape(3, 3))


def sample_scene(
    s: Scene,
    p: SamplingPlan,
    noise_std=0.0,
    frame: RigidTransform | None = None,
    clearance: float = DEFAULT_CLEARANCE,
) -> MeasurementSet:
    """Sample ``s`` along plan ``p`` and express the result in ``frame``.

    Plan bounds are world coordinates. ``frame`` maps world coordinates into
    the map frame; both locations and field vectors are transformed. Noise is
    added in the map frame, either isotropic (scalar std) or from a 3x3
    covariance.
    """
    frame = frame or RigidTransform.identity()
    lo, hi = p.bounds
    _check_clearance(s, lo, hi, clearance)
    world = p.points()
    values = frame.rotate(scene_field(s, world))
    L = noise_cholesky(noise_std)
    if np.any(L):
        rng = np.random.default_rng([p.seed, 0x6E6F697365])
        values = values + rng.standard_normal(values.shape) @ L.T
    return MeasurementSet(np.arange(len(world)), frame.apply(world), values)


def example_scene(name: str = "desk") -> Scene:
    """Built-in scenes.

    ``desk``: a 1 m cube region centred at the origin with magnets of varying
    strength 0.3 m or more outside it; fields of a few millitesla inside.
    ``pair``: two dipoles below a 0.5 m cube at the origin, handy for small
    tests.
    """
    if name == "desk":
        dipoles = [
            Dipole([0.20, 0.15, -0.85], [0.0, 0.0, 6000.0]),
            Dipole([-0.25, -0.20, -0.80], [2250.0, 0.0, 3750.0]),
            Dipole([0.82, -0.25, 0.10], [-4500.0, 1200.0, 0.0]),
            Dipole([-0.10, 0.82, 0.20], [900.0, -3750.0, 1200.0]),
            Dipole([-0.80, 0.20, -0.25], [3000.0, 1800.0, -1800.0]),
        ]
        return Scene(tuple(dipoles), [2e-5, 0.0, -4e-5])
    if name == "pair":
        return Scene(
            (Dipole([0.0, 0.0, -0.6], [0.0, 0.0, 300.0]), Dipole([0.35, 0.25, -0.55], [150.0, -75.0, 75.0])),
            [0.0, 0.0, 0.0],
        )
    raise KeyError(name)
