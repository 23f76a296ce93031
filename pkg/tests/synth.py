"""Synthetic correspondence sets with known ground truth."""

import numpy as np

from magmatch.geometry import RigidTransform, random_rotation, rotation_about
from magmatch.registration import Correspondence


def correspondence_set(seed, n=60, outlier_fraction=0.3, truth=None, extent=1.0):
    """Returns (correspondences, base (loc, vec), target (loc, vec), truth, outlier mask).

    ``truth`` maps target coordinates into the base frame. Outliers point at a
    random wrong base keypoint.
    """
    rng = np.random.default_rng(seed)
    if truth is None:
        truth = RigidTransform(random_rotation(rng), rng.uniform(-0.2, 0.2, 3))
    targ_loc = rng.uniform(-extent / 2, extent / 2, size=(n, 3))
    targ_vec = rng.normal(size=(n, 3)) * 1e-4
    base_loc = truth.apply(targ_loc)
    base_vec = truth.rotate(targ_vec)
    idx = np.arange(n)
    bad = rng.random(n) < outlier_fraction
    idx[bad] = (idx[bad] + rng.integers(1, n, size=bad.sum())) % n
    corrs = [Correspondence(int(b), int(t), 0.0) for t, b in enumerate(idx)]
    return corrs, (base_loc, base_vec), (targ_loc, targ_vec), truth, bad


def z30(translation=(0.1, -0.05, 0.02)):
    return RigidTransform(rotation_about("z", 30), np.asarray(translation, dtype=float))
