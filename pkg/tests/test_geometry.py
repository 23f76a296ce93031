import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from magmatch.geometry import (
    RigidTransform,
    is_rotation,
    project_to_rotation,
    random_rotation,
    rotation_about,
    rotation_angle_deg,
)


def test_rotation_about_z_quarter_turn():
    np.testing.assert_allclose(rotation_about("z", 90) @ [1.0, 0, 0], [0, 1.0, 0], atol=1e-15)


@given(st.integers(0, 10_000))
@settings(max_examples=50, deadline=None)
def test_random_rotation_is_proper(seed):
    R = random_rotation(np.random.default_rng(seed))
    assert is_rotation(R)


def test_angle_of_axis_rotation():
    for deg in (0.0, 10.0, 90.0, 179.0):
        assert rotation_angle_deg(rotation_about([1.0, 2.0, 3.0], deg)) == pytest.approx(deg, abs=1e-6)


def test_project_to_rotation_fixes_reflections():
    M = np.diag([1.0, 1.0, -1.0]) + 1e-3
    assert is_rotation(project_to_rotation(M))


def test_inverse_and_compose():
    rng = np.random.default_rng(0)
    T = RigidTransform(random_rotation(rng), rng.normal(size=3))
    S = RigidTransform(random_rotation(rng), rng.normal(size=3))
    p = rng.normal(size=(5, 3))
    np.testing.assert_allclose(T.inverse().apply(T.apply(p)), p, atol=1e-14)
    np.testing.assert_allclose(T.compose(S).apply(p), T.apply(S.apply(p)), atol=1e-14)
    np.testing.assert_allclose(T.compose(S).as_matrix(), T.as_matrix() @ S.as_matrix(), atol=1e-14)
    np.testing.assert_allclose(T.rotate(p), p @ T.rotation.T)


def test_rejects_improper_rotation():
    with pytest.raises(ValueError):
        RigidTransform(np.diag([1.0, 1.0, -1.0]))
    with pytest.raises(ValueError):
        RigidTransform(np.eye(3), [np.nan, 0, 0])


def test_dict_round_trip_is_exact():
    rng = np.random.default_rng(1)
    T = RigidTransform(random_rotation(rng), rng.normal(size=3))
    U = RigidTransform.from_dict(T.to_dict())
    assert np.array_equal(U.rotation, T.rotation) and np.array_equal(U.translation, T.translation)
