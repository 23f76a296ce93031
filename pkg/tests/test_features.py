import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from magmatch.features import (
    DESCRIPTOR_LENGTH,
    GAUSS,
    DegenerateFieldError,
    DegenerateLRFError,
    FeatureConfig,
    FeatureSet,
    InferenceGrid,
    build_lrf,
    doh,
    evaluate_samples,
    extract_features,
    hessian_of_norm,
    hov_from_vectors,
    load_features,
    make_support,
    save_features,
    select_keypoint_indices,
    support_offsets,
)
from magmatch.field_sim import example_scene, scene_field
from magmatch.geometry import RigidTransform, random_rotation
from magmatch.gp import FieldQuery, infer_arrays, infer_derivatives, rgp_infer

from conftest import PAIR_BOUNDS
from oracles import fd_hessian


def uniform_query(b):
    return FieldQuery(np.zeros(3), np.asarray(b, float), np.eye(3), np.zeros((3, 3)), np.zeros((6, 3)))


def test_hessian_of_uniform_field_is_zero():
    assert np.array_equal(hessian_of_norm(uniform_query([1e-5, 0, 2e-5])), np.zeros((3, 3)))


def test_hessian_rejects_zero_field():
    with pytest.raises(DegenerateFieldError):
        hessian_of_norm(uniform_query([0.0, 0.0, 0.0]))


def test_hessian_matches_finite_differences_of_inferred_norm(pair_belief):
    rng = np.random.default_rng(0)
    norm = lambda x: np.linalg.norm(rgp_infer(pair_belief, x).mean)
    for x in rng.uniform(-0.2, 0.2, size=(50, 3)):
        H = hessian_of_norm(infer_derivatives(pair_belief, x))
        assert np.array_equal(H, H.T)
        fd = fd_hessian(norm, x, 1e-3)
        assert np.linalg.norm(H - fd) < 1e-3 * np.linalg.norm(H)


@pytest.mark.parametrize("H, expected", [(np.zeros((3, 3)), 0.0), (np.eye(3), 1.0), (np.diag([2.0, 3.0, 4.0]), 24.0)])
def test_doh_examples(H, expected):
    assert doh(H) == pytest.approx(expected, abs=1e-12)


def test_select_constant_doh_is_empty():
    assert len(select_keypoint_indices(np.full(10, 3.0), np.ones(10))) == 0


def test_select_single_peak():
    d = np.zeros(10)
    d[4] = 10.0
    np.testing.assert_array_equal(select_keypoint_indices(d, np.full(10, 1e-9)), [4])


def test_select_uses_absolute_doh_and_variance_quantile():
    d = np.array([-9.0, 9.0, 8.0, 8.5, 0.0, 0.0, 0.0, 0.0])
    var = np.array([1.0, 2.0, 3.0, 4.0, 0.0, 0.0, 0.0, 0.0])
    # |DoH| above the mean keeps 0..3; the 75% variance quantile of those is 3.25
    np.testing.assert_array_equal(select_keypoint_indices(d, var, 0.75), [0, 1, 2])
    np.testing.assert_array_equal(select_keypoint_indices(d, var, 1.0), [0, 1, 2, 3])


def test_select_ignores_invalid_samples():
    d = np.array([np.nan, 5.0, 0.0, 0.0])
    np.testing.assert_array_equal(select_keypoint_indices(d, np.zeros(4)), [1])


def test_keypoints_concentrate_near_dipole():
    from magmatch.field_sim import Dipole, SamplingPlan, Scene, sample_scene
    from magmatch.gp import KernelParams, absorb, init_belief

    scene = Scene((Dipole([0.05, -0.03, -0.4], [0.0, 0.0, 100.0]),))
    ms = sample_scene(scene, SamplingPlan("uniform-random", PAIR_BOUNDS, count=800, seed=1), 1e-6)
    std = float(np.sqrt(np.mean(ms.values**2)))
    l = 0.2
    b = absorb(init_belief(PAIR_BOUNDS, 0.1, KernelParams.from_field_scale(std, l, 1e-6)), ms, block=50)
    grid = InferenceGrid.over_bounds(*PAIR_BOUNDS, 0.05)
    fs = extract_features(b, grid).features
    assert len(fs) > 0
    pole = scene.dipoles[0].position
    d = np.linalg.norm(fs.locations - pole, axis=1)
    assert np.mean(d <= 2 * l) >= 0.9
    assert np.median(d) < np.median(np.linalg.norm(grid.points - pole, axis=1))


def test_support_offsets_ball():
    offs = support_offsets(0.05, 4.0)
    r = np.linalg.norm(offs, axis=1)
    assert np.all(r > 0) and np.all(r <= 4.0)
    assert len(offs) == 256  # lattice points in a radius-4 ball minus the centre
    np.testing.assert_array_equal(np.sort(offs.sum(axis=0)), [0, 0, 0])


def test_lrf_z_axis_follows_base_field():
    # B(0) = (0, 0, 5); the even x^2 term survives the symmetric support sum
    field = lambda X: np.c_[X[:, 0] ** 2, np.zeros(len(X)), np.full(len(X), 5.0)]
    sup = make_support(np.zeros(3), 0.05, field)
    L = build_lrf(np.zeros(3), field, sup)
    np.testing.assert_allclose(L, np.eye(3), atol=1e-15)
    assert np.all(np.linalg.norm(sup.subpoints, axis=1) <= sup.radius + 1e-12)


def test_lrf_unit_z_example():
    # B(kp) = (0, 0, 5) exactly, support vectors tilted toward +x
    sup_vecs = np.array([[1.0, 0, 5.0], [0.5, 0, 5.0]])
    from magmatch.features import lrf_from_vectors

    L = lrf_from_vectors([0, 0, 5.0], sup_vecs, np.ones(2))
    np.testing.assert_allclose(L, np.eye(3), atol=1e-15)


def test_lrf_parallel_support_is_degenerate():
    field = lambda X: np.tile([0.0, 0.0, 5.0], (len(X), 1))
    sup = make_support(np.zeros(3), 0.05, field)
    with pytest.raises(DegenerateLRFError):
        build_lrf(np.zeros(3), field, sup)


def test_lrf_rotates_with_scene():
    scene = example_scene("desk")
    rng = np.random.default_rng(1)
    for _ in range(10):
        R = random_rotation(rng)
        moved = scene.transformed(RigidTransform(R))
        x = rng.uniform(-0.3, 0.3, 3)
        f0 = lambda X: scene_field(scene, X)
        f1 = lambda X: scene_field(moved, X)
        s0 = make_support(x, 0.05, f0)
        L0 = build_lrf(x, f0, s0)
        # support lattice carried along with the scene
        s1 = make_support(R @ x, 0.05, f1, subpoints=s0.subpoints @ R.T)
        L1 = build_lrf(R @ x, f1, s1)
        np.testing.assert_allclose(L1, L0 @ R.T, atol=1e-3)
        # on a freshly resampled axis-aligned lattice the z axis is still exact
        s2 = make_support(R @ x, 0.05, f1)
        np.testing.assert_allclose(build_lrf(R @ x, f1, s2)[2], R @ L0[2], atol=1e-12)


def test_hov_vertical_vectors():
    V = np.tile([0.0, 0.0, 3e-4], (40, 1))
    d = hov_from_vectors(np.eye(3), V)
    assert not d.azimuth_hist.any()
    assert d.elevation_hist[-1] == pytest.approx(1.0) and d.elevation_hist[:-1].sum() == 0
    assert d.comp_hist_x[10] == pytest.approx(1.0)  # zero falls in [0, 10 G)


def test_hov_component_range_is_half_open():
    cfg = FeatureConfig()
    top = 100 * GAUSS
    d = hov_from_vectors(np.eye(3), np.array([[top, 0, 0], [-top, 0, 0]]), cfg)
    # +100 G is discarded, -100 G lands in the first bin
    assert d.comp_hist_x[0] == pytest.approx(1.0) and d.comp_hist_x[1:].sum() == 0


def test_hov_azimuth_wraps_at_180():
    d = hov_from_vectors(np.eye(3), np.array([[-1e-3, 0.0, 0.0]]))
    assert d.azimuth_hist[0] == pytest.approx(1.0)


@given(st.integers(0, 10_000))
@settings(max_examples=40, deadline=None)
def test_descriptor_blocks(seed):
    rng = np.random.default_rng(seed)
    V = rng.normal(size=(int(rng.integers(1, 60)), 3)) * 10 ** rng.uniform(-6, -2)
    v = hov_from_vectors(random_rotation(rng), V).as_vector
    assert v.shape == (DESCRIPTOR_LENGTH,) == (90,)
    assert np.all(v >= 0)
    for a, b in ((0, 20), (20, 30), (30, 50), (50, 70), (70, 90)):
        n = np.linalg.norm(v[a:b])
        assert n == 0 or n == pytest.approx(1.0)


def test_descriptor_survives_scene_rotation():
    scene = example_scene("desk")
    rng = np.random.default_rng(2)
    cos = []
    for _ in range(20):
        R = random_rotation(rng)
        moved = scene.transformed(RigidTransform(R))
        x = rng.uniform(-0.3, 0.3, 3)
        f0 = lambda X: scene_field(scene, X)
        f1 = lambda X: scene_field(moved, X)
        s0, s1 = make_support(x, 0.05, f0), make_support(R @ x, 0.05, f1)
        a = hov_from_vectors(build_lrf(x, f0, s0), s0.vectors).as_vector
        b = hov_from_vectors(build_lrf(R @ x, f1, s1), s1.vectors).as_vector
        cos.append(a @ b / np.linalg.norm(a) / np.linalg.norm(b))
    assert np.median(cos) >= 0.9


def test_doh_rotation_invariance_at_corresponding_points():
    scene = example_scene("desk")
    rng = np.random.default_rng(3)
    R = random_rotation(rng)
    moved = scene.transformed(RigidTransform(R))

    def analytic_doh(s, x, h=1e-3):
        from oracles import fd_hessian

        return doh(fd_hessian(lambda p: np.linalg.norm(scene_field(s, p)), x, h))

    for x in rng.uniform(-0.4, 0.4, size=(10, 3)):
        a, b = analytic_doh(scene, x), analytic_doh(moved, R @ x)
        assert abs(abs(a) - abs(b)) <= 0.05 * abs(a)


def test_feature_file_round_trip(tmp_path, pair_belief):
    grid = InferenceGrid.over_bounds([-0.1] * 3, [0.1] * 3, 0.05)
    fs = extract_features(pair_belief, grid).features
    path = tmp_path / "f.json"
    save_features(fs, path)
    back = load_features(path)
    assert len(back) == len(fs)
    np.testing.assert_array_equal(back.descriptors, fs.descriptors)
    np.testing.assert_array_equal(back.locations, fs.locations)
    assert back.params_hash == fs.params_hash and back.spacing == fs.spacing
    for k in back.keypoints:
        np.testing.assert_allclose(k.lrf @ k.lrf.T, np.eye(3), atol=1e-12)
        np.testing.assert_allclose(k.lrf[2], k.base_vector / np.linalg.norm(k.base_vector), atol=1e-12)


def test_uniform_field_gives_no_keypoints(pair_belief):
    from magmatch.gp import absorb, init_belief
    from magmatch.field_sim import MeasurementSet

    X = np.random.default_rng(4).uniform(-0.2, 0.2, size=(200, 3))
    ms = MeasurementSet(np.arange(200), X, np.tile([1e-5, 2e-5, -3e-5], (200, 1)))
    b = absorb(init_belief(([-0.2] * 3, [0.2] * 3), 0.1, pair_belief.params), ms, block=50)
    ex = extract_features(b, InferenceGrid.over_bounds([-0.15] * 3, [0.15] * 3, 0.05))
    assert len(ex.features) == 0


def test_inference_grid_tube_and_dedup():
    g = InferenceGrid(np.zeros(3), 0.1, [[0, 0, 0], [0, 0, 0], [1, 0, 0]])
    assert len(g) == 2
    tube = InferenceGrid.along_path(np.array([[0, 0, 0.0], [1.0, 0, 0]]), 0.1, 0.1)
    assert np.all(np.min(np.linalg.norm(tube.points[:, None] - np.array([[0, 0, 0.0], [1.0, 0, 0]])[None], axis=2), axis=1) <= 0.1 + 1e-12)
    with pytest.raises(ValueError):
        InferenceGrid(np.zeros(3), 0.0, [[0, 0, 0]])
