import numpy as np
import pytest
from scipy.spatial import cKDTree

from magmatch.features import FeatureSet
from magmatch.field_sim import SamplingPlan, example_scene, sample_scene
from magmatch.geometry import RigidTransform
from magmatch.pipeline import DESK_CONFIG, RunManifest, build_belief, features_for, register, relative_noise_std, sha256_file

DESK = ([-0.5] * 3, [0.5] * 3)


@pytest.fixture(scope="module")
def desk_pair():
    scene = example_scene("desk")
    frame = RigidTransform.from_axis_angle("z", 30, [0.1, -0.05, 0.05])
    bp = SamplingPlan("uniform-random", DESK, count=1000, seed=11)
    tp = SamplingPlan("uniform-random", DESK, count=1000, seed=12)
    noise = relative_noise_std(scene, bp, 0.01)
    cfg = DESK_CONFIG.with_updates(noise_std_t=noise)
    bm, tm = sample_scene(scene, bp, noise), sample_scene(scene, tp, noise, frame)
    bb, tb = build_belief(bm, cfg), build_belief(tm, cfg)
    return cfg, frame.inverse(), bb, features_for(bb, cfg, bm.locations).features, features_for(tb, cfg, tm.locations).features


def test_matches_survive_distractors(desk_pair):
    cfg, truth, _, base, target = desk_pair
    # distractors: the base descriptors attached to positions far outside the map
    rng = np.random.default_rng(0)
    k = len(base)
    idx = rng.permutation(k)
    fake = [type(kp)(kp.location + 10.0, kp.doh, kp.variance_score, kp.base_vector, kp.lrf) for kp in (base.keypoints[i] for i in idx)]
    noisy = base.descriptors[idx] + rng.normal(scale=0.05, size=base.descriptors.shape)
    both = FeatureSet(base.keypoints + fake, np.vstack([base.descriptors, np.abs(noisy)]), base.spacing)
    from magmatch.registration import match_descriptors

    corrs = match_descriptors(both, target, cfg.msac_config())
    assert len(corrs) > 0
    P = truth.apply(target.locations[[c.target_index for c in corrs]])
    Q = both.locations[[c.base_index for c in corrs]]
    good = np.linalg.norm(P - Q, axis=1) <= 2 * cfg.inference_spacing_m
    assert np.mean(good) >= 0.5


def test_registration_recovers_truth(desk_pair):
    cfg, truth, bb, base, target = desk_pair
    rep = register(base, target, cfg.msac_config(), bb)
    assert rep.status == "pass"
    from magmatch.registration import evaluate_against_truth

    terr, rerr = evaluate_against_truth(rep.transform, truth)
    assert terr < 0.05 and rerr < 5.0
    d = rep.to_dict()
    assert d["status"] == "pass" and len(d["transform"]["rotation"]) == 9 and d["config"]["seed"] == cfg.seed


def test_keypoint_repeatability(desk_pair):
    cfg, truth, _, base, target = desk_pair
    d, _ = cKDTree(base.locations).query(truth.apply(target.locations))
    assert np.mean(d <= 2 * cfg.inference_spacing_m) >= 0.6


def test_register_reports_no_match():
    rng = np.random.default_rng(1)
    from magmatch.features import Keypoint
    from magmatch.registration import MsacConfig

    kps = [Keypoint(rng.normal(size=3), 1.0, 0.0, rng.normal(size=3), np.eye(3)) for _ in range(5)]
    a = FeatureSet(kps, np.zeros((5, 90)), 0.05)
    b = FeatureSet(kps, np.ones((5, 90)), 0.05)
    assert register(a, b, MsacConfig(match_distance_threshold=0.1)).status == "no-match"


def test_manifest(tmp_path):
    p = tmp_path / "x.txt"
    p.write_text("abc")
    m = RunManifest("map", config={"a": 1}, seed=4)
    m.add_input(p)
    with m.stage("work"):
        pass
    d = m.to_dict()
    assert d["inputs"][str(p)] == sha256_file(p) == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
    assert d["timing_s"]["work"] >= 0 and d["seed"] == 4 and d["tool_version"]
