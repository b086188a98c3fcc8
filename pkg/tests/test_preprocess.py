import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import actions, random_action
from skelfusion.errors import DataValidationError
from skelfusion.preprocess import (
    AugmentationSpec,
    NormalizationVariant,
    TechniqueSpec,
    add_noise,
    apply_pipeline,
    crop,
    crop_count,
    key_pose_indices,
    key_poses,
    normalize_orientation,
    normalize_position,
    normalize_size,
    output_model,
    simplify_body,
    skeleton_height,
)
from skelfusion.skeleton import Action, BodyModelDef, VARIABLE_FPS, pose_dissimilarity, thighbone_length


def hip_angle(action, model):
    v = action.poses[:, model.right_hip_index] - action.poses[:, model.left_hip_index]
    return np.arctan2(v[:, 2], v[:, 0])


# -- position -------------------------------------------------------------------

def test_position_forced_example():
    model = BodyModelDef(["root", "l", "r"], 0, 1, 2, (1, 2), [(0, 1)])
    a = Action("a", [[[1, 2, 3], [2, 2, 3], [1, 1, 3]]], 1.0)
    out = normalize_position(a, model)
    np.testing.assert_array_equal(out.poses[0, 0], [0, 0, 0])
    np.testing.assert_array_equal(out.poses[0, 1], [1, 0, 0])


@given(actions())
def test_position_postcondition_and_idempotence(a):
    from skelfusion.skeleton import builtin_body_model

    m = builtin_body_model("hdm05-31")
    once = normalize_position(a, m)
    assert np.all(once.poses[:, m.root_index] == 0.0)
    assert once.equals(normalize_position(once, m))


# -- orientation ---------------------------------------------------------------

def test_orientation_identity_when_hips_on_x(bm31):
    poses = np.zeros((1, 31, 3))
    poses[0, bm31.right_hip_index] = [0.3, 0.1, 0.0]
    poses[0, 5] = [0.4, 1.2, -0.7]
    b = Action("b", poses, 1.0)
    assert normalize_orientation(b, bm31).equals(b)


def test_orientation_quarter_turn_oracle(bm31):
    d = 0.37
    poses = np.zeros((1, 31, 3))
    poses[0, bm31.right_hip_index] = [0.0, 0.2, d]
    poses[0, 20] = [1.0, 1.5, 0.0]
    out = normalize_orientation(Action("q", poses, 1.0), bm31)
    hip = out.poses[0, bm31.right_hip_index] - out.poses[0, bm31.left_hip_index]
    np.testing.assert_allclose(hip, [d, 0.2, 0.0], atol=1e-12)
    # rotating +z onto +x sends +x to -z
    np.testing.assert_allclose(out.poses[0, 20], [0.0, 1.5, -1.0], atol=1e-12)


@settings(max_examples=60, deadline=None)
@given(actions())
def test_orientation_postconditions(a):
    from skelfusion.skeleton import builtin_body_model

    m = builtin_body_model("hdm05-31")
    out = normalize_orientation(a, m)
    assert np.all(np.abs(hip_angle(out, m)) <= 1e-9)
    v = out.poses[:, m.right_hip_index] - out.poses[:, m.left_hip_index]
    assert np.all(v[:, 0] > 0)
    np.testing.assert_array_equal(out.poses[..., 1], a.poses[..., 1])
    np.testing.assert_allclose(out.poses[:, m.root_index], a.poses[:, m.root_index], atol=1e-12)
    np.testing.assert_allclose(normalize_orientation(out, m).poses, out.poses, atol=1e-12)


def test_orientation_degenerate_hips_reuse_previous_rotation(bm31):
    rng = np.random.default_rng(1)
    a = random_action(rng, 3)
    poses = np.array(a.poses)
    poses[1, bm31.right_hip_index] = poses[1, bm31.left_hip_index] + [0.0, 0.3, 0.0]
    with pytest.warns(RuntimeWarning, match="1 pose"):
        out = normalize_orientation(a.with_poses(poses), bm31)
    first = normalize_orientation(a.with_poses(poses[:1]), bm31)
    angle0 = -hip_angle(a.with_poses(poses[:1]), bm31)[0]
    rel = poses[1] - poses[1, bm31.root_index]
    c, s = math.cos(angle0), math.sin(angle0)
    expected = rel.copy()
    expected[:, 0] = rel[:, 0] * c - rel[:, 2] * s
    expected[:, 2] = rel[:, 0] * s + rel[:, 2] * c
    np.testing.assert_allclose(out.poses[1] - out.poses[1, bm31.root_index], expected, atol=1e-12)
    np.testing.assert_allclose(out.poses[0], first.poses[0], atol=0)


def test_orientation_first_pose_mode_keeps_turning(bm31):
    rng = np.random.default_rng(2)
    a = random_action(rng, 4)
    out = normalize_orientation(a, bm31, mode="first_pose")
    assert abs(hip_angle(out, bm31)[0]) <= 1e-9
    turned = hip_angle(a, bm31) - hip_angle(a, bm31)[0]
    np.testing.assert_allclose(np.unwrap(hip_angle(out, bm31)), np.unwrap(turned), atol=1e-9)
    with pytest.raises(DataValidationError):
        normalize_orientation(a, bm31, mode="sideways")


# -- size ----------------------------------------------------------------------

def _brute_height(a, m):
    per_chain = []
    for chain in m.height_chains:
        per_chain.append(np.mean([
            sum(math.dist(p[u], p[v]) for u, v in zip(chain[:-1], chain[1:])) for p in a.poses
        ]))
    return float(np.mean(per_chain))


@settings(max_examples=60, deadline=None)
@given(actions(), st.floats(0.5, 3.0))
def test_size_postconditions(a, target):
    from skelfusion.skeleton import builtin_body_model

    m = builtin_body_model("hdm05-31")
    assert skeleton_height(a, m) == pytest.approx(_brute_height(a, m), rel=1e-12)
    out = normalize_size(a, m, target)
    assert abs(skeleton_height(out, m) / target - 1) <= 1e-9
    np.testing.assert_allclose(normalize_size(out, m, target).poses, out.poses, rtol=0, atol=1e-12)


def test_size_forced_ratio_and_scale_invariance(bm31):
    rng = np.random.default_rng(4)
    a = normalize_position(random_action(rng, 5), bm31)
    h = skeleton_height(a, bm31)
    tall = a.with_poses(a.poses * (3.5 / h))
    halved = normalize_size(tall, bm31, 1.75)
    np.testing.assert_allclose(halved.poses, tall.poses / 2, rtol=1e-12)
    doubled = a.with_poses(a.poses * 2)
    np.testing.assert_allclose(normalize_size(doubled, bm31).poses, normalize_size(a, bm31).poses, atol=1e-12)
    at_target = a.with_poses(a.poses * (1.75 / h))
    np.testing.assert_allclose(normalize_size(at_target, bm31).poses, at_target.poses, rtol=1e-12)


def test_size_errors(bm31):
    flat = Action("f", np.zeros((2, 31, 3)), 1.0)
    with pytest.raises(DataValidationError, match="zero skeleton height"):
        normalize_size(flat, bm31)
    with pytest.raises(DataValidationError, match="target_height"):
        normalize_size(random_action(np.random.default_rng(0)), bm31, 0.0)


@settings(max_examples=40, deadline=None)
@given(actions())
def test_position_commutes_with_size(a):
    from skelfusion.skeleton import builtin_body_model

    m = builtin_body_model("hdm05-31")
    ps = normalize_size(normalize_position(a, m), m)
    sp = normalize_position(normalize_size(a, m), m)
    np.testing.assert_allclose(ps.poses, sp.poses, atol=1e-12)


# -- crop ----------------------------------------------------------------------

def test_crop_examples():
    a = Action("a", np.arange(360, dtype=float).reshape(120, 1, 3), 120.0)
    out = crop(a, 20)
    assert out.length == 96
    np.testing.assert_array_equal(out.poses, a.poses[12:108])
    assert crop(a, 0).equals(a)
    b = Action("b", np.zeros((13, 1, 3)), 120.0)
    assert crop(b, 20).length == 11


def test_crop_count_floor_rule_exhaustive():
    for length in range(1, 1001):
        for pct in (0, 2.5, 3.7, 10, 10.6, 20, 33.3, 50, 99):
            expected = (round(pct * 10) * length) // 2000
            assert crop_count(length, pct) == expected, (length, pct)


def test_crop_count_reads_the_decimal_range():
    # 10.6 % of 1000 poses is exactly 106, so 53 per side even though float(10.6) < 10.6
    assert crop_count(1000, 10.6) == 53
    assert crop_count(1000, 1e-5) == 0


def test_crop_errors():
    # floor(range/200 * l) < l/2 whenever range < 100, so a pose always survives
    for length in (1, 2, 3, 199):
        assert crop(Action("a", np.zeros((length, 1, 3)), 1.0), 99.9).length >= 1
    with pytest.raises(DataValidationError):
        crop(Action("a", np.zeros((1, 1, 3)), 1.0), 100)
    with pytest.raises(DataValidationError):
        crop(Action("a", np.zeros((1, 1, 3)), 1.0), -1)


# -- noise ---------------------------------------------------------------------

def test_noise_bound_and_determinism(bm31):
    rng = np.random.default_rng(5)
    a = random_action(rng, 20)
    bound = 0.2 * thighbone_length(a, bm31)
    out = add_noise(a, 20, bm31, seed=11)
    assert np.all(np.abs(out.poses - a.poses) <= bound)
    assert np.abs(out.poses - a.poses).max() > 0.5 * bound
    assert out.equals(add_noise(a, 20, bm31, seed=11))
    assert not out.equals(add_noise(a, 20, bm31, seed=12))
    assert add_noise(a, 0, bm31, seed=3).equals(a)


def test_noise_figure_bound():
    model = BodyModelDef(["root", "hip", "knee"], 0, 1, 2, (1, 2), [(0, 1, 2)])
    poses = np.array([[[0, 1, 0], [0.1, 1, 0], [0.1, 0.5, 0]]] * 50, dtype=float)
    out = add_noise(Action("n", poses, 1.0), 20, model, seed=0)
    delta = out.poses - poses
    assert delta.min() >= -0.1 and delta.max() <= 0.1


def test_noise_is_zero_mean():
    model = BodyModelDef(["root", "hip", "knee"], 0, 1, 2, (1, 2), [(0, 1, 2)])
    poses = np.zeros((40_000, 3, 3))
    poses[:, 2, 1] = -1.0
    out = add_noise(Action("z", poses, 1.0), 10, model, seed=2)
    delta = (out.poses - poses).ravel()
    sigma = 0.1 / math.sqrt(3)
    assert delta.size >= 100_000
    assert abs(delta.mean()) < 3 * sigma / math.sqrt(delta.size)


# -- body model ----------------------------------------------------------------

def test_simplify_counts_and_remap(bm31):
    a = random_action(np.random.default_rng(6), 3)
    a14, m14 = simplify_body(a, bm31, "bm14")
    a12, m12 = simplify_body(a, bm31, "bm12")
    assert (a.num_joints, a14.num_joints, a12.num_joints) == (31, 14, 12)
    for sub, model in ((a12, m12), (a14, m14)):
        for new, name in enumerate(model.joint_names):
            np.testing.assert_array_equal(sub.poses[:, new], a.poses[:, bm31.joint_names.index(name)])
        assert model.joint_names[model.root_index] == bm31.joint_names[bm31.root_index]
        assert model.joint_names[model.left_hip_index] == bm31.joint_names[bm31.left_hip_index]
        assert model.joint_names[model.right_hip_index] == bm31.joint_names[bm31.right_hip_index]
        assert [model.joint_names[i] for i in model.thighbone] == [bm31.joint_names[i] for i in bm31.thighbone]


def test_simplify_identity_subset(bm31):
    from dataclasses import replace

    model = replace(bm31, subsets={"all": tuple(range(31))})
    a = random_action(np.random.default_rng(7), 2)
    out, induced = simplify_body(a, model, "all")
    assert out.equals(a)
    assert induced.joint_names == bm31.joint_names


def test_simplify_errors(bm31):
    from dataclasses import replace

    a = random_action(np.random.default_rng(8), 2)
    with pytest.raises(DataValidationError, match="unknown joint subset"):
        simplify_body(a, bm31, "bm7")
    no_hip = [i for i in range(31) if i != bm31.left_hip_index]
    with pytest.raises(DataValidationError, match="left hip"):
        simplify_body(a, replace(bm31, subsets={"x": tuple(no_hip)}), "x")


def test_simplify_then_dissimilarity_is_subset_sum(bm31):
    rng = np.random.default_rng(9)
    a, b = random_action(rng, 1), random_action(rng, 1)
    idx = bm31.subsets["bm14"]
    sa, _ = simplify_body(a, bm31, "bm14")
    sb, _ = simplify_body(b, bm31, "bm14")
    expected = sum(math.dist(a.poses[0, i], b.poses[0, i]) for i in idx)
    assert pose_dissimilarity(sa.poses[0], sb.poses[0]) == pytest.approx(expected, rel=1e-12)


# -- key poses -----------------------------------------------------------------

def test_key_pose_greedy_oracle():
    xs = [0.0, 0.5, 1.2, 1.5, 3.2]
    poses = np.array([[[x, 0.0, 0.0]] for x in xs])
    out = key_poses(Action("k", poses, 120.0), 1.0)
    np.testing.assert_array_equal(out.poses[:, 0, 0], [0.0, 1.2, 3.2])
    assert out.fps == VARIABLE_FPS


def test_key_pose_trivial_cases():
    same = Action("s", np.ones((6, 2, 3)), 30.0)
    assert key_poses(same, 0.0).length == 1
    a = random_action(np.random.default_rng(10), 6)
    assert key_poses(a, 1e6).length == 1
    with pytest.raises(DataValidationError):
        key_poses(a, -1.0)


@settings(max_examples=80, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 40), st.floats(0.0, 3.0))
def test_key_pose_properties(seed, length, dist):
    rng = np.random.default_rng(seed)
    poses = np.cumsum(rng.normal(0, 0.2, size=(length, 4, 3)), axis=0)
    kept = key_pose_indices(poses, dist)
    assert kept[0] == 0 and kept == sorted(set(kept))
    for u, v in zip(kept, kept[1:]):
        assert pose_dissimilarity(poses[v], poses[u]) > dist
    bounds = kept + [length]
    for u, nxt in zip(kept, bounds[1:]):
        for w in range(u + 1, nxt):
            assert pose_dissimilarity(poses[w], poses[u]) <= dist


# -- technique pipelines ---------------------------------------------------------

def test_augmentation_spec_parameters_exact():
    AugmentationSpec("crop", range_pct=10)
    assert AugmentationSpec("noise", range_pct=5).seed == 0
    with pytest.raises(DataValidationError, match="exactly"):
        AugmentationSpec("crop", range_pct=10, dist=1.0)
    with pytest.raises(DataValidationError, match="exactly"):
        AugmentationSpec("keypose")
    with pytest.raises(DataValidationError, match="crop range_pct"):
        AugmentationSpec("crop", range_pct=100)
    with pytest.raises(DataValidationError, match="unknown keys"):
        AugmentationSpec.from_dict({"kind": "noise", "range_pct": 5, "sigma": 1})
    with pytest.raises(DataValidationError):
        NormalizationVariant("posx")
    with pytest.raises(DataValidationError):
        NormalizationVariant("p", target_height=0)


def test_technique_round_trip_and_labels():
    doc = {"id": "t1", "norm": "pos", "train_aug": {"kind": "noise", "range_pct": 2.5, "seed": 4},
           "test_aug": {"kind": "bodymodel", "subset_name": "bm14"}}
    spec = TechniqueSpec.from_dict(doc)
    assert TechniqueSpec.from_dict(spec.to_dict()) == spec
    assert spec.describe() == ("P+O+S", "Noise(2.5%)", "BodyModel(14)")
    assert spec.changes_format()
    with pytest.raises(DataValidationError, match="unknown keys"):
        TechniqueSpec.from_dict({**doc, "extra": 1})


def test_pipeline_identity_spec(bm31):
    a = random_action(np.random.default_rng(11), 4)
    spec = TechniqueSpec.from_dict({"id": "raw"})
    for role in ("train", "test"):
        out, model = apply_pipeline(a, bm31, spec, role)
        assert out.equals(a) and model is bm31


def test_pipeline_role_selects_augmentation(bm31):
    a = random_action(np.random.default_rng(12), 4)
    spec = TechniqueSpec.from_dict({"id": "n", "norm": "pos", "train_aug": {"kind": "noise", "range_pct": 5}})
    test_out, _ = apply_pipeline(a, bm31, spec, "test")
    manual = normalize_size(normalize_orientation(normalize_position(a, bm31), bm31), bm31)
    assert test_out.equals(manual)
    train_out, _ = apply_pipeline(a, bm31, spec, "train")
    assert not train_out.equals(manual)


def test_pipeline_test_crop_composition(bm31):
    a = random_action(np.random.default_rng(13), 120)
    spec = TechniqueSpec.from_dict({"id": "c", "norm": "pos", "test_aug": {"kind": "crop", "range_pct": 10}})
    out, _ = apply_pipeline(a, bm31, spec, "test")
    assert out.length == 108
    assert np.all(out.poses[:, bm31.root_index] == 0.0)


def test_pipeline_body_model_output(bm31):
    spec = TechniqueSpec.from_dict({"id": "b", "norm": "pos", "train_aug": {"kind": "bodymodel", "subset_name": "bm12"},
                                    "test_aug": {"kind": "bodymodel", "subset_name": "bm12"}})
    a = random_action(np.random.default_rng(14), 5)
    out, model = apply_pipeline(a, bm31, spec, "train")
    assert out.num_joints == model.num_joints == 12
    assert output_model(bm31, spec, "test") == model


def test_transforms_leave_input_untouched(bm31):
    a = random_action(np.random.default_rng(15), 30)
    before = np.array(a.poses)
    normalize_position(a, bm31)
    normalize_orientation(a, bm31)
    normalize_size(a, bm31)
    crop(a, 20)
    add_noise(a, 10, bm31, 0)
    simplify_body(a, bm31, "bm14")
    key_poses(a, 0.5)
    np.testing.assert_array_equal(a.poses, before)


def test_noise_seed_is_per_action(bm31):
    spec = TechniqueSpec.from_dict({"id": "n", "train_aug": {"kind": "noise", "range_pct": 10}})
    rng = np.random.default_rng(16)
    a = random_action(rng, 3, action_id="one")
    b = Action("two", a.poses, a.fps)
    da = apply_pipeline(a, bm31, spec, "train")[0].poses - a.poses
    db = apply_pipeline(b, bm31, spec, "train")[0].poses - b.poses
    assert not np.array_equal(da, db)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        assert apply_pipeline(a, bm31, spec, "train")[0].equals(apply_pipeline(a, bm31, spec, "train")[0])
