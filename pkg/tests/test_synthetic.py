import numpy as np
import pytest

from skelfusion.errors import DataValidationError
from skelfusion.synthetic import SyntheticSpec, class_signatures, generate_synthetic


def distance_features(action):
    """Rotation-, placement- and scale-invariant summary: mean and spread of every joint-pair distance."""
    p = action.poses
    d = np.linalg.norm(p[:, :, None] - p[:, None, :], axis=-1)
    iu = np.triu_indices(p.shape[1], 1)
    d = d[:, iu[0], iu[1]]
    d = d / d.mean()
    return np.concatenate([d.mean(0), d.std(0)])


def nearest_centroid_accuracy(dataset):
    X = np.array([distance_features(a) for a in dataset.actions])
    y = np.array([a.class_label for a in dataset.actions])
    train = np.arange(len(y)) % 2 == 0
    centroids = {c: X[train & (y == c)].mean(0) for c in dataset.classes}
    pred = [min(centroids, key=lambda c: np.linalg.norm(x - centroids[c])) for x in X[~train]]
    return float(np.mean(np.array(pred) == y[~train]))


@pytest.mark.parametrize("seed", range(4))
@pytest.mark.parametrize("joints", [12, 31])
def test_two_noiseless_classes_are_separable_by_nearest_centroid(seed, joints):
    # ten seconds of motion cover several periods of every class frequency
    spec = SyntheticSpec(classes=2, actions_per_class=10, min_length=1200, max_length=1200,
                         joints=joints, noise=0.0, seed=seed)
    assert nearest_centroid_accuracy(generate_synthetic(spec)) == 1.0


def test_dominant_frequencies_differ_between_classes():
    sig, dirs = class_signatures(3, np.random.default_rng(0))
    base = [np.min(sig[c, sig[c, :, 2] > 0, 0]) for c in range(3)]
    np.testing.assert_allclose(base, [0.5, 0.8, 1.1])
    np.testing.assert_allclose(np.linalg.norm(dirs[sig[..., 2] > 0], axis=-1), 1.0)


def test_same_seed_same_dataset():
    a = generate_synthetic(SyntheticSpec(classes=3, actions_per_class=4, seed=7))
    b = generate_synthetic(SyntheticSpec(classes=3, actions_per_class=4, seed=7))
    c = generate_synthetic(SyntheticSpec(classes=3, actions_per_class=4, seed=8))
    assert [x.id for x in a.actions] == [x.id for x in b.actions]
    for x, y in zip(a.actions, b.actions):
        assert x.equals(y)
    assert not all(x.equals(y) for x, y in zip(a.actions, c.actions))


def test_counts_labels_and_shapes():
    ds = generate_synthetic(SyntheticSpec(classes=3, actions_per_class=5, min_length=10, max_length=20))
    assert len(ds.actions) == 15
    assert list(ds.classes) == ["class_00", "class_01", "class_02"]
    assert all(10 <= a.length <= 20 and a.num_joints == 12 for a in ds.actions)
    assert ds.body_model.num_joints == 12


def test_explicit_signatures_are_used():
    sig = np.zeros((2, 31, 3))
    ds = generate_synthetic(SyntheticSpec(classes=2, actions_per_class=1, min_length=5, max_length=5,
                                          joints=31, noise=0.0, signatures=sig))
    for a in ds.actions:  # zero amplitude: the body is frozen
        np.testing.assert_allclose(a.poses - a.poses[0], 0.0, atol=1e-12)


@pytest.mark.parametrize(
    "kwargs",
    [{"classes": 1}, {"actions_per_class": 0}, {"min_length": 1}, {"min_length": 9, "max_length": 8},
     {"joints": 13}, {"noise": -1.0}, {"fps": 0.0}, {"signatures": np.zeros((1, 31, 3))}],
)
def test_invalid_specs(kwargs):
    with pytest.raises(DataValidationError):
        SyntheticSpec(**kwargs)
