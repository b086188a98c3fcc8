import numpy as np
import pytest
from hypothesis import strategies as st

from skelfusion.skeleton import Action, builtin_body_model


@pytest.fixture(scope="session")
def bm31():
    return builtin_body_model("hdm05-31")


@pytest.fixture(scope="session")
def bm12():
    return builtin_body_model("hdm05-12")


def random_action(rng, length=6, joints=31, label="a", action_id="x", scale=1.0, fps=120.0):
    """Random poses around a plausible standing skeleton (hips apart, non-zero height)."""
    from skelfusion.synthetic import REST_POSE_31
    from skelfusion.skeleton import builtin_body_model as _bm

    if joints == 31:
        base = REST_POSE_31
    else:
        full = _bm("hdm05-31")
        name = {14: "bm14", 12: "bm12"}[joints]
        base = REST_POSE_31[list(full.subsets[name])]
    poses = base[None] + rng.normal(0.0, 0.05, size=(length, joints, 3))
    poses = poses * scale + rng.normal(0.0, 1.0, size=(1, 1, 3))
    return Action(action_id, poses, fps, label)


@st.composite
def actions(draw, joints=31, max_length=8):
    seed = draw(st.integers(0, 2**32 - 1))
    length = draw(st.integers(1, max_length))
    scale = draw(st.floats(0.2, 5.0))
    return random_action(np.random.default_rng(seed), length, joints, scale=scale)


def tiny_config(tmp_path, techniques=None, out="results", **overrides):
    """A seconds-scale experiment on a small synthetic dataset written under ``tmp_path``.

    Returns the config document; the dataset file is created once per ``tmp_path``.
    """
    from skelfusion.skeleton import save_dataset
    from skelfusion.synthetic import SyntheticSpec, generate_synthetic

    data = tmp_path / "data.jsonl"
    if not data.exists():
        spec = SyntheticSpec(classes=3, actions_per_class=4, min_length=20, max_length=30, noise=0.005, seed=1)
        save_dataset(generate_synthetic(spec), data)
    doc = {
        "dataset": str(data),
        "body_model": "builtin:hdm05-12",
        "techniques": techniques or [{"id": "P", "norm": "p"}, {"id": "POS", "norm": "pos"}],
        "train": {"epochs": 3, "learning_rate": 0.01, "seed": 0, "init_scale": 0.5},
        "model": {"embed_dim": 4, "hidden_dim": 8},
        "downsample": 2,
        "report": {"cardinalities": [1, 2], "top_m": 2},
        "output_dir": str(tmp_path / out),
    }
    doc.update(overrides)
    return doc
