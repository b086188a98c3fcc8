"""Seeded synthetic skeleton actions for desk-scale experiments.

Actions are generated on the shipped 31-joint body model and optionally
reduced to its 14- or 12-joint subsets. Every joint oscillates around a rest
pose with a class-specific (frequency, phase, amplitude) triple along a
class-specific direction; offsets propagate down the joint hierarchy so limbs
move rigidly with their parents. Per action, the subject is placed, turned
and scaled at random and the tempo varies slightly.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from skelfusion.errors import DataValidationError
from skelfusion.skeleton import Action, Dataset, builtin_body_model

# fmt: off
REST_POSE_31 = np.array([
    [0.00, 1.00, 0.00],                                                   # root
    [0.05, 0.98, 0.00], [0.10, 0.95, 0.00], [0.10, 0.52, 0.00],           # lhipjoint lfemur ltibia
    [0.10, 0.08, 0.00], [0.10, 0.02, 0.12],                               # lfoot ltoes
    [-0.05, 0.98, 0.00], [-0.10, 0.95, 0.00], [-0.10, 0.52, 0.00],        # right leg
    [-0.10, 0.08, 0.00], [-0.10, 0.02, 0.12],
    [0.00, 1.10, 0.00], [0.00, 1.25, 0.00], [0.00, 1.40, 0.00],           # lowerback upperback thorax
    [0.00, 1.50, 0.00], [0.00, 1.56, 0.00], [0.00, 1.68, 0.00],           # lowerneck upperneck head
    [0.03, 1.48, 0.00], [0.18, 1.45, 0.00], [0.20, 1.17, 0.00],           # lclavicle lhumerus lradius
    [0.22, 0.92, 0.00], [0.22, 0.86, 0.00], [0.22, 0.80, 0.00],           # lwrist lhand lfingers
    [0.24, 0.84, 0.03],                                                   # lthumb
    [-0.03, 1.48, 0.00], [-0.18, 1.45, 0.00], [-0.20, 1.17, 0.00],        # right arm
    [-0.22, 0.92, 0.00], [-0.22, 0.86, 0.00], [-0.22, 0.80, 0.00],
    [-0.24, 0.84, 0.03],
])
PARENTS_31 = (
    -1, 0, 1, 2, 3, 4, 0, 6, 7, 8, 9, 0, 11, 12, 13, 14, 15,
    13, 17, 18, 19, 20, 21, 20, 13, 24, 25, 26, 27, 28, 27,
)
# fmt: on

# joints whose own oscillation drives the motion; the rest only follow parents
_DRIVERS = (3, 4, 8, 9, 12, 13, 16, 18, 19, 20, 25, 26, 27)

_MODEL_FOR_JOINTS = {31: "hdm05-31", 14: "hdm05-14", 12: "hdm05-12"}


@dataclass(frozen=True)
class SyntheticSpec:
    classes: int = 5
    actions_per_class: int = 30
    min_length: int = 120
    max_length: int = 240
    joints: int = 12
    noise: float = 0.005
    seed: int = 0
    fps: float = 120.0
    #: optional (classes, 31, 3) array of per-joint (frequency Hz, phase rad, amplitude)
    signatures: np.ndarray | None = None

    def __post_init__(self):
        if self.classes < 2:
            raise DataValidationError("synthetic data needs at least 2 classes")
        if self.actions_per_class < 1:
            raise DataValidationError("actions_per_class must be positive")
        if not 2 <= self.min_length <= self.max_length:
            raise DataValidationError("need 2 <= min_length <= max_length")
        if self.joints not in _MODEL_FOR_JOINTS:
            raise DataValidationError(f"joints must be one of {sorted(_MODEL_FOR_JOINTS)}")
        if self.noise < 0 or not self.fps > 0:
            raise DataValidationError("noise must be >= 0 and fps > 0")
        if self.signatures is not None and np.shape(self.signatures) != (self.classes, 31, 3):
            raise DataValidationError(f"signatures must have shape ({self.classes}, 31, 3)")

    @property
    def body_model_name(self) -> str:
        return _MODEL_FOR_JOINTS[self.joints]


def class_signatures(classes: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Per-class (frequency, phase, amplitude) triples and motion directions.

    Class ``c`` has dominant frequency ``0.5 + 0.3 c`` Hz; a few joints run at
    twice that rate.
    """
    sig = np.zeros((classes, 31, 3))
    dirs = np.zeros((classes, 31, 3))
    for c in range(classes):
        base = 0.5 + 0.3 * c
        for j in _DRIVERS:
            mult = 2.0 if rng.random() < 0.25 else 1.0
            sig[c, j] = (base * mult, rng.uniform(0, 2 * np.pi), rng.uniform(0.03, 0.15))
            v = rng.normal(size=3)
            dirs[c, j] = v / np.linalg.norm(v)
    return sig, dirs


def _propagate(offsets: np.ndarray) -> np.ndarray:
    out = offsets.copy()
    for j, parent in enumerate(PARENTS_31):
        if parent >= 0:
            out[:, j] += out[:, parent]
    return out


def generate_synthetic(spec: SyntheticSpec) -> Dataset:
    """Deterministic labeled dataset; classes are separable at low noise."""
    rng = np.random.default_rng(spec.seed)
    sig, dirs = class_signatures(spec.classes, rng)
    if spec.signatures is not None:
        sig = np.asarray(spec.signatures, dtype=np.float64)
    full = builtin_body_model("hdm05-31")
    model = builtin_body_model(spec.body_model_name)
    keep = list(range(31)) if spec.joints == 31 else list(full.subsets[f"bm{spec.joints}"])

    actions = []
    for c in range(spec.classes):
        for k in range(spec.actions_per_class):
            length = int(rng.integers(spec.min_length, spec.max_length + 1))
            t = np.arange(length) / spec.fps
            tempo = rng.uniform(0.9, 1.1)
            shift = rng.uniform(0, 2 * np.pi)
            gain = rng.uniform(0.8, 1.2)
            freq, phase, amp = sig[c, :, 0], sig[c, :, 1], sig[c, :, 2]
            wave = np.sin(2 * np.pi * freq[None, :] * tempo * t[:, None] + phase[None, :] + shift)
            offsets = (gain * amp[None, :] * wave)[:, :, None] * dirs[c][None, :, :]
            poses = REST_POSE_31[None, :, :] + _propagate(offsets)

            scale = rng.uniform(0.85, 1.15)
            yaw = rng.uniform(0, 2 * np.pi)
            place = np.array([rng.uniform(-2, 2), 0.0, rng.uniform(-2, 2)])
            cos, sin = np.cos(yaw), np.sin(yaw)
            rot = np.array([[cos, 0, sin], [0, 1, 0], [-sin, 0, cos]])
            poses = poses * scale @ rot.T + place
            if spec.noise > 0:
                poses = poses + rng.normal(scale=spec.noise, size=poses.shape)
            actions.append(
                Action(
                    id=f"c{c:02d}_a{k:03d}",
                    poses=poses[:, keep],
                    fps=spec.fps,
                    class_label=f"class_{c:02d}",
                )
            )
    return Dataset.from_actions(actions, model)
