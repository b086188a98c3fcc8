"""Action normalizations, augmentations and technique pipelines.

All transforms are pure: they return new ``Action`` values and never touch
their input. The vertical axis is ``y``.
"""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Literal, Mapping

import numpy as np

from skelfusion._io import derive_seed
from skelfusion.errors import DataValidationError
from skelfusion.skeleton import (
    VARIABLE_FPS,
    Action,
    BodyModelDef,
    pose_dissimilarity,
    thighbone_length,
)

log = logging.getLogger(__name__)

DEFAULT_TARGET_HEIGHT = 1.75
_HIP_EPS = 1e-9

NORMS = ("none", "p", "pos")
AUG_KINDS = ("none", "crop", "noise", "bodymodel", "keypose")


# -- normalizations -----------------------------------------------------------

def normalize_position(action: Action, model: BodyModelDef) -> Action:
    """Translate every pose so that its root joint sits at the origin."""
    poses = action.poses - action.poses[:, model.root_index : model.root_index + 1, :]
    # exact zero even when root coordinates are huge
    poses[:, model.root_index, :] = 0.0
    return action.with_poses(poses)


def _yaw_rotate(points: np.ndarray, about: np.ndarray, cos: float, sin: float) -> np.ndarray:
    # y is copied through untouched so vertical coordinates stay bit-exact
    out = points.copy()
    dx = points[:, 0] - about[0]
    dz = points[:, 2] - about[2]
    out[:, 0] = about[0] + (dx * cos + dz * sin)
    out[:, 2] = about[2] + (-dx * sin + dz * cos)
    return out


def normalize_orientation(
    action: Action,
    model: BodyModelDef,
    mode: Literal["per_pose", "first_pose"] = "per_pose",
) -> Action:
    """Rotate about the vertical axis so the left-to-right hip line points along +x.

    With ``mode="per_pose"`` each pose gets its own rotation; ``"first_pose"``
    applies the first pose's correction to the whole action. A pose whose hip
    line has no horizontal extent reuses the previous rotation (identity for
    the first pose) and triggers a warning.
    """
    if mode not in ("per_pose", "first_pose"):
        raise DataValidationError(f"unknown orientation mode {mode!r}")
    poses = np.array(action.poses)
    hips = poses[:, model.right_hip_index] - poses[:, model.left_hip_index]
    cos, sin = 1.0, 0.0
    degenerate = 0
    for i in range(poses.shape[0]):
        if mode == "per_pose" or i == 0:
            dx, dz = hips[i, 0], hips[i, 2]
            norm = math.hypot(dx, dz)
            if norm < _HIP_EPS:
                degenerate += 1
            else:
                cos, sin = dx / norm, dz / norm
        if cos != 1.0 or sin != 0.0:
            root = poses[i, model.root_index].copy()
            poses[i] = _yaw_rotate(poses[i], root, cos, sin)
    if degenerate:
        warnings.warn(
            f"action {action.id!r}: {degenerate} pose(s) with vertically coincident hips; "
            "previous rotation reused",
            RuntimeWarning,
            stacklevel=2,
        )
    return action.with_poses(poses)


def skeleton_height(action: Action, model: BodyModelDef) -> float:
    """Mean over poses (and over height chains) of the summed chain bone lengths."""
    totals = []
    for chain in model.height_chains:
        seg = action.poses[:, list(chain[1:])] - action.poses[:, list(chain[:-1])]
        totals.append(np.linalg.norm(seg, axis=2).sum(axis=1))
    return float(np.mean(totals))


def normalize_size(
    action: Action, model: BodyModelDef, target_height: float = DEFAULT_TARGET_HEIGHT
) -> Action:
    """Scale each pose about its root so the skeleton height equals ``target_height``."""
    if not target_height > 0:
        raise DataValidationError(f"target_height must be positive, got {target_height}")
    height = skeleton_height(action, model)
    if not height > 0:
        raise DataValidationError(f"action {action.id!r}: zero skeleton height")
    scale = target_height / height
    root = action.poses[:, model.root_index : model.root_index + 1, :]
    poses = root + (action.poses - root) * scale
    return action.with_poses(poses)


# -- augmentations ------------------------------------------------------------

def crop_count(length: int, range_pct: float) -> int:
    """Poses cut from each side: floor(range_pct / 200 * length), computed exactly.

    The range is read as the decimal it prints as, so ``10.6`` means 106/10
    rather than the nearest binary float (which is slightly below 10.6).
    """
    return math.floor(Fraction(str(range_pct)) * length / 200)


def crop(action: Action, range_pct: float) -> Action:
    """Trim the same number of poses from both ends of the action."""
    if not 0 <= range_pct < 100:
        raise DataValidationError(f"crop range must be in [0, 100), got {range_pct}")
    cut = crop_count(action.length, range_pct)
    if action.length - 2 * cut < 1:
        raise DataValidationError(f"action {action.id!r}: crop {range_pct}% leaves zero poses")
    if cut == 0:
        return action
    return action.with_poses(action.poses[cut : action.length - cut])


def add_noise(action: Action, range_pct: float, model: BodyModelDef, seed: int) -> Action:
    """Move every coordinate by an independent Uniform(-b, b) offset.

    ``b = range_pct / 100 * thighbone_length(action)``. The realized offset
    ``output - input`` never exceeds ``b`` in magnitude, rounding included.
    """
    if range_pct < 0:
        raise DataValidationError(f"noise range must be >= 0, got {range_pct}")
    bound = range_pct / 100.0 * thighbone_length(action, model)
    if bound == 0:
        return action
    rng = np.random.default_rng(seed)
    src = action.poses
    out = src + rng.uniform(-bound, bound, size=src.shape)
    # float rounding can push |out - src| past the bound by an ulp
    for _ in range(4):
        over = np.abs(out - src) > bound
        if not over.any():
            break
        out[over] = np.nextafter(out[over], src[over])
    return action.with_poses(out)


def simplify_body(
    action: Action, model: BodyModelDef, subset_name: str
) -> tuple[Action, BodyModelDef]:
    """Keep only the joints of a named subset; also returns the induced model."""
    if subset_name not in model.subsets:
        raise DataValidationError(
            f"unknown joint subset {subset_name!r}; available: {sorted(model.subsets)}"
        )
    if action.num_joints != model.num_joints:
        raise DataValidationError(
            f"action {action.id!r}: {action.num_joints} joints, body model has {model.num_joints}"
        )
    idx = list(model.subsets[subset_name])
    induced = model.induced(idx)
    return action.with_poses(action.poses[:, idx, :]), induced


def key_pose_indices(poses: np.ndarray, dist: float) -> list[int]:
    kept = [0]
    last = poses[0]
    for i in range(1, poses.shape[0]):
        if pose_dissimilarity(poses[i], last) > dist:
            kept.append(i)
            last = poses[i]
    return kept


def key_poses(action: Action, dist: float) -> Action:
    """Greedy key-pose selection; the result has variable frame rate."""
    if dist < 0:
        raise DataValidationError(f"key-pose dist must be >= 0, got {dist}")
    idx = key_pose_indices(action.poses, dist)
    return action.with_poses(action.poses[idx], fps=VARIABLE_FPS)


# -- technique specs ----------------------------------------------------------

@dataclass(frozen=True)
class NormalizationVariant:
    kind: str = "none"
    target_height: float = DEFAULT_TARGET_HEIGHT
    orientation_mode: str = "per_pose"

    def __post_init__(self):
        if self.kind not in NORMS:
            raise DataValidationError(f"normalization must be one of {NORMS}, got {self.kind!r}")
        if not self.target_height > 0:
            raise DataValidationError("target_height must be positive")
        if self.orientation_mode not in ("per_pose", "first_pose"):
            raise DataValidationError(f"unknown orientation mode {self.orientation_mode!r}")


_AUG_PARAMS = {
    "none": set(),
    "crop": {"range_pct"},
    "noise": {"range_pct", "seed"},
    "bodymodel": {"subset_name"},
    "keypose": {"dist"},
}


@dataclass(frozen=True)
class AugmentationSpec:
    kind: str = "none"
    range_pct: float | None = None
    subset_name: str | None = None
    dist: float | None = None
    seed: int | None = None

    def __post_init__(self):
        if self.kind not in _AUG_PARAMS:
            raise DataValidationError(f"augmentation kind must be one of {AUG_KINDS}, got {self.kind!r}")
        present = {k for k in ("range_pct", "subset_name", "dist", "seed") if getattr(self, k) is not None}
        required = set(_AUG_PARAMS[self.kind])
        if self.kind == "noise" and "seed" not in present:
            object.__setattr__(self, "seed", 0)
            present.add("seed")
        if present != required:
            raise DataValidationError(
                f"{self.kind} augmentation takes exactly {sorted(required)}, got {sorted(present)}"
            )
        if self.kind == "crop" and not 0 <= self.range_pct < 100:
            raise DataValidationError("crop range_pct must be in [0, 100)")
        if self.kind == "noise" and not 0 <= self.range_pct <= 100:
            raise DataValidationError("noise range_pct must be in [0, 100]")
        if self.kind == "keypose" and not self.dist >= 0:
            raise DataValidationError("keypose dist must be >= 0")

    def to_dict(self) -> dict:
        doc = {"kind": self.kind}
        for key in sorted(_AUG_PARAMS[self.kind]):
            doc[key] = getattr(self, key)
        return doc

    @classmethod
    def from_dict(cls, doc: Mapping | None) -> "AugmentationSpec":
        if doc is None:
            return cls()
        if not isinstance(doc, Mapping) or "kind" not in doc:
            raise DataValidationError(f"augmentation must be an object with a 'kind', got {doc!r}")
        kind = str(doc["kind"]).lower()
        if kind not in _AUG_PARAMS:
            raise DataValidationError(f"augmentation kind must be one of {AUG_KINDS}, got {kind!r}")
        extra = set(doc) - {"kind"} - _AUG_PARAMS[kind]
        if extra:
            raise DataValidationError(f"{kind} augmentation: unknown keys {sorted(extra)}")
        return cls(kind=kind, **{k: doc[k] for k in doc if k != "kind"})

    def label(self) -> str:
        if self.kind == "none":
            return "--"
        if self.kind == "crop":
            return f"Crop({self.range_pct:g}%)"
        if self.kind == "noise":
            return f"Noise({self.range_pct:g}%)"
        if self.kind == "bodymodel":
            digits = self.subset_name[2:] if self.subset_name[:2] == "bm" else ""
            return f"BodyModel({digits if digits.isdigit() else self.subset_name})"
        return f"KeyPose({self.dist:g})"


@dataclass(frozen=True)
class TechniqueSpec:
    """One pre-processing recipe; one classifier is trained per technique."""

    id: str
    normalization: NormalizationVariant = field(default_factory=NormalizationVariant)
    train_augmentation: AugmentationSpec = field(default_factory=AugmentationSpec)
    test_augmentation: AugmentationSpec = field(default_factory=AugmentationSpec)

    def augmentation(self, role: str) -> AugmentationSpec:
        if role == "train":
            return self.train_augmentation
        if role == "test":
            return self.test_augmentation
        raise DataValidationError(f"role must be 'train' or 'test', got {role!r}")

    def changes_format(self) -> bool:
        return "bodymodel" in (self.train_augmentation.kind, self.test_augmentation.kind)

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "norm": self.normalization.kind,
            "train_aug": self.train_augmentation.to_dict(),
            "test_aug": self.test_augmentation.to_dict(),
        }

    @classmethod
    def from_dict(
        cls,
        doc: Mapping,
        target_height: float = DEFAULT_TARGET_HEIGHT,
        orientation_mode: str = "per_pose",
    ) -> "TechniqueSpec":
        if not isinstance(doc, Mapping):
            raise DataValidationError(f"technique must be an object, got {doc!r}")
        extra = set(doc) - {"id", "norm", "train_aug", "test_aug"}
        if extra:
            raise DataValidationError(f"technique: unknown keys {sorted(extra)}")
        if "id" not in doc or not isinstance(doc["id"], str) or not doc["id"]:
            raise DataValidationError("technique needs a non-empty string 'id'")
        return cls(
            id=doc["id"],
            normalization=NormalizationVariant(
                str(doc.get("norm", "none")).lower(), target_height, orientation_mode
            ),
            train_augmentation=AugmentationSpec.from_dict(doc.get("train_aug")),
            test_augmentation=AugmentationSpec.from_dict(doc.get("test_aug")),
        )

    def describe(self) -> tuple[str, str, str]:
        """(norm, train aug, test aug) labels in the style of the results table."""
        norm = {"none": "--", "p": "P", "pos": "P+O+S"}[self.normalization.kind]
        return norm, self.train_augmentation.label(), self.test_augmentation.label()


def normalize(action: Action, model: BodyModelDef, variant: NormalizationVariant) -> Action:
    if variant.kind == "none":
        return action
    out = normalize_position(action, model)
    if variant.kind == "pos":
        out = normalize_orientation(out, model, variant.orientation_mode)
        out = normalize_size(out, model, variant.target_height)
    return out


def augment(
    action: Action, model: BodyModelDef, aug: AugmentationSpec
) -> tuple[Action, BodyModelDef]:
    if aug.kind == "none":
        return action, model
    if aug.kind == "crop":
        return crop(action, aug.range_pct), model
    if aug.kind == "noise":
        # one noise field per action; a shared seed would repeat the same offsets
        return add_noise(action, aug.range_pct, model, derive_seed(aug.seed, action.id)), model
    if aug.kind == "bodymodel":
        return simplify_body(action, model, aug.subset_name)
    return key_poses(action, aug.dist), model


def apply_pipeline(
    action: Action, model: BodyModelDef, spec: TechniqueSpec, role: str
) -> tuple[Action, BodyModelDef]:
    """Normalize (P, then O, then S as enabled) and apply the role's augmentation."""
    aug = spec.augmentation(role)
    out = normalize(action, model, spec.normalization)
    return augment(out, model, aug)


def output_model(model: BodyModelDef, spec: TechniqueSpec, role: str) -> BodyModelDef:
    """Body model of the pipeline's output without transforming any data."""
    aug = spec.augmentation(role)
    if aug.kind == "bodymodel":
        if aug.subset_name not in model.subsets:
            raise DataValidationError(f"unknown joint subset {aug.subset_name!r}")
        return model.induced(model.subsets[aug.subset_name])
    return model
