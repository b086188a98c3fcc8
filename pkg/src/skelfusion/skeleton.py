"""Poses, actions, body models and the line-delimited action file format.

A pose is a ``(j, 3)`` float64 array of joint positions. An action stacks its
poses into a ``(l, j, 3)`` array. Every container here is an immutable value:
arrays are copied on construction and flagged read-only.
"""
from __future__ import annotations

import csv
import io
import json
import math
import os
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from skelfusion._io import atomic_write_text, sha256_bytes
from skelfusion.errors import DataValidationError

Pose = np.ndarray

#: ``fps`` value marking non-uniform sampling (key-pose output).
VARIABLE_FPS = 0.0


def _frozen(values, shape_msg: str, ndim: int) -> np.ndarray:
    arr = np.array(values, dtype=np.float64, copy=True)
    if arr.ndim != ndim or arr.shape[-1] != 3:
        raise DataValidationError(f"{shape_msg}: got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise DataValidationError(f"{shape_msg}: non-finite coordinate")
    arr.flags.writeable = False
    return arr


def as_pose(values) -> Pose:
    """Validate ``values`` as a single pose and return a read-only copy."""
    return _frozen(values, "pose must be a (j, 3) array of finite numbers", 2)


@dataclass(frozen=True, eq=False)
class Action:
    """A labeled or unlabeled sequence of poses.

    ``fps`` is positive for uniformly sampled actions; ``VARIABLE_FPS`` (0)
    marks actions whose poses were selected non-uniformly.
    """

    id: str
    poses: np.ndarray
    fps: float
    class_label: str | None = None

    def __post_init__(self):
        poses = _frozen(self.poses, f"action {self.id!r}: poses must be (l, j, 3)", 3)
        if poses.shape[0] == 0:
            raise DataValidationError(f"action {self.id!r}: empty action")
        if poses.shape[1] == 0:
            raise DataValidationError(f"action {self.id!r}: zero joints")
        if not (math.isfinite(self.fps) and self.fps >= 0):
            raise DataValidationError(f"action {self.id!r}: fps must be >= 0, got {self.fps}")
        object.__setattr__(self, "poses", poses)
        object.__setattr__(self, "fps", float(self.fps))

    @property
    def length(self) -> int:
        return self.poses.shape[0]

    @property
    def num_joints(self) -> int:
        return self.poses.shape[1]

    def with_poses(self, poses, fps: float | None = None) -> "Action":
        return replace(self, poses=poses, fps=self.fps if fps is None else fps)

    def equals(self, other: "Action") -> bool:
        """Exact value equality (ids, labels, fps and every coordinate)."""
        return (
            self.id == other.id
            and self.class_label == other.class_label
            and self.fps == other.fps
            and self.poses.shape == other.poses.shape
            and bool(np.array_equal(self.poses, other.poses))
        )


@dataclass(frozen=True)
class BodyModelDef:
    """Joint naming and the anatomical landmarks the transforms rely on."""

    joint_names: tuple[str, ...]
    root_index: int
    left_hip_index: int
    right_hip_index: int
    thighbone: tuple[int, int]
    height_chains: tuple[tuple[int, ...], ...]
    subsets: Mapping[str, tuple[int, ...]] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "joint_names", tuple(self.joint_names))
        object.__setattr__(self, "thighbone", tuple(int(i) for i in self.thighbone))
        object.__setattr__(
            self, "height_chains", tuple(tuple(int(i) for i in c) for c in self.height_chains)
        )
        object.__setattr__(
            self, "subsets", {str(k): tuple(int(i) for i in v) for k, v in self.subsets.items()}
        )
        self._validate()

    def _validate(self):
        j = len(self.joint_names)
        if j == 0:
            raise DataValidationError("body model has no joints")
        if len(set(self.joint_names)) != j:
            raise DataValidationError("body model joint names must be unique")

        def check(idx, what):
            if not (0 <= idx < j):
                raise DataValidationError(f"body model: {what} index {idx} out of range [0, {j})")

        check(self.root_index, "root")
        check(self.left_hip_index, "left_hip")
        check(self.right_hip_index, "right_hip")
        if self.left_hip_index == self.right_hip_index:
            raise DataValidationError("body model: left_hip and right_hip must differ")
        if len(self.thighbone) != 2:
            raise DataValidationError("body model: thighbone must be a (hip, knee) pair")
        for i in self.thighbone:
            check(i, "thighbone")
        if self.thighbone[0] == self.thighbone[1]:
            raise DataValidationError("body model: thighbone endpoints must be distinct")
        if not self.height_chains:
            raise DataValidationError("body model: at least one height chain required")
        for chain in self.height_chains:
            if len(chain) < 2:
                raise DataValidationError("body model: height chains need >= 2 joints")
            for i in chain:
                check(i, "height_chain")
        for name, idx in self.subsets.items():
            for i in idx:
                check(i, f"subset {name!r}")
            if len(set(idx)) != len(idx):
                raise DataValidationError(f"body model: subset {name!r} has duplicate joints")
            if self.root_index not in idx:
                raise DataValidationError(f"body model: subset {name!r} omits the root joint")

    @property
    def num_joints(self) -> int:
        return len(self.joint_names)

    def to_dict(self) -> dict:
        return {
            "joints": list(self.joint_names),
            "root": self.root_index,
            "left_hip": self.left_hip_index,
            "right_hip": self.right_hip_index,
            "thighbone": list(self.thighbone),
            "height_chain": [list(c) for c in self.height_chains],
            "subsets": {k: list(v) for k, v in self.subsets.items()},
        }

    @classmethod
    def from_dict(cls, doc: Mapping) -> "BodyModelDef":
        expected = {"joints", "root", "left_hip", "right_hip", "thighbone", "height_chain", "subsets"}
        keys = set(doc)
        if keys - expected:
            raise DataValidationError(f"body model: unknown keys {sorted(keys - expected)}")
        if (expected - {"subsets"}) - keys:
            raise DataValidationError(f"body model: missing keys {sorted(expected - keys - {'subsets'})}")
        try:
            return cls(
                joint_names=[str(n) for n in doc["joints"]],
                root_index=int(doc["root"]),
                left_hip_index=int(doc["left_hip"]),
                right_hip_index=int(doc["right_hip"]),
                thighbone=doc["thighbone"],
                height_chains=doc["height_chain"],
                subsets=doc.get("subsets", {}),
            )
        except (TypeError, ValueError) as exc:
            if isinstance(exc, DataValidationError):
                raise
            raise DataValidationError(f"body model: {exc}") from exc

    def induced(self, indices: Sequence[int]) -> "BodyModelDef":
        """Body model restricted to ``indices`` (in that order).

        Landmarks are remapped by position; height chains keep their retained
        joints in order and are dropped when fewer than two survive; subsets
        survive only if fully contained.
        """
        indices = [int(i) for i in indices]
        if len(set(indices)) != len(indices):
            raise DataValidationError("joint subset has duplicate indices")
        pos = {old: new for new, old in enumerate(indices)}
        needed = {
            "root": self.root_index,
            "left hip": self.left_hip_index,
            "right hip": self.right_hip_index,
            "thighbone hip": self.thighbone[0],
            "thighbone knee": self.thighbone[1],
        }
        for what, idx in needed.items():
            if idx not in pos:
                raise DataValidationError(
                    f"joint subset omits the {what} ({self.joint_names[idx]!r})"
                )
        chains = []
        for chain in self.height_chains:
            kept = tuple(pos[i] for i in chain if i in pos)
            if len(kept) >= 2:
                chains.append(kept)
        if not chains:
            raise DataValidationError("joint subset leaves no height chain with >= 2 joints")
        subsets = {
            name: tuple(pos[i] for i in idx)
            for name, idx in self.subsets.items()
            if all(i in pos for i in idx)
        }
        return BodyModelDef(
            joint_names=[self.joint_names[i] for i in indices],
            root_index=pos[self.root_index],
            left_hip_index=pos[self.left_hip_index],
            right_hip_index=pos[self.right_hip_index],
            thighbone=(pos[self.thighbone[0]], pos[self.thighbone[1]]),
            height_chains=chains,
            subsets=subsets,
        )


BUILTIN_BODY_MODELS = ("hdm05-31", "hdm05-14", "hdm05-12")


def builtin_body_model(name: str) -> BodyModelDef:
    """Shipped 31-joint model and its 14/12-joint simplifications."""
    text = resources.files("skelfusion.data").joinpath("hdm05_31.json").read_text("utf-8")
    full = BodyModelDef.from_dict(json.loads(text))
    if name == "hdm05-31":
        return full
    if name == "hdm05-14":
        return full.induced(full.subsets["bm14"])
    if name == "hdm05-12":
        return full.induced(full.subsets["bm12"])
    raise DataValidationError(f"unknown builtin body model {name!r}; choose from {BUILTIN_BODY_MODELS}")


def load_body_model(path: str | os.PathLike) -> BodyModelDef:
    """Read a body-model document; ``builtin:<name>`` selects a shipped model."""
    s = str(path)
    if s.startswith("builtin:"):
        return builtin_body_model(s.split(":", 1)[1])
    try:
        doc = json.loads(Path(path).read_text("utf-8"))
    except json.JSONDecodeError as exc:
        raise DataValidationError(f"{path}: invalid body model document: {exc}") from exc
    if not isinstance(doc, dict):
        raise DataValidationError(f"{path}: body model must be a JSON object")
    return BodyModelDef.from_dict(doc)


def save_body_model(model: BodyModelDef, path: str | os.PathLike) -> None:
    atomic_write_text(path, json.dumps(model.to_dict(), indent=2) + "\n")


@dataclass(frozen=True)
class Dataset:
    actions: tuple[Action, ...]
    classes: tuple[str, ...]
    body_model: BodyModelDef

    def __post_init__(self):
        object.__setattr__(self, "actions", tuple(self.actions))
        object.__setattr__(self, "classes", tuple(self.classes))
        ids = [a.id for a in self.actions]
        if len(set(ids)) != len(ids):
            dup = sorted({i for i in ids if ids.count(i) > 1})
            raise DataValidationError(f"duplicate action id(s): {dup[:5]}")
        if len(set(self.classes)) != len(self.classes):
            raise DataValidationError("duplicate class labels")
        known = set(self.classes)
        j = self.body_model.num_joints
        for a in self.actions:
            if a.class_label is not None and a.class_label not in known:
                raise DataValidationError(f"action {a.id!r}: class {a.class_label!r} not in classes")
            if a.num_joints != j:
                raise DataValidationError(
                    f"action {a.id!r}: {a.num_joints} joints, body model has {j}"
                )

    @classmethod
    def from_actions(cls, actions: Iterable[Action], body_model: BodyModelDef) -> "Dataset":
        actions = tuple(actions)
        classes = sorted({a.class_label for a in actions if a.class_label is not None})
        return cls(actions, tuple(classes), body_model)

    def class_index(self, label: str) -> int:
        return self.classes.index(label)

    def by_id(self) -> dict[str, Action]:
        return {a.id: a for a in self.actions}

    def subset(self, ids: Iterable[str]) -> list[Action]:
        table = self.by_id()
        return [table[i] for i in ids]


# -- interchange format -------------------------------------------------------

def action_to_record(action: Action) -> str:
    """One canonical line. ``json`` formats floats with ``repr``, so round-trips are exact."""
    doc = {
        "id": action.id,
        "class": action.class_label,
        "fps": action.fps,
        "frames": action.poses.tolist(),
    }
    return json.dumps(doc, separators=(",", ":"), allow_nan=False)


def action_from_record(doc, where: str = "") -> Action:
    if not isinstance(doc, dict):
        raise DataValidationError(f"{where}record must be an object")
    missing = {"id", "class", "fps", "frames"} - set(doc)
    if missing:
        raise DataValidationError(f"{where}missing field(s) {sorted(missing)}")
    extra = set(doc) - {"id", "class", "fps", "frames"}
    if extra:
        raise DataValidationError(f"{where}unknown field(s) {sorted(extra)}")
    if not isinstance(doc["id"], str):
        raise DataValidationError(f"{where}id must be a string")
    if doc["class"] is not None and not isinstance(doc["class"], str):
        raise DataValidationError(f"{where}class must be a string or null")
    frames = doc["frames"]
    if not isinstance(frames, list) or not frames:
        raise DataValidationError(f"{where}empty action")
    try:
        poses = np.array(frames, dtype=np.float64)
        fps = float(doc["fps"])
    except (TypeError, ValueError) as exc:
        raise DataValidationError(f"{where}malformed frames: {exc}") from exc
    try:
        return Action(id=doc["id"], poses=poses, fps=fps, class_label=doc["class"])
    except DataValidationError as exc:
        raise DataValidationError(f"{where}{exc}") from exc


def dumps_actions(actions: Iterable[Action]) -> str:
    return "".join(action_to_record(a) + "\n" for a in actions)


def parse_actions(text: str, source: str = "<string>") -> list[Action]:
    actions = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        where = f"{source}:{lineno}: "
        try:
            doc = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DataValidationError(f"{where}malformed record: {exc.msg}") from exc
        actions.append(action_from_record(doc, where))
    return actions


def load_actions(path: str | os.PathLike) -> list[Action]:
    return parse_actions(Path(path).read_text("utf-8"), str(path))


def load_dataset(path: str | os.PathLike, model: BodyModelDef) -> Dataset:
    """Read and validate an action file against ``model``."""
    return Dataset.from_actions(load_actions(path), model)


def save_dataset(dataset: Dataset | Iterable[Action], path: str | os.PathLike) -> None:
    actions = dataset.actions if isinstance(dataset, Dataset) else dataset
    try:
        atomic_write_text(path, dumps_actions(actions))
    except OSError as exc:
        raise DataValidationError(f"cannot write {path}: {exc}") from exc


def dataset_digest(dataset: Dataset) -> str:
    """Content hash over the canonical action records and the body model."""
    body = json.dumps(dataset.body_model.to_dict(), sort_keys=True)
    return sha256_bytes((body + "\n" + dumps_actions(dataset.actions)).encode("utf-8"))


# -- pose arithmetic ----------------------------------------------------------

def downsample(action: Action, factor: int) -> Action:
    """Keep every ``factor``-th pose starting with the first one."""
    if int(factor) != factor or factor < 1:
        raise DataValidationError(f"downsample factor must be a positive integer, got {factor}")
    factor = int(factor)
    if factor == 1:
        return action
    return action.with_poses(action.poses[::factor], fps=action.fps / factor)


def pose_dissimilarity(a: Pose, b: Pose) -> float:
    """Sum over joints of the Euclidean distance between corresponding joints."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DataValidationError(f"joint-count mismatch: {a.shape} vs {b.shape}")
    return float(np.sqrt(((a - b) ** 2).sum(axis=-1)).sum())


def thighbone_length(action: Action, model: BodyModelDef) -> float:
    """Mean hip-to-knee distance over the poses of ``action``."""
    hip, knee = model.thighbone
    lengths = np.linalg.norm(action.poses[:, hip] - action.poses[:, knee], axis=1)
    mean = float(lengths.mean())
    if not mean > 0:
        raise DataValidationError(f"action {action.id!r}: degenerate (zero-length) thighbone")
    return mean


# -- fold split -----------------------------------------------------------------

@dataclass(frozen=True)
class FoldSplit:
    assignment: Mapping[str, int]

    def ids(self, fold: int) -> list[str]:
        return sorted(i for i, f in self.assignment.items() if f == fold)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["action_id", "fold"])
        for action_id in sorted(self.assignment):
            writer.writerow([action_id, self.assignment[action_id]])
        return buf.getvalue()

    def save(self, path: str | os.PathLike) -> None:
        atomic_write_text(path, self.to_csv())

    @classmethod
    def load(cls, path: str | os.PathLike) -> "FoldSplit":
        assignment = {}
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header != ["action_id", "fold"]:
                raise DataValidationError(f"{path}: expected header 'action_id,fold'")
            for lineno, row in enumerate(reader, start=2):
                if len(row) != 2 or row[1] not in ("1", "2"):
                    raise DataValidationError(f"{path}:{lineno}: malformed fold row {row}")
                if row[0] in assignment:
                    raise DataValidationError(f"{path}:{lineno}: duplicate id {row[0]!r}")
                assignment[row[0]] = int(row[1])
        return cls(assignment)


def balanced_two_fold_split(dataset: Dataset, seed: int) -> FoldSplit:
    """Per-class balanced 2-fold assignment.

    Each class's ids are sorted, shuffled with one seeded generator (classes
    visited in sorted order) and dealt alternately. Classes with an odd count
    alternate which fold receives the extra action, so the two folds also stay
    within one action of each other overall.
    """
    rng = np.random.default_rng(seed)
    per_class: dict[str, list[str]] = {}
    for a in dataset.actions:
        if a.class_label is None:
            raise DataValidationError(f"action {a.id!r} is unlabeled; cannot split")
        per_class.setdefault(a.class_label, []).append(a.id)

    assignment: dict[str, int] = {}
    odd_seen = 0
    for label in sorted(per_class):
        ids = sorted(per_class[label])
        order = rng.permutation(len(ids))
        first = 1
        if len(ids) % 2 == 1:
            first = 1 if odd_seen % 2 == 0 else 2
            odd_seen += 1
        second = 3 - first
        for rank, k in enumerate(order):
            assignment[ids[k]] = first if rank % 2 == 0 else second
    return FoldSplit(assignment)


def drop_least_populated_classes(dataset: Dataset, count: int) -> Dataset:
    """Remove the ``count`` classes with fewest actions (ties by label).

    HDM05 preparation drops its 8 least populated classes (2,345 -> 2,328
    actions).
    """
    sizes: dict[str, int] = {c: 0 for c in dataset.classes}
    for a in dataset.actions:
        if a.class_label is not None:
            sizes[a.class_label] += 1
    dropped = set(sorted(sizes, key=lambda c: (sizes[c], c))[:count])
    kept = [a for a in dataset.actions if a.class_label not in dropped]
    return Dataset.from_actions(kept, dataset.body_model)
