"""Strict-majority fusion and exact evaluation of every technique combination.

Each technique's classifier labels every test action once; keeping only the
correctly labeled ids (its true-positive list) is enough to score any subset
of techniques: an action is fused-correct exactly when more than ``k // 2`` of
the ``k`` selected lists contain it. Combinations are ``n``-bit masks where bit
``i`` selects technique ``i``.
"""
from __future__ import annotations

import csv
import io
import json
import math
import os
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Hashable, Iterable, Iterator, Sequence

import numpy as np

from skelfusion._io import atomic_write_text, sha256_bytes
from skelfusion.errors import CacheIntegrityError, DataValidationError

MAX_TECHNIQUES = 24


class _Unknown:
    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self):
        return "Unknown"

    def __reduce__(self):
        return (_Unknown, ())


#: Fusion outcome when no class gathers a strict majority; never equal to a class.
UNKNOWN = _Unknown()


def strict_majority(votes: Sequence[Hashable]):
    """The class voted by more than ``len(votes) // 2`` classifiers, else ``UNKNOWN``."""
    if not votes:
        raise DataValidationError("strict_majority needs at least one vote")
    label, count = Counter(votes).most_common(1)[0]
    return label if count > len(votes) // 2 else UNKNOWN


def fuse_classify(q, model, techniques, models, classifier=None):
    """Three-stage online fusion of one action.

    Each technique's test pipeline is applied to ``q``, every variant is
    classified by its own model and the predicted class indices are fused by
    strict majority. ``classifier(params, action) -> Prediction`` defaults to
    the Bi-LSTM inference entry point.
    """
    from skelfusion import lstm
    from skelfusion.preprocess import apply_pipeline

    techniques = list(techniques)
    models = list(models)
    if not techniques:
        raise DataValidationError("fuse_classify needs at least one technique")
    if len(techniques) != len(models):
        raise DataValidationError(f"{len(techniques)} techniques but {len(models)} models")
    classify = classifier or (lambda params, action: lstm.classify(action, params))
    votes = []
    for spec, params in zip(techniques, models):
        variant, _ = apply_pipeline(q, model, spec, "test")
        votes.append(classify(params, variant).predicted_class_index)
    return strict_majority(votes)


# -- classification counts ------------------------------------------------------

def naive_combination_count(n: int) -> int:
    """Classifications per test action when every combination is run from scratch: n * 2**(n-1)."""
    if n < 1:
        raise DataValidationError("n must be >= 1")
    return n * 2 ** (n - 1)


def naive_combination_sum(n: int) -> int:
    """The same count as the explicit sum over k of k * C(n, k)."""
    if n < 1:
        raise DataValidationError("n must be >= 1")
    return sum(k * math.comb(n, k) for k in range(1, n + 1))


def cached_classification_count(n: int, test_actions: int) -> int:
    if n < 1 or test_actions < 0:
        raise DataValidationError("n must be >= 1 and test_actions >= 0")
    return n * test_actions


# -- partial outputs and true-positive lists -------------------------------------

@dataclass(frozen=True)
class PartialOutputs:
    technique_id: str
    rows: tuple[tuple[str, str, str], ...]  # (action id, true class, predicted class)

    def __post_init__(self):
        object.__setattr__(self, "rows", tuple(tuple(str(v) for v in r) for r in self.rows))
        ids = [r[0] for r in self.rows]
        if len(set(ids)) != len(ids):
            raise DataValidationError(f"technique {self.technique_id!r}: duplicate action ids")

    def ids(self) -> set[str]:
        return {r[0] for r in self.rows}

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["action_id", "true_class", "predicted_class"])
        writer.writerows(self.rows)
        return buf.getvalue()

    @classmethod
    def from_csv(cls, technique_id: str, text: str, source: str = "<csv>") -> "PartialOutputs":
        reader = csv.reader(io.StringIO(text))
        if next(reader, None) != ["action_id", "true_class", "predicted_class"]:
            raise DataValidationError(f"{source}: expected header action_id,true_class,predicted_class")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 3:
                raise DataValidationError(f"{source}:{lineno}: expected 3 columns, got {len(row)}")
            rows.append(tuple(row))
        return cls(technique_id, tuple(rows))


@dataclass(frozen=True)
class TruePositiveList:
    technique_id: str
    ids: tuple[str, ...]  # sorted

    def __post_init__(self):
        object.__setattr__(self, "ids", tuple(sorted(set(self.ids))))


def build_true_positive_lists(outputs: Sequence[PartialOutputs]) -> list[TruePositiveList]:
    if outputs:
        reference = outputs[0].ids()
        for o in outputs[1:]:
            if o.ids() != reference:
                raise DataValidationError(
                    f"technique {o.technique_id!r} covers a different set of test actions "
                    f"than {outputs[0].technique_id!r}"
                )
    return [
        TruePositiveList(o.technique_id, tuple(a for a, t, p in o.rows if t == p)) for o in outputs
    ]


# -- combination evaluation -------------------------------------------------------

@dataclass(frozen=True)
class CombinationResult:
    mask: int
    members: tuple[str, ...]
    accuracy: float

    @property
    def k(self) -> int:
        return len(self.members)


def mask_members(mask: int, ids: Sequence[str]) -> tuple[str, ...]:
    return tuple(ids[i] for i in range(len(ids)) if mask >> i & 1)


def _check_mask(mask: int, n: int):
    if mask <= 0:
        raise DataValidationError("combination must select at least one technique")
    if mask >> n:
        raise DataValidationError(f"combination mask {mask:#x} selects techniques beyond n={n}")


def evaluate_combination_fast(
    tp: Sequence[TruePositiveList], combination: int, total: int
) -> CombinationResult:
    """Fused accuracy of one combination from its true-positive lists alone."""
    _check_mask(combination, len(tp))
    if total < 1:
        raise DataValidationError("total must be positive")
    selected = [tp[i] for i in range(len(tp)) if combination >> i & 1]
    k = len(selected)
    dense: dict[str, int] = {}
    for lst in selected:
        for a in lst.ids:
            dense.setdefault(a, len(dense))
    counts = np.zeros(len(dense), dtype=np.int64)
    for lst in selected:
        counts[[dense[a] for a in lst.ids]] += 1
    retained = int((counts > k // 2).sum())
    return CombinationResult(combination, tuple(l.technique_id for l in selected), retained / total)


class TruePositiveMatrix:
    """Dense 0/1 matrix (techniques x test actions) for bulk combination scoring."""

    def __init__(self, tp: Sequence[TruePositiveList], total: int, universe: Iterable[str] | None = None):
        if total < 1:
            raise DataValidationError("total must be positive")
        self.technique_ids = [t.technique_id for t in tp]
        ids = sorted(set(universe) if universe is not None else {a for t in tp for a in t.ids})
        index = {a: i for i, a in enumerate(ids)}
        self.total = total
        self.matrix = np.zeros((len(tp), max(len(ids), 1)), dtype=np.float32)
        for r, t in enumerate(tp):
            try:
                self.matrix[r, [index[a] for a in t.ids]] = 1.0
            except KeyError as exc:
                raise DataValidationError(f"true-positive id {exc} outside the test fold") from exc

    @property
    def n(self) -> int:
        return len(self.technique_ids)

    def retained(self, masks: np.ndarray) -> np.ndarray:
        """Number of fused-correct actions for each mask in ``masks``."""
        masks = np.asarray(masks, dtype=np.int64)
        bits = ((masks[:, None] >> np.arange(self.n)[None, :]) & 1).astype(np.float32)
        counts = bits @ self.matrix
        k = bits.sum(axis=1).astype(np.int64)
        return (counts > (k // 2)[:, None]).sum(axis=1)

    def accuracies(self, chunk: int = 4096, workers: int = 1) -> np.ndarray:
        """Fused accuracy for every mask 0 .. 2**n - 1 (entry 0 is left at 0)."""
        size = 1 << self.n
        starts = list(range(1, size, chunk))

        def run(start):
            return self.retained(np.arange(start, min(start + chunk, size)))

        if workers > 1 and len(starts) > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                parts = list(pool.map(run, starts))
        else:
            parts = [run(s) for s in starts]
        out = np.zeros(size, dtype=np.float64)
        if parts:
            out[1:] = np.concatenate(parts) / self.total
        return out


def _guard(n: int, allow_large: bool):
    if n < 1:
        raise DataValidationError("need at least one technique")
    if n > MAX_TECHNIQUES and not allow_large:
        raise DataValidationError(
            f"{n} techniques means 2**{n} combinations; pass allow_large=True to proceed"
        )


def all_combination_accuracies(
    tp: Sequence[TruePositiveList],
    total: int,
    *,
    universe: Iterable[str] | None = None,
    allow_large: bool = False,
    workers: int = 1,
) -> np.ndarray:
    _guard(len(tp), allow_large)
    return TruePositiveMatrix(tp, total, universe).accuracies(workers=workers)


def evaluate_all_combinations(
    tp: Sequence[TruePositiveList],
    total: int,
    *,
    allow_large: bool = False,
    workers: int = 1,
) -> Iterator[CombinationResult]:
    """Every non-empty combination, in ascending mask order."""
    acc = all_combination_accuracies(tp, total, allow_large=allow_large, workers=workers)
    ids = [t.technique_id for t in tp]
    for mask in range(1, 1 << len(tp)):
        yield CombinationResult(mask, mask_members(mask, ids), float(acc[mask]))


@dataclass(frozen=True)
class TopRow:
    k: int
    rank: int
    mask: int
    members: tuple[str, ...]
    accuracy: float


def top_combinations(
    results: Iterable[CombinationResult], cardinalities: Iterable[int], top_m: int
) -> list[TopRow]:
    """Best ``top_m`` combinations per requested size; ties go to the smaller mask."""
    wanted = sorted(set(int(k) for k in cardinalities))
    buckets: dict[int, list[CombinationResult]] = {k: [] for k in wanted}
    for r in results:
        if r.k in buckets:
            buckets[r.k].append(r)
    rows = []
    for k in wanted:
        best = sorted(buckets[k], key=lambda r: (-r.accuracy, r.mask))[:top_m]
        rows.extend(TopRow(k, i + 1, r.mask, r.members, r.accuracy) for i, r in enumerate(best))
    return rows


def fusion_accuracy_equivalence_check(
    tp: Sequence[TruePositiveList], outputs: Sequence[PartialOutputs], combination: int
) -> bool:
    """Compare per-action strict-majority fusion of stored predictions with TP counting."""
    _check_mask(combination, len(outputs))
    sel = [i for i in range(len(outputs)) if combination >> i & 1]
    k = len(sel)
    tables = [{a: (t, p) for a, t, p in outputs[i].rows} for i in sel]
    tp_sets = [set(tp[i].ids) for i in sel]
    for action_id in tables[0]:
        truth = tables[0][action_id][0]
        fused = strict_majority([tbl[action_id][1] for tbl in tables])
        slow_correct = fused is not UNKNOWN and fused == truth
        fast_correct = sum(action_id in s for s in tp_sets) > k // 2
        if slow_correct != fast_correct:
            return False
    return True


def slow_combination_accuracy(outputs: Sequence[PartialOutputs], combination: int) -> float:
    """Fused accuracy by re-running strict majority per action on stored predictions."""
    _check_mask(combination, len(outputs))
    sel = [outputs[i] for i in range(len(outputs)) if combination >> i & 1]
    tables = [{a: p for a, _, p in o.rows} for o in sel]
    correct = 0
    for a, truth, _ in sel[0].rows:
        fused = strict_majority([t[a] for t in tables])
        correct += fused is not UNKNOWN and fused == truth
    return correct / len(sel[0].rows)


# -- persistence ------------------------------------------------------------------

MANIFEST = "manifest.json"


@dataclass
class CacheManifest:
    """Describes one fold's partial-output cache and pins its inputs."""

    fold: int
    dataset_hash: str
    config_hash: str
    techniques: dict[str, dict] = field(default_factory=dict)  # id -> {"file", "sha256", "stats"}

    def to_json(self) -> str:
        return json.dumps(
            {
                "fold": self.fold,
                "dataset_hash": self.dataset_hash,
                "config_hash": self.config_hash,
                "techniques": self.techniques,
            },
            indent=2,
            sort_keys=True,
        ) + "\n"

    @classmethod
    def load(cls, directory: str | os.PathLike) -> "CacheManifest":
        path = Path(directory) / MANIFEST
        if not path.exists():
            raise CacheIntegrityError(f"{path}: manifest missing")
        try:
            doc = json.loads(path.read_text("utf-8"))
            return cls(int(doc["fold"]), doc["dataset_hash"], doc["config_hash"], dict(doc["techniques"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise CacheIntegrityError(f"{path}: unreadable manifest: {exc}") from exc


def write_partial_outputs(directory: str | os.PathLike, outputs: PartialOutputs) -> tuple[str, str]:
    """Write one technique's CSV; returns (file name, sha256)."""
    name = f"{outputs.technique_id}.csv"
    text = outputs.to_csv()
    atomic_write_text(Path(directory) / name, text)
    return name, sha256_bytes(text.encode("utf-8"))


def load_cache(
    directory: str | os.PathLike,
    *,
    dataset_hash: str | None = None,
    config_hash: str | None = None,
    fold: int | None = None,
) -> tuple[CacheManifest, list[PartialOutputs]]:
    """Load and verify a fold cache. Any mismatch raises ``CacheIntegrityError``."""
    directory = Path(directory)
    manifest = CacheManifest.load(directory)
    if dataset_hash is not None and manifest.dataset_hash != dataset_hash:
        raise CacheIntegrityError(f"{directory}: cache was built from a different dataset")
    if config_hash is not None and manifest.config_hash != config_hash:
        raise CacheIntegrityError(f"{directory}: cache was built with a different configuration")
    if fold is not None and manifest.fold != fold:
        raise CacheIntegrityError(f"{directory}: cache belongs to fold {manifest.fold}, not {fold}")
    outputs = []
    for tid, entry in manifest.techniques.items():
        path = directory / entry["file"]
        if not path.exists():
            raise CacheIntegrityError(f"{path}: listed in manifest but missing")
        data = path.read_bytes()
        if sha256_bytes(data) != entry["sha256"]:
            raise CacheIntegrityError(f"{path}: content does not match manifest hash")
        outputs.append(PartialOutputs.from_csv(tid, data.decode("utf-8"), str(path)))
    return manifest, outputs


def write_combination_report(path: str | os.PathLike, rows: Iterable[tuple[int, Sequence[str], float]]) -> None:
    """CSV ``mask,k,member_ids,accuracy``; member ids are ';'-joined."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["mask", "k", "member_ids", "accuracy"])
    for mask, members, acc in rows:
        writer.writerow([mask, len(members), ";".join(members), repr(float(acc))])
    atomic_write_text(path, buf.getvalue())


def read_combination_report(path: str | os.PathLike) -> list[CombinationResult]:
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            members = tuple(row["member_ids"].split(";")) if row["member_ids"] else ()
            out.append(CombinationResult(int(row["mask"]), members, float(row["accuracy"])))
    return out
