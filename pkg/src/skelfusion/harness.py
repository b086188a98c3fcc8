"""Two-fold experiments: one classifier per technique, cached outputs, fusion.

A fold run ``r`` trains on fold ``r`` and evaluates on the other fold. For
every (technique, run) job the classifier is evaluated after each epoch and
the best epoch's predictions are cached; standalone accuracies are the mean of
the two runs' best accuracies, and each combination's fused accuracy is the
mean over the two runs.
"""
from __future__ import annotations

import json
import logging
import os
import re
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from skelfusion import fusion, lstm
from skelfusion._io import atomic_write_text, derive_seed, sha256_bytes
from skelfusion.errors import DataValidationError, FormatMixError, SkelfusionError
from skelfusion.preprocess import (
    DEFAULT_TARGET_HEIGHT,
    TechniqueSpec,
    apply_pipeline,
    output_model,
)
from skelfusion.skeleton import (
    Action,
    BodyModelDef,
    Dataset,
    FoldSplit,
    balanced_two_fold_split,
    dataset_digest,
    downsample,
    load_body_model,
    load_dataset,
)

log = logging.getLogger(__name__)

RUNS = (1, 2)
_ID_RE = re.compile(r"^[A-Za-z0-9][A-Za-z0-9._+-]*$")


# -- configuration ----------------------------------------------------------------

@dataclass(frozen=True)
class ExperimentConfig:
    dataset: Path
    body_model: str
    techniques: tuple[TechniqueSpec, ...]
    train: lstm.TrainConfig = field(default_factory=lstm.TrainConfig)
    embed_dim: int = 48
    hidden_dim: int = 1024
    downsample: int = 10
    fold_seed: int = 0
    cardinalities: tuple[int, ...] = (3, 5, 7, 9)
    top_m: int = 5
    output_dir: Path = Path("results")
    target_height: float = DEFAULT_TARGET_HEIGHT
    orientation_mode: str = "per_pose"
    workers: int = 1

    def __post_init__(self):
        if not self.techniques:
            raise DataValidationError("config needs at least one technique")
        ids = [t.id for t in self.techniques]
        if len(set(ids)) != len(ids):
            raise DataValidationError("technique ids must be unique")
        for tid in ids:
            if not _ID_RE.match(tid):
                raise DataValidationError(f"technique id {tid!r} must match {_ID_RE.pattern}")
        if self.downsample < 1:
            raise DataValidationError("downsample must be >= 1")
        if self.top_m < 1 or any(k < 1 for k in self.cardinalities):
            raise DataValidationError("top_m and cardinalities must be positive")
        if self.workers < 1:
            raise DataValidationError("workers must be >= 1")
        lstm.Dims(1, self.embed_dim, self.hidden_dim, 1)

    def technique(self, tid: str) -> TechniqueSpec:
        for t in self.techniques:
            if t.id == tid:
                return t
        raise DataValidationError(f"unknown technique {tid!r}")

    def settings_hash(self) -> str:
        """Hash of every setting shared by all jobs (techniques, paths and workers excluded)."""
        doc = {
            "train": asdict(self.train),
            "embed_dim": self.embed_dim,
            "hidden_dim": self.hidden_dim,
            "downsample": self.downsample,
            "fold_seed": self.fold_seed,
            "target_height": self.target_height,
            "orientation_mode": self.orientation_mode,
        }
        return sha256_bytes(json.dumps(doc, sort_keys=True).encode("utf-8"))

    def to_dict(self) -> dict:
        return {
            "dataset": str(self.dataset),
            "body_model": self.body_model,
            "techniques": [t.to_dict() for t in self.techniques],
            "train": asdict(self.train),
            "model": {"embed_dim": self.embed_dim, "hidden_dim": self.hidden_dim},
            "downsample": self.downsample,
            "fold_seed": self.fold_seed,
            "report": {"cardinalities": list(self.cardinalities), "top_m": self.top_m},
            "output_dir": str(self.output_dir),
            "normalization": {
                "target_height": self.target_height,
                "orientation_mode": self.orientation_mode,
            },
            "workers": self.workers,
        }

    @classmethod
    def from_dict(cls, doc: dict, base_dir: str | os.PathLike = ".") -> "ExperimentConfig":
        """Build from a config document; relative paths resolve against ``base_dir``."""
        top = {"dataset", "body_model", "techniques", "train", "model", "downsample", "fold_seed",
               "report", "output_dir", "normalization", "workers"}
        _no_unknown(doc, top, "config")
        for key in ("dataset", "body_model", "techniques"):
            if key not in doc:
                raise DataValidationError(f"config: missing required key {key!r}")
        base = Path(base_dir)

        def resolve(p):
            p = str(p)
            if p.startswith("builtin:"):
                return p
            return str(Path(p) if Path(p).is_absolute() else base / p)

        norm = doc.get("normalization", {})
        _no_unknown(norm, {"target_height", "orientation_mode"}, "normalization")
        target_height = float(norm.get("target_height", DEFAULT_TARGET_HEIGHT))
        orientation_mode = norm.get("orientation_mode", "per_pose")
        train = doc.get("train", {})
        _no_unknown(train, set(lstm.TrainConfig.__dataclass_fields__), "train")
        model = doc.get("model", {})
        _no_unknown(model, {"embed_dim", "hidden_dim"}, "model")
        rep = doc.get("report", {})
        _no_unknown(rep, {"cardinalities", "top_m"}, "report")
        if not isinstance(doc["techniques"], list):
            raise DataValidationError("config: techniques must be a list")
        try:
            return cls(
                dataset=Path(resolve(doc["dataset"])),
                body_model=resolve(doc["body_model"]),
                techniques=tuple(
                    TechniqueSpec.from_dict(t, target_height, orientation_mode) for t in doc["techniques"]
                ),
                train=lstm.TrainConfig(**train),
                embed_dim=int(model.get("embed_dim", 48)),
                hidden_dim=int(model.get("hidden_dim", 1024)),
                downsample=int(doc.get("downsample", 10)),
                fold_seed=int(doc.get("fold_seed", 0)),
                cardinalities=tuple(int(k) for k in rep.get("cardinalities", (3, 5, 7, 9))),
                top_m=int(rep.get("top_m", 5)),
                output_dir=Path(resolve(doc.get("output_dir", "results"))),
                target_height=target_height,
                orientation_mode=orientation_mode,
                workers=int(doc.get("workers", 1)),
            )
        except TypeError as exc:
            raise DataValidationError(f"config: {exc}") from exc

    @classmethod
    def load(cls, path: str | os.PathLike) -> "ExperimentConfig":
        path = Path(path)
        try:
            doc = json.loads(path.read_text("utf-8"))
        except json.JSONDecodeError as exc:
            raise DataValidationError(f"{path}: invalid JSON: {exc}") from exc
        if not isinstance(doc, dict):
            raise DataValidationError(f"{path}: config must be a JSON object")
        return cls.from_dict(doc, path.parent)


def _no_unknown(doc, allowed: set, where: str):
    if not isinstance(doc, dict):
        raise DataValidationError(f"{where}: expected an object")
    extra = set(doc) - allowed
    if extra:
        raise DataValidationError(f"{where}: unknown keys {sorted(extra)}")


# -- data preparation ---------------------------------------------------------------

def prepare_variant(
    action: Action, model: BodyModelDef, spec: TechniqueSpec, role: str, factor: int
) -> Action:
    """Downsample (unless the role's augmentation picks key poses), then pre-process."""
    if spec.augmentation(role).kind != "keypose":
        action = downsample(action, factor)
    return apply_pipeline(action, model, spec, role)[0]


def fold_ids(split: FoldSplit, run: int) -> tuple[list[str], list[str]]:
    """(training ids, test ids) for a fold run."""
    train_ids = split.ids(run)
    test_ids = split.ids(3 - run)
    if set(train_ids) & set(test_ids):
        raise DataValidationError("fold split assigns an action to both folds")
    return train_ids, test_ids


def load_inputs(config: ExperimentConfig) -> tuple[Dataset, FoldSplit]:
    model = load_body_model(config.body_model)
    dataset = load_dataset(config.dataset, model)
    if len(dataset.classes) < 1:
        raise DataValidationError("dataset has no labeled actions")
    return dataset, balanced_two_fold_split(dataset, config.fold_seed)


# -- one (technique, run) job -----------------------------------------------------

@dataclass
class JobResult:
    technique_id: str
    run: int
    ok: bool
    error: str = ""
    best_epoch: int = 0
    best_accuracy: float = 0.0
    train_accuracy: float = 0.0
    epochs: list = field(default_factory=list)  # [epoch, mean loss, test accuracy]
    rows: list = field(default_factory=list)  # (action id, true label, predicted label)

    def stats(self) -> dict:
        return {
            "best_epoch": self.best_epoch,
            "best_accuracy": self.best_accuracy,
            "train_accuracy": self.train_accuracy,
            "epochs": self.epochs,
        }


def train_technique(
    dataset: Dataset,
    split: FoldSplit,
    config: ExperimentConfig,
    spec: TechniqueSpec,
    run: int,
) -> tuple[JobResult, lstm.BiLstmParams]:
    """Train one classifier for one fold run, tracking test accuracy per epoch."""
    model = dataset.body_model
    train_ids, test_ids = fold_ids(split, run)
    cls = {c: i for i, c in enumerate(dataset.classes)}
    table = dataset.by_id()
    train_set = [
        (prepare_variant(table[i], model, spec, "train", config.downsample), cls[table[i].class_label])
        for i in train_ids
    ]
    test_set = [
        (prepare_variant(table[i], model, spec, "test", config.downsample), cls[table[i].class_label])
        for i in test_ids
    ]
    joints = output_model(model, spec, "train").num_joints
    if output_model(model, spec, "test").num_joints != joints:
        raise FormatMixError(f"technique {spec.id!r}: training and test poses differ in joint count")
    dims = lstm.Dims(joints, config.embed_dim, config.hidden_dim, len(dataset.classes))
    train_cfg = lstm.TrainConfig(**{**asdict(config.train), "seed": derive_seed(config.train.seed, spec.id, run)})

    result = JobResult(spec.id, run, ok=True)
    best = {"params": None}

    def on_epoch(epoch, params, mean_loss):
        acc = lstm.evaluate(params, test_set).accuracy
        result.epochs.append([epoch, mean_loss, acc])
        if best["params"] is None or acc > result.best_accuracy:
            result.best_epoch, result.best_accuracy = epoch, acc
            best["params"] = params.copy()
        log.debug("%s run %d epoch %d loss %.4f acc %.4f", spec.id, run, epoch, mean_loss, acc)

    params = lstm.train(train_set, train_cfg, dims, on_epoch=on_epoch)
    result.train_accuracy = lstm.evaluate(params, train_set).accuracy
    chosen = best["params"] if best["params"] is not None else params
    if best["params"] is None:
        result.best_accuracy = lstm.evaluate(params, test_set).accuracy
    evaluation = lstm.evaluate(chosen, test_set)
    result.rows = [
        (aid, dataset.classes[t], dataset.classes[p]) for aid, t, p in evaluation.rows
    ]
    return result, chosen


def _job(args) -> JobResult:
    dataset, split, config, tid, run = args
    spec = config.technique(tid)
    try:
        result, _ = train_technique(dataset, split, config, spec, run)
        log.info("%s run %d: best accuracy %.4f (epoch %d)", tid, run, result.best_accuracy, result.best_epoch)
        return result
    except Exception as exc:  # noqa: BLE001 -- one failed technique must not sink the run
        log.warning("%s run %d failed: %s", tid, run, exc)
        return JobResult(tid, run, ok=False, error=f"{type(exc).__name__}: {exc}")


def _cache_dir(config: ExperimentConfig, run: int) -> Path:
    return config.output_dir / "cache" / f"run{run}"


def _reusable(manifest: fusion.CacheManifest | None, config, ds_hash, spec: TechniqueSpec, run: int):
    if manifest is None or manifest.dataset_hash != ds_hash or manifest.config_hash != config.settings_hash():
        return None
    entry = manifest.techniques.get(spec.id)
    if not entry or entry.get("spec") != spec.to_dict():
        return None
    path = _cache_dir(config, run) / entry["file"]
    if not path.exists() or sha256_bytes(path.read_bytes()) != entry["sha256"]:
        return None
    outputs = fusion.PartialOutputs.from_csv(spec.id, path.read_text("utf-8"), str(path))
    s = entry["stats"]
    return JobResult(spec.id, run, True, "", s["best_epoch"], s["best_accuracy"], s["train_accuracy"],
                     s["epochs"], list(outputs.rows))


def run_jobs(
    dataset: Dataset,
    split: FoldSplit,
    config: ExperimentConfig,
    technique_ids: Sequence[str],
    workers: int | None = None,
    reuse_cache: bool = True,
) -> dict[tuple[str, int], JobResult]:
    """Train (or reuse from cache) every (technique, run) job and persist the caches."""
    workers = workers or config.workers
    ds_hash = dataset_digest(dataset)
    manifests = {}
    for run in RUNS:
        try:
            manifests[run] = fusion.CacheManifest.load(_cache_dir(config, run)) if reuse_cache else None
        except SkelfusionError:
            manifests[run] = None

    results: dict[tuple[str, int], JobResult] = {}
    pending = []
    for run in RUNS:
        for tid in technique_ids:
            reused = _reusable(manifests[run], config, ds_hash, config.technique(tid), run)
            if reused is not None:
                log.info("%s run %d: reusing cached outputs", tid, run)
                results[(tid, run)] = reused
            else:
                pending.append((tid, run))

    args = [(dataset, split, config, tid, run) for tid, run in pending]
    if workers > 1 and len(args) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            done = list(pool.map(_job, args))
    else:
        done = [_job(a) for a in args]
    for (tid, run), res in zip(pending, done):
        results[(tid, run)] = res

    for run in RUNS:
        old = manifests[run]
        keep_old = old is not None and old.dataset_hash == ds_hash and old.config_hash == config.settings_hash()
        manifest = fusion.CacheManifest(run, ds_hash, config.settings_hash(), dict(old.techniques) if keep_old else {})
        directory = _cache_dir(config, run)
        for tid in technique_ids:
            res = results[(tid, run)]
            if not res.ok:
                manifest.techniques.pop(tid, None)
                continue
            name, digest = fusion.write_partial_outputs(directory, fusion.PartialOutputs(tid, tuple(res.rows)))
            manifest.techniques[tid] = {
                "file": name,
                "sha256": digest,
                "spec": config.technique(tid).to_dict(),
                "stats": res.stats(),
            }
        directory.mkdir(parents=True, exist_ok=True)
        atomic_write_text(directory / fusion.MANIFEST, manifest.to_json())
    return results


# -- full experiment ----------------------------------------------------------------

@dataclass
class StandaloneRow:
    technique_id: str
    norm: str
    train_aug: str
    test_aug: str
    status: str
    accuracy: float
    run_accuracies: tuple[float, ...]
    train_accuracies: tuple[float, ...]
    best_epochs: tuple[int, ...]
    error: str = ""


@dataclass
class ExperimentResults:
    standalone: list[StandaloneRow]
    technique_ids: list[str]  # completed techniques, mask bit order
    accuracies: np.ndarray  # fused accuracy per mask, averaged over runs
    run_accuracies: dict[int, np.ndarray]
    cardinalities: tuple[int, ...]
    top_m: int
    epochs: list[tuple[str, int, int, float, float]] = field(default_factory=list)

    def combinations(self) -> list[fusion.CombinationResult]:
        return [
            fusion.CombinationResult(m, fusion.mask_members(m, self.technique_ids), float(self.accuracies[m]))
            for m in range(1, len(self.accuracies))
        ]

    def top(self) -> list[fusion.TopRow]:
        return fusion.top_combinations(self.combinations(), self.cardinalities, self.top_m)


def fuse_job_results(
    results: dict[tuple[str, int], JobResult], technique_ids: Sequence[str], workers: int = 1
) -> tuple[dict[int, np.ndarray], np.ndarray]:
    """Fused accuracy of every combination per run and averaged over runs."""
    per_run = {}
    for run in RUNS:
        outputs = [fusion.PartialOutputs(tid, tuple(results[(tid, run)].rows)) for tid in technique_ids]
        per_run[run] = combination_accuracies(outputs, workers)
    return per_run, np.mean([per_run[r] for r in RUNS], axis=0)


def combination_accuracies(outputs: Sequence[fusion.PartialOutputs], workers: int = 1) -> np.ndarray:
    tp = fusion.build_true_positive_lists(outputs)
    universe = outputs[0].ids()
    return fusion.all_combination_accuracies(tp, len(universe), universe=universe, workers=workers)


def run_experiment(config: ExperimentConfig, workers: int | None = None, write: bool = True) -> ExperimentResults:
    from skelfusion.report import write_report

    dataset, split = load_inputs(config)
    if write:
        config.output_dir.mkdir(parents=True, exist_ok=True)
        split.save(config.output_dir / "folds.csv")
    ids = [t.id for t in config.techniques]
    if len(ids) > fusion.MAX_TECHNIQUES:
        raise DataValidationError(f"at most {fusion.MAX_TECHNIQUES} techniques supported")
    results = run_jobs(dataset, split, config, ids, workers)

    standalone = []
    completed = []
    epochs = []
    for spec in config.techniques:
        runs = [results[(spec.id, r)] for r in RUNS]
        ok = all(r.ok for r in runs)
        norm, tr, te = spec.describe()
        standalone.append(
            StandaloneRow(
                spec.id, norm, tr, te,
                "ok" if ok else "failed",
                float(np.mean([r.best_accuracy for r in runs])) if ok else float("nan"),
                tuple(r.best_accuracy for r in runs),
                tuple(r.train_accuracy for r in runs),
                tuple(r.best_epoch for r in runs),
                "; ".join(r.error for r in runs if r.error),
            )
        )
        if ok:
            completed.append(spec.id)
        for r in runs:
            epochs.extend((spec.id, r.run, int(e), float(l), float(a)) for e, l, a in r.epochs)

    if completed:
        per_run, mean = fuse_job_results(results, completed, workers or config.workers)
    else:
        per_run, mean = {r: np.zeros(1) for r in RUNS}, np.zeros(1)
    out = ExperimentResults(standalone, completed, mean, per_run, config.cardinalities, config.top_m, epochs)
    if write:
        write_report(out, config.output_dir)
    return out


# -- all-in-one model --------------------------------------------------------------

def check_same_format(config: ExperimentConfig, technique_ids: Sequence[str]) -> list[TechniqueSpec]:
    specs = [config.technique(t) for t in technique_ids]
    if not specs:
        raise DataValidationError("all-in-one needs at least one technique")
    mixed = [s.id for s in specs if s.changes_format()]
    if mixed:
        raise FormatMixError(
            f"techniques {mixed} change the pose format (joint subset); "
            "one model cannot mix pose formats"
        )
    return specs


def train_all_in_one(
    dataset: Dataset, split: FoldSplit, config: ExperimentConfig, technique_ids: Sequence[str], run: int = 1
) -> lstm.BiLstmParams:
    """One classifier trained on every technique's variant of the training fold."""
    specs = check_same_format(config, technique_ids)
    model = dataset.body_model
    cls = {c: i for i, c in enumerate(dataset.classes)}
    train_ids, _ = fold_ids(split, run)
    table = dataset.by_id()
    train_set = [
        (prepare_variant(table[i], model, s, "train", config.downsample), cls[table[i].class_label])
        for s in specs
        for i in train_ids
    ]
    dims = lstm.Dims(model.num_joints, config.embed_dim, config.hidden_dim, len(dataset.classes))
    seed = derive_seed(config.train.seed, "all-in-one", *technique_ids, run)
    return lstm.train(train_set, lstm.TrainConfig(**{**asdict(config.train), "seed": seed}), dims)


@dataclass
class AllInOneReport:
    technique_ids: list[str]
    variant_accuracies: dict[str, float]  # way (i), averaged over runs
    fused_accuracy: float  # way (ii)
    independent_fused_accuracy: float
    run_details: dict[int, dict] = field(default_factory=dict)


def evaluate_all_in_one(
    params: lstm.BiLstmParams,
    dataset: Dataset,
    split: FoldSplit,
    config: ExperimentConfig,
    technique_ids: Sequence[str],
    run: int = 1,
) -> tuple[dict[str, float], float, list[fusion.PartialOutputs]]:
    """Per-variant accuracies and strict-majority fusion of the same model's outputs."""
    specs = check_same_format(config, technique_ids)
    model = dataset.body_model
    cls = {c: i for i, c in enumerate(dataset.classes)}
    _, test_ids = fold_ids(split, run)
    table = dataset.by_id()
    outputs = []
    per_variant = {}
    for s in specs:
        test_set = [
            (prepare_variant(table[i], model, s, "test", config.downsample), cls[table[i].class_label])
            for i in test_ids
        ]
        ev = lstm.evaluate(params, test_set)
        per_variant[s.id] = ev.accuracy
        outputs.append(
            fusion.PartialOutputs(s.id, tuple((a, dataset.classes[t], dataset.classes[p]) for a, t, p in ev.rows))
        )
    fused = fusion.slow_combination_accuracy(outputs, (1 << len(outputs)) - 1)
    return per_variant, fused, outputs


def run_all_in_one(
    config: ExperimentConfig, technique_ids: Sequence[str], workers: int | None = None, write: bool = True
) -> AllInOneReport:
    """Both fold runs of the all-in-one model, next to fusion of independent classifiers."""
    from skelfusion.report import write_all_in_one

    check_same_format(config, technique_ids)
    dataset, split = load_inputs(config)
    independent = run_jobs(dataset, split, config, technique_ids, workers)
    failed = [k for k, r in independent.items() if not r.ok]
    if failed:
        raise SkelfusionError(f"independent classifiers failed: {failed}")
    _, ind_acc = fuse_job_results(independent, technique_ids)
    full_mask = (1 << len(technique_ids)) - 1

    details = {}
    for run in RUNS:
        params = train_all_in_one(dataset, split, config, technique_ids, run)
        per_variant, fused, _ = evaluate_all_in_one(params, dataset, split, config, technique_ids, run)
        details[run] = {"variants": per_variant, "fused": fused}
    report = AllInOneReport(
        list(technique_ids),
        {t: float(np.mean([details[r]["variants"][t] for r in RUNS])) for t in technique_ids},
        float(np.mean([details[r]["fused"] for r in RUNS])),
        float(ind_acc[full_mask]),
        details,
    )
    if write:
        write_all_in_one(report, config)
    return report
