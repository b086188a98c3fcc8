"""Command-line entry point: ``skelfusion <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 data validation error, 3 training
divergence, 4 cache-integrity failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from skelfusion import fusion, harness, lstm
from skelfusion.errors import CacheIntegrityError, DataValidationError, SkelfusionError
from skelfusion.preprocess import TechniqueSpec, apply_pipeline
from skelfusion.report import load_results, write_report
from skelfusion.skeleton import (
    BodyModelDef,
    Dataset,
    FoldSplit,
    balanced_two_fold_split,
    dataset_digest,
    downsample,
    load_actions,
    load_body_model,
    load_dataset,
    save_body_model,
    save_dataset,
)
from skelfusion.synthetic import SyntheticSpec, generate_synthetic

log = logging.getLogger("skelfusion")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _technique(text: str) -> TechniqueSpec:
    src = Path(text)
    raw = src.read_text("utf-8") if not text.lstrip().startswith("{") and src.exists() else text
    try:
        return TechniqueSpec.from_dict(json.loads(raw))
    except json.JSONDecodeError as exc:
        raise DataValidationError(f"technique must be a JSON object or a file holding one: {exc}") from exc


# -- subcommands ----------------------------------------------------------------------

def cmd_generate(args):
    spec = SyntheticSpec(
        classes=args.classes, actions_per_class=args.per_class, min_length=args.min_length,
        max_length=args.max_length, joints=args.joints, noise=args.noise, seed=args.seed, fps=args.fps,
    )
    ds = generate_synthetic(spec)
    save_dataset(ds, args.output)
    if args.body_model_out:
        save_body_model(ds.body_model, args.body_model_out)
    print(f"wrote {len(ds.actions)} actions ({len(ds.classes)} classes, {ds.body_model.num_joints} joints) to {args.output}")


def cmd_split(args):
    ds = load_dataset(args.dataset, load_body_model(args.body_model))
    split = balanced_two_fold_split(ds, args.seed)
    split.save(args.output)
    print(f"fold 1: {len(split.ids(1))} actions, fold 2: {len(split.ids(2))} actions")


def cmd_preprocess(args):
    model = load_body_model(args.body_model)
    ds = load_dataset(args.dataset, model)
    spec = _technique(args.technique)
    out_model = model
    actions = []
    for a in ds.actions:
        if args.downsample > 1 and spec.augmentation(args.role).kind != "keypose":
            a = downsample(a, args.downsample)
        a, out_model = apply_pipeline(a, model, spec, args.role)
        actions.append(a)
    save_dataset(actions, args.output)
    if args.body_model_out:
        save_body_model(out_model, args.body_model_out)
    print(f"wrote {len(actions)} {args.role} variants ({out_model.num_joints} joints) to {args.output}")


def cmd_train(args):
    model = load_body_model(args.body_model)
    ds = load_dataset(args.dataset, model)
    spec = _technique(args.technique)
    if args.folds:
        split = FoldSplit.load(args.folds)
        ids = split.ids(args.fold)
    else:
        ids = [a.id for a in ds.actions]
    cls = {c: i for i, c in enumerate(ds.classes)}
    table = ds.by_id()
    train_set = [
        (harness.prepare_variant(table[i], model, spec, "train", args.downsample), cls[table[i].class_label])
        for i in ids
    ]
    joints = train_set[0][0].num_joints
    cfg = lstm.TrainConfig(
        epochs=args.epochs, learning_rate=args.lr, optimizer=args.optimizer,
        batch_size=args.batch_size, seed=args.seed, init_scale=args.init_scale,
    )
    params = lstm.train(
        train_set, cfg, lstm.Dims(joints, args.embed, args.hidden, len(ds.classes)),
        on_epoch=lambda e, p, l: log.info("epoch %d mean loss %.4f", e, l),
    )
    acc = lstm.evaluate(params, train_set).accuracy
    meta = {
        "classes": list(ds.classes),
        "technique": spec.to_dict(),
        "body_model": model.to_dict(),
        "downsample": args.downsample,
        "target_height": spec.normalization.target_height,
        "orientation_mode": spec.normalization.orientation_mode,
    }
    lstm.save_params(params, args.output, meta)
    print(f"training accuracy {acc:.4f}; model written to {args.output}")


def cmd_classify(args):
    params, meta = lstm.load_model(args.model)
    if "technique" not in meta or "classes" not in meta:
        raise DataValidationError(f"{args.model}: model carries no technique/class metadata")
    model = load_body_model(args.body_model) if args.body_model else BodyModelDef.from_dict(meta["body_model"])
    spec = TechniqueSpec.from_dict(
        meta["technique"], meta.get("target_height", 1.75), meta.get("orientation_mode", "per_pose")
    )
    classes = meta["classes"]
    print("action_id,predicted_class,probability")
    for a in load_actions(args.actions):
        if a.num_joints != model.num_joints:
            raise DataValidationError(f"action {a.id!r}: {a.num_joints} joints, body model has {model.num_joints}")
        variant = harness.prepare_variant(a, model, spec, "test", int(meta.get("downsample", 1)))
        pred = lstm.classify(variant, params)
        print(f"{a.id},{classes[pred.predicted_class_index]},{pred.probabilities[pred.predicted_class_index]:.6f}")


def cmd_run(args):
    config = harness.ExperimentConfig.load(args.config)
    if args.output_dir:
        config = _with_output(config, args.output_dir)
    if args.no_cache:
        import shutil

        shutil.rmtree(config.output_dir / "cache", ignore_errors=True)
    res = harness.run_experiment(config, workers=args.workers)
    failed = [r.technique_id for r in res.standalone if r.status != "ok"]
    print((config.output_dir / "results_table.txt").read_text("utf-8"), end="")
    if failed:
        print(f"warning: techniques failed and were excluded from fusion: {failed}", file=sys.stderr)


def _with_output(config, out):
    from dataclasses import replace

    return replace(config, output_dir=Path(out))


def cmd_fuse(args):
    expected = None
    if args.dataset:
        if not args.body_model:
            raise DataValidationError("--dataset requires --body-model")
        expected = dataset_digest(load_dataset(args.dataset, load_body_model(args.body_model)))
    runs = []
    for d in args.cache:
        manifest, outputs = fusion.load_cache(d, dataset_hash=expected)
        runs.append((manifest, outputs))
    ids = [o.technique_id for o in runs[0][1]]
    for manifest, outputs in runs[1:]:
        if [o.technique_id for o in outputs] != ids:
            raise CacheIntegrityError("cache directories list different techniques")
    if len(ids) > fusion.MAX_TECHNIQUES and not args.allow_large:
        raise DataValidationError(f"{len(ids)} techniques exceed the guard of {fusion.MAX_TECHNIQUES}")

    per_run = {}
    for r, (_, outputs) in enumerate(runs, start=1):
        per_run[r] = harness.combination_accuracies(outputs)
    mean = np.mean(list(per_run.values()), axis=0)
    standalone = []
    for i, tid in enumerate(ids):
        spec_doc = runs[0][0].techniques[tid].get("spec")
        norm, tr, te = TechniqueSpec.from_dict(spec_doc).describe() if spec_doc else ("?", "?", "?")
        accs = tuple(float(per_run[r][1 << i]) for r in per_run)
        stats = [m.techniques[tid].get("stats", {}) for m, _ in runs]
        standalone.append(
            harness.StandaloneRow(
                tid, norm, tr, te, "ok", float(np.mean(accs)),
                _pad(accs, float("nan")), _pad(tuple(s.get("train_accuracy", float("nan")) for s in stats), float("nan")),
                _pad(tuple(s.get("best_epoch", 0) for s in stats), 0),
            )
        )
    res = harness.ExperimentResults(standalone, ids, mean, per_run, tuple(args.cardinalities), args.top)
    out = Path(args.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_report(res, out)
    print((out / "results_table.txt").read_text("utf-8"), end="")


def _pad(values: tuple, fill) -> tuple:
    return (tuple(values) + (fill, fill))[:2]


def cmd_allinone(args):
    config = harness.ExperimentConfig.load(args.config)
    if args.output_dir:
        config = _with_output(config, args.output_dir)
    ids = [t for t in args.techniques.split(",") if t]
    harness.run_all_in_one(config, ids, workers=args.workers)
    print((config.output_dir / "allinone_table.txt").read_text("utf-8"), end="")


def cmd_report(args):
    res = load_results(args.results, tuple(args.cardinalities), args.top)
    write_report(res, args.results)
    print((Path(args.results) / "results_table.txt").read_text("utf-8"), end="")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="skelfusion", description="Skeleton action recognition with fused Bi-LSTM classifiers.")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", help="write a synthetic dataset")
    g.add_argument("-o", "--output", required=True)
    g.add_argument("--body-model-out")
    g.add_argument("--classes", type=int, default=5)
    g.add_argument("--per-class", type=int, default=30)
    g.add_argument("--min-length", type=int, default=120)
    g.add_argument("--max-length", type=int, default=240)
    g.add_argument("--joints", type=int, default=12, choices=(12, 14, 31))
    g.add_argument("--noise", type=float, default=0.005)
    g.add_argument("--fps", type=float, default=120.0)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_generate)

    s = sub.add_parser("split", help="balanced 2-fold split of a dataset")
    s.add_argument("dataset")
    s.add_argument("--body-model", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("-o", "--output", required=True)
    s.set_defaults(func=cmd_split)

    pp = sub.add_parser("preprocess", help="apply one technique to every action")
    pp.add_argument("dataset")
    pp.add_argument("--body-model", required=True)
    pp.add_argument("--technique", required=True, help="technique JSON or a file containing it")
    pp.add_argument("--role", choices=("train", "test"), default="train")
    pp.add_argument("--downsample", type=int, default=1)
    pp.add_argument("-o", "--output", required=True)
    pp.add_argument("--body-model-out")
    pp.set_defaults(func=cmd_preprocess)

    t = sub.add_parser("train", help="train one classifier for one technique")
    t.add_argument("dataset")
    t.add_argument("--body-model", required=True)
    t.add_argument("--technique", required=True)
    t.add_argument("--folds")
    t.add_argument("--fold", type=int, choices=(1, 2), default=1)
    t.add_argument("--downsample", type=int, default=10)
    t.add_argument("--epochs", type=int, default=100)
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--optimizer", choices=("adam", "sgd"), default="adam")
    t.add_argument("--batch-size", type=int, default=16)
    t.add_argument("--embed", type=int, default=48)
    t.add_argument("--hidden", type=int, default=1024)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--init-scale", type=float, default=lstm.TrainConfig.init_scale)
    t.add_argument("-o", "--output", required=True)
    t.set_defaults(func=cmd_train)

    c = sub.add_parser("classify", help="classify actions with a trained model")
    c.add_argument("model")
    c.add_argument("actions")
    c.add_argument("--body-model")
    c.set_defaults(func=cmd_classify)

    r = sub.add_parser("run", help="full two-fold experiment from a config file")
    r.add_argument("config")
    r.add_argument("--workers", type=int)
    r.add_argument("--output-dir")
    r.add_argument("--no-cache", action="store_true", help="discard cached partial outputs first")
    r.set_defaults(func=cmd_run)

    f = sub.add_parser("fuse", help="evaluate all combinations from cached partial outputs only")
    f.add_argument("cache", nargs="+", help="one cache directory per fold run")
    f.add_argument("-o", "--output-dir", required=True)
    f.add_argument("--dataset")
    f.add_argument("--body-model")
    f.add_argument("--cardinalities", type=_int_list, default=[3, 5, 7, 9])
    f.add_argument("--top", type=int, default=5)
    f.add_argument("--allow-large", action="store_true")
    f.set_defaults(func=cmd_fuse)

    a = sub.add_parser("allinone", help="train and evaluate one model on several techniques' data")
    a.add_argument("config")
    a.add_argument("--techniques", required=True, help="comma-separated technique ids")
    a.add_argument("--workers", type=int)
    a.add_argument("--output-dir")
    a.set_defaults(func=cmd_allinone)

    rep = sub.add_parser("report", help="re-render tables and figures from result CSVs")
    rep.add_argument("results")
    rep.add_argument("--cardinalities", type=_int_list, default=[3, 5, 7, 9])
    rep.add_argument("--top", type=int, default=5)
    rep.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        args.func(args)
    except SkelfusionError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
