"""Delimited result files, the text results table and report figures."""
from __future__ import annotations

import csv
import io
import math
from pathlib import Path
from typing import Sequence

import numpy as np

from skelfusion import fusion
from skelfusion._io import atomic_write_text
from skelfusion.errors import DataValidationError
from skelfusion.plotting import plot_fusion_accuracy, plot_standalone_accuracy

STANDALONE_FIELDS = [
    "technique_id", "norm", "train_aug", "test_aug", "status", "accuracy",
    "run1_accuracy", "run2_accuracy", "run1_train_accuracy", "run2_train_accuracy",
    "run1_best_epoch", "run2_best_epoch", "error",
]


def _csv(rows: Sequence[Sequence], header: Sequence[str]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


def _num(x: float) -> str:
    return repr(float(x))


def _pct(x: float) -> str:
    return "   n/a " if math.isnan(x) else f"{100 * x:6.2f}%"


def results_table(results) -> str:
    """Technique rows, membership dots per selected combination, fusion accuracy at the bottom."""
    top = results.top() if results.cardinalities else []
    n = len(results.technique_ids)
    w_id = max([len("technique")] + [len(r.technique_id) for r in results.standalone])
    w_no = max([len("norm")] + [len(r.norm) for r in results.standalone])
    w_tr = max([len("train aug")] + [len(r.train_aug) for r in results.standalone])
    w_te = max([len("test aug")] + [len(r.test_aug) for r in results.standalone])
    col = 7

    head = f"{'#':>2} {'technique':<{w_id}} {'norm':<{w_no}} {'train aug':<{w_tr}} {'test aug':<{w_te}} {'accuracy':>8}"
    groups = ""
    if top:
        for k in sorted({r.k for r in top}):
            cnt = sum(1 for r in top if r.k == k)
            groups += "|" + f"{k}/{n}".center(col * cnt)
    lines = [head + " " + groups, "-" * (len(head) + 1 + len(groups))]
    for i, row in enumerate(results.standalone, start=1):
        cells = ""
        for k in sorted({r.k for r in top}):
            cells += "|"
            for r in (t for t in top if t.k == k):
                cells += ("*" if row.technique_id in r.members else "").center(col)
        acc = _pct(row.accuracy) if row.status == "ok" else " failed"
        lines.append(
            f"{i:>2} {row.technique_id:<{w_id}} {row.norm:<{w_no}} {row.train_aug:<{w_tr}} "
            f"{row.test_aug:<{w_te}} {acc:>8} {cells}"
        )
    if top:
        foot = ""
        for k in sorted({r.k for r in top}):
            foot += "|"
            for r in (t for t in top if t.k == k):
                foot += f"{100 * r.accuracy:.2f}".center(col)
        label = "accuracy of fusion"
        lines.append("-" * len(lines[1]))
        lines.append(f"{label:>{len(head)}} {foot}")
    return "\n".join(lines) + "\n"


def write_report(results, out_dir: str | Path) -> dict[str, Path]:
    """Write CSVs, the text table and figures; returns the written paths by role."""
    out = Path(out_dir)
    paths = {}

    rows = []
    for r in results.standalone:
        rows.append([
            r.technique_id, r.norm, r.train_aug, r.test_aug, r.status, _num(r.accuracy),
            *[_num(a) for a in r.run_accuracies], *[_num(a) for a in r.train_accuracies],
            *r.best_epochs, r.error,
        ])
    paths["standalone"] = out / "standalone.csv"
    atomic_write_text(paths["standalone"], _csv(rows, STANDALONE_FIELDS))

    combos = results.combinations()
    paths["combinations"] = out / "combinations.csv"
    fusion.write_combination_report(paths["combinations"], ((c.mask, c.members, c.accuracy) for c in combos))

    if results.epochs:
        paths["epochs"] = out / "epochs.csv"
        atomic_write_text(
            paths["epochs"],
            _csv([[t, r, e, _num(l), _num(a)] for t, r, e, l, a in results.epochs],
                 ["technique_id", "run", "epoch", "mean_loss", "test_accuracy"]),
        )

    top = results.top() if results.cardinalities else []
    if top:
        paths["top"] = out / "top_combinations.csv"
        atomic_write_text(
            paths["top"],
            _csv([[r.k, r.rank, r.mask, ";".join(r.members), _num(r.accuracy)] for r in top],
                 ["k", "rank", "mask", "member_ids", "accuracy"]),
        )
        paths["plot_data"] = out / "fusion_plot_data.csv"
        atomic_write_text(
            paths["plot_data"],
            _csv([[i, r.k, r.rank, _num(r.accuracy)] for i, r in enumerate(top, start=1)],
                 ["column", "k", "rank", "accuracy"]),
        )
        paths["fusion_figure"] = plot_fusion_accuracy(
            top, out / "figures" / "fusion_accuracy.png", n=len(results.technique_ids)
        )

    paths["table"] = out / "results_table.txt"
    atomic_write_text(paths["table"], results_table(results))
    ok = [r for r in results.standalone if r.status == "ok"]
    if ok:
        paths["standalone_figure"] = plot_standalone_accuracy(
            [r.technique_id for r in ok], [r.accuracy for r in ok], out / "figures" / "standalone_accuracy.png"
        )
    return paths


def load_results(out_dir: str | Path, cardinalities=(3, 5, 7, 9), top_m: int = 5):
    """Rebuild results from ``standalone.csv`` and ``combinations.csv``."""
    from skelfusion.harness import ExperimentResults, StandaloneRow

    out = Path(out_dir)
    try:
        with open(out / "standalone.csv", newline="", encoding="utf-8") as fh:
            srows = list(csv.DictReader(fh))
        combos = fusion.read_combination_report(out / "combinations.csv")
    except FileNotFoundError as exc:
        raise DataValidationError(f"{out}: missing result file {exc.filename}") from exc

    standalone = [
        StandaloneRow(
            r["technique_id"], r["norm"], r["train_aug"], r["test_aug"], r["status"], float(r["accuracy"]),
            (float(r["run1_accuracy"]), float(r["run2_accuracy"])),
            (float(r["run1_train_accuracy"]), float(r["run2_train_accuracy"])),
            (int(r["run1_best_epoch"]), int(r["run2_best_epoch"])),
            r["error"],
        )
        for r in srows
    ]
    ids = [r.technique_id for r in standalone if r.status == "ok"]
    acc = np.zeros(1 << len(ids))
    for c in combos:
        if c.mask >= len(acc) or fusion.mask_members(c.mask, ids) != c.members:
            raise DataValidationError(f"combinations.csv row {c.mask} inconsistent with standalone.csv")
        acc[c.mask] = c.accuracy
    epochs = []
    if (out / "epochs.csv").exists():
        with open(out / "epochs.csv", newline="", encoding="utf-8") as fh:
            for r in csv.DictReader(fh):
                epochs.append((r["technique_id"], int(r["run"]), int(r["epoch"]),
                               float(r["mean_loss"]), float(r["test_accuracy"])))
    return ExperimentResults(standalone, ids, acc, {}, tuple(cardinalities), top_m, epochs)


def write_all_in_one(report, config) -> dict[str, Path]:
    out = Path(config.output_dir)
    paths = {"variants": out / "allinone_variants.csv", "summary": out / "allinone_summary.csv"}
    rows = []
    for tid in report.technique_ids:
        norm, _, test_aug = config.technique(tid).describe()
        rows.append([tid, norm, test_aug, _num(report.variant_accuracies[tid])])
    atomic_write_text(paths["variants"], _csv(rows, ["technique_id", "norm", "test_aug", "accuracy"]))
    best = max(report.variant_accuracies.values())
    summary = [
        ["best_single_variant", _num(best)],
        ["all_in_one_fusion", _num(report.fused_accuracy)],
        ["independent_fusion", _num(report.independent_fused_accuracy)],
    ]
    atomic_write_text(paths["summary"], _csv(summary, ["measure", "accuracy"]))
    text = [f"{'technique':<20} {'norm':<6} {'test aug':<14} accuracy"]
    for tid, norm, aug, acc in rows:
        text.append(f"{tid:<20} {norm:<6} {aug:<14} {_pct(float(acc))}")
    text.append("")
    text.append(f"all-in-one model, fused over variants: {_pct(report.fused_accuracy)}")
    text.append(f"independent classifiers, fused:        {_pct(report.independent_fused_accuracy)}")
    paths["table"] = out / "allinone_table.txt"
    atomic_write_text(paths["table"], "\n".join(text) + "\n")
    return paths
