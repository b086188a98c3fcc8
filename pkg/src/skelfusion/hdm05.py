"""HDM05 dataset preparation.

HDM05 is not bundled. Convert its motion-capture files to the interchange
format with any tool that performs forward kinematics (one JSON line per
action: ``{"id", "class", "fps", "frames"}``, frames as ``[length][31][3]``
positions in the joint order of ``builtin:hdm05-31``, y vertical). This module
then validates the export and removes the least populated classes::

    python -m skelfusion.hdm05 exported.jsonl -o hdm05/actions.jsonl

A complete 2,345-action export yields 2,328 actions, since the dropped
classes hold 1 to 4 actions each.
"""
from __future__ import annotations

import argparse
import sys
from collections import Counter

from skelfusion.errors import SkelfusionError
from skelfusion.skeleton import Dataset, builtin_body_model, drop_least_populated_classes, load_dataset, save_dataset

DROPPED_CLASSES = 8
EXPECTED_ACTIONS = 2328


def prepare(src, dst, drop: int = DROPPED_CLASSES) -> Dataset:
    """Validate an exported action file against the 31-joint model, drop classes and save."""
    dataset = drop_least_populated_classes(load_dataset(src, builtin_body_model("hdm05-31")), drop)
    save_dataset(dataset, dst)
    return dataset


def main(argv=None) -> int:
    p = argparse.ArgumentParser(prog="python -m skelfusion.hdm05", description=__doc__.splitlines()[0])
    p.add_argument("export", help="interchange file converted from the HDM05 motion-capture data")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--drop", type=int, default=DROPPED_CLASSES, help="least populated classes to remove")
    args = p.parse_args(argv)
    try:
        ds = prepare(args.export, args.output, args.drop)
    except SkelfusionError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    sizes = Counter(a.class_label for a in ds.actions)
    print(f"wrote {len(ds.actions)} actions in {len(sizes)} classes "
          f"(smallest class {min(sizes.values())}, largest {max(sizes.values())}) to {args.output}")
    if len(ds.actions) != EXPECTED_ACTIONS:
        print(f"note: the reference preparation has {EXPECTED_ACTIONS} actions", file=sys.stderr)
    return 0


if __name__ == "__main__":
    sys.exit(main())
