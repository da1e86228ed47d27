"""Command line front end.

  convert model SRC.onnx OUT_DIR
  convert dataset SRC --spec SPEC.json OUT_DIR
  convert export-reference MODEL DATASET_DIR

`convert model` prints a one-line summary plus the manifest accounting;
all errors exit nonzero with the reason on stderr.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .datasets import prepare_dataset
from .errors import ConversionError
from .mapping import convert_model
from .reference import export_reference


def _cmd_model(args) -> int:
    manifest = convert_model(args.source, args.out)
    print(
        f"{args.source} -> {args.out}: "
        f"{len(manifest.mapped)} mapped, {len(manifest.folded)} folded, "
        f"{len(manifest.dropped)} dropped (of {manifest.source_nodes} source nodes)"
    )
    for entry in manifest.dropped:
        print(f"  dropped {entry['node']} ({entry['op']}): {entry['reason']}")
    return 0


def _cmd_dataset(args) -> int:
    spec = json.loads(Path(args.spec).read_text())
    if args.limit is not None:
        spec["limit"] = args.limit
    count = prepare_dataset(args.source, spec, args.out)
    print(f"{args.source} -> {args.out}: {count} samples")
    return 0


def _cmd_export_reference(args) -> int:
    labels = export_reference(args.model, args.dataset, model_dir=args.model_out)
    print(f"{args.dataset}: {len(labels)} labels + golden logits written")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="convert",
        description="Convert ONNX models and datasets to the portable format.",
    )
    sub = p.add_subparsers(dest="command", required=True)

    m = sub.add_parser("model", help="convert an .onnx file")
    m.add_argument("source", help="path to the .onnx file")
    m.add_argument("out", help="output directory for model.json + weights.bin")
    m.set_defaults(func=_cmd_model)

    d = sub.add_parser("dataset", help="prepare samples.bin from IDX or NPY")
    d.add_argument("source", help="IDX or .npy source file")
    d.add_argument("out", help="output directory for samples.bin + samples.json")
    d.add_argument("--spec", required=True, help="preprocessing spec JSON file")
    d.add_argument("--limit", type=int, default=None, help="keep only the first N samples")
    d.set_defaults(func=_cmd_dataset)

    r = sub.add_parser(
        "export-reference",
        help="run the reference engine and write labels.json + golden_logits.bin",
    )
    r.add_argument("model", help=".onnx file or converted model directory")
    r.add_argument("dataset", help="dataset directory holding samples.bin")
    r.add_argument(
        "--model-out",
        default=None,
        help="also keep the converted graph here (only for .onnx sources)",
    )
    r.set_defaults(func=_cmd_export_reference)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConversionError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
