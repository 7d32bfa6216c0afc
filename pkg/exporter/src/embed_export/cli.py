"""Command-line surface: `export` writes a LEMB file from a backbone run,
`verify` re-checks an existing file. Nonzero exit on any failure."""

from __future__ import annotations

import argparse
import sys

from .backbones import BackboneError
from .export import ExportSpec, InputError, export_embeddings, verify_export


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="embed-export",
        description="Export penultimate-layer embeddings to LEMB files.")
    sub = parser.add_subparsers(dest="command", required=True)

    exp = sub.add_parser("export")
    exp.add_argument("--backbone", required=True,
                     help="resnet18/resnet50/... or hf:<model-name>")
    exp.add_argument("--input", required=True,
                     help="TSV manifest or image directory")
    exp.add_argument("--labels", default="label",
                     help="label column name in the manifest")
    exp.add_argument("--groups", default=None,
                     help="optional group column name")
    exp.add_argument("--out", required=True, help="output file path")
    exp.add_argument("--tsv", action="store_true",
                     help="write the TSV flavor instead of binary")
    exp.add_argument("--batch-size", type=int, default=32)
    exp.add_argument("--device", default="cpu")
    exp.add_argument("--weights", default="pretrained",
                     choices=("pretrained", "random"),
                     help="vision weights source; 'random' is a seeded "
                          "init for offline smoke runs")
    exp.add_argument("--seed", type=int, default=0)
    exp.add_argument("--image-size", type=int, default=224)

    ver = sub.add_parser("verify")
    ver.add_argument("path", help="LEMB file to check")
    return parser


def main(argv=None) -> int:
    try:
        ns = build_parser().parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code else 0
    try:
        if ns.command == "export":
            spec = ExportSpec(
                backbone=ns.backbone, input_path=ns.input, output_path=ns.out,
                label_column=ns.labels, group_column=ns.groups,
                batch_size=ns.batch_size, device=ns.device,
                weights=ns.weights, seed=ns.seed, image_size=ns.image_size,
                tsv=ns.tsv)
            report = export_embeddings(spec)
            print(report.summary())
            return 0 if report.ok else 1
        report = verify_export(ns.path)
        print(report.summary())
        return 0 if report.ok else 1
    except (InputError, BackboneError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
