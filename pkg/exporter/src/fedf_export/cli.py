"""Command-line entry: image-folder tree in, FEDF file plus manifest out."""

from __future__ import annotations

import argparse
import sys

from .export import BACKBONES, ExportJob, export


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedf-export", description=__doc__)
    parser.add_argument("--input-root", required=True,
                        help="directory with one subdirectory per class")
    parser.add_argument("--backbone", choices=sorted(BACKBONES), default="resnet18")
    parser.add_argument("--out", required=True, help="output FEDF path")
    parser.add_argument("--manifest", help="manifest JSON path")
    parser.add_argument("--weights",
                        help="state_dict file; omitted = seeded random init")
    parser.add_argument("--feature", choices=("cls", "pool"), default="cls",
                        help="ViT embedding: class token or pooled patch mean")
    parser.add_argument("--batch-size", type=int, default=16)
    parser.add_argument("--image-size", type=int, default=None)
    parser.add_argument("--device", default="cpu")
    parser.add_argument("--seed", type=int, default=0)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    job = ExportJob(
        input_root=args.input_root, backbone=args.backbone,
        output_path=args.out, manifest_path=args.manifest,
        weights=args.weights, feature=args.feature,
        batch_size=args.batch_size, image_size=args.image_size,
        device=args.device, seed=args.seed,
    )
    try:
        manifest = export(job)
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"export failed: {exc}", file=sys.stderr)
        return 1
    print(
        f"wrote {len(manifest['records'])} records (dim {manifest['dim']}, "
        f"{len(manifest['classes'])} classes) to {args.out}; "
        f"{len(manifest['skipped'])} skipped"
    )
    return 0


if __name__ == "__main__":
    sys.exit(main())
