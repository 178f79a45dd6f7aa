"""CLI: ``sketch-extract --backbone resnet50 --images <dir-or-csv> --out <dir>``."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .extract import BACKBONE_DIMS, ExtractorConfig, WeightsUnavailableError, extract, list_inputs


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sketch-extract",
        description="Extract feature embeddings from images into a sketchlab embedding-set directory.",
    )
    parser.add_argument("--backbone", required=True, choices=sorted(BACKBONE_DIMS))
    parser.add_argument("--images", required=True,
                        help="image directory (class subdirs) or CSV manifest with header path,label")
    parser.add_argument("--out", required=True, help="output embedding-set directory")
    parser.add_argument("--batch-size", type=int, default=16)
    parser.add_argument("--weights", choices=("imagenet", "none"), default="imagenet",
                        help="'none' uses a seeded random init (offline testing)")
    parser.add_argument("--seed", type=int, default=0, help="init seed when --weights none")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        images, labels, names = list_inputs(Path(args.images))
        config = ExtractorConfig(
            backbone=args.backbone,
            images=images,
            labels=labels,
            label_names=names,
            out=Path(args.out),
            batch_size=args.batch_size,
            weights=args.weights,
            seed=args.seed,
        )
        out = extract(config)
    except WeightsUnavailableError as exc:
        print(json.dumps({"error": "weights", "message": str(exc)}), file=sys.stderr)
        return 2
    except OSError as exc:
        print(json.dumps({"error": "io", "message": str(exc)}), file=sys.stderr)
        return 2
    except (ValueError, RuntimeError) as exc:
        print(json.dumps({"error": "validation", "message": str(exc)}), file=sys.stderr)
        return 1
    print(f"wrote {len(images)} x {BACKBONE_DIMS[args.backbone]} embeddings to {out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
