"""Exporter CLI: export-images / export-vocab / export-augmented / export-sim."""

from __future__ import annotations

import argparse
import json
import sys

from . import ExportError, __version__
from .export import (
    export_augmented_embeddings,
    export_image_embeddings,
    export_similarity_matrix,
    export_vocab_embeddings,
)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="embexport", description=__doc__)
    parser.add_argument("--version", action="version", version=f"embexport {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--model", required=True, help="encoder name from the registry")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--batch-size", type=int, default=32)
        p.add_argument("--device", default="cpu")

    p = sub.add_parser("export-images", help="embed an ImageFolder-style dataset")
    p.add_argument("--dataset", required=True)
    common(p)
    p.set_defaults(
        run=lambda a: export_image_embeddings(
            a.dataset, a.model, a.out, batch_size=a.batch_size, device=a.device
        )
    )

    p = sub.add_parser("export-vocab", help="prompt-ensemble embeddings per word")
    p.add_argument("--vocab", required=True)
    p.add_argument("--template", action="append", default=None,
                   help="override the default template list (repeatable)")
    common(p)
    p.set_defaults(
        run=lambda a: export_vocab_embeddings(
            a.vocab, a.model, a.out, templates=a.template,
            batch_size=a.batch_size, device=a.device,
        )
    )

    p = sub.add_parser("export-augmented", help="embed a sentence list, row-aligned")
    p.add_argument("--sentences", required=True)
    common(p)
    p.set_defaults(
        run=lambda a: export_augmented_embeddings(
            a.sentences, a.model, a.out, batch_size=a.batch_size, device=a.device
        )
    )

    p = sub.add_parser("export-sim", help="word-name similarity matrix")
    p.add_argument("--pred-vocab", required=True)
    p.add_argument("--gt-labels", required=True)
    common(p)
    p.set_defaults(
        run=lambda a: export_similarity_matrix(
            a.pred_vocab, a.gt_labels, a.model, a.out,
            batch_size=a.batch_size, device=a.device,
        )
    )
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        info = args.run(args)
    except ExportError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    print(json.dumps(info))
    return 0


if __name__ == "__main__":
    sys.exit(main())
