"""Command line: export news title embeddings, verify exported files."""

from __future__ import annotations

import argparse
import sys

from embed_export import DEFAULT_MODEL_ID, __version__
from embed_export.encoders import EncoderError
from embed_export.export import default_manifest_path, export_embeddings, verify_export
from embed_export.format import FormatError


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="embed-export", description=__doc__)
    parser.add_argument("--version", action="version", version=f"embed-export {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("export", help="embed titles from news.tsv into a DNNR-EMB file")
    p.add_argument("--news", required=True, help="MIND-format news.tsv")
    p.add_argument("--out", required=True, help="DNNR-EMB output path")
    p.add_argument("--manifest", default=None, help="manifest path (default: <out>.manifest.json)")
    p.add_argument("--backend", choices=("sentence-transformers", "hashed"),
                   default="sentence-transformers")
    p.add_argument("--model-id", default=None,
                   help=f"sentence-transformers checkpoint (default: {DEFAULT_MODEL_ID})")
    p.add_argument("--batch-size", type=int, default=64)

    p = sub.add_parser("verify", help="check a DNNR-EMB file against its manifest")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--manifest", default=None)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "export":
        try:
            manifest = export_embeddings(
                args.news,
                args.out,
                backend=args.backend,
                model_id=args.model_id,
                batch_size=args.batch_size,
                manifest_path=args.manifest,
            )
        except FileNotFoundError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 2
        except (FormatError, EncoderError) as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 2
        print(f"exported {manifest.count} vectors of dim {manifest.dim} using {manifest.model_id}")
        print(f"embeddings: {args.out}")
        print(f"manifest:   {args.manifest or default_manifest_path(args.out)}")
        return 0

    manifest_path = args.manifest or default_manifest_path(args.embeddings)
    ok, problems = verify_export(args.embeddings, manifest_path)
    if ok:
        print("verify: ok")
        return 0
    for problem in problems:
        print(f"verify: FAIL {problem}", file=sys.stderr)
    return 1


if __name__ == "__main__":
    sys.exit(main())
