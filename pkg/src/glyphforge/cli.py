"""Command-line entry point wiring the pipeline together.

See docs/cli.md for the full reference. Every subcommand exits 0 on success
and 1 with a one-line ``error: ...`` message on failure; unknown subcommands
exit 2 with usage text. All commands are deterministic given ``--seed``.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__

DEFAULT_CUT_HEIGHT = 45.0  # see docs/dedup-calibration.md


def _write_or_print(payload: dict | list, out: str | None) -> None:
    text = json.dumps(payload, indent=2, sort_keys=True)
    if out:
        Path(out).write_text(text + "\n")
    else:
        print(text)


def _load_corpus(corpus_dir: str, manifest: str | None = None):
    from . import corpus

    return corpus.ingest(corpus_dir, manifest)


def cmd_ingest(args) -> int:
    matrix = _load_corpus(args.corpus, args.manifest)
    from .corpus import coverage_report

    report = coverage_report(matrix)
    report["side"] = matrix.side
    _write_or_print(report, args.out)
    return 0


def cmd_dedup(args) -> int:
    from .corpus import dedup_fonts, save_corpus

    matrix = _load_corpus(args.corpus, args.manifest)
    before = matrix.n_fonts
    deduped = dedup_fonts(matrix, args.cut_height)
    save_corpus(deduped, args.out)
    print(
        json.dumps(
            {"fonts_before": before, "fonts_after": deduped.n_fonts, "out": args.out}
        )
    )
    return 0


def cmd_split(args) -> int:
    from .corpus import make_splits

    matrix = _load_corpus(args.corpus, args.manifest)
    manifest = make_splits(matrix, args.seed)
    manifest.save(args.out)
    print(json.dumps({"out": args.out, "masked_chars": len(manifest.masked_chars)}))
    return 0


def cmd_coverage(args) -> int:
    from .corpus import coverage_report

    matrix = _load_corpus(args.corpus, args.manifest)
    _write_or_print(coverage_report(matrix), args.out)
    return 0


def cmd_train(args) -> int:
    from .corpus import SplitManifest
    from .trainer import TrainConfig, train

    payload = json.loads(Path(args.config).read_text())
    corpus_dir = payload.pop("corpus_dir")
    splits_path = payload.pop("splits")
    manifest_path = payload.pop("corpus_manifest", None)
    config = TrainConfig.from_dict(payload)
    if args.seed is not None:
        config.seed = args.seed
    matrix = _load_corpus(corpus_dir, manifest_path)
    manifest = SplitManifest.load(splits_path)
    final = train(config, matrix, manifest, resume_from=args.resume)
    print(json.dumps({"checkpoint": str(final), "steps": config.steps}))
    return 0


def _load_eval_inputs(args):
    from .corpus import SplitManifest
    from .trainer import load_model

    model, config = load_model(args.checkpoint)
    matrix = _load_corpus(args.corpus, getattr(args, "manifest", None))
    manifest = SplitManifest.load(args.splits)
    return model, config, matrix, manifest


def cmd_evaluate(args) -> int:
    from .evalkit import evaluate

    model, _, matrix, manifest = _load_eval_inputs(args)
    n_list = [int(v) for v in args.n.split(",")]
    reports = evaluate(
        model, matrix, manifest, n_list, seed=args.seed,
        dataset=Path(args.corpus).name,
    )
    _write_or_print(reports, args.out)
    return 0


def cmd_reconstruct(args) -> int:
    from .corpus import hex_to_char
    from .evalkit import (
        infer_char_embeddings,
        infer_font_embedding,
        reconstruct,
        save_reconstructions,
    )

    model, _, matrix, manifest = _load_eval_inputs(args)
    observed = [hex_to_char(c) for c in args.observe.split(",")]
    char_means = infer_char_embeddings(model, matrix, manifest)
    info = infer_font_embedding(
        model, matrix, manifest, args.font, char_means,
        n_obs=len(observed), seed=args.seed,
    )
    targets = [
        c for c in matrix.char_index if c not in set(observed) and c in char_means
    ]
    recon = reconstruct(model, char_means, info.mean, targets)
    save_reconstructions(recon, args.font, args.out)
    print(json.dumps({"font": args.font, "glyphs": len(recon), "out": args.out}))
    return 0


def cmd_interpolate(args) -> int:
    from PIL import Image

    from .corpus import hex_to_char
    from .evalkit import infer_char_embeddings, infer_font_embedding, interpolate, tile_grid

    model, _, matrix, manifest = _load_eval_inputs(args)
    char_a, char_b = (hex_to_char(c) for c in args.chars.split(","))
    font_a, font_b = args.fonts.split(",")
    char_means = infer_char_embeddings(model, matrix, manifest, split=None)
    for c in (char_a, char_b):
        if c not in char_means:
            raise ValueError(f"no glyphs available to embed character {c:04x}")
    z = {}
    for f in (font_a, font_b):
        z[f] = infer_font_embedding(
            model, matrix, manifest, f, char_means, n_obs=args.observe, seed=args.seed
        ).mean
    grid = interpolate(
        model,
        (char_means[char_a], char_means[char_b]),
        (z[font_a], z[font_b]),
        args.steps,
    )
    tiled = np.clip(np.round(tile_grid(grid) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(tiled, mode="L").save(args.out)
    print(json.dumps({"steps": args.steps, "out": args.out}))
    return 0


def cmd_export_embeddings(args) -> int:
    from .evalkit import export_embeddings

    model, _, matrix, manifest = _load_eval_inputs(args)
    rows = export_embeddings(model, matrix, manifest, args.out)
    print(json.dumps({"rows": rows, "out": args.out}))
    return 0


def cmd_synth(args) -> int:
    from .synth import make_toy_corpus

    matrix = make_toy_corpus(args.out, args.fonts, args.chars, args.side, args.seed)
    print(json.dumps({"fonts": matrix.n_fonts, "chars": matrix.n_chars, "out": args.out}))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="glyphforge",
        description="Dual-manifold font reconstruction pipeline",
    )
    import torch

    parser.add_argument(
        "--version",
        action="version",
        version=f"glyphforge {__version__} (torch {torch.__version__})",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def corpus_args(p):
        p.add_argument("--corpus", required=True, help="corpus directory")
        p.add_argument("--manifest", help="manifest.json (default: inside corpus)")

    p = sub.add_parser("ingest", help="validate a corpus and print coverage")
    corpus_args(p)
    p.add_argument("--out", help="write the report to a file instead of stdout")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("dedup", help="remove near-duplicate fonts")
    corpus_args(p)
    p.add_argument("--cut-height", type=float, default=DEFAULT_CUT_HEIGHT)
    p.add_argument("--out", required=True, help="output corpus directory")
    p.set_defaults(func=cmd_dedup)

    p = sub.add_parser("split", help="family splits plus masked characters")
    corpus_args(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="splits.json")
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("coverage-report", help="per-character/font support counts")
    corpus_args(p)
    p.add_argument("--out")
    p.set_defaults(func=cmd_coverage)

    p = sub.add_parser("train", help="train from a JSON config")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.set_defaults(func=cmd_train)

    def eval_args(p):
        p.add_argument("--checkpoint", required=True)
        corpus_args(p)
        p.add_argument("--splits", required=True)
        p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("evaluate", help="few-shot reconstruction metrics")
    eval_args(p)
    p.add_argument("--n", default="1,8,16,32", help="comma-separated observation counts")
    p.add_argument("--out", help="report JSON path")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("reconstruct", help="decode missing glyphs of one font")
    eval_args(p)
    p.add_argument("--font", required=True)
    p.add_argument("--observe", required=True, help="comma-separated codepoint hex")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("interpolate", help="latent interpolation grid PNG")
    eval_args(p)
    p.add_argument("--chars", required=True, help="two codepoints, e.g. 0041,0042")
    p.add_argument("--fonts", required=True, help="two font ids")
    p.add_argument("--steps", type=int, default=8)
    p.add_argument("--observe", type=int, default=8, help="observations per font")
    p.add_argument("--out", default="interpolation.png")
    p.set_defaults(func=cmd_interpolate)

    p = sub.add_parser("export-embeddings", help="CSV of all embeddings")
    eval_args(p)
    p.add_argument("--out", default="embeddings.csv")
    p.set_defaults(func=cmd_export_embeddings)

    p = sub.add_parser("synth", help="generate a synthetic demo corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--fonts", type=int, default=8)
    p.add_argument("--chars", type=int, default=16)
    p.add_argument("--side", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError, RuntimeError, KeyError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
