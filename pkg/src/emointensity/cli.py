"""Command-line entry point: ``emointensity <verb> [--config F] [--seed N] [--out DIR] [--alpha A]...``"""

from __future__ import annotations

import argparse
import json
import sys

from . import pipeline
from .config import apply_override, load_config

ERROR_PREFIX = "emointensity: error"
VERBS = ("gen", "rank", "remap", "pool", "train-extractor", "mi", "fuse", "report", "all")


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", default=argparse.SUPPRESS, help="JSON config file")
    p.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    p.add_argument("--out", default=argparse.SUPPRESS, help="output directory")
    p.add_argument("--alpha", type=float, action="append", default=argparse.SUPPRESS,
                   help="control value; repeat for a sweep")
    p.add_argument("--joint", action="store_true", default=argparse.SUPPRESS,
                   help="one ranker over all classes instead of one per class")
    p.add_argument("--set", dest="overrides", action="append", default=argparse.SUPPRESS,
                   metavar="KEY=VALUE", help="override any config entry, e.g. ranking.c=2.0")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = argparse.ArgumentParser(prog="emointensity", parents=[common],
                                     description="Emotion intensity ranking, remapping and control pipeline")
    sub = parser.add_subparsers(dest="verb", required=True)
    helps = {
        "gen": "write a synthetic corpus, latent file and embeddings",
        "rank": "standardize features and train the ranking model(s)",
        "remap": "score utterances and remap intensities per class",
        "pool": "build the emotion-embedding candidate pool",
        "train-extractor": "train the intensity extractor and emotion classifier",
        "mi": "fit the variational network and estimate the MI bound",
        "fuse": "alpha sweep: adjust intensity, select candidates, attention fusion",
        "report": "merge stage reports into summary tables",
        "all": "run every stage in order, then report",
    }
    for verb in VERBS:
        sub.add_parser(verb, parents=[common], help=helps[verb])
    return parser


def resolve_config(args: argparse.Namespace):
    cfg = load_config(getattr(args, "config", None))
    for assignment in getattr(args, "overrides", []) or []:
        apply_override(cfg, assignment)
    if hasattr(args, "seed"):
        cfg.seed = args.seed
    if hasattr(args, "out"):
        cfg.out = args.out
    if hasattr(args, "alpha"):
        cfg.alphas = list(args.alpha)
    if getattr(args, "joint", False):
        cfg.ranking.joint = True
    return cfg


def _error(kind: str, message: str) -> int:
    print(f"{ERROR_PREFIX}: {kind}: {message}", file=sys.stderr)
    return 1


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
        if args.verb == "all":
            result = pipeline.run_all(cfg)
        else:
            result = pipeline.RUNNERS[args.verb](cfg)
    except pipeline.MissingArtifact as exc:
        return _error("missing-artifact", str(exc))
    except FileNotFoundError as exc:
        return _error("not-found", str(exc))
    except PermissionError as exc:
        return _error("unwritable", str(exc))
    except (KeyError, ValueError, IndexError, FloatingPointError, RuntimeError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else str(exc)
        return _error(type(exc).__name__, str(msg))
    print(json.dumps(result, indent=2, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
