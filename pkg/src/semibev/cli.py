"""``semibev`` command line: gen-data, train, eval, preview-augment, self-test.

Exit codes: 0 success, 1 self-test failure, 2 usage/config/IO error,
3 numeric failure during training.
"""
from __future__ import annotations

import argparse
import logging
import math
import sys
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_SELFTEST, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("semibev")


class UsageError(Exception):
    pass


def _fraction(text: str) -> float:
    v = float(text)
    if not 0 < v <= 1:
        raise argparse.ArgumentTypeError(f"labeled fraction must be in (0, 1], got {text}")
    return v


def _threshold(text: str) -> float:
    v = float(text)
    if not 0 < v < 1:
        raise argparse.ArgumentTypeError(f"threshold must be in (0, 1), got {text}")
    return v


def _positive_int(text: str) -> int:
    v = int(text)
    if v <= 0:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


def _overrides(extra: list[str]) -> dict[str, str]:
    """Turn ``--section.key value`` (or ``--section.key=value``) pairs into a map."""
    out = {}
    i = 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--"):
            raise UsageError(f"unexpected argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, value = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(extra):
                raise UsageError(f"missing value for --{key}")
            value = extra[i + 1]
            i += 2
        out[key] = value
    return out


# ------------------------------------------------------------------ commands

def cmd_gen_data(args) -> int:
    from .synthworld import gen_dataset

    rows = gen_dataset(args.n, args.labeled_fraction, args.seed, args.out)
    labeled = sum(1 for _, split in rows if split == "labeled")
    print(f"wrote {args.n} samples to {args.out}: {labeled} labeled, {args.n - labeled} unlabeled")
    return EXIT_OK


def cmd_train(args, extra) -> int:
    from .config import load_config
    from .trainer import NumericalError, train

    cfg = load_config(args.config, _overrides(extra))
    try:
        result = train(cfg)
    except NumericalError as e:
        print(f"error: {e}", file=sys.stderr)
        if e.dump_path:
            print(f"state dumped to {e.dump_path}", file=sys.stderr)
        return EXIT_NUMERIC
    if result.last_report is not None:
        print(result.last_report.to_table())
    print(f"outputs in {result.out_dir}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .config import load_config
    from .evaluation import evaluate
    from .model import load_checkpoint
    from .synthworld import load_dataset

    cfg = load_config(args.config) if args.config else load_config()
    root = Path(args.dataset)
    if not (root / "manifest.tsv").is_file():
        raise FileNotFoundError(f"no dataset at {root} (manifest.tsv missing)")
    params = load_checkpoint(args.checkpoint, cfg.model)
    data = load_dataset(root, cfg.model.grid)
    report = evaluate(params, data, args.threshold)
    out = Path(args.out) if args.out else Path(args.checkpoint).parent
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.tsv").write_text(report.to_tsv())
    print(report.to_table())
    return EXIT_OK


def cmd_preview(args) -> int:
    from .augment import conjoint_rotate
    from .geometry import BorderMode
    from .synthworld import load_sample, write_ppm

    sample = load_sample(args.sample)
    alpha = math.radians(args.alpha)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_ppm(out / "original.ppm", sample.image)
    modes = list(BorderMode) if args.border == "all" else [BorderMode.parse(args.border)]
    rotated = None
    for mode in modes:
        rotated = conjoint_rotate(sample, alpha, mode)
        write_ppm(out / f"warped_{mode.value}.ppm", rotated.image)
    if rotated is not None and rotated.gt_bev is not None:
        write_ppm(out / "gt_original.ppm", bev_to_rgb(sample.gt_bev.values, sample.visibility))
        write_ppm(out / "gt_rotated.ppm", bev_to_rgb(rotated.gt_bev.values, rotated.visibility))
    print(f"wrote previews for alpha={args.alpha} deg to {out}")
    return EXIT_OK


_CLASS_COLORS = np.array([[0.45, 0.45, 0.45], [0.85, 0.75, 0.55],
                          [0.15, 0.35, 0.85], [0.9, 0.2, 0.2]])


def bev_to_rgb(values: np.ndarray, visibility: np.ndarray | None = None) -> np.ndarray:
    """Paint a C×Z×X map, later classes on top; far rows at the top of the image."""
    c, z, x = values.shape
    img = np.zeros((z, x, 3))
    for k in range(c):
        img[values[k] > 0] = _CLASS_COLORS[k % len(_CLASS_COLORS)]
    if visibility is not None:
        img[~visibility.astype(bool)] *= 0.4
    return img[::-1]


def cmd_self_test(args) -> int:
    from .selftest import run_all

    return EXIT_OK if run_all() else EXIT_SELFTEST


# ------------------------------------------------------------------- parser

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="semibev", description="Semi-supervised BEV segmentation on a synthetic world.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="render a synthetic dataset")
    g.add_argument("--n", type=_positive_int, required=True)
    g.add_argument("--labeled-fraction", type=_fraction, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)

    t = sub.add_parser("train", help="train student and teacher; extra --section.key value pairs override the config")
    t.add_argument("--config", default=None)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a labeled dataset")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--dataset", required=True)
    e.add_argument("--threshold", type=_threshold, default=0.5)
    e.add_argument("--config", default=None, help="config whose model section matches the checkpoint")
    e.add_argument("--out", default=None, help="directory for report.tsv (default: next to the checkpoint)")

    a = sub.add_parser("preview-augment", help="write conjoint-rotation previews for one sample")
    a.add_argument("--sample", required=True)
    a.add_argument("--alpha", type=float, required=True, help="degrees")
    a.add_argument("--border", default="all", choices=["all", "replicate", "zero", "reflect"])
    a.add_argument("--out", required=True)

    sub.add_parser("self-test", help="run the geometry, gradient and EMA checks")
    return p


def main(argv: list[str] | None = None) -> int:
    from .config import ConfigError

    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args, extra = parser.parse_known_args(argv)
        if extra and args.command != "train":
            raise UsageError(f"unrecognized arguments: {' '.join(extra)}")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(message)s")
        if args.command == "gen-data":
            return cmd_gen_data(args)
        if args.command == "train":
            return cmd_train(args, extra)
        if args.command == "eval":
            return cmd_eval(args)
        if args.command == "preview-augment":
            return cmd_preview(args)
        return cmd_self_test(args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
