"""Command-line entry point: ``gradspace <subcommand> [options]``."""

from __future__ import annotations

import argparse
import logging
import sys

from . import pipeline
from .config import load_config
from .errors import GradspaceError

log = logging.getLogger("gradspace")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config field, e.g. --set gradnet.epochs=3 (value parsed as JSON)")
    p.add_argument("--out", dest="out_dir", help="output directory (overrides out_dir)")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gradspace", description="Gradient-space features and GradNet experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-base", help="train the base MLP with accuracy-threshold snapshots")
    _common(p)

    p = sub.add_parser("extract-grads", help="write sparsified, normalized gradient features (GRDF)")
    _common(p)
    p.add_argument("--base", required=True, help="base network checkpoint")
    p.add_argument("--split", default="gradnet", choices=["gradnet", "test"])
    p.add_argument("--label-mode", choices=["random", "all_labels", "true_labels"])
    p.add_argument("--limit", type=int, help="only the first N samples of the split")
    p.add_argument("--output", help="feature file path")

    p = sub.add_parser("train-gradnet", help="train GradNet on a base network's gradients")
    _common(p)
    p.add_argument("--base", required=True)
    p.add_argument("--features", help="train from a GRDF file instead of on-the-fly gradients")
    p.add_argument("--output", help="GradNet checkpoint path")

    p = sub.add_parser("eval", help="compare base and GradNet test accuracy")
    _common(p)
    p.add_argument("--base", required=True)
    p.add_argument("--gradnet", required=True)
    p.add_argument("--output", help="metrics JSON path")

    p = sub.add_parser("rbm", help="RBM hidden activations vs normalized tangent features")
    _common(p)

    p = sub.add_parser("kernel-check", help="invariance, PSD and symmetry checks on a tiny model")
    _common(p)

    p = sub.add_parser("gradgraph", help="export the sparsified gradient graph of one test sample as DOT")
    _common(p)
    p.add_argument("--base", required=True)
    p.add_argument("--output", help="DOT path")
    return parser


def run(args: argparse.Namespace) -> int:
    overrides = list(args.set)
    if args.out_dir:
        overrides.append(f"out_dir={args.out_dir}")
    cfg = load_config(args.config, overrides)
    log.info("config %s (seed %d)", cfg.hash, cfg.seed)
    cmd = args.command
    if cmd == "train-base":
        pipeline.cmd_train_base(cfg)
    elif cmd == "extract-grads":
        path = pipeline.cmd_extract(cfg, args.base, args.split, args.label_mode, args.output, args.limit)
        print(path)
    elif cmd == "train-gradnet":
        pipeline.cmd_train_gradnet(cfg, args.base, args.features, args.output)
    elif cmd == "eval":
        pipeline.cmd_eval(cfg, args.base, args.gradnet, args.output)
    elif cmd == "rbm":
        pipeline.cmd_rbm(cfg)
    elif cmd == "kernel-check":
        result = pipeline.cmd_kernel_check(cfg)
        if not all(result["pass"].values()):
            return 4
    elif cmd == "gradgraph":
        print(pipeline.cmd_gradgraph(cfg, args.base, args.output)["path"])
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        return run(args)
    except GradspaceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
