"""Command-line entry point: ``swinmamba <command> [options]``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import tensor as T
from .config import ConfigError, parse_config
from .data import VesselGenParams, load_dataset, make_split, read_image8, save_dataset, write_pgm

log = logging.getLogger("swinmamba")

GRAD_TOL = 1e-4


class UsageError(Exception):
    pass


def _common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="key = value config file")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key (repeatable)")
    parser.add_argument("--preset", help="ablation preset: baseline, m1, m2, m3 or full")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="swinmamba", description=__doc__)
    sub = parser.add_subparsers(dest="command", metavar="command")

    p = sub.add_parser("gen-data", help="write a seeded synthetic vessel dataset")
    _common(p)
    p.add_argument("--out", help="dataset root (default: data_dir)")
    p.add_argument("--format", choices=("pgm", "png"), default="pgm")

    p = sub.add_parser("train", help="train a model")
    _common(p)
    p.add_argument("--resume", help="resume from a '.last' checkpoint")
    p.add_argument("--generate", action="store_true",
                   help="generate the dataset in memory instead of reading data_dir")

    p = sub.add_parser("eval", help="score a checkpoint on a dataset")
    _common(p)
    p.add_argument("--checkpoint", help="checkpoint file (required)")
    p.add_argument("--data", help="dataset root with images/ and masks/ (default: data_dir/test)")
    p.add_argument("--report", help="also write the summary to this file")

    p = sub.add_parser("tokenize-debug", help="overlay anchor strings and windows on an image")
    _common(p)
    p.add_argument("--image", help="grayscale PGM/PNG input (required)")
    p.add_argument("--stage", type=int, default=0)
    p.add_argument("--checkpoint", help="take offsets from a trained model")
    p.add_argument("--out", default="overlay", help="output path prefix")

    p = sub.add_parser("grad-check", help="run the gradient suite")
    p.add_argument("--points", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)

    sub.add_parser("version", help="print the version")
    parser.subcommands = sub.choices
    return parser


def _config(args):
    return parse_config(args.config, args.set, args.preset)


def _data_root(cfg) -> Path:
    return Path(cfg["data_dir"])


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    root = Path(args.out or cfg["data_dir"])
    params = VesselGenParams(size=cfg["input_size"])
    train_set, test_set = make_split(cfg["n_train"], cfg["n_test"], cfg["seed"], params)
    save_dataset(train_set, root / "train", args.format)
    save_dataset(test_set, root / "test", args.format)
    print(f"wrote {len(train_set)} train / {len(test_set)} test samples to {root}")
    return 0


def cmd_train(args) -> int:
    from .trainer import TrainConfig, train

    cfg = _config(args)
    out = Path(cfg["out_dir"])
    cfg.echo(out)
    if args.generate:
        params = VesselGenParams(size=cfg["input_size"])
        train_set, test_set = make_split(cfg["n_train"], cfg["n_test"], cfg["seed"], params)
    else:
        root = _data_root(cfg)
        train_set, test_set = load_dataset(root / "train"), load_dataset(root / "test")
        if not train_set:
            raise UsageError(f"no training images under {root / 'train'}; run gen-data or pass --generate")
    tcfg = TrainConfig(epochs=cfg["epochs"], lr=cfg["lr"], batch_size=cfg["batch_size"],
                       seed=cfg["seed"], eval_interval=cfg["eval_interval"], crop=cfg["crop"] or None,
                       dtype=cfg["dtype"], checkpoint_path=str(out / "model.ckpt"),
                       log_path=str(out / "log.txt"))
    result = train(tcfg, cfg.model_config(), train_set, test_set or None, resume=args.resume)
    print(f"trained {len(result.losses)} steps; best cldice {result.best_cldice:.4f}; "
          f"checkpoint {out / 'model.ckpt'}")
    return 0


def cmd_eval(args) -> int:
    from .trainer import evaluate, load_checkpoint

    if not args.checkpoint:
        raise UsageError("eval needs --checkpoint")
    if not Path(args.checkpoint).is_file():
        raise UsageError(f"checkpoint not found: {args.checkpoint}")
    cfg = _config(args)
    data = Path(args.data) if args.data else _data_root(cfg) / "test"
    dataset = load_dataset(data)
    if not dataset:
        raise UsageError(f"no images under {data}")
    model = load_checkpoint(args.checkpoint)
    report = evaluate(model, dataset)
    print("\n".join(report.lines()))
    if args.report:
        report.write(args.report)
    return 0


def cmd_tokenize_debug(args) -> int:
    from .network import build_model
    from .overlay import render_overlay
    from .trainer import load_checkpoint

    if not args.image:
        raise UsageError("tokenize-debug needs --image")
    if not Path(args.image).is_file():
        raise UsageError(f"image not found: {args.image}")
    cfg = _config(args)
    image = read_image8(args.image).astype(float) / 255.0
    with T.default_dtype(np.float64), T.no_grad():
        if args.checkpoint:
            model = load_checkpoint(args.checkpoint)
        else:
            model = build_model(cfg.model_config())
        if not model.config.use_bam:
            raise UsageError("the selected configuration has no tokenizer (use_bam is off)")
        F = model.block_input(T.Tensor(image[None]), args.stage)
        tokenizer = model.layers[f"enc{args.stage}.block"].tokenizer
        strings = tokenizer.strings(F)
    scale = 2 ** args.stage
    s = tokenizer.config.s
    anchors_path = Path(f"{args.out}_anchors.pgm")
    windows_path = Path(f"{args.out}_windows.pgm")
    write_pgm(anchors_path, render_overlay(image, strings, s, scale, windows=False))
    # a sparse subset of cells and only the end and center windows keep the outlines readable
    n_cols = F.shape[-1] // s
    sparse = [i for i in range(len(strings)) if (i // n_cols) % 3 == 1 and (i % n_cols) % 3 == 1]
    L = tokenizer.config.L
    write_pgm(windows_path, render_overlay(image, strings, s, scale, cells=sparse,
                                           which=sorted({0, L // 2, L - 1})))
    print(f"stage {args.stage}: {len(strings)} strings of {tokenizer.config.L} windows; "
          f"wrote {anchors_path} and {windows_path}")
    return 0


def cmd_grad_check(args) -> int:
    from .gradcheck import run_suite

    results = run_suite(args.points, args.seed, report=print)
    worst = max(results.values())
    failed = [k for k, v in results.items() if not v < GRAD_TOL]
    print(f"worst max_rel_err={worst:.3e} over {len(results)} checks; tolerance {GRAD_TOL:g}")
    if failed:
        print("FAILED: " + ", ".join(failed))
        return 1
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "tokenize-debug": cmd_tokenize_debug,
    "grad-check": cmd_grad_check,
    "version": lambda args: print(__version__) or 0,
}


def run_command(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    if args.command is None:
        parser.print_usage(sys.stderr)
        print("swinmamba: error: a command is required", file=sys.stderr)
        return 2
    try:
        return COMMANDS[args.command](args)
    except UsageError as e:
        parser.subcommands[args.command].print_usage(sys.stderr)
        print(f"swinmamba {args.command}: error: {e}", file=sys.stderr)
        return 2
    except (ConfigError, ValueError, OSError) as e:
        print(f"swinmamba {args.command}: error: {e}", file=sys.stderr)
        return 1


def main() -> None:
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    sys.exit(run_command())


if __name__ == "__main__":
    main()
