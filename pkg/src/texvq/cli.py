"""Command-line entry point: ``texvq <subcommand> [--config FILE] [--seed N] [--out DIR] [--override k=v]``.

Exit codes: 0 success, 1 configuration error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import ExperimentConfig, config_hash, dump_ini, load_config

log = logging.getLogger("texvq")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2

EXPERIMENTS = ("sweep-codebook", "ablate-tvq", "ablate-rap", "sweep-structure", "probe-decomposition")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="INI file with [scale], [net], [codebook], ... sections")
    p.add_argument("--seed", type=int, help="global seed (overrides the config)")
    p.add_argument("--out", help="output directory (overrides run.out_dir)")
    p.add_argument("--override", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override one config value; repeatable")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="texvq", description="Texture-VQ super-resolution desk experiments")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    p = sub.add_parser("gen-corpus", help="generate and save the train/test corpora")
    _common(p)
    p.add_argument("--export-images", type=int, default=0, metavar="N", help="also write the first N samples as PNG")

    for name, help_text in (
        ("train-tvq", "train stage 1 (down-sampled AE, then the two-branch model)"),
        ("train-predictor", "train the code-level index predictor on a trained stage-1 model"),
        ("finetune-rap", "reconstruction-aware fine-tuning of the code-level predictor"),
    ):
        p = sub.add_parser(name, help=help_text)
        _common(p)
        p.add_argument("--variant", choices=("tvq", "vq"), default="tvq")

    p = sub.add_parser("infer", help="super-resolve LR images with a trained pair")
    _common(p)
    p.add_argument("--variant", choices=("tvq", "vq"), default="tvq")
    p.add_argument("--stage", choices=("code", "rap"), default="rap")
    p.add_argument("inputs", nargs="+", help="LR image files (H/4 x H/4)")
    p.add_argument("--dest", default=None, help="directory for outputs (default: <out>/sr)")

    for name in EXPERIMENTS:
        p = sub.add_parser(name, help=f"run the {name} experiment and export its report")
        _common(p)
    return parser


def resolve_config(args) -> ExperimentConfig:
    overrides = list(args.override)
    if args.seed is not None:
        overrides.append(f"run.seed={args.seed}")
    if args.out is not None:
        overrides.append(f"run.out_dir={args.out}")
    return load_config(args.config, overrides)


def _cmd_gen_corpus(cfg: ExperimentConfig, args) -> dict:
    from .data import corpus_save, save_image
    from .experiments import corpora

    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train, test = corpora(cfg)
    corpus_save(train, out / "train.corpus")
    corpus_save(test, out / "test.corpus")
    for i in range(min(args.export_images, len(train))):
        save_image(out / f"sample_{i:03d}_hr.png", train.X[i])
        save_image(out / f"sample_{i:03d}_lr.png", train.Y[i])
    return {"train": str(out / "train.corpus"), "test": str(out / "test.corpus")}


def _cmd_stage(cfg: ExperimentConfig, args) -> dict:
    from .experiments import code_cell, corpora, evaluate_predictor, evaluate_stage1, rap_cell, stage1_cell

    _, test = corpora(cfg)
    s1 = stage1_cell(cfg, args.variant)
    out = {"stage1": str(s1.directory)}
    if args.command == "train-tvq":
        ev = evaluate_stage1(s1, test)
        out.update({k: v for k, v in ev.items() if not k.startswith("_")})
        return out
    if args.command == "finetune-rap" and args.variant != "tvq":
        raise ValueError("RAP fine-tuning is defined for the texture-VQ pair only")
    code = code_cell(cfg, s1)
    out["code"] = str(code.directory)
    pc = code
    if args.command == "finetune-rap":
        pc = rap_cell(cfg, s1, code)
        out["rap"] = str(pc.directory)
    ev = evaluate_predictor(s1, pc, test)
    out.update({k: v for k, v in ev.items() if not k.startswith("_")})
    return out


def _cmd_infer(cfg: ExperimentConfig, args) -> dict:
    from .data import load_image, save_image
    from .experiments import code_cell, rap_cell, stage1_cell
    from .predictor import infer_sr

    s1 = stage1_cell(cfg, args.variant)
    pc = code_cell(cfg, s1)
    if args.stage == "rap":
        pc = rap_cell(cfg, s1, pc)
    dest = Path(args.dest or Path(cfg.out_dir) / "sr")
    dest.mkdir(parents=True, exist_ok=True)
    written = []
    for path in args.inputs:
        y = load_image(path)[None]
        sr = infer_sr(pc.pred, s1.model, y.astype(s1.model.dtype))[0]
        target = dest / (Path(path).stem + "_sr.png")
        save_image(target, sr)
        written.append(str(target))
    return {"outputs": written}


def _cmd_experiment(cfg: ExperimentConfig, args) -> dict:
    from .experiments import run_and_export

    report, paths = run_and_export(args.command, cfg)
    return {"report": {k: str(v) for k, v in paths.items()}, "summary": report.summary}


def _jsonable(obj):
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    return obj


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(levelname)s %(message)s")
    from .tvq import ConfigError

    try:
        cfg = resolve_config(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    log.info("%s config_hash=%s out=%s", args.command, config_hash(cfg), cfg.out_dir)
    handlers = {"gen-corpus": _cmd_gen_corpus, "train-tvq": _cmd_stage, "train-predictor": _cmd_stage,
                "finetune-rap": _cmd_stage, "infer": _cmd_infer}
    handler = handlers.get(args.command, _cmd_experiment)
    try:
        Path(cfg.out_dir).mkdir(parents=True, exist_ok=True)
        (Path(cfg.out_dir) / "resolved_config.ini").write_text(dump_ini(cfg))
        result = handler(cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - any runtime failure maps to exit code 2
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    print(json.dumps({"command": args.command, "config_hash": config_hash(cfg), **_jsonable(result)}, indent=2,
                     default=str))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
