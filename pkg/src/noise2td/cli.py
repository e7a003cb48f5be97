"""``n2td`` command line: simulate, train, denoise, reconstruct, evaluate."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import config as cfgmod
from .metrics import evaluate_report, reports_to_csv
from .projsim import (
    ProjectionStack, StackFormatError, apply_noise, make_phantom, normalize_stack, project_stack, read_stack, simulate,
    to_float32, write_stack,
)
from .recon import reconstruct, write_volume
from .training import CheckpointError, Trainer, denoise_frames, load_checkpoint, save_checkpoint

log = logging.getLogger("noise2td")

# error category -> exit code; the category is the first token of the error line
EXIT_CODES = {"config": 2, "format": 3, "checkpoint": 4, "input": 5, "numeric": 6, "internal": 1}


class CliError(Exception):
    def __init__(self, category: str, message: str):
        super().__init__(message)
        self.category = category


def _prepare(args) -> tuple[cfgmod.ExperimentConfig, Path]:
    config = cfgmod.load_config(args.config)
    if args.seed is not None:
        config = config.with_seed(args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfgmod.dump_config(config, out / "config.resolved.yaml")
    return config, out


def _simulated(config, phantom_seed: int, noise_seed: int, id: str) -> ProjectionStack:
    n = config.noise
    return to_float32(simulate(config.phantom.spec(phantom_seed), config.geometry.build(), n.lam, n.a,
                               noise_seed, id=id))


def cmd_simulate(args) -> None:
    config, out = _prepare(args)
    n = config.noise
    clean = normalize_stack(project_stack(make_phantom(config.phantom.spec()), config.geometry.build(),
                                          id=f"phantom{config.phantom.seed}"))
    noisy = to_float32(apply_noise(clean, n.lam, n.a, n.seed))
    clean = to_float32(dataclasses.replace(clean, id=clean.id + "-clean"))
    write_stack(clean, out / "clean.ctpk")
    write_stack(noisy, out / "noisy.ctpk")
    log.info("stack %s shape %s lambda %g a %g seed %d -> %s", noisy.id, noisy.shape, n.lam, n.a, n.seed, out)


def _load_stacks(paths) -> list[ProjectionStack]:
    return [read_stack(p) for p in paths]


def cmd_train(args) -> None:
    config, out = _prepare(args)
    train_paths = args.train or list(config.paths.train)
    val_paths = args.val or list(config.paths.val)
    base = config.noise.seed
    if train_paths:
        train = _load_stacks(train_paths)
    else:
        train = [_simulated(config, s, base + s, f"train{s}") for s in config.data.train_seeds]
    if val_paths:
        val = _load_stacks(val_paths)
    else:
        val = [_simulated(config, s, base + s, f"val{s}") for s in config.data.val_seeds]
    for stack in val:
        if stack.clean_frames is None:
            raise CliError("input", f"validation stack {stack.id} has no clean frames")
    torch.manual_seed(config.train.seed)
    ckpt = Trainer(config.model, config.train).fit(train, val, history_path=out / "history.csv")
    save_checkpoint(ckpt, out / "model.n2td")
    log.info("best checkpoint epoch %d step %d noise %s -> %s", ckpt.epoch, ckpt.step,
             json.dumps(ckpt.noise_params), out / "model.n2td")


def cmd_denoise(args) -> None:
    config, out = _prepare(args)
    ckpt_path = args.checkpoint or config.paths.checkpoint
    if ckpt_path is None:
        raise CliError("config", "no checkpoint given (--checkpoint or paths.checkpoint)")
    ckpt = load_checkpoint(ckpt_path)
    stack = read_stack(args.input)
    model, noise = ckpt.build_model(), ckpt.build_noise()
    frames, centers = denoise_frames(model, noise, stack.frames, stack.geometry.circular,
                                     ckpt.train_config.noise_mode)
    denoised = stack.frames.astype(np.float64).copy()
    denoised[centers] = frames
    result = dataclasses.replace(stack, frames=denoised.astype(np.float32), id=stack.id + "-denoised")
    write_stack(result, out / "denoised.ctpk")
    log.info("denoised %d of %d frames -> %s", len(centers), stack.shape[0], out / "denoised.ctpk")


def cmd_reconstruct(args) -> None:
    config, out = _prepare(args)
    volume = reconstruct(read_stack(args.input), config.recon.grid, config.recon.window)
    write_volume(volume, out / "volume.ctvl")
    log.info("volume %s -> %s", volume.voxels.shape, out / "volume.ctvl")


def cmd_evaluate(args) -> None:
    config, out = _prepare(args)
    noisy, denoised, clean = read_stack(args.noisy), read_stack(args.denoised), read_stack(args.clean)
    reports = evaluate_report(noisy, denoised, clean, with_recon=args.recon,
                              noise_params=noisy.noise_truth, grid=config.recon.grid)
    reports_to_csv(reports, out / "report.csv")
    for rep in reports:
        for pair in rep.pairs:
            agg = rep.aggregate(pair)
            log.info("%s %s psnr %.3f ssim %.4f l1 %.5f", rep.domain, pair, agg["psnr_db"], agg["ssim"], agg["l1"])


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML experiment config")
    common.add_argument("--seed", type=int, help="override phantom, noise and training seeds")
    common.add_argument("--out", default=".", help="output directory")
    common.add_argument("--quiet", action="store_true", help="only print errors")

    parser = argparse.ArgumentParser(prog="n2td", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", parents=[common], help="write clean.ctpk and noisy.ctpk")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train", parents=[common], help="train and write model.n2td + history.csv")
    p.add_argument("--train", nargs="*", default=[], help="training .ctpk stacks")
    p.add_argument("--val", nargs="*", default=[], help="validation .ctpk stacks (with clean frames)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("denoise", parents=[common], help="write denoised.ctpk")
    p.add_argument("--checkpoint")
    p.add_argument("--input", required=True)
    p.set_defaults(func=cmd_denoise)

    p = sub.add_parser("reconstruct", parents=[common], help="write volume.ctvl")
    p.add_argument("--input", required=True)
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("evaluate", parents=[common], help="write report.csv")
    p.add_argument("--noisy", required=True)
    p.add_argument("--denoised", required=True)
    p.add_argument("--clean", required=True)
    p.add_argument("--recon", action="store_true", help="also compare FBP reconstructions")
    p.set_defaults(func=cmd_evaluate)
    return parser


def _category(exc: Exception) -> str:
    if isinstance(exc, CliError):
        return exc.category
    if isinstance(exc, cfgmod.ConfigError):
        return "config"
    if isinstance(exc, CheckpointError):
        return "checkpoint"
    if isinstance(exc, StackFormatError):
        return "format"
    if isinstance(exc, FloatingPointError):
        return "numeric"
    if isinstance(exc, (ValueError, OSError)):
        return "input"
    return "internal"


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(asctime)s %(message)s",
                        stream=sys.stderr, force=True)
    try:
        args.func(args)
    except Exception as exc:  # noqa: BLE001 - every failure becomes one parsable line
        category = _category(exc)
        message = " ".join(str(exc).split())
        print(f"error: {category}: {type(exc).__name__}: {message}", file=sys.stderr)
        return EXIT_CODES[category]
    return 0


if __name__ == "__main__":
    sys.exit(main())
