"""Command-line entry point: ``ctmsr <subcommand> ...``."""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from .config import RunConfig, load_config
from .data import DatasetHandle, generate_corpus
from .evaluate import run_eval, run_infer
from .plotting import plot_loss_log
from .trainer import LossLog, TrainState, load_checkpoint, save_checkpoint, train_stage1, train_stage2

log = logging.getLogger("ctmsr")


def _default_seed():
    value = os.environ.get("CTMSR_SEED")
    return int(value) if value not in (None, "") else None


def _load(args) -> RunConfig:
    cfg = load_config(args.config)
    seed = args.seed if args.seed is not None else _default_seed()
    return cfg.with_seed(seed) if seed is not None else cfg


def cmd_generate_data(args) -> int:
    cfg = _load(args)
    out = Path(args.out or cfg.paths.data)
    n = args.n or cfg.corpus.n_images
    seed = args.seed if args.seed is not None else (_default_seed() if _default_seed() is not None else cfg.corpus.seed)
    handle = generate_corpus(n, cfg.corpus.patch_size, seed, out, cfg.degradation)
    print(f"wrote {handle.count} pairs to {handle.manifest}")
    return 0


def _finish_training(state, rows, tag, cfg: RunConfig) -> None:
    ckpt = save_checkpoint(state, Path(cfg.paths.checkpoints) / f"{tag}_final.ckpt")
    fig = plot_loss_log(rows, Path(cfg.paths.reports) / f"train_{tag}_loss.png")
    print(f"k={state.k} stage={state.stage} checkpoint={ckpt} figure={fig}")


def cmd_train_ct(args) -> int:
    cfg = _load(args)
    data = DatasetHandle.open(cfg.paths.data)
    loss_log = LossLog(Path(cfg.paths.reports) / "train_ct_loss.csv")
    state = TrainState.fresh(cfg.backbone, cfg.schedule, cfg.train.seed)
    state = train_stage1(cfg.train, data, state, loss_log=loss_log, checkpoint_dir=cfg.paths.checkpoints)
    _finish_training(state, loss_log.rows, "ct", cfg)
    return 0


def _train_matching(args, matching: str) -> int:
    cfg = _load(args)
    train_cfg = cfg.train.__class__(**{**cfg.train.__dict__, "matching": matching})
    data = DatasetHandle.open(cfg.paths.data)
    ckpt = Path(args.checkpoint or Path(cfg.paths.checkpoints) / "ct_final.ckpt")
    state = load_checkpoint(ckpt)
    loss_log = LossLog(Path(cfg.paths.reports) / f"train_{matching}_loss.csv")
    state = train_stage2(state, train_cfg, data, loss_log=loss_log, checkpoint_dir=cfg.paths.checkpoints)
    _finish_training(state, loss_log.rows, matching, cfg)
    return 0


def cmd_infer(args) -> int:
    seed = args.seed if args.seed is not None else (_default_seed() or 0)
    result = run_infer(args.checkpoint, args.input, args.out, seed=seed, noise_mode=args.noise)
    print(f"wrote {len(result['outputs'])} images to {args.out} "
          f"({result['backbone_calls']} backbone calls)")
    return 0


def cmd_eval(args) -> int:
    seed = args.seed if args.seed is not None else (_default_seed() or 0)
    report = run_eval(args.checkpoint, args.dataset, args.report, split=args.split, seed=seed,
                      noise_mode=args.noise)
    agg = report.aggregate
    print(f"{len(report.rows)} images: PSNR {agg['psnr']:.3f} dB (bicubic {agg['bicubic_psnr']:.3f}), "
          f"SSIM {agg['ssim']:.4f} (bicubic {agg['bicubic_ssim']:.4f}), "
          f"proxy {agg['perceptual_proxy']:.5f} (bicubic {agg['bicubic_perceptual_proxy']:.5f})")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ctmsr", description="One-step consistency super-resolution toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_, config=True):
        p = sub.add_parser(name, help=help_)
        if config:
            p.add_argument("--config", required=True, help="run configuration (TOML)")
        p.add_argument("--seed", type=int, default=None, help="seed override (default: $CTMSR_SEED)")
        p.set_defaults(func=func)
        return p

    p = add("generate-data", cmd_generate_data, "write the synthetic HR/LR corpus")
    p.add_argument("--out", help="output directory (default: paths.data)")
    p.add_argument("--n", type=int, help="number of images (default: corpus.n_images)")

    add("train-ct", cmd_train_ct, "stage 1: consistency training")
    for name, matching in (("train-dtm", "dtm"), ("train-sds", "sds")):
        p = add(name, lambda a, m=matching: _train_matching(a, m), f"stage 2: CT + {matching.upper()} fine-tuning")
        p.add_argument("--checkpoint", help="stage-1 checkpoint (default: <checkpoints>/ct_final.ckpt)")

    p = add("infer", cmd_infer, "one-step SR of LR PNG file(s)", config=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True, help="LR PNG or directory of PNGs")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--noise", choices=("random", "zero"), default="random")

    p = add("eval", cmd_eval, "PSNR/SSIM/proxy report against bicubic", config=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True, help="dataset directory or manifest")
    p.add_argument("--split", default="val")
    p.add_argument("--report", required=True, help="CSV report path (figure written alongside)")
    p.add_argument("--noise", choices=("random", "zero"), default="random")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (OSError, ValueError, FloatingPointError, AssertionError) as exc:
        print(f"ctmsr: error: {exc}".splitlines()[0], file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
