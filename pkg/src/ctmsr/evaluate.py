"""One-step inference and full-reference evaluation drivers."""
from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .data import DatasetHandle, read_png, to_uint8, upsample, write_png
from .diffusion import SRPair, one_step_sr
from .losses import charbonnier, perceptual_proxy
from .metrics import psnr, ssim
from .plotting import plot_eval
from .trainer import load_model

METRICS = ("psnr", "ssim", "charbonnier", "perceptual_proxy")
REPORT_COLUMNS = ("id",) + METRICS + tuple(f"bicubic_{m}" for m in METRICS)
IMAGE_SUFFIXES = (".png",)


class OneStepViolation(AssertionError):
    pass


@dataclass
class EvalReport:
    rows: list[dict]
    checkpoint: str
    seed: int
    aggregate: dict = field(init=False)

    def __post_init__(self):
        if not self.rows:
            raise ValueError("empty evaluation")
        self.aggregate = {c: float(np.mean([r[c] for r in self.rows])) for c in REPORT_COLUMNS[1:]}
        bad = [c for c, v in self.aggregate.items() if not np.isfinite(v)]
        if bad:
            raise ValueError(f"non-finite aggregate metrics: {bad}")

    def write_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(REPORT_COLUMNS + ("checkpoint", "seed"))
            for r in self.rows:
                writer.writerow([r["id"]] + [repr(float(r[c])) for c in REPORT_COLUMNS[1:]]
                                + [self.checkpoint, self.seed])
            writer.writerow(["mean"] + [repr(self.aggregate[c]) for c in REPORT_COLUMNS[1:]]
                            + [self.checkpoint, self.seed])
        return path


def read_report(path) -> tuple[list[dict], dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        for c in REPORT_COLUMNS[1:]:
            r[c] = float(r[c])
    return rows[:-1], rows[-1]


def image_metrics(pred: torch.Tensor, target: torch.Tensor) -> dict:
    pred, target = pred.double(), target.double()
    return {
        "psnr": psnr(pred, target),
        "ssim": ssim(pred, target),
        "charbonnier": float(charbonnier(pred, target, 1e-3)),
        "perceptual_proxy": float(perceptual_proxy(pred, target)),
    }


def score(preds: torch.Tensor, pairs: SRPair, ids=None) -> list[dict]:
    """Per-image rows of model metrics and the bicubic (y0) baseline."""
    ids = ids or [f"{i:05d}" for i in range(len(pairs))]
    rows = []
    for i, item in enumerate(ids):
        row = {"id": item}
        row.update(image_metrics(preds[i], pairs.x0[i]))
        row.update({f"bicubic_{k}": v for k, v in image_metrics(pairs.y0[i], pairs.x0[i]).items()})
        rows.append(row)
    return rows


def _noise_for(y0: torch.Tensor, gen: torch.Generator | None) -> torch.Tensor:
    if gen is None:
        return torch.zeros_like(y0)
    return torch.randn(y0.shape, generator=gen, dtype=y0.dtype)


def super_resolve(model, y0s: torch.Tensor, seed: int = 0, noise_mode: str = "random"):
    """One backbone call per image; returns raw outputs and per-image latency in ms."""
    if noise_mode not in ("random", "zero"):
        raise ValueError(f"noise_mode must be 'random' or 'zero', got {noise_mode!r}")
    gen = torch.Generator().manual_seed(seed) if noise_mode == "random" else None
    dtype = next(model.parameters()).dtype
    calls_before = model.backbone_calls
    outs, times = [], []
    model.eval()
    with torch.no_grad():
        for y0 in y0s:
            y0 = y0.to(dtype)[None]
            noise = _noise_for(y0, gen)
            tic = time.perf_counter()
            outs.append(one_step_sr(model, y0, noise)[0])
            times.append((time.perf_counter() - tic) * 1e3)
    calls = model.backbone_calls - calls_before
    if calls != len(y0s):
        raise OneStepViolation(f"{calls} backbone calls for {len(y0s)} images")
    return torch.stack(outs) if outs else torch.empty(0), times


def _input_files(path: Path) -> list[Path]:
    if path.is_dir():
        files = sorted(p for p in path.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
        if not files:
            raise FileNotFoundError(f"no PNG images in {path}")
        return files
    if not path.exists():
        raise FileNotFoundError(f"input not found: {path}")
    return [path]


def run_infer(checkpoint, inputs, out_dir, seed: int = 0, noise_mode: str = "random", scale: int = 4) -> dict:
    """Super-resolve one LR PNG or a directory of them; writes SR PNGs and timing.csv."""
    model = load_model(checkpoint)
    files = _input_files(Path(inputs))
    lrs = []
    for f in files:
        try:
            lrs.append(torch.from_numpy(read_png(f)))
        except OSError as exc:
            raise ValueError(f"cannot decode image {f}: {exc}") from exc
    y0s = [upsample(lr, scale) for lr in lrs]
    outs, times = [], []
    calls_before = model.backbone_calls
    for y0 in y0s:  # inputs may differ in size, so no stacking
        out, ms = super_resolve(model, y0[None], seed=seed + len(outs), noise_mode=noise_mode)
        outs.append(out[0])
        times.extend(ms)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for f, sr in zip(files, outs):
        dest = out_dir / f"{f.stem}_sr.png"
        write_png(dest, sr.clamp(-1.0, 1.0))
        written.append(dest)
    with open(out_dir / "timing.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(("image", "wallclock_ms"))
        for f, ms in zip(files, times):
            writer.writerow((f.name, f"{ms:.3f}"))
    return {"outputs": written, "timing_ms": times, "backbone_calls": model.backbone_calls - calls_before}


def run_eval(checkpoint, dataset, report_path, split: str = "val", seed: int = 0,
             noise_mode: str = "random", figure: bool = True) -> EvalReport:
    """Evaluate a checkpoint on a dataset split against the bicubic baseline.

    Writes the CSV report (aggregate as the final row) and, with ``figure``,
    a PNG with the same stem.
    """
    handle = dataset if isinstance(dataset, DatasetHandle) else DatasetHandle.open(dataset)
    records = handle.records(split)
    if not records:
        raise ValueError(f"split {split!r} is empty")
    pairs = handle.load_pairs(split)
    model = load_model(checkpoint) if not isinstance(checkpoint, torch.nn.Module) else checkpoint
    preds, _ = super_resolve(model, pairs.y0, seed=seed, noise_mode=noise_mode)
    preds = preds.clamp(-1.0, 1.0).to(pairs.x0.dtype)
    name = Path(checkpoint).name if not isinstance(checkpoint, torch.nn.Module) else "in-memory"
    report = EvalReport(score(preds, pairs, [r["id"] for r in records]), name, seed)
    report_path = Path(report_path)
    report.write_csv(report_path)
    if figure:
        samples = [tuple(np.transpose(to_uint8(img.numpy()), (1, 2, 0)) for img in (pairs.y0[i], preds[i], pairs.x0[i]))
                   for i in range(min(4, len(pairs)))]
        plot_eval(report.rows, report_path.with_suffix(".png"), samples)
    return report
