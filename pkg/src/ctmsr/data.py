"""Synthetic HR corpus, parametric x4 degradation and SR-pair assembly."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from scipy import ndimage

from .diffusion import SRPair

SCALE = 4
MANIFEST_NAME = "manifest.jsonl"


@dataclass(frozen=True)
class DegradationSpec:
    blur_sigma: float = 0.8
    kernel: str = "bicubic"
    noise_sigma: float = 0.02
    seed: int = 0

    def __post_init__(self):
        if self.kernel not in ("box", "bicubic"):
            raise ValueError(f"unknown downsample kernel {self.kernel!r}")
        if not (np.isfinite(self.blur_sigma) and self.blur_sigma >= 0):
            raise ValueError("blur_sigma must be finite and >= 0")
        if not (np.isfinite(self.noise_sigma) and self.noise_sigma >= 0):
            raise ValueError("noise_sigma must be finite and >= 0")


@dataclass
class DatasetHandle:
    manifest: Path
    patch_size: int
    scale: int = SCALE
    count: int = 0
    seed: int = 0
    splits: tuple = ("train", "val")
    _records: list = field(default=None, repr=False)

    @classmethod
    def open(cls, path) -> "DatasetHandle":
        path = Path(path)
        if path.is_dir():
            path = path / MANIFEST_NAME
        records = read_manifest(path)
        if not records:
            raise ValueError(f"empty manifest {path}")
        meta = json.loads((path.parent / "dataset.json").read_text())
        return cls(path, meta["patch_size"], meta["scale"], len(records), meta["seed"],
                   tuple(sorted({r["split"] for r in records})), records)

    @property
    def root(self) -> Path:
        return self.manifest.parent

    def records(self, split: str | None = None) -> list[dict]:
        if self._records is None:
            self._records = read_manifest(self.manifest)
        return [r for r in self._records if split is None or r["split"] == split]

    def load_pairs(self, split: str = "train") -> SRPair:
        """Decode a split into one batched SRPair (y0 rebuilt from the LR PNGs)."""
        recs = self.records(split)
        if not recs:
            raise ValueError(f"split {split!r} is empty")
        hr = np.stack([read_png(self.root / r["hr_path"]) for r in recs])
        lr = np.stack([read_png(self.root / r["lr_path"]) for r in recs])
        x0 = torch.from_numpy(hr)
        lr_t = torch.from_numpy(lr)
        return SRPair(x0, upsample(lr_t, self.scale), lr_t)


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.round((np.clip(img, -1.0, 1.0) + 1.0) * 127.5).astype(np.uint8)


def from_uint8(arr: np.ndarray) -> np.ndarray:
    return (arr.astype(np.float32) / 127.5 - 1.0).astype(np.float32)


def write_png(path, img) -> None:
    """Write a (C, H, W) [-1, 1] image as 8-bit PNG."""
    if isinstance(img, torch.Tensor):
        img = img.detach().cpu().numpy()
    Image.fromarray(to_uint8(np.transpose(img, (1, 2, 0)))).save(path, optimize=False)


def read_png(path) -> np.ndarray:
    """Decode an 8-bit RGB PNG into a (3, H, W) float32 array in [-1, 1]."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"))
    return np.ascontiguousarray(np.transpose(from_uint8(arr), (2, 0, 1)))


def _gaussian_field(rng, size, channels):
    # 1/f^beta spectrum, normalised to unit std per channel
    beta = rng.uniform(3.5, 5.0)
    fy = np.fft.fftfreq(size)[:, None]
    fx = np.fft.fftfreq(size)[None, :]
    radius = np.sqrt(fx**2 + fy**2)
    radius[0, 0] = 1.0
    amp = radius ** (-beta / 2)
    amp[0, 0] = 0.0
    spectrum = amp * (rng.standard_normal((channels, size, size)) + 1j * rng.standard_normal((channels, size, size)))
    field_ = np.fft.ifft2(spectrum).real
    field_ /= field_.std(axis=(1, 2), keepdims=True) + 1e-12
    return field_


def _oriented_gradient(rng, size, channels):
    theta = rng.uniform(0, 2 * np.pi)
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1) - 0.5
    ramp = np.cos(theta) * xx + np.sin(theta) * yy
    freq = rng.uniform(0.25, 1.5)
    profile = np.sin(2 * np.pi * freq * ramp + rng.uniform(0, 2 * np.pi))
    colors = rng.uniform(-1, 1, size=(channels, 1, 1))
    return colors * profile[None]


def _shapes(rng, img):
    channels, size, _ = img.shape
    yy, xx = np.mgrid[0:size, 0:size]
    for _ in range(rng.integers(2, 7)):
        color = rng.uniform(-1, 1, size=(channels, 1, 1))
        cy, cx = rng.uniform(0, size, size=2)
        if rng.random() < 0.5:
            r = rng.uniform(size / 10, size / 3)
            mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= r**2
        else:
            hy, hx = rng.uniform(size / 10, size / 3, size=2)
            mask = (np.abs(yy - cy) <= hy) & (np.abs(xx - cx) <= hx)
        img = np.where(mask[None], color, img)
    return img


def synth_image(seed: int, size: int, channels: int = 3) -> np.ndarray:
    """One HR image: random field + oriented gradient background, then flat shapes."""
    rng = np.random.default_rng(seed)
    base = 0.35 * _gaussian_field(rng, size, channels) * rng.uniform(0.3, 1.0)
    base = base + 0.5 * _oriented_gradient(rng, size, channels)
    img = _shapes(rng, base)
    return np.clip(img, -1.0, 1.0).astype(np.float32)


def downsample(img: torch.Tensor, scale: int, kernel: str) -> torch.Tensor:
    if kernel == "box":
        return F.avg_pool2d(img, scale)
    return F.interpolate(img, scale_factor=1 / scale, mode="bicubic", align_corners=False, antialias=True)


def upsample(lr: torch.Tensor, scale: int = SCALE) -> torch.Tensor:
    """Bicubic upsample of LR to the HR grid, clamped to [-1, 1]."""
    batched = lr.dim() == 4
    x = lr if batched else lr[None]
    y = F.interpolate(x, scale_factor=scale, mode="bicubic", align_corners=False).clamp(-1.0, 1.0)
    return y if batched else y[0]


def degrade(hr, spec: DegradationSpec, scale: int = SCALE):
    """Blur -> x4 downsample -> additive Gaussian noise, clipped to [-1, 1]."""
    is_tensor = isinstance(hr, torch.Tensor)
    arr = hr.detach().cpu().numpy() if is_tensor else np.asarray(hr)
    if arr.shape[-1] % scale or arr.shape[-2] % scale:
        raise ValueError(f"HR sides {arr.shape[-2:]} not divisible by {scale}")
    arr = arr.astype(np.float64)
    if spec.blur_sigma > 0:
        sig = [0] * (arr.ndim - 2) + [spec.blur_sigma, spec.blur_sigma]
        arr = ndimage.gaussian_filter(arr, sigma=sig, mode="reflect")
    x = torch.from_numpy(arr)
    x = downsample(x if x.dim() == 4 else x[None], scale, spec.kernel)
    lr = x.numpy() if arr.ndim == 4 else x[0].numpy()
    if spec.noise_sigma > 0:
        rng = np.random.default_rng(spec.seed)
        lr = lr + spec.noise_sigma * rng.standard_normal(lr.shape)
    lr = np.clip(lr, -1.0, 1.0).astype(np.float32)
    return torch.from_numpy(lr) if is_tensor else lr


def make_pair(hr, spec: DegradationSpec, scale: int = SCALE) -> SRPair:
    x0 = torch.as_tensor(np.asarray(hr, dtype=np.float32)) if not isinstance(hr, torch.Tensor) else hr
    lr = degrade(x0, spec, scale)
    return SRPair(x0, upsample(lr, scale), lr)


def item_seeds(seed: int, n: int) -> list[int]:
    """Distinct per-item seeds derived from the corpus seed."""
    states = np.random.SeedSequence(seed).generate_state(n, dtype=np.uint64)
    # uint64 collisions are practically impossible, but the split-disjointness contract relies on it
    if len(set(states.tolist())) != n:
        raise RuntimeError("seed collision")
    return [int(s) & 0x7FFF_FFFF_FFFF_FFFF for s in states]


def _sha256(*paths) -> str:
    h = hashlib.sha256()
    for p in paths:
        h.update(Path(p).read_bytes())
    return h.hexdigest()


def write_manifest(path, records) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_manifest(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def generate_corpus(n: int, patch_size: int, seed: int, out_dir,
                    degradation: DegradationSpec | None = None, val_fraction: float = 0.1) -> DatasetHandle:
    """Write ``n`` HR/LR PNG pairs plus a line-delimited manifest under ``out_dir``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if patch_size % SCALE:
        raise ValueError(f"patch_size must be divisible by {SCALE}")
    degradation = degradation or DegradationSpec()
    out = Path(out_dir)
    (out / "hr").mkdir(parents=True, exist_ok=True)
    (out / "lr").mkdir(parents=True, exist_ok=True)
    n_val = int(round(n * val_fraction)) if n > 1 else 0
    records = []
    for i, item_seed in enumerate(item_seeds(seed, n)):
        split = "train" if i < n - n_val else "val"
        hr = synth_image(item_seed, patch_size)
        spec = DegradationSpec(degradation.blur_sigma, degradation.kernel, degradation.noise_sigma,
                               seed=item_seed ^ degradation.seed)
        lr = degrade(hr, spec)
        item_id = f"{i:05d}"
        hr_rel, lr_rel = f"hr/{item_id}.png", f"lr/{item_id}.png"
        write_png(out / hr_rel, hr)
        write_png(out / lr_rel, lr)
        records.append({
            "id": item_id, "hr_path": hr_rel, "lr_path": lr_rel, "split": split,
            "seed": item_seed, "sha256": _sha256(out / hr_rel, out / lr_rel),
        })
    manifest = out / MANIFEST_NAME
    write_manifest(manifest, records)
    meta = {"patch_size": patch_size, "scale": SCALE, "seed": seed, "count": n,
            "degradation": asdict(degradation)}
    (out / "dataset.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    return DatasetHandle(manifest, patch_size, SCALE, n, seed, ("train", "val"), records)
