import hashlib

import numpy as np
import pytest
import torch

from ctmsr.data import (
    DatasetHandle, DegradationSpec, degrade, from_uint8, generate_corpus, make_pair, read_png, synth_image,
    to_uint8, write_png,
)


def _tree_digest(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def test_corpus_is_deterministic(tmp_path):
    a = generate_corpus(10, 32, 7, tmp_path / "a")
    b = generate_corpus(10, 32, 7, tmp_path / "b")
    assert _tree_digest(tmp_path / "a") == _tree_digest(tmp_path / "b")
    assert a.count == 10 and len(a.records("train")) == 9 and len(a.records("val")) == 1


def test_corpus_manifest_and_loading(tmp_path):
    handle = generate_corpus(6, 32, 1, tmp_path / "c")
    reopened = DatasetHandle.open(tmp_path / "c")
    assert reopened.records() == handle.records()
    ids = [r["id"] for r in handle.records()]
    assert len(set(ids)) == 6
    assert not {r["id"] for r in handle.records("train")} & {r["id"] for r in handle.records("val")}
    pairs = reopened.load_pairs("train")
    assert pairs.x0.shape == (5, 3, 32, 32) and pairs.y0.shape == pairs.x0.shape
    assert pairs.lr.shape == (5, 3, 8, 8)
    assert pairs.x0.min() >= -1 and pairs.x0.max() <= 1


def test_open_missing_dataset(tmp_path):
    with pytest.raises(FileNotFoundError):
        DatasetHandle.open(tmp_path / "nothing")


def test_unwritable_output(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError):
        generate_corpus(2, 32, 0, blocker / "sub")


def test_synth_range_and_mean():
    imgs = np.stack([synth_image(s, 32) for s in range(200)])
    assert imgs.min() >= -1 and imgs.max() <= 1
    assert abs(imgs.mean()) < 0.1


def test_degrade_constant_image_box():
    hr = np.full((3, 32, 32), 0.25, dtype=np.float32)
    lr = degrade(hr, DegradationSpec(blur_sigma=0.0, kernel="box", noise_sigma=0.0))
    assert lr.shape == (3, 8, 8)
    np.testing.assert_allclose(lr, 0.25, atol=1e-7)


def test_degrade_noise_moment():
    hr = np.zeros((3, 32, 32), dtype=np.float32)
    draws = np.stack([degrade(hr, DegradationSpec(blur_sigma=0, kernel="box", noise_sigma=0.05, seed=s))
                      for s in range(10_000)])
    std = draws.std(axis=0)
    assert np.all(np.abs(std - 0.05) < 0.05 * 0.05)


def test_degrade_indivisible():
    with pytest.raises(ValueError):
        degrade(np.zeros((3, 30, 32), dtype=np.float32), DegradationSpec())


def test_make_pair_contracts():
    const = torch.full((3, 32, 32), -0.4)
    pair = make_pair(const, DegradationSpec(blur_sigma=0, kernel="box", noise_sigma=0))
    assert pair.y0.shape == pair.x0.shape
    torch.testing.assert_close(pair.y0, pair.x0, rtol=0, atol=1e-6)
    assert pair.residual.abs().max() < 1e-6
    checker = torch.from_numpy(((np.indices((32, 32)).sum(0) % 2) * 2 - 1).astype(np.float32)).expand(3, 32, 32)
    pair = make_pair(checker.clone(), DegradationSpec(blur_sigma=0, kernel="box", noise_sigma=0))
    assert pair.residual.abs().sum() > 0


def test_png_roundtrip(tmp_path):
    img = synth_image(3, 32)
    write_png(tmp_path / "x.png", img)
    back = read_png(tmp_path / "x.png")
    assert back.shape == img.shape
    assert np.abs(back - img).max() <= 1 / 255 + 1e-6
    assert np.array_equal(to_uint8(from_uint8(to_uint8(img))), to_uint8(img))
