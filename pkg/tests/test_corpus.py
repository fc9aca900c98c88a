import json

import numpy as np
import pytest
from PIL import Image

from naturalize.corpus import load_corpus, normalize, read_image, save_corpus, synth_corpus, to_pixels


def _horizontal_diff_variance(images):
    luma = 0.299 * images[:, 0] + 0.587 * images[:, 1] + 0.114 * images[:, 2]
    d = np.diff(np.floor(luma + 0.5), axis=2)
    return d.reshape(len(images), -1).var(axis=1).mean()


def test_same_seed_same_corpus():
    a = synth_corpus("cg", 5, 32, seed=9)
    b = synth_corpus("cg", 5, 32, seed=9)
    c = synth_corpus("cg", 5, 32, seed=10)
    assert a.digest() == b.digest()
    assert a.digest() != c.digest()


def test_natural_has_larger_difference_variance():
    nat = synth_corpus("natural", 100, 64, seed=0).images.astype(np.float64)
    cg = synth_corpus("cg", 100, 64, seed=0).images.astype(np.float64)
    assert _horizontal_diff_variance(nat) > _horizontal_diff_variance(cg)


def test_synth_contract():
    c = synth_corpus("natural", 3, 16, seed=1)
    assert c.images.shape == (3, 3, 16, 16) and c.images.dtype == np.uint8
    assert c.labels == ["natural"] * 3
    with pytest.raises(ValueError):
        synth_corpus("cg", 0)
    with pytest.raises(ValueError):
        synth_corpus("photo", 1)


def test_save_load_round_trip(tmp_path):
    c = synth_corpus("cg", 4, 32, seed=2)
    save_corpus(c, tmp_path)
    back = load_corpus(tmp_path)
    assert np.array_equal(back.images, c.images)
    assert back.ids == c.ids and back.labels == c.labels


def test_ppm_round_trip(tmp_path):
    img = np.random.default_rng(0).integers(0, 256, (3, 12, 12), dtype=np.uint8)
    Image.fromarray(img.transpose(1, 2, 0)).save(tmp_path / "a.ppm")
    assert np.array_equal(read_image(tmp_path / "a.ppm"), img)


def test_pgm_grayscale_replicated(tmp_path):
    g = np.random.default_rng(1).integers(0, 256, (10, 10), dtype=np.uint8)
    Image.fromarray(g).save(tmp_path / "g.pgm")
    img = read_image(tmp_path / "g.pgm")
    assert img.shape == (3, 10, 10)
    assert np.array_equal(img[0], g) and np.array_equal(img[1], g) and np.array_equal(img[2], g)


def test_resize_on_load(tmp_path):
    Image.fromarray(np.zeros((20, 30, 3), np.uint8)).save(tmp_path / "r.png")
    assert read_image(tmp_path / "r.png", 16).shape == (3, 16, 16)


def test_unreadable_files_skipped(tmp_path, caplog):
    c = synth_corpus("natural", 3, 16, seed=3)
    save_corpus(c, tmp_path)
    (tmp_path / f"{c.ids[1]}.png").write_bytes(b"not a png")
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    back = load_corpus(tmp_path)
    assert len(back) + len(back.skipped) == len(manifest)
    assert back.skipped == [f"{c.ids[1]}.png"]
    assert "skipping" in caplog.text


def test_normalize_and_clamp_table():
    assert normalize(np.array([0, 255], np.uint8)).tolist() == [-1.0, 1.0]
    raw = np.array([-2.5, -1.8, 0.0, 1.0, 1.8, 2.5])
    assert to_pixels(raw).tolist() == [0, 0, 128, 255, 255, 255]


def test_to_pixels_always_valid():
    raw = np.random.default_rng(4).standard_normal(1000) * 5
    px = to_pixels(raw)
    assert px.dtype == np.uint8
    again = to_pixels(normalize(px))
    assert again.dtype == np.uint8
    assert np.array_equal(again, px)
