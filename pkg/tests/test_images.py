import numpy as np
import pytest

from solofield.images import (
    bilinear_resize,
    encode_normal_map,
    load_image,
    load_mask,
    mask_iou,
    psnr,
    save_png,
)


def test_png_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    img = rng.random((12, 10, 3))
    save_png(tmp_path / "x.png", img)
    back = load_image(tmp_path / "x.png")
    assert back.shape == (12, 10, 3)
    assert np.max(np.abs(back - img)) <= 1.0 / 255.0 / 2 + 1e-9


def test_mask_roundtrip_threshold(tmp_path):
    mask = np.zeros((8, 8))
    mask[2:6, 3:7] = 1.0
    save_png(tmp_path / "m.png", mask)
    back = load_mask(tmp_path / "m.png")
    assert np.array_equal(back, mask)


def test_encode_normal_map():
    n = np.array([[[1.0, -1.0, 0.0]]])
    enc = encode_normal_map(n)
    assert np.allclose(enc, [[[1.0, 0.0, 0.5]]])


def test_bilinear_resize_identity_and_constant():
    rng = np.random.default_rng(1)
    img = rng.random((9, 7, 3))
    assert np.array_equal(bilinear_resize(img, 9, 7), img)
    const = np.full((6, 6), 0.3)
    up = bilinear_resize(const, 12, 12)
    assert np.allclose(up, 0.3)
    down = bilinear_resize(img, 3, 3)
    assert down.shape == (3, 3, 3)
    assert down.min() >= img.min() - 1e-12 and down.max() <= img.max() + 1e-12


def test_psnr_and_iou():
    a = np.zeros((4, 4, 3))
    assert psnr(a, a) == float("inf")
    b = a + 0.1
    assert abs(psnr(a, b) - 20.0) < 1e-9
    m1 = np.zeros((4, 4))
    m1[:2] = 1.0
    m2 = np.zeros((4, 4))
    m2[:3] = 1.0
    assert np.isclose(mask_iou(m1, m2), 8 / 12)
    assert mask_iou(np.zeros((4, 4)), np.zeros((4, 4))) == 1.0
