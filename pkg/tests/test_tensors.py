import numpy as np
import pytest

from aquant.exceptions import ShapeError
from aquant.tensors import (
    ConvGeometry,
    as_f64,
    col2img_batch,
    img2col,
    img2col_batch,
    matmul,
    reshape_filter,
)


def naive_img2col(img, k, stride, pad, h_o, w_o):
    """Reference lowering written independently of the library kernels."""
    c, h, w = img.shape
    padded = np.zeros((c, h + 2 * pad, w + 2 * pad))
    padded[:, pad:pad + h, pad:pad + w] = img
    cols = np.zeros((c * k * k, h_o * w_o))
    for r in range(h_o):
        for s in range(w_o):
            patch = padded[:, r * stride:r * stride + k, s * stride:s * stride + k]
            cols[:, r * w_o + s] = patch.ravel()
    return cols


def geom(c_in=3, c_out=4, k=3, stride=1, pad=1, h=6, w=6):
    return ConvGeometry(in_channels=c_in, out_channels=c_out, kernel=k,
                        stride=stride, padding=pad, h_in=h, w_in=w)


class TestConvGeometry:
    def test_output_shape_formula(self):
        g = geom(h=8, w=10, k=3, stride=2, pad=1)
        assert g.h_out == (8 + 2 - 3) // 2 + 1 == 4
        assert g.w_out == (10 + 2 - 3) // 2 + 1 == 5
        assert g.hidden == 3 * 9
        assert g.positions == 20

    def test_rejects_bad_fields(self):
        with pytest.raises(ShapeError):
            geom(k=0)
        with pytest.raises(ShapeError):
            geom(stride=0)
        with pytest.raises(ShapeError):
            ConvGeometry(in_channels=1, out_channels=1, kernel=5, stride=1,
                         padding=0, h_in=3, w_in=3)  # no valid output position


def test_reshape_filter_layout():
    # each filter entry tagged by (o, i, r, s) so the flattening order is visible
    f = np.zeros((2, 3, 2, 2))
    for o in range(2):
        for i in range(3):
            for r in range(2):
                for s in range(2):
                    f[o, i, r, s] = 1000 * o + 100 * i + 10 * r + s
    w2d = reshape_filter(f)
    assert w2d.shape == (2, 12)
    assert w2d[1, 0] == 1000.0
    assert w2d[0, 4 + 2] == 110.0  # i=1, r=1, s=0
    with pytest.raises(ShapeError):
        reshape_filter(np.zeros((2, 3, 2, 3)))


@pytest.mark.parametrize("k,stride,pad,h,w", [(3, 1, 1, 6, 6), (3, 2, 0, 7, 9),
                                              (1, 1, 0, 4, 4), (5, 1, 2, 8, 8)])
def test_img2col_matches_naive(k, stride, pad, h, w):
    rng = np.random.default_rng(42)
    g = ConvGeometry(in_channels=3, out_channels=2, kernel=k, stride=stride,
                     padding=pad, h_in=h, w_in=w)
    img = rng.normal(size=(3, h, w))
    got = img2col(img, g)
    want = naive_img2col(img, k, stride, pad, g.h_out, g.w_out)
    np.testing.assert_array_equal(got, want)


def test_img2col_batch_is_sample_major():
    rng = np.random.default_rng(7)
    g = geom()
    imgs = rng.normal(size=(4, 3, 6, 6))
    cols = img2col_batch(imgs, g)
    assert cols.shape == (g.hidden, 4 * g.positions)
    for n in range(4):
        block = cols[:, n * g.positions:(n + 1) * g.positions]
        np.testing.assert_array_equal(block, img2col(imgs[n], g))


def test_col2img_batch_is_adjoint_of_img2col_batch():
    # <img2col(x), y> == <x, col2img(y)> pins the scatter-add exactly
    rng = np.random.default_rng(3)
    g = geom(stride=2, pad=1, h=7, w=7)
    x = rng.normal(size=(2, 3, 7, 7))
    y = rng.normal(size=(g.hidden, 2 * g.positions))
    lhs = float(np.sum(img2col_batch(x, g) * y))
    rhs = float(np.sum(x * col2img_batch(y, g, 2)))
    assert abs(lhs - rhs) < 1e-9


def test_img2col_rejects_wrong_image_shape():
    g = geom()
    with pytest.raises(ShapeError):
        img2col(np.zeros((2, 6, 6)), g)  # channel mismatch
    with pytest.raises(ShapeError):
        img2col(np.zeros((3, 5, 6)), g)


def test_as_f64_contiguity_and_rank():
    x = np.arange(6, dtype=np.float32).reshape(2, 3)[:, ::-1]
    out = as_f64(x, "x", rank=2)
    assert out.dtype == np.float64 and out.flags["C_CONTIGUOUS"]
    with pytest.raises(ShapeError):
        as_f64(x, "x", rank=3)


def test_matmul_validates_shapes():
    with pytest.raises(ShapeError):
        matmul(np.zeros((2, 3)), np.zeros((4, 2)))
    out = matmul(np.ones((2, 3)), np.ones((3, 2)))
    np.testing.assert_array_equal(out, np.full((2, 2), 3.0))
