"""Dense float64 tensor plumbing: conv geometry, filter lowering, img2col.

All tensors are C-contiguous row-major float64 numpy arrays.  Convolution is
expressed as ``matmul(reshape_filter(F), img2col(X))`` so quantizers and
border functions only ever see flat matrices.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .exceptions import ShapeError
from .kernels import col2img_kernel, im2col_kernel


def as_f64(x, name: str = "tensor", rank: int | None = None) -> np.ndarray:
    """Coerce to a C-contiguous float64 array, checking rank if given."""
    arr = np.ascontiguousarray(x, dtype=np.float64)
    if rank is not None and arr.ndim != rank:
        raise ShapeError(f"{name}: expected rank {rank}, got shape {arr.shape}")
    return arr


@dataclass(frozen=True)
class ConvGeometry:
    """Spatial bookkeeping for one conv layer."""

    in_channels: int
    out_channels: int
    kernel: int
    stride: int
    padding: int
    h_in: int
    w_in: int
    h_out: int = field(init=False)
    w_out: int = field(init=False)

    def __post_init__(self):
        for label, value in (
            ("in_channels", self.in_channels),
            ("out_channels", self.out_channels),
            ("kernel", self.kernel),
            ("stride", self.stride),
            ("h_in", self.h_in),
            ("w_in", self.w_in),
        ):
            if int(value) < 1:
                raise ShapeError(f"ConvGeometry.{label} must be >= 1, got {value}")
        if self.padding < 0:
            raise ShapeError(f"ConvGeometry.padding must be >= 0, got {self.padding}")
        h_out = (self.h_in + 2 * self.padding - self.kernel) // self.stride + 1
        w_out = (self.w_in + 2 * self.padding - self.kernel) // self.stride + 1
        if h_out < 1 or w_out < 1:
            raise ShapeError(f"kernel {self.kernel} does not fit input {self.h_in}x{self.w_in} with padding {self.padding}")
        object.__setattr__(self, "h_out", h_out)
        object.__setattr__(self, "w_out", w_out)

    @property
    def hidden(self) -> int:
        """Row count of the lowered activation matrix (i_c * k * k)."""
        return self.in_channels * self.kernel * self.kernel

    @property
    def positions(self) -> int:
        return self.h_out * self.w_out


def reshape_filter(filters) -> np.ndarray:
    """Flatten [o_c, i_c, k, k] filters into an [o_c, i_c*k*k] matrix."""
    f = as_f64(filters, "filters", rank=4)
    o_c, i_c, kh, kw = f.shape
    if kh != kw:
        raise ShapeError(f"filters must be square, got kernel {kh}x{kw}")
    return f.reshape(o_c, i_c * kh * kw)


def img2col(image, geom: ConvGeometry) -> np.ndarray:
    """Lower one [i_c, h_in, w_in] image to [i_c*k*k, h_out*w_out] columns.

    Column j holds the flattened (channel, row, col) sliding block for output
    position j; out-of-range taps read as zero.
    """
    img = as_f64(image, "image", rank=3)
    expect = (geom.in_channels, geom.h_in, geom.w_in)
    if img.shape != expect:
        raise ShapeError(f"image shape {img.shape} does not match geometry {expect}")
    return im2col_kernel(img, geom.kernel, geom.stride, geom.padding, geom.h_out, geom.w_out)


def img2col_batch(images, geom: ConvGeometry) -> np.ndarray:
    """img2col per sample, columns concatenated sample-major."""
    imgs = as_f64(images, "images", rank=4)
    n = imgs.shape[0]
    p = geom.positions
    out = np.empty((geom.hidden, n * p), dtype=np.float64)
    for i in range(n):
        out[:, i * p:(i + 1) * p] = img2col(imgs[i], geom)
    return out


def col2img_batch(cols, geom: ConvGeometry, n: int) -> np.ndarray:
    """Adjoint of img2col_batch: scatter-add columns back to [n, i_c, h, w]."""
    c = as_f64(cols, "cols", rank=2)
    p = geom.positions
    if c.shape != (geom.hidden, n * p):
        raise ShapeError(f"cols shape {c.shape} does not match geometry ({geom.hidden}, {n * p})")
    out = np.empty((n, geom.in_channels, geom.h_in, geom.w_in), dtype=np.float64)
    for i in range(n):
        out[i] = col2img_kernel(
            np.ascontiguousarray(c[:, i * p:(i + 1) * p]),
            geom.kernel, geom.stride, geom.padding,
            geom.in_channels, geom.h_in, geom.w_in, geom.h_out, geom.w_out,
        )
    return out


def matmul(a, b) -> np.ndarray:
    """Plain 2-D matrix product with shape validation."""
    am = as_f64(a, "a", rank=2)
    bm = as_f64(b, "b", rank=2)
    if am.shape[1] != bm.shape[0]:
        raise ShapeError(f"matmul inner dims differ: {am.shape} @ {bm.shape}")
    return am @ bm
