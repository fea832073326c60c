"""Uniform quantizers and rounding-border functions.

Rounding follows ``x_hat = step * clip(ceil(x/step - B), q_min, q_max)``: a
fractional part strictly below the border B rounds down, strictly above
rounds up, and an exact tie rounds down (ceiling of an exact integer).
Borders are evaluated on activations already scaled by the step size.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Literal

import numpy as np

from .exceptions import DegenerateWeightError, ShapeError
from .kernels import round_border_kernel

DEGENERATE_EPS = 1e-9
BOUND_SCALE = 2.5
BORDER_INIT_RAW = float(np.log(0.25))  # bound_scale * sigmoid -> 0.5

Variant = Literal["constant", "element_linear", "coarse_linear", "coarse_quadratic"]


def sigmoid(t):
    """Numerically stable logistic function."""
    t = np.asarray(t, dtype=np.float64)
    out = np.empty_like(t)
    pos = t >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-t[pos]))
    e = np.exp(t[~pos])
    out[~pos] = e / (1.0 + e)
    return out if out.ndim else float(out)


@dataclass(frozen=True)
class QuantParams:
    """Uniform grid description; step may be per-output-channel."""

    bits: int
    step: float | np.ndarray
    q_min: int
    q_max: int
    signed: bool

    def __post_init__(self):
        if self.bits < 2:
            raise ValueError(f"bits must be >= 2, got {self.bits}")
        if self.q_max - self.q_min != 2 ** self.bits - 1:
            raise ValueError(
                f"clip range [{self.q_min}, {self.q_max}] does not span 2^{self.bits} levels")
        step = np.asarray(self.step, dtype=np.float64)
        if not np.all(np.isfinite(step)) or np.any(step <= 0):
            raise ValueError("step must be positive and finite")

    @classmethod
    def signed_symmetric(cls, bits: int, step) -> "QuantParams":
        return cls(bits, step, -(2 ** (bits - 1)), 2 ** (bits - 1) - 1, True)

    @classmethod
    def unsigned(cls, bits: int, step) -> "QuantParams":
        return cls(bits, step, 0, 2 ** bits - 1, False)

    def with_step(self, step) -> "QuantParams":
        return replace(self, step=step)

    def step_column(self) -> np.ndarray:
        """Step broadcastable against an [o_c, hidden] weight matrix."""
        s = np.asarray(self.step, dtype=np.float64)
        return s.reshape(-1, 1) if s.ndim == 1 else s


def _check_finite(x, name):
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{name} must be finite")


def quantize_with_border(x, params: QuantParams, border):
    """Quantize to the grid using rounding border(s) ``border``.

    ``border`` may be a scalar or an array broadcastable to x/step.
    Returns dequantized float64 values of x's shape (scalars stay scalar).
    """
    arr = np.asarray(x, dtype=np.float64)
    _check_finite(arr, "x")
    b = np.asarray(border, dtype=np.float64)
    if np.any(np.isnan(b)):
        raise ValueError("border must not be NaN")
    step = np.asarray(params.step, dtype=np.float64)
    u = arr / step
    bb = np.broadcast_to(b, u.shape) if b.shape != u.shape else b
    level, _ = round_border_kernel(np.ascontiguousarray(np.atleast_1d(u)),
                                   np.ascontiguousarray(np.atleast_1d(bb)),
                                   params.q_min, params.q_max)
    out = step * level.reshape(u.shape)
    return float(out) if arr.ndim == 0 else out


def quantize_weight_nearest(w, params: QuantParams):
    """Round-to-nearest weight quantization (border fixed at 0.5).

    Per-channel steps apply along the leading axis of a 2-D weight matrix.
    """
    arr = np.asarray(w, dtype=np.float64)
    _check_finite(arr, "w")
    step = np.asarray(params.step, dtype=np.float64)
    if step.ndim == 1:
        if arr.ndim != 2 or arr.shape[0] != step.shape[0]:
            raise ShapeError(
                f"per-channel step of length {step.shape[0]} does not match weights {arr.shape}")
        step = step[:, None]
    u = arr / step
    level = np.clip(np.ceil(u - 0.5), params.q_min, params.q_max)
    out = step * level
    return float(out) if arr.ndim == 0 else out


def analytic_border(w: float, dw: float, x: float, eps: float = DEGENERATE_EPS) -> float:
    """Per-element unbiased border: (dw / (w + dw)) * x + 1/2.

    The returned value is not clamped; callers that feed it to the rounding
    formula may clamp to [0, 1].  Raises DegenerateWeightError when the
    quantized weight w + dw is smaller than ``eps`` in magnitude.
    """
    denom = w + dw
    if abs(denom) <= eps:
        raise DegenerateWeightError(f"|w + dw| = {abs(denom):.3e} <= {eps:.0e}")
    return (dw / denom) * x + 0.5


@dataclass
class BorderFunction:
    """Polynomial rounding border shared across output channels.

    Coefficient arrays carry one entry per hidden-dim position (i_c * k * k
    for conv layers).  ``bounded`` maps the raw polynomial through
    ``bound_scale * sigmoid``; the element_linear variant instead clamps the
    raw value to [0, 1] before rounding.  With ``fusion`` the emitted borders
    are averaged within each consecutive group of ``channel_size`` positions.
    """

    variant: Variant
    b0: np.ndarray
    b1: np.ndarray
    b2: np.ndarray | None = None
    bounded: bool = False
    bound_scale: float = BOUND_SCALE
    fusion: bool = False
    channel_size: int = 1

    def __post_init__(self):
        self.b0 = np.asarray(self.b0, dtype=np.float64).copy()
        self.b1 = np.asarray(self.b1, dtype=np.float64).copy()
        if self.b0.ndim != 1 or self.b1.shape != self.b0.shape:
            raise ShapeError("b0 and b1 must be 1-D arrays of equal length")
        if self.variant == "coarse_quadratic":
            if self.b2 is None:
                raise ShapeError("coarse_quadratic requires b2 coefficients")
            self.b2 = np.asarray(self.b2, dtype=np.float64).copy()
            if self.b2.shape != self.b0.shape:
                raise ShapeError("b2 must match b0's length")
        elif self.b2 is not None:
            raise ShapeError(f"b2 is only valid for coarse_quadratic, not {self.variant}")
        if self.variant == "constant" and np.any(self.b1 != 0):
            raise ShapeError("constant borders must have zero slope")
        if self.channel_size < 1:
            raise ShapeError("channel_size must be >= 1")
        if self.fusion and len(self.b0) % self.channel_size != 0:
            raise ShapeError(
                f"hidden size {len(self.b0)} is not divisible by channel_size {self.channel_size}")

    def __len__(self) -> int:
        return len(self.b0)

    def copy(self) -> "BorderFunction":
        return BorderFunction(
            self.variant, self.b0, self.b1, b2=self.b2, bounded=self.bounded,
            bound_scale=self.bound_scale, fusion=self.fusion,
            channel_size=self.channel_size)

    @classmethod
    def constant(cls, hidden: int, value: float = 0.5) -> "BorderFunction":
        return cls("constant", np.full(hidden, value), np.zeros(hidden))

    @classmethod
    def element_linear(cls, b1, b0) -> "BorderFunction":
        return cls("element_linear", b0, b1)

    @classmethod
    def coarse_linear(cls, hidden: int, fusion: bool = False, channel_size: int = 1) -> "BorderFunction":
        return cls("coarse_linear", np.full(hidden, BORDER_INIT_RAW), np.zeros(hidden),
                   bounded=True, fusion=fusion, channel_size=channel_size)

    @classmethod
    def coarse_quadratic(cls, hidden: int, fusion: bool = False, channel_size: int = 1) -> "BorderFunction":
        return cls("coarse_quadratic", np.full(hidden, BORDER_INIT_RAW), np.zeros(hidden),
                   b2=np.zeros(hidden), bounded=True, fusion=fusion, channel_size=channel_size)

    def raw(self, x_scaled: np.ndarray) -> np.ndarray:
        """Polynomial value before bounding/clamping/fusion."""
        b0, b1 = self.b0, self.b1
        if x_scaled.ndim == 2:
            b0, b1 = b0[:, None], b1[:, None]
        if self.variant == "constant":
            return np.broadcast_to(b0, x_scaled.shape).copy()
        if self.variant == "coarse_quadratic":
            b2 = self.b2[:, None] if x_scaled.ndim == 2 else self.b2
            return (b2 * x_scaled + b1) * x_scaled + b0
        return b1 * x_scaled + b0


def fuse_borders(values: np.ndarray, channel_size: int) -> np.ndarray:
    """Average values within consecutive hidden-axis groups, broadcast back."""
    if channel_size == 1:
        return values
    hidden = values.shape[0]
    groups = hidden // channel_size
    shaped = values.reshape(groups, channel_size, *values.shape[1:])
    return np.broadcast_to(shaped.mean(axis=1, keepdims=True), shaped.shape).reshape(values.shape)


def evaluate_border(bf: BorderFunction, x_scaled) -> np.ndarray:
    """Emit border values for step-scaled activations.

    ``x_scaled`` is [hidden] or [hidden, positions]; the result has the same
    shape.  See BorderFunction for the bounding/clamping/fusion pipeline.
    """
    x = np.asarray(x_scaled, dtype=np.float64)
    if x.ndim not in (1, 2):
        raise ShapeError(f"x_scaled must be 1-D or 2-D, got shape {x.shape}")
    if x.shape[0] != len(bf):
        raise ShapeError(f"x_scaled has {x.shape[0]} rows, border function expects {len(bf)}")
    if bf.variant == "constant":
        out = bf.raw(x)
    else:
        raw = bf.raw(x)
        if bf.bounded:
            out = bf.bound_scale * sigmoid(raw)
        elif bf.variant == "element_linear":
            out = np.clip(raw, 0.0, 1.0)
        else:
            out = raw
    if bf.fusion:
        out = fuse_borders(out, bf.channel_size)
    return out


def quantize_activation_vector(x, params: QuantParams, bf: BorderFunction):
    """Scale, evaluate the border per entry, and round one activation vector.

    One border per entry: every output channel consuming the vector sees the
    same rounded value.
    """
    arr = np.asarray(x, dtype=np.float64)
    _check_finite(arr, "x")
    u = arr / params.step
    border = evaluate_border(bf, u)
    return quantize_with_border(arr, params, border)


def quantize_border_coeffs(bf: BorderFunction, bits: int = 12) -> BorderFunction:
    """Snap border coefficients to a symmetric fixed-point grid.

    Used when shipping calibrated borders; 64-bit floats remain the in-memory
    representation.
    """
    if bits < 2:
        raise ValueError(f"bits must be >= 2, got {bits}")
    q_max = 2 ** (bits - 1) - 1

    def snap(arr):
        peak = np.max(np.abs(arr))
        if peak == 0:
            return arr.copy()
        step = peak / q_max
        return step * np.clip(np.ceil(arr / step - 0.5), -q_max - 1, q_max)

    out = BorderFunction(
        bf.variant, snap(bf.b0), snap(bf.b1),
        b2=None if bf.b2 is None else snap(bf.b2),
        bounded=bf.bounded, bound_scale=bf.bound_scale,
        fusion=bf.fusion, channel_size=bf.channel_size,
    )
    return out
