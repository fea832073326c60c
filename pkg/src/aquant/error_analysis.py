"""Element-wise rounding-error analysis, optimality checks, and oracles."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .exceptions import DegenerateWeightError, ShapeError
from .quantizer import (
    DEGENERATE_EPS,
    BorderFunction,
    QuantParams,
    analytic_border,
    evaluate_border,
)


def elementwise_error(w: float, dw: float, x: float, dx: float) -> float:
    """Error one (weight, activation) product contributes to a dot product.

    dw and dx are the quantization deltas of the weight and the activation.
    """
    return (w + dw) * dx + dw * x


@dataclass(frozen=True)
class ErrorRecord:
    """One element's contribution to a quantized dot product's error."""

    index: int
    w: float
    dw: float
    x: float
    dx: float
    error: float


def dot_product_error(w_hat, x_hat, w, x):
    """Total quantized dot-product error and its element-wise decomposition.

    Returns ``(total, records)`` where total = w_hat . x_hat - w . x and the
    records' errors sum back to the total.
    """
    w_hat = np.asarray(w_hat, dtype=np.float64)
    x_hat = np.asarray(x_hat, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if not (w_hat.shape == x_hat.shape == w.shape == x.shape) or w.ndim != 1:
        raise ShapeError("dot_product_error expects four equal-length vectors")
    total = float(np.dot(w_hat, x_hat) - np.dot(w, x))
    records = [
        ErrorRecord(i, float(w[i]), float(w_hat[i] - w[i]), float(x[i]),
                    float(x_hat[i] - x[i]),
                    elementwise_error(float(w[i]), float(w_hat[i] - w[i]),
                                      float(x[i]), float(x_hat[i] - x[i])))
        for i in range(len(w))
    ]
    return total, records


def expected_ew_error(w, dw, border, x_int, n_samples=100_000, seed=0, with_stderr=False):
    """Monte-Carlo expected element-wise error over one integer interval.

    The activation's fractional part is uniform on [0, 1); ``border`` (a
    callable on activation values, or a plain float) is frozen at its value
    at the interval midpoint x_int + 1/2, matching the constant integration
    bounds of the closed form.  Rounding is single-step: down when
    frac <= B, else up.
    """
    if n_samples < 100:
        raise ValueError(f"n_samples must be >= 100, got {n_samples}")
    mid = x_int + 0.5
    b = float(border(mid)) if callable(border) else float(border)
    if np.isnan(b):
        raise ValueError("border evaluated to NaN")
    rng = np.random.default_rng(seed)
    frac = rng.random(n_samples)
    x = x_int + frac
    dx = np.where(frac <= b, -frac, 1.0 - frac)
    err = (w + dw) * dx + dw * x
    mean = float(err.mean())
    if with_stderr:
        return mean, float(err.std(ddof=1) / np.sqrt(n_samples))
    return mean


def expected_ew_error_closed_form(w, dw, b, x_int) -> float:
    """Exact counterpart of expected_ew_error for a constant border b."""
    if b >= 1.0:
        e_dx = -0.5
    elif b <= 0.0:
        e_dx = 0.5
    else:
        e_dx = (1.0 - 2.0 * b) / 2.0
    return (w + dw) * e_dx + dw * (x_int + 0.5)


def analytic_border_vec(w: float, dw: float, x):
    """Vectorized zero-expected-error border over an activation grid."""
    denom = w + dw
    if abs(denom) <= DEGENERATE_EPS:
        raise DegenerateWeightError(f"|w + dw| = {abs(denom):.3e} <= {DEGENERATE_EPS:.0e}")
    return (dw / denom) * np.asarray(x, dtype=np.float64) + 0.5


@dataclass
class Theorem1Report:
    checked: int = 0
    skipped: int = 0
    violations: int = 0
    violating_x: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return self.violations == 0


def verify_theorem1(w, dw, x_grid, tie_eps: float = 1e-9) -> Theorem1Report:
    """Check that the analytic border picks the smaller-|error| direction.

    For every grid point x (ties |frac - B| < tie_eps excluded): if
    frac(x) < B(x) then rounding down must give strictly smaller squared
    element-wise error than rounding up, and vice versa.
    """
    x = np.asarray(x_grid, dtype=np.float64)
    frac = x - np.floor(x)
    b = analytic_border_vec(w, dw, x)
    e_down = (w + dw) * (-frac) + dw * x
    e_up = (w + dw) * (1.0 - frac) + dw * x
    tie = np.abs(frac - b) < tie_eps
    down_wins = e_down ** 2 < e_up ** 2
    up_wins = e_up ** 2 < e_down ** 2
    ok = np.where(frac < b, down_wins, up_wins)
    bad = ~ok & ~tie
    report = Theorem1Report(
        checked=int((~tie).sum()),
        skipped=int(tie.sum()),
        violations=int(bad.sum()),
    )
    if report.violations:
        report.violating_x = [float(v) for v in x[bad][:5]]
    return report


def propagated_border(w: float, dw: float, x_noisy: float, e: float,
                      eps: float = DEGENERATE_EPS) -> float:
    """Unbiased border for an activation x' carrying upstream error e.

    Returns the exact formula value; callers clamp to [0, 1] before rounding
    (values outside force an unconditional direction).
    """
    denom = w + dw
    if abs(denom) <= eps:
        raise DegenerateWeightError(f"|w + dw| = {abs(denom):.3e} <= {eps:.0e}")
    return (dw / denom) * x_noisy + (w / denom) * e + 0.5


def superior_pairs(w, w_hat, x_cols, params_a: QuantParams, bf: BorderFunction,
                   chunk: int = 4096):
    """Count (activation-position, weight-element) pairs the border improves.

    Activations are rounded once per hidden position and column (shared
    across output channels, both for ``bf`` and for the nearest baseline);
    errors are compared per weight element.  Strictly smaller |error| counts
    as superior; ties do not.
    Returns ``(n_superior, n_total)``.
    """
    w = np.asarray(w, dtype=np.float64)
    w_hat = np.asarray(w_hat, dtype=np.float64)
    x_cols = np.asarray(x_cols, dtype=np.float64)
    if w.ndim != 2 or w_hat.shape != w.shape:
        raise ShapeError("w and w_hat must be matching [o_c, hidden] matrices")
    if x_cols.ndim != 2 or x_cols.shape[0] != w.shape[1]:
        raise ShapeError(
            f"x_cols shape {x_cols.shape} does not match hidden dim {w.shape[1]}")
    if x_cols.shape[1] == 0:
        raise ShapeError("empty batch")
    dw = w_hat - w
    step = float(np.asarray(params_a.step))
    n_sup = 0
    n_tot = 0
    nearest = BorderFunction.constant(x_cols.shape[0], 0.5)
    for start in range(0, x_cols.shape[1], chunk):
        xs = x_cols[:, start:start + chunk]
        u = xs / step
        lvl_bf = np.clip(np.ceil(u - evaluate_border(bf, u)), params_a.q_min, params_a.q_max)
        lvl_nr = np.clip(np.ceil(u - evaluate_border(nearest, u)), params_a.q_min, params_a.q_max)
        dx_bf = step * lvl_bf - xs
        dx_nr = step * lvl_nr - xs
        # err[o, j, p] = w_hat[o, j] * dx[j, p] + dw[o, j] * x[j, p]
        e_bf = np.abs(w_hat[:, :, None] * dx_bf[None] + dw[:, :, None] * xs[None])
        e_nr = np.abs(w_hat[:, :, None] * dx_nr[None] + dw[:, :, None] * xs[None])
        n_sup += int((e_bf < e_nr).sum())
        n_tot += e_bf.size
    return n_sup, n_tot


def superior_ratio(w, w_hat, x_cols, params_a: QuantParams, bf: BorderFunction) -> float:
    """Fraction of pairs where ``bf`` beats nearest rounding; see superior_pairs."""
    n_sup, n_tot = superior_pairs(w, w_hat, x_cols, params_a, bf)
    return n_sup / n_tot


MAX_ORACLE_K = 20


def brute_force_rounding_oracle(w_row, x, params_a: QuantParams, w_hat_row=None,
                                chunk_bits: int = 16):
    """Exhaustively search up/down roundings of x minimizing |dot error|.

    Weights stay fixed at ``w_hat_row`` (defaults to w_row, i.e. exact
    weights).  Refuses vectors longer than 20 entries.  Returns
    ``(up_flags, min_abs_error)`` with the lexicographically-first optimum
    (all-down preferred on ties).
    """
    w_row = np.asarray(w_row, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if w_row.ndim != 1 or w_row.shape != x.shape:
        raise ShapeError("w_row and x must be equal-length vectors")
    k = len(x)
    if k == 0:
        raise ShapeError("empty vectors")
    if k > MAX_ORACLE_K:
        raise ValueError(f"refusing exhaustive search over 2^{k} assignments (max K={MAX_ORACLE_K})")
    w_hat = w_row if w_hat_row is None else np.asarray(w_hat_row, dtype=np.float64)
    if w_hat.shape != w_row.shape:
        raise ShapeError("w_hat_row must match w_row")
    step = float(np.asarray(params_a.step))
    lo = np.floor(x / step)
    down = step * np.clip(lo, params_a.q_min, params_a.q_max)
    up = step * np.clip(lo + 1, params_a.q_min, params_a.q_max)
    base = float(np.dot(w_hat, down) - np.dot(w_row, x))
    delta = w_hat * (up - down)

    best_abs = abs(base)
    best_idx = 0
    n = 1 << k
    span = 1 << min(chunk_bits, k)
    bit_cols = np.arange(k, dtype=np.uint64)
    for start in range(0, n, span):
        idx = np.arange(start, min(start + span, n), dtype=np.uint64)
        bits = (idx[:, None] >> bit_cols[None, :]) & 1
        errs = np.abs(base + bits @ delta)
        j = int(np.argmin(errs))
        if errs[j] < best_abs:
            best_abs = float(errs[j])
            best_idx = start + j
    flags = np.array([(best_idx >> i) & 1 for i in range(k)], dtype=bool)
    return flags, best_abs
