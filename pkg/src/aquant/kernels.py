"""Hot numeric kernels with a numba fast path and a pure-numpy fallback.

The backend is picked once at import time: numba is used when it imports
cleanly and the environment variable ``AQUANT_NUMBA`` is not set to
``0``/``false``/``no``/``off``.  ``AQUANT_THREADS`` caps the numba thread
pool.  Both backends are kept in lockstep by tests and by
``benchmarks/bench_kernels.py``.
"""

from __future__ import annotations

import os

import numpy as np

_FALSEY = {"0", "false", "no", "off"}


def _env_wants_numba() -> bool:
    return os.environ.get("AQUANT_NUMBA", "1").strip().lower() not in _FALSEY


HAS_NUMBA = False
if _env_wants_numba():
    try:
        import numba
        from numba import njit

        HAS_NUMBA = True
    except ImportError:
        HAS_NUMBA = False

if HAS_NUMBA:
    threads = os.environ.get("AQUANT_THREADS")
    if threads:
        try:
            numba.set_num_threads(max(1, int(threads)))
        except (ValueError, RuntimeError):
            pass


def backend_name() -> str:
    return "numba" if HAS_NUMBA else "numpy"


# ---------------------------------------------------------------------------
# pure-numpy reference implementations
# ---------------------------------------------------------------------------

def _im2col_np(img, k, stride, pad, h_o, w_o, out):
    c_n, h_i, w_i = img.shape
    padded = np.zeros((c_n, h_i + 2 * pad, w_i + 2 * pad), dtype=np.float64)
    padded[:, pad:pad + h_i, pad:pad + w_i] = img
    out3 = out.reshape(c_n, k * k, h_o * w_o)
    for kr in range(k):
        for kc in range(k):
            block = padded[:, kr:kr + stride * h_o:stride, kc:kc + stride * w_o:stride]
            out3[:, kr * k + kc, :] = block.reshape(c_n, h_o * w_o)
    return out


def _col2img_np(cols, k, stride, pad, c_n, h_i, w_i, h_o, w_o, grad):
    padded = np.zeros((c_n, h_i + 2 * pad, w_i + 2 * pad), dtype=np.float64)
    cols3 = cols.reshape(c_n, k * k, h_o, w_o)
    for kr in range(k):
        for kc in range(k):
            padded[:, kr:kr + stride * h_o:stride, kc:kc + stride * w_o:stride] += cols3[:, kr * k + kc]
    grad += padded[:, pad:pad + h_i, pad:pad + w_i]
    return grad


def _round_border_np(u, border, qmin, qmax, q, inside):
    level = np.ceil(u - border)
    np.greater_equal(level, qmin, out=inside)
    inside &= level <= qmax
    np.clip(level, qmin, qmax, out=q)
    return q, inside


# ---------------------------------------------------------------------------
# numba twins
# ---------------------------------------------------------------------------

if HAS_NUMBA:

    @njit(cache=True)
    def _im2col_nb(img, k, stride, pad, h_o, w_o, out):  # pragma: no cover - numba
        c_n, h_i, w_i = img.shape
        for c in range(c_n):
            for kr in range(k):
                for kc in range(k):
                    row = c * k * k + kr * k + kc
                    for oy in range(h_o):
                        iy = oy * stride - pad + kr
                        for ox in range(w_o):
                            ix = ox * stride - pad + kc
                            col = oy * w_o + ox
                            if 0 <= iy < h_i and 0 <= ix < w_i:
                                out[row, col] = img[c, iy, ix]
                            else:
                                out[row, col] = 0.0
        return out

    @njit(cache=True)
    def _col2img_nb(cols, k, stride, pad, c_n, h_i, w_i, h_o, w_o, grad):  # pragma: no cover - numba
        for c in range(c_n):
            for kr in range(k):
                for kc in range(k):
                    row = c * k * k + kr * k + kc
                    for oy in range(h_o):
                        iy = oy * stride - pad + kr
                        if iy < 0 or iy >= h_i:
                            continue
                        for ox in range(w_o):
                            ix = ox * stride - pad + kc
                            if ix < 0 or ix >= w_i:
                                continue
                            grad[c, iy, ix] += cols[row, oy * w_o + ox]
        return grad

    @njit(cache=True)
    def _round_border_nb(u, border, qmin, qmax, q, inside):  # pragma: no cover - numba
        n = u.size
        uf = u.ravel()
        bf = border.ravel()
        qf = q.ravel()
        mf = inside.ravel()
        for i in range(n):
            level = np.ceil(uf[i] - bf[i])
            mf[i] = qmin <= level <= qmax
            if level < qmin:
                level = qmin
            elif level > qmax:
                level = qmax
            qf[i] = level
        return q, inside


# ---------------------------------------------------------------------------
# dispatching wrappers
# ---------------------------------------------------------------------------

def im2col_kernel(img, k, stride, pad, h_o, w_o):
    """Lower one [c, h, w] image to a [c*k*k, h_o*w_o] column matrix."""
    out = np.empty((img.shape[0] * k * k, h_o * w_o), dtype=np.float64)
    if HAS_NUMBA:
        return _im2col_nb(img, k, stride, pad, h_o, w_o, out)
    return _im2col_np(img, k, stride, pad, h_o, w_o, out)


def col2img_kernel(cols, k, stride, pad, c_n, h_i, w_i, h_o, w_o):
    """Scatter-add a column-matrix gradient back to image layout."""
    grad = np.zeros((c_n, h_i, w_i), dtype=np.float64)
    if HAS_NUMBA:
        return _col2img_nb(cols, k, stride, pad, c_n, h_i, w_i, h_o, w_o, grad)
    return _col2img_np(cols, k, stride, pad, c_n, h_i, w_i, h_o, w_o, grad)


def round_border_kernel(u, border, qmin, qmax):
    """Ceiling-round ``u - border`` to integer levels with saturation.

    Returns (levels, inside) where ``inside`` flags entries whose pre-clip
    level landed within [qmin, qmax].
    """
    q = np.empty_like(u)
    inside = np.empty(u.shape, dtype=np.bool_)
    if HAS_NUMBA:
        return _round_border_nb(u, border, float(qmin), float(qmax), q, inside)
    return _round_border_np(u, border, float(qmin), float(qmax), q, inside)
