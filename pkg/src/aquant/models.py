"""Toy model container, full-precision and quantized forwards, overhead.

Quantization happens at each consuming layer's entry: a conv/fc layer lowers
its incoming (unquantized) stream to columns, rounds those columns with its
border function, multiplies with its quantized weights, and emits the raw
product.  ReLU and residual adds always operate on unquantized streams.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .error_analysis import superior_pairs
from .exceptions import ShapeError
from .kernels import round_border_kernel
from .quantizer import (
    DEGENERATE_EPS,
    BorderFunction,
    QuantParams,
    evaluate_border,
    quantize_weight_nearest,
)
from .tensors import ConvGeometry, as_f64, img2col_batch, matmul, reshape_filter

QUANT_KINDS = ("conv", "fc")


@dataclass
class LayerSpec:
    """One layer of a sequential toy network."""

    kind: str  # conv | fc | relu | add
    name: str
    geom: ConvGeometry | None = None
    weight: np.ndarray | None = None  # conv: [o_c, i_c, k, k]; fc: [out, in]
    bias: np.ndarray | None = None
    add_source: int | None = None  # layer index whose output is added; -1 = model input
    wq: QuantParams | None = None
    aq: QuantParams | None = None
    border: BorderFunction | None = None
    rounding: np.ndarray | None = None  # learned 0/1 round-up flags, [o_c, hidden]

    def __post_init__(self):
        if self.kind not in ("conv", "fc", "relu", "add"):
            raise ShapeError(f"unknown layer kind {self.kind!r}")
        if self.kind == "conv":
            if self.geom is None or self.weight is None:
                raise ShapeError("conv layers need geom and weight")
            expect = (self.geom.out_channels, self.geom.in_channels, self.geom.kernel, self.geom.kernel)
            if self.weight.shape != expect:
                raise ShapeError(f"conv weight shape {self.weight.shape}, expected {expect}")
        if self.kind == "fc" and (self.weight is None or self.weight.ndim != 2):
            raise ShapeError("fc layers need a 2-D weight")
        if self.kind == "add" and self.add_source is None:
            raise ShapeError("add layers need add_source")

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def hidden(self) -> int:
        """Inner dimension seen by the quantizer (i_c*k*k or in_features)."""
        if self.kind == "conv":
            return self.geom.hidden
        return self.weight.shape[1]

    def weight2d(self) -> np.ndarray:
        if self.kind == "conv":
            return reshape_filter(self.weight)
        return self.weight


@dataclass
class Model:
    """Ordered layers plus the block grouping used for calibration."""

    layers: list
    blocks: list
    input_shape: tuple
    meta: dict = field(default_factory=dict)

    def validate(self) -> None:
        owners = {}
        for b, idxs in enumerate(self.blocks):
            if list(idxs) != sorted(idxs):
                raise ShapeError(f"block {b} indices must be ascending")
            for i in idxs:
                if i in owners:
                    raise ShapeError(f"layer {i} appears in two blocks")
                owners[i] = b
        for i, layer in enumerate(self.layers):
            if layer.kind in QUANT_KINDS and i not in owners:
                raise ShapeError(f"quantizing layer {i} ({layer.name}) belongs to no block")
            if layer.kind == "add":
                src = layer.add_source
                if src >= i:
                    raise ShapeError(f"add layer {i} references a later layer {src}")
                block = self.blocks[owners[i]] if i in owners else None
                if block is None:
                    raise ShapeError(f"add layer {i} belongs to no block")
                block_input = min(block) - 1
                if src != block_input and src not in block:
                    raise ShapeError(
                        f"add layer {i}: source {src} is neither block-internal nor the block input")

    def quant_layers(self):
        return [i for i, l in enumerate(self.layers) if l.kind in QUANT_KINDS]

    def copy(self) -> "Model":
        return copy.deepcopy(self)


# ---------------------------------------------------------------------------
# quantized parameter views
# ---------------------------------------------------------------------------

def quantized_weight2d(layer: LayerSpec) -> np.ndarray:
    """Deployed weight matrix: learned rounding if present, else nearest."""
    if layer.wq is None:
        raise ShapeError(f"layer {layer.name} has no weight quantizer attached")
    w2d = layer.weight2d()
    step = layer.wq.step_column()
    if layer.rounding is None:
        return quantize_weight_nearest(w2d, layer.wq)
    level = np.clip(np.floor(w2d / step) + layer.rounding, layer.wq.q_min, layer.wq.q_max)
    return step * level


def quantized_bias(layer: LayerSpec) -> np.ndarray | None:
    """Bias rounded to its own symmetric grid at the weight bitwidth."""
    if layer.bias is None:
        return None
    if layer.wq is None:
        raise ShapeError(f"layer {layer.name} has no weight quantizer attached")
    peak = float(np.max(np.abs(layer.bias)))
    if peak == 0.0:
        return layer.bias.copy()
    q_max = 2 ** (layer.wq.bits - 1) - 1
    step = peak / q_max
    level = np.clip(np.ceil(layer.bias / step - 0.5), -q_max - 1, q_max)
    return step * level


# ---------------------------------------------------------------------------
# forwards
# ---------------------------------------------------------------------------

def _lower(layer: LayerSpec, stream: np.ndarray):
    """Lower an incoming stream to the layer's column matrix."""
    if layer.kind == "conv":
        return img2col_batch(stream, layer.geom)
    flat = stream.reshape(stream.shape[0], -1)
    if flat.shape[1] != layer.weight.shape[1]:
        raise ShapeError(
            f"{layer.name}: input with {flat.shape[1]} features, weight expects {layer.weight.shape[1]}")
    return np.ascontiguousarray(flat.T)


def _raise_cols(layer: LayerSpec, out_mat: np.ndarray, n: int) -> np.ndarray:
    """Reshape an [o_c, n*positions] product back to stream layout."""
    if layer.kind == "conv":
        g = layer.geom
        return np.ascontiguousarray(
            out_mat.reshape(g.out_channels, n, g.positions).transpose(1, 0, 2)
        ).reshape(n, g.out_channels, g.h_out, g.w_out)
    return np.ascontiguousarray(out_mat.T)


def _check_input(model: Model, batch: np.ndarray) -> np.ndarray:
    x = as_f64(batch, "batch")
    if x.ndim == len(model.input_shape):
        x = x[None]
    if tuple(x.shape[1:]) != tuple(model.input_shape):
        raise ShapeError(f"batch shape {x.shape[1:]} does not match model input {model.input_shape}")
    return x


def forward_fp(model: Model, batch):
    """Full-precision forward; returns (final, per-layer output streams)."""
    stream = _check_input(model, batch)
    n = stream.shape[0]
    outs = []
    for layer in model.layers:
        if layer.kind in QUANT_KINDS:
            cols = _lower(layer, stream)
            out = matmul(layer.weight2d(), cols)
            if layer.bias is not None:
                out = out + layer.bias[:, None]
            stream = _raise_cols(layer, out, n)
        elif layer.kind == "relu":
            stream = np.maximum(stream, 0.0)
        else:  # add
            src = outs[layer.add_source] if layer.add_source >= 0 else _check_input(model, batch)
            stream = stream + src
        outs.append(stream)
    return stream, outs


def quantize_entry_cols(layer: LayerSpec, cols: np.ndarray) -> np.ndarray:
    """Round one layer's incoming column matrix with its border function."""
    if layer.aq is None or layer.border is None:
        raise ShapeError(f"layer {layer.name} has no activation quantizer attached")
    step = float(np.asarray(layer.aq.step))
    u = cols / step
    border = evaluate_border(layer.border, u)
    level, _ = round_border_kernel(np.ascontiguousarray(u), np.ascontiguousarray(border),
                                   layer.aq.q_min, layer.aq.q_max)
    return step * level


def forward_quant(model: Model, batch):
    """Quantized forward; returns (final, per-layer pre-quantization outputs)."""
    stream = _check_input(model, batch)
    n = stream.shape[0]
    outs = []
    for layer in model.layers:
        if layer.kind in QUANT_KINDS:
            cols = quantize_entry_cols(layer, _lower(layer, stream))
            out = matmul(quantized_weight2d(layer), cols)
            bq = quantized_bias(layer)
            if bq is not None:
                out = out + bq[:, None]
            stream = _raise_cols(layer, out, n)
        elif layer.kind == "relu":
            stream = np.maximum(stream, 0.0)
        else:
            src = outs[layer.add_source] if layer.add_source >= 0 else _check_input(model, batch)
            stream = stream + src
        outs.append(stream)
    return stream, outs


def forward_unit_quant(model: Model, unit, stream_in: np.ndarray, collect=None):
    """Quantized forward across one contiguous unit of layer indices.

    ``collect``, when a dict, receives each in-unit layer's output stream;
    add sources must resolve inside the unit or to ``stream_in``.
    """
    stream = stream_in
    start = min(unit)
    produced = {}
    for i in unit:
        layer = model.layers[i]
        if layer.kind in QUANT_KINDS:
            cols = quantize_entry_cols(layer, _lower(layer, stream))
            out = matmul(quantized_weight2d(layer), cols)
            bq = quantized_bias(layer)
            if bq is not None:
                out = out + bq[:, None]
            stream = _raise_cols(layer, out, stream_in.shape[0])
        elif layer.kind == "relu":
            stream = np.maximum(stream, 0.0)
        else:
            src = produced[layer.add_source] if layer.add_source >= start else stream_in
            stream = stream + src
        produced[i] = stream
        if collect is not None:
            collect[i] = stream
    return stream


# ---------------------------------------------------------------------------
# quantizer attachment
# ---------------------------------------------------------------------------

def _border_for(layer: LayerSpec, variant: str, fusion: bool) -> BorderFunction:
    hidden = layer.hidden
    channel_size = layer.geom.kernel ** 2 if layer.kind == "conv" else 1
    use_fusion = fusion and layer.kind == "conv"
    if variant == "constant":
        return BorderFunction.constant(hidden)
    if variant == "element_linear":
        w2d = layer.weight2d()
        w_hat = quantize_weight_nearest(w2d, layer.wq)
        denom = w_hat
        slope = np.where(np.abs(denom) > DEGENERATE_EPS, (w_hat - w2d) / np.where(denom == 0, 1.0, denom), 0.0)
        return BorderFunction.element_linear(slope.mean(axis=0), np.full(hidden, 0.5))
    if variant == "coarse_linear":
        return BorderFunction.coarse_linear(hidden, fusion=use_fusion, channel_size=channel_size)
    if variant == "coarse_quadratic":
        return BorderFunction.coarse_quadratic(hidden, fusion=use_fusion, channel_size=channel_size)
    raise ValueError(f"unknown border variant {variant!r}")


def attach_quantizers(model: Model, calib_batch, bits_w: int, bits_a: int,
                      border_variant: str = "constant", fusion: bool = False,
                      first_last_bits: int = 8) -> Model:
    """Attach weight/activation quantizers and border functions in place.

    Steps are symmetric max-abs (per output channel for weights, per tensor
    for activations, measured at each layer's entry on the calibration
    batch).  The first and last quantizing layers run at ``first_last_bits``.
    Returns the model for chaining.
    """
    batch = _check_input(model, calib_batch)
    _, fp_outs = forward_fp(model, batch)
    qidx = model.quant_layers()
    if not qidx:
        raise ShapeError("model has no quantizing layers")
    for i in qidx:
        layer = model.layers[i]
        edge = i in (qidx[0], qidx[-1])
        bw = first_last_bits if edge else bits_w
        ba = first_last_bits if edge else bits_a
        w2d = layer.weight2d()
        w_qmax = 2 ** (bw - 1) - 1
        w_step = np.maximum(np.abs(w2d).max(axis=1), 1e-12) / w_qmax
        layer.wq = QuantParams.signed_symmetric(bw, w_step)
        entry = batch if i == 0 else fp_outs[i - 1]
        lo = float(entry.min())
        hi = float(np.abs(entry).max())
        hi = max(hi, 1e-12)
        if lo < 0:
            layer.aq = QuantParams.signed_symmetric(ba, hi / (2 ** (ba - 1) - 1))
        else:
            layer.aq = QuantParams.unsigned(ba, hi / (2 ** ba - 1))
        layer.border = _border_for(layer, border_variant, fusion)
        layer.rounding = None
    model.meta["attach"] = {
        "bits_w": bits_w, "bits_a": bits_a, "border": border_variant,
        "fusion": bool(fusion), "first_last_bits": first_last_bits,
        "steps_w": {str(i): [float(s) for s in np.atleast_1d(model.layers[i].wq.step)] for i in qidx},
        "steps_a": {str(i): float(np.asarray(model.layers[i].aq.step)) for i in qidx},
        "signed_a": {str(i): bool(model.layers[i].aq.signed) for i in qidx},
    }
    return model


def derive_nearest_baseline(model: Model) -> Model:
    """Rebuild the pre-calibration nearest-rounding model from stored meta."""
    attach = model.meta.get("attach")
    if attach is None:
        raise ShapeError("model carries no attach metadata; cannot derive baseline")
    base = model.copy()
    qidx = base.quant_layers()
    for i in qidx:
        layer = base.layers[i]
        edge = i in (qidx[0], qidx[-1])
        bw = attach["first_last_bits"] if edge else attach["bits_w"]
        ba = attach["first_last_bits"] if edge else attach["bits_a"]
        layer.wq = QuantParams.signed_symmetric(bw, np.array(attach["steps_w"][str(i)]))
        step_a = attach["steps_a"][str(i)]
        if attach["signed_a"][str(i)]:
            layer.aq = QuantParams.signed_symmetric(ba, step_a)
        else:
            layer.aq = QuantParams.unsigned(ba, step_a)
        layer.border = BorderFunction.constant(layer.hidden)
        layer.rounding = None
    return base


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def evaluate_model(model: Model, baseline: Model, eval_batch, labels=None,
                   ratio_chunk: int = 2048, ratios: bool = True):
    """Per-layer and end-to-end error report of ``model`` vs ``baseline``.

    Both models must share full-precision weights; all MSEs are against the
    full-precision forward on ``eval_batch``.  ``ratios=False`` skips the
    pairwise superiority count, which dominates the cost on wide layers.
    """
    batch = _check_input(model, eval_batch)
    _, fp_outs = forward_fp(model, batch)
    final_q, q_outs = forward_quant(model, batch)
    final_b, b_outs = forward_quant(baseline, batch)
    layers = []
    stream = batch
    for i in model.quant_layers():
        layer = model.layers[i]
        row = {
            "layer_id": layer.name,
            "mse_quant": float(np.mean((q_outs[i] - fp_outs[i]) ** 2)),
            "mse_baseline": float(np.mean((b_outs[i] - fp_outs[i]) ** 2)),
        }
        if ratios:
            entry_q = stream if i == 0 else q_outs[i - 1]
            cols = _lower(layer, entry_q)
            n_sup, n_tot = superior_pairs(layer.weight2d(), quantized_weight2d(layer),
                                          cols, layer.aq, layer.border, chunk=ratio_chunk)
            row["superior_ratio"] = n_sup / n_tot
            row["n_positions"] = n_tot
        layers.append(row)
    fp_final = fp_outs[-1]
    report = {
        "layers": layers,
        "e2e_mse": float(np.mean((final_q - fp_final) ** 2)),
        "e2e_mse_baseline": float(np.mean((final_b - fp_final) ** 2)),
    }
    if labels is not None:
        pred = np.argmax(final_q.reshape(batch.shape[0], -1), axis=1)
        report["accuracy"] = float(np.mean(pred == np.asarray(labels).astype(np.int64)))
    return report


# ---------------------------------------------------------------------------
# overhead accounting
# ---------------------------------------------------------------------------

_VARIANT_COEFFS = {"constant": 0, "element_linear": 2, "coarse_linear": 2, "coarse_quadratic": 3}


@dataclass(frozen=True)
class OverheadRow:
    name: str
    kind: str
    out_channels: int
    hidden: int
    weight_params: int
    border_params: int
    param_ratio: Fraction
    size_ratio: Fraction
    ops_ratio: Fraction


def overhead_report(model: Model, variant: str, bits_border: int = 12,
                    bits_w: int | None = None):
    """Exact storage/compute overhead of a border variant, per layer and total.

    Ratios are Fractions: border parameters over weight parameters, border
    bits over weight bits, and border-evaluation multiplies (Horner form)
    over matmul multiplies, each amortized across output channels.
    """
    if variant not in _VARIANT_COEFFS:
        raise ValueError(f"unknown border variant {variant!r}")
    n_coeff = _VARIANT_COEFFS[variant]
    order = max(0, n_coeff - 1)
    rows = []
    for i in model.quant_layers():
        layer = model.layers[i]
        o_c = layer.out_channels
        hidden = layer.hidden
        weight_params = o_c * hidden
        border_params = n_coeff * hidden
        lbits = bits_w if bits_w is not None else (layer.wq.bits if layer.wq else None)
        if lbits is None:
            raise ValueError(f"layer {layer.name}: weight bits unknown; pass bits_w")
        rows.append(OverheadRow(
            name=layer.name, kind=layer.kind, out_channels=o_c, hidden=hidden,
            weight_params=weight_params, border_params=border_params,
            param_ratio=Fraction(border_params, weight_params),
            size_ratio=Fraction(border_params * bits_border, weight_params * lbits),
            ops_ratio=Fraction(order, o_c),
        ))
    total_w = sum(r.weight_params for r in rows)
    total_b = sum(r.border_params for r in rows)
    total_wbits = sum(r.weight_params * (bits_w if bits_w is not None else model.layers[i].wq.bits)
                      for r, i in zip(rows, model.quant_layers()))
    totals = {
        "weight_params": total_w,
        "border_params": total_b,
        "param_ratio": Fraction(total_b, total_w) if total_w else Fraction(0),
        "size_ratio": Fraction(total_b * bits_border, total_wbits) if total_w else Fraction(0),
    }
    return rows, totals
