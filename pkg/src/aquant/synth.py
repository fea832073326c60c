"""Seeded toy networks and synthetic calibration/evaluation data.

Everything is deterministic in the seed so experiments and reports can be
reproduced bit for bit.
"""

from __future__ import annotations

import numpy as np

from .models import LayerSpec, Model, forward_fp
from .tensors import ConvGeometry


def _conv(rng, name, c_in, c_out, h, w, kernel=3):
    geom = ConvGeometry(in_channels=c_in, out_channels=c_out, kernel=kernel,
                        stride=1, padding=kernel // 2, h_in=h, w_in=w)
    fan_in = c_in * kernel * kernel
    weight = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(c_out, c_in, kernel, kernel))
    bias = rng.uniform(-0.1, 0.1, size=c_out)
    return LayerSpec("conv", name, geom=geom, weight=weight, bias=bias)


def _fc(rng, name, f_in, f_out):
    weight = rng.normal(0.0, np.sqrt(2.0 / f_in), size=(f_out, f_in))
    bias = rng.uniform(-0.1, 0.1, size=f_out)
    return LayerSpec("fc", name, weight=weight, bias=bias)


def make_toy_model(seed: int = 0, variant: str = "plain",
                   in_shape=(3, 8, 8), width: int = 8, classes: int = 10) -> Model:
    """Small conv net for calibration experiments.

    ``plain``: conv-relu, conv-relu, fc (three blocks).
    ``residual``: adds a third conv block whose output is summed with its
    block input before the ReLU.
    """
    c, h, w = in_shape
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x6d0de1]))
    feat = width * h * w
    if variant == "plain":
        layers = [
            _conv(rng, "conv1", c, width, h, w),
            LayerSpec("relu", "relu1"),
            _conv(rng, "conv2", width, width, h, w),
            LayerSpec("relu", "relu2"),
            _fc(rng, "fc", feat, classes),
        ]
        blocks = [[0, 1], [2, 3], [4]]
    elif variant == "residual":
        layers = [
            _conv(rng, "conv1", c, width, h, w),
            LayerSpec("relu", "relu1"),
            _conv(rng, "conv2", width, width, h, w),
            LayerSpec("relu", "relu2"),
            _conv(rng, "conv3", width, width, h, w),
            LayerSpec("add", "skip3", add_source=3),
            LayerSpec("relu", "relu3"),
            _fc(rng, "fc", feat, classes),
        ]
        blocks = [[0, 1], [2, 3], [4, 5, 6], [7]]
    else:
        raise ValueError(f"unknown model variant {variant!r}")
    model = Model(layers=layers, blocks=blocks, input_shape=(c, h, w),
                  meta={"seed": int(seed), "variant": variant})
    model.validate()
    return model


def make_dataset(model: Model, n_samples: int, seed: int = 0):
    """Standard-normal inputs plus labels from the full-precision net.

    Labels are the argmax of the model's own output, so quantized accuracy
    against them directly measures fidelity to the full-precision function.
    """
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xda7a]))
    x = rng.normal(0.0, 1.0, size=(n_samples, *model.input_shape))
    final, _ = forward_fp(model, x)
    labels = np.argmax(final.reshape(n_samples, -1), axis=1).astype(np.int64)
    return x, labels
