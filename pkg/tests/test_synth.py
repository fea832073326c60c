import numpy as np
import pytest

from aquant.models import forward_fp
from aquant.synth import make_dataset, make_toy_model


def test_plain_variant_shape():
    model = make_toy_model(seed=0)
    model.validate()
    kinds = [l.kind for l in model.layers]
    assert kinds == ["conv", "relu", "conv", "relu", "fc"]
    assert model.input_shape == (3, 8, 8)


def test_residual_variant_has_an_add():
    model = make_toy_model(seed=0, variant="residual")
    model.validate()
    kinds = [l.kind for l in model.layers]
    assert "add" in kinds
    add = model.layers[kinds.index("add")]
    assert add.add_source is not None


def test_unknown_variant_rejected():
    with pytest.raises(ValueError):
        make_toy_model(seed=0, variant="transformer")


def test_same_seed_same_weights():
    a = make_toy_model(seed=3)
    b = make_toy_model(seed=3)
    for la, lb in zip(a.layers, b.layers):
        if la.weight is not None:
            np.testing.assert_array_equal(la.weight, lb.weight)


def test_different_seeds_differ():
    a = make_toy_model(seed=3)
    b = make_toy_model(seed=4)
    assert np.any(a.layers[0].weight != b.layers[0].weight)


def test_dataset_labels_come_from_the_model():
    model = make_toy_model(seed=5)
    x, y = make_dataset(model, 32, seed=5)
    final, _ = forward_fp(model, x)
    np.testing.assert_array_equal(y, np.argmax(final.reshape(32, -1), axis=1))
    assert y.dtype == np.int64


def test_dataset_seed_controls_inputs_not_model():
    model = make_toy_model(seed=5)
    x1, _ = make_dataset(model, 8, seed=1)
    x2, _ = make_dataset(model, 8, seed=2)
    x1b, _ = make_dataset(model, 8, seed=1)
    assert np.any(x1 != x2)
    np.testing.assert_array_equal(x1, x1b)


def test_custom_width_and_classes():
    model = make_toy_model(seed=0, width=4, classes=7)
    final, _ = forward_fp(model, np.zeros((2, 3, 8, 8)))
    assert final.shape == (2, 7)
