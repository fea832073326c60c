import json

import numpy as np
import pytest

from aquant.exceptions import (
    ChecksumError,
    FormatVersionError,
    StorageError,
    TruncatedBlobError,
)
from aquant.models import attach_quantizers, forward_quant
from aquant.storage import (
    load_dataset,
    load_model,
    read_json,
    save_checkpoint,
    save_dataset,
    save_model,
    stable_hash,
    write_csv,
    write_json,
)
from aquant.synth import make_dataset, make_toy_model
from aquant.calibration import Schedule, calibrate


def calibrated_model(seed=0):
    model = make_toy_model(seed=seed, variant="residual")
    calib, _ = make_dataset(model, 32, seed=seed)
    attach_quantizers(model, calib, bits_w=2, bits_a=4,
                      border_variant="coarse_quadratic", fusion=True)
    calibrate(model, calib, schedule=Schedule(total_iters=5, batch_size=8),
              seed=seed)
    return model, calib


def test_stable_hash_is_order_insensitive():
    assert stable_hash({"a": 1, "b": [2, 3]}) == stable_hash({"b": [2, 3], "a": 1})
    assert stable_hash({"a": 1}) != stable_hash({"a": 2})


def test_write_json_round_trip(tmp_path):
    payload = {"z": 1, "a": {"nested": [1.5, None]}}
    write_json(tmp_path / "x.json", payload)
    assert read_json(tmp_path / "x.json") == payload
    text = (tmp_path / "x.json").read_text()
    assert text.endswith("\n")
    assert text.index('"a"') < text.index('"z"')


def test_write_csv_with_comment(tmp_path):
    rows = [{"x": 1, "y": "a"}, {"x": 2, "y": "b"}]
    write_csv(tmp_path / "t.csv", rows, header_comment="seed=7")
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert lines[0] == "# seed=7"
    assert lines[1] == "x,y"
    assert lines[2] == "1,a"


class TestModelRoundTrip:
    def test_forward_is_bit_identical(self, tmp_path):
        model, calib = calibrated_model()
        save_model(tmp_path / "m", model)
        loaded = load_model(tmp_path / "m")
        want, _ = forward_quant(model, calib)
        got, _ = forward_quant(loaded, calib)
        np.testing.assert_array_equal(got, want)

    def test_attach_metadata_survives(self, tmp_path):
        model, _ = calibrated_model()
        save_model(tmp_path / "m", model)
        loaded = load_model(tmp_path / "m")
        assert loaded.meta["attach"]["bits_w"] == 2
        assert loaded.meta["attach"]["border"] == "coarse_quadratic"

    def test_save_twice_is_byte_identical(self, tmp_path):
        model, _ = calibrated_model()
        save_model(tmp_path / "a", model)
        save_model(tmp_path / "b", model)
        ma = (tmp_path / "a" / "manifest.json").read_bytes()
        mb = (tmp_path / "b" / "manifest.json").read_bytes()
        assert ma == mb
        blobs_a = sorted(p.name for p in (tmp_path / "a" / "blobs").iterdir())
        blobs_b = sorted(p.name for p in (tmp_path / "b" / "blobs").iterdir())
        assert blobs_a == blobs_b
        for name in blobs_a:
            assert ((tmp_path / "a" / "blobs" / name).read_bytes()
                    == (tmp_path / "b" / "blobs" / name).read_bytes())

    def test_missing_manifest_raises(self, tmp_path):
        with pytest.raises(StorageError):
            load_model(tmp_path / "nothing")

    def test_future_format_version_rejected(self, tmp_path):
        model, _ = calibrated_model()
        save_model(tmp_path / "m", model)
        mpath = tmp_path / "m" / "manifest.json"
        manifest = json.loads(mpath.read_text())
        manifest["format_version"] = 99
        mpath.write_text(json.dumps(manifest))
        with pytest.raises(FormatVersionError):
            load_model(tmp_path / "m")

    def test_truncated_blob_detected(self, tmp_path):
        model, _ = calibrated_model()
        save_model(tmp_path / "m", model)
        blob = next((tmp_path / "m" / "blobs").iterdir())
        blob.write_bytes(blob.read_bytes()[:-8])
        with pytest.raises(TruncatedBlobError):
            load_model(tmp_path / "m")

    def test_corrupted_blob_detected(self, tmp_path):
        model, _ = calibrated_model()
        save_model(tmp_path / "m", model)
        blob = next((tmp_path / "m" / "blobs").iterdir())
        raw = bytearray(blob.read_bytes())
        raw[4] ^= 0xFF
        blob.write_bytes(bytes(raw))
        with pytest.raises(ChecksumError):
            load_model(tmp_path / "m")

    def test_dataset_manifest_is_not_a_model(self, tmp_path):
        x = np.zeros((4, 3, 8, 8))
        save_dataset(tmp_path / "d", x)
        with pytest.raises(StorageError):
            load_model(tmp_path / "d")


class TestDatasetRoundTrip:
    def test_with_labels(self, tmp_path):
        model = make_toy_model(seed=1)
        x, y = make_dataset(model, 16, seed=1)
        save_dataset(tmp_path / "d", x, labels=y)
        x2, y2 = load_dataset(tmp_path / "d")
        np.testing.assert_array_equal(x2, x)
        np.testing.assert_array_equal(y2, y)
        assert y2.dtype == np.int64

    def test_without_labels(self, tmp_path):
        x = np.random.default_rng(0).normal(size=(4, 16))
        save_dataset(tmp_path / "d", x)
        x2, y2 = load_dataset(tmp_path / "d")
        np.testing.assert_array_equal(x2, x)
        assert y2 is None


def test_checkpoint_layout(tmp_path):
    model, _ = calibrated_model()
    save_checkpoint(tmp_path / "ck", model, unit_idx=1, n_units=4)
    progress = read_json(tmp_path / "ck" / "progress.json")
    assert progress["completed_unit"] == 1
    assert progress["n_units"] == 4
    loaded = load_model(tmp_path / "ck" / "unit_01")
    assert len(loaded.layers) == len(model.layers)
