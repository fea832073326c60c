"""On-disk format: a JSON manifest plus raw little-endian float64 blobs.

Every array lives in ``blobs/<field-name>`` where the field name spells out
its place in the model (``layers.2.weight``).  The manifest records shapes,
byte counts, and sha256 digests; loading verifies all three.  Serialization
is deterministic: sorted keys, no timestamps.
"""

from __future__ import annotations

import csv
import hashlib
import json
from pathlib import Path

import numpy as np

from .exceptions import (
    ChecksumError,
    FormatVersionError,
    StorageError,
    TruncatedBlobError,
)
from .models import LayerSpec, Model
from .quantizer import BorderFunction, QuantParams
from .tensors import ConvGeometry

FORMAT_VERSION = 1


def stable_hash(obj) -> str:
    """sha256 of an object's canonical JSON form."""
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()


def write_json(path, obj) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        json.dump(obj, f, sort_keys=True, indent=2, default=str)
        f.write("\n")


def read_json(path):
    with open(path) as f:
        return json.load(f)


def write_csv(path, rows, header_comment: str | None = None) -> None:
    """Write dict rows; a ``# key=value`` comment line may precede the header."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        if header_comment:
            f.write(f"# {header_comment}\n")
        if not rows:
            return
        writer = csv.DictWriter(f, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)


class _BlobStore:
    def __init__(self, root: Path):
        self.root = Path(root)
        self.index: dict[str, dict] = {}

    def put(self, name: str, arr: np.ndarray) -> str:
        data = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        digest = hashlib.sha256(data).hexdigest()
        blob_dir = self.root / "blobs"
        blob_dir.mkdir(parents=True, exist_ok=True)
        (blob_dir / name).write_bytes(data)
        self.index[name] = {
            "shape": list(np.asarray(arr).shape),
            "nbytes": len(data),
            "sha256": digest,
        }
        return name

    @staticmethod
    def get(root: Path, index: dict, name: str) -> np.ndarray:
        if name not in index:
            raise StorageError(f"manifest lists no blob named {name!r}")
        meta = index[name]
        path = Path(root) / "blobs" / name
        if not path.exists():
            raise TruncatedBlobError(f"blob file missing: {path}")
        data = path.read_bytes()
        if len(data) != meta["nbytes"]:
            raise TruncatedBlobError(
                f"blob {name}: expected {meta['nbytes']} bytes, found {len(data)}")
        digest = hashlib.sha256(data).hexdigest()
        if digest != meta["sha256"]:
            raise ChecksumError(f"blob {name}: sha256 mismatch")
        return np.frombuffer(data, dtype="<f8").reshape(meta["shape"]).astype(np.float64)


def _params_manifest(params: QuantParams | None, store: _BlobStore, field: str):
    if params is None:
        return None
    step = np.asarray(params.step)
    entry = {"bits": params.bits, "q_min": params.q_min, "q_max": params.q_max,
             "signed": params.signed}
    if step.ndim == 0:
        entry["step"] = float(step)
    else:
        entry["step"] = {"blob": store.put(f"{field}.step", step)}
    return entry


def _params_load(entry, root, index) -> QuantParams | None:
    if entry is None:
        return None
    step = entry["step"]
    if isinstance(step, dict):
        step = _BlobStore.get(root, index, step["blob"])
    return QuantParams(entry["bits"], step, entry["q_min"], entry["q_max"], entry["signed"])


def _border_manifest(bf: BorderFunction | None, store: _BlobStore, field: str):
    if bf is None:
        return None
    entry = {"variant": bf.variant, "bounded": bf.bounded,
             "bound_scale": bf.bound_scale, "fusion": bf.fusion,
             "channel_size": bf.channel_size,
             "b0": {"blob": store.put(f"{field}.b0", bf.b0)},
             "b1": {"blob": store.put(f"{field}.b1", bf.b1)}}
    if bf.b2 is not None:
        entry["b2"] = {"blob": store.put(f"{field}.b2", bf.b2)}
    return entry


def _border_load(entry, root, index) -> BorderFunction | None:
    if entry is None:
        return None
    return BorderFunction(
        entry["variant"],
        _BlobStore.get(root, index, entry["b0"]["blob"]),
        _BlobStore.get(root, index, entry["b1"]["blob"]),
        b2=_BlobStore.get(root, index, entry["b2"]["blob"]) if "b2" in entry else None,
        bounded=entry["bounded"], bound_scale=entry["bound_scale"],
        fusion=entry["fusion"], channel_size=entry["channel_size"])


def save_model(path, model: Model) -> None:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    store = _BlobStore(root)
    layers = []
    for i, layer in enumerate(model.layers):
        field = f"layers.{i}"
        entry = {"kind": layer.kind, "name": layer.name, "add_source": layer.add_source}
        if layer.geom is not None:
            g = layer.geom
            entry["geom"] = {"in_channels": g.in_channels, "out_channels": g.out_channels,
                             "kernel": g.kernel, "stride": g.stride, "padding": g.padding,
                             "h_in": g.h_in, "w_in": g.w_in}
        if layer.weight is not None:
            entry["weight"] = {"blob": store.put(f"{field}.weight", layer.weight)}
        if layer.bias is not None:
            entry["bias"] = {"blob": store.put(f"{field}.bias", layer.bias)}
        if layer.rounding is not None:
            entry["rounding"] = {"blob": store.put(f"{field}.rounding", layer.rounding)}
        entry["wq"] = _params_manifest(layer.wq, store, f"{field}.wq")
        entry["aq"] = _params_manifest(layer.aq, store, f"{field}.aq")
        entry["border"] = _border_manifest(layer.border, store, f"{field}.border")
        layers.append(entry)
    manifest = {
        "format_version": FORMAT_VERSION,
        "kind": "model",
        "input_shape": list(model.input_shape),
        "blocks": [list(b) for b in model.blocks],
        "meta": model.meta,
        "layers": layers,
        "blobs": store.index,
    }
    write_json(root / "manifest.json", manifest)


def _read_manifest(path, kind: str):
    root = Path(path)
    mpath = root / "manifest.json"
    if not mpath.exists():
        raise StorageError(f"no manifest.json under {root}")
    manifest = read_json(mpath)
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise FormatVersionError(
            f"manifest format_version {version!r}, this build reads {FORMAT_VERSION}")
    if manifest.get("kind") != kind:
        raise StorageError(f"expected a {kind!r} manifest, found {manifest.get('kind')!r}")
    return manifest


def load_model(path) -> Model:
    root = Path(path)
    manifest = _read_manifest(root, "model")
    index = manifest["blobs"]
    layers = []
    for entry in manifest["layers"]:
        geom = None
        if "geom" in entry:
            geom = ConvGeometry(**entry["geom"])
        layer = LayerSpec(
            kind=entry["kind"], name=entry["name"], geom=geom,
            weight=_BlobStore.get(root, index, entry["weight"]["blob"]) if "weight" in entry else None,
            bias=_BlobStore.get(root, index, entry["bias"]["blob"]) if "bias" in entry else None,
            add_source=entry.get("add_source"),
        )
        layer.rounding = _BlobStore.get(root, index, entry["rounding"]["blob"]) if "rounding" in entry else None
        layer.wq = _params_load(entry.get("wq"), root, index)
        layer.aq = _params_load(entry.get("aq"), root, index)
        layer.border = _border_load(entry.get("border"), root, index)
        layers.append(layer)
    model = Model(layers=layers, blocks=[list(b) for b in manifest["blocks"]],
                  input_shape=tuple(manifest["input_shape"]), meta=manifest["meta"])
    model.validate()
    return model


def save_dataset(path, x, labels=None) -> None:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    store = _BlobStore(root)
    store.put("data", np.asarray(x, dtype=np.float64))
    manifest = {
        "format_version": FORMAT_VERSION,
        "kind": "dataset",
        "n_samples": int(np.asarray(x).shape[0]),
    }
    if labels is not None:
        store.put("labels", np.asarray(labels, dtype=np.float64))
    manifest["blobs"] = store.index
    write_json(root / "manifest.json", manifest)


def load_dataset(path):
    root = Path(path)
    manifest = _read_manifest(root, "dataset")
    index = manifest["blobs"]
    x = _BlobStore.get(root, index, "data")
    labels = None
    if "labels" in index:
        labels = _BlobStore.get(root, index, "labels").astype(np.int64)
    return x, labels


def save_checkpoint(path, model: Model, unit_idx: int, n_units: int) -> None:
    """Persist calibration progress after a unit finishes."""
    root = Path(path)
    save_model(root / f"unit_{unit_idx:02d}", model)
    write_json(root / "progress.json", {"completed_unit": unit_idx, "n_units": n_units})
