"""Directory containers: a JSON manifest plus one little-endian blob per array.

The same convention stores fp32 models, quantized models and datasets::

    model/
      manifest.json
      enc0_conv1.kernel.bin
      ...
"""

from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path

import numpy as np

from .errors import ExtentMismatchError, ManifestError, TruncatedBlobError
from .graph import LayerSpec, ModelGraph

FORMAT_VERSION = 1
MANIFEST = "manifest.json"

_DTYPES = {"f32": "<f4", "i8": "<i1", "i32": "<i4", "u8": "u1"}


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def dump_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def blob_name(array_id: str) -> str:
    return array_id.replace("/", ".") + ".bin"


def write_blob(directory, array_id: str, arr: np.ndarray, dtype: str) -> dict:
    data = np.ascontiguousarray(arr, dtype=_DTYPES[dtype]).tobytes()
    name = blob_name(array_id)
    atomic_write_bytes(Path(directory) / name, data)
    return {"id": array_id, "shape": list(arr.shape), "dtype": dtype, "blob_file": name, "byte_len": len(data)}


def read_blob(directory, entry: dict) -> np.ndarray:
    try:
        shape = tuple(int(v) for v in entry["shape"])
        dtype = np.dtype(_DTYPES[entry["dtype"]])
        name = entry["blob_file"]
        byte_len = int(entry["byte_len"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ManifestError(f"malformed blob entry {entry!r}: {exc}") from exc
    if int(np.prod(shape)) * dtype.itemsize != byte_len:
        raise ExtentMismatchError(
            f"{entry.get('id', name)}: shape {shape} needs {int(np.prod(shape)) * dtype.itemsize} bytes, manifest says {byte_len}"
        )
    path = Path(directory) / name
    if not path.is_file():
        raise TruncatedBlobError(f"blob {name} is missing")
    data = path.read_bytes()
    if len(data) != byte_len:
        raise TruncatedBlobError(f"blob {name} has {len(data)} bytes, manifest says {byte_len}")
    return np.frombuffer(data, dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))


def read_manifest(directory, kind: str) -> dict:
    path = Path(directory) / MANIFEST
    try:
        manifest = json.loads(path.read_text())
    except FileNotFoundError as exc:
        raise ManifestError(f"no manifest at {path}") from exc
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ManifestError(f"manifest {path} is not valid JSON: {exc}") from exc
    if not isinstance(manifest, dict) or manifest.get("version") != FORMAT_VERSION or manifest.get("kind") != kind:
        raise ManifestError(f"{path} is not a version {FORMAT_VERSION} {kind} manifest")
    return manifest


def save_model(model: ModelGraph, path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries = []
    for ps in model.param_sets():
        entry = write_blob(path, ps.id, model.params[ps.id], "f32")
        entry["kind"] = ps.kind.value
        entries.append(entry)
    manifest = {
        "version": FORMAT_VERSION,
        "kind": "model",
        "input_shape": list(model.input_shape),
        "classes": model.classes,
        "meta": model.meta,
        "layers": [layer.to_dict() for layer in model.layers],
        "param_sets": entries,
    }
    atomic_write_text(path / MANIFEST, dump_json(manifest))
    return path


def load_model(path) -> ModelGraph:
    path = Path(path)
    manifest = read_manifest(path, "model")
    try:
        layers = tuple(LayerSpec.from_dict(d) for d in manifest["layers"])
        entries = manifest["param_sets"]
        input_shape = tuple(manifest["input_shape"])
        classes = int(manifest["classes"])
        meta = dict(manifest.get("meta", {}))
    except (KeyError, TypeError, ValueError) as exc:
        raise ManifestError(f"malformed model manifest: {exc}") from exc
    params = {}
    for entry in entries:
        if entry.get("dtype") != "f32":
            raise ManifestError(f"parameter set {entry.get('id')!r} is not f32")
        params[entry["id"]] = read_blob(path, entry)
    return ModelGraph(layers, params, input_shape, classes, meta)
