import json

import numpy as np
import pytest
from conftest import desk_model, tiny_model

from seubench.errors import ExtentMismatchError, ManifestError, TruncatedBlobError
from seubench.faults import f32_bits
from seubench.graph import param_id
from seubench.modelio import MANIFEST, load_model, save_model


def _dir_bytes(path):
    return {p.name: p.read_bytes() for p in sorted(path.iterdir())}


def test_round_trip_bit_exact_with_special_values(tmp_path):
    model = tiny_model()
    k = np.array(model.params[param_id("c1", "kernel")])
    flat = k.reshape(-1)
    specials = np.array([0x7FC00001, 0xFFA00000, 0x7F800000, 0xFF800000, 0x80000000, 0x00000001], np.uint32)
    flat[: specials.size] = specials.view(np.float32)
    model = model.replace({param_id("c1", "kernel"): k})
    save_model(model, tmp_path / "m")
    back = load_model(tmp_path / "m")
    for ps in model.param_sets():
        assert np.array_equal(model.params[ps.id].view(np.uint32), back.params[ps.id].view(np.uint32))
    got = back.params[param_id("c1", "kernel")].reshape(-1)
    assert [f32_bits(v) for v in got[:6]] == specials.tolist()
    assert back.fingerprint() == model.fingerprint()


def test_save_load_save_identical_bytes(tmp_path):
    model = desk_model(levels=1, base=2, shape=(4, 4, 2), classes=2)
    save_model(model, tmp_path / "a")
    save_model(load_model(tmp_path / "a"), tmp_path / "b")
    assert _dir_bytes(tmp_path / "a") == _dir_bytes(tmp_path / "b")


def test_manifest_lists_documented_keys(tmp_path):
    save_model(tiny_model(), tmp_path / "m")
    doc = json.loads((tmp_path / "m" / MANIFEST).read_text())
    assert {"version", "layers", "param_sets"} <= set(doc)
    entry = doc["param_sets"][0]
    assert {"id", "kind", "shape", "blob_file", "byte_len"} <= set(entry)


def _edit_manifest(path, fn):
    doc = json.loads((path / MANIFEST).read_text())
    fn(doc)
    (path / MANIFEST).write_text(json.dumps(doc))


def test_distinct_format_errors(tmp_path):
    path = save_model(tiny_model(), tmp_path / "m")
    (path / MANIFEST).write_text("{not json")
    with pytest.raises(ManifestError):
        load_model(path)

    path = save_model(tiny_model(), tmp_path / "n")
    _edit_manifest(path, lambda d: d["param_sets"][0].update(byte_len=8))
    with pytest.raises(ExtentMismatchError):
        load_model(path)

    path = save_model(tiny_model(), tmp_path / "o")
    blob = path / json.loads((path / MANIFEST).read_text())["param_sets"][0]["blob_file"]
    blob.write_bytes(blob.read_bytes()[:-4])
    with pytest.raises(TruncatedBlobError):
        load_model(path)

    path = save_model(tiny_model(), tmp_path / "p")
    _edit_manifest(path, lambda d: d["param_sets"][0].pop("shape"))
    with pytest.raises(ManifestError):
        load_model(path)

    with pytest.raises(ManifestError):
        load_model(tmp_path / "missing")


def test_no_temp_files_left(tmp_path):
    path = save_model(tiny_model(), tmp_path / "m")
    assert not [p for p in path.iterdir() if p.name.endswith(".tmp")]
