"""Per-tensor post-training quantization and integer-only inference.

Real values are represented as ``r = S * (q - Z)``. Weights are quantized
symmetrically to int8 (``Z = 0``), biases to int32 with the scale fixed to
``S_w * S_x`` of their layer, and activations asymmetrically to int8 from
calibrated ranges. A layer computing ``Y = W x + b`` then runs entirely in
integers::

    acc = sum(q_w * q_x) - Z_x * sum(q_w) + q_b
    q_y = Z_y + round((S_w * S_x / S_y) * acc)

with the accumulator saturated to int32 and ``q_y`` clamped to int8.
Bounded activations (and ReLU) are applied through 256-entry lookup tables.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, NamedTuple

import numpy as np

from . import tensor as T
from .errors import BuildError, ContractError, ManifestError
from .graph import CONV_KINDS, INPUT, LayerKind, LayerSpec, ModelGraph, ParameterSet, ParamKind, param_id, run_layers
from .modelio import FORMAT_VERSION, MANIFEST, atomic_write_text, dump_json, read_blob, read_manifest, write_blob

EPS = 1e-6
INT_RANGES = {8: (-128, 127), 32: (-(2**31), 2**31 - 1)}
_INT_DTYPES = {8: np.int8, 32: np.int32}


@dataclass(frozen=True, eq=False)
class QuantizedTensor:
    q: np.ndarray
    scale: float
    zero_point: int
    width: int

    def __post_init__(self):
        if not self.scale > 0:
            raise ContractError(f"scale must be positive, got {self.scale}")
        if self.width not in INT_RANGES:
            raise ContractError(f"width must be 8 or 32, got {self.width}")
        q = np.asarray(self.q)
        if q.dtype != _INT_DTYPES[self.width]:
            raise ContractError(f"payload dtype {q.dtype} does not match width {self.width}")
        view = q.view()
        view.flags.writeable = False
        object.__setattr__(self, "q", view)
        object.__setattr__(self, "scale", float(self.scale))
        object.__setattr__(self, "zero_point", int(self.zero_point))

    @property
    def shape(self) -> tuple[int, ...]:
        return self.q.shape

    def dequantize(self) -> np.ndarray:
        return dequantize(self)


def round_half_even(x) -> np.ndarray:
    return np.rint(x)


def scale_zero_point(lo: float, hi: float, width: int = 8, symmetric: bool = False) -> tuple[float, int]:
    """Scale and zero-point covering ``[lo, hi]``.

    Symmetric: ``S = max|r| / 127`` (``2**31 - 1`` for int32) and ``Z = 0``.
    Asymmetric int8: the range is first extended to contain 0 so that real
    zero is exactly representable, then ``S = (hi - lo) / 255`` and
    ``Z = round(-lo / S) - 128``. Degenerate ranges are widened by ``EPS``.
    """
    lo, hi = float(lo), float(hi)
    if not (np.isfinite(lo) and np.isfinite(hi)) or hi < lo:
        raise ContractError(f"invalid range [{lo}, {hi}]")
    qmin, qmax = INT_RANGES[width]
    if symmetric:
        m = max(abs(lo), abs(hi), EPS)
        return m / qmax, 0
    if width != 8:
        raise ContractError("asymmetric quantization is only used for int8 activations")
    lo, hi = min(lo, 0.0), max(hi, 0.0)
    if hi - lo < EPS:
        hi = lo + EPS
    s = (hi - lo) / (qmax - qmin)
    z = int(round_half_even(-lo / s)) + qmin
    return s, int(np.clip(z, qmin, qmax))


def quantize_with(t, scale: float, zero_point: int, width: int) -> QuantizedTensor:
    qmin, qmax = INT_RANGES[width]
    r = np.asarray(t, dtype=np.float64)
    q = np.clip(round_half_even(r / scale) + zero_point, qmin, qmax)
    return QuantizedTensor(q.astype(_INT_DTYPES[width]), scale, zero_point, width)


def quantize_tensor(t, width: int = 8, symmetric: bool = True, value_range=None) -> QuantizedTensor:
    """``q = clamp(round(r / S) + Z)``; the range defaults to the tensor's own min/max."""
    r = np.asarray(t, dtype=np.float64)
    if value_range is None:
        value_range = (float(r.min()), float(r.max())) if r.size else (0.0, 0.0)
    s, z = scale_zero_point(*value_range, width=width, symmetric=symmetric)
    return quantize_with(r, s, z, width)


def dequantize(qt: QuantizedTensor) -> np.ndarray:
    """``S * (q - Z)`` evaluated in fp64."""
    return qt.scale * (qt.q.astype(np.float64) - qt.zero_point)


def calibrate(model: ModelGraph, images) -> dict[str, tuple[float, float]]:
    """Running min/max of every layer output (and the input) over ``images``."""
    images = list(images)
    if not images:
        raise ContractError("calibration needs at least one image")
    ranges: dict[str, tuple[float, float]] = {}
    for image in images:
        for key, act in run_layers(model, image).items():
            lo, hi = float(np.min(act)), float(np.max(act))
            if key in ranges:
                lo, hi = min(lo, ranges[key][0]), max(hi, ranges[key][1])
            ranges[key] = (lo, hi)
    return {k: (lo, hi if hi > lo else lo + EPS) for k, (lo, hi) in ranges.items()}


def activation_table(kind, s_in: float, z_in: int, s_out: float, z_out: int) -> np.ndarray:
    """Map every int8 input code through an activation function."""
    q = np.arange(-128, 128, dtype=np.float64)
    real = (s_in * (q - z_in)).astype(np.float32)
    out = T.apply_activation(real, kind).astype(np.float64)
    return quantize_with(out, s_out, z_out, 8).q.copy()


class QuantResult(NamedTuple):
    classes: np.ndarray
    activations: dict
    saturated: bool


@dataclass(frozen=True, eq=False)
class QuantModel:
    """BN-folded layer list with int8 weights, int32 biases and activation (S, Z)."""

    layers: tuple[LayerSpec, ...]
    weights: Mapping[str, QuantizedTensor]
    act_params: Mapping[str, tuple[float, int]]
    input_shape: tuple[int, int, int]
    classes: int
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        sets = []
        for layer in self.layers:
            if layer.kind is LayerKind.BATCHNORM:
                raise BuildError("quantized models must be BN-folded")
            for kind in layer.param_kinds():
                pid = param_id(layer.id, kind)
                if pid not in self.weights:
                    raise BuildError(f"missing quantized parameter set {pid!r}")
                qt = self.weights[pid]
                sets.append(ParameterSet(pid, layer.id, kind, qt.shape, "i8" if qt.width == 8 else "i32"))
        object.__setattr__(self, "_sets", tuple(sets))
        tables = {}
        for layer in self.layers:
            if layer.kind is LayerKind.ACTIVATION:
                s_in, z_in = self.act_params[layer.inputs[0]]
                s_out, z_out = self.act_params[layer.id]
                tables[layer.id] = activation_table(layer.attrs["activation"], s_in, z_in, s_out, z_out)
        object.__setattr__(self, "tables", tables)
        object.__setattr__(self, "_index", {layer.id: i for i, layer in enumerate(self.layers)})

    @property
    def output_id(self) -> str:
        return self.layers[-1].id

    @property
    def params(self) -> dict[str, np.ndarray]:
        return {pid: qt.q for pid, qt in self.weights.items()}

    def param_sets(self) -> tuple[ParameterSet, ...]:
        return self._sets

    def layer_index(self, layer_id: str) -> int:
        return self._index[layer_id]

    def fingerprint(self) -> str:
        head = {
            "layers": [layer.to_dict() for layer in self.layers],
            "input_shape": list(self.input_shape),
            "classes": self.classes,
            "meta": self.meta,
            "act_params": {k: [float(s), int(z)] for k, (s, z) in sorted(self.act_params.items())},
            "scales": {ps.id: [self.weights[ps.id].scale, self.weights[ps.id].zero_point] for ps in self._sets},
        }
        h = hashlib.sha256(json.dumps(head, sort_keys=True).encode())
        for ps in self._sets:
            h.update(ps.id.encode())
            h.update(np.ascontiguousarray(self.weights[ps.id].q).astype(self.weights[ps.id].q.dtype.newbyteorder("<")).tobytes())
        return h.hexdigest()


def quantize_model(folded: ModelGraph, ranges: Mapping[str, tuple[float, float]]) -> QuantModel:
    """Quantize a BN-folded fp32 graph using calibrated activation ranges."""
    if any(layer.kind is LayerKind.BATCHNORM for layer in folded.layers):
        raise BuildError("model still contains batch norm layers; fold it first")
    act: dict[str, tuple[float, int]] = {INPUT: scale_zero_point(*ranges[INPUT])}
    for layer in folded.layers:
        if layer.kind is LayerKind.MAXPOOL:
            act[layer.id] = act[layer.inputs[0]]
        else:
            if layer.id not in ranges:
                raise ContractError(f"no calibration range for layer {layer.id!r}")
            act[layer.id] = scale_zero_point(*ranges[layer.id])
    weights = {}
    for layer in folded.layers:
        if layer.kind not in CONV_KINDS:
            continue
        qw = quantize_tensor(folded.params[param_id(layer.id, "kernel")], 8, symmetric=True)
        s_x = act[layer.inputs[0]][0]
        qb = quantize_with(folded.params[param_id(layer.id, "bias")], qw.scale * s_x, 0, 32)
        weights[param_id(layer.id, "kernel")] = qw
        weights[param_id(layer.id, "bias")] = qb
    meta = dict(folded.meta, quantized=True)
    return QuantModel(folded.layers, weights, act, folded.input_shape, folded.classes, meta)


def _requantize(acc: np.ndarray, multiplier: float, z_out: int) -> np.ndarray:
    q = z_out + round_half_even(multiplier * acc)
    return np.clip(q, -128, 127).astype(np.int8)


def _saturate(acc: np.ndarray) -> tuple[np.ndarray, bool]:
    lo, hi = INT_RANGES[32]
    flagged = bool(np.any(acc < lo) or np.any(acc > hi))
    return np.clip(acc, lo, hi), flagged


def int_conv(q_x, z_x: int, q_w, q_b, stride: int = 1, padding: str = "same") -> np.ndarray:
    """int32-style accumulator of one conv layer (before saturation).

    Every product and partial sum is an integer below 2**53, so float64
    BLAS arithmetic is exact here.
    """
    kh, kw, cin, cout = q_w.shape
    # sum(q_w * (q_x - Z_x)) == sum(q_w * q_x) - Z_x * sum(q_w); zero padding of
    # the centred input is padding q_x with Z_x
    centered = q_x.astype(np.float64) - z_x
    h, w = centered.shape[:2]
    if padding == "same":
        oh, pt, pb = T._same_padding(h, kh, stride)
        ow, pl, pr = T._same_padding(w, kw, stride)
        centered = np.pad(centered, ((pt, pb), (pl, pr), (0, 0)))
    else:
        oh, ow = (h - kh) // stride + 1, (w - kw) // stride + 1
    wf = q_w.astype(np.float64)
    acc = np.zeros((oh, ow, cout))
    for i in range(kh):
        for j in range(kw):
            win = centered[i : i + stride * (oh - 1) + 1 : stride, j : j + stride * (ow - 1) + 1 : stride, :]
            acc += win @ wf[i, j]
    return acc + q_b.astype(np.float64)


def int_conv_transpose(q_x, z_x: int, q_w, q_b, stride: int = 2) -> np.ndarray:
    kh, kw, cin, cout = q_w.shape
    centered = q_x.astype(np.float64) - z_x
    h, w = centered.shape[:2]
    oh, ow = h * stride, w * stride
    wf = q_w.astype(np.float64)
    acc = np.zeros((oh, ow, cout))
    for i in range(kh):
        nh = min(h, -(-(oh - i) // stride))
        for j in range(kw):
            nw = min(w, -(-(ow - j) // stride))
            if nh > 0 and nw > 0:
                acc[i : i + stride * (nh - 1) + 1 : stride, j : j + stride * (nw - 1) + 1 : stride] += centered[:nh, :nw] @ wf[i, j]
    return acc + q_b.astype(np.float64)


def quantize_input(qm: QuantModel, image) -> np.ndarray:
    image = np.asarray(image, dtype=np.float32)
    if image.shape != qm.input_shape:
        raise ContractError(f"image shape {image.shape} does not match model input shape {qm.input_shape}")
    s, z = qm.act_params[INPUT]
    return quantize_with(image, s, z, 8).q


def run_quant_layers(qm: QuantModel, image, overrides=None, reuse=None, start: int = 0) -> tuple[dict, bool]:
    """Integer execution of every layer; returns (int8 outputs by layer id, saturated)."""
    qparams = qm.params
    if overrides:
        qparams.update(overrides)
    if reuse is None:
        acts = {INPUT: quantize_input(qm, image)}
        start = 0
    else:
        acts = dict(reuse)
    saturated = False
    for layer in qm.layers[start:]:
        x = acts[layer.inputs[0]]
        s_x, z_x = qm.act_params[layer.inputs[0]]
        s_y, z_y = qm.act_params[layer.id]
        if layer.kind in CONV_KINDS:
            pid_w, pid_b = param_id(layer.id, ParamKind.KERNEL), param_id(layer.id, ParamKind.BIAS)
            s_w = qm.weights[pid_w].scale
            if layer.kind is LayerKind.CONV_TRANSPOSE:
                acc = int_conv_transpose(x, z_x, qparams[pid_w], qparams[pid_b], layer.attrs.get("stride", 2))
            else:
                acc = int_conv(x, z_x, qparams[pid_w], qparams[pid_b], layer.attrs.get("stride", 1), layer.attrs.get("padding", "same"))
            acc, flagged = _saturate(acc)
            saturated |= flagged
            out = _requantize(acc, s_w * s_x / s_y, z_y)
        elif layer.kind is LayerKind.ACTIVATION:
            out = qm.tables[layer.id][x.astype(np.int16) + 128]
        elif layer.kind is LayerKind.MAXPOOL:
            out = np.maximum(np.maximum(x[0::2, 0::2], x[0::2, 1::2]), np.maximum(x[1::2, 0::2], x[1::2, 1::2]))
        elif layer.kind is LayerKind.CONCAT:
            parts = []
            for src in layer.inputs:
                s_in, z_in = qm.act_params[src]
                q = acts[src]
                if (s_in, z_in) != (s_y, z_y):
                    q = _requantize(q.astype(np.float64) - z_in, s_in / s_y, z_y)
                parts.append(q)
            out = np.concatenate(parts, axis=2)
        else:
            raise BuildError(f"unsupported layer kind {layer.kind} in quantized model")
        acts[layer.id] = out
    return acts, saturated


def quant_forward(qm: QuantModel, image, overrides=None) -> QuantResult:
    """Integer-only inference; classes are the argmax of the last layer's int8 codes."""
    acts, saturated = run_quant_layers(qm, image, overrides)
    return QuantResult(T.argmax_channels(acts[qm.output_id]), acts, saturated)


def save_quant_model(qm: QuantModel, path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries = []
    for ps in qm.param_sets():
        qt = qm.weights[ps.id]
        entry = write_blob(path, ps.id, qt.q, ps.domain)
        entry.update(kind=ps.kind.value, scale=qt.scale, zero_point=qt.zero_point, width=qt.width)
        entries.append(entry)
    manifest = {
        "version": FORMAT_VERSION,
        "kind": "quant_model",
        "input_shape": list(qm.input_shape),
        "classes": qm.classes,
        "meta": qm.meta,
        "layers": [layer.to_dict() for layer in qm.layers],
        "param_sets": entries,
        "activations": {k: {"scale": s, "zero_point": z} for k, (s, z) in qm.act_params.items()},
    }
    atomic_write_text(path / MANIFEST, dump_json(manifest))
    return path


def load_quant_model(path) -> QuantModel:
    path = Path(path)
    manifest = read_manifest(path, "quant_model")
    try:
        layers = tuple(LayerSpec.from_dict(d) for d in manifest["layers"])
        act = {k: (float(v["scale"]), int(v["zero_point"])) for k, v in manifest["activations"].items()}
        weights = {}
        for entry in manifest["param_sets"]:
            q = read_blob(path, entry)
            weights[entry["id"]] = QuantizedTensor(q, entry["scale"], entry["zero_point"], entry["width"])
        return QuantModel(layers, weights, act, tuple(manifest["input_shape"]), int(manifest["classes"]), dict(manifest.get("meta", {})))
    except (KeyError, TypeError) as exc:
        raise ManifestError(f"malformed quantized model manifest: {exc}") from exc
