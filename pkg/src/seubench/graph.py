"""Layer graphs for U-Net style segmentation models.

A :class:`ModelGraph` is an immutable, topologically ordered list of
:class:`LayerSpec` plus a parameter store keyed by parameter-set id
(``"<layer id>/<kind>"``). Parameter sets are the unit of fault targeting.
"""

from __future__ import annotations

import enum
import hashlib
import json
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

from . import tensor as T
from .errors import BuildError, ContractError
from .tensor import ActivationKind

INPUT = "input"


class LayerKind(str, enum.Enum):
    CONV = "conv"
    CONV_TRANSPOSE = "conv_transpose"
    BATCHNORM = "batchnorm"
    ACTIVATION = "activation"
    MAXPOOL = "maxpool"
    CONCAT = "concat"
    OUTPUT_CONV = "output_conv"


class ParamKind(str, enum.Enum):
    KERNEL = "kernel"
    BIAS = "bias"
    GAMMA = "gamma"
    BETA = "beta"
    MEAN = "mean"
    VAR = "var"


PARAM_KIND_ORDER = tuple(ParamKind)
CONV_KINDS = (LayerKind.CONV, LayerKind.CONV_TRANSPOSE, LayerKind.OUTPUT_CONV)


@dataclass(frozen=True)
class LayerSpec:
    id: str
    kind: LayerKind
    inputs: tuple[str, ...]
    attrs: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"id": self.id, "kind": self.kind.value, "inputs": list(self.inputs), "attrs": dict(self.attrs)}

    @classmethod
    def from_dict(cls, d: Mapping) -> "LayerSpec":
        return cls(d["id"], LayerKind(d["kind"]), tuple(d["inputs"]), dict(d.get("attrs", {})))

    def param_kinds(self) -> tuple[ParamKind, ...]:
        if self.kind in CONV_KINDS:
            return (ParamKind.KERNEL, ParamKind.BIAS)
        if self.kind is LayerKind.BATCHNORM:
            return (ParamKind.GAMMA, ParamKind.BETA, ParamKind.MEAN, ParamKind.VAR)
        return ()


@dataclass(frozen=True)
class ParameterSet:
    """Descriptor of one named group of parameters."""

    id: str
    layer: str
    kind: ParamKind
    shape: tuple[int, ...]
    domain: str = "f32"

    @property
    def count(self) -> int:
        return int(np.prod(self.shape))


def param_id(layer_id: str, kind: ParamKind | str) -> str:
    return f"{layer_id}/{ParamKind(kind).value}"


def infer_shapes(layers: Iterable[LayerSpec], input_shape) -> dict[str, tuple[int, int, int]]:
    shapes = {INPUT: tuple(int(v) for v in input_shape)}
    for layer in layers:
        if layer.id in shapes:
            raise BuildError(f"duplicate layer id {layer.id!r}")
        for src in layer.inputs:
            if src not in shapes:
                raise BuildError(f"layer {layer.id!r} reads {src!r} which is not defined before it")
        ins = [shapes[s] for s in layer.inputs]
        expected = 2 if layer.kind is LayerKind.CONCAT else 1
        if len(ins) != expected:
            raise BuildError(f"layer {layer.id!r} expects {expected} inputs, got {len(ins)}")
        h, w, c = ins[0]
        a = layer.attrs
        if layer.kind in (LayerKind.CONV, LayerKind.OUTPUT_CONV):
            s = a.get("stride", 1)
            if a.get("padding", "same") == "same":
                out = (-(-h // s), -(-w // s), a["filters"])
            else:
                k = a["kernel"]
                out = ((h - k) // s + 1, (w - k) // s + 1, a["filters"])
        elif layer.kind is LayerKind.CONV_TRANSPOSE:
            s = a.get("stride", 2)
            out = (h * s, w * s, a["filters"])
        elif layer.kind is LayerKind.MAXPOOL:
            if h % 2 or w % 2:
                raise BuildError(f"maxpool {layer.id!r} receives odd extents {ins[0]}")
            out = (h // 2, w // 2, c)
        elif layer.kind is LayerKind.CONCAT:
            if ins[0][:2] != ins[1][:2]:
                raise BuildError(f"concat {layer.id!r} spatial mismatch {ins[0]} vs {ins[1]}")
            out = (h, w, ins[0][2] + ins[1][2])
        else:
            out = (h, w, c)
        if min(out) < 1:
            raise BuildError(f"layer {layer.id!r} produces empty shape {out}")
        shapes[layer.id] = out
    return shapes


def _param_shape(layer: LayerSpec, kind: ParamKind, in_channels: int) -> tuple[int, ...]:
    a = layer.attrs
    if kind is ParamKind.KERNEL:
        k = a.get("kernel", 2 if layer.kind is LayerKind.CONV_TRANSPOSE else 3)
        return (k, k, in_channels, a["filters"])
    if kind is ParamKind.BIAS:
        return (a["filters"],)
    return (in_channels,)


def _readonly(arr) -> np.ndarray:
    view = np.asarray(arr).view()
    view.flags.writeable = False
    return view


@dataclass(frozen=True, eq=False)
class ModelGraph:
    layers: tuple[LayerSpec, ...]
    params: Mapping[str, np.ndarray]
    input_shape: tuple[int, int, int]
    classes: int
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        shapes = infer_shapes(self.layers, self.input_shape)
        object.__setattr__(self, "shapes", shapes)
        if not self.layers:
            raise BuildError("model has no layers")
        if shapes[self.layers[-1].id][2] != self.classes:
            raise BuildError(f"output layer has {shapes[self.layers[-1].id][2]} channels, expected {self.classes}")
        sets = []
        for layer in self.layers:
            cin = shapes[layer.inputs[0]][2]
            for kind in layer.param_kinds():
                sets.append(ParameterSet(param_id(layer.id, kind), layer.id, kind, _param_shape(layer, kind, cin)))
        object.__setattr__(self, "_sets", tuple(sets))
        store = {}
        for ps in sets:
            if ps.id not in self.params:
                raise BuildError(f"missing parameter set {ps.id!r}")
            v = np.asarray(self.params[ps.id])
            if v.shape != ps.shape:
                raise BuildError(f"parameter set {ps.id!r} has shape {v.shape}, expected {ps.shape}")
            if v.dtype != np.float32:
                raise BuildError(f"parameter set {ps.id!r} must be float32, got {v.dtype}")
            store[ps.id] = _readonly(v)
        extra = set(self.params) - set(store)
        if extra:
            raise BuildError(f"unexpected parameter sets {sorted(extra)}")
        object.__setattr__(self, "params", store)
        object.__setattr__(self, "_index", {layer.id: i for i, layer in enumerate(self.layers)})

    @property
    def output_id(self) -> str:
        return self.layers[-1].id

    @property
    def activation(self) -> ActivationKind | None:
        af = self.meta.get("activation")
        return ActivationKind(af) if af else None

    def layer(self, layer_id: str) -> LayerSpec:
        return self.layers[self._index[layer_id]]

    def layer_index(self, layer_id: str) -> int:
        return self._index[layer_id]

    def consumers(self, layer_id: str) -> list[LayerSpec]:
        return [layer for layer in self.layers if layer_id in layer.inputs]

    def param_sets(self) -> tuple[ParameterSet, ...]:
        return self._sets

    def param_set(self, set_id: str) -> ParameterSet:
        for ps in self._sets:
            if ps.id == set_id:
                return ps
        raise KeyError(set_id)

    def replace(self, params=None, layers=None, meta=None) -> "ModelGraph":
        """New graph with some parameter sets (or the layer list) swapped."""
        new_params = dict(self.params)
        if params:
            new_params.update(params)
        return ModelGraph(
            self.layers if layers is None else layers,
            new_params,
            self.input_shape,
            self.classes,
            dict(self.meta if meta is None else meta),
        )

    def structure(self) -> dict:
        return {
            "layers": [layer.to_dict() for layer in self.layers],
            "input_shape": list(self.input_shape),
            "classes": self.classes,
            "meta": self.meta,
        }

    def fingerprint(self) -> str:
        h = hashlib.sha256(json.dumps(self.structure(), sort_keys=True).encode())
        for ps in self._sets:
            h.update(ps.id.encode())
            h.update(np.ascontiguousarray(self.params[ps.id], dtype="<f4").tobytes())
        return h.hexdigest()


def _conv_block(layers: list, prefix: str, src: str, filters: int, af: ActivationKind, eps: float) -> str:
    for n in (1, 2):
        layers.append(LayerSpec(f"{prefix}_conv{n}", LayerKind.CONV, (src,), {"filters": filters, "kernel": 3, "stride": 1, "padding": "same"}))
        layers.append(LayerSpec(f"{prefix}_bn{n}", LayerKind.BATCHNORM, (f"{prefix}_conv{n}",), {"eps": eps}))
        layers.append(LayerSpec(f"{prefix}_act{n}", LayerKind.ACTIVATION, (f"{prefix}_bn{n}",), {"activation": af.value}))
        src = f"{prefix}_act{n}"
    return src


def build_unet(
    levels: int,
    base_filters: int,
    input_shape,
    classes: int,
    af: ActivationKind | str = ActivationKind.RELU,
    eps: float = T.DEFAULT_BN_EPS,
) -> ModelGraph:
    """Build a U-Net with ``levels`` pooled encoder levels and a bottleneck.

    Encoder level ``i`` has two 3x3 conv + BN + AF blocks with
    ``base_filters * 2**i`` filters followed by a 2x2 max-pool; the
    bottleneck uses ``base_filters * 2**levels`` filters. Each decoder level
    upsamples with a 2x2 stride-2 transposed conv, concatenates
    (encoder features, upsampled features) and applies two conv blocks.
    A 1x1 conv produces ``classes`` logits. Parameters are zero; see
    :func:`init_weights`.
    """
    af = ActivationKind(af)
    h, w, c = (int(v) for v in input_shape)
    if levels < 1:
        raise BuildError(f"levels must be >= 1, got {levels}")
    if base_filters < 1 or classes < 1 or c < 1:
        raise BuildError("base_filters, classes and input channels must be positive")
    div = 2**levels
    if h % div or w % div:
        raise BuildError(f"input extents {h}x{w} must be divisible by 2**levels = {div}")

    layers: list[LayerSpec] = []
    src = INPUT
    skips = []
    for i in range(levels):
        src = _conv_block(layers, f"enc{i}", src, base_filters * 2**i, af, eps)
        skips.append(src)
        layers.append(LayerSpec(f"enc{i}_pool", LayerKind.MAXPOOL, (src,)))
        src = f"enc{i}_pool"
    src = _conv_block(layers, "bottleneck", src, base_filters * 2**levels, af, eps)
    for i in reversed(range(levels)):
        f = base_filters * 2**i
        layers.append(LayerSpec(f"dec{i}_up", LayerKind.CONV_TRANSPOSE, (src,), {"filters": f, "kernel": 2, "stride": 2}))
        layers.append(LayerSpec(f"dec{i}_concat", LayerKind.CONCAT, (skips[i], f"dec{i}_up")))
        src = _conv_block(layers, f"dec{i}", f"dec{i}_concat", f, af, eps)
    layers.append(LayerSpec("head", LayerKind.OUTPUT_CONV, (src,), {"filters": classes, "kernel": 1, "stride": 1, "padding": "same"}))
    meta = {"levels": levels, "base_filters": base_filters, "activation": af.value, "arch": "unet"}
    return graph_from_layers(layers, (h, w, c), classes, meta)


def graph_from_layers(layers, input_shape, classes: int, meta=None) -> ModelGraph:
    """Wrap an arbitrary layer list with zero-initialised parameters."""
    shapes = infer_shapes(layers, input_shape)
    params = {}
    for layer in layers:
        cin = shapes[layer.inputs[0]][2]
        for kind in layer.param_kinds():
            params[param_id(layer.id, kind)] = np.zeros(_param_shape(layer, kind, cin), np.float32)
    return ModelGraph(tuple(layers), params, input_shape, classes, dict(meta or {}))


def enumerate_param_sets(model: ModelGraph) -> list[ParameterSet]:
    """Parameter sets in topological order, kernel/bias/gamma/beta/mean/var within a layer."""
    return list(model.param_sets())


def init_weights(model: ModelGraph, seed: int, scheme: str = "he") -> ModelGraph:
    """Random kernels (He normal or Glorot uniform), zero biases, identity BN."""
    if scheme not in ("he", "glorot"):
        raise ContractError(f"unknown init scheme {scheme!r}")
    rng = np.random.default_rng(seed)
    new = {}
    for ps in model.param_sets():
        if ps.kind is ParamKind.KERNEL:
            kh, kw, cin, cout = ps.shape
            fan_in, fan_out = kh * kw * cin, kh * kw * cout
            if scheme == "he":
                v = rng.normal(0.0, np.sqrt(2.0 / fan_in), ps.shape)
            else:
                lim = np.sqrt(6.0 / (fan_in + fan_out))
                v = rng.uniform(-lim, lim, ps.shape)
        elif ps.kind in (ParamKind.GAMMA, ParamKind.VAR):
            v = np.ones(ps.shape)
        else:
            v = np.zeros(ps.shape)
        new[ps.id] = v.astype(np.float32)
    meta = dict(model.meta, init={"seed": int(seed), "scheme": scheme})
    return model.replace(params=new, meta=meta)


def _eval_layer(layer: LayerSpec, ins: list, params: Mapping[str, np.ndarray]) -> np.ndarray:
    a = layer.attrs
    kind = layer.kind
    if kind in (LayerKind.CONV, LayerKind.OUTPUT_CONV):
        return T.conv2d(ins[0], params[f"{layer.id}/kernel"], params[f"{layer.id}/bias"], a.get("stride", 1), a.get("padding", "same"))
    if kind is LayerKind.CONV_TRANSPOSE:
        return T.conv2d_transpose(ins[0], params[f"{layer.id}/kernel"], params[f"{layer.id}/bias"], a.get("stride", 2))
    if kind is LayerKind.BATCHNORM:
        p = layer.id
        return T.batchnorm_infer(
            ins[0], params[f"{p}/gamma"], params[f"{p}/beta"], params[f"{p}/mean"], params[f"{p}/var"],
            a.get("eps", T.DEFAULT_BN_EPS), strict=False,
        )
    if kind is LayerKind.ACTIVATION:
        return T.apply_activation(ins[0], a["activation"])
    if kind is LayerKind.MAXPOOL:
        return T.maxpool2d(ins[0])
    if kind is LayerKind.CONCAT:
        return T.concat_channels(ins[0], ins[1])
    raise BuildError(f"unknown layer kind {kind}")


def run_layers(model: ModelGraph, image, overrides=None, reuse=None, start: int = 0) -> dict[str, np.ndarray]:
    """Execute the graph and return every layer's output keyed by layer id.

    ``overrides`` replaces parameter sets for this call only. With ``reuse``
    (activations of an earlier run) and ``start``, layers before ``start``
    are taken from ``reuse`` instead of being recomputed.
    """
    params = model.params if not overrides else {**model.params, **overrides}
    if reuse is None:
        image = np.asarray(image, dtype=np.float32)
        if image.shape != model.input_shape:
            raise ContractError(f"image shape {image.shape} does not match model input shape {model.input_shape}")
        acts = {INPUT: image}
        start = 0
    else:
        acts = dict(reuse)
    for layer in model.layers[start:]:
        acts[layer.id] = _eval_layer(layer, [acts[s] for s in layer.inputs], params)
    return acts


def forward(model: ModelGraph, image, overrides=None) -> tuple[np.ndarray, np.ndarray]:
    """Logits and per-pixel classes for one image."""
    logits = run_layers(model, image, overrides)[model.output_id]
    return logits, T.argmax_channels(logits)


def count_params_flops(model: ModelGraph, input_shape=None) -> tuple[int, int]:
    """Total parameter count and FLOPs per inference.

    Convolutions count 2 FLOPs per MAC. Batch norm counts 2 per element
    (scale and shift), activations 1 per element, max-pool 1 per input
    element; concatenation is free.
    """
    params = sum(ps.count for ps in model.param_sets())
    return params, sum(flops_breakdown(model, input_shape).values())


def flops_breakdown(model: ModelGraph, input_shape=None) -> dict[str, int]:
    """FLOPs per layer id (see :func:`count_params_flops` for the cost model)."""
    shapes = model.shapes if input_shape is None else infer_shapes(model.layers, input_shape)
    return layer_flops(model.layers, shapes)


def layer_flops(layers, shapes) -> dict[str, int]:
    out = {}
    for layer in layers:
        h, w, c = shapes[layer.id]
        ih, iw, ic = shapes[layer.inputs[0]]
        if layer.kind in (LayerKind.CONV, LayerKind.OUTPUT_CONV):
            k = layer.attrs.get("kernel", 3)
            out[layer.id] = 2 * k * k * ic * c * h * w
        elif layer.kind is LayerKind.CONV_TRANSPOSE:
            k = layer.attrs.get("kernel", 2)
            out[layer.id] = 2 * k * k * ic * c * ih * iw
        elif layer.kind is LayerKind.BATCHNORM:
            out[layer.id] = 2 * h * w * c
        elif layer.kind is LayerKind.ACTIVATION:
            out[layer.id] = h * w * c
        elif layer.kind is LayerKind.MAXPOOL:
            out[layer.id] = ih * iw * ic
        else:
            out[layer.id] = 0
    return out


def fold_batchnorm(model: ModelGraph) -> ModelGraph:
    """Absorb every batch-norm layer into the convolution feeding it."""
    bn_of = {}
    for layer in model.layers:
        if layer.kind is not LayerKind.BATCHNORM:
            continue
        src = layer.inputs[0]
        if src == INPUT or model.layer(src).kind not in CONV_KINDS:
            raise BuildError(f"batch norm {layer.id!r} does not follow a convolution")
        if len(model.consumers(src)) != 1:
            raise BuildError(f"convolution {src!r} feeds more than the batch norm {layer.id!r}")
        bn_of[src] = layer
    rename = {bn.id: conv for conv, bn in bn_of.items()}
    params = {}
    layers = []
    for layer in model.layers:
        if layer.kind is LayerKind.BATCHNORM:
            continue
        layers.append(LayerSpec(layer.id, layer.kind, tuple(rename.get(s, s) for s in layer.inputs), dict(layer.attrs)))
        for kind in layer.param_kinds():
            params[param_id(layer.id, kind)] = model.params[param_id(layer.id, kind)]
        bn = bn_of.get(layer.id)
        if bn is None:
            continue
        g, b, m, v = (model.params[param_id(bn.id, k)].astype(np.float64) for k in ("gamma", "beta", "mean", "var"))
        with np.errstate(all="ignore"):
            scale = g / np.sqrt(v + bn.attrs.get("eps", T.DEFAULT_BN_EPS))
            kernel = model.params[param_id(layer.id, "kernel")].astype(np.float64) * scale
            bias = (model.params[param_id(layer.id, "bias")].astype(np.float64) - m) * scale + b
        params[param_id(layer.id, "kernel")] = kernel.astype(np.float32)
        params[param_id(layer.id, "bias")] = bias.astype(np.float32)
    return ModelGraph(tuple(layers), params, model.input_shape, model.classes, dict(model.meta, folded=True))
