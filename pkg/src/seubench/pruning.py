"""Structured channel pruning driven by a per-layer sensitivity sweep.

Ratios live on a grid of tenths. Removing ``ratio`` of a layer drops
``ceil(ratio * Cout)`` output channels (at least one channel always
survives), chosen by smallest kernel-slice L2 norm. Consumers are rewired
through BN, activation, pooling and skip concatenations.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import BuildError, ContractError, UnreachableTargetError
from .graph import (
    INPUT,
    LayerKind,
    LayerSpec,
    ModelGraph,
    ParamKind,
    forward,
    infer_shapes,
    layer_flops,
    param_id,
)
from .metrics import global_iou

PRUNABLE = (LayerKind.CONV, LayerKind.CONV_TRANSPOSE)
TENTHS = tuple(range(1, 10))
MAX_TENTHS = 9


def removed_channels(ratio: float, cout: int) -> int:
    """Channels dropped for ``ratio``; rounding guards 0.3 * 10 == 3.0000000000000004."""
    if not 0 <= ratio <= 0.9 + 1e-12:
        raise ContractError(f"prune ratio must lie in [0, 0.9], got {ratio}")
    return min(cout - 1, math.ceil(round(ratio * cout, 9)))


def prunable_layers(model: ModelGraph) -> tuple[list[str], list[str]]:
    """(layer ids that can be pruned, layer ids skipped for having < 2 channels)."""
    ok, skipped = [], []
    for layer in model.layers:
        if layer.kind in PRUNABLE:
            (ok if layer.attrs["filters"] >= 2 else skipped).append(layer.id)
    return ok, skipped


def _kernel_order(kernel: np.ndarray) -> np.ndarray:
    norms = np.sqrt(np.sum(np.square(kernel.astype(np.float64)), axis=(0, 1, 2)))
    return np.argsort(norms, kind="stable")


def prune_channels(model: ModelGraph, ratios: Mapping[str, float] | "PruneAllocation") -> ModelGraph:
    """New model with output channels removed according to per-layer ratios."""
    if isinstance(ratios, PruneAllocation):
        ratios = ratios.ratios
    unknown = set(ratios) - {layer.id for layer in model.layers if layer.kind in PRUNABLE}
    if unknown:
        raise ContractError(f"not prunable: {sorted(unknown)}")

    keep: dict[str, np.ndarray | None] = {INPUT: None}
    layers, params = [], {}
    for layer in model.layers:
        src = keep[layer.inputs[0]]
        p = {k: model.params[param_id(layer.id, k)] for k in layer.param_kinds()}
        attrs = dict(layer.attrs)
        out_keep = src
        if layer.kind in (*PRUNABLE, LayerKind.OUTPUT_CONV):
            kernel = p[ParamKind.KERNEL] if src is None else p[ParamKind.KERNEL][:, :, src, :]
            bias = p[ParamKind.BIAS]
            out_keep = None
            drop = removed_channels(ratios.get(layer.id, 0.0), attrs["filters"])
            if drop:
                kept = np.sort(_kernel_order(kernel)[drop:])
                kernel, bias = kernel[..., kept], bias[kept]
                attrs["filters"] = int(kept.size)
                out_keep = kept
            p = {ParamKind.KERNEL: kernel, ParamKind.BIAS: bias}
        elif layer.kind is LayerKind.BATCHNORM and src is not None:
            p = {k: v[src] for k, v in p.items()}
        elif layer.kind is LayerKind.CONCAT:
            a, b = layer.inputs
            ka, kb = keep[a], keep[b]
            if ka is None and kb is None:
                out_keep = None
            else:
                ca = model.shapes[a][2]
                ka = np.arange(ca) if ka is None else ka
                kb = np.arange(model.shapes[b][2]) if kb is None else kb
                out_keep = np.concatenate([ka, kb + ca])
        keep[layer.id] = out_keep
        layers.append(LayerSpec(layer.id, layer.kind, layer.inputs, attrs))
        params.update({param_id(layer.id, k): np.ascontiguousarray(v, np.float32) for k, v in p.items()})

    meta = dict(model.meta)
    if any(ratios.values()):
        meta["pruned"] = True
    try:
        return ModelGraph(tuple(layers), params, model.input_shape, model.classes, meta)
    except BuildError as exc:
        raise BuildError(f"channel rewiring produced an inconsistent graph: {exc}") from exc


def _structural_flops(model: ModelGraph, tenths: Mapping[str, int]) -> int:
    layers = []
    for layer in model.layers:
        k = tenths.get(layer.id, 0)
        if k:
            attrs = dict(layer.attrs)
            attrs["filters"] -= removed_channels(k / 10, attrs["filters"])
            layer = LayerSpec(layer.id, layer.kind, layer.inputs, attrs)
        layers.append(layer)
    return sum(layer_flops(layers, infer_shapes(layers, model.input_shape)).values())


def flops_reduction(model: ModelGraph, ratios: Mapping[str, float]) -> float:
    """Fraction of FLOPs removed by pruning with ``ratios`` (no weights touched)."""
    tenths = {k: round(v * 10) for k, v in ratios.items()}
    base = _structural_flops(model, {})
    return 1.0 - _structural_flops(model, tenths) / base


@dataclass
class SensitivityTable:
    """GIoU after pruning a single layer at each ratio; ratio 0 is the baseline."""

    baseline: float
    rows: dict[str, dict[int, float]]
    skipped: list[str] = field(default_factory=list)
    metric: str = "giou"

    def value(self, layer_id: str, tenths: int) -> float:
        return self.baseline if tenths == 0 else self.rows[layer_id][tenths]

    def records(self) -> list[tuple[str, float, float]]:
        out = []
        for layer_id, row in self.rows.items():
            out.append((layer_id, 0.0, self.baseline))
            out.extend((layer_id, k / 10, v) for k, v in sorted(row.items()))
        return out


def _evaluate(model: ModelGraph, images, gts) -> float:
    preds = [forward(model, im)[1] for im in images]
    return global_iou(preds, gts, model.classes)


def sensitivity_sweep(
    model: ModelGraph,
    images: Sequence[np.ndarray],
    gts: Sequence[np.ndarray] | None = None,
    tenths: Sequence[int] = TENTHS,
    layers: Sequence[str] | None = None,
) -> SensitivityTable:
    """Prune one layer at a time and record GIoU against ``gts``.

    Without ground truth the unpruned model's own predictions are the
    reference, so the baseline is 100.
    """
    images = list(images)
    if not images:
        raise ContractError("sensitivity sweep needs a non-empty evaluation set")
    if any(not 1 <= k <= MAX_TENTHS for k in tenths):
        raise ContractError("sweep ratios must be tenths in 0.1..0.9")
    if gts is None:
        gts = [forward(model, im)[1] for im in images]
    ok, skipped = prunable_layers(model)
    if layers is not None:
        ok = [lid for lid in ok if lid in set(layers)]
    table = SensitivityTable(_evaluate(model, images, gts), {}, skipped)
    for lid in ok:
        row = {}
        for k in tenths:
            row[k] = _evaluate(prune_channels(model, {lid: k / 10}), images, gts)
        table.rows[lid] = row
    return table


@dataclass
class PruneAllocation:
    ratios: dict[str, float]
    reduction: float
    target: float


def _next_step(tenths: int, cout: int) -> int | None:
    """Smallest higher tenth that actually removes another channel."""
    now = removed_channels(tenths / 10, cout)
    for k in range(tenths + 1, MAX_TENTHS + 1):
        if removed_channels(k / 10, cout) > now:
            return k
    return None


def allocate_ratios(
    table: SensitivityTable,
    flops_target: float,
    model: ModelGraph,
    tolerance: float = 0.02,
) -> PruneAllocation:
    """Greedy allocation of per-layer ratios reaching a global FLOPs reduction.

    Each step raises one layer to its next effective tenth, picking the
    smallest GIoU loss per FLOP removed among steps that do not overshoot
    ``target + tolerance`` (or, if all overshoot, the smallest overshoot).
    """
    if not 0 <= flops_target < 1:
        raise ContractError(f"FLOPs target must lie in [0, 1), got {flops_target}")
    layers = [lid for lid in table.rows if lid in model._index]
    cout = {lid: model.layer(lid).attrs["filters"] for lid in layers}
    base = _structural_flops(model, {})
    state = {lid: 0 for lid in layers}

    def reduction(t):
        return 1.0 - _structural_flops(model, t) / base

    best_case = {lid: MAX_TENTHS for lid in layers}
    maximum = reduction(best_case)
    if flops_target > maximum + 1e-12:
        raise UnreachableTargetError(flops_target, maximum)

    current = 0.0
    while current < flops_target:
        candidates = []
        for order, lid in enumerate(layers):
            k = _next_step(state[lid], cout[lid])
            if k is None or k not in table.rows[lid]:
                continue
            trial = dict(state, **{lid: k})
            red = reduction(trial)
            gain = red - current
            if gain <= 0:
                continue
            loss = table.value(lid, state[lid]) - table.value(lid, k)
            candidates.append((loss / gain, order, lid, k, red))
        if not candidates:
            break
        fitting = [c for c in candidates if c[4] <= flops_target + tolerance]
        if fitting:
            _, _, lid, k, red = min(fitting)
        else:
            _, _, lid, k, red = min(candidates, key=lambda c: (c[4], c[0], c[1]))
        state[lid] = k
        current = red
    ratios = {lid: k / 10 for lid, k in state.items() if k}
    return PruneAllocation(ratios, current, flops_target)


@dataclass
class PruneIteration:
    target: float
    table: SensitivityTable
    allocation: PruneAllocation
    giou: float


@dataclass
class PruneResult:
    model: ModelGraph
    iterations: list[PruneIteration]
    total_reduction: float
    baseline_giou: float

    def degradation(self) -> float:
        return self.baseline_giou - self.iterations[-1].giou if self.iterations else 0.0

    def passes_gate(self, max_degradation: float) -> bool:
        return self.degradation() <= max_degradation


def iterative_prune(
    model: ModelGraph,
    images: Sequence[np.ndarray],
    targets: Sequence[float],
    gts: Sequence[np.ndarray] | None = None,
    tolerance: float = 0.02,
) -> PruneResult:
    """Sweep, allocate and prune once per target; each target is relative to the previous model.

    Without fine-tuning the metric is never recovered between iterations,
    so :meth:`PruneResult.passes_gate` reports the raw degradation.
    """
    images = list(images)
    if gts is None:
        gts = [forward(model, im)[1] for im in images]
    base_flops = _structural_flops(model, {})
    baseline = _evaluate(model, images, gts)
    current, iterations = model, []
    for target in targets:
        table = sensitivity_sweep(current, images, gts)
        alloc = allocate_ratios(table, target, current, tolerance)
        current = prune_channels(current, alloc)
        iterations.append(PruneIteration(target, table, alloc, _evaluate(current, images, gts)))
    total = 1.0 - _structural_flops(current, {}) / base_flops
    return PruneResult(current, iterations, total, baseline)


def dead_channels(kernel: np.ndarray) -> int:
    """Number of output channels whose kernel slice is exactly zero."""
    return int(np.count_nonzero(~np.any(kernel != 0, axis=(0, 1, 2))))

