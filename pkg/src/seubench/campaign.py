"""Statistically sized fault-injection campaigns against a golden run.

An injection is an error ("critical") when the predicted class of at least
one test pixel differs from the fault-free prediction; its severity is the
percentage of changed pixels over the whole test set.
"""

from __future__ import annotations

import math
import multiprocessing
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from statistics import NormalDist
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import ContractError, PlanMismatchError
from .faults import Domain, FaultPlan, FaultSpec, faulted_copy, gen_fault_plan
from .graph import ModelGraph, run_layers
from .quant import QuantModel, run_quant_layers

VARIANTS = ("fp32", "fp32-pruned", "int8")
SIGN_AND_EXPONENT_BITS = tuple(range(31, 22, -1))


def _check_fraction(name: str, value: float) -> None:
    if not 0 < value < 1:
        raise ContractError(f"{name} must lie strictly between 0 and 1, got {value}")


def required_sample_size(population, margin: float = 0.025, confidence: float = 0.95, p: float = 0.5) -> int:
    """Number of injections for a given error margin and confidence.

    ``n = N / (1 + e**2 (N - 1) / (t**2 p (1 - p)))`` with ``t`` the two-sided
    normal quantile; an infinite (``None``/``math.inf``) population gives
    ``n = t**2 p (1 - p) / e**2``. Both are rounded up.
    """
    _check_fraction("margin", margin)
    _check_fraction("confidence", confidence)
    _check_fraction("failure probability", p)
    t = NormalDist().inv_cdf(1 - (1 - confidence) / 2)
    pq = t * t * p * (1 - p)
    if population is None or population == math.inf:
        return math.ceil(pq / (margin * margin))
    population = int(population)
    if population < 1:
        raise ContractError(f"population must be positive, got {population}")
    return math.ceil(population / (1 + margin * margin * (population - 1) / pq))


@dataclass(frozen=True)
class CampaignConfig:
    margin: float = 0.025
    confidence: float = 0.95
    failure_prob: float = 0.5
    bits: tuple[int, ...] = SIGN_AND_EXPONENT_BITS
    seed: int = 0
    variant: str = "fp32"
    n_override: int | None = None
    population_unit: str = "set_bit"
    param_sets: tuple[str, ...] | None = None

    def __post_init__(self):
        _check_fraction("margin", self.margin)
        _check_fraction("confidence", self.confidence)
        _check_fraction("failure_prob", self.failure_prob)
        if self.variant not in VARIANTS:
            raise ContractError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if not self.bits:
            raise ContractError("bit list is empty")
        if self.n_override is not None and self.n_override < 1:
            raise ContractError("n_override must be positive")
        object.__setattr__(self, "bits", tuple(int(b) for b in self.bits))

    def group_size(self, population: int) -> int:
        if self.n_override is not None:
            return min(self.n_override, population)
        return required_sample_size(population, self.margin, self.confidence, self.failure_prob)


def plan_campaign(model, config: CampaignConfig) -> FaultPlan:
    return gen_fault_plan(model, config.bits, config.group_size, config.seed, config.param_sets, config.population_unit)


def _executor(model):
    """Uniform ``run(image, overrides, reuse, start) -> (activations, saturated)``."""
    if isinstance(model, QuantModel):

        def run(image, overrides=None, reuse=None, start=0):
            acts, sat = run_quant_layers(model, image, overrides, reuse, start)
            return acts, sat

    elif isinstance(model, ModelGraph):

        def run(image, overrides=None, reuse=None, start=0):
            return run_layers(model, image, overrides, reuse, start), False

    else:
        raise ContractError(f"cannot run campaigns on {type(model).__name__}")
    return run


@dataclass
class GoldenResult:
    classes: list[np.ndarray]
    class_counts: list[np.ndarray]
    total_pixels: int
    activations: list[dict] | None = field(default=None, repr=False, compare=False)


def run_golden(model, images: Sequence[np.ndarray], keep_activations: bool = True) -> GoldenResult:
    """Fault-free predictions; intermediate activations are kept for reuse."""
    images = list(images)
    if not images:
        raise ContractError("golden run needs at least one image")
    run = _executor(model)
    classes, counts, acts_all = [], [], []
    for image in images:
        acts, _ = run(image)
        cmap = T.argmax_channels(acts[model.output_id])
        classes.append(cmap)
        counts.append(np.bincount(cmap.ravel(), minlength=model.classes))
        acts_all.append(acts)
    total = sum(c.size for c in classes)
    return GoldenResult(classes, counts, total, acts_all if keep_activations else None)


@dataclass(frozen=True)
class InjectionRecord:
    spec: FaultSpec
    layer: str
    kind: str
    orig_bits: int
    new_bits: int
    pixel_change_rate: float
    critical: bool
    nonfinite: bool
    saturated: bool
    per_image: tuple[float, ...] | None = None

    @property
    def bits_hex_width(self) -> int:
        return self.spec.domain.width // 4


def _inject(model, run, golden: GoldenResult, descriptor, spec: FaultSpec, per_image: bool) -> InjectionRecord:
    overrides, token = faulted_copy(model.params, spec)
    nonfinite = False
    if spec.domain is Domain.F32:
        nonfinite = not bool(np.isfinite(overrides[spec.param_set_id].reshape(-1)[spec.element_index]))
    start = model.layer_index(descriptor.layer)
    changed_total = 0
    saturated = False
    rates = []
    for i, gold in enumerate(golden.classes):
        acts, sat = run(None, overrides, golden.activations[i], start)
        saturated |= sat
        cmap = T.argmax_channels(acts[model.output_id])
        changed = int(np.count_nonzero(cmap != gold))
        changed_total += changed
        rates.append(100.0 * changed / gold.size)
    rate = 100.0 * changed_total / golden.total_pixels
    return InjectionRecord(
        spec, descriptor.layer, descriptor.kind.value, token.original_bits, token.flipped_bits,
        rate, changed_total > 0, nonfinite, saturated, tuple(rates) if per_image else None,
    )


_WORKER: dict = {}


def _work(chunk):
    w = _WORKER
    return [_inject(w["model"], w["run"], w["golden"], w["desc"][s.param_set_id], s, w["per_image"]) for s in chunk]


def run_campaign(
    model,
    plan: FaultPlan,
    golden: GoldenResult,
    jobs: int = 1,
    per_image: bool = False,
) -> list[InjectionRecord]:
    """Inject every planned fault on a private copy and compare against ``golden``.

    Records come back in plan order regardless of ``jobs``. The golden run
    must have been produced with ``keep_activations=True`` on the same model;
    layers upstream of the faulted one are reused from it.
    """
    if plan.model_hash != model.fingerprint():
        raise PlanMismatchError("fault plan was generated for a different model")
    if golden.activations is None:
        raise ContractError("golden result carries no activations; rerun with keep_activations=True")
    if not plan.faults:
        return []
    run = _executor(model)
    desc = {ps.id: ps for ps in model.param_sets()}
    jobs = max(1, int(jobs))
    if jobs == 1 or len(plan.faults) < 2 * jobs:
        return [_inject(model, run, golden, desc[s.param_set_id], s, per_image) for s in plan.faults]

    _WORKER.update(model=model, run=run, golden=golden, desc=desc, per_image=per_image)
    try:
        size = max(1, math.ceil(len(plan.faults) / (jobs * 4)))
        chunks = [plan.faults[i : i + size] for i in range(0, len(plan.faults), size)]
        ctx = multiprocessing.get_context("fork") if "fork" in multiprocessing.get_all_start_methods() else None
        with ProcessPoolExecutor(max_workers=jobs, mp_context=ctx) as pool:
            return [rec for part in pool.map(_work, chunks) for rec in part]
    finally:
        _WORKER.clear()


def default_jobs() -> int:
    return len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") else (os.cpu_count() or 1)


@dataclass(frozen=True)
class GroupStats:
    n: int
    mean_rate: float
    std_rate: float
    critical_fraction: float
    nonfinite_fraction: float


def _stats(records: Sequence[InjectionRecord]) -> GroupStats:
    n = len(records)
    rates = [r.pixel_change_rate for r in records]
    mean = math.fsum(rates) / n
    var = math.fsum((x - mean) ** 2 for x in rates) / n
    return GroupStats(
        n,
        mean,
        math.sqrt(var),
        sum(r.critical for r in records) / n,
        sum(r.nonfinite for r in records) / n,
    )


@dataclass
class VulnerabilityReport:
    """Error-rate statistics per (set, bit), per set and for the whole model.

    Rates are pixel-change percentages (0-100); sums use ``math.fsum`` so the
    result does not depend on record order.
    """

    grid: dict[tuple[str, int], GroupStats]
    per_set: dict[str, GroupStats]
    model: GroupStats
    set_order: list[str]
    meta: dict = field(default_factory=dict)

    @property
    def bits(self) -> list[int]:
        return sorted({b for _, b in self.grid}, reverse=True)


def summarize(records: Sequence[InjectionRecord], model=None, meta=None) -> VulnerabilityReport:
    records = list(records)
    if not records:
        raise ContractError("cannot summarize an empty record list")
    by_group: dict[tuple[str, int], list] = {}
    by_set: dict[str, list] = {}
    for r in records:
        by_group.setdefault((r.spec.param_set_id, r.spec.bit_index), []).append(r)
        by_set.setdefault(r.spec.param_set_id, []).append(r)
    if model is not None:
        order = [ps.id for ps in model.param_sets() if ps.id in by_set]
    else:
        order = sorted(by_set)
    grid = {key: _stats(by_group[key]) for key in sorted(by_group, key=lambda k: (order.index(k[0]), -k[1]))}
    per_set = {sid: _stats(by_set[sid]) for sid in order}
    return VulnerabilityReport(grid, per_set, _stats(records), order, dict(meta or {}))
