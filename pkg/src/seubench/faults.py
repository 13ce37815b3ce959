"""Single-bit parameter faults and reproducible fault plans.

Bit indices count from the LSB. For binary32, bit 31 is the sign, bits
30..23 the exponent (30 is the exponent MSB) and 22..0 the mantissa. Integer
domains use two's complement, so bit 7 of an int8 and bit 31 of an int32 are
sign bits.
"""

from __future__ import annotations

import enum
import json
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable, MutableMapping, Sequence

import numpy as np

from .errors import ContractError

RNG_NAME = "numpy.random.PCG64"


class Domain(str, enum.Enum):
    F32 = "F32"
    I8 = "I8"
    I32 = "I32"

    @property
    def width(self) -> int:
        return 8 if self is Domain.I8 else 32

    @classmethod
    def of(cls, arr: np.ndarray) -> "Domain":
        dt = np.asarray(arr).dtype
        if dt == np.float32:
            return cls.F32
        if dt == np.int8:
            return cls.I8
        if dt == np.int32:
            return cls.I32
        raise ContractError(f"no fault domain for dtype {dt}")


_UINT = {Domain.F32: np.uint32, Domain.I8: np.uint8, Domain.I32: np.uint32}


def _check_bit(bit_index: int, width: int) -> None:
    if not 0 <= bit_index < width:
        raise ContractError(f"bit index {bit_index} out of range for a {width}-bit value")


def f32_bits(value) -> int:
    return int(np.asarray(value, dtype=np.float32).reshape(()).view(np.uint32))


def f32_from_bits(bits: int) -> np.float32:
    return np.array(bits & 0xFFFFFFFF, dtype=np.uint32).view(np.float32)[()]


def flip_bit_f32(value, bit_index: int) -> np.float32:
    """XOR one bit of the binary32 pattern of ``value``."""
    _check_bit(bit_index, 32)
    return f32_from_bits(f32_bits(value) ^ (1 << bit_index))


def flip_bit_int(value: int, bit_index: int, width: int) -> int:
    """XOR one bit of the ``width``-bit two's-complement form of ``value``."""
    if width not in (8, 32):
        raise ContractError(f"width must be 8 or 32, got {width}")
    _check_bit(bit_index, width)
    lo, hi = -(1 << (width - 1)), (1 << (width - 1)) - 1
    value = int(value)
    if not lo <= value <= hi:
        raise ContractError(f"{value} does not fit in int{width}")
    u = (value & ((1 << width) - 1)) ^ (1 << bit_index)
    return u - (1 << width) if u > hi else u


@dataclass(frozen=True)
class FaultSpec:
    param_set_id: str
    element_index: int
    bit_index: int
    domain: Domain = Domain.F32

    def __post_init__(self):
        object.__setattr__(self, "domain", Domain(self.domain))
        _check_bit(self.bit_index, self.domain.width)
        if self.element_index < 0:
            raise ContractError(f"negative element index {self.element_index}")

    def to_dict(self) -> dict:
        return {"set": self.param_set_id, "element": self.element_index, "bit": self.bit_index, "domain": self.domain.value}

    @classmethod
    def from_dict(cls, d) -> "FaultSpec":
        return cls(d["set"], int(d["element"]), int(d["bit"]), Domain(d["domain"]))


@dataclass(frozen=True)
class UndoToken:
    param_set_id: str
    element_index: int
    original_bits: int
    flipped_bits: int
    domain: Domain


def element_bits(arr: np.ndarray, index: int) -> int:
    flat = arr.reshape(-1)
    return int(flat[index : index + 1].view(_UINT[Domain.of(arr)])[0])


def _write_bits(arr: np.ndarray, index: int, bits: int) -> None:
    flat = arr.reshape(-1)
    if not np.shares_memory(flat, arr):
        raise ContractError("parameter array must be contiguous to be perturbed in place")
    flat[index : index + 1].view(_UINT[Domain.of(arr)])[0] = bits


def _target(params, spec: FaultSpec) -> np.ndarray:
    if spec.param_set_id not in params:
        raise ContractError(f"unknown parameter set {spec.param_set_id!r}")
    arr = params[spec.param_set_id]
    if Domain.of(arr) is not spec.domain:
        raise ContractError(f"fault domain {spec.domain.value} does not match {spec.param_set_id!r} ({arr.dtype})")
    if spec.element_index >= arr.size:
        raise ContractError(f"element {spec.element_index} out of bounds for {spec.param_set_id!r} with {arr.size} elements")
    return arr


def apply_fault(params: MutableMapping[str, np.ndarray], spec: FaultSpec) -> UndoToken:
    """Flip one bit in place; the returned token restores it exactly."""
    arr = _target(params, spec)
    if not arr.flags.writeable:
        raise ContractError(f"parameter set {spec.param_set_id!r} is read-only; perturb a private copy")
    orig = element_bits(arr, spec.element_index)
    new = orig ^ (1 << spec.bit_index)
    _write_bits(arr, spec.element_index, new)
    return UndoToken(spec.param_set_id, spec.element_index, orig, new, spec.domain)


def undo_fault(params: MutableMapping[str, np.ndarray], token: UndoToken) -> None:
    _write_bits(params[token.param_set_id], token.element_index, token.original_bits)


def faulted_copy(params, spec: FaultSpec) -> tuple[dict[str, np.ndarray], UndoToken]:
    """Copy-on-write perturbation: a private copy of the targeted set only."""
    arr = _target(params, spec)
    private = {spec.param_set_id: np.array(arr, copy=True)}
    return private, apply_fault(private, spec)


@dataclass(frozen=True)
class FaultGroup:
    param_set_id: str
    bit: int | None
    population: int
    n: int


@dataclass
class FaultPlan:
    seed: int
    model_hash: str
    population_unit: str
    groups: list[FaultGroup] = field(default_factory=list)
    faults: list[FaultSpec] = field(default_factory=list)
    rng: str = RNG_NAME

    def __len__(self) -> int:
        return len(self.faults)

    def to_json(self) -> str:
        doc = {
            "seed": self.seed,
            "model_hash": self.model_hash,
            "population_unit": self.population_unit,
            "rng": self.rng,
            "groups": [asdict(g) for g in self.groups],
            "faults": [f.to_dict() for f in self.faults],
        }
        return json.dumps(doc, indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "FaultPlan":
        doc = json.loads(text)
        return cls(
            doc["seed"],
            doc["model_hash"],
            doc["population_unit"],
            [FaultGroup(**g) for g in doc["groups"]],
            [FaultSpec.from_dict(f) for f in doc["faults"]],
            doc.get("rng", RNG_NAME),
        )


def group_rng(seed: int, group: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(group,))))


def gen_fault_plan(
    model,
    bits: Sequence[int],
    per_group_n: int | Callable[[int], int] | None,
    seed: int,
    sets: Iterable[str] | None = None,
    population_unit: str = "set_bit",
) -> FaultPlan:
    """Sample distinct faults per (parameter set, bit) group.

    ``per_group_n`` is a fixed count, a function of the group population, or
    ``None`` for exhaustive enumeration; counts above the population fall
    back to exhaustive. With ``population_unit="set"`` each set is one group
    whose population is every (element, bit) pair. Bits outside a set's
    width (e.g. bit 30 of an int8 set) are skipped for that set. Each group
    draws from its own PCG64 stream derived from (seed, group index).
    """
    bits = list(bits)
    if not bits:
        raise ContractError("bit list is empty")
    if population_unit not in ("set_bit", "set"):
        raise ContractError(f"unknown population unit {population_unit!r}")
    wanted = None if sets is None else set(sets)
    descriptors = [ps for ps in model.param_sets() if wanted is None or ps.id in wanted]
    if wanted is not None and len(descriptors) != len(wanted):
        missing = wanted - {ps.id for ps in descriptors}
        raise ContractError(f"unknown parameter sets {sorted(missing)}")

    def size_for(population: int) -> int:
        if per_group_n is None:
            return population
        n = per_group_n(population) if callable(per_group_n) else int(per_group_n)
        return max(0, min(n, population))

    plan = FaultPlan(int(seed), model.fingerprint(), population_unit)
    gidx = 0
    for ps in descriptors:
        domain = Domain(ps.domain.upper())
        set_bits = [b for b in bits if 0 <= b < domain.width]
        if not set_bits:
            continue
        if population_unit == "set_bit":
            for b in set_bits:
                n = size_for(ps.count)
                picks = np.sort(group_rng(seed, gidx).choice(ps.count, size=n, replace=False))
                plan.groups.append(FaultGroup(ps.id, b, ps.count, n))
                plan.faults.extend(FaultSpec(ps.id, int(i), b, domain) for i in picks)
                gidx += 1
        else:
            population = ps.count * len(set_bits)
            n = size_for(population)
            picks = np.sort(group_rng(seed, gidx).choice(population, size=n, replace=False))
            plan.groups.append(FaultGroup(ps.id, None, population, n))
            plan.faults.extend(FaultSpec(ps.id, int(k) // len(set_bits), set_bits[int(k) % len(set_bits)], domain) for k in picks)
            gidx += 1
    return plan
