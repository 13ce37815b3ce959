"""Command-line pipeline: dataset, model, golden run, quantize, prune, campaign, report.

Every command reads a JSON config (``--config``) and works inside one output
directory::

    <out>/dataset/            synthetic images and label maps
    <out>/model/              fp32 model
    <out>/qmodel/             int8 model (BN folded)
    <out>/pruned/             pruned fp32 model, sensitivity.csv, allocation.csv
    <out>/golden-<variant>/   golden class maps and metrics
    <out>/campaign-<variant>/ plan.json, records.csv
    <out>/report-<variant>/   summary_grid.csv, summary.json, msb_gap.csv

Exit codes: 0 ok, 2 config error, 3 data error, 4 internal invariant failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from statistics import NormalDist

import numpy as np

from . import __version__
from .campaign import (
    default_jobs,
    plan_campaign,
    required_sample_size,
    run_campaign,
    run_golden,
    summarize,
)
from .config import ConfigError, campaign_config, config_hash, load_config
from .data import load_dataset, make_synthetic_dataset, save_dataset
from .errors import BuildError, ContractError, ModelFormatError, PlanMismatchError, UnreachableTargetError
from .faults import RNG_NAME, FaultPlan
from .graph import build_unet, count_params_flops, fold_batchnorm, init_weights
from .metrics import msb_rows, range_ratio_table, segmentation_summary
from .modelio import MANIFEST, atomic_write_text, dump_json, load_model, save_model, write_blob
from .pruning import iterative_prune, prune_channels
from .quant import calibrate, load_quant_model, quantize_model, save_quant_model
from .reporting import allocation_csv, grid_csv, msb_csv, json_safe, read_records, sensitivity_csv, summary_json, write_records

log = logging.getLogger("seubench")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_INTERNAL = 0, 2, 3, 4
MODEL_DIRS = {"fp32": "model", "fp32-pruned": "pruned", "int8": "qmodel"}


class DataError(Exception):
    """Inputs referenced by the config are missing or unusable."""


class Run:
    """Resolved config plus output layout for one invocation."""

    def __init__(self, args):
        self.cfg = load_config(args.config)
        if getattr(args, "seed", None) is not None:
            self.cfg["model"]["seed"] = args.seed
            self.cfg["campaign"]["seed"] = args.seed
            self.cfg["data"]["seed"] = args.seed
        if getattr(args, "n_override", None) is not None:
            if args.n_override < 1:
                raise ConfigError("--n-override must be positive")
            self.cfg["campaign"]["n_override"] = args.n_override
        if getattr(args, "variant", None) is not None:
            self.cfg["campaign"]["variant"] = args.variant
        try:
            campaign_config(self.cfg)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        self.out = Path(args.output_dir or self.cfg["io"]["output_dir"])
        self.jobs = args.jobs if getattr(args, "jobs", None) else default_jobs()
        self.hash = config_hash(self.cfg)

    @property
    def variant(self) -> str:
        return self.cfg["campaign"]["variant"]

    def dataset_dir(self) -> Path:
        return Path(self.cfg["io"]["dataset"]) if self.cfg["io"]["dataset"] else self.out / "dataset"

    def dataset(self):
        path = self.dataset_dir()
        if not (path / MANIFEST).is_file():
            raise DataError(f"no dataset at {path}; run make-dataset first")
        ds = load_dataset(path)
        shape = tuple(self.cfg["model"]["input_shape"])
        if ds.images[0].shape != shape:
            raise DataError(f"dataset images are {ds.images[0].shape}, model expects {shape}")
        return ds

    def model(self, variant: str):
        path = self.out / MODEL_DIRS[variant]
        if not (path / MANIFEST).is_file():
            hint = {"fp32": "init-model", "fp32-pruned": "prune", "int8": "quantize"}[variant]
            raise DataError(f"no {variant} model at {path}; run {hint} first")
        return load_quant_model(path) if variant == "int8" else load_model(path)

    def meta(self, command: str, model_hash: str, seed: int, **extra) -> dict:
        return {
            "command": command,
            "config_hash": self.hash,
            "model_hash": model_hash,
            "seed": seed,
            "tool_version": __version__,
            **extra,
        }

    def provenance(self, directory: Path, meta: dict, **extra) -> None:
        atomic_write_text(directory / "provenance.json", dump_json({**meta, **extra}))


def _take(items, n):
    return list(items) if n is None else list(items)[:n]


def cmd_sample_size(args) -> int:
    for name, value in (("margin", args.margin), ("confidence", args.confidence), ("p", args.p)):
        if not 0 < value < 1:
            raise ConfigError(f"--{name} must lie strictly between 0 and 1, got {value}")
    population = None if args.population is None else args.population
    n = required_sample_size(population, args.margin, args.confidence, args.p)
    t = NormalDist().inv_cdf(1 - (1 - args.confidence) / 2)
    print(f"population: {'infinite' if population is None else population}")
    print(f"margin: {args.margin}")
    print(f"confidence: {args.confidence}")
    print(f"p: {args.p}")
    print(f"t: {t:.6f}")
    if args.n_override is not None:
        if args.n_override < 1:
            raise ConfigError("--n-override must be positive")
        print(f"n: {args.n_override} (override; formula gives {n})")
    else:
        print(f"n: {n}")
    return EXIT_OK


def cmd_make_dataset(args) -> int:
    run = Run(args)
    d, m = run.cfg["data"], run.cfg["model"]
    ds = make_synthetic_dataset(d["seed"], d["count"], tuple(m["input_shape"]), m["classes"], d["seeds_per_class"], d["noise"])
    path = save_dataset(ds, run.dataset_dir())
    run.provenance(path, run.meta("make-dataset", "", d["seed"]))
    log.info("wrote %d images to %s", len(ds), path)
    return EXIT_OK


def cmd_init_model(args) -> int:
    run = Run(args)
    m = run.cfg["model"]
    if m["weights"]:
        model = load_model(m["weights"])
        if list(model.input_shape) != m["input_shape"] or model.classes != m["classes"]:
            raise DataError(f"weights at {m['weights']} do not match model.input_shape/classes")
    else:
        model = build_unet(m["levels"], m["base_filters"], tuple(m["input_shape"]), m["classes"], m["activation"], m["bn_eps"])
        model = init_weights(model, m["seed"], m["init"])
    path = save_model(model, run.out / "model")
    params, flops = count_params_flops(model)
    run.provenance(path, run.meta("init-model", model.fingerprint(), m["seed"]), params=params, flops=flops)
    print(f"model: {params} parameters, {flops} FLOPs, hash {model.fingerprint()[:16]}")
    return EXIT_OK


def cmd_golden(args) -> int:
    run = Run(args)
    model = run.model(run.variant)
    ds = run.dataset()
    n = run.cfg["campaign"]["images"]
    images, labels = _take(ds.images, n), _take(ds.labels, n)
    golden = run_golden(model, images, keep_activations=False)
    path = run.out / f"golden-{run.variant}"
    path.mkdir(parents=True, exist_ok=True)
    entries = [write_blob(path, f"classes{i:04d}", c.astype(np.uint8), "u8") for i, c in enumerate(golden.classes)]
    metrics = segmentation_summary(golden.classes, labels, model.classes)
    meta = run.meta("golden", model.fingerprint(), run.cfg["campaign"]["seed"], variant=run.variant)
    doc = {
        "version": 1,
        "kind": "golden",
        "meta": meta,
        "classes": entries,
        "class_counts": [c.tolist() for c in golden.class_counts],
        "total_pixels": golden.total_pixels,
        "metrics": metrics,
        "wiou_frequencies": "ground-truth pixel counts of the evaluation images",
    }
    atomic_write_text(path / MANIFEST, dump_json(json_safe(doc)))
    print(f"golden {run.variant}: GIoU {metrics['global']:.2f} WIoU {metrics['weighted']:.2f}")
    return EXIT_OK


def cmd_quantize(args) -> int:
    run = Run(args)
    model = run.model("fp32")
    ds = run.dataset()
    folded = fold_batchnorm(model)
    ranges = calibrate(folded, _take(ds.images, run.cfg["quantize"]["calibration_images"]))
    qm = quantize_model(folded, ranges)
    path = save_quant_model(qm, run.out / "qmodel")
    run.provenance(path, run.meta("quantize", qm.fingerprint(), run.cfg["model"]["seed"]), source_model_hash=model.fingerprint())
    print(f"quantized model hash {qm.fingerprint()[:16]}")
    return EXIT_OK


def cmd_prune(args) -> int:
    run = Run(args)
    p = run.cfg["prune"]
    model = run.model("fp32")
    ds = run.dataset()
    images = _take(ds.images, p["images"])
    gts = _take(ds.labels, p["images"]) if p["reference"] == "labels" else None
    try:
        result = iterative_prune(model, images, p["targets"], gts, p["tolerance"])
    except UnreachableTargetError as exc:
        raise ConfigError(str(exc)) from None
    # the allocation must reproduce the saved model exactly
    replay = model
    for it in result.iterations:
        replay = prune_channels(replay, it.allocation)
    if replay.fingerprint() != result.model.fingerprint():
        raise BuildError("pruned model is not reproducible from its allocations")
    path = save_model(result.model, run.out / "pruned")
    meta = run.meta("prune", result.model.fingerprint(), run.cfg["model"]["seed"], source_model_hash=model.fingerprint())
    atomic_write_text(path / "sensitivity.csv", sensitivity_csv([it.table for it in result.iterations], meta))
    atomic_write_text(path / "allocation.csv", allocation_csv([it.allocation for it in result.iterations], meta))
    run.provenance(
        path,
        meta,
        targets=p["targets"],
        reference=p["reference"],
        achieved=[it.allocation.reduction for it in result.iterations],
        total_reduction=result.total_reduction,
        baseline_giou=result.baseline_giou,
        final_giou=result.iterations[-1].giou,
        max_degradation=p["max_degradation"],
        passes_gate=result.passes_gate(p["max_degradation"]),
    )
    print(f"pruned: total FLOPs reduction {result.total_reduction:.4f}, GIoU {result.iterations[-1].giou:.2f}")
    return EXIT_OK


def cmd_campaign(args) -> int:
    run = Run(args)
    cc = campaign_config(run.cfg)
    model = run.model(run.variant)
    if cc.param_sets is not None:
        known = {ps.id for ps in model.param_sets()}
        unknown = sorted(set(cc.param_sets) - known)
        if unknown:
            raise ConfigError(f"campaign.param_sets names unknown sets {unknown}")
    ds = run.dataset()
    images = _take(ds.images, run.cfg["campaign"]["images"])
    path = run.out / f"campaign-{run.variant}"
    if args.plan:
        plan = FaultPlan.from_json(Path(args.plan).read_text())
    else:
        plan = plan_campaign(model, cc)
    golden = run_golden(model, images)
    records = run_campaign(model, plan, golden, jobs=run.jobs)
    if len(records) != len(plan):
        raise BuildError("record count differs from plan size")
    meta = run.meta(
        "campaign", model.fingerprint(), plan.seed,
        variant=run.variant, rng=RNG_NAME, population_unit=plan.population_unit,
    )
    path.mkdir(parents=True, exist_ok=True)
    atomic_write_text(path / "plan.json", plan.to_json())
    write_records(path / "records.csv", records, meta)
    run.provenance(path, meta, faults=len(plan), groups=len(plan.groups))
    print(f"campaign {run.variant}: {len(records)} injections")
    return EXIT_OK


def cmd_report(args) -> int:
    run = Run(args)
    records_path = Path(args.records) if args.records else run.out / f"campaign-{run.variant}" / "records.csv"
    if not records_path.is_file():
        raise DataError(f"no records at {records_path}; run campaign first")
    meta, records = read_records(records_path)
    if not records:
        raise DataError(f"{records_path} holds no records")
    variant = meta.get("variant", run.variant)
    model = run.model(variant)
    if meta.get("model_hash") and meta["model_hash"] != model.fingerprint():
        raise PlanMismatchError("records were produced by a different model")
    report = summarize(records, model)
    out_meta = run.meta("report", model.fingerprint(), int(meta.get("seed", run.cfg["campaign"]["seed"])),
                        variant=variant, rng=meta.get("rng", RNG_NAME), population_unit=meta.get("population_unit", ""))
    path = run.out / f"report-{variant}"
    path.mkdir(parents=True, exist_ok=True)
    atomic_write_text(path / "summary_grid.csv", grid_csv(report, out_meta))
    extra = {"config": run.cfg["campaign"], "records": len(records)}
    if variant != "int8":
        ratios = range_ratio_table(model)
        metric = run.cfg["campaign"]["msb_metric"]
        try:
            rows = msb_rows(report, ratios, metric)
        except ContractError:
            rows = []
        if rows:
            atomic_write_text(path / "msb_gap.csv", msb_csv(rows, dict(out_meta, msb_metric=metric)))
        extra["range_ratios"] = ratios
    atomic_write_text(path / "summary.json", summary_json(report, out_meta, extra))
    print(f"report {variant}: {len(records)} records, model mean rate {report.model.mean_rate:.4f}%")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="seubench", description="Soft-error fault-injection benchmark for segmentation CNNs.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("sample-size", help="injections needed for a margin/confidence")
    p.add_argument("--margin", type=float, default=0.025)
    p.add_argument("--confidence", type=float, default=0.95)
    p.add_argument("--p", type=float, default=0.5)
    p.add_argument("--population", type=int, default=None, help="finite population size (default infinite)")
    p.add_argument("--n-override", type=int, default=None)
    p.set_defaults(func=cmd_sample_size)

    def common(name, func, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", default=None)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--jobs", type=int, default=None)
        p.add_argument("--output-dir", default=None)
        p.add_argument("--n-override", type=int, default=None)
        p.add_argument("--variant", choices=sorted(MODEL_DIRS), default=None)
        p.set_defaults(func=func)
        return p

    common("make-dataset", cmd_make_dataset, "generate the synthetic dataset")
    common("init-model", cmd_init_model, "build and initialise the fp32 model")
    common("golden", cmd_golden, "fault-free predictions and segmentation metrics")
    common("quantize", cmd_quantize, "fold BN, calibrate and quantize to int8")
    common("prune", cmd_prune, "sensitivity sweep and FLOPs-targeted channel pruning")
    common("campaign", cmd_campaign, "run a fault-injection campaign").add_argument("--plan", default=None)
    common("report", cmd_report, "summarize a records file").add_argument("--records", default=None)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, UnreachableTargetError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (PlanMismatchError, BuildError) as exc:
        print(f"invariant failure: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    except (DataError, ModelFormatError, ContractError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
