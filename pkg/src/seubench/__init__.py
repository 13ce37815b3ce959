"""Bit-flip fault injection and vulnerability analysis for U-Net segmentation models."""

__version__ = "0.1.0"

from .campaign import (
    CampaignConfig,
    GoldenResult,
    InjectionRecord,
    VulnerabilityReport,
    plan_campaign,
    required_sample_size,
    run_campaign,
    run_golden,
    summarize,
)
from .data import Dataset, load_dataset, make_synthetic_dataset, save_dataset
from .errors import (
    BuildError,
    ContractError,
    ExtentMismatchError,
    ManifestError,
    ModelFormatError,
    PlanMismatchError,
    SeuBenchError,
    TruncatedBlobError,
    UnreachableTargetError,
)
from .faults import Domain, FaultPlan, FaultSpec, apply_fault, faulted_copy, flip_bit_f32, flip_bit_int, gen_fault_plan, undo_fault
from .graph import (
    LayerKind,
    LayerSpec,
    ModelGraph,
    ParamKind,
    build_unet,
    count_params_flops,
    enumerate_param_sets,
    fold_batchnorm,
    forward,
    init_weights,
)
from .metrics import class_iou, global_iou, iou_per_class, msb_gap, range_ratio, range_ratio_table, weighted_iou
from .modelio import load_model, save_model
from .pruning import allocate_ratios, iterative_prune, prune_channels, sensitivity_sweep
from .quant import QuantModel, calibrate, dequantize, quant_forward, quantize_model, quantize_tensor
from .tensor import ActivationKind
