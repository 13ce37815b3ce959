"""
An fp32 campaign on a small U-Net
=================================

Builds a three-level U-Net with random weights, runs it on synthetic
multi-band images and injects faults into the sign and exponent bits of
every parameter set. ReLU and Sigmoid variants are compared.
"""

from seubench import (
    CampaignConfig,
    build_unet,
    init_weights,
    make_synthetic_dataset,
    msb_gap,
    plan_campaign,
    range_ratio_table,
    run_campaign,
    run_golden,
    summarize,
)

shape, classes = (32, 32, 4), 5
ds = make_synthetic_dataset(seed=1, count=2, shape=shape, classes=classes)

for af in ("relu", "sigmoid"):
    model = init_weights(build_unet(3, 8, shape, classes, af), seed=0)
    golden = run_golden(model, ds.images)
    # 20 faults per (set, bit) keeps this demo under a minute
    plan = plan_campaign(model, CampaignConfig(n_override=20, bits=(31, 30, 29, 23), seed=0))
    report = summarize(run_campaign(model, plan, golden), model)
    print(f"\n{af}: {len(plan)} injections, mean pixel change {report.model.mean_rate:.3f} %")
    for bit in report.bits:
        rates = [s.mean_rate for (sid, b), s in report.grid.items() if b == bit]
        print(f"  bit {bit}: worst set {max(rates):6.2f} %")

    ###########################################################################
    # MSB error rate minus the share of values in (1, 2). Random weights
    # rarely reach 1, but a bit-30 flip still scales a small weight by
    # 2**128, so early layers show large positive gaps under ReLU.
    gaps = msb_gap(report, range_ratio_table(model))
    worst = sorted(gaps.items(), key=lambda kv: -abs(kv[1]))[:3]
    print("  largest MSB gaps:", [(sid, round(g, 1)) for sid, g in worst])
