"""
Integer-only inference and its fault profile
============================================

Batch norm is folded into the convolutions, activations are calibrated
on a few images, and the whole network then runs on int8 activations,
int8 weights and int32 biases. Bit flips in integers cannot make
infinities or NaN, so the error profile is flatter than in fp32.
"""

import numpy as np

from seubench import (
    CampaignConfig,
    build_unet,
    calibrate,
    fold_batchnorm,
    forward,
    global_iou,
    init_weights,
    make_synthetic_dataset,
    plan_campaign,
    quant_forward,
    quantize_model,
    run_campaign,
    run_golden,
    summarize,
)

shape, classes = (32, 32, 4), 5
ds = make_synthetic_dataset(seed=1, count=3, shape=shape, classes=classes)
model = init_weights(build_unet(3, 8, shape, classes, "hard_sigmoid"), seed=0)
folded = fold_batchnorm(model)
print("fold max |logit diff|:", float(np.max(np.abs(forward(model, ds.images[0])[0] - forward(folded, ds.images[0])[0]))))

qm = quantize_model(folded, calibrate(folded, ds.images))
fp = [forward(model, im)[1] for im in ds.images]
q = [quant_forward(qm, im).classes for im in ds.images]
print(f"int8 vs fp32 agreement (GIoU): {global_iou(q, fp, classes):.2f}")

###############################################################################
# Weights live in int8 (bits 7..0) and biases in int32; the plan skips
# bits a set does not have.

config = CampaignConfig(n_override=20, bits=(31, 30, 7, 6), variant="int8")
records = run_campaign(qm, plan_campaign(qm, config), run_golden(qm, ds.images[:2]))
report = summarize(records, qm)
worst = sorted(report.grid.items(), key=lambda kv: -kv[1].mean_rate)[:8]
for (sid, bit), s in worst:
    print(f"{sid:24s} bit {bit:2d}: {s.mean_rate:6.2f} % mean, {s.critical_fraction:.2f} critical")
print("saturated injections:", sum(r.saturated for r in records))
