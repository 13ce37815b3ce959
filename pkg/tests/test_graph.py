import numpy as np
import pytest
from conftest import desk_model, random_images, tiny_model
from hypothesis import given, settings
from hypothesis import strategies as st

from seubench import tensor as T
from seubench.errors import BuildError, ContractError
from seubench.graph import (
    INPUT,
    LayerKind,
    LayerSpec,
    ParamKind,
    build_unet,
    count_params_flops,
    enumerate_param_sets,
    flops_breakdown,
    fold_batchnorm,
    forward,
    graph_from_layers,
    init_weights,
    param_id,
    run_layers,
)


def unet_param_count(levels, base, cin, classes):
    """Closed-form count: per conv block 9*ci*co + co + 4*co (conv, bias, BN)."""
    total, prev = 0, cin
    for i in range(levels + 1):
        f = base * 2**i
        total += (9 * prev * f + f + 4 * f) + (9 * f * f + f + 4 * f)
        prev = f
    for i in reversed(range(levels)):
        f = base * 2**i
        total += 4 * prev * f + f  # 2x2 transposed conv
        total += (9 * 2 * f * f + f + 4 * f) + (9 * f * f + f + 4 * f)
        prev = f
    return total + prev * classes + classes


def test_hand_counted_small_unet():
    model = build_unet(2, 1, (4, 4, 1), 2)
    params, _ = count_params_flops(model)
    assert params == 570
    assert unet_param_count(2, 1, 1, 2) == 570


@settings(max_examples=15, deadline=None)
@given(st.integers(1, 3), st.integers(1, 4), st.integers(1, 5), st.integers(1, 6))
def test_param_accounting(levels, base, cin, classes):
    side = 2**levels
    model = build_unet(levels, base, (side, 2 * side, cin), classes)
    params, _ = count_params_flops(model)
    assert params == sum(ps.count for ps in enumerate_param_sets(model))
    assert params == unet_param_count(levels, base, cin, classes)


def test_full_scale_accounting():
    model = build_unet(5, 32, (192, 384, 25), 5)
    params, flops = count_params_flops(model)
    assert params == 31_125_029
    assert abs(params - 31.13e6) / 31.13e6 < 0.02
    assert flops == 34_590_523_392


def test_skip_pairing_and_order():
    model = build_unet(3, 2, (8, 8, 1), 2)
    for i in range(3):
        concat = model.layer(f"dec{i}_concat")
        assert concat.inputs == (f"enc{i}_act2", f"dec{i}_up")
    ids = [layer.id for layer in model.layers]
    for layer in model.layers:
        for src in layer.inputs:
            assert src == INPUT or ids.index(src) < ids.index(layer.id)


def test_indivisible_extents():
    with pytest.raises(BuildError, match="divisible"):
        build_unet(3, 2, (12, 16, 1), 2)
    with pytest.raises(BuildError):
        build_unet(0, 2, (8, 8, 1), 2)


def test_graph_build_errors():
    conv = LayerSpec("c", LayerKind.CONV, (INPUT,), {"filters": 2, "kernel": 3})
    with pytest.raises(BuildError, match="duplicate"):
        graph_from_layers([conv, conv], (4, 4, 1), 2)
    with pytest.raises(BuildError, match="not defined"):
        graph_from_layers([LayerSpec("c", LayerKind.CONV, ("x",), {"filters": 2})], (4, 4, 1), 2)
    pool = LayerSpec("p", LayerKind.MAXPOOL, (INPUT,))
    cat = LayerSpec("k", LayerKind.CONCAT, (INPUT, "p"))
    with pytest.raises(BuildError, match="spatial"):
        graph_from_layers([pool, cat], (4, 4, 2), 4)


def test_small_count_and_flops_scaling():
    conv = LayerSpec("c", LayerKind.OUTPUT_CONV, (INPUT,), {"filters": 2, "kernel": 3})
    model = graph_from_layers([conv], (4, 4, 1), 2)
    params, flops = count_params_flops(model)
    assert params == 20
    _, flops2 = count_params_flops(model, (8, 8, 1))
    assert flops2 == 4 * flops == 4 * 2 * 9 * 2 * 16


def test_single_conv_bn_has_six_sets():
    layers = [
        LayerSpec("c", LayerKind.CONV, (INPUT,), {"filters": 2}),
        LayerSpec("b", LayerKind.BATCHNORM, ("c",)),
    ]
    model = graph_from_layers(layers, (4, 4, 1), 2)
    kinds = [ps.kind for ps in enumerate_param_sets(model)]
    assert kinds == list(ParamKind)
    assert enumerate_param_sets(model) == enumerate_param_sets(model)


def test_full_scale_set_count():
    model = build_unet(5, 32, (32, 32, 25), 5)
    convs = sum(layer.kind in (LayerKind.CONV, LayerKind.CONV_TRANSPOSE) for layer in model.layers)
    bns = sum(layer.kind is LayerKind.BATCHNORM for layer in model.layers)
    assert len(enumerate_param_sets(model)) == 2 * convs + 4 * bns + 2


def test_zero_weights_give_class_zero():
    model = build_unet(2, 2, (8, 8, 3), 4)
    logits, classes = forward(model, np.random.default_rng(0).normal(size=(8, 8, 3)))
    assert not logits.any()
    assert not classes.any()


def test_forward_shape_mismatch():
    model = build_unet(2, 2, (8, 8, 3), 4)
    with pytest.raises(ContractError, match="shape"):
        forward(model, np.zeros((8, 8, 2)))


def interpret(model, image):
    """Independent straight-line interpreter over the layer list."""
    acts = {INPUT: image}
    p = model.params
    for layer in model.layers:
        x = acts[layer.inputs[0]]
        a = layer.attrs
        if layer.kind in (LayerKind.CONV, LayerKind.OUTPUT_CONV):
            y = T.conv2d(x, p[f"{layer.id}/kernel"], p[f"{layer.id}/bias"], a.get("stride", 1), a.get("padding", "same"))
        elif layer.kind is LayerKind.CONV_TRANSPOSE:
            y = T.conv2d_transpose(x, p[f"{layer.id}/kernel"], p[f"{layer.id}/bias"], a.get("stride", 2))
        elif layer.kind is LayerKind.BATCHNORM:
            y = T.batchnorm_infer(x, *(p[f"{layer.id}/{k}"] for k in ("gamma", "beta", "mean", "var")), a.get("eps", 1e-3))
        elif layer.kind is LayerKind.ACTIVATION:
            y = T.apply_activation(x, a["activation"])
        elif layer.kind is LayerKind.MAXPOOL:
            y = T.maxpool2d(x)
        else:
            y = T.concat_channels(x, acts[layer.inputs[1]])
        acts[layer.id] = y
    return acts[model.output_id]


@pytest.mark.parametrize("af", ["relu", "sigmoid", "hard_sigmoid"])
def test_forward_matches_interpreter(af):
    model = desk_model(af, levels=2, base=4, shape=(16, 16, 3), classes=4)
    image = random_images(1, (16, 16, 3))[0]
    logits, classes = forward(model, image)
    assert np.array_equal(logits, interpret(model, image))
    assert np.array_equal(classes, T.argmax_channels(logits))
    again, _ = forward(model, image)
    assert np.array_equal(logits, again)


def test_reuse_from_any_layer_matches_full_run():
    model = desk_model(levels=2, base=4, shape=(16, 16, 3), classes=4)
    image = random_images(1, (16, 16, 3))[0]
    full = run_layers(model, image)
    for start in (0, 5, len(model.layers) - 1):
        part = run_layers(model, None, reuse=full, start=start)
        assert np.array_equal(part[model.output_id], full[model.output_id])


def test_init_weights_deterministic():
    model = build_unet(2, 2, (8, 8, 1), 2)
    a, b, c = init_weights(model, 3), init_weights(model, 3), init_weights(model, 4)
    assert a.fingerprint() == b.fingerprint() != c.fingerprint()
    assert np.all(a.params["enc0_bn1/gamma"] == 1.0)
    assert np.all(a.params["enc0_bn1/var"] == 1.0)
    assert not a.params["enc0_bn1/beta"].any()
    g = init_weights(model, 3, "glorot").params["enc1_conv1/kernel"]
    lim = np.sqrt(6 / (9 * 2 + 9 * 4))
    assert np.all(np.abs(g) <= lim)


def test_params_are_read_only():
    model = desk_model(levels=1, base=2, shape=(4, 4, 1), classes=2)
    with pytest.raises(ValueError):
        model.params["enc0_conv1/kernel"][0, 0, 0, 0] = 1.0


def _random_bn(model, seed):
    rng = np.random.default_rng(seed)
    new = {}
    for ps in model.param_sets():
        if ps.kind in (ParamKind.GAMMA, ParamKind.VAR):
            new[ps.id] = rng.uniform(0.5, 1.5, ps.shape).astype(np.float32)
        elif ps.kind in (ParamKind.BETA, ParamKind.MEAN):
            new[ps.id] = rng.normal(0, 0.2, ps.shape).astype(np.float32)
    return model.replace(new)


def test_fold_identity_bn_is_exact():
    layers = [
        LayerSpec("c", LayerKind.CONV, (INPUT,), {"filters": 3}),
        LayerSpec("b", LayerKind.BATCHNORM, ("c",), {"eps": 0.0}),
        LayerSpec("head", LayerKind.OUTPUT_CONV, ("b",), {"filters": 2, "kernel": 1}),
    ]
    model = init_weights(graph_from_layers(layers, (6, 6, 2), 2), 1)
    folded = fold_batchnorm(model)
    assert not any(ps.kind is ParamKind.GAMMA for ps in folded.param_sets())
    assert np.array_equal(folded.params["c/kernel"], model.params["c/kernel"])
    image = random_images(1, (6, 6, 2))[0]
    assert np.array_equal(forward(model, image)[0], forward(folded, image)[0])


def test_fold_single_layer_within_accumulation_bound():
    model = tiny_model(3)
    folded = fold_batchnorm(model)
    image = random_images(1, (8, 8, 2), seed=4)[0]
    ref = run_layers(model, image)["bn1"]
    got = run_layers(folded, image)["c1"]
    # each path rounds at most n + 3 times; bound both by gamma_n * sum |terms|
    k64 = model.params["c1/kernel"].astype(np.float64)
    scale = model.params["bn1/gamma"] / np.sqrt(model.params["bn1/var"].astype(np.float64) + 1e-3)
    mag = T.conv2d(np.abs(image), np.abs(k64 * scale).astype(np.float32), np.zeros(4, np.float32)).astype(np.float64)
    mag += np.abs(scale * (model.params["c1/bias"] - model.params["bn1/mean"])) + np.abs(model.params["bn1/beta"])
    n = 3 * 3 * 2 + 3
    u = 2.0**-24
    bound = 2 * (n * u / (1 - n * u)) * (mag + np.abs(ref))
    assert np.all(np.abs(got.astype(np.float64) - ref) <= bound)


@pytest.mark.parametrize("af", ["relu", "sigmoid", "hard_sigmoid"])
def test_fold_full_model_matches(af):
    model = _random_bn(desk_model(af), 5)
    folded = fold_batchnorm(model)
    assert folded.meta["folded"]
    for image in random_images(2, (32, 32, 4), seed=11):
        a, ca = forward(model, image)
        b, cb = forward(folded, image)
        tol = 1e-4 * np.abs(a).max()
        assert np.abs(a - b).max() <= tol
        top2 = np.sort(a, axis=2)[..., -2:]
        clear = (top2[..., 1] - top2[..., 0]) > 2 * tol
        assert np.array_equal(ca[clear], cb[clear])


def test_fold_rejects_bn_without_conv():
    layers = [
        LayerSpec("b", LayerKind.BATCHNORM, (INPUT,)),
        LayerSpec("head", LayerKind.OUTPUT_CONV, ("b",), {"filters": 2, "kernel": 1}),
    ]
    with pytest.raises(BuildError, match="does not follow"):
        fold_batchnorm(graph_from_layers(layers, (4, 4, 2), 2))


def test_flops_breakdown_kinds():
    model = build_unet(1, 2, (4, 4, 1), 2)
    fl = flops_breakdown(model)
    assert fl["enc0_conv1"] == 2 * 9 * 1 * 2 * 16
    assert fl["enc0_bn1"] == 2 * 16 * 2
    assert fl["enc0_act1"] == 16 * 2
    assert fl["enc0_pool"] == 16 * 2
    assert fl["dec0_up"] == 2 * 4 * 4 * 2 * 4
    assert fl["dec0_concat"] == 0


def test_fingerprint_tracks_parameters():
    model = tiny_model()
    k = np.array(model.params[param_id("c1", "kernel")])
    k[0, 0, 0, 0] += 1
    assert model.replace({param_id("c1", "kernel"): k}).fingerprint() != model.fingerprint()
