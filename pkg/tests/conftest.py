import numpy as np
import pytest

from seubench.graph import LayerKind, LayerSpec, build_unet, graph_from_layers, init_weights, param_id


def desk_model(af="relu", seed=0, levels=3, base=8, shape=(32, 32, 4), classes=5):
    return init_weights(build_unet(levels, base, shape, classes, af), seed)


def random_images(n, shape, seed=0):
    rng = np.random.default_rng(seed)
    return [rng.normal(size=shape).astype(np.float32) for _ in range(n)]


def tiny_model(seed=0, af="relu"):
    """conv3x3 2->4, BN, AF, 1x1 output conv 4->3 on an 8x8x2 input: 107 parameters."""
    layers = [
        LayerSpec("c1", LayerKind.CONV, ("input",), {"filters": 4, "kernel": 3}),
        LayerSpec("bn1", LayerKind.BATCHNORM, ("c1",), {"eps": 1e-3}),
        LayerSpec("act1", LayerKind.ACTIVATION, ("bn1",), {"activation": af}),
        LayerSpec("head", LayerKind.OUTPUT_CONV, ("act1",), {"filters": 3, "kernel": 1}),
    ]
    model = init_weights(graph_from_layers(layers, (8, 8, 2), 3, {"activation": af}), seed)
    rng = np.random.default_rng(seed + 1000)
    new = {
        param_id("c1", "bias"): rng.normal(0, 0.1, 4).astype(np.float32),
        param_id("bn1", "gamma"): rng.uniform(0.8, 1.6, 4).astype(np.float32),
        param_id("bn1", "beta"): rng.normal(0, 0.1, 4).astype(np.float32),
        param_id("bn1", "mean"): rng.normal(0, 0.1, 4).astype(np.float32),
        param_id("bn1", "var"): rng.uniform(0.5, 1.5, 4).astype(np.float32),
        param_id("head", "bias"): rng.normal(0, 0.1, 3).astype(np.float32),
    }
    return model.replace(new)


@pytest.fixture(scope="session")
def relu_model():
    return desk_model("relu")


@pytest.fixture(scope="session")
def desk_images():
    return random_images(2, (32, 32, 4), seed=7)


ACCEPTANCE_LINES: list[str] = []


def report_criterion(number, title, ok, detail=""):
    """Record a PASS/FAIL line for the terminal summary, then assert."""
    line = f"{'PASS' if ok else 'FAIL'} criterion {number}: {title}" + (f" ({detail})" if detail else "")
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
