"""Reference fp32 kernels for single-image (H x W x C) inference.

Tensors are plain ``numpy`` arrays. Activations use H x W x C layout,
convolution kernels Kh x Kw x Cin x Cout. Every kernel is a pure function
and is deterministic down to the bit: convolutions accumulate in fp32 in
the fixed order kernel-row, kernel-col, input-channel and add the bias last,
so a naive scalar loop in the same order reproduces them exactly.

Injected faults produce NaN and infinities on purpose, so floating point
warnings are silenced inside the kernels.
"""

from __future__ import annotations

import enum

import numba
import numpy as np

from .errors import ContractError

DEFAULT_BN_EPS = 1e-3
HARD_SIGMOID_SLOPE = np.float32(0.2)
HARD_SIGMOID_OFFSET = np.float32(0.5)


class ActivationKind(str, enum.Enum):
    RELU = "relu"
    SIGMOID = "sigmoid"
    HARD_SIGMOID = "hard_sigmoid"

    @property
    def bounded(self) -> bool:
        return self is not ActivationKind.RELU


# Compiled without fastmath: every multiply and add is rounded to fp32 in
# program order, so results match a scalar Python loop bit for bit.
@numba.njit(cache=True)
def _conv_core(xp, kernel, bias, oh, ow, stride):
    kh, kw, cin, cout = kernel.shape
    out = np.empty((oh, ow, cout), np.float32)
    acc = np.empty(cout, np.float32)
    for y in range(oh):
        for x in range(ow):
            acc[:] = 0
            for i in range(kh):
                for j in range(kw):
                    for c in range(cin):
                        v = xp[y * stride + i, x * stride + j, c]
                        for o in range(cout):
                            acc[o] += v * kernel[i, j, c, o]
            for o in range(cout):
                out[y, x, o] = acc[o] + bias[o]
    return out


@numba.njit(cache=True)
def _conv_transpose_core(x, kernel, bias, stride):
    h, w, cin = x.shape
    kh, kw, _, cout = kernel.shape
    oh, ow = h * stride, w * stride
    out = np.zeros((oh, ow, cout), np.float32)
    for i in range(kh):
        for j in range(kw):
            for c in range(cin):
                for y in range(h):
                    ty = y * stride + i
                    if ty >= oh:
                        continue
                    for xx in range(w):
                        tx = xx * stride + j
                        if tx >= ow:
                            continue
                        v = x[y, xx, c]
                        for o in range(cout):
                            out[ty, tx, o] += v * kernel[i, j, c, o]
    for y in range(oh):
        for xx in range(ow):
            for o in range(cout):
                out[y, xx, o] += bias[o]
    return out


def _as_hwc(x, name="input") -> np.ndarray:
    x = np.asarray(x, dtype=np.float32)
    if x.ndim != 3 or min(x.shape[:2]) < 1:
        raise ContractError(f"{name} must be H x W x C with H, W >= 1, got shape {x.shape}")
    return x


def _same_padding(size: int, k: int, stride: int) -> tuple[int, int, int]:
    out = -(-size // stride)
    total = max((out - 1) * stride + k - size, 0)
    return out, total // 2, total - total // 2


def conv2d(x, kernel, bias, stride: int = 1, padding: str = "same") -> np.ndarray:
    """2-D convolution (cross-correlation) of one H x W x Cin image.

    Padding follows the usual framework convention: ``same`` gives
    ceil(H / stride) outputs with the extra pad row/col at the bottom/right,
    ``valid`` uses no padding.
    """
    x = _as_hwc(x)
    kernel = np.asarray(kernel, dtype=np.float32)
    bias = np.asarray(bias, dtype=np.float32)
    if kernel.ndim != 4:
        raise ContractError(f"kernel must be Kh x Kw x Cin x Cout, got shape {kernel.shape}")
    kh, kw, cin, cout = kernel.shape
    if cin != x.shape[2]:
        raise ContractError(f"kernel shape {kernel.shape} does not match input shape {x.shape}")
    if bias.shape != (cout,):
        raise ContractError(f"bias shape {bias.shape} does not match kernel shape {kernel.shape}")
    if stride < 1:
        raise ContractError(f"stride must be positive, got {stride}")
    h, w = x.shape[:2]
    if padding == "same":
        oh, pt, pb = _same_padding(h, kh, stride)
        ow, pl, pr = _same_padding(w, kw, stride)
    elif padding == "valid":
        if h < kh or w < kw:
            raise ContractError(f"input shape {x.shape} smaller than kernel shape {kernel.shape}")
        oh, ow = (h - kh) // stride + 1, (w - kw) // stride + 1
        pt = pb = pl = pr = 0
    else:
        raise ContractError(f"unknown padding {padding!r}")

    xp = np.pad(x, ((pt, pb), (pl, pr), (0, 0))) if (pt or pb or pl or pr) else x
    return _conv_core(np.ascontiguousarray(xp), np.ascontiguousarray(kernel), bias, oh, ow, stride)


def conv2d_transpose(x, kernel, bias, stride: int = 2) -> np.ndarray:
    """Transposed convolution in scatter form.

    Every input pixel scatters ``x[h, w, :] @ kernel[i, j]`` onto output pixel
    ``(h * stride + i, w * stride + j)``. Output extents are the input extents
    times ``stride``; contributions falling past that edge are dropped.
    Kernel layout is Kh x Kw x Cin x Cout where Cin matches the input.
    """
    x = _as_hwc(x)
    kernel = np.asarray(kernel, dtype=np.float32)
    bias = np.asarray(bias, dtype=np.float32)
    if kernel.ndim != 4 or kernel.shape[2] != x.shape[2]:
        raise ContractError(f"kernel shape {kernel.shape} does not match input shape {x.shape}")
    kh, kw, cin, cout = kernel.shape
    if bias.shape != (cout,):
        raise ContractError(f"bias shape {bias.shape} does not match kernel shape {kernel.shape}")
    if stride < 1:
        raise ContractError(f"stride must be positive, got {stride}")
    return _conv_transpose_core(np.ascontiguousarray(x), np.ascontiguousarray(kernel), bias, stride)


def maxpool2d(x, window: int = 2, stride: int = 2) -> np.ndarray:
    """Non-overlapping max pooling.

    NaN never exceeds any value: a window yields NaN only when all of its
    elements are NaN.
    """
    x = _as_hwc(x)
    if window != 2 or stride != 2:
        raise ContractError("only 2x2 windows with stride 2 are supported")
    h, w, _ = x.shape
    if h % 2 or w % 2:
        raise ContractError(f"maxpool2d needs even spatial extents, got shape {x.shape}")
    a = x[0::2, 0::2]
    b = x[0::2, 1::2]
    c = x[1::2, 0::2]
    d = x[1::2, 1::2]
    return np.fmax(np.fmax(np.fmax(a, b), c), d)


def batchnorm_infer(x, gamma, beta, mean, var, eps: float = DEFAULT_BN_EPS, strict: bool = True) -> np.ndarray:
    """Inference-mode batch normalization, evaluated in fp64 and rounded once.

    ``strict=False`` skips the variance-sign check; model execution uses it
    because injected faults legitimately produce negative variances, which
    then propagate as NaN.
    """
    x = _as_hwc(x)
    vecs = [np.asarray(v, dtype=np.float32) for v in (gamma, beta, mean, var)]
    c = x.shape[2]
    for name, v in zip(("gamma", "beta", "mean", "var"), vecs):
        if v.shape != (c,):
            raise ContractError(f"{name} shape {v.shape} does not match input shape {x.shape}")
    # faulted parameters may be signalling NaNs or overflow fp32 on the way back
    with np.errstate(all="ignore"):
        g, b, m, v = (a.astype(np.float64) for a in vecs)
        if strict and np.any(v < 0):
            raise ContractError("batch norm variance must be non-negative")
        y = g * (x.astype(np.float64) - m) / np.sqrt(v + eps) + b
        return y.astype(np.float32)


def apply_activation(x, kind: ActivationKind | str) -> np.ndarray:
    kind = ActivationKind(kind)
    x = np.asarray(x, dtype=np.float32)
    with np.errstate(all="ignore"):
        if kind is ActivationKind.RELU:
            return np.maximum(x, np.float32(0))
        if kind is ActivationKind.SIGMOID:
            return (np.float32(1) / (np.float32(1) + np.exp(-x))).astype(np.float32)
        return np.clip(HARD_SIGMOID_SLOPE * x + HARD_SIGMOID_OFFSET, np.float32(0), np.float32(1))


def concat_channels(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=np.float32)
    b = np.asarray(b, dtype=np.float32)
    if a.ndim != 3 or b.ndim != 3 or a.shape[:2] != b.shape[:2]:
        raise ContractError(f"cannot concatenate shapes {a.shape} and {b.shape}")
    return np.concatenate([a, b], axis=2)


def argmax_channels(logits) -> np.ndarray:
    """Per-pixel class index of the largest logit.

    Ties go to the lowest channel index and NaN never wins a comparison
    (NaN is ranked below -inf), so a pixel whose logits are all NaN gets
    class 0.
    """
    logits = np.asarray(logits)
    if logits.ndim != 3 or logits.shape[2] < 1:
        raise ContractError(f"logits must be H x W x C with C >= 1, got shape {logits.shape}")
    if not np.issubdtype(logits.dtype, np.floating):
        return np.argmax(logits, axis=2).astype(np.int64)
    valid = ~np.isnan(logits)
    best = np.max(np.where(valid, logits, -np.inf), axis=2, keepdims=True)
    hit = valid & (logits == best)
    return np.argmax(hit, axis=2).astype(np.int64)
