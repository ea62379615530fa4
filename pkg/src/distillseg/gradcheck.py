"""Central finite-difference verification of analytic gradients.

Each check builds a scalar loss as a fixed random linear functional of an
op's output (probing the full Jacobian). The analytic gradient comes from
the float32 implementation under test; the difference quotient is taken on
an independent float64 mirror of the same math so float32 accumulation
noise cannot drown small gradient entries. Tolerance is elementwise with
denominator max(|analytic|, |numeric|, 1e-6).
"""
from __future__ import annotations

import zlib
from typing import Callable, Sequence

import numpy as np

from .tensor import (
    Tensor,
    add,
    backward,
    concat_channels,
    conv2d,
    linear,
    max_pool2d,
    mean_spatial,
    relu,
    scale,
    sum_all,
    upsample_nearest_2x,
    weighted_sum,
)
from .losses import LossWeights, bce_with_logits, cross_entropy, kd_loss, student_loss

EPS = 1e-3
TOLERANCE = 1e-3


def max_relative_error(
    build: Callable[[], Tensor],
    ref: Callable[[], float],
    inputs: Sequence[Tensor],
    eps: float = EPS,
) -> float:
    """Worst elementwise relative error between analytic and numeric grads."""
    for t in inputs:
        t.zero_grad()
    loss = build()
    backward(loss)
    analytic = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in inputs]
    worst = 0.0
    for t, an in zip(inputs, analytic):
        flat = t.data.reshape(-1)
        an_flat = an.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            hi = np.float32(orig + eps)
            lo = np.float32(orig - eps)
            flat[i] = hi
            f_hi = ref()
            flat[i] = lo
            f_lo = ref()
            flat[i] = orig
            numeric = (f_hi - f_lo) / (float(hi) - float(lo))
            a = float(an_flat[i])
            denom = max(abs(a), abs(numeric), 1e-6)
            worst = max(worst, abs(a - numeric) / denom)
    return worst


# ---------------------------------------------------------------------------
# float64 reference forwards


def _conv_ref(x, w, b, stride, padding):
    x = x.astype(np.float64)
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    kh, kw = w.shape[2], w.shape[3]
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]
    out = np.einsum("nchwij,ocij->nohw", win, w.astype(np.float64))
    return out + b.astype(np.float64)[None, :, None, None]


def _log_softmax_ref(z):
    m = z.max(axis=1, keepdims=True)
    s = z - m
    return s - np.log(np.exp(s).sum(axis=1, keepdims=True))


def _ce_ref(z, labels):
    logp = _log_softmax_ref(z.astype(np.float64))
    picked = np.take_along_axis(logp, labels[:, None].astype(np.int64), axis=1)[:, 0]
    return float(-picked.mean())


def _kd_ref(s, t, tau):
    ls = _log_softmax_ref(s.astype(np.float64) / tau)
    lt = _log_softmax_ref(t.astype(np.float64) / tau)
    ps = np.exp(ls)
    return float((ps * (ls - lt)).sum(axis=1).mean())


def _pool_ref(x, window=2):
    n, c, h, w = x.shape
    tiles = x.astype(np.float64).reshape(n, c, h // window, window, w // window, window)
    return tiles.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // window, w // window, -1).max(axis=-1)


def _dot(a, probe) -> float:
    return float(np.sum(a.astype(np.float64) * probe.astype(np.float64)))


# ---------------------------------------------------------------------------
# cases: each returns (build_f32, ref_f64, inputs)


def _rand(rng, *shape) -> Tensor:
    return Tensor(rng.standard_normal(shape, dtype=np.float32), requires_grad=True)


def _probe(rng, shape) -> np.ndarray:
    return rng.standard_normal(shape, dtype=np.float32)


def _case_conv2d(rng):
    stride = int(rng.integers(1, 3))
    padding = int(rng.integers(0, 2))
    k = int(rng.integers(1, 4))
    n, cin, cout = 2, int(rng.integers(1, 3)), int(rng.integers(1, 3))
    h = int(rng.integers(k + stride, k + stride + 3))
    w = int(rng.integers(k + stride, k + stride + 3))
    x, wgt, b = _rand(rng, n, cin, h, w), _rand(rng, cout, cin, k, k), _rand(rng, cout)
    probe = _probe(rng, conv2d(x, wgt, b, stride, padding).shape)
    build = lambda: weighted_sum(conv2d(x, wgt, b, stride, padding), probe)
    ref = lambda: _dot(_conv_ref(x.data, wgt.data, b.data, stride, padding), probe)
    return build, ref, [x, wgt, b]


def _case_relu(rng):
    x = _rand(rng, 3, 7)
    # keep values away from the kink so finite differences stay two-sided
    x.data[np.abs(x.data) < 5 * EPS] += np.float32(10 * EPS)
    probe = _probe(rng, x.shape)
    return (
        lambda: weighted_sum(relu(x), probe),
        lambda: _dot(np.maximum(x.data, 0), probe),
        [x],
    )


def _case_max_pool(rng):
    # well-separated values: pooling argmax must not flip under +/- eps
    vals = rng.permutation(2 * 2 * 4 * 6).astype(np.float32) * np.float32(0.05)
    x = Tensor(vals.reshape(2, 2, 4, 6), requires_grad=True)
    probe = _probe(rng, (2, 2, 2, 3))
    return (
        lambda: weighted_sum(max_pool2d(x, 2), probe),
        lambda: _dot(_pool_ref(x.data), probe),
        [x],
    )


def _case_upsample(rng):
    x = _rand(rng, 2, 3, 3, 4)
    probe = _probe(rng, (2, 3, 6, 8))
    return (
        lambda: weighted_sum(upsample_nearest_2x(x), probe),
        lambda: _dot(x.data.astype(np.float64).repeat(2, axis=2).repeat(2, axis=3), probe),
        [x],
    )


def _case_concat(rng):
    a, b = _rand(rng, 2, 2, 3, 3), _rand(rng, 2, 3, 3, 3)
    probe = _probe(rng, (2, 5, 3, 3))
    return (
        lambda: weighted_sum(concat_channels(a, b), probe),
        lambda: _dot(np.concatenate([a.data, b.data], axis=1), probe),
        [a, b],
    )


def _case_add(rng):
    a, b = _rand(rng, 4, 5), _rand(rng, 4, 5)
    probe = _probe(rng, (4, 5))
    return (
        lambda: weighted_sum(add(a, b), probe),
        lambda: _dot(a.data.astype(np.float64) + b.data.astype(np.float64), probe),
        [a, b],
    )


def _case_scale(rng):
    x = _rand(rng, 3, 4)
    s = float(rng.uniform(-2, 2))
    probe = _probe(rng, (3, 4))
    return (
        lambda: weighted_sum(scale(x, s), probe),
        lambda: _dot(x.data.astype(np.float64) * s, probe),
        [x],
    )


def _case_sum(rng):
    x = _rand(rng, 2, 3, 2)
    return lambda: sum_all(x), lambda: float(x.data.sum(dtype=np.float64)), [x]


def _case_mean_spatial(rng):
    x = _rand(rng, 2, 3, 4, 4)
    probe = _probe(rng, (2, 3))
    return (
        lambda: weighted_sum(mean_spatial(x), probe),
        lambda: _dot(x.data.astype(np.float64).mean(axis=(2, 3)), probe),
        [x],
    )


def _case_linear(rng):
    x, w, b = _rand(rng, 3, 5), _rand(rng, 5, 2), _rand(rng, 2)
    probe = _probe(rng, (3, 2))
    return (
        lambda: weighted_sum(linear(x, w, b), probe),
        lambda: _dot(
            x.data.astype(np.float64) @ w.data.astype(np.float64) + b.data.astype(np.float64),
            probe,
        ),
        [x, w, b],
    )


def _case_cross_entropy(rng):
    n, k, h, w = 2, 4, 2, 3
    logits = _rand(rng, n, k, h, w)
    labels = rng.integers(0, k, size=(n, h, w))
    return (
        lambda: cross_entropy(logits, labels),
        lambda: _ce_ref(logits.data, labels),
        [logits],
    )


def _case_kd_loss(rng):
    n, k, h, w = 2, 4, 2, 2
    s = _rand(rng, n, k, h, w)
    t = Tensor(rng.standard_normal((n, k, h, w), dtype=np.float32))
    tau = float(rng.uniform(0.5, 5.0))
    return (
        lambda: kd_loss(s, t, tau),
        lambda: _kd_ref(s.data, t.data, tau),
        [s],
    )


def _case_student_loss(rng):
    n, k, h, w = 1, 3, 2, 2
    logits = _rand(rng, n, k, h, w)
    teacher = Tensor(rng.standard_normal((n, k, h, w), dtype=np.float32))
    labels = rng.integers(0, k, size=(n, h, w))
    alpha = float(rng.uniform(0.0, 1.0))
    tau = float(rng.uniform(0.5, 5.0))

    def build():
        return student_loss(
            cross_entropy(logits, labels), kd_loss(logits, teacher, tau), LossWeights(alpha)
        )

    def ref():
        return (1.0 - alpha) * _ce_ref(logits.data, labels) + alpha * _kd_ref(
            logits.data, teacher.data, tau
        )

    return build, ref, [logits]


def _case_bce(rng):
    logits = _rand(rng, 6, 1)
    targets = rng.integers(0, 2, size=6).astype(np.float32)

    def ref():
        z = logits.data.astype(np.float64).reshape(-1)
        y = targets.astype(np.float64)
        return float((np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))).mean())

    return lambda: bce_with_logits(logits, targets), ref, [logits]


def _case_composite(rng):
    # conv -> relu -> pool -> conv -> CE, the network-shaped end-to-end path
    x = Tensor(rng.standard_normal((1, 1, 6, 6), dtype=np.float32))
    w1, b1 = _rand(rng, 2, 1, 3, 3), _rand(rng, 2)
    w2, b2 = _rand(rng, 3, 2, 1, 1), _rand(rng, 3)
    labels = rng.integers(0, 3, size=(1, 3, 3))

    def build():
        t = relu(conv2d(x, w1, b1, padding=1))
        t = max_pool2d(t, 2)
        t = conv2d(t, w2, b2)
        return cross_entropy(t, labels)

    def ref():
        t = np.maximum(_conv_ref(x.data, w1.data, b1.data, 1, 1), 0)
        t = _pool_ref(t)
        t = _conv_ref(t, w2.data, b2.data, 1, 0)
        return _ce_ref(t, labels)

    return build, ref, [w1, b1, w2, b2]


SUITES: dict[str, Callable] = {
    "conv2d": _case_conv2d,
    "relu": _case_relu,
    "max_pool2d": _case_max_pool,
    "upsample_nearest_2x": _case_upsample,
    "concat_channels": _case_concat,
    "add": _case_add,
    "scale": _case_scale,
    "sum_all": _case_sum,
    "mean_spatial": _case_mean_spatial,
    "linear": _case_linear,
    "cross_entropy": _case_cross_entropy,
    "kd_loss": _case_kd_loss,
    "student_loss": _case_student_loss,
    "bce_with_logits": _case_bce,
    "composite_conv_relu_pool_ce": _case_composite,
}


def run_suite(name: str, instances: int = 10, base_seed: int = 0) -> float:
    """Worst relative error over fixed random instances of one op."""
    case = SUITES[name]
    tag = zlib.crc32(name.encode())
    worst = 0.0
    for i in range(instances):
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([base_seed, tag, i])))
        build, ref, inputs = case(rng)
        worst = max(worst, max_relative_error(build, ref, inputs))
    return worst


def run_all(instances: int = 10, base_seed: int = 0) -> dict[str, float]:
    return {name: run_suite(name, instances, base_seed) for name in SUITES}
