"""Random test-case builders for every registered differentiable op.

Each builder returns ``(fn, arrays)`` where ``fn`` maps one Tensor per
array to a scalar Tensor. Outputs are contracted against a fixed random
weight tensor rather than plain-summed so misrouted gradients (wrong
axis, wrong transpose, dropped factor) cannot cancel out. The weight is
drawn once per case; ``fn`` must be a pure function of its inputs or
finite differences are meaningless.

Inputs are sampled away from kinks (relu/clamp corners, max-pool ties)
so central differences are valid at eps = 1e-5.
"""

from __future__ import annotations

import numpy as np

from specbpp import tensor as T


def _contractor(rng, shape):
    w = rng.standard_normal(shape)
    return lambda out: T.sum_all(T.mul(out, T.Tensor(w)))


def _away_from(rng, shape, point, margin, span=1.0):
    mag = rng.uniform(margin, span, size=shape)
    sign = rng.choice([-1.0, 1.0], size=shape)
    return point + sign * mag


def case_add(rng):
    a = rng.standard_normal((3, 4))
    b = rng.standard_normal((3, 4)) if rng.random() < 0.5 else rng.standard_normal((4,))
    con = _contractor(rng, (3, 4))
    return lambda x, y: con(T.add(x, y)), [a, b]


def case_sub(rng):
    a = rng.standard_normal((3, 4))
    b = rng.standard_normal((3, 4)) if rng.random() < 0.5 else rng.standard_normal((1, 4))
    con = _contractor(rng, (3, 4))
    return lambda x, y: con(T.sub(x, y)), [a, b]


def case_neg(rng):
    con = _contractor(rng, (2, 5))
    return lambda x: con(T.neg(x)), [rng.standard_normal((2, 5))]


def case_mul(rng):
    a = rng.standard_normal((3, 4))
    b = rng.standard_normal((3, 4)) if rng.random() < 0.5 else rng.standard_normal((3, 1))
    con = _contractor(rng, (3, 4))
    return lambda x, y: con(T.mul(x, y)), [a, b]


def case_scale(rng):
    c = float(rng.uniform(-2.0, 2.0))
    con = _contractor(rng, (3, 4))
    return lambda x: con(T.scale(x, c)), [rng.standard_normal((3, 4))]


def case_matmul(rng):
    if rng.random() < 0.5:
        a, b = rng.standard_normal((3, 4)), rng.standard_normal((4, 5))
        con = _contractor(rng, (3, 5))
    else:
        a, b = rng.standard_normal((2, 3, 4)), rng.standard_normal((4, 5))
        con = _contractor(rng, (2, 3, 5))
    return lambda x, y: con(T.matmul(x, y)), [a, b]


def case_transpose_last2(rng):
    con = _contractor(rng, (4, 3))
    return lambda x: con(T.transpose_last2(x)), [rng.standard_normal((3, 4))]


def case_reshape(rng):
    con = _contractor(rng, (2, 6))
    return lambda x: con(T.reshape(x, (2, 6))), [rng.standard_normal((3, 4))]


def case_concat(rng):
    a = rng.standard_normal((3, 2))
    b = rng.standard_normal((3, 3))
    c = rng.standard_normal((3, 1))
    con = _contractor(rng, (3, 6))
    return lambda x, y, z: con(T.concat([x, y, z], axis=-1)), [a, b, c]


def case_relu(rng):
    x = _away_from(rng, (4, 4), 0.0, 0.05)
    con = _contractor(rng, (4, 4))
    return lambda t: con(T.relu(t)), [x]


def case_sigmoid(rng):
    con = _contractor(rng, (3, 4))
    return lambda x: con(T.sigmoid(x)), [rng.uniform(-3, 3, (3, 4))]


def case_log(rng):
    con = _contractor(rng, (3, 4))
    return lambda x: con(T.log(x)), [rng.uniform(0.1, 2.0, (3, 4))]


def case_clamp_min(rng):
    lo = 0.2
    x = _away_from(rng, (3, 4), lo, 0.05)
    con = _contractor(rng, (3, 4))
    return lambda t: con(T.clamp_min(t, lo)), [x]


def case_softmax_rows(rng):
    con = _contractor(rng, (3, 5))
    return lambda x: con(T.softmax_rows(x)), [rng.uniform(-2, 2, (3, 5))]


def case_dwconv(rng):
    ks = int(rng.choice([3, 5, 7]))
    x = rng.standard_normal((2, 5, 5, 3))
    k = rng.standard_normal((ks, ks, 3))
    con = _contractor(rng, (2, 5, 5, 3))
    return lambda a, b: con(T.dwconv(a, b)), [x, k]


def case_take_along_last(rng):
    x = rng.standard_normal((3, 4))
    idx = rng.integers(0, 4, size=(3,))
    con = _contractor(rng, (3,))
    return lambda t: con(T.take_along_last(t, idx)), [x]


def case_global_avg_pool(rng):
    con = _contractor(rng, (2, 4))
    return lambda x: con(T.global_avg_pool(x)), [rng.standard_normal((2, 3, 3, 4))]


def case_channel_max_pool(rng):
    # Keep a clear winner per position so the max has no FD kink.
    while True:
        x = rng.standard_normal((2, 3, 3, 4))
        part = np.partition(x, -2, axis=-1)
        if np.min(part[..., -1] - part[..., -2]) > 1e-2:
            break
    con = _contractor(rng, (2, 3, 3, 1))
    return lambda t: con(T.channel_max_pool(t)), [x]


def case_channel_avg_pool(rng):
    con = _contractor(rng, (2, 3, 3, 1))
    return lambda x: con(T.channel_avg_pool(x)), [rng.standard_normal((2, 3, 3, 4))]


def case_sum_all(rng):
    return lambda x: T.sum_all(x), [rng.standard_normal((3, 4))]


def case_mean_all(rng):
    return lambda x: T.mean_all(x), [rng.standard_normal((3, 4))]


def case_sum_last(rng):
    con = _contractor(rng, (3,))
    return lambda x: con(T.sum_last(x)), [rng.standard_normal((3, 4))]


def case_band_attention(rng):
    heads = int(rng.integers(1, 4))
    x = rng.uniform(0.0, 1.0, (2, 5))
    c = rng.uniform(-3.0, 3.0, heads)
    beta = rng.uniform(-1.5, 1.5, heads)
    con = _contractor(rng, (2, 5))
    return lambda a, b, d: con(T.band_attention(a, b, d)), [x, c, beta]


CASE_BUILDERS = {
    "add": case_add,
    "sub": case_sub,
    "neg": case_neg,
    "mul": case_mul,
    "scale": case_scale,
    "matmul": case_matmul,
    "transpose_last2": case_transpose_last2,
    "reshape": case_reshape,
    "concat": case_concat,
    "relu": case_relu,
    "sigmoid": case_sigmoid,
    "log": case_log,
    "clamp_min": case_clamp_min,
    "softmax_rows": case_softmax_rows,
    "dwconv": case_dwconv,
    "take_along_last": case_take_along_last,
    "global_avg_pool": case_global_avg_pool,
    "channel_max_pool": case_channel_max_pool,
    "channel_avg_pool": case_channel_avg_pool,
    "sum_all": case_sum_all,
    "mean_all": case_mean_all,
    "sum_last": case_sum_last,
    "band_attention": case_band_attention,
}
