"""Engine unit tests: value oracles, shape/NaN guards, tape semantics."""

import zlib

import numpy as np
import pytest

from specbpp import tensor as T
from specbpp.gradcheck import gradcheck
from specbpp.tensor import NonFiniteError, ShapeError, Tape, Tensor

from op_cases import CASE_BUILDERS


def test_every_registered_op_has_a_case():
    assert set(T.REGISTERED_OPS) == set(CASE_BUILDERS)


@pytest.mark.parametrize("op", sorted(CASE_BUILDERS))
def test_op_gradient_matches_finite_differences(op):
    rng = np.random.default_rng(zlib.crc32(op.encode()))
    for _ in range(3):
        fn, arrays = CASE_BUILDERS[op](rng)
        assert gradcheck(fn, arrays) < 1e-4


# ---------------------------------------------------------------- values


def test_softmax_rows_sum_to_one_and_uniform_on_zero_logits():
    x = Tensor(np.zeros((4, 6)))
    y = T.softmax_rows(x).data
    assert np.allclose(y, 1.0 / 6.0)
    z = T.softmax_rows(Tensor(np.random.default_rng(0).uniform(-5, 5, (7, 9)))).data
    assert np.allclose(z.sum(axis=-1), 1.0, atol=1e-6)


def test_sigmoid_extremes_are_stable():
    y = T.sigmoid(Tensor(np.array([-1000.0, 0.0, 1000.0]))).data
    assert y[0] == 0.0 or y[0] < 1e-30
    assert y[1] == pytest.approx(0.5)
    assert y[2] == pytest.approx(1.0)


def test_dwconv_delta_kernel_is_identity():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((2, 6, 6, 5)).astype(np.float32)
    k = np.zeros((3, 3, 5), dtype=np.float32)
    k[1, 1, :] = 1.0
    y = T.dwconv(Tensor(x), Tensor(k)).data
    np.testing.assert_array_equal(y, x)


def test_dwconv_matches_naive_loop_oracle():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((4, 4, 2))
    k = rng.standard_normal((3, 3, 2))
    want = np.zeros_like(x)
    for i in range(4):
        for j in range(4):
            for c in range(2):
                acc = 0.0
                for u in range(3):
                    for v in range(3):
                        ii, jj = i + u - 1, j + v - 1
                        if 0 <= ii < 4 and 0 <= jj < 4:
                            acc += k[u, v, c] * x[ii, jj, c]
                want[i, j, c] = acc
    got = T.dwconv(Tensor(x), Tensor(k)).data
    np.testing.assert_allclose(got, want, rtol=1e-12)


def test_channel_pools():
    x = Tensor(np.array([[[[1.0, 3.0, 2.0]]]]))
    assert T.channel_max_pool(x).data.reshape(()) == 3.0
    assert T.channel_avg_pool(x).data.reshape(()) == pytest.approx(2.0)
    assert T.channel_max_pool(x).data.shape == (1, 1, 1, 1)


def test_global_avg_pool_value():
    x = np.arange(24, dtype=np.float32).reshape(1, 2, 3, 4)
    got = T.global_avg_pool(Tensor(x)).data
    np.testing.assert_allclose(got, x.mean(axis=(1, 2)))


def test_take_along_last_picks_and_scatters():
    x = Tensor(np.array([[0.1, 0.7, 0.2], [0.5, 0.3, 0.2]]), requires_grad=True)
    idx = np.array([1, 0])
    with Tape() as tape:
        picked = T.take_along_last(x, idx)
        loss = T.sum_all(picked)
    np.testing.assert_allclose(picked.data, [0.7, 0.5])
    g = tape.gradients(loss, [x])[x]
    want = np.array([[0.0, 1.0, 0.0], [1.0, 0.0, 0.0]])
    np.testing.assert_array_equal(g, want)


def _dense_band_attention_oracle(x, c, beta):
    """Naive float64 per-row softmax evaluation of the scalar-token map."""
    x = np.asarray(x, dtype=np.float64)
    out = np.zeros_like(x)
    flat = x.reshape(-1, x.shape[-1])
    res = out.reshape(-1, x.shape[-1])
    for row in range(flat.shape[0]):
        v = flat[row]
        for ch, b in zip(c, beta):
            logits = ch * np.outer(v, v)
            logits -= logits.max(axis=1, keepdims=True)
            a = np.exp(logits)
            a /= a.sum(axis=1, keepdims=True)
            res[row] += b * (a @ v)
    return out


def test_band_attention_zero_coupling_is_uniform_average():
    x = np.array([[0.1, 0.5, 0.9, 0.3]])
    got = T.band_attention(Tensor(x), Tensor(np.zeros(2)), Tensor(np.array([1.0, 0.5]))).data
    np.testing.assert_allclose(got, np.full((1, 4), 1.5 * x.mean()), rtol=1e-6)


def test_band_attention_matches_dense_oracle():
    rng = np.random.default_rng(31)
    x = rng.uniform(0, 1, (3, 2, 6))
    c = rng.uniform(-4, 4, 3)
    beta = rng.uniform(-1, 1, 3)
    got = T.band_attention(Tensor(x), Tensor(c), Tensor(beta)).data
    np.testing.assert_allclose(got, _dense_band_attention_oracle(x, c, beta), rtol=1e-10)


def test_band_attention_shifted_path_is_stable_and_exact():
    rng = np.random.default_rng(32)
    x = rng.uniform(0, 1, (4, 5))
    c = np.array([150.0, -90.0])
    beta = np.array([0.7, -0.4])
    got = T.band_attention(Tensor(x), Tensor(c), Tensor(beta)).data
    assert np.all(np.isfinite(got))
    np.testing.assert_allclose(got, _dense_band_attention_oracle(x, c, beta), rtol=1e-9)


def test_band_attention_gradcheck_on_shifted_path():
    rng = np.random.default_rng(33)
    x = rng.uniform(0.1, 0.9, (2, 4))
    c = np.array([120.0])
    beta = np.array([0.8])
    w = rng.standard_normal((2, 4))
    fn = lambda a, b, d: T.sum_all(T.mul(T.band_attention(a, b, d), Tensor(w)))
    assert gradcheck(fn, [x, c, beta], eps=1e-6) < 1e-4


# ---------------------------------------------------------------- guards


def test_shape_errors_name_both_shapes():
    a = Tensor(np.zeros((2, 3)))
    b = Tensor(np.zeros((4, 5)))
    with pytest.raises(ShapeError, match=r"2, 3"):
        T.matmul(a, b)
    with pytest.raises(ShapeError, match="broadcast"):
        T.add(a, b)


def test_dwconv_rejects_even_kernel_and_channel_mismatch():
    x = Tensor(np.zeros((1, 4, 4, 3)))
    with pytest.raises(ShapeError, match="even"):
        T.dwconv(x, Tensor(np.zeros((4, 4, 3))))
    with pytest.raises(ShapeError, match="channel"):
        T.dwconv(x, Tensor(np.zeros((3, 3, 2))))


def test_dtype_mixing_rejected():
    a = Tensor(np.zeros((2, 2), dtype=np.float32))
    b = Tensor(np.zeros((2, 2), dtype=np.float64))
    with pytest.raises(ShapeError, match="dtype"):
        T.add(a, b)


def test_nonfinite_forward_aborts_naming_op():
    with pytest.raises(NonFiniteError, match="'log'"):
        T.log(Tensor(np.array([-1.0])))
    big = Tensor(np.array([3e38], dtype=np.float32))
    with np.errstate(over="ignore"):
        with pytest.raises(NonFiniteError, match="'add'"):
            T.add(big, big)


def test_concat_off_axis_mismatch_rejected():
    with pytest.raises(ShapeError):
        T.concat([Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 3)))], axis=1)


# ---------------------------------------------------------------- tape


def test_gradients_require_scalar_recorded_loss():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    with Tape() as tape:
        y = T.scale(x, 2.0)
    with pytest.raises(ShapeError, match="scalar"):
        tape.gradients(y, [x])
    with Tape() as other:
        pass
    with pytest.raises(ValueError, match="not recorded"):
        other.gradients(T.sum_all(x), [x])


def test_repeated_backward_is_bitwise_identical():
    rng = np.random.default_rng(3)
    x = Tensor(rng.standard_normal((4, 4)), requires_grad=True)
    w = Tensor(rng.standard_normal((4, 4)), requires_grad=True)
    with Tape() as tape:
        loss = T.mean_all(T.sigmoid(T.matmul(x, w)))
    g1 = tape.gradients(loss, [x, w])
    g2 = tape.gradients(loss, [x, w])
    np.testing.assert_array_equal(g1[x], g2[x])
    np.testing.assert_array_equal(g1[w], g2[w])


def test_untouched_parameter_gets_zero_gradient():
    x = Tensor(np.ones(3), requires_grad=True)
    unused = Tensor(np.ones(5), requires_grad=True)
    with Tape() as tape:
        loss = T.sum_all(x)
    g = tape.gradients(loss, [x, unused])
    np.testing.assert_array_equal(g[unused], np.zeros(5))
    np.testing.assert_array_equal(g[x], np.ones(3))


def test_no_recording_outside_tape():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        T.scale(x, 1.0)
    before = len(tape)
    T.scale(x, 2.0)
    assert len(tape) == before


def test_reused_node_accumulates_fanout():
    x = Tensor(np.array(2.0), requires_grad=True)
    with Tape() as tape:
        y = T.scale(x, 3.0)
        loss = T.sum_all(T.add(y, y))
    g = tape.gradients(loss, [x])[x]
    assert g == pytest.approx(6.0)


def test_default_dtype_is_float32_and_float64_is_preserved():
    assert Tensor([1.0, 2.0]).dtype == np.float32
    assert Tensor(np.zeros(2, dtype=np.float64)).dtype == np.float64
    assert Tensor(np.zeros(2, dtype=np.int64)).dtype == np.float32


def test_bias_broadcast_gradient_collapses_to_bias_shape():
    rng = np.random.default_rng(4)
    x = Tensor(rng.standard_normal((5, 3)), requires_grad=True)
    b = Tensor(rng.standard_normal((3,)), requires_grad=True)
    with Tape() as tape:
        loss = T.sum_all(T.add(x, b))
    g = tape.gradients(loss, [b])[b]
    assert g.shape == (3,)
    np.testing.assert_allclose(g, np.full(3, 5.0))
