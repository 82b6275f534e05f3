"""
テンソルコアのテスト
"""
import math

import numpy as np
import pytest

from src.tensor_core import (
    DTYPE,
    ORACLE_DTYPE,
    AdamState,
    ConfigError,
    ConvSpec,
    DataFormatError,
    Rng,
    ShapeError,
    adam_step,
    conv2d_backward,
    conv2d_forward,
    cross_entropy,
    cross_entropy_backward,
    finite_diff_grad,
    gelu,
    gelu_backward,
    layernorm,
    layernorm_backward,
    linear,
    linear_backward,
    matmul,
    max_relative_error,
)


def naive_conv(x, kernel, spec):
    c, h, w = x.shape
    k, s, p = spec.kernel_size, spec.stride, spec.padding
    xp = np.pad(x, ((0, 0), (p, p), (p, p)))
    h_out, w_out = spec.output_hw(h, w)
    out = np.zeros((spec.out_channels, h_out, w_out), dtype=ORACLE_DTYPE)
    for o in range(spec.out_channels):
        for i in range(h_out):
            for j in range(w_out):
                total = 0.0
                for ch in range(c):
                    for di in range(k):
                        for dj in range(k):
                            total += kernel[o, ch, di, dj] * xp[ch, i * s + di, j * s + dj]
                out[o, i, j] = total
    return out


# ============== matmul ==============

def test_matmul_identity():
    a = np.arange(9, dtype=DTYPE).reshape(3, 3)
    np.testing.assert_array_equal(matmul(np.eye(3, dtype=DTYPE), a), a)


def test_matmul_hand_checked():
    out = matmul(np.array([[1.0, 2.0], [3.0, 4.0]]), np.array([[1.0], [1.0]]))
    np.testing.assert_array_equal(out, [[3.0], [7.0]])


def test_matmul_matches_triple_loop(np_rng):
    a = np_rng.integers(-5, 5, size=(4, 5)).astype(ORACLE_DTYPE)
    b = np_rng.integers(-5, 5, size=(5, 2)).astype(ORACLE_DTYPE)
    expected = np.zeros((4, 2))
    for i in range(4):
        for j in range(2):
            for k in range(5):
                expected[i, j] += a[i, k] * b[k, j]
    np.testing.assert_array_equal(matmul(a, b), expected)


def test_matmul_mismatch_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        matmul(np.zeros((2, 3)), np.zeros((2, 3)))


def test_linear_backward_shapes(rng):
    x = rng.normal((5, 4, 3))
    w = rng.normal((6, 3))
    y = linear(x, w, np.zeros(6, dtype=DTYPE))
    assert y.shape == (5, 4, 6)
    gx, gw, gb = linear_backward(np.ones_like(y), x, w)
    assert gx.shape == x.shape and gw.shape == w.shape and gb.shape == (6,)
    np.testing.assert_allclose(gb, np.full(6, 20.0))


# ============== 畳み込み ==============

def test_conv_single_output_pixel():
    x = np.array([[[1.0, 2.0], [3.0, 4.0]]])
    kernel = np.array([[[[1.0, 0.0], [0.0, 1.0]]]])
    out = conv2d_forward(x, kernel, ConvSpec(2, 1, 0, 1, 1))
    np.testing.assert_array_equal(out, [[[5.0]]])


def test_conv_zero_input_gives_zero(rng):
    spec = ConvSpec(3, 1, 1, 2, 3)
    out = conv2d_forward(np.zeros((2, 5, 5), dtype=DTYPE), rng.normal((3, 2, 3, 3)), spec)
    assert not out.any()


def test_conv_matches_nested_loop_oracle(rng):
    spec = ConvSpec(3, 2, 1, 1, 1)
    x = rng.normal((1, 4, 4), dtype=ORACLE_DTYPE)
    kernel = rng.normal((1, 1, 3, 3), dtype=ORACLE_DTYPE)
    out = conv2d_forward(x, kernel, spec)
    assert out.shape == (1, 2, 2)
    np.testing.assert_allclose(out, naive_conv(x, kernel, spec), atol=1e-12)


def test_conv_multichannel_strided_matches_oracle(rng):
    spec = ConvSpec(3, 2, 1, 3, 4)
    x = rng.normal((3, 7, 6), dtype=ORACLE_DTYPE)
    kernel = rng.normal((4, 3, 3, 3), dtype=ORACLE_DTYPE)
    np.testing.assert_allclose(conv2d_forward(x, kernel, spec), naive_conv(x, kernel, spec), atol=1e-12)


def test_conv_channel_mismatch_raises(rng):
    with pytest.raises(ShapeError):
        conv2d_forward(rng.normal((2, 4, 4)), rng.normal((1, 3, 3, 3)), ConvSpec(3, 1, 1, 3, 1))


def test_conv_output_size_formula():
    assert ConvSpec(3, 2, 1, 1, 4).output_shape((1, 32, 32)) == (4, 16, 16)
    assert ConvSpec(3, 1, 1, 3, 1).output_shape((3, 32, 32)) == (1, 32, 32)


def test_conv_spec_rejects_kernel_larger_than_input():
    with pytest.raises(ShapeError):
        ConvSpec(5, 1, 0, 1, 1).output_hw(3, 3)


# ============== Layer Norm / GELU ==============

def test_layernorm_constant_input_returns_shift():
    shift = np.array([0.5, -1.0, 2.0])
    out = layernorm(np.full((2, 3), 7.0), gain=np.array([3.0, 3.0, 3.0]), shift=shift)
    np.testing.assert_allclose(out, np.tile(shift, (2, 1)))


def test_layernorm_symmetric_pair():
    out = layernorm(np.array([1.0, -1.0]))
    expected = 1.0 / math.sqrt(1.0 + 1e-5)
    np.testing.assert_allclose(out, [expected, -expected], rtol=1e-12)


def test_layernorm_statistics(rng):
    out = layernorm(rng.normal((8, 64), dtype=ORACLE_DTYPE))
    assert np.all(np.abs(out.mean(axis=-1)) < 1e-6)
    assert np.all(np.abs(out.var(axis=-1) - 1.0) < 1e-4)


def test_gelu_values():
    assert gelu(np.array([0.0]))[0] == 0.0
    assert abs(gelu(np.array([10.0]))[0] - 10.0) < 1e-6
    assert abs(gelu(np.array([1.0]))[0] - 0.8413) < 1e-3


def test_gelu_preserves_dtype():
    assert gelu(np.ones(3, dtype=DTYPE)).dtype == DTYPE


# ============== 交差エントロピー ==============

def test_cross_entropy_uniform_logits():
    assert cross_entropy(np.zeros((4, 10)), [0, 1, 2, 3]) == pytest.approx(math.log(10), abs=1e-6)


def test_cross_entropy_large_margin():
    logits = np.array([[100.0, 0.0, 0.0]])
    assert cross_entropy(logits, [0]) < 1e-12


def test_cross_entropy_matches_softmax_oracle(rng):
    logits = rng.normal((3, 4), dtype=ORACLE_DTYPE)
    labels = [0, 3, 1]
    probs = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
    expected = -np.mean(np.log(probs[np.arange(3), labels]))
    assert cross_entropy(logits, labels) == pytest.approx(expected, abs=1e-6)


def test_cross_entropy_label_out_of_range():
    with pytest.raises(ValueError, match="out of range"):
        cross_entropy(np.zeros((2, 3)), [0, 3])


# ============== Adam ==============

def test_adam_zero_gradient_keeps_parameters():
    params = {"w": np.array([1.0, -2.0], dtype=DTYPE)}
    before = params["w"].copy()
    state = AdamState()
    for _ in range(5):
        adam_step(params, {"w": np.zeros(2, dtype=DTYPE)}, state)
    np.testing.assert_array_equal(params["w"], before)
    assert state.step == 5


def test_adam_first_step_moves_by_learning_rate():
    params = {"w": np.array([0.0], dtype=ORACLE_DTYPE)}
    adam_step(params, {"w": np.array([3.0])}, AdamState(learning_rate=1e-3))
    assert params["w"][0] == pytest.approx(-1e-3, rel=1e-4)


def test_adam_decreases_quadratic():
    params = {"w": np.array([1.0], dtype=ORACLE_DTYPE)}
    state = AdamState(learning_rate=0.1)
    history = [1.0]
    for _ in range(5):
        adam_step(params, {"w": 2.0 * params["w"]}, state)
        history.append(abs(params["w"][0]))
    assert all(b < a for a, b in zip(history, history[1:]))


def test_adam_moment_shapes_follow_parameters():
    params = {"w": np.zeros((2, 3), dtype=DTYPE)}
    state = AdamState()
    adam_step(params, {"w": np.ones((2, 3), dtype=DTYPE)}, state)
    assert state.m["w"].shape == (2, 3) and state.v["w"].shape == (2, 3)
    with pytest.raises(ShapeError):
        adam_step(params, {"w": np.ones(6, dtype=DTYPE)}, state)


# ============== 勾配チェック ==============

def test_finite_diff_sum_is_all_ones(rng):
    grad = finite_diff_grad(lambda v: float(v.sum()), rng.normal((3, 2)))
    np.testing.assert_allclose(grad, np.ones((3, 2)), atol=1e-8)


def test_finite_diff_quadratic():
    grad = finite_diff_grad(lambda v: 0.5 * float((v * v).sum()), np.array([1.0, 2.0]), h=1e-5)
    np.testing.assert_allclose(grad, [1.0, 2.0], atol=1e-8)


def _check(f, x, analytic, rng, coords=200):
    picks = rng.generator.choice(x.size, size=min(coords, x.size), replace=False)
    numeric = finite_diff_grad(f, x, coords=picks)
    return max_relative_error(analytic.reshape(-1)[picks], numeric.reshape(-1)[picks])


def test_conv_backward_matches_finite_differences(rng):
    spec = ConvSpec(3, 2, 1, 2, 3)
    x = rng.normal((4, 2, 9, 9), dtype=ORACLE_DTYPE)
    kernel = rng.normal((3, 2, 3, 3), dtype=ORACLE_DTYPE)
    g = rng.normal((4, 3, 5, 5), dtype=ORACLE_DTYPE)
    gx, gk, gb = conv2d_backward(g, x, kernel, spec)
    assert _check(lambda v: float((conv2d_forward(v, kernel, spec) * g).sum()), x, gx, rng) < 1e-3
    assert _check(lambda v: float((conv2d_forward(x, v, spec) * g).sum()), kernel, gk, rng) < 1e-3
    bias = np.zeros(3)
    assert _check(lambda v: float((conv2d_forward(x, kernel, spec, v) * g).sum()), bias, gb, rng) < 1e-3


def test_layernorm_backward_matches_finite_differences(rng):
    x = rng.normal((10, 24), dtype=ORACLE_DTYPE)
    gain = rng.normal((24,), dtype=ORACLE_DTYPE)
    g = rng.normal((10, 24), dtype=ORACLE_DTYPE)
    gx, ggain, gshift = layernorm_backward(g, x, gain)
    assert _check(lambda v: float((layernorm(v, gain) * g).sum()), x, gx, rng) < 1e-3
    assert _check(lambda v: float((layernorm(x, v) * g).sum()), gain, ggain, rng) < 1e-3
    np.testing.assert_allclose(gshift, g.sum(axis=0))


def test_gelu_backward_matches_finite_differences(rng):
    x = rng.normal((20, 12), dtype=ORACLE_DTYPE)
    g = rng.normal((20, 12), dtype=ORACLE_DTYPE)
    assert _check(lambda v: float((gelu(v) * g).sum()), x, gelu_backward(g, x), rng) < 1e-3


def test_linear_backward_matches_finite_differences(rng):
    x = rng.normal((6, 15), dtype=ORACLE_DTYPE)
    w = rng.normal((14, 15), dtype=ORACLE_DTYPE)
    g = rng.normal((6, 14), dtype=ORACLE_DTYPE)
    gx, gw, _ = linear_backward(g, x, w)
    assert _check(lambda v: float((linear(v, w) * g).sum()), x, gx, rng) < 1e-3
    assert _check(lambda v: float((linear(x, v) * g).sum()), w, gw, rng) < 1e-3


def test_cross_entropy_backward_matches_finite_differences(rng):
    logits = rng.normal((8, 5), dtype=ORACLE_DTYPE)
    labels = [0, 1, 2, 3, 4, 0, 1, 2]
    analytic = cross_entropy_backward(logits, labels)
    assert _check(lambda v: cross_entropy(v, labels), logits, analytic, rng) < 1e-3


# ============== 乱数 / 例外 ==============

def test_rng_is_deterministic():
    a, b = Rng(7), Rng(7)
    np.testing.assert_array_equal(a.normal((5,)), b.normal((5,)))
    np.testing.assert_array_equal(a.permutation(10), b.permutation(10))


def test_rng_spawn_gives_distinct_reproducible_streams():
    first = [child.normal((3,)) for child in Rng(3).spawn(2)]
    second = [child.normal((3,)) for child in Rng(3).spawn(2)]
    np.testing.assert_array_equal(first[0], second[0])
    assert not np.array_equal(first[0], first[1])


def test_error_messages_carry_context():
    assert "epochs" in str(ConfigError("epochs", "must be >= 1"))
    assert "byte offset 3073" in str(DataFormatError("truncated", 3073))
    assert issubclass(ShapeError, ValueError)
