"""
構造化演算子のテスト
"""
import numpy as np
import pytest

from src.selftest import brute_force_patches
from src.structured_ops import (
    FcEquivalent,
    FcSource,
    PatchGrid,
    build_patchify_matrix,
    build_transpose_matrix,
    compose_prior,
    conv_to_fc,
    expand_shared_weight,
    patchify_indices,
    transpose_indices,
    without_bias,
    write_sparsity_pgm,
)
from src.tensor_core import DTYPE, ORACLE_DTYPE, ConvSpec, ShapeError, conv2d_forward


# ============== 畳み込み -> 全結合 ==============

def test_one_by_one_kernel_is_identity():
    fc = conv_to_fc(np.ones((1, 1, 1, 1), dtype=DTYPE), ConvSpec(1), (1, 3, 3))
    np.testing.assert_array_equal(fc.matrix, np.eye(9, dtype=DTYPE))
    assert fc.source == FcSource.CONV_KERNEL


def test_two_by_two_kernel_single_row():
    kernel = np.array([[[[1.0, 2.0], [3.0, 4.0]]]])
    fc = conv_to_fc(kernel, ConvSpec(2), (1, 2, 2))
    np.testing.assert_array_equal(fc.matrix, [[1.0, 2.0, 3.0, 4.0]])


def test_conv_fc_matches_conv_on_cnn_layer_shape(rng):
    # 1×32×32 -> 4×16×16（ストライド2）は 1024×1024
    spec = ConvSpec(3, 2, 1, 1, 4)
    kernel = rng.uniform(-1.0, 1.0, (4, 1, 3, 3), ORACLE_DTYPE)
    fc = conv_to_fc(kernel, spec, (1, 32, 32))
    assert fc.matrix.shape == (1024, 1024)
    for _ in range(3):
        x = rng.uniform(-1.0, 1.0, (1, 32, 32), ORACLE_DTYPE)
        np.testing.assert_allclose(
            fc.apply(x.reshape(-1)), conv2d_forward(x, kernel, spec).reshape(-1), atol=1e-10
        )


def test_conv_fc_multichannel_with_bias(rng):
    spec = ConvSpec(3, 1, 1, 3, 2)
    kernel = rng.normal((2, 3, 3, 3), dtype=ORACLE_DTYPE)
    bias = np.array([0.5, -1.5])
    fc = conv_to_fc(kernel, spec, (3, 5, 5), bias=bias, chunk=7)
    x = rng.normal((3, 5, 5), dtype=ORACLE_DTYPE)
    np.testing.assert_allclose(
        fc.apply(x.reshape(-1)), conv2d_forward(x, kernel, spec, bias).reshape(-1), atol=1e-10
    )
    np.testing.assert_array_equal(fc.bias[:25], np.full(25, 0.5))


def test_conv_fc_rejects_wrong_channels(rng):
    with pytest.raises(ShapeError):
        conv_to_fc(rng.normal((1, 3, 3, 3)), ConvSpec(3, 1, 1, 3, 1), (1, 8, 8))


# ============== パッチ化 ==============

def test_patchify_index_example():
    perm = patchify_indices(PatchGrid(4, 4, 2))
    assert perm[6] == 6
    assert perm[2] == 4


def test_patch_equal_to_image_is_identity():
    fc = build_patchify_matrix(PatchGrid(4, 4, 4))
    np.testing.assert_array_equal(fc.matrix, np.eye(16, dtype=DTYPE))


@pytest.mark.parametrize("h,w,p,c", [(4, 4, 2, 1), (32, 32, 8, 1), (6, 9, 3, 1), (8, 8, 4, 3)])
def test_patchify_matches_brute_force(rng, h, w, p, c):
    image = rng.normal((c, h, w), dtype=ORACLE_DTYPE)
    fc = build_patchify_matrix(PatchGrid(h, w, p), channels=c)
    np.testing.assert_array_equal(fc.apply(image.reshape(-1)), brute_force_patches(image, p))
    assert fc.output_shape == ((h // p) * (w // p), c * p * p)


def test_patchify_is_orthogonal():
    m = build_patchify_matrix(PatchGrid(8, 8, 2)).matrix
    np.testing.assert_array_equal(m @ m.T, np.eye(64, dtype=DTYPE))


def test_patch_grid_must_divide_image():
    with pytest.raises(ShapeError):
        PatchGrid(32, 32, 5)


# ============== 転置 ==============

def test_transpose_index_example():
    perm = transpose_indices(2, 3)
    assert perm[1] == 3
    assert perm[-1] == 5


def test_transpose_single_row_is_identity():
    np.testing.assert_array_equal(transpose_indices(1, 5), np.arange(5))
    np.testing.assert_array_equal(transpose_indices(1, 1), [0])


def test_transpose_random_matrix(rng):
    x = rng.normal((3, 4), dtype=ORACLE_DTYPE)
    fc = build_transpose_matrix(3, 4)
    np.testing.assert_array_equal(fc.apply(x.reshape(-1)), x.T.reshape(-1))
    assert fc.is_permutation
    assert fc.output_shape == (4, 3)


def test_transpose_rejects_empty_dims():
    with pytest.raises(ShapeError):
        transpose_indices(0, 3)


# ============== 共有重みの展開 ==============

def test_single_repeat_is_the_weight_itself(rng):
    w_r = rng.normal((3, 5))
    np.testing.assert_array_equal(expand_shared_weight(w_r, 1).matrix, w_r)


def test_two_repeats_block_diagonal():
    w_r = np.array([[1.0, 2.0], [3.0, 4.0]])
    expected = np.array([
        [1.0, 2.0, 0.0, 0.0],
        [3.0, 4.0, 0.0, 0.0],
        [0.0, 0.0, 1.0, 2.0],
        [0.0, 0.0, 3.0, 4.0],
    ])
    np.testing.assert_array_equal(expand_shared_weight(w_r, 2).matrix, expected)


def test_three_repeats_equals_row_wise_application(rng):
    w_r = rng.normal((4, 6), dtype=ORACLE_DTYPE)
    bias = rng.normal((4,), dtype=ORACLE_DTYPE)
    x = rng.normal((3, 6), dtype=ORACLE_DTYPE)
    fc = expand_shared_weight(w_r, 3, bias=bias)
    np.testing.assert_allclose(fc.apply(x.reshape(-1)), (x @ w_r.T + bias).reshape(-1), atol=1e-12)


def test_expand_shared_weight_errors(rng):
    with pytest.raises(ShapeError):
        expand_shared_weight(rng.normal((2, 2)), 0)
    with pytest.raises(ShapeError):
        expand_shared_weight(rng.normal((4,)), 2)


# ============== 合成 ==============

def test_compose_without_neighbours_is_a_copy(rng):
    wtilde = expand_shared_weight(rng.normal((2, 3)), 2)
    composed = compose_prior(wtilde)
    np.testing.assert_array_equal(composed.matrix, wtilde.matrix)
    composed.matrix[0, 0] += 1.0
    assert composed.matrix[0, 0] != wtilde.matrix[0, 0]


def test_compose_with_identity_permutation(rng):
    wtilde = expand_shared_weight(rng.normal((2, 2), dtype=ORACLE_DTYPE), 8)
    identity = build_transpose_matrix(1, 16)
    np.testing.assert_array_equal(compose_prior(wtilde, l=identity).matrix, wtilde.matrix)


def test_token_mixing_prior_matches_direct_mixing(rng):
    # x は (S, C)、トークン方向の共有重み w_r は (hidden, S)
    tokens, channels, hidden = 4, 3, 5
    w_r = rng.normal((hidden, tokens), dtype=ORACLE_DTYPE)
    bias = rng.normal((hidden,), dtype=ORACLE_DTYPE)
    x = rng.normal((tokens, channels), dtype=ORACLE_DTYPE)

    fc = compose_prior(
        expand_shared_weight(w_r, channels, bias=bias),
        l=build_transpose_matrix(tokens, channels),
        post=build_transpose_matrix(channels, hidden),
    )
    assert fc.input_shape == (tokens, channels)
    assert fc.output_shape == (hidden, channels)
    expected = w_r @ x + bias[:, None]
    np.testing.assert_allclose(fc.apply(x.reshape(-1)), expected.reshape(-1), atol=1e-12)
    np.testing.assert_allclose(without_bias(fc).apply(x.reshape(-1)), (w_r @ x).reshape(-1), atol=1e-12)


def test_compose_shape_mismatch(rng):
    wtilde = expand_shared_weight(rng.normal((2, 3)), 2)
    with pytest.raises(ShapeError):
        compose_prior(wtilde, l=build_transpose_matrix(2, 2))


def test_fc_equivalent_validates_shapes():
    with pytest.raises(ShapeError):
        FcEquivalent(np.zeros((3, 4)), FcSource.COMPOSED, (4,), (2,))
    with pytest.raises(ShapeError):
        FcEquivalent(np.zeros((2, 4)), FcSource.COMPOSED, (4,), (2,), bias=np.zeros(3))


# ============== PGM ==============

def test_sparsity_pgm_header_and_pixels(tmp_path):
    fc = expand_shared_weight(np.array([[1.0, 0.0]]), 2)
    path = write_sparsity_pgm(fc, tmp_path / "nested" / "layer.pgm")
    data = path.read_bytes()
    header = b"P5\n4 2\n255\n"
    assert data.startswith(header)
    assert list(data[len(header):]) == [255, 0, 0, 0, 0, 0, 255, 0]


# ============== 代数的性質 ==============

@pytest.mark.parametrize("h,w", [(3, 5), (4, 4), (1, 7), (8, 2)])
def test_transpose_twice_is_identity(h, w):
    forward_t = build_transpose_matrix(h, w).matrix
    back_t = build_transpose_matrix(w, h).matrix
    np.testing.assert_array_equal(back_t @ forward_t, np.eye(h * w, dtype=forward_t.dtype))


def test_expand_shared_weight_is_linear(rng):
    a = rng.normal((3, 4), dtype=ORACLE_DTYPE)
    b = rng.normal((3, 4), dtype=ORACLE_DTYPE)
    mixed = expand_shared_weight(2.5 * a - 0.75 * b, 5).matrix
    separate = 2.5 * expand_shared_weight(a, 5).matrix - 0.75 * expand_shared_weight(b, 5).matrix
    np.testing.assert_allclose(mixed, separate, atol=1e-12)


def test_compose_prior_is_associative(rng):
    tokens, channels, hidden = 3, 4, 2
    wtilde = expand_shared_weight(rng.normal((hidden, tokens), dtype=ORACLE_DTYPE), channels)
    left = build_transpose_matrix(tokens, channels)
    post = build_transpose_matrix(channels, hidden)
    composed = compose_prior(wtilde, l=left, post=post).matrix
    np.testing.assert_array_equal(composed, post.matrix @ (wtilde.matrix @ left.matrix))
    np.testing.assert_array_equal(composed, (post.matrix @ wtilde.matrix) @ left.matrix)


def test_identity_weight_composed_with_transpose_is_the_transpose():
    h, w = 3, 5
    identity = expand_shared_weight(np.eye(w, dtype=ORACLE_DTYPE), h)
    transpose = build_transpose_matrix(h, w)
    np.testing.assert_array_equal(compose_prior(identity, l=transpose).matrix, transpose.matrix)
