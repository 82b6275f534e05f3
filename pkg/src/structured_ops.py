"""
構造化演算子 - 事前モデルの各層を等価な全結合行列 W_P に変換
"""
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Optional, Sequence, Tuple

import numpy as np
from loguru import logger
from scipy.linalg import block_diag

from src.tensor_core import DTYPE, ConvSpec, ShapeError, conv2d_forward

Shape = Tuple[int, ...]


class FcSource(str, Enum):
    """W_P を生成した構成"""
    CONV_KERNEL = "conv_kernel"
    PATCHIFY = "patchify"
    TRANSPOSE = "transpose"
    SHARED_WEIGHT = "shared_weight"
    COMPOSED = "composed"


@dataclass(frozen=True)
class FcEquivalent:
    """構造化層の等価全結合表現

    matrix は (prod(output_shape), prod(input_shape))。
    置換行列の場合 perm[i] = j（P_ij = 1）を保持し、合成は添字操作で行う。
    """
    matrix: np.ndarray
    source: FcSource
    input_shape: Shape
    output_shape: Shape
    bias: Optional[np.ndarray] = None
    perm: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        rows, cols = int(np.prod(self.output_shape)), int(np.prod(self.input_shape))
        if self.matrix.shape != (rows, cols):
            raise ShapeError(
                f"matrix {self.matrix.shape} does not match shapes "
                f"{self.output_shape} <- {self.input_shape}"
            )
        if self.bias is not None and self.bias.shape != (rows,):
            raise ShapeError(f"bias {self.bias.shape} does not match {rows} outputs")

    @property
    def is_permutation(self) -> bool:
        return self.perm is not None

    def apply(self, v: np.ndarray) -> np.ndarray:
        """vec(x) -> W_P·vec(x)（+ bias）。v は (d,) または (n, d)"""
        y = v @ self.matrix.T
        if self.bias is not None:
            y = y + self.bias
        return y


@dataclass(frozen=True)
class PatchGrid:
    """パッチ分割の格子"""
    height: int
    width: int
    patch: int

    def __post_init__(self):
        if self.patch < 1 or self.height % self.patch or self.width % self.patch:
            raise ShapeError(
                f"patch size {self.patch} must divide image {self.height}x{self.width}"
            )

    @property
    def rows(self) -> int:
        """h = H / P"""
        return self.height // self.patch

    @property
    def cols(self) -> int:
        """w = W / P"""
        return self.width // self.patch

    @property
    def num_patches(self) -> int:
        return self.rows * self.cols


def _permutation_fc(
    perm: np.ndarray, source: FcSource, input_shape: Shape, output_shape: Shape
) -> FcEquivalent:
    n = perm.size
    matrix = np.zeros((n, n), dtype=DTYPE)
    matrix[np.arange(n), perm] = 1.0
    return FcEquivalent(matrix, source, input_shape, output_shape, perm=perm)


# ============== CNN ==============

def conv_to_fc(
    kernel: np.ndarray,
    spec: ConvSpec,
    in_shape: Sequence[int],
    bias: Optional[np.ndarray] = None,
    chunk: int = 512,
) -> FcEquivalent:
    """単位行列バッチを畳み込んで転置し W_F を得る

    W_F = reshape(F * reshape(I, (c·h·w, c, h, w)), (c·h·w, o·h_out·w_out))ᵀ
    """
    in_shape = tuple(int(d) for d in in_shape)
    out_shape = spec.output_shape(in_shape)
    d_in = int(np.prod(in_shape))
    d_out = int(np.prod(out_shape))
    dtype = kernel.dtype

    w_f = np.empty((d_out, d_in), dtype=dtype)
    # 単位行列をチャンクに分けて畳み込む
    for start in range(0, d_in, chunk):
        stop = min(start + chunk, d_in)
        eye = np.zeros((stop - start, d_in), dtype=dtype)
        eye[np.arange(stop - start), np.arange(start, stop)] = 1.0
        responses = conv2d_forward(eye.reshape((stop - start,) + in_shape), kernel, spec)
        w_f[:, start:stop] = responses.reshape(stop - start, d_out).T

    expanded_bias = None
    if bias is not None:
        h_out, w_out = out_shape[1], out_shape[2]
        expanded_bias = np.repeat(bias.astype(dtype), h_out * w_out)
    logger.debug(f"conv_to_fc {in_shape} -> {out_shape}: W_F {w_f.shape}")
    return FcEquivalent(w_f, FcSource.CONV_KERNEL, in_shape, out_shape, bias=expanded_bias)


# ============== MLP-Mixer ==============

def patchify_indices(grid: PatchGrid, channels: int = 1) -> np.ndarray:
    """各出力位置 i に対する入力位置 j

    出力順はパッチ優先 (S, c·P²)、パッチ内はチャネル優先。
    c = 1 なら j = (R·P + r)·W + (C·P + c) そのもの。
    """
    P = grid.patch
    per_patch = channels * P * P
    i = np.arange(grid.num_patches * per_patch)
    patch_number = i // per_patch
    within = i % per_patch
    ch = within // (P * P)
    pixel_number = within % (P * P)
    R, C = patch_number // grid.cols, patch_number % grid.cols
    r, c = pixel_number // P, pixel_number % P
    return ch * grid.height * grid.width + (R * P + r) * grid.width + (C * P + c)


def build_patchify_matrix(grid: PatchGrid, channels: int = 1) -> FcEquivalent:
    """パッチ化置換行列 P（P_ij = 1 は x_j を位置 i へ）"""
    perm = patchify_indices(grid, channels)
    in_shape = (channels, grid.height, grid.width) if channels > 1 else (grid.height, grid.width)
    out_shape = (grid.num_patches, channels * grid.patch * grid.patch)
    return _permutation_fc(perm, FcSource.PATCHIFY, in_shape, out_shape)


def transpose_indices(height: int, width: int) -> np.ndarray:
    """π(k) = W·k mod (HW−1)、π(HW−1) = HW−1"""
    if height < 1 or width < 1:
        raise ShapeError(f"transpose needs positive dims, got {height}x{width}")
    n = height * width
    if n == 1:
        return np.zeros(1, dtype=np.int64)
    k = np.arange(n, dtype=np.int64)
    perm = (width * k) % (n - 1)
    perm[-1] = n - 1
    return perm


def build_transpose_matrix(height: int, width: int) -> FcEquivalent:
    """vec(x) を vec(xᵀ) に写す転置行列 T（x は H×W）"""
    perm = transpose_indices(height, width)
    return _permutation_fc(perm, FcSource.TRANSPOSE, (height, width), (width, height))


def expand_shared_weight(
    w_r: np.ndarray, repeats: int, bias: Optional[np.ndarray] = None
) -> FcEquivalent:
    """共有重み w_r を対角に R 回並べた W̃ = diag(w_r, …, w_r)"""
    if repeats < 1:
        raise ShapeError(f"shared weight needs at least one row, got R={repeats}")
    if w_r.ndim != 2:
        raise ShapeError(f"shared weight must be a matrix, got {tuple(w_r.shape)}")
    c_out, c_in = w_r.shape
    matrix = block_diag(*([w_r] * repeats)).astype(w_r.dtype, copy=False)
    expanded_bias = np.tile(bias, repeats) if bias is not None else None
    return FcEquivalent(
        matrix, FcSource.SHARED_WEIGHT, (repeats, c_in), (repeats, c_out), bias=expanded_bias
    )


def _left_multiply(a: FcEquivalent, b_matrix: np.ndarray) -> np.ndarray:
    if a.is_permutation:
        return b_matrix[a.perm]
    return a.matrix @ b_matrix


def _right_multiply(a_matrix: np.ndarray, b: FcEquivalent) -> np.ndarray:
    if b.is_permutation:
        inverse = np.empty_like(b.perm)
        inverse[b.perm] = np.arange(b.perm.size)
        return a_matrix[:, inverse]
    return a_matrix @ b.matrix


def compose_prior(
    wtilde: FcEquivalent,
    l: Optional[FcEquivalent] = None,
    post: Optional[FcEquivalent] = None,
) -> FcEquivalent:
    """W_P = post · W̃ · L（L, post は省略時は単位行列）

    post は出力を転置する層（Token Mixer MLP 2）に使う。
    置換行列との積は添字操作なので丸め誤差はない。
    """
    matrix = wtilde.matrix
    input_shape = wtilde.input_shape
    bias = wtilde.bias
    if l is not None:
        if l.matrix.shape[0] != matrix.shape[1]:
            raise ShapeError(
                f"compose_prior mismatch: W̃ {matrix.shape} x L {l.matrix.shape}"
            )
        matrix = _right_multiply(matrix, l)
        input_shape = l.input_shape
    output_shape = wtilde.output_shape
    if post is not None:
        if post.matrix.shape[1] != matrix.shape[0]:
            raise ShapeError(
                f"compose_prior mismatch: post {post.matrix.shape} x W̃L {matrix.shape}"
            )
        matrix = _left_multiply(post, matrix)
        output_shape = post.output_shape
        if bias is not None:
            bias = _left_multiply(post, bias[:, None])[:, 0]
    if l is None and post is None:
        matrix = matrix.copy()
    return FcEquivalent(matrix, FcSource.COMPOSED, input_shape, output_shape, bias=bias)


def without_bias(fc: FcEquivalent) -> FcEquivalent:
    return replace(fc, bias=None)


# ============== デバッグ出力 ==============

def write_sparsity_pgm(fc: FcEquivalent, path: str) -> Path:
    """非ゼロパターンを PGM (P5) 画像で書き出す（0 = ゼロ要素）"""
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    pixels = np.where(fc.matrix != 0, 255, 0).astype(np.uint8)
    rows, cols = pixels.shape
    with open(out, "wb") as f:
        f.write(f"P5\n{cols} {rows}\n255\n".encode("ascii"))
        f.write(pixels.tobytes())
    logger.info(f"Sparsity pattern of {fc.source.value} {pixels.shape} written to {out}")
    return out
