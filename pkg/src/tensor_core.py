"""
テンソルコア - 5つの層プリミティブの順伝播/逆伝播、Adam、シード付き乱数
"""
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from loguru import logger
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

# 学習は32bit、オラクルは64bit
DTYPE = np.float32
ORACLE_DTYPE = np.float64

LN_EPS = 1e-5


# ============== 例外 ==============

class BiasBlendError(Exception):
    """ライブラリ共通の基底例外"""


class ShapeError(BiasBlendError, ValueError):
    """次元の不一致"""


class ConfigError(BiasBlendError, ValueError):
    """設定値エラー（フィールド名を含む）"""

    def __init__(self, field_name: str, message: str):
        self.field_name = field_name
        super().__init__(f"{field_name}: {message}")


class DataFormatError(BiasBlendError):
    """データファイルの形式エラー"""

    def __init__(self, message: str, offset: Optional[int] = None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)


class ScheduleError(BiasBlendError, ValueError):
    """補間スケジュールのエラー"""


# ============== 乱数 ==============

class Rng:
    """シード付き乱数ジェネレーター（PCG64）

    同じシードと同じ呼び出し順序なら同じ系列を返す。
    """

    def __init__(self, seed: int = 0):
        self.seed = int(seed)
        self._seq = np.random.SeedSequence(self.seed)
        self.generator = np.random.Generator(np.random.PCG64(self._seq))

    def spawn(self, n: int) -> List["Rng"]:
        """独立した子ストリームを派生"""
        children = []
        for child_seq in self._seq.spawn(n):
            child = Rng.__new__(Rng)
            child.seed = self.seed
            child._seq = child_seq
            child.generator = np.random.Generator(np.random.PCG64(child_seq))
            children.append(child)
        return children

    def permutation(self, n: int) -> np.ndarray:
        return self.generator.permutation(n)

    def integers(self, low: int, high: int, size=None) -> np.ndarray:
        return self.generator.integers(low, high, size=size)

    def random(self, size=None) -> np.ndarray:
        return self.generator.random(size)

    def uniform(self, low: float, high: float, size, dtype=DTYPE) -> np.ndarray:
        return self.generator.uniform(low, high, size=size).astype(dtype)

    def normal(self, size, dtype=DTYPE) -> np.ndarray:
        return self.generator.standard_normal(size).astype(dtype)


# ============== 畳み込み設定 ==============

@dataclass(frozen=True)
class ConvSpec:
    """2次元畳み込みのハイパーパラメータ"""
    kernel_size: int
    stride: int = 1
    padding: int = 0
    in_channels: int = 1
    out_channels: int = 1

    def __post_init__(self):
        if self.kernel_size < 1 or self.stride < 1 or self.padding < 0:
            raise ShapeError(
                f"invalid conv spec k={self.kernel_size} s={self.stride} p={self.padding}"
            )
        if self.in_channels < 1 or self.out_channels < 1:
            raise ShapeError(
                f"invalid channel counts c={self.in_channels} o={self.out_channels}"
            )

    def output_hw(self, h_in: int, w_in: int) -> Tuple[int, int]:
        """h_out = floor((h_in - k + 2p)/s) + 1"""
        h_out = (h_in - self.kernel_size + 2 * self.padding) // self.stride + 1
        w_out = (w_in - self.kernel_size + 2 * self.padding) // self.stride + 1
        if h_out < 1 or w_out < 1:
            raise ShapeError(
                f"conv k={self.kernel_size} does not fit input {h_in}x{w_in} with p={self.padding}"
            )
        return h_out, w_out

    def output_shape(self, in_shape: Sequence[int]) -> Tuple[int, int, int]:
        c, h, w = in_shape
        if c != self.in_channels:
            raise ShapeError(
                f"input has {c} channels, conv expects {self.in_channels}"
            )
        return (self.out_channels,) + self.output_hw(h, w)


# ============== 行列積 ==============

def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """行列積 a[M×K] · b[K×N]"""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {tuple(a.shape)} x {tuple(b.shape)}")
    return np.matmul(a, b)


def linear(x: np.ndarray, weight: np.ndarray, bias: Optional[np.ndarray] = None) -> np.ndarray:
    """最終次元に y = x Wᵀ + b を適用"""
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError(
            f"linear shape mismatch: input {tuple(x.shape)} vs weight {tuple(weight.shape)}"
        )
    y = x @ weight.T
    if bias is not None:
        y = y + bias
    return y


def linear_backward(
    grad_y: np.ndarray, x: np.ndarray, weight: np.ndarray
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """線形層の逆伝播 -> (grad_x, grad_weight, grad_bias)"""
    g2 = grad_y.reshape(-1, grad_y.shape[-1])
    x2 = x.reshape(-1, x.shape[-1])
    grad_w = g2.T @ x2
    grad_b = g2.sum(axis=0)
    grad_x = grad_y @ weight
    return grad_x, grad_w, grad_b


# ============== 畳み込み ==============

def _as_batch(x: np.ndarray) -> Tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ShapeError(f"conv2d expects (c,h,w) or (n,c,h,w), got {tuple(x.shape)}")


def _check_conv(x: np.ndarray, kernel: np.ndarray, spec: ConvSpec):
    expected = (spec.out_channels, spec.in_channels, spec.kernel_size, spec.kernel_size)
    if tuple(kernel.shape) != expected:
        raise ShapeError(f"kernel shape {tuple(kernel.shape)} does not match spec {expected}")
    if x.shape[1] != spec.in_channels:
        raise ShapeError(
            f"input channels {x.shape[1]} do not match kernel channels {spec.in_channels}"
        )


def _im2col(x: np.ndarray, spec: ConvSpec) -> Tuple[np.ndarray, int, int]:
    n, c, h, w = x.shape
    k, s, p = spec.kernel_size, spec.stride, spec.padding
    h_out, w_out = spec.output_hw(h, w)
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
    # (n, c, H', W', k, k) -> ストライドで間引き
    windows = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::s, ::s][:, :, :h_out, :w_out]
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * h_out * w_out, c * k * k)
    return cols, h_out, w_out


def conv2d_forward(
    x: np.ndarray,
    kernel: np.ndarray,
    spec: ConvSpec,
    bias: Optional[np.ndarray] = None,
) -> np.ndarray:
    """相互相関（カーネル反転なし）、ゼロパディング

    x: (c,h,w) または (n,c,h,w)
    """
    xb, squeeze = _as_batch(x)
    _check_conv(xb, kernel, spec)
    n = xb.shape[0]
    cols, h_out, w_out = _im2col(xb, spec)
    out = cols @ kernel.reshape(spec.out_channels, -1).T
    if bias is not None:
        out = out + bias
    out = out.reshape(n, h_out, w_out, spec.out_channels).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)
    return out[0] if squeeze else out


def conv2d_backward(
    grad_out: np.ndarray,
    x: np.ndarray,
    kernel: np.ndarray,
    spec: ConvSpec,
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """畳み込みの逆伝播 -> (grad_x, grad_kernel, grad_bias)"""
    xb, squeeze = _as_batch(x)
    gb, _ = _as_batch(grad_out)
    n, c, h, w = xb.shape
    k, s, p = spec.kernel_size, spec.stride, spec.padding
    o = spec.out_channels
    cols, h_out, w_out = _im2col(xb, spec)

    g = gb.transpose(0, 2, 3, 1).reshape(-1, o)
    grad_kernel = (g.T @ cols).reshape(kernel.shape)
    grad_bias = g.sum(axis=0)

    dcols = (g @ kernel.reshape(o, -1)).reshape(n, h_out, w_out, c, k, k)
    dxp = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=grad_out.dtype)
    # 各カーネル位置ごとに散布加算（出力要素ごとに加算順序は固定）
    for i in range(k):
        for j in range(k):
            dxp[:, :, i:i + s * h_out:s, j:j + s * w_out:s] += (
                dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            )
    grad_x = dxp[:, :, p:p + h, p:p + w] if p else dxp
    grad_x = np.ascontiguousarray(grad_x)
    return (grad_x[0] if squeeze else grad_x), grad_kernel, grad_bias


# ============== Layer Norm ==============

def layernorm(
    x: np.ndarray,
    gain: Optional[np.ndarray] = None,
    shift: Optional[np.ndarray] = None,
    eps: float = LN_EPS,
) -> np.ndarray:
    """最終次元で正規化、分散にepsを加える"""
    mean = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    y = (x - mean) / np.sqrt(var + eps)
    if gain is not None:
        if gain.shape[-1] != x.shape[-1]:
            raise ShapeError(f"layernorm gain {tuple(gain.shape)} vs input {tuple(x.shape)}")
        y = y * gain
    if shift is not None:
        if shift.shape[-1] != x.shape[-1]:
            raise ShapeError(f"layernorm shift {tuple(shift.shape)} vs input {tuple(x.shape)}")
        y = y + shift
    return y.astype(x.dtype, copy=False)


def layernorm_backward(
    grad_y: np.ndarray,
    x: np.ndarray,
    gain: Optional[np.ndarray] = None,
    eps: float = LN_EPS,
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Layer Norm の逆伝播 -> (grad_x, grad_gain, grad_shift)"""
    d = x.shape[-1]
    mean = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean) * rstd

    lead = tuple(range(x.ndim - 1))
    grad_gain = (grad_y * xhat).sum(axis=lead)
    grad_shift = grad_y.sum(axis=lead)

    dxhat = grad_y * gain if gain is not None else grad_y
    grad_x = (rstd / d) * (
        d * dxhat
        - dxhat.sum(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True)
    )
    return grad_x.astype(x.dtype, copy=False), grad_gain, grad_shift


# ============== GELU ==============

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x: np.ndarray) -> np.ndarray:
    """厳密形 x·Φ(x)（tanh近似ではない）"""
    return (0.5 * x * (1.0 + erf(x * _INV_SQRT2))).astype(x.dtype, copy=False)


def gelu_backward(grad_y: np.ndarray, x: np.ndarray) -> np.ndarray:
    """d/dx x·Φ(x) = Φ(x) + x·φ(x)"""
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return (grad_y * (cdf + x * pdf)).astype(x.dtype, copy=False)


# ============== 交差エントロピー ==============

def _check_labels(logits: np.ndarray, labels) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(
            f"cross_entropy expects logits (n, classes) and n labels, got "
            f"{tuple(logits.shape)} and {tuple(labels.shape)}"
        )
    classes = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        bad = labels[(labels < 0) | (labels >= classes)][0]
        raise ValueError(f"label {int(bad)} out of range [0, {classes})")
    return labels


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def cross_entropy(logits: np.ndarray, labels) -> float:
    """バッチ平均の -log softmax(logits)[label]"""
    labels = _check_labels(logits, labels)
    logp = _log_softmax(logits)
    return float(-logp[np.arange(len(labels)), labels].mean())


def cross_entropy_backward(logits: np.ndarray, labels) -> np.ndarray:
    labels = _check_labels(logits, labels)
    n = logits.shape[0]
    probs = np.exp(_log_softmax(logits))
    probs[np.arange(n), labels] -= 1.0
    return (probs / n).astype(logits.dtype, copy=False)


# ============== Adam ==============

@dataclass
class AdamState:
    """Adam の状態（モーメントはパラメータと同形状）"""
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: Dict[str, np.ndarray],
    grads: Dict[str, np.ndarray],
    state: AdamState,
) -> Tuple[Dict[str, np.ndarray], AdamState]:
    """バイアス補正付き Adam でパラメータをその場で更新"""
    state.step += 1
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step
    step_size = state.learning_rate / bc1

    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"gradient {name} shape {g.shape} does not match parameter {p.shape}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        if m.shape != p.shape:
            raise ShapeError(f"adam moment {name} shape {m.shape} does not match parameter {p.shape}")

        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p -= step_size * m / (np.sqrt(v / bc2) + state.eps)

    return params, state


# ============== 勾配チェック ==============

def finite_diff_grad(
    f: Callable[[np.ndarray], float],
    x: np.ndarray,
    h: float = 1e-5,
    coords: Optional[Sequence[int]] = None,
) -> np.ndarray:
    """中心差分による勾配（64bitで評価）

    coords を指定した場合はその平坦インデックスのみ計算し、残りは0。
    """
    if h <= 0:
        raise ValueError("finite difference step must be positive")
    x64 = np.array(x, dtype=ORACLE_DTYPE)
    flat = x64.reshape(-1)
    grad = np.zeros_like(flat)
    indices = range(flat.size) if coords is None else coords
    for i in indices:
        orig = flat[i]
        flat[i] = orig + h
        f_plus = float(f(x64))
        flat[i] = orig - h
        f_minus = float(f(x64))
        flat[i] = orig
        grad[i] = (f_plus - f_minus) / (2.0 * h)
    return grad.reshape(x64.shape)


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """要素ごとの相対誤差の最大値"""
    a = np.asarray(analytic, dtype=ORACLE_DTYPE)
    b = np.asarray(numeric, dtype=ORACLE_DTYPE)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    err = float(np.max(np.abs(a - b) / denom)) if a.size else 0.0
    logger.debug(f"gradient check max relative error {err:.3e}")
    return err
