"""
モデル定義 - S-MLP / S-CNN / MLP-Mixer / I-MLP の構築と順伝播・逆伝播
"""
import copy
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from loguru import logger

from src.structured_ops import (
    FcEquivalent,
    PatchGrid,
    build_patchify_matrix,
    build_transpose_matrix,
    compose_prior,
    conv_to_fc,
    expand_shared_weight,
    patchify_indices,
    without_bias,
)
from src.tensor_core import (
    DTYPE,
    ConfigError,
    ConvSpec,
    Rng,
    ShapeError,
    conv2d_backward,
    conv2d_forward,
    gelu,
    gelu_backward,
    layernorm,
    layernorm_backward,
    linear,
    linear_backward,
)

Shape = Tuple[int, ...]

IMAGE_SHAPE: Shape = (3, 32, 32)

# 基準となるパラメータ数（重み＋バイアス、LN はアフィンなし）
GOLDEN_COUNTS = {
    "s-mlp": 8_405_002,
    "s-cnn": 757_982,
    "s-mlp-mixer-pair": 39_865_610,
    "mlp-mixer": 93_130,
    "mlp-1": 16_922_724,
    "mlp-2": 16_812_024,
}
BUDGET_INTERPOLATED_PARAMS = 9_440_256


class LayerKind(str, Enum):
    FULLY_CONNECTED = "fully_connected"
    CONV2D = "conv2d"
    LINEAR_PATCH_EMBED = "linear_patch_embed"
    TOKEN_MIX = "token_mix"
    CHANNEL_MIX = "channel_mix"
    CLASSIFIER = "classifier"


class Activation(str, Enum):
    GELU = "gelu"
    NONE = "none"


class PriorKind(str, Enum):
    CNN = "cnn"
    MIXER = "mixer"


@dataclass
class LayerDef:
    """1層の宣言的な定義

    norm_groups: LN は出力を (groups, d/groups) と見て最終次元で正規化
    pool_groups: 分類器の前に (groups, d/groups) の groups 方向で平均
    """
    kind: LayerKind
    in_shape: Shape
    out_shape: Shape
    norm: bool = False
    activation: Activation = Activation.NONE
    interpolable: bool = False
    transpose_in: bool = False
    transpose_out: bool = False
    conv: Optional[ConvSpec] = None
    patch: int = 0
    norm_groups: int = 1
    pool_groups: int = 0

    @property
    def in_dim(self) -> int:
        return int(np.prod(self.in_shape))

    @property
    def out_dim(self) -> int:
        return int(np.prod(self.out_shape))

    def _work_shapes(self) -> Tuple[Shape, Shape]:
        """共有重みが行ごとに作用する2次元レイアウト（転置適用後）"""
        work_in = self.in_shape[::-1] if self.transpose_in else self.in_shape
        work_out = self.out_shape[::-1] if self.transpose_out else self.out_shape
        return tuple(work_in), tuple(work_out)

    def weight_shape(self) -> Shape:
        if self.kind == LayerKind.CONV2D:
            c = self.conv
            return (c.out_channels, c.in_channels, c.kernel_size, c.kernel_size)
        if self.kind == LayerKind.FULLY_CONNECTED:
            return (self.out_dim, self.in_dim)
        if self.kind == LayerKind.CLASSIFIER:
            features = self.in_dim // self.pool_groups if self.pool_groups else self.in_dim
            return (self.out_dim, features)
        if self.kind == LayerKind.LINEAR_PATCH_EMBED:
            channels = self.in_shape[0]
            return (self.out_shape[1], channels * self.patch * self.patch)
        work_in, work_out = self._work_shapes()
        return (work_out[-1], work_in[-1])

    def bias_shape(self) -> Shape:
        return (self.weight_shape()[0],)

    def parameter_count(self) -> int:
        return int(np.prod(self.weight_shape())) + int(np.prod(self.bias_shape()))

    def to_dict(self) -> dict:
        data = {
            "kind": self.kind.value,
            "in_shape": list(self.in_shape),
            "out_shape": list(self.out_shape),
            "norm": self.norm,
            "activation": self.activation.value,
            "interpolable": self.interpolable,
            "transpose_in": self.transpose_in,
            "transpose_out": self.transpose_out,
            "patch": self.patch,
            "norm_groups": self.norm_groups,
            "pool_groups": self.pool_groups,
            "conv": None,
        }
        if self.conv is not None:
            data["conv"] = {
                "kernel_size": self.conv.kernel_size,
                "stride": self.conv.stride,
                "padding": self.conv.padding,
                "in_channels": self.conv.in_channels,
                "out_channels": self.conv.out_channels,
            }
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "LayerDef":
        conv = ConvSpec(**data["conv"]) if data.get("conv") else None
        return cls(
            kind=LayerKind(data["kind"]),
            in_shape=tuple(data["in_shape"]),
            out_shape=tuple(data["out_shape"]),
            norm=data.get("norm", False),
            activation=Activation(data.get("activation", "none")),
            interpolable=data.get("interpolable", False),
            transpose_in=data.get("transpose_in", False),
            transpose_out=data.get("transpose_out", False),
            conv=conv,
            patch=data.get("patch", 0),
            norm_groups=data.get("norm_groups", 1),
            pool_groups=data.get("pool_groups", 0),
        )


@dataclass
class Model:
    """層定義とパラメータの組"""
    arch: str
    input_shape: Shape
    layers: List[LayerDef]
    params: List[Dict[str, np.ndarray]]
    cache: List[dict] = field(default_factory=list, repr=False)

    @property
    def classes(self) -> int:
        return self.layers[-1].out_dim

    def parameter_count(self) -> int:
        return sum(p.size for layer_params in self.params for p in layer_params.values())

    def named_parameters(self) -> Dict[str, np.ndarray]:
        """'{層番号}.weight' -> 配列（同一オブジェクトなのでその場更新が反映される）"""
        return {
            f"{i}.{name}": array
            for i, layer_params in enumerate(self.params)
            for name, array in layer_params.items()
        }

    def interpolable_layers(self) -> List[int]:
        return [i for i, layer in enumerate(self.layers) if layer.interpolable]

    def interpolated_parameter_count(self) -> int:
        """補間対象層の重み＋バイアスの総数"""
        return sum(self.layers[i].parameter_count() for i in self.interpolable_layers())

    def copy(self) -> "Model":
        return Model(
            arch=self.arch,
            input_shape=self.input_shape,
            layers=copy.deepcopy(self.layers),
            params=[{k: v.copy() for k, v in p.items()} for p in self.params],
        )


# ============== 初期化 ==============

def _init_layer(layer: LayerDef, rng: Rng) -> Dict[str, np.ndarray]:
    """fan-in スケーリングの一様初期化"""
    w_shape = layer.weight_shape()
    fan_in = int(np.prod(w_shape[1:]))
    bound = 1.0 / np.sqrt(fan_in)
    return {
        "weight": rng.uniform(-bound, bound, w_shape),
        "bias": rng.uniform(-bound, bound, layer.bias_shape()),
    }


def _make_model(arch: str, input_shape: Shape, layers: List[LayerDef], seed: int) -> Model:
    rng = Rng(seed)
    params = [_init_layer(layer, rng) for layer in layers]
    model = Model(arch=arch, input_shape=tuple(input_shape), layers=layers, params=params)
    logger.debug(f"Built {arch}: {len(layers)} layers, {model.parameter_count():,} parameters")
    return model


# ============== MLP ==============

def build_mlp(
    widths: Sequence[int],
    in_dim: int = 3072,
    classes: int = 10,
    *,
    norm_layers: Optional[Sequence[int]] = None,
    act_layers: Optional[Sequence[int]] = None,
    norm_groups: int = 1,
    head_pool: int = 0,
    interpolable: int = 0,
    seed: int = 0,
    arch: str = "mlp",
) -> Model:
    """任意幅の全結合ブロック列 + 線形分類器

    層番号は1始まり。interpolable は先頭から補間対象にする層数。
    """
    depth = len(widths)
    norm_set = set(norm_layers) if norm_layers is not None else {1, 5}
    act_set = set(act_layers) if act_layers is not None else set(range(1, depth + 1))
    input_shape = IMAGE_SHAPE if in_dim == int(np.prod(IMAGE_SHAPE)) else (in_dim,)

    layers: List[LayerDef] = []
    prev: Shape = input_shape
    for idx, width in enumerate(widths, start=1):
        layers.append(LayerDef(
            kind=LayerKind.FULLY_CONNECTED,
            in_shape=prev,
            out_shape=(width,),
            norm=idx in norm_set,
            activation=Activation.GELU if idx in act_set else Activation.NONE,
            interpolable=idx <= interpolable,
            norm_groups=norm_groups,
        ))
        prev = (width,)
    layers.append(LayerDef(
        kind=LayerKind.CLASSIFIER,
        in_shape=prev,
        out_shape=(classes,),
        pool_groups=head_pool,
    ))
    return _make_model(arch, input_shape, layers, seed)


def build_smlp(
    width: int = 1024,
    depth: int = 6,
    in_dim: int = 3072,
    classes: int = 10,
    **kwargs,
) -> Model:
    """S-MLP: Block(z) = σ(LN(zWᵀ))、LN は第1層と第5層"""
    kwargs.setdefault("arch", "s-mlp")
    return build_mlp([width] * depth, in_dim, classes, **kwargs)


# Mixer と対になる MLP の設定（LN は (16, 128) の最終次元、分類器は16パッチで平均）
MIXER_PAIR = dict(
    norm_layers=(1, 3, 5, 7, 9),
    act_layers=(2, 4, 6, 8),
    norm_groups=16,
    head_pool=16,
)


def build_imlp(prior_kind, seed: int = 0, classes: int = 10) -> Model:
    """補間対象層付きの I-MLP（構造は対応する S-MLP と同一）"""
    kind = PriorKind(prior_kind)
    if kind == PriorKind.CNN:
        return build_smlp(1024, 6, classes=classes, interpolable=6, seed=seed, arch="i-mlp-cnn")
    return build_smlp(
        2048, 9, classes=classes, interpolable=9, seed=seed, arch="i-mlp-mixer", **MIXER_PAIR
    )


def build_plain_mlp(prior_kind, seed: int = 0, classes: int = 10) -> Model:
    """補間なしの S-MLP（I-MLP と同じ構造）"""
    kind = PriorKind(prior_kind) if prior_kind else PriorKind.CNN
    if kind == PriorKind.CNN:
        return build_smlp(1024, 6, classes=classes, seed=seed)
    return build_smlp(2048, 9, classes=classes, seed=seed, arch="s-mlp-mixer-pair", **MIXER_PAIR)


# ============== CNN ==============

def build_cnn(
    channels: Sequence[int],
    strides: Sequence[int],
    in_shape: Shape = IMAGE_SHAPE,
    classes: int = 10,
    *,
    kernel_size: int = 3,
    padding: int = 1,
    norm_layers: Sequence[int] = (1, 5),
    interpolable: Optional[int] = None,
    seed: int = 0,
    arch: str = "cnn",
) -> Model:
    """畳み込みブロック列 + 平坦化した特徴への線形分類器"""
    if len(channels) != len(strides):
        raise ShapeError(f"{len(channels)} channel counts but {len(strides)} strides")
    n_interp = len(channels) if interpolable is None else interpolable
    layers: List[LayerDef] = []
    prev = tuple(in_shape)
    for idx, (c_out, stride) in enumerate(zip(channels, strides), start=1):
        spec = ConvSpec(kernel_size, stride, padding, prev[0], c_out)
        out_shape = spec.output_shape(prev)
        layers.append(LayerDef(
            kind=LayerKind.CONV2D,
            in_shape=prev,
            out_shape=out_shape,
            norm=idx in norm_layers,
            activation=Activation.GELU,
            interpolable=idx <= n_interp,
            conv=spec,
        ))
        prev = out_shape
    layers.append(LayerDef(kind=LayerKind.CLASSIFIER, in_shape=prev, out_shape=(classes,)))
    return _make_model(arch, in_shape, layers, seed)


def build_scnn(seed: int = 0, classes: int = 10) -> Model:
    """S-CNN: 出力 [1,32,32] [4,16,16] [16,8,8] [64,4,4] [256,2,2] [256,2,2]

    第1層と第6層は stride 1。
    """
    return build_cnn(
        channels=(1, 4, 16, 64, 256, 256),
        strides=(1, 2, 2, 2, 2, 1),
        classes=classes,
        seed=seed,
        arch="s-cnn",
    )


# ============== MLP-Mixer ==============

def build_mixer(
    seed: int = 0,
    classes: int = 10,
    patch: int = 8,
    hidden: int = 128,
    depth: int = 2,
) -> Model:
    """MLP-Mixer（スキップ接続なし）"""
    c, h, w = IMAGE_SHAPE
    grid = PatchGrid(h, w, patch)
    S, C = grid.num_patches, hidden
    layers = [LayerDef(
        kind=LayerKind.LINEAR_PATCH_EMBED,
        in_shape=IMAGE_SHAPE,
        out_shape=(S, C),
        norm=True,
        interpolable=True,
        patch=patch,
        norm_groups=S,
    )]
    for _ in range(depth):
        layers += [
            # Token Mixer MLP 1: 入力を転置
            LayerDef(LayerKind.TOKEN_MIX, (S, C), (C, S), activation=Activation.GELU,
                     interpolable=True, transpose_in=True),
            # Token Mixer MLP 2: 出力を転置
            LayerDef(LayerKind.TOKEN_MIX, (C, S), (S, C), norm=True, interpolable=True,
                     transpose_out=True, norm_groups=S),
            LayerDef(LayerKind.CHANNEL_MIX, (S, C), (S, C), activation=Activation.GELU,
                     interpolable=True),
            LayerDef(LayerKind.CHANNEL_MIX, (S, C), (S, C), norm=True, interpolable=True,
                     norm_groups=S),
        ]
    layers.append(LayerDef(LayerKind.CLASSIFIER, (S, C), (classes,), pool_groups=S))
    return _make_model("mlp-mixer", IMAGE_SHAPE, layers, seed)


# ============== 予算固定の MLP ==============

MLP1_WIDTHS = (1024, 256, 960, 1856, 1024, 2048, 1864, 1456, 646)
MLP2_WIDTHS = (3072, 1416, 1200, 1090)


def build_budgeted_mlps(seed: int = 0, classes: int = 10) -> Tuple[Model, Model]:
    """補間パラメータ数を揃えた MLP-1（6層に分散）と MLP-2（幅広い第1層に集中）"""
    mlp1 = build_mlp(MLP1_WIDTHS, classes=classes, norm_layers=(1,), interpolable=6,
                     seed=seed, arch="mlp-1")
    mlp2 = build_mlp(MLP2_WIDTHS, classes=classes, norm_layers=(1,), interpolable=1,
                     seed=seed, arch="mlp-2")
    if classes == 10:
        for model in (mlp1, mlp2):
            if model.parameter_count() != GOLDEN_COUNTS[model.arch]:
                raise AssertionError(
                    f"{model.arch} has {model.parameter_count():,} parameters, "
                    f"expected {GOLDEN_COUNTS[model.arch]:,}"
                )
            if model.interpolated_parameter_count() != BUDGET_INTERPOLATED_PARAMS:
                raise AssertionError(
                    f"{model.arch} interpolates {model.interpolated_parameter_count():,} "
                    f"parameters, expected {BUDGET_INTERPOLATED_PARAMS:,}"
                )
    return mlp1, mlp2


def build_budget_priors(seed: int = 0, classes: int = 10) -> Tuple[Model, Model]:
    """MLP-1 / MLP-2 と対になる CNN"""
    prior1 = build_cnn(
        channels=(1, 1, 15, 29, 16, 32),
        strides=(1, 2, 2, 1, 1, 1),
        classes=classes,
        norm_layers=(1,),
        seed=seed,
        arch="cnn-budget-1",
    )
    prior2 = build_cnn(
        channels=(3, 4, 16, 64, 256, 256),
        strides=(1, 2, 2, 2, 2, 1),
        classes=classes,
        norm_layers=(1, 5),
        interpolable=1,
        seed=seed,
        arch="cnn-budget-2",
    )
    return prior1, prior2


# ============== 順伝播 / 逆伝播 ==============

def _check_input(model: Model, batch: np.ndarray):
    if tuple(batch.shape[1:]) != tuple(model.input_shape):
        raise ShapeError(
            f"{model.arch} expects batches of shape (n, {', '.join(map(str, model.input_shape))}), "
            f"got {tuple(batch.shape)}"
        )


def _affine_forward(layer: LayerDef, p: Dict[str, np.ndarray], a: np.ndarray, entry: dict):
    n = a.shape[0]
    w, b = p["weight"], p["bias"]
    if layer.kind == LayerKind.CONV2D:
        return conv2d_forward(a, w, layer.conv, b)
    if layer.kind == LayerKind.FULLY_CONNECTED:
        return linear(a.reshape(n, -1), w, b)
    if layer.kind == LayerKind.CLASSIFIER:
        f = a.reshape(n, -1)
        if layer.pool_groups:
            f = f.reshape(n, layer.pool_groups, -1).mean(axis=1)
        entry["u"] = f
        return linear(f, w, b)
    if layer.kind == LayerKind.LINEAR_PATCH_EMBED:
        grid = PatchGrid(layer.in_shape[1], layer.in_shape[2], layer.patch)
        perm = patchify_indices(grid, layer.in_shape[0])
        u = a.reshape(n, -1)[:, perm].reshape(n, grid.num_patches, -1)
        entry["u"], entry["perm"] = u, perm
        return linear(u, w, b)
    # TOKEN_MIX / CHANNEL_MIX
    u = np.ascontiguousarray(a.swapaxes(1, 2)) if layer.transpose_in else a
    entry["u"] = u
    z = linear(u, w, b)
    return np.ascontiguousarray(z.swapaxes(1, 2)) if layer.transpose_out else z


def _affine_backward(layer: LayerDef, p: Dict[str, np.ndarray], g: np.ndarray, entry: dict):
    a = entry["a"]
    n = a.shape[0]
    w = p["weight"]
    if layer.kind == LayerKind.CONV2D:
        return conv2d_backward(g, a, w, layer.conv)
    if layer.kind == LayerKind.FULLY_CONNECTED:
        gx, gw, gb = linear_backward(g, a.reshape(n, -1), w)
        return gx.reshape(a.shape), gw, gb
    if layer.kind == LayerKind.CLASSIFIER:
        gf, gw, gb = linear_backward(g, entry["u"], w)
        if layer.pool_groups:
            G = layer.pool_groups
            gf = np.broadcast_to(gf[:, None, :] / G, (n, G, gf.shape[1]))
        return np.ascontiguousarray(gf).reshape(a.shape), gw, gb
    if layer.kind == LayerKind.LINEAR_PATCH_EMBED:
        gu, gw, gb = linear_backward(g, entry["u"], w)
        gflat = np.empty((n, layer.in_dim), dtype=g.dtype)
        gflat[:, entry["perm"]] = gu.reshape(n, -1)
        return gflat.reshape(a.shape), gw, gb
    if layer.transpose_out:
        g = np.ascontiguousarray(g.swapaxes(1, 2))
    gu, gw, gb = linear_backward(g, entry["u"], w)
    if layer.transpose_in:
        gu = np.ascontiguousarray(gu.swapaxes(1, 2))
    return gu, gw, gb


def layer_affine(model: Model, index: int, a: np.ndarray) -> np.ndarray:
    """第 index 層の正規化・活性化前の出力（入力は (n, *in_shape)）"""
    layer = model.layers[index]
    if tuple(a.shape[1:]) != tuple(layer.in_shape):
        raise ShapeError(f"layer {index} expects (n, {layer.in_shape}), got {tuple(a.shape)}")
    return _affine_forward(layer, model.params[index], a, {})


def forward(model: Model, batch: np.ndarray, keep_cache: bool = True) -> np.ndarray:
    """ロジット (n, classes) を返す。keep_cache=True なら逆伝播用に中間値を保持"""
    _check_input(model, batch)
    cache: List[dict] = []
    a = batch
    for layer, p in zip(model.layers, model.params):
        entry = {"a": a}
        z = _affine_forward(layer, p, a, entry)
        n = z.shape[0]
        if layer.norm:
            entry["z"] = z
            z = layernorm(z.reshape(n, layer.norm_groups, -1)).reshape(z.shape)
        if layer.activation == Activation.GELU:
            entry["pre_act"] = z
            z = gelu(z)
        if keep_cache:
            cache.append(entry)
        a = z
    model.cache = cache
    return a


def backward(model: Model, grad_logits: np.ndarray) -> Dict[str, np.ndarray]:
    """直前の forward に対するパラメータ勾配（named_parameters と同じキー）"""
    if len(model.cache) != len(model.layers):
        raise ShapeError("backward called without a cached forward pass")
    grads: Dict[str, np.ndarray] = {}
    g = grad_logits
    for i in reversed(range(len(model.layers))):
        layer, p, entry = model.layers[i], model.params[i], model.cache[i]
        if layer.activation == Activation.GELU:
            g = gelu_backward(g, entry["pre_act"])
        if layer.norm:
            z = entry["z"]
            n = z.shape[0]
            g = layernorm_backward(
                g.reshape(n, layer.norm_groups, -1), z.reshape(n, layer.norm_groups, -1)
            )[0].reshape(z.shape)
        g, gw, gb = _affine_backward(layer, p, g, entry)
        grads[f"{i}.weight"] = gw.astype(p["weight"].dtype, copy=False)
        grads[f"{i}.bias"] = gb.astype(p["bias"].dtype, copy=False)
    model.cache = []
    return grads


# ============== 事前モデルの W_P 抽出 ==============

def _layer_fc(layer: LayerDef, p: Dict[str, np.ndarray]) -> FcEquivalent:
    w, b = p["weight"], p["bias"]
    if layer.kind == LayerKind.CONV2D:
        return conv_to_fc(w, layer.conv, layer.in_shape, bias=b)
    if layer.kind == LayerKind.LINEAR_PATCH_EMBED:
        c, h, width = layer.in_shape
        grid = PatchGrid(h, width, layer.patch)
        wtilde = expand_shared_weight(w, grid.num_patches, b)
        return compose_prior(wtilde, build_patchify_matrix(grid, c))
    if layer.kind in (LayerKind.TOKEN_MIX, LayerKind.CHANNEL_MIX):
        work_in, _ = layer._work_shapes()
        wtilde = expand_shared_weight(w, work_in[0], b)
        if layer.transpose_in:
            rows, cols = layer.in_shape
            return compose_prior(wtilde, build_transpose_matrix(rows, cols))
        if layer.transpose_out:
            rows, cols = work_in[0], w.shape[0]
            return compose_prior(wtilde, post=build_transpose_matrix(rows, cols))
        return compose_prior(wtilde)
    raise ConfigError("prior", f"layer kind {layer.kind.value} has no structured prior form")


def extract_prior_fc(prior: Model) -> List[FcEquivalent]:
    """補間対象層ごとの等価全結合行列 W_P（バイアス展開付き）"""
    indices = prior.interpolable_layers()
    if not indices or any(prior.layers[i].kind == LayerKind.FULLY_CONNECTED for i in indices):
        raise ConfigError("prior", f"model {prior.arch} is not a CNN or MLP-Mixer prior")
    return [_layer_fc(prior.layers[i], prior.params[i]) for i in indices]


def check_pair(imlp: Model, prior: Model):
    """補間ペアの次元一致を検査（学習開始前に呼ぶ）"""
    mine, theirs = imlp.interpolable_layers(), prior.interpolable_layers()
    if len(mine) != len(theirs):
        raise ShapeError(
            f"{imlp.arch} has {len(mine)} interpolable layers, {prior.arch} has {len(theirs)}"
        )
    for k, (i, j) in enumerate(zip(mine, theirs), start=1):
        a, b = imlp.layers[i], prior.layers[j]
        if (a.out_dim, a.in_dim) != (b.out_dim, b.in_dim):
            raise ShapeError(
                f"interpolable layer {k}: {imlp.arch} is {a.out_dim}x{a.in_dim}, "
                f"{prior.arch} is {b.out_dim}x{b.in_dim}"
            )
    if imlp.classes != prior.classes:
        raise ShapeError(f"class count mismatch: {imlp.classes} vs {prior.classes}")


def load_prior_into(imlp: Model, prior: Model, include_bias: bool = True) -> Model:
    """W_P・展開バイアス・分類器を I-MLP の複製に書き込む（α=1 等価性の確認用）

    include_bias=False ならバイアスは 0 を書き込む。
    """
    check_pair(imlp, prior)
    out = imlp.copy()
    for i, fc in zip(out.interpolable_layers(), extract_prior_fc(prior)):
        if not include_bias:
            fc = without_bias(fc)
        out.params[i]["weight"][...] = fc.matrix
        out.params[i]["bias"][...] = fc.bias if fc.bias is not None else 0.0
    head, prior_head = out.params[-1], prior.params[-1]
    if head["weight"].shape == prior_head["weight"].shape:
        head["weight"][...] = prior_head["weight"]
        head["bias"][...] = prior_head["bias"]
    return out


def as_dtype(model: Model, dtype) -> Model:
    """パラメータの精度を変換した複製（64bit オラクル用）"""
    out = model.copy()
    out.params = [{k: v.astype(dtype) for k, v in p.items()} for p in out.params]
    return out
