"""
セルフテスト - データセット不要の等価性チェック一式
"""
import time
from dataclasses import dataclass
from typing import Callable, List, Optional, Tuple

import numpy as np
from loguru import logger

from src.models import (
    GOLDEN_COUNTS,
    BUDGET_INTERPOLATED_PARAMS,
    as_dtype,
    backward,
    build_budgeted_mlps,
    build_imlp,
    build_mixer,
    build_mlp,
    build_scnn,
    build_smlp,
    forward,
    load_prior_into,
)
from src.structured_ops import (
    PatchGrid,
    build_patchify_matrix,
    build_transpose_matrix,
    conv_to_fc,
    expand_shared_weight,
)
from src.tensor_core import (
    DTYPE,
    ORACLE_DTYPE,
    ConvSpec,
    Rng,
    conv2d_backward,
    conv2d_forward,
    cross_entropy,
    cross_entropy_backward,
    finite_diff_grad,
    gelu,
    gelu_backward,
    layernorm,
    layernorm_backward,
    max_relative_error,
)

FAULTS = ("conv",)
CONV_TOL_32 = 1e-4
CONV_TOL_64 = 1e-10
GRAD_TOL = 1e-3


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0


# ============== 個別チェック ==============

def check_conv_equivalence(
    rng: Rng, pairs: int = 3, fault: Optional[str] = None
) -> Tuple[bool, str]:
    """S-CNN の各層形状で W_F·vec(x) = vec(F*x)（32bit と 64bit）"""
    scnn = build_scnn()
    worst32, worst64 = 0.0, 0.0
    for layer in scnn.layers[:-1]:
        spec = layer.conv
        for _ in range(pairs):
            kernel = rng.uniform(-1.0, 1.0, (spec.out_channels, spec.in_channels, 3, 3), ORACLE_DTYPE)
            x = rng.uniform(-1.0, 1.0, layer.in_shape, ORACLE_DTYPE)
            fc = conv_to_fc(kernel, spec, layer.in_shape)
            if fault == "conv":
                fc.matrix[0, 0] += 1.0
            err64 = np.max(np.abs(fc.apply(x.reshape(-1)) - conv2d_forward(x, kernel, spec).reshape(-1)))
            k32, x32 = kernel.astype(DTYPE), x.astype(DTYPE)
            fc32 = conv_to_fc(k32, spec, layer.in_shape)
            if fault == "conv":
                fc32.matrix[0, 0] += 1.0
            err32 = np.max(np.abs(fc32.apply(x32.reshape(-1)) - conv2d_forward(x32, k32, spec).reshape(-1)))
            worst32, worst64 = max(worst32, float(err32)), max(worst64, float(err64))
    ok = worst32 < CONV_TOL_32 and worst64 < CONV_TOL_64
    return ok, f"max |err| 32bit {worst32:.2e}, 64bit {worst64:.2e}"


def brute_force_patches(image: np.ndarray, patch: int) -> np.ndarray:
    """ループでパッチを切り出して連結（パッチ優先、パッチ内チャネル優先）"""
    c, h, w = image.shape
    pieces = []
    for row in range(h // patch):
        for col in range(w // patch):
            pieces.append(image[:, row * patch:(row + 1) * patch, col * patch:(col + 1) * patch].reshape(-1))
    return np.concatenate(pieces)


def check_permutations(rng: Rng) -> Tuple[bool, str]:
    """パッチ化行列と転置行列の正しさと直交性"""
    for h, w, p in ((4, 4, 2), (32, 32, 8), (6, 9, 3)):
        image = rng.normal((1, h, w), dtype=ORACLE_DTYPE)
        patchify = build_patchify_matrix(PatchGrid(h, w, p))
        if not np.array_equal(patchify.apply(image.reshape(-1)), brute_force_patches(image, p)):
            return False, f"patchify mismatch for H={h} W={w} P={p}"
        x = rng.normal((h, w), dtype=ORACLE_DTYPE)
        transpose = build_transpose_matrix(h, w)
        if not np.array_equal(transpose.apply(x.reshape(-1)), x.T.reshape(-1)):
            return False, f"transpose mismatch for {h}x{w}"
        for m in (patchify.matrix, transpose.matrix):
            if not np.array_equal(m @ m.T, np.eye(m.shape[0], dtype=m.dtype)):
                return False, f"not orthogonal for H={h} W={w}"
    return True, "patchify / transpose exact, M·Mᵀ = I"


def check_toeplitz(rng: Rng, trials: int = 50) -> Tuple[bool, str]:
    """ブロック対角適用 = 行ごとの適用"""
    for _ in range(trials):
        repeats = int(rng.integers(1, 9))
        c_in, c_out = int(rng.integers(1, 9)), int(rng.integers(1, 9))
        w_r = rng.normal((c_out, c_in), dtype=ORACLE_DTYPE)
        x = rng.normal((repeats, c_in), dtype=ORACLE_DTYPE)
        wtilde = expand_shared_weight(w_r, repeats)
        if not np.allclose(wtilde.apply(x.reshape(-1)), (x @ w_r.T).reshape(-1), rtol=0, atol=1e-12):
            return False, f"mismatch for R={repeats} {c_out}x{c_in}"
    return True, f"{trials} random shared weights"


def check_parameter_counts() -> Tuple[bool, str]:
    mlp1, mlp2 = build_budgeted_mlps()
    counts = {
        "s-mlp": build_smlp().parameter_count(),
        "s-cnn": build_scnn().parameter_count(),
        "s-mlp-mixer-pair": build_imlp("mixer").parameter_count(),
        "mlp-mixer": build_mixer().parameter_count(),
        "mlp-1": mlp1.parameter_count(),
        "mlp-2": mlp2.parameter_count(),
    }
    wrong = [f"{k}={v:,}" for k, v in counts.items() if v != GOLDEN_COUNTS[k]]
    if mlp1.interpolated_parameter_count() != BUDGET_INTERPOLATED_PARAMS:
        wrong.append(f"mlp-1 interpolated={mlp1.interpolated_parameter_count():,}")
    if wrong:
        return False, "wrong: " + ", ".join(wrong)
    return True, ", ".join(f"{v:,}" for v in counts.values())


def _grad_error(f: Callable[[np.ndarray], float], x: np.ndarray, analytic: np.ndarray, rng: Rng, coords: int) -> float:
    picks = rng.generator.choice(x.size, size=min(coords, x.size), replace=False)
    numeric = finite_diff_grad(f, x, coords=picks)
    return max_relative_error(analytic.reshape(-1)[picks], numeric.reshape(-1)[picks])


def check_gradients(rng: Rng, coords: int = 200) -> Tuple[bool, str]:
    """各プリミティブと2層モデルを中心差分と比較（64bit）"""
    errors = {}
    labels = np.array([1, 0, 2])

    x = rng.normal((3, 2, 6, 6), dtype=ORACLE_DTYPE)
    spec = ConvSpec(3, 2, 1, 2, 3)
    kernel = rng.normal((3, 2, 3, 3), dtype=ORACLE_DTYPE)
    g = rng.normal((3, 3, 3, 3), dtype=ORACLE_DTYPE)
    gx, gk, _ = conv2d_backward(g, x, kernel, spec)
    errors["conv2d.x"] = _grad_error(lambda v: float((conv2d_forward(v, kernel, spec) * g).sum()), x, gx, rng, coords)
    errors["conv2d.k"] = _grad_error(lambda v: float((conv2d_forward(x, v, spec) * g).sum()), kernel, gk, rng, coords)

    z = rng.normal((4, 12), dtype=ORACLE_DTYPE)
    gz = rng.normal((4, 12), dtype=ORACLE_DTYPE)
    errors["layernorm"] = _grad_error(
        lambda v: float((layernorm(v) * gz).sum()), z, layernorm_backward(gz, z)[0], rng, coords
    )
    errors["gelu"] = _grad_error(lambda v: float((gelu(v) * gz).sum()), z, gelu_backward(gz, z), rng, coords)

    logits = rng.normal((3, 4), dtype=ORACLE_DTYPE)
    errors["cross_entropy"] = _grad_error(
        lambda v: cross_entropy(v, labels), logits, cross_entropy_backward(logits, labels), rng, coords
    )

    model = as_dtype(build_mlp([8], in_dim=6, classes=3, norm_layers=(1,), seed=3), ORACLE_DTYPE)
    batch = rng.normal((3, 6), dtype=ORACLE_DTYPE)
    grads = backward(model, cross_entropy_backward(forward(model, batch), labels))
    weight = model.params[0]["weight"]

    def loss_of(w):
        saved = weight.copy()
        weight[...] = w
        value = cross_entropy(forward(model, batch, keep_cache=False), labels)
        weight[...] = saved
        return value

    errors["two_layer"] = _grad_error(loss_of, weight.copy(), grads["0.weight"], rng, coords)
    worst = max(errors, key=errors.get)
    return errors[worst] < GRAD_TOL, f"worst {worst} {errors[worst]:.2e}"


def check_alpha_one_equivalence(rng: Rng) -> Tuple[bool, str]:
    """W_P と分類器を写した I-MLP は事前モデルと同じ出力（バイアスありと重みのみの両方）"""
    batch = rng.normal((4, 3, 32, 32), dtype=ORACLE_DTYPE)
    worst = 0.0
    for kind, prior in (("cnn", build_scnn(seed=1)), ("mixer", build_mixer(seed=1))):
        prior = as_dtype(prior, ORACLE_DTYPE)
        imlp = as_dtype(build_imlp(kind, seed=2), ORACLE_DTYPE)
        # 重みだけを写す場合は事前モデル側のバイアスを 0 にして比較
        unbiased = prior.copy()
        for i in unbiased.interpolable_layers():
            unbiased.params[i]["bias"][...] = 0.0
        for target, include_bias in ((prior, True), (unbiased, False)):
            loaded = load_prior_into(imlp, target, include_bias=include_bias)
            diff = np.max(np.abs(
                forward(loaded, batch, keep_cache=False) - forward(target, batch, keep_cache=False)
            ))
            worst = max(worst, float(diff))
    return worst < 1e-4, f"max |logit diff| {worst:.2e}"


# ============== 実行 ==============

def run_selftest(inject_fault: Optional[str] = None, seed: int = 0) -> List[CheckResult]:
    if inject_fault is not None and inject_fault not in FAULTS:
        raise ValueError(f"Unknown fault {inject_fault!r}, choose from {FAULTS}")
    rng = Rng(seed)
    checks = [
        ("conv/FC equivalence", lambda: check_conv_equivalence(rng, fault=inject_fault)),
        ("permutations", lambda: check_permutations(rng)),
        ("Toeplitz weight sharing", lambda: check_toeplitz(rng)),
        ("parameter counts", check_parameter_counts),
        ("gradient checks", lambda: check_gradients(rng)),
        ("alpha=1 equivalence", lambda: check_alpha_one_equivalence(rng)),
    ]
    results = []
    for name, check in checks:
        start = time.perf_counter()
        try:
            passed, detail = check()
        except Exception as e:
            logger.error(f"Self-test {name} raised: {e}")
            passed, detail = False, f"{type(e).__name__}: {e}"
        results.append(CheckResult(name, passed, detail, time.perf_counter() - start))
        logger.debug(f"{name}: {'PASS' if passed else 'FAIL'} ({detail})")
    return results
