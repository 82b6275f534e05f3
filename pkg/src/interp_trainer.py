"""
補間学習 - I-MLP と事前モデルの対学習、毎エポックの重み補間、スケジュール、評価
"""
import csv
import json
import time
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, Iterable, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from loguru import logger

from src.data_io import (
    NORMALIZE_EPS,
    CifarVariant,
    DatasetHandle,
    Normalizer,
    augment_batch,
    iterate_batches,
    load_cifar,
    normalize,
    subset,
)
from src.models import (
    Model,
    PriorKind,
    backward,
    build_budget_priors,
    build_budgeted_mlps,
    build_imlp,
    build_mixer,
    build_plain_mlp,
    build_scnn,
    check_pair,
    extract_prior_fc,
    forward,
)
from src.tensor_core import (
    AdamState,
    ConfigError,
    Rng,
    ScheduleError,
    ShapeError,
    adam_step,
    cross_entropy,
    cross_entropy_backward,
)

METRICS_HEADER = ["epoch", "model", "train_loss", "test_top1", "alpha", "seconds"]
EVAL_BATCH = 500


# ============== スケジュール ==============

class ScheduleMode(str, Enum):
    CONSTANT = "constant"
    POLY_DECAY = "poly_decay"
    TEST_TIME_ONLY = "test_time_only"
    NONE = "none"


@dataclass
class ScheduleSpec:
    """補間重みの方針 α[t] = a(1 − t/t_max)^k"""
    mode: ScheduleMode = ScheduleMode.CONSTANT
    a: float = 0.0
    k: float = 0.0
    alpha_test: float = 0.0
    layer_mask: Optional[List[bool]] = None

    def __post_init__(self):
        self.mode = ScheduleMode(self.mode)
        for name in ("a", "alpha_test"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ScheduleError(f"{name} must lie in [0, 1], got {value}")
        if self.k < 0:
            raise ScheduleError(f"decay exponent k must be >= 0, got {self.k}")

    @property
    def interpolates_during_training(self) -> bool:
        return self.mode in (ScheduleMode.CONSTANT, ScheduleMode.POLY_DECAY)

    def mask_for(self, layer_count: int) -> List[bool]:
        if self.layer_mask is None:
            return [True] * layer_count
        if len(self.layer_mask) != layer_count:
            raise ConfigError(
                "layer_mask",
                f"has {len(self.layer_mask)} entries but the pair has {layer_count} interpolable layers",
            )
        return list(self.layer_mask)

    def to_dict(self) -> dict:
        data = asdict(self)
        data["mode"] = self.mode.value
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "ScheduleSpec":
        return cls(**data)


def schedule_alpha(spec: ScheduleSpec, t: int, t_max: int) -> float:
    """学習中にエポック t で使う α（TestTimeOnly / None は 0）"""
    if t_max <= 0:
        raise ScheduleError(f"t_max must be positive, got {t_max}")
    if t < 0 or t > t_max:
        raise ScheduleError(f"epoch {t} outside [0, {t_max}]")
    if not spec.interpolates_during_training:
        return 0.0
    if spec.mode == ScheduleMode.CONSTANT or spec.k == 0:
        return spec.a
    return spec.a * (1.0 - t / t_max) ** spec.k


# ============== 設定 / 記録 ==============

class Arch(str, Enum):
    STANDARD = "standard"
    BUDGET_1 = "budget-1"
    BUDGET_2 = "budget-2"


@dataclass
class TrainConfig:
    """1回の学習の設定（既定値は 100 エポック、バッチ 128、Adam 1e-4）"""
    epochs: int = 100
    batch_size: int = 128
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    dataset: str = "cifar10"
    augment: bool = True
    schedule: ScheduleSpec = field(default_factory=ScheduleSpec)
    prior_kind: str = "cnn"
    arch: str = "standard"
    subset: int = 0
    data_dir: Optional[str] = None
    normalize_eps: float = NORMALIZE_EPS
    interpolate_bias: bool = False
    interpolate_head: bool = False

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs", f"must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError("batch_size", f"must be >= 1, got {self.batch_size}")
        if self.learning_rate < 0:
            raise ConfigError("learning_rate", f"must be >= 0, got {self.learning_rate}")
        for name in ("beta1", "beta2"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ConfigError(name, f"must lie in [0, 1), got {getattr(self, name)}")
        if self.adam_eps <= 0 or self.normalize_eps <= 0:
            raise ConfigError("eps", "adam_eps and normalize_eps must be positive")
        if self.prior_kind not in ("cnn", "mixer", "none"):
            raise ConfigError("prior", f"unknown prior {self.prior_kind!r}")
        try:
            Arch(self.arch)
        except ValueError:
            raise ConfigError("arch", f"unknown architecture {self.arch!r}") from None

    @property
    def uses_prior(self) -> bool:
        return self.prior_kind != "none" and self.schedule.mode != ScheduleMode.NONE

    def to_dict(self) -> dict:
        data = asdict(self)
        data["schedule"] = self.schedule.to_dict()
        return data


@dataclass
class MetricsRecord:
    epoch: int
    model: str
    train_loss: float
    test_top1: float
    alpha_used: float
    wall_seconds: float

    def to_row(self) -> List[str]:
        # repr は float を可逆に書き出す
        return [
            str(self.epoch),
            self.model,
            repr(float(self.train_loss)),
            repr(float(self.test_top1)),
            repr(float(self.alpha_used)),
            repr(float(self.wall_seconds)),
        ]

    @classmethod
    def from_row(cls, row: Dict[str, str]) -> "MetricsRecord":
        return cls(
            epoch=int(row["epoch"]),
            model=row["model"],
            train_loss=float(row["train_loss"]),
            test_top1=float(row["test_top1"]),
            alpha_used=float(row["alpha"]),
            wall_seconds=float(row["seconds"]),
        )


def write_metrics_csv(records: Iterable[MetricsRecord], path) -> Path:
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(METRICS_HEADER)
        for record in records:
            writer.writerow(record.to_row())
    return out


def read_metrics_csv(path) -> List[MetricsRecord]:
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames != METRICS_HEADER:
            raise ValueError(f"Unexpected metrics header in {path}: {reader.fieldnames}")
        return [MetricsRecord.from_row(row) for row in reader]


class TrainingResult(NamedTuple):
    imlp: Model
    prior: Optional[Model]
    records: List[MetricsRecord]
    test_time_model: Optional[Model] = None


@dataclass
class TrainingData:
    """正規化統計は学習分割全体から一度だけ計算"""
    train: DatasetHandle
    test: DatasetHandle
    normalizer: Normalizer


def prepare_data(config: TrainConfig) -> TrainingData:
    if not config.data_dir:
        variant = CifarVariant(config.dataset)
        raise ConfigError(
            "data_dir",
            f"no dataset directory given (flag --data-dir or BIASBLEND_DATA); expected "
            f"{variant.folder}/ with {variant.record_size}-byte records",
        )
    train = load_cifar(config.data_dir, config.dataset, "train")
    test = load_cifar(config.data_dir, config.dataset, "test")
    normalizer = Normalizer.from_dataset(train, eps=config.normalize_eps)
    if config.subset:
        train = subset(train, config.subset, seed=config.seed)
    return TrainingData(train=train, test=test, normalizer=normalizer)


def derive_seeds(seed: int) -> Tuple[int, int, int]:
    """(I-MLP 初期化, 事前モデル初期化, データ) の独立シード"""
    children = np.random.SeedSequence(int(seed)).spawn(3)
    return tuple(int(child.generate_state(1)[0]) for child in children)


# ============== 補間 ==============

def interpolate_weights(w: np.ndarray, w_p: np.ndarray, alpha: float) -> np.ndarray:
    """(1 − α)·W + α·W_P（端点ではそれぞれをそのまま返す）"""
    if w.shape != w_p.shape:
        raise ShapeError(f"cannot interpolate {tuple(w.shape)} with {tuple(w_p.shape)}")
    if not 0.0 <= alpha <= 1.0:
        raise ScheduleError(f"alpha must lie in [0, 1], got {alpha}")
    if alpha == 0.0:
        return w.copy()
    if alpha == 1.0:
        return w_p.astype(w.dtype, copy=True)
    w64 = w.astype(np.float64, copy=False)
    p64 = w_p.astype(np.float64, copy=False)
    mixed = (1.0 - alpha) * w64 + alpha * p64
    # 丸めても min(W, W_P) ≤ 結果 ≤ max(W, W_P)
    np.clip(mixed, np.minimum(w64, p64), np.maximum(w64, p64), out=mixed)
    return mixed.astype(w.dtype, copy=False)


def apply_interpolation(
    imlp: Model,
    prior: Model,
    alpha: float,
    mask: Optional[Sequence[bool]] = None,
    include_bias: bool = False,
    include_head: bool = False,
) -> Model:
    """I-MLP の補間対象層の W をその場で補間。事前モデルは変更しない

    include_bias で展開バイアスも、include_head で形状が一致する分類器も補間する。
    """
    indices = imlp.interpolable_layers()
    mask = [True] * len(indices) if mask is None else list(mask)
    for i, fc, enabled in zip(indices, extract_prior_fc(prior), mask):
        if not enabled:
            continue
        p = imlp.params[i]
        p["weight"][...] = interpolate_weights(p["weight"], fc.matrix, alpha)
        if include_bias and fc.bias is not None:
            p["bias"][...] = interpolate_weights(p["bias"], fc.bias, alpha)
    if include_head:
        head, prior_head = imlp.params[-1], prior.params[-1]
        if head["weight"].shape == prior_head["weight"].shape:
            head["weight"][...] = interpolate_weights(head["weight"], prior_head["weight"], alpha)
            head["bias"][...] = interpolate_weights(head["bias"], prior_head["bias"], alpha)
    return imlp


def test_time_interpolate(
    imlp: Model, prior: Model, alpha_test: float, include_bias: bool = False, include_head: bool = False
) -> Model:
    """別々に学習した2モデルを一度だけ補間した評価専用モデル"""
    check_pair(imlp, prior)
    combined = imlp.copy()
    combined.arch = f"{imlp.arch}@test-time"
    return apply_interpolation(
        combined, prior, alpha_test, include_bias=include_bias, include_head=include_head
    )


# ============== 学習 / 評価 ==============

def _batch_pixels(
    data: DatasetHandle, indices: np.ndarray, normalizer: Optional[Normalizer],
    rng: Optional[Rng], augment: bool,
) -> np.ndarray:
    x = data.pixels(indices)
    if augment and rng is not None:
        x = augment_batch(x, rng)
    return normalize(x, normalizer) if normalizer is not None else x


def train_pair_epoch(
    models: Sequence[Model],
    states: Sequence[AdamState],
    data: DatasetHandle,
    rng: Rng,
    batch_size: int = 128,
    normalizer: Optional[Normalizer] = None,
    augment: bool = True,
) -> List[float]:
    """同じシャッフル順・同じ拡張バッチで各モデルを独立に1エポック学習し、平均損失を返す"""
    if len(data) == 0:
        raise ConfigError("dataset", "cannot train on an empty dataset")
    totals = [0.0] * len(models)
    for indices in iterate_batches(len(data), batch_size, rng):
        x = _batch_pixels(data, indices, normalizer, rng, augment)
        y = data.labels[indices]
        for k, (model, state) in enumerate(zip(models, states)):
            logits = forward(model, x)
            totals[k] += cross_entropy(logits, y) * len(indices)
            grads = backward(model, cross_entropy_backward(logits, y))
            adam_step(model.named_parameters(), grads, state)
    return [total / len(data) for total in totals]


def train_epoch(
    model: Model,
    state: AdamState,
    data: DatasetHandle,
    rng: Rng,
    batch_size: int = 128,
    normalizer: Optional[Normalizer] = None,
    augment: bool = True,
) -> Tuple[Model, float]:
    """1モデルを1エポック学習 -> (モデル, 平均損失)"""
    loss = train_pair_epoch([model], [state], data, rng, batch_size, normalizer, augment)[0]
    return model, loss


def _logits(model: Model, data: DatasetHandle, normalizer: Optional[Normalizer]):
    for indices in iterate_batches(len(data), EVAL_BATCH):
        x = _batch_pixels(data, indices, normalizer, None, False)
        yield forward(model, x, keep_cache=False), data.labels[indices]


def evaluate(model: Model, data: DatasetHandle, normalizer: Optional[Normalizer] = None) -> float:
    """top-1 正解率 (%)。同点は小さいクラス番号が勝つ"""
    correct = 0
    for logits, labels in _logits(model, data, normalizer):
        correct += int((np.argmax(logits, axis=1) == labels).sum())
    return 100.0 * correct / len(data)


def evaluate_loss(model: Model, data: DatasetHandle, normalizer: Optional[Normalizer] = None) -> float:
    """データセット全体の平均交差エントロピー"""
    total = 0.0
    for logits, labels in _logits(model, data, normalizer):
        total += cross_entropy(logits, labels) * len(labels)
    return total / len(data)


# ============== 対学習 ==============

def build_pair(config: TrainConfig, imlp_seed: int, prior_seed: int) -> Tuple[Model, Optional[Model]]:
    """設定に対応する (I-MLP, 事前モデル)。事前モデルを使わない場合は None"""
    arch = Arch(config.arch)
    classes = 100 if config.dataset == "cifar100" else 10
    if arch != Arch.STANDARD:
        pick = 0 if arch == Arch.BUDGET_1 else 1
        imlp = build_budgeted_mlps(imlp_seed, classes)[pick]
        prior = build_budget_priors(prior_seed, classes)[pick] if config.uses_prior else None
        return imlp, prior
    kind = PriorKind.MIXER if config.prior_kind == "mixer" else PriorKind.CNN
    if not config.uses_prior:
        return build_plain_mlp(kind, imlp_seed, classes), None
    imlp = build_imlp(kind, imlp_seed, classes)
    prior = build_scnn(prior_seed, classes) if kind == PriorKind.CNN else build_mixer(prior_seed, classes)
    return imlp, prior


def run_interpolated_training(
    config: TrainConfig,
    data: Optional[TrainingData] = None,
    on_epoch=None,
) -> TrainingResult:
    """毎エポック: 両モデルを独立に学習 → W_P を抽出して補間 → 評価

    on_epoch(epoch, records) はエポックごとに呼ばれる（チェックポイント保存など）。
    """
    imlp_seed, prior_seed, data_seed = derive_seeds(config.seed)
    imlp, prior = build_pair(config, imlp_seed, prior_seed)
    mask = None
    if prior is not None:
        # 学習開始前に次元を検査
        check_pair(imlp, prior)
        mask = config.schedule.mask_for(len(imlp.interpolable_layers()))
    if data is None:
        data = prepare_data(config)

    models = [imlp] + ([prior] if prior is not None else [])
    states = [
        AdamState(config.learning_rate, config.beta1, config.beta2, config.adam_eps) for _ in models
    ]
    data_rng = Rng(data_seed)
    records: List[MetricsRecord] = []
    logger.info(
        f"Training {imlp.arch}"
        + (f" + {prior.arch}" if prior is not None else "")
        + f" for {config.epochs} epochs on {len(data.train)} images"
    )

    for t in range(config.epochs):
        start = time.perf_counter()
        alpha = schedule_alpha(config.schedule, t, config.epochs)
        losses = train_pair_epoch(
            models, states, data.train, data_rng, config.batch_size, data.normalizer, config.augment
        )
        if prior is not None and config.schedule.interpolates_during_training:
            apply_interpolation(
                imlp, prior, alpha, mask, config.interpolate_bias, config.interpolate_head
            )
        elapsed = time.perf_counter() - start

        epoch_records = []
        for model, loss in zip(models, losses):
            top1 = evaluate(model, data.test, data.normalizer)
            epoch_records.append(MetricsRecord(t + 1, model.arch, loss, top1, alpha, elapsed))
        records.extend(epoch_records)
        summary = ", ".join(f"{r.model} loss={r.train_loss:.4f} top1={r.test_top1:.2f}" for r in epoch_records)
        logger.info(f"Epoch {t + 1}/{config.epochs} (α={alpha:g}): {summary}")
        if on_epoch is not None:
            on_epoch(t + 1, epoch_records)

    combined = None
    if prior is not None and config.schedule.mode == ScheduleMode.TEST_TIME_ONLY:
        start = time.perf_counter()
        combined = test_time_interpolate(
            imlp, prior, config.schedule.alpha_test, config.interpolate_bias, config.interpolate_head
        )
        top1 = evaluate(combined, data.test, data.normalizer)
        loss = evaluate_loss(combined, data.train, data.normalizer)
        records.append(MetricsRecord(
            config.epochs, combined.arch, loss, top1, config.schedule.alpha_test,
            time.perf_counter() - start,
        ))
        logger.info(f"Test-time interpolation α={config.schedule.alpha_test:g}: top1={top1:.2f}")

    return TrainingResult(imlp, prior, records, combined)


def final_accuracies(records: Sequence[MetricsRecord]) -> Dict[str, float]:
    """モデルごとの最終エポックの top-1"""
    final: Dict[str, float] = {}
    for record in records:
        final[record.model] = record.test_top1
    return final


def write_summary(result: TrainingResult, config: TrainConfig, path) -> Path:
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    summary = {
        "final_top1": final_accuracies(result.records),
        "imlp": result.imlp.arch,
        "epochs": config.epochs,
        "config": config.to_dict(),
    }
    with open(out, "w", encoding="utf-8") as f:
        json.dump(summary, f, ensure_ascii=False, indent=2)
    return out


# ============== スイープ ==============

@dataclass
class SweepRow:
    value: float
    seed: int
    top1: float


def aggregate_rows(rows: Sequence[SweepRow]) -> List[Tuple[float, float, float]]:
    """値ごとの (値, 平均, 標本標準偏差)。シード1つなら std = 0"""
    table = []
    for value in sorted({row.value for row in rows}):
        scores = np.array([row.top1 for row in rows if row.value == value], dtype=np.float64)
        std = float(scores.std(ddof=1)) if scores.size > 1 else 0.0
        table.append((value, float(scores.mean()), std))
    return table


def alpha_sweep(
    config: TrainConfig,
    alphas: Sequence[float],
    seeds: Sequence[int] = (0,),
    data: Optional[TrainingData] = None,
) -> Tuple[List[SweepRow], List[Tuple[float, float, float]]]:
    """(α, シード) ごとに学習し、I-MLP の最終 top-1 を集計"""
    for alpha in alphas:
        if not 0.0 <= alpha <= 1.0:
            raise ScheduleError(f"alpha must lie in [0, 1], got {alpha}")
    if data is None:
        data = prepare_data(config)
    rows: List[SweepRow] = []
    for alpha in alphas:
        for seed in seeds:
            run_config = TrainConfig(**{
                **config.__dict__,
                "seed": seed,
                "schedule": ScheduleSpec(
                    mode=ScheduleMode.CONSTANT, a=alpha, layer_mask=config.schedule.layer_mask
                ),
            })
            result = run_interpolated_training(run_config, data)
            rows.append(SweepRow(alpha, seed, final_accuracies(result.records)[result.imlp.arch]))
            logger.info(f"α={alpha:g} seed={seed}: top1={rows[-1].top1:.2f}")
    return rows, aggregate_rows(rows)
