"""
データ入出力 - CIFAR-10/100 バイナリの読み込み、正規化、データ拡張、層化サブセット
"""
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from loguru import logger

from src.tensor_core import DTYPE, ConfigError, DataFormatError, Rng

IMAGE_BYTES = 3072
CROP_PAD = 4
NORMALIZE_EPS = 1e-8
STATS_CHUNK = 2000


class CifarVariant(str, Enum):
    C10 = "cifar10"
    C100 = "cifar100"

    @property
    def record_size(self) -> int:
        """1ラベル + 3072 画素（C100 は coarse/fine の2ラベル）"""
        return IMAGE_BYTES + (1 if self == CifarVariant.C10 else 2)

    @property
    def classes(self) -> int:
        return 10 if self == CifarVariant.C10 else 100

    @property
    def folder(self) -> str:
        return "cifar-10-batches-bin" if self == CifarVariant.C10 else "cifar-100-binary"

    def files(self, split: "Split") -> List[str]:
        if self == CifarVariant.C10:
            if split == Split.TRAIN:
                return [f"data_batch_{i}.bin" for i in range(1, 6)]
            return ["test_batch.bin"]
        return ["train.bin"] if split == Split.TRAIN else ["test.bin"]


class Split(str, Enum):
    TRAIN = "train"
    TEST = "test"


@dataclass
class LabeledImage:
    """画素 (3,32,32) は [0,1] にスケール済み"""
    pixels: np.ndarray
    label: int


@dataclass
class DatasetHandle:
    """読み込み後は変更しない。画素は uint8 のまま保持"""
    split: Split
    variant: CifarVariant
    images: np.ndarray
    labels: np.ndarray
    coarse_labels: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        self.images.setflags(write=False)
        self.labels.setflags(write=False)

    @property
    def classes(self) -> int:
        return self.variant.classes

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    def __getitem__(self, index: int) -> LabeledImage:
        return LabeledImage(
            pixels=self.images[index].astype(DTYPE) / DTYPE(255.0),
            label=int(self.labels[index]),
        )

    def pixels(self, indices: Optional[np.ndarray] = None) -> np.ndarray:
        """[0,1] スケールの float32 画素 (n,3,32,32)"""
        raw = self.images if indices is None else self.images[indices]
        return raw.astype(DTYPE) / DTYPE(255.0)

    def take(self, indices: np.ndarray) -> "DatasetHandle":
        indices = np.asarray(indices, dtype=np.int64)
        return DatasetHandle(
            split=self.split,
            variant=self.variant,
            images=self.images[indices].copy(),
            labels=self.labels[indices].copy(),
            coarse_labels=None if self.coarse_labels is None else self.coarse_labels[indices].copy(),
        )

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.classes)


# ============== 読み込み / 書き出し ==============

def _resolve_dir(path: Union[str, Path], variant: CifarVariant) -> Path:
    root = Path(path)
    nested = root / variant.folder
    return nested if nested.is_dir() else root


def _parse_records(raw: np.ndarray, variant: CifarVariant, source: Path):
    size = variant.record_size
    if raw.size == 0:
        raise DataFormatError(f"Empty CIFAR file {source} (expected {size}-byte records)", 0)
    if raw.size % size:
        complete = raw.size - raw.size % size
        raise DataFormatError(
            f"Truncated CIFAR file {source}: {raw.size} bytes is not a multiple of the "
            f"{size}-byte record size",
            complete,
        )
    records = raw.reshape(-1, size)
    pixels = records[:, size - IMAGE_BYTES:].reshape(-1, 3, 32, 32)
    labels = records[:, size - IMAGE_BYTES - 1].astype(np.int64)
    coarse = records[:, 0].astype(np.int64) if variant == CifarVariant.C100 else None
    if labels.max() >= variant.classes:
        bad = int(np.argmax(labels >= variant.classes))
        raise DataFormatError(
            f"Label {labels[bad]} out of range for {variant.value} in {source}", bad * size
        )
    return pixels, labels, coarse


def load_cifar(
    path: Union[str, Path],
    variant: Union[CifarVariant, str] = CifarVariant.C10,
    split: Union[Split, str] = Split.TRAIN,
) -> DatasetHandle:
    """公式バイナリ形式を読み込む（ファイル内のレコード順を保持）"""
    variant = CifarVariant(variant)
    split = Split(split)
    directory = _resolve_dir(path, variant)

    images, labels, coarse = [], [], []
    for name in variant.files(split):
        source = directory / name
        if not source.is_file():
            raise DataFormatError(
                f"CIFAR binary file not found: {source} "
                f"(expected {variant.record_size}-byte records in {variant.folder}/)"
            )
        raw = np.fromfile(source, dtype=np.uint8)
        pixels, lab, co = _parse_records(raw, variant, source)
        images.append(pixels)
        labels.append(lab)
        if co is not None:
            coarse.append(co)

    handle = DatasetHandle(
        split=split,
        variant=variant,
        images=np.concatenate(images),
        labels=np.concatenate(labels),
        coarse_labels=np.concatenate(coarse) if coarse else None,
    )
    logger.info(f"Loaded {variant.value} {split.value}: {len(handle)} images")
    return handle


def serialize_record(handle: DatasetHandle, index: int) -> bytes:
    """1レコードを元のバイト列に戻す"""
    label = np.uint8(handle.labels[index])
    head = [label]
    if handle.variant == CifarVariant.C100:
        coarse = handle.coarse_labels[index] if handle.coarse_labels is not None else 0
        head = [np.uint8(coarse), label]
    return bytes(np.array(head, dtype=np.uint8)) + handle.images[index].tobytes()


def write_cifar_file(
    path: Union[str, Path],
    images: np.ndarray,
    labels: Sequence[int],
    variant: Union[CifarVariant, str] = CifarVariant.C10,
    coarse_labels: Optional[Sequence[int]] = None,
) -> Path:
    """uint8 画像 (n,3,32,32) とラベルを公式バイナリ形式で書き出す"""
    variant = CifarVariant(variant)
    images = np.asarray(images, dtype=np.uint8).reshape(-1, IMAGE_BYTES)
    labels = np.asarray(labels, dtype=np.uint8).reshape(-1, 1)
    if images.shape[0] != labels.shape[0]:
        raise ValueError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    columns = [labels, images]
    if variant == CifarVariant.C100:
        coarse = np.zeros_like(labels) if coarse_labels is None else (
            np.asarray(coarse_labels, dtype=np.uint8).reshape(-1, 1)
        )
        columns = [coarse, labels, images]
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    np.concatenate(columns, axis=1).tofile(out)
    return out


# ============== 正規化 ==============

@dataclass(frozen=True)
class Normalizer:
    """学習分割から一度だけ計算したチャネルごとの平均・標準偏差"""
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def from_dataset(cls, train: DatasetHandle, eps: float = NORMALIZE_EPS) -> "Normalizer":
        """uint8 画像をチャンクごとに積算して統計を求める"""
        channels = train.images.shape[1]
        sums = np.zeros(channels, dtype=np.float64)
        squares = np.zeros(channels, dtype=np.float64)
        for start in range(0, len(train), STATS_CHUNK):
            block = train.images[start:start + STATS_CHUNK].astype(np.float64)
            sums += block.sum(axis=(0, 2, 3))
            squares += np.square(block).sum(axis=(0, 2, 3))
        count = len(train) * train.images.shape[2] * train.images.shape[3]
        raw_mean = sums / count
        raw_var = np.maximum(squares / count - raw_mean ** 2, 0.0)
        mean = raw_mean / 255.0
        std = np.maximum(np.sqrt(raw_var) / 255.0, eps)
        logger.debug(f"Channel mean {np.round(mean, 4)}, std {np.round(std, 4)}")
        return cls(mean=mean.astype(DTYPE), std=std.astype(DTYPE))

    def __call__(self, batch: np.ndarray) -> np.ndarray:
        return normalize(batch, self)


def normalize(batch: np.ndarray, stats: Normalizer) -> np.ndarray:
    """(x - mean) / std をチャネルごとに適用（テスト分割にも学習分割の統計を使う）"""
    shape = (1, -1, 1, 1) if batch.ndim == 4 else (-1, 1, 1)
    return ((batch - stats.mean.reshape(shape)) / stats.std.reshape(shape)).astype(DTYPE)


# ============== データ拡張 ==============

def hflip(image: np.ndarray) -> np.ndarray:
    return image[..., ::-1].copy()


def augment(
    image: np.ndarray,
    rng: Rng,
    offset: Optional[Tuple[int, int]] = None,
    flip: Optional[bool] = None,
) -> np.ndarray:
    """反射パディング4画素 → 32×32 ランダムクロップ → 確率0.5で左右反転

    offset / flip を渡すと乱数の代わりにその値を使う（中央は (4, 4)）。
    """
    c, h, w = image.shape
    dy, dx = offset if offset is not None else tuple(rng.integers(0, 2 * CROP_PAD + 1, size=2))
    do_flip = flip if flip is not None else bool(rng.random() < 0.5)
    padded = np.pad(image, ((0, 0), (CROP_PAD, CROP_PAD), (CROP_PAD, CROP_PAD)), mode="reflect")
    out = padded[:, dy:dy + h, dx:dx + w]
    return hflip(out) if do_flip else out.copy()


def augment_batch(batch: np.ndarray, rng: Rng) -> np.ndarray:
    """バッチ全体に augment を適用（オフセットと反転は先にまとめて引く）"""
    n, c, h, w = batch.shape
    offsets = rng.integers(0, 2 * CROP_PAD + 1, size=(n, 2))
    flips = rng.random(n) < 0.5
    padded = np.pad(
        batch, ((0, 0), (0, 0), (CROP_PAD, CROP_PAD), (CROP_PAD, CROP_PAD)), mode="reflect"
    )
    out = np.empty_like(batch)
    for i in range(n):
        dy, dx = offsets[i]
        crop = padded[i, :, dy:dy + h, dx:dx + w]
        out[i] = crop[..., ::-1] if flips[i] else crop
    return out


# ============== サブセット / バッチ ==============

def subset(handle: DatasetHandle, n: int, seed: int = 0) -> DatasetHandle:
    """決定的な層化サンプル（クラスごとの件数差は最大1、元の順序を保持）"""
    total = len(handle)
    if n < handle.classes:
        raise ConfigError("subset", f"{n} is smaller than the class count {handle.classes}")
    if n > total:
        raise ConfigError("subset", f"{n} exceeds the {total} available records")
    if n == total:
        return handle

    rng = Rng(seed)
    base, extra = divmod(n, handle.classes)
    # 余りを受け取るクラスもシードで決める
    bonus = set(rng.permutation(handle.classes)[:extra].tolist())
    chosen = []
    for cls in range(handle.classes):
        members = np.flatnonzero(handle.labels == cls)
        quota = base + (1 if cls in bonus else 0)
        if quota > members.size:
            raise ConfigError(
                "subset", f"class {cls} has {members.size} records, {quota} requested"
            )
        chosen.append(members[rng.permutation(members.size)[:quota]])
    indices = np.sort(np.concatenate(chosen))
    logger.info(f"Stratified subset: {n} images (seed={seed})")
    return handle.take(indices)


def iterate_batches(
    count: int, batch_size: int, rng: Optional[Rng] = None
) -> Iterator[np.ndarray]:
    """インデックスのミニバッチ列（rng があればシャッフル）"""
    if count <= 0:
        raise ConfigError("dataset", "cannot iterate over an empty dataset")
    if batch_size <= 0:
        raise ConfigError("batch_size", f"must be positive, got {batch_size}")
    order = rng.permutation(count) if rng is not None else np.arange(count)
    for start in range(0, count, batch_size):
        yield order[start:start + batch_size]
