"""
テスト共通フィクスチャ
"""
import os
import sys
from pathlib import Path

import numpy as np
import pytest

# プロジェクトルートディレクトリをパスに追加
sys.path.insert(0, str(Path(__file__).parent.parent))

from src.data_io import write_cifar_file
from src.tensor_core import Rng


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: 時間のかかるテスト（実データの受け入れテストを含む）")


@pytest.fixture
def rng():
    return Rng(1234)


@pytest.fixture
def np_rng():
    return np.random.default_rng(1234)


def make_synthetic_images(n_per_class: int, classes: int, seed: int):
    """クラスごとに平均輝度が異なる uint8 画像（線形分離しやすい）"""
    gen = np.random.default_rng(seed)
    labels = np.repeat(np.arange(classes), n_per_class)
    base = (labels * (200 // classes)).reshape(-1, 1, 1, 1)
    noise = gen.integers(0, 40, size=(labels.size, 3, 32, 32))
    images = np.clip(base + noise, 0, 255).astype(np.uint8)
    order = gen.permutation(labels.size)
    return images[order], labels[order]


@pytest.fixture
def synthetic_images():
    return make_synthetic_images


@pytest.fixture
def synthetic_cifar(tmp_path):
    """CIFAR-10 バイナリ形式の小さな合成データ（学習 5×20 枚、テスト 20 枚）"""
    root = tmp_path / "cifar-10-batches-bin"
    for i in range(1, 6):
        images, labels = make_synthetic_images(2, 10, seed=i)
        write_cifar_file(root / f"data_batch_{i}.bin", images, labels)
    images, labels = make_synthetic_images(2, 10, seed=99)
    write_cifar_file(root / "test_batch.bin", images, labels)
    return tmp_path


@pytest.fixture
def cifar_dir():
    """実データのディレクトリ（BIASBLEND_DATA が未設定ならスキップ）"""
    path = os.environ.get("BIASBLEND_DATA")
    if not path:
        pytest.skip("BIASBLEND_DATA is not set")
    return path
