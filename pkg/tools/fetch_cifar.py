#!/usr/bin/env python3
"""
CIFAR 取得ツール - 公式バイナリ版アーカイブをダウンロードして展開
"""
import sys
import asyncio
import argparse
import tarfile
from pathlib import Path

import httpx

# プロジェクトルートディレクトリをパスに追加
sys.path.insert(0, str(Path(__file__).parent.parent))

from src.config import settings
from src.data_io import CifarVariant, Split, load_cifar

ARCHIVES = {
    CifarVariant.C10: "https://www.cs.toronto.edu/~kriz/cifar-10-binary.tar.gz",
    CifarVariant.C100: "https://www.cs.toronto.edu/~kriz/cifar-100-binary.tar.gz",
}


class CifarFetcher:
    """CIFAR ダウンローダー"""

    def __init__(self, target: Path):
        self.target = target

    async def download(self, url: str) -> Path:
        """アーカイブをストリーミングで保存"""
        self.target.mkdir(parents=True, exist_ok=True)
        archive = self.target / url.rsplit("/", 1)[-1]
        if archive.exists():
            print(f"📦 既存のアーカイブを使用します: {archive}")
            return archive

        print(f"⬇️  ダウンロード中: {url}")
        partial = archive.with_suffix(".part")
        async with httpx.AsyncClient(timeout=60.0, follow_redirects=True) as client:
            async with client.stream("GET", url) as response:
                response.raise_for_status()
                total = int(response.headers.get("content-length", 0))
                done = 0
                with open(partial, "wb") as f:
                    async for chunk in response.aiter_bytes(1 << 20):
                        f.write(chunk)
                        done += len(chunk)
                        if total:
                            print(f"\r   {done / total:6.1%}", end="", flush=True)
        print()
        partial.rename(archive)
        return archive

    def extract(self, archive: Path):
        print(f"📂 展開中: {archive.name}")
        with tarfile.open(archive, "r:gz") as tar:
            tar.extractall(self.target, filter="data")

    def verify(self, variant: CifarVariant) -> bool:
        """各分割の枚数・クラス分布と先頭レコードの値域を確認"""
        ok = True
        for split in Split:
            handle = load_cifar(self.target, variant, split)
            counts = handle.class_counts()
            first = handle[0]
            if first.pixels.min() < 0.0 or first.pixels.max() > 1.0 or not 0 <= first.label < handle.classes:
                print(f"❌ {variant.value} {split.value}: 先頭レコードが不正です (label={first.label})")
                ok = False
                continue
            print(f"✅ {variant.value} {split.value}: {len(handle)} 枚, クラスあたり {counts.min()}〜{counts.max()}")
        return ok


async def main():
    """メイン関数"""
    parser = argparse.ArgumentParser(description="CIFAR 取得ツール")
    parser.add_argument("--dataset", choices=[v.value for v in CifarVariant], default="cifar10")
    parser.add_argument("--data-dir", default=settings.data.data_dir or "./data",
                        help="保存先（既定: $BIASBLEND_DATA または ./data）")
    args = parser.parse_args()

    variant = CifarVariant(args.dataset)
    fetcher = CifarFetcher(Path(args.data_dir))
    try:
        archive = await fetcher.download(ARCHIVES[variant])
    except httpx.HTTPError as e:
        print(f"❌ ダウンロードに失敗しました: {e}")
        sys.exit(1)
    fetcher.extract(archive)
    if not fetcher.verify(variant):
        sys.exit(1)
    print(f"\n💡 export BIASBLEND_DATA={Path(args.data_dir).resolve()}")


if __name__ == "__main__":
    asyncio.run(main())
