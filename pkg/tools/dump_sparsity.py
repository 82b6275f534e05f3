#!/usr/bin/env python3
"""
スパース性ダンプ - 事前モデル各層の W_P 非ゼロパターンを PGM 画像で書き出す
"""
import sys
import argparse
from pathlib import Path

# プロジェクトルートディレクトリをパスに追加
sys.path.insert(0, str(Path(__file__).parent.parent))

from src.checkpoint import load_checkpoint
from src.models import build_mixer, build_scnn, extract_prior_fc
from src.structured_ops import write_sparsity_pgm


def main():
    """メイン関数"""
    parser = argparse.ArgumentParser(description="W_P スパース性ダンプ")
    parser.add_argument("prior", choices=["cnn", "mixer"], help="事前モデルの種類")
    parser.add_argument("--checkpoint", help="学習済み事前モデル（省略時は初期化直後）")
    parser.add_argument("--out", default="sparsity", help="出力ディレクトリ")
    args = parser.parse_args()

    if args.checkpoint:
        prior, _ = load_checkpoint(args.checkpoint)
    else:
        prior = build_scnn() if args.prior == "cnn" else build_mixer()

    print(f"🔍 {prior.arch} の W_P を抽出中...")
    for index, fc in enumerate(extract_prior_fc(prior), start=1):
        path = write_sparsity_pgm(fc, Path(args.out) / f"{prior.arch}-layer{index}.pgm")
        density = (fc.matrix != 0).mean()
        print(f"  📄 {path}  {fc.matrix.shape[0]}×{fc.matrix.shape[1]}  非ゼロ率 {density:.4f}")
    print("✅ 完了")


if __name__ == "__main__":
    main()
