"""
biasblend - 事前モデルの重みを補間して MLP に帰納バイアスを段階的に注入する I-MLP ライブラリ
"""

__version__ = "0.1.0"
__author__ = "biasblend developers"
